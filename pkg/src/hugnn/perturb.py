"""Graph corruption protocols for robustness evaluation.

All perturbations copy the bundle; the input is never mutated, and
identical (spec, seed) pairs reproduce identical outputs.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .graph import DatasetBundle, Graph
from .model import HyperParams, ModelParams, forward
from .rng import Rng
from .tensor import Tensor

KINDS = ("drop_edge", "feature_noise", "greedy_flip")


@dataclass
class PerturbSpec:
    kind: str
    intensity: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ContractError(f"unknown perturbation '{self.kind}'; expected {KINDS}")
        if self.kind in ("drop_edge", "greedy_flip"):
            if not 0.0 <= self.intensity < 1.0:
                raise ContractError(
                    f"{self.kind} ratio must be in [0,1), got {self.intensity}")
        elif self.intensity < 0.0:
            raise ContractError(f"feature_noise scale must be >= 0, got {self.intensity}")


def perturb(bundle: DatasetBundle, spec: PerturbSpec) -> DatasetBundle:
    rng = Rng(spec.seed).child("perturb")
    if spec.kind == "drop_edge":
        return _drop_edge(bundle, spec.intensity, rng)
    if spec.kind == "feature_noise":
        return _feature_noise(bundle, spec.intensity, rng)
    return _greedy_flip(bundle, spec.intensity)


def _drop_edge(bundle: DatasetBundle, ratio: float, rng: Rng) -> DatasetBundle:
    """Remove floor(ratio * m) undirected edges chosen uniformly."""
    m = bundle.graph.m
    k = int(ratio * m)
    if k >= m and m > 0:
        raise ContractError(f"cannot drop {k} of {m} edges")
    keep = np.ones(m, dtype=bool)
    if k > 0:
        drop_idx = rng.choice(np.arange(m), size=k, replace=False)
        keep[drop_idx] = False
    edges = [tuple(e) for e in bundle.graph.edges[keep]]
    return DatasetBundle(graph=Graph(bundle.n, edges),
                         features=bundle.features.copy(),
                         labels=bundle.labels.copy(),
                         roles=bundle.roles.copy(),
                         name=f"{bundle.name}+drop{ratio:g}")


def _feature_noise(bundle: DatasetBundle, eps: float, rng: Rng) -> DatasetBundle:
    """Add a random-direction vector of l2 norm exactly eps*|x_i| per node."""
    features = bundle.features.copy()
    if eps > 0.0:
        n, d = features.shape
        direction = rng.normal(n, d)
        norms = np.linalg.norm(direction, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        direction /= norms
        radius = eps * np.linalg.norm(features, axis=1, keepdims=True)
        features += radius * direction
    return DatasetBundle(graph=Graph(bundle.n, [tuple(e) for e in bundle.graph.edges]),
                         features=features,
                         labels=bundle.labels.copy(),
                         roles=bundle.roles.copy(),
                         name=f"{bundle.name}+fnoise{eps:g}")


def _greedy_flip(bundle: DatasetBundle, ratio: float) -> DatasetBundle:
    """Insert floor(ratio * m) adversarial cross-class edges.

    Each insertion links a currently-unlinked different-label pair of
    maximal degree sum (deterministic tie-breaking), then updates degrees,
    mimicking structural attacks that wire high-degree nodes across
    classes.
    """
    g = bundle.graph
    labels = bundle.labels
    if np.any(labels < 0):
        raise ContractError("greedy_flip needs fully labeled nodes")
    if np.unique(labels).size < 2:
        raise ContractError("greedy_flip needs at least two classes; "
                            "no cross-class pair exists")
    budget = int(ratio * g.m)
    edges = {tuple(e) for e in g.edges}
    degrees = g.degrees().astype(np.int64).copy()
    for _ in range(budget):
        pair = _best_cross_pair(degrees, labels, edges)
        if pair is None:
            break
        u, v = pair
        edges.add((u, v))
        degrees[u] += 1
        degrees[v] += 1
    return DatasetBundle(graph=Graph(bundle.n, sorted(edges)),
                         features=bundle.features.copy(),
                         labels=bundle.labels.copy(),
                         roles=bundle.roles.copy(),
                         name=f"{bundle.name}+flip{ratio:g}")


def _best_cross_pair(degrees: np.ndarray, labels: np.ndarray,
                     edges: set) -> tuple[int, int] | None:
    """An unlinked different-label pair of maximal degree sum.

    Nodes are ranked by (degree desc, id asc) and candidate index pairs
    explored best-first over the pair lattice; the degree sum is monotone
    along lattice edges, so the first valid pop has maximal sum. Among
    equal sums the choice is deterministic but not otherwise specified.
    """
    n = degrees.shape[0]
    order = sorted(range(n), key=lambda i: (-degrees[i], i))

    def key(i: int, j: int) -> tuple:
        a, b = order[i], order[j]
        u, v = (a, b) if a < b else (b, a)
        return (-(degrees[a] + degrees[b]), u, v)

    heap = [(*key(0, 1), 0, 1)]
    seen = {(0, 1)}
    while heap:
        _, u, v, i, j = heapq.heappop(heap)
        if labels[u] != labels[v] and (u, v) not in edges:
            return u, v
        if j + 1 < n and (i, j + 1) not in seen:
            seen.add((i, j + 1))
            heapq.heappush(heap, (*key(i, j + 1), i, j + 1))
        if i + 1 < j and (i + 1, j) not in seen:
            seen.add((i + 1, j))
            heapq.heappush(heap, (*key(i + 1, j), i + 1, j))
    return None


def feature_pgd(bundle: DatasetBundle, params: ModelParams, hyper: HyperParams,
                u0: np.ndarray, eps: float, steps: int = 5) -> DatasetBundle:
    """White-box feature attack: ascend the model's own NLL over labeled
    nodes with normalized gradient steps of size eps/steps (relative to
    each node's feature norm), projecting back into the relative eps-ball
    after every step."""
    if eps < 0.0:
        raise ContractError(f"eps must be >= 0, got {eps}")
    if eps == 0.0 or steps < 1:
        return _feature_noise(bundle, 0.0, Rng(0))
    base = bundle.features
    radius = eps * np.linalg.norm(base, axis=1, keepdims=True)
    step_size = radius / steps
    labeled = np.flatnonzero(bundle.labels >= 0)
    x = base.copy()
    for _ in range(steps):
        xt = Tensor(x, requires_grad=True)
        with T.Tape() as tape:
            state = forward(bundle, params, hyper, train_mode=False, u0=u0,
                            features_override=xt)
            p_true = T.pick_cols(T.take_rows(state.probs_t, labeled),
                                 bundle.labels[labeled])
            loss = T.scale(T.mean_all(T.log(T.clamp_min(p_true, 1e-12))), -1.0)
            T.backward(tape, loss)
        grad = xt.grad if xt.grad is not None else np.zeros_like(x)
        norms = np.linalg.norm(grad, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        x = x + step_size * grad / norms
        delta = x - base
        dn = np.linalg.norm(delta, axis=1, keepdims=True)
        too_far = dn > radius
        scalefix = np.where(too_far, radius / np.maximum(dn, 1e-30), 1.0)
        x = base + delta * scalefix
    out = DatasetBundle(graph=Graph(bundle.n, [tuple(e) for e in bundle.graph.edges]),
                        features=x,
                        labels=bundle.labels.copy(),
                        roles=bundle.roles.copy(),
                        name=f"{bundle.name}+pgd{eps:g}")
    return out
