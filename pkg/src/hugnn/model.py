"""Uncertainty-gated hierarchical GNN forward computation.

The model runs three scales per forward pass:

1. local layers — per-node projections with attention over neighbors,
   gated by freshly computed per-node uncertainty, then a low/high
   frequency recombination keyed on ego/aggregate cosine similarity;
2. community scale — straight-through categorical assignment of nodes to
   communities, mean pooling, variance-based community uncertainty;
3. global scale — mean over non-empty communities with its own
   uncertainty.

A fusion head mixes {local, community, global} candidates per node with
weights proportional to exp(attention score) * exp(-uncertainty), then a
linear classifier with row softmax produces class probabilities.

`ablate` is a set drawn from {"community", "global", "uncertainty"}:
removing a scale drops its fusion candidate (renormalizing the rest);
removing uncertainty replaces every exp(-u) gate with 1 while u itself is
still computed and reported.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .graph import DatasetBundle, Graph
from .optim import AdamState, adam_step
from .rng import Rng
from .tensor import Tensor, constant

ABLATABLE = ("community", "global", "uncertainty")


def parse_ablate(text: str) -> frozenset[str]:
    """Parse 'none', 'community', 'community+global', 'a,b' style flags."""
    text = (text or "none").strip().lower()
    if text in ("", "none"):
        return frozenset()
    parts = [p for chunk in text.split("+") for p in chunk.split(",") if p]
    for p in parts:
        if p not in ABLATABLE:
            raise ConfigError(f"unknown ablation '{p}'; expected subset of {ABLATABLE}")
    return frozenset(parts)


@dataclass
class HyperParams:
    hidden_dim: int = 64
    layers: int = 2
    communities: int = 0          # 0 -> max(2, round(sqrt(n)))
    temp_start: float = 1.0
    temp_end: float = 0.1
    dropout: float = 0.5
    tau_calib: float = 0.1
    beta1: float = 0.3
    beta2: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 200
    seed: int = 0
    ablate: frozenset = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.communities < 0:
            raise ConfigError(f"communities must be >= 0, got {self.communities}")
        if not 0.0 < self.temp_end <= self.temp_start:
            raise ConfigError(
                f"need 0 < temp_end <= temp_start, got {self.temp_end}, {self.temp_start}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        if isinstance(self.ablate, str):
            self.ablate = parse_ablate(self.ablate)
        else:
            self.ablate = frozenset(self.ablate)
        for p in self.ablate:
            if p not in ABLATABLE:
                raise ConfigError(f"unknown ablation '{p}'")


def resolve_communities(hyper: HyperParams, n: int) -> int:
    if hyper.communities > 0:
        return hyper.communities
    return max(2, int(round(math.sqrt(n))))


# ---------------------------------------------------------------------------
# parameters


class ModelParams:
    """All learnable tensors, keyed by name.

    Shapes (hidden F', input d, classes C, communities M, layers L):
      w_proj_<l>  F' x F_in   per-layer projection (F_in = d for l=0)
      attn_<l>    2F' x 1     per-layer attention vector
      w_assign    M x F'      community score matrix (rows are w_m)
      w_pool      F' x F'     community pooling projection
      w_global    F' x F'     global integration projection
      attn_fuse   2F' x 1     fusion attention vector
      w_cls       C x F'      classifier
      fu_w, fu_b  1 x 1       shared uncertainty head sigmoid(w*s + b)
      mlp_*                   feature-only classifier for initial uncertainty
                              (pre-trained then frozen)
    """

    def __init__(self, d: int, num_classes: int, hidden: int, layers: int,
                 m_communities: int, rng: Rng, mlp_hidden: int = 64) -> None:
        if min(d, num_classes, hidden, layers, m_communities) < 1:
            raise ContractError("all model dimensions must be positive")
        self.d = d
        self.num_classes = num_classes
        self.hidden = hidden
        self.layers = layers
        self.m_communities = m_communities
        self.mlp_hidden = mlp_hidden
        t: dict[str, Tensor] = {}
        f_in = d
        for layer in range(layers):
            t[f"w_proj_{layer}"] = _glorot(hidden, f_in, rng)
            t[f"attn_{layer}"] = _uniform_vec(2 * hidden, rng)
            f_in = hidden
        t["w_assign"] = _glorot(m_communities, hidden, rng)
        t["w_pool"] = _glorot(hidden, hidden, rng)
        t["w_global"] = _glorot(hidden, hidden, rng)
        t["attn_fuse"] = _uniform_vec(2 * hidden, rng)
        t["w_cls"] = _glorot(num_classes, hidden, rng)
        t["fu_w"] = Tensor([[1.0]], requires_grad=True)
        t["fu_b"] = Tensor([[0.0]], requires_grad=True)
        t["mlp_w1"] = _glorot_rows(d, mlp_hidden, rng)
        t["mlp_b1"] = Tensor(np.zeros((1, mlp_hidden)), requires_grad=True)
        t["mlp_w2"] = _glorot_rows(mlp_hidden, num_classes, rng)
        t["mlp_b2"] = Tensor(np.zeros((1, num_classes)), requires_grad=True)
        self.tensors = t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self, ablate: frozenset = frozenset()) -> dict[str, Tensor]:
        """Parameters updated by the main loop: everything except the frozen
        feature classifier and any tensors dead under the given ablation."""
        dead = dead_param_names(ablate)
        return {k: v for k, v in self.tensors.items()
                if not k.startswith("mlp_") and k not in dead}

    def mlp_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("mlp_")}


def dead_param_names(ablate: frozenset) -> set[str]:
    """Tensors with no path to the loss under an ablation.

    Dropping only the community fusion candidate keeps pooling alive (the
    global embedding is built from pooled communities), so nothing dies;
    dropping global kills only its projection; dropping both removes the
    whole upper hierarchy, including the fusion attention (a single
    candidate needs no weighting).
    """
    if "community" in ablate and "global" in ablate:
        return {"w_assign", "w_pool", "w_global", "attn_fuse"}
    if "global" in ablate:
        return {"w_global"}
    return set()


def _glorot(rows: int, cols: int, rng: Rng) -> Tensor:
    limit = math.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(rows, cols, -limit, limit), requires_grad=True)


def _glorot_rows(rows: int, cols: int, rng: Rng) -> Tensor:
    return _glorot(rows, cols, rng)


def _uniform_vec(length: int, rng: Rng) -> Tensor:
    return Tensor(rng.uniform(length, 1, -0.1, 0.1), requires_grad=True)


# ---------------------------------------------------------------------------
# state


@dataclass
class ModelState:
    """Snapshot of one forward pass: numpy copies for inspection plus the
    live tensors the loss terms need (class probabilities, final-layer
    node uncertainty)."""

    u0: np.ndarray
    h_layers: list
    u_layers: list
    edge_attn: list
    assign_soft: np.ndarray | None
    assign_ids: np.ndarray | None
    community_h: np.ndarray | None
    community_u: np.ndarray | None
    community_sizes: np.ndarray | None
    empty_communities: np.ndarray | None
    global_h: np.ndarray | None
    global_u: float | None
    lam: np.ndarray
    temperature: float
    probs_t: Tensor
    u_final_t: Tensor

    @property
    def probs(self) -> np.ndarray:
        return self.probs_t.data

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs_t.data, axis=1)

    def to_json_dict(self) -> dict:
        """Inspection export: per-node uncertainty, fusion weights,
        assignment, prediction."""
        return {
            "u_final": [float(x) for x in self.u_layers[-1]],
            "lambda": [[float(x) for x in row] for row in self.lam],
            "assignment": ([int(i) for i in self.assign_ids]
                           if self.assign_ids is not None else None),
            "predicted": [int(c) for c in self.predictions],
            "global_u": self.global_u,
            "temperature": self.temperature,
        }


# ---------------------------------------------------------------------------
# pieces of the forward pass


def _edge_endpoints(graph: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Directed view aligned with graph.indices: (src, dst) per entry."""
    src = np.repeat(np.arange(graph.n, dtype=np.int64), graph.degrees())
    return src, graph.indices


def _fu(params: ModelParams, s: Tensor) -> Tensor:
    """Shared uncertainty head: sigmoid(w * s + b) on a column of scalars.

    float64 rounds the logistic to exactly 0.0 or 1.0 once |w*s + b|
    passes ~37; uncertainty scores are contracted to stay strictly inside
    (0, 1), so both boundaries are nudged off by 1e-12.
    """
    raw = T.sigmoid(T.add(T.hadamard(s, params["fu_w"]), params["fu_b"]))
    one = T.constant(1.0)
    capped = T.sub(one, T.clamp_min(T.sub(one, raw), 1e-12))
    return T.clamp_min(capped, 1e-12)


def gate_attention(th: np.ndarray, u: np.ndarray | None, graph: Graph,
                   attn_vec: np.ndarray) -> np.ndarray:
    """Pure-numpy attention weights: softmax over each node's neighbors of
    a^T [th_i || th_j] minus (when given) the neighbor's uncertainty.

    Mirrors the differentiable path bit-for-bit; used by tests and by the
    fixed-point probe, where embeddings are frozen and only u varies.
    """
    src, dst = _edge_endpoints(graph)
    if src.size == 0:
        return np.zeros(0)
    e = np.hstack([th[src], th[dst]]) @ attn_vec.reshape(-1, 1)
    e = e[:, 0]
    if u is not None:
        e = e - np.asarray(u).reshape(-1)[dst]
    seg_max = np.full(graph.n, -np.inf)
    np.maximum.at(seg_max, src, e)
    z = np.exp(e - seg_max[src])
    denom = np.zeros(graph.n)
    np.add.at(denom, src, z)
    return z / denom[src]


def local_layer(h_in: Tensor, u_prev: Tensor, graph: Graph, w_proj: Tensor,
                attn_vec: Tensor, params: ModelParams, use_uncertainty: bool
                ) -> tuple[Tensor, Tensor, Tensor]:
    """One node-scale layer.

    Projects the input, computes per-node uncertainty from the mean squared
    deviation to neighbors (before attention, so the gate sees this layer's
    values — u_prev is carried for interface continuity but the update is
    variance-only), gates neighbor attention by exp(-u_j), and recombines
    the ego embedding with the aggregate's low/high frequency split.

    Returns (h_out [n x F'], u_out [n x 1], attention [directed-edge x 1]).
    """
    n = graph.n
    th = T.matmul(h_in, T.transpose(w_proj))
    src, dst = _edge_endpoints(graph)

    if src.size:
        diffs = T.sub(T.take_rows(th, src), T.take_rows(th, dst))
        sq = T.sq_norm_rows(diffs)
        sums = T.segment_sum_rows(sq, src, n)
    else:
        sums = constant(np.zeros((n, 1)))
    inv_deg = 1.0 / np.maximum(graph.degrees(), 1).reshape(-1, 1)
    u_out = _fu(params, T.hadamard(sums, constant(inv_deg)))

    if src.size == 0:
        l_agg = constant(np.zeros((n, th.cols)))
        attn = constant(np.zeros((0, 1)))
    else:
        cat = T.concat_cols(T.take_rows(th, src), T.take_rows(th, dst))
        e = T.matmul(cat, attn_vec)
        if use_uncertainty:
            e = T.sub(e, T.take_rows(u_out, dst))
        # per-neighborhood softmax; subtracting the (detached) segment max
        # is exact because softmax is shift-invariant
        seg_max = np.full(n, -np.inf)
        np.maximum.at(seg_max, src, e.data[:, 0])
        z = T.exp(T.sub(e, constant(seg_max[src].reshape(-1, 1))))
        denom = T.take_rows(T.segment_sum_rows(z, src, n), src)
        attn = T.div(z, denom)
        l_agg = T.segment_sum_rows(T.hadamard(attn, T.take_rows(th, dst)), src, n)

    d_res = T.sub(th, l_agg)
    p = T.cosine_rows(th, l_agg)
    one = constant(np.ones((n, 1)))
    mix = T.add(T.hadamard(p, l_agg), T.hadamard(T.sub(one, p), d_res))
    h_out = T.relu(T.add(th, mix))
    return h_out, u_out, attn


def assign_communities(h: Tensor, params: ModelParams, temperature: float,
                       rng: Rng | None, train_mode: bool,
                       hard: bool = True, noise: np.ndarray | None = None
                       ) -> tuple[Tensor, Tensor, np.ndarray]:
    """Categorical community membership via straight-through sampling.

    Returns (z, soft, ids). With hard=True, z carries one-hot rows forward
    and the soft distribution's gradient backward; hard=False keeps the
    soft rows as z (used by gradient checks, where the argmax jump would
    break finite differences).
    """
    scores = T.matmul(h, T.transpose(params["w_assign"]))
    probs = T.row_softmax(scores)
    soft, st = T.gumbel_softmax_st(probs, temperature, rng, train_mode, noise=noise)
    z = st if hard else soft
    ids = np.argmax(st.data, axis=1)
    return z, soft, ids


def pool_communities(h: Tensor, z: Tensor, params: ModelParams
                     ) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Mean-pool projected members per community and score the spread.

    h_C rows are member means of W_pool·h; u_C applies the shared
    uncertainty head to the mean squared member deviation from the pooled
    embedding. Empty communities get a zero embedding and uncertainty
    pinned to 1, and are flagged in the returned mask.
    """
    n = z.rows
    proj = T.matmul(h, T.transpose(params["w_pool"]))
    z_t = T.transpose(z)
    sums = T.matmul(z_t, proj)
    counts = T.transpose(T.matmul(constant(np.ones((1, n))), z))   # M x 1
    safe_counts = T.clamp_min(counts, 1e-12)
    h_c = T.div(sums, safe_counts)

    # squared distance of each member to its community mean, averaged
    assigned = T.matmul(z, h_c)
    sq = T.sq_norm_rows(T.sub(proj, assigned))
    dev = T.div(T.matmul(z_t, sq), safe_counts)
    u_c_raw = _fu(params, dev)

    sizes = counts.data[:, 0].copy()
    empty = sizes <= 0.0
    if np.any(empty):
        live = constant((~empty).astype(float).reshape(-1, 1))
        dead = constant(empty.astype(float).reshape(-1, 1))
        u_c = T.add(T.hadamard(u_c_raw, live), dead)
    else:
        u_c = u_c_raw
    return h_c, u_c, sizes, empty


def global_integrate(h_c: Tensor, params: ModelParams, empty: np.ndarray
                     ) -> tuple[Tensor, Tensor]:
    """Average the projected non-empty communities into one global row and
    score its spread with the shared uncertainty head."""
    live = ~np.asarray(empty, dtype=bool)
    k = int(live.sum())
    if k == 0:
        raise ContractError("global integration needs at least one non-empty community")
    proj = T.matmul(h_c, T.transpose(params["w_global"]))
    weights = constant((live.astype(float) / k).reshape(1, -1))
    h_g = T.matmul(weights, proj)
    sq = T.sq_norm_rows(T.sub(proj, h_g))
    dev = T.matmul(weights, sq)
    u_g = _fu(params, dev)
    return h_g, u_g


def fuse_and_classify(h: Tensor, u: Tensor, z: Tensor | None,
                      h_c: Tensor | None, u_c: Tensor | None,
                      h_g: Tensor | None, u_g: Tensor | None,
                      params: ModelParams, ablate: frozenset
                      ) -> tuple[Tensor, np.ndarray]:
    """Blend per-node {local, community, global} candidates and classify.

    Candidate weights are softmax over exp(a^T[h_i||h_v]) * exp(-u_v),
    with ablated candidates removed before normalization and uncertainty
    gates dropped under the uncertainty ablation. Returns (probabilities,
    lambda matrix n x 3 with zeros in ablated columns).
    """
    n = h.rows
    use_u = "uncertainty" not in ablate
    candidates: list[tuple[int, Tensor, Tensor]] = [(0, h, u)]
    if "community" not in ablate:
        if h_c is None or z is None:
            raise ContractError("community candidate requested but not computed")
        candidates.append((1, T.matmul(z, h_c), T.matmul(z, u_c)))
    if "global" not in ablate:
        if h_g is None:
            raise ContractError("global candidate requested but not computed")
        tile = constant(np.ones((n, 1)))
        candidates.append((2, T.matmul(tile, h_g), T.matmul(tile, u_g)))

    logits = []
    for _, h_v, u_v in candidates:
        alpha = T.matmul(T.concat_cols(h, h_v), params["attn_fuse"])
        logits.append(T.sub(alpha, u_v) if use_u else alpha)
    if len(logits) == 1:
        lam = constant(np.ones((n, 1)))
    else:
        stacked = logits[0]
        for extra in logits[1:]:
            stacked = T.concat_cols(stacked, extra)
        lam = T.row_softmax(stacked)

    h_final = None
    k = len(candidates)
    for col, (_, h_v, _) in enumerate(candidates):
        pick = np.zeros((k, 1))
        pick[col, 0] = 1.0
        w_col = T.matmul(lam, constant(pick))
        term = T.hadamard(w_col, h_v)
        h_final = term if h_final is None else T.add(h_final, term)

    probs = T.row_softmax(T.matmul(h_final, T.transpose(params["w_cls"])))

    lam_full = np.zeros((n, 3))
    for col, (slot, _, _) in enumerate(candidates):
        lam_full[:, slot] = lam.data[:, col]
    return probs, lam_full


# ---------------------------------------------------------------------------
# initial uncertainty


def init_uncertainty(bundle: DatasetBundle, params: ModelParams, rng: Rng,
                     epochs: int = 100, lr: float = 1e-3) -> np.ndarray:
    """Pre-train the feature-only classifier and read off one minus its
    softmax confidence per node.

    The classifier (two layers, hidden width params.mlp_hidden) trains with
    Adam on the labeled nodes only, then freezes; the returned u0 lies in
    [0, 1 - 1/C] because a softmax maximum is at least 1/C.
    """
    train_idx = np.flatnonzero(bundle.mask("train"))
    if train_idx.size == 0:
        raise ContractError("initial uncertainty needs labeled train nodes")
    del rng  # weights already initialized; kept for interface stability
    x = constant(bundle.features)
    y = bundle.labels[train_idx]
    mlp = params.mlp_params()
    state = AdamState(lr=lr)
    for _ in range(epochs):
        with T.Tape() as tape:
            probs = _mlp_probs(x, params)
            p_true = T.pick_cols(T.take_rows(probs, train_idx), y)
            loss = T.scale(T.mean_all(T.log(T.clamp_min(p_true, 1e-12))), -1.0)
            T.backward(tape, loss)
        adam_step(mlp, state)
        T.zero_grads(mlp.values())
    conf = _mlp_probs(x, params).data.max(axis=1)
    return 1.0 - conf


def _mlp_probs(x: Tensor, params: ModelParams) -> Tensor:
    hidden = T.relu(T.add(T.matmul(x, params["mlp_w1"]), params["mlp_b1"]))
    return T.row_softmax(T.add(T.matmul(hidden, params["mlp_w2"]), params["mlp_b2"]))


def compute_u0(bundle: DatasetBundle, params: ModelParams) -> np.ndarray:
    """Initial uncertainty from the already-trained feature classifier
    (inference only — use after loading a checkpoint)."""
    probs = _mlp_probs(constant(bundle.features), params)
    return 1.0 - probs.data.max(axis=1)


# ---------------------------------------------------------------------------
# full forward


def forward(bundle: DatasetBundle, params: ModelParams, hyper: HyperParams,
            *, train_mode: bool, temperature: float | None = None,
            rng: Rng | None = None, u0: np.ndarray | None = None,
            hard_assign: bool = True, gumbel_noise: np.ndarray | None = None,
            features_override: Tensor | None = None) -> ModelState:
    """Run the whole hierarchy once and snapshot every intermediate.

    In train mode, dropout applies to hidden embeddings between local
    layers and community assignment is sampled; both draw from children of
    `rng`, so an identical rng yields a bit-identical pass. Eval mode is
    noiseless (argmax assignment, no dropout) and needs no rng.
    hard_assign=False keeps soft memberships end to end, which gradient
    checks rely on.
    """
    graph = bundle.graph
    n = graph.n
    ablate = hyper.ablate
    if temperature is None:
        temperature = hyper.temp_start
    if u0 is None:
        u0 = np.full(n, 0.5)
    u0 = np.asarray(u0, dtype=np.float64).reshape(-1)
    if u0.shape != (n,):
        raise ContractError(f"u0 must have one entry per node, got {u0.shape}")
    if train_mode and rng is None and (hyper.dropout > 0.0 or gumbel_noise is None):
        raise ContractError("train-mode forward needs an rng")

    drop_rng = rng.child("dropout") if (train_mode and rng is not None) else None
    gumbel_rng = rng.child("gumbel") if (train_mode and rng is not None) else None

    h: Tensor = (features_override if features_override is not None
                 else constant(bundle.features))
    if h.shape != bundle.features.shape:
        raise ContractError(
            f"features override shape {h.shape} != bundle features "
            f"{bundle.features.shape}")
    u: Tensor = constant(u0.reshape(-1, 1))
    use_u = "uncertainty" not in ablate
    h_layers: list[np.ndarray] = []
    u_layers: list[np.ndarray] = []
    edge_attn: list[np.ndarray] = []
    for layer in range(hyper.layers):
        if train_mode and hyper.dropout > 0.0 and layer > 0:
            mask = T.dropout_mask(h.shape, hyper.dropout, drop_rng)
            h = T.hadamard(h, constant(mask))
        h, u, attn = local_layer(h, u, graph, params[f"w_proj_{layer}"],
                                 params[f"attn_{layer}"], params, use_u)
        h_layers.append(h.data.copy())
        u_layers.append(u.data[:, 0].copy())
        edge_attn.append(attn.data[:, 0].copy())

    need_communities = not ({"community", "global"} <= ablate)
    z = h_c = u_c = None
    assign_soft = assign_ids = sizes = empty = None
    if need_communities:
        z, soft, assign_ids = assign_communities(
            h, params, temperature, gumbel_rng, train_mode,
            hard=hard_assign, noise=gumbel_noise)
        h_c, u_c, sizes, empty = pool_communities(h, z, params)
        assign_soft = soft.data.copy()

    h_g = u_g = None
    if "global" not in ablate:
        h_g, u_g = global_integrate(h_c, params, empty)

    probs, lam = fuse_and_classify(h, u, z, h_c, u_c, h_g, u_g, params, ablate)

    return ModelState(
        u0=u0.copy(),
        h_layers=h_layers,
        u_layers=u_layers,
        edge_attn=edge_attn,
        assign_soft=assign_soft,
        assign_ids=assign_ids,
        community_h=h_c.data.copy() if h_c is not None else None,
        community_u=u_c.data[:, 0].copy() if u_c is not None else None,
        community_sizes=sizes,
        empty_communities=empty,
        global_h=h_g.data[0].copy() if h_g is not None else None,
        global_u=float(u_g.data[0, 0]) if u_g is not None else None,
        lam=lam,
        temperature=float(temperature),
        probs_t=probs,
        u_final_t=u,
    )


def build_params(bundle: DatasetBundle, hyper: HyperParams, rng: Rng) -> ModelParams:
    return ModelParams(d=bundle.d, num_classes=bundle.num_classes,
                       hidden=hyper.hidden_dim, layers=hyper.layers,
                       m_communities=resolve_communities(hyper, bundle.n),
                       rng=rng)
