"""Composite-loss training: NLL plus sharpening and calibration terms,
temperature annealing, an ECE-driven multiplier schedule for the
calibration weight, early stopping, and best-on-validation checkpointing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .graph import DatasetBundle
from .metrics import accuracy, ece
from .model import (HyperParams, ModelParams, ModelState, build_params,
                    forward, init_uncertainty)
from .optim import AdamState, adam_step, clip_grads
from .rng import Rng
from .tensor import Tensor, constant

_PROB_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    nll: float
    sharp: float
    calib: float
    total: float


@dataclass
class TrainConfig:
    hyper: HyperParams = field(default_factory=HyperParams)
    patience: int = 50
    beta2_check_every: int = 10
    beta2_up: float = 1.2
    beta2_down: float = 0.8
    ece_hi: float = 0.05
    ece_lo: float = 0.02
    beta2_single_shot: bool = False
    init_epochs: int = 100

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        if not self.beta2_up > 1.0 > self.beta2_down > 0.0:
            raise ContractError("need up > 1 > down > 0 for the calibration schedule")


@dataclass
class MetricsRecord:
    epoch: int
    nll: float
    sharp: float
    calib: float
    total: float
    train_acc: float
    val_acc: float
    test_acc: float
    ece: float
    mean_u_local: float
    mean_u_comm: float
    u_global: float
    temperature: float
    beta1: float
    beta2: float
    seed: int
    wall_ms: float

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainResult:
    params: ModelParams               # restored to the best-validation epoch
    u0: np.ndarray
    history: list
    best_epoch: int
    best_val_acc: float
    test_acc: float
    final_beta2: float


# ---------------------------------------------------------------------------
# loss terms


def loss_nll(probs: Tensor, labels: np.ndarray, train_idx: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the labeled nodes (floored at 1e-12)."""
    if train_idx.size == 0:
        raise ContractError("nll needs a non-empty train set")
    p_true = T.pick_cols(T.take_rows(probs, train_idx), labels[train_idx])
    return T.scale(T.mean_all(T.log(T.clamp_min(p_true, _PROB_FLOOR))), -1.0)


def loss_sharp(probs_value: np.ndarray, labels: np.ndarray, u: Tensor,
               train_idx: np.ndarray) -> Tensor:
    """Mean uncertainty of the *correctly* predicted train nodes — pushing
    it down sharpens confident predictions without rewarding wrong ones."""
    if train_idx.size == 0:
        raise ContractError("sharpness loss needs a non-empty train set")
    pred = np.argmax(probs_value[train_idx], axis=1)
    correct = (pred == labels[train_idx]).astype(float).reshape(-1, 1)
    return T.mean_all(T.hadamard(T.take_rows(u, train_idx), constant(correct)))


def loss_calib(u: Tensor, tau_calib: float) -> Tensor:
    """Mean squared hinge pushing per-node uncertainty back above the margin:
    (1/n) sum max(0, tau - u_i)^2 over every node."""
    margin = T.relu(T.sub(constant(np.full(u.shape, tau_calib)), u))
    return T.mean_all(T.hadamard(margin, margin))


def composite_loss(state: ModelState, bundle: DatasetBundle, beta1: float,
                   beta2: float, tau_calib: float) -> tuple[Tensor, LossBreakdown]:
    train_idx = np.flatnonzero(bundle.mask("train"))
    nll = loss_nll(state.probs_t, bundle.labels, train_idx)
    sharp = loss_sharp(state.probs_t.data, bundle.labels, state.u_final_t, train_idx)
    calib = loss_calib(state.u_final_t, tau_calib)
    total = T.add(nll, T.add(T.scale(sharp, beta1), T.scale(calib, beta2)))
    breakdown = LossBreakdown(nll=nll.item(), sharp=sharp.item(),
                              calib=calib.item(), total=total.item())
    return total, breakdown


# ---------------------------------------------------------------------------
# schedules


def temperature_at(epoch: int, total_epochs: int, temp_start: float,
                   temp_end: float) -> float:
    """Geometric interpolation from temp_start (epoch 1) to temp_end (last)."""
    if total_epochs <= 1:
        return temp_start
    frac = (epoch - 1) / (total_epochs - 1)
    frac = min(max(frac, 0.0), 1.0)
    return temp_start * (temp_end / temp_start) ** frac


def beta2_update(beta2: float, ece_value: float, up: float = 1.2,
                 down: float = 0.8, hi: float = 0.05, lo: float = 0.02) -> float:
    """Pure multiplier rule: scale up iff ECE exceeds `hi`, down iff below
    `lo`, otherwise unchanged."""
    if ece_value > hi:
        return beta2 * up
    if ece_value < lo:
        return beta2 * down
    return beta2


def calibration_warmup(bundle: DatasetBundle, params: ModelParams,
                       hyper: HyperParams, u0: np.ndarray | None = None
                       ) -> tuple[float, float]:
    """Rescale the auxiliary weights from one probe pass so each term starts
    at its configured fraction of the NLL.

    Runs a noiseless forward, measures the raw term magnitudes, and returns
    (beta1', beta2') with beta_k' = beta_k * nll / term_k; a zero term keeps
    its beta. Deterministic, so repeated calls agree.
    """
    state = forward(bundle, params, hyper, train_mode=False, u0=u0)
    _, raw = composite_loss(state, bundle, beta1=0.0, beta2=0.0,
                            tau_calib=hyper.tau_calib)
    beta1 = hyper.beta1 * raw.nll / raw.sharp if raw.sharp > 0 else hyper.beta1
    beta2 = hyper.beta2 * raw.nll / raw.calib if raw.calib > 0 else hyper.beta2
    return beta1, beta2


# ---------------------------------------------------------------------------
# evaluation and the loop


def evaluate(bundle: DatasetBundle, params: ModelParams, hyper: HyperParams,
             u0: np.ndarray | None) -> tuple[ModelState, dict]:
    """Noiseless forward plus the standard metric set.

    Graphs without validation nodes fall back to the train split for
    val_acc/val_ece so model selection and the calibration schedule stay
    defined.
    """
    state = forward(bundle, params, hyper, train_mode=False, u0=u0)
    labels = bundle.labels
    out: dict = {}
    for role in ("train", "val", "test"):
        mask = bundle.mask(role)
        out[f"{role}_acc"] = accuracy(state.probs, labels, mask) if mask.any() else 0.0
    val_mask = bundle.mask("val")
    if not val_mask.any():
        val_mask = bundle.mask("train")
        out["val_acc"] = out["train_acc"]
    out["val_ece"] = ece(state.probs, labels, val_mask).ece if val_mask.any() else 0.0
    test_mask = bundle.mask("test")
    out["test_ece"] = ece(state.probs, labels, test_mask).ece if test_mask.any() else 0.0
    out["mean_u_local"] = float(np.mean(state.u_layers[-1]))
    out["mean_u_comm"] = (float(np.mean(state.community_u[~state.empty_communities]))
                          if state.community_u is not None
                          and (~state.empty_communities).any() else 0.0)
    out["u_global"] = state.global_u if state.global_u is not None else 0.0
    return state, out


def train(bundle: DatasetBundle, config: TrainConfig, rng: Rng,
          params: ModelParams | None = None) -> TrainResult:
    """Full-batch training loop.

    Per epoch: anneal the assignment temperature, run a sampled forward,
    backprop the composite loss, clip to global norm 5, and take one Adam
    step over the live parameters (the pre-trained feature classifier stays
    frozen; ablated tensors are excluded so their gradients remain zero).
    Every `beta2_check_every` epochs the calibration weight is rescaled
    from validation ECE. The best-validation-accuracy parameters are kept
    and restored before returning.
    """
    hyper = config.hyper
    if params is None:
        params = build_params(bundle, hyper, rng.child("init"))
    u0 = init_uncertainty(bundle, params, rng.child("init-clf"),
                          epochs=config.init_epochs, lr=hyper.lr)
    live = params.trainable(hyper.ablate)
    opt = AdamState(lr=hyper.lr, weight_decay=hyper.weight_decay)
    noise_root = rng.child("noise")

    beta2 = hyper.beta2
    history: list[MetricsRecord] = []
    best_val = -1.0
    best_epoch = 0
    best_test = 0.0
    best_snapshot: dict[str, np.ndarray] = {}
    wait = 0

    for epoch in range(1, hyper.epochs + 1):
        started = time.perf_counter()
        temp = temperature_at(epoch, hyper.epochs, hyper.temp_start, hyper.temp_end)
        with T.Tape() as tape:
            state = forward(bundle, params, hyper, train_mode=True,
                            temperature=temp, rng=noise_root.child(f"e{epoch}"),
                            u0=u0)
            total, breakdown = composite_loss(state, bundle, hyper.beta1,
                                              beta2, hyper.tau_calib)
            if not np.isfinite(breakdown.total):
                raise NumericError(
                    "loss diverged", diagnostics={
                        "epoch": epoch, "nll": breakdown.nll,
                        "sharp": breakdown.sharp, "calib": breakdown.calib,
                        "temperature": temp, "beta2": beta2,
                    })
            T.backward(tape, total)
        clip_grads(live, 5.0)
        adam_step(live, opt)
        T.zero_grads(live.values())

        _, metrics = evaluate(bundle, params, hyper, u0)
        history.append(MetricsRecord(
            epoch=epoch, nll=breakdown.nll, sharp=breakdown.sharp,
            calib=breakdown.calib, total=breakdown.total,
            train_acc=metrics["train_acc"], val_acc=metrics["val_acc"],
            test_acc=metrics["test_acc"], ece=metrics["val_ece"],
            mean_u_local=metrics["mean_u_local"],
            mean_u_comm=metrics["mean_u_comm"], u_global=metrics["u_global"],
            temperature=temp, beta1=hyper.beta1, beta2=beta2,
            seed=hyper.seed, wall_ms=(time.perf_counter() - started) * 1e3))

        if metrics["val_acc"] > best_val:
            best_val = metrics["val_acc"]
            best_epoch = epoch
            best_test = metrics["test_acc"]
            best_snapshot = {k: v.data.copy() for k, v in params.tensors.items()}
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break

        if epoch % config.beta2_check_every == 0:
            fire = (not config.beta2_single_shot) or epoch == config.beta2_check_every
            if fire:
                beta2 = beta2_update(beta2, metrics["val_ece"], up=config.beta2_up,
                                     down=config.beta2_down, hi=config.ece_hi,
                                     lo=config.ece_lo)

    if best_snapshot:
        for name, value in best_snapshot.items():
            params.tensors[name].data = value
    return TrainResult(params=params, u0=u0, history=history,
                       best_epoch=best_epoch, best_val_acc=best_val,
                       test_acc=best_test, final_beta2=beta2)
