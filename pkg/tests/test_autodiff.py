"""Gradient correctness: every op against central finite differences."""

import numpy as np
import numpy.testing as npt
import pytest

from hugnn.errors import ContractError
from hugnn.rng import Rng
from hugnn.tensor import (Tape, Tensor, backward, clamp_min, concat_cols,
                          constant, cosine_rows, div, exp, gumbel_softmax_st,
                          hadamard, log, matmul, mean_all, pick_cols, relu,
                          row_mean, row_softmax, row_sum, scale,
                          segment_sum_rows, sigmoid, sq_norm_rows, sub,
                          sum_all, take_rows, transpose, variance_rows, add,
                          zero_grads)

OP_TOL = 1e-5
FD_H = 1e-6
N_INSTANCES = 10


def _scalarize(out, weights):
    """Deterministic scalar readout so every output entry gets a gradient."""
    return sum_all(hadamard(out, constant(weights)))


def fd_check(build, tensors, rng, tol=OP_TOL, h=FD_H):
    """Compare tape gradients of build() against central finite differences.

    `build` must be a zero-argument callable returning a scalar Tensor; it is
    re-evaluated (outside any tape) for the finite-difference probes.
    """
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    grads = [np.zeros_like(x.data) if x.grad is None else x.grad.copy()
             for x in tensors]
    for x, g in zip(tensors, grads):
        flat = x.data.ravel()
        n_probe = min(flat.size, 5)
        idx = rng.integers(0, flat.size, size=n_probe)
        for k in np.unique(idx):
            orig = flat[k]
            flat[k] = orig + h
            up = build().item()
            flat[k] = orig - h
            dn = build().item()
            flat[k] = orig
            fd = (up - dn) / (2.0 * h)
            got = g.ravel()[k]
            rel = abs(fd - got) / max(abs(fd), abs(got), 1e-6)
            assert rel < tol, f"grad mismatch: analytic {got}, fd {fd}, rel {rel}"
    zero_grads(tensors)


def _rand(rng, rows, cols, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(rows, cols, lo, hi), requires_grad=True)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_matmul_grad(seed):
    rng = Rng(seed).child("matmul")
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    w = rng.normal(3, 2)
    fd_check(lambda: _scalarize(matmul(a, b), w), [a, b], rng)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_elementwise_grads(seed):
    rng = Rng(seed).child("elem")
    a, b = _rand(rng, 4, 3), _rand(rng, 4, 3)
    w = rng.normal(4, 3)
    fd_check(lambda: _scalarize(add(a, b), w), [a, b], rng)
    fd_check(lambda: _scalarize(sub(a, b), w), [a, b], rng)
    fd_check(lambda: _scalarize(hadamard(a, b), w), [a, b], rng)
    fd_check(lambda: _scalarize(scale(a, -1.7), w), [a], rng)
    fd_check(lambda: _scalarize(exp(scale(a, 0.5)), w), [a], rng)
    fd_check(lambda: _scalarize(sigmoid(a), w), [a], rng)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_domain_op_grads(seed):
    rng = Rng(seed).child("domain")
    pos = Tensor(rng.uniform(3, 3, 0.5, 3.0), requires_grad=True)
    den = Tensor(rng.uniform(3, 3, 0.5, 2.0), requires_grad=True)
    w = rng.normal(3, 3)
    fd_check(lambda: _scalarize(log(pos), w), [pos], rng)
    fd_check(lambda: _scalarize(div(pos, den), w), [pos, den], rng)
    # keep entries away from the clamp threshold and the relu kink
    off_kink = Tensor(rng.uniform(3, 3, 0.2, 2.0) * np.sign(rng.normal(3, 3)),
                      requires_grad=True)
    fd_check(lambda: _scalarize(relu(off_kink), w), [off_kink], rng)
    away = Tensor(rng.uniform(3, 3, 0.5, 2.0), requires_grad=True)
    fd_check(lambda: _scalarize(clamp_min(away, 0.1), w), [away], rng)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_reduction_grads(seed):
    rng = Rng(seed).child("reduce")
    a = _rand(rng, 4, 3)
    w_col = rng.normal(4, 1)
    fd_check(lambda: _scalarize(row_sum(a), w_col), [a], rng)
    fd_check(lambda: _scalarize(row_mean(a), w_col), [a], rng)
    fd_check(lambda: _scalarize(sq_norm_rows(a), w_col), [a], rng)
    fd_check(lambda: _scalarize(variance_rows(a), np.ones((1, 1))), [a], rng)
    fd_check(lambda: sum_all(a), [a], rng)
    fd_check(lambda: scale(mean_all(a), 3.0), [a], rng)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_structural_op_grads(seed):
    rng = Rng(seed).child("structural")
    a, b = _rand(rng, 4, 2), _rand(rng, 4, 3)
    w = rng.normal(4, 5)
    fd_check(lambda: _scalarize(concat_cols(a, b), w), [a, b], rng)
    w_t = rng.normal(2, 4)
    fd_check(lambda: _scalarize(transpose(a), w_t), [a], rng)
    idx = rng.integers(0, 4, size=6)
    w_take = rng.normal(6, 2)
    fd_check(lambda: _scalarize(take_rows(a, idx), w_take), [a], rng)
    seg = np.sort(rng.integers(0, 3, size=4))
    w_seg = rng.normal(3, 2)
    fd_check(lambda: _scalarize(segment_sum_rows(a, seg, 3), w_seg), [a], rng)
    w_pick = rng.normal(4, 1)
    cols = rng.integers(0, 3, size=4)
    fd_check(lambda: _scalarize(pick_cols(b, cols), w_pick), [b], rng)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_softmax_and_cosine_grads(seed):
    rng = Rng(seed).child("softmax")
    a = _rand(rng, 4, 3)
    b = _rand(rng, 4, 3)
    w = rng.normal(4, 3)
    w_col = rng.normal(4, 1)
    fd_check(lambda: _scalarize(row_softmax(a), w), [a], rng)
    fd_check(lambda: _scalarize(cosine_rows(a, b), w_col), [a, b], rng)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_gumbel_soft_path_grad(seed):
    """The straight-through estimator's backward is exactly the soft path."""
    rng = Rng(seed).child("gumbel")
    logits = _rand(rng, 3, 4)
    noise = Rng(seed).child("noise").gumbel(3, 4)
    w = rng.normal(3, 4)

    def build():
        p = row_softmax(logits)
        soft, _hard = gumbel_softmax_st(p, 0.8, None, train_mode=True,
                                        noise=noise)
        return _scalarize(soft, w)

    fd_check(build, [logits], rng)


def test_straight_through_identity():
    """Loss on hard receives exactly the soft path's gradient."""
    rng = Rng(0).child("st")
    logits = Tensor(rng.normal(3, 4), requires_grad=True)
    noise = Rng(1).child("st-noise").gumbel(3, 4)
    w = rng.normal(3, 4)

    def run(which):
        with Tape() as tape:
            p = row_softmax(logits)
            soft, hard = gumbel_softmax_st(p, 0.8, None, train_mode=True,
                                           noise=noise)
            loss = _scalarize(soft if which == "soft" else hard, w)
        backward(tape, loss)
        g = logits.grad.copy()
        zero_grads([logits])
        return g

    npt.assert_array_equal(run("soft"), run("hard"))


def test_linear_case_hand_gradient():
    # loss = sum(W x) with x fixed: dW = ones-vector outer row-sums of x
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    x = constant(np.array([[0.0, 1.0], [2.0, 3.0]]))
    with Tape() as tape:
        loss = sum_all(matmul(w, x))
    backward(tape, loss)
    npt.assert_array_equal(w.grad, [[1.0, 5.0], [1.0, 5.0]])


def test_backward_requires_scalar_loss():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = scale(a, 2.0)
    with pytest.raises(ContractError):
        backward(tape, out)


def test_backward_is_deterministic():
    def run():
        rng = Rng(9).child("det")
        a = Tensor(rng.normal(5, 4), requires_grad=True)
        b = Tensor(rng.normal(4, 3), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(relu(matmul(a, b)))
        backward(tape, loss)
        return a.grad.copy(), b.grad.copy()

    ga1, gb1 = run()
    ga2, gb2 = run()
    npt.assert_array_equal(ga1, ga2)
    npt.assert_array_equal(gb1, gb2)


def test_gradients_accumulate_across_uses():
    a = Tensor(np.array([[2.0]]), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(add(a, a))
    backward(tape, loss)
    npt.assert_array_equal(a.grad, [[2.0]])


def test_broadcast_gradient_unreduces():
    col = Tensor(np.array([[1.0], [2.0]]), requires_grad=True)
    full = constant(np.ones((2, 3)))
    with Tape() as tape:
        loss = sum_all(hadamard(full, add(col, constant(np.zeros((2, 3))))))
    backward(tape, loss)
    npt.assert_array_equal(col.grad, [[3.0], [3.0]])


def test_take_rows_accumulates_duplicate_indices():
    x = Tensor(np.array([[1.0], [2.0]]), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(take_rows(x, np.array([0, 0, 1])))
    backward(tape, loss)
    npt.assert_array_equal(x.grad, [[2.0], [1.0]])


def test_no_tape_means_no_recording():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    out = scale(a, 3.0)  # outside any tape
    with Tape() as tape:
        loss = sum_all(scale(a, 2.0))
    backward(tape, loss)
    npt.assert_array_equal(a.grad, np.full((2, 2), 2.0))
    assert out.grad is None
