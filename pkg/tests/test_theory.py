"""Fixed-point probe of the uncertainty update, the homophily sweep, and
finite-difference validation of the full model."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from hugnn.errors import ContractError
from hugnn.graph import Graph, synth_heterophily, two_hop_homophily
from hugnn.model import HyperParams, build_params
from hugnn.rng import Rng
from hugnn.theory import (
    EXPERIMENT_VARIANTS,
    contraction_probe,
    gradient_check,
    hierarchical_step,
    mean_agg_baseline,
    reference_step,
    summarize_theorem3,
    theorem3_experiment,
    toy_bundle,
)
from hugnn.training import TrainConfig


def triangle():
    return Graph(3, [(0, 1), (1, 2), (0, 2)])


def two_path():
    return Graph(2, [(0, 1)])


# ---------------------------------------------------------------------------
# reference averaging map


def test_reference_step_triangle_hand_values():
    u = np.array([1.0, 0.0, 0.0])
    out = reference_step(triangle(), u, self_loops=False)
    npt.assert_allclose(out, [0.0, 0.5, 0.5], atol=1e-15)


def test_reference_step_triangle_pinned_pair_ratio_is_half():
    # one application shrinks the max-norm gap between (1,0,0) and the
    # origin by exactly half: the averaging matrix row sums are 1/2 each
    u = np.array([1.0, 0.0, 0.0])
    u_alt = np.zeros(3)
    fu = reference_step(triangle(), u, self_loops=False)
    fu_alt = reference_step(triangle(), u_alt, self_loops=False)
    ratio = np.max(np.abs(fu - fu_alt)) / np.max(np.abs(u - u_alt))
    assert ratio == pytest.approx(0.5, abs=1e-12)


def test_reference_step_two_path_oscillates_without_self_loops():
    u = np.array([0.0, 1.0])
    once = reference_step(two_path(), u, self_loops=False)
    npt.assert_allclose(once, [1.0, 0.0])
    npt.assert_allclose(reference_step(two_path(), once, self_loops=False), u)


def test_reference_step_two_path_self_loops_contract_by_half():
    u = np.array([0.0, 1.0])
    u_alt = np.zeros(2)
    fu = reference_step(two_path(), u, self_loops=True)
    npt.assert_allclose(fu, [0.5, 0.5])
    ratio = np.max(np.abs(fu - reference_step(two_path(), u_alt, True)))
    assert ratio == pytest.approx(0.5, abs=1e-12)


def test_reference_step_isolated_node_holds_value():
    g = Graph(3, [(0, 1)])
    out = reference_step(g, np.array([0.2, 0.8, 0.7]), self_loops=False)
    assert out[2] == 0.7


def bundle_from_graph(g):
    from hugnn.graph import DatasetBundle
    labels = np.arange(g.n, dtype=np.int64) % 2
    return DatasetBundle(g, np.eye(g.n)[:, :2], labels,
                         np.full(g.n, 2, dtype=np.int8))


def test_probe_reference_bipartite_pathology_and_fix():
    path = bundle_from_graph(two_path())
    osc = contraction_probe(path, trials=3, iters=50, mode="reference",
                            self_loops=False, seed=1)
    assert not osc.converged
    fixed = contraction_probe(path, trials=3, iters=50, mode="reference",
                              self_loops=True, seed=1)
    assert fixed.converged
    assert all(r <= 1.0 + 1e-12 for r in fixed.lipschitz_ratios)
    # non-bipartite connected graph contracts strictly
    tri = contraction_probe(bundle_from_graph(triangle()), trials=3,
                            iters=50, mode="reference", self_loops=True, seed=1)
    assert tri.converged
    assert all(r < 1.0 for r in tri.lipschitz_ratios)


def test_probe_rejects_unknown_mode():
    with pytest.raises(ContractError):
        contraction_probe(toy_bundle(), mode="jacobi")


# ---------------------------------------------------------------------------
# full-model fixed point


def test_hierarchical_step_maps_unit_box_into_itself():
    bundle = toy_bundle()
    hyper = HyperParams(hidden_dim=8, layers=2, communities=2, dropout=0.0)
    params = build_params(bundle, hyper, Rng(0).child("init"))
    step = hierarchical_step(bundle, params, hyper)
    rng = Rng(1).child("box")
    for _ in range(10):
        u = rng.uniform(1, bundle.n)[0]
        out = step(u)
        assert out.shape == (bundle.n,)
        assert (out >= 0.0).all() and (out <= 1.0).all()


def test_hierarchical_step_is_deterministic():
    bundle = toy_bundle()
    hyper = HyperParams(hidden_dim=8, layers=2, communities=2, dropout=0.0)
    params = build_params(bundle, hyper, Rng(0).child("init"))
    step = hierarchical_step(bundle, params, hyper)
    u = Rng(2).child("u").uniform(1, bundle.n)[0]
    npt.assert_array_equal(step(u), step(u))


def test_probe_full_mode_converges_on_synthetic_graph():
    bundle = synth_heterophily(120, 2, 3, 0.5, 1.0, Rng(0).child("synth"))
    report = contraction_probe(bundle, trials=5, iters=100, mode="full", seed=0)
    assert report.converged
    assert report.iterations_used <= 100
    for steps in report.step_norms:
        assert steps[-1] < 1e-8
    d = report.to_json_dict()
    assert d["mode"] == "full" and d["converged"]
    assert len(d["final_steps"]) == 5


# ---------------------------------------------------------------------------
# homophily sweep


def micro_config():
    return TrainConfig(hyper=HyperParams(hidden_dim=4, layers=1, communities=2,
                                         dropout=0.0, epochs=3, lr=5e-3),
                       patience=3, init_epochs=5)


def test_theorem3_rows_schema_and_shared_q():
    rows = theorem3_experiment((0.5,), (0,), config=micro_config(),
                               n=120, num_classes=2, degree=2)
    assert len(rows) == len(EXPERIMENT_VARIANTS)
    assert {r["variant"] for r in rows} == set(EXPERIMENT_VARIANTS)
    for row in rows:
        assert set(row) == {"variant", "p", "seed", "q_measured", "test_acc",
                            "ece", "mean_u"}
        assert 0.0 <= row["test_acc"] <= 1.0
        assert row["p"] == 0.5 and row["seed"] == 0
    qs = {row["q_measured"] for row in rows}
    assert len(qs) == 1  # same bundle measured once per (p, seed)
    base = next(r for r in rows if r["variant"] == "mean_agg")
    assert math.isnan(base["mean_u"])


def test_theorem3_progress_callback_sees_every_row():
    seen = []
    rows = theorem3_experiment((0.5,), (0,), config=micro_config(),
                               n=120, num_classes=2, degree=2,
                               variants=("full", "mean_agg"),
                               progress=seen.append)
    assert seen == rows


def test_two_hop_agreement_beats_half_in_heterophilic_regime():
    # with two classes and p=0.2, disagreeing one-hop neighbors mostly agree
    # at two hops: q ~ p^2 + (1-p)^2 = 0.68
    bundle = synth_heterophily(1000, 2, 1, 0.2, 1.0, Rng(0).child("synth"))
    q = two_hop_homophily(bundle)
    assert q > 0.5


def test_summarize_theorem3_group_statistics():
    rows = [
        {"variant": "full", "p": 0.2, "seed": 0, "test_acc": 0.8},
        {"variant": "full", "p": 0.2, "seed": 1, "test_acc": 0.6},
        {"variant": "flat", "p": 0.2, "seed": 0, "test_acc": 0.5},
    ]
    summary = summarize_theorem3(rows)
    mean, std, count = summary[("full", 0.2)]
    assert mean == pytest.approx(0.7)
    assert std == pytest.approx(0.1)
    assert count == 2
    assert summary[("flat", 0.2)][0] == pytest.approx(0.5)


def test_mean_agg_baseline_learns_separable_graph():
    bundle = synth_heterophily(200, 2, 5, 0.9, 0.3, Rng(1).child("synth"))
    acc, test_ece, mean_u = mean_agg_baseline(bundle, epochs=60, hidden=8,
                                              lr=5e-3, weight_decay=5e-4,
                                              rng=Rng(1).child("baseline"))
    assert acc >= 0.9
    assert 0.0 <= test_ece <= 1.0
    assert math.isnan(mean_u)


def test_easy_regime_every_variant_clears_ninety_percent():
    config = TrainConfig(hyper=HyperParams(hidden_dim=16, layers=2,
                                           communities=2, dropout=0.3,
                                           epochs=150, lr=5e-3),
                         patience=150)
    rows = theorem3_experiment((0.95,), (0,), config=config, n=400,
                               num_classes=2, degree=10, feature_noise=0.3)
    for row in rows:
        assert row["test_acc"] >= 0.90, (
            f"{row['variant']} only reached {row['test_acc']:.3f}")


# ---------------------------------------------------------------------------
# gradient fidelity


def test_toy_bundle_shape():
    bundle = toy_bundle()
    assert bundle.n == 6
    assert bundle.graph.m == 7
    assert bundle.num_classes == 2
    assert bundle.mask("train").sum() == 2


def test_gradient_check_small_model_matches_finite_differences():
    hyper = HyperParams(hidden_dim=4, layers=1, communities=2, dropout=0.0)
    report = gradient_check(hyper=hyper, seed=3)
    assert report.checked > 0
    assert report.max_rel_err < 1e-4, report.worst_param
    assert report.passed()
