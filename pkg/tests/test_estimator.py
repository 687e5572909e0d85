"""Scikit-learn facade: params plumbing, fitting, transductive contract."""

import numpy as np
import numpy.testing as npt
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hugnn.errors import ContractError
from hugnn.estimator import HUGNNClassifier
from hugnn.graph import synth_heterophily
from hugnn.rng import Rng


def toy_problem(seed=0, n=120, p=0.85):
    bundle = synth_heterophily(n, 2, 4, p, 0.4, Rng(seed).child("synth"))
    X = bundle.features
    y = bundle.labels.copy()
    # hide the test nodes' labels from the estimator
    y[bundle.mask("test")] = -1
    edges = [tuple(e) for e in bundle.graph.edges]
    return X, y, edges, bundle


def quick_estimator(**overrides):
    kwargs = dict(hidden_dim=8, layers=1, communities=2, dropout=0.0,
                  lr=5e-3, epochs=15, patience=15, seed=0)
    kwargs.update(overrides)
    return HUGNNClassifier(**kwargs)


def test_get_params_round_trips_through_clone():
    est = HUGNNClassifier(hidden_dim=32, ablate="community+global", seed=7)
    params = est.get_params()
    assert params["hidden_dim"] == 32
    assert params["ablate"] == "community+global"
    dup = clone(est)
    assert dup.get_params() == params


def test_set_params_chains():
    est = HUGNNClassifier()
    est.set_params(hidden_dim=16, epochs=10)
    assert est.hidden_dim == 16
    assert est.epochs == 10


def test_fit_predict_on_easy_graph():
    X, y, edges, bundle = toy_problem()
    est = quick_estimator(epochs=40)
    assert est.fit(X, y, edges) is est
    pred = est.predict()
    assert pred.shape == (120,)
    test_mask = bundle.mask("test")
    acc = float(np.mean(pred[test_mask] == bundle.labels[test_mask]))
    assert acc >= 0.8
    proba = est.predict_proba()
    assert proba.shape == (120, 2)
    npt.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    npt.assert_array_equal(est.classes_[np.argmax(proba, axis=1)], pred)


def test_fit_remaps_noncontiguous_labels():
    X, y, edges, _ = toy_problem(seed=1)
    y_shifted = np.where(y >= 0, y * 5 + 3, -1)   # classes {3, 8}
    est = quick_estimator().fit(X, y_shifted, edges)
    npt.assert_array_equal(est.classes_, [3, 8])
    assert set(np.unique(est.predict())) <= {3, 8}


def test_fit_is_deterministic_per_seed():
    X, y, edges, _ = toy_problem(seed=2)
    a = quick_estimator(seed=5).fit(X, y, edges)
    b = quick_estimator(seed=5).fit(X, y, edges)
    npt.assert_array_equal(a.predict_proba(), b.predict_proba())


def test_exposed_diagnostics_have_node_shape():
    X, y, edges, _ = toy_problem(seed=3)
    est = quick_estimator().fit(X, y, edges)
    assert est.uncertainty_.shape == (120,)
    assert ((est.uncertainty_ > 0) & (est.uncertainty_ < 1)).all()
    assert est.fusion_weights_.shape == (120, 3)
    npt.assert_allclose(est.fusion_weights_.sum(axis=1), 1.0, atol=1e-9)


def test_score_ignores_unlabeled_nodes():
    X, y, edges, bundle = toy_problem(seed=4)
    est = quick_estimator(epochs=40).fit(X, y, edges)
    truth = np.where(bundle.mask("test"), bundle.labels, -1)
    s = est.score(y=truth)
    pred = est.predict()
    mask = truth >= 0
    assert s == pytest.approx(float(np.mean(pred[mask] == truth[mask])))


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        HUGNNClassifier().predict()


def test_predict_accepts_only_fitted_features():
    X, y, edges, _ = toy_problem(seed=5)
    est = quick_estimator().fit(X, y, edges)
    npt.assert_array_equal(est.predict(X), est.predict())
    with pytest.raises(ContractError, match="transductive"):
        est.predict(X + 1.0)


def test_fit_rejects_degenerate_inputs():
    X, y, edges, _ = toy_problem(seed=6)
    with pytest.raises(ContractError):
        quick_estimator().fit(X, y[:-1], edges)
    with pytest.raises(ContractError):
        quick_estimator().fit(X, np.full(len(y), -1), edges)
    with pytest.raises(ContractError):
        quick_estimator(val_fraction=1.0).fit(X, y, edges)


def test_zero_val_fraction_trains_on_all_labels():
    X, y, edges, _ = toy_problem(seed=7)
    est = quick_estimator(val_fraction=0.0).fit(X, y, edges)
    roles = est.bundle_.roles
    labeled = y >= 0
    assert (roles[labeled] == 0).all()   # every labeled node stays in train


def test_ablation_string_flows_to_fusion_weights():
    X, y, edges, _ = toy_problem(seed=8)
    est = quick_estimator(ablate="community+global").fit(X, y, edges)
    npt.assert_allclose(est.fusion_weights_[:, 0], 1.0)
    npt.assert_allclose(est.fusion_weights_[:, 1:], 0.0)
