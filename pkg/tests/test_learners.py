import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pair_count_auc
from seccrash.learners import (
    LearnerError,
    LearnerSpec,
    fit,
    gradient_check,
    model_from_bytes,
    model_to_bytes,
    predict_proba,
)
from seccrash.learners.base import sigmoid
from seccrash.learners.mlp import gradients, init_params, loss, train_steps
from seccrash.learners.trees import boosting_raw, predict_tree_members, staged_raw

FAST = {
    "LogisticRegression": {},
    "DecisionTree": {"max_depth": 4},
    "RandomForest": {"n_estimators": 25, "max_depth": 5},
    "GradientBoostedTrees": {"n_estimators": 30, "learning_rate": 0.1},
    "MLP": {"hidden": (8, 4), "epochs": 5, "learning_rate": 1e-3},
}


def _names(d):
    return [f"f{i}" for i in range(d)]


def _separable(n=200, d=3, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(0, 1, (n, d))
    X[:, 0] += 6 * y - 3
    return X, y


def _noisy(n=300, d=4, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.normal(0, 1, (n, d))
    y = (X[:, 0] + 0.5 * X[:, 1] + rng.normal(0, 1, n) > 0).astype(int)
    return X, y


def test_logistic_separates_separable_data():
    X, y = _separable()
    model = fit(LearnerSpec("LogisticRegression"), X, y, _names(3))
    assert pair_count_auc(predict_proba(model, X), y) >= 0.99


@pytest.mark.parametrize("kind", ["DecisionTree", "GradientBoostedTrees"])
def test_constant_features_give_the_prior(kind):
    X = np.ones((20, 2))
    y = np.array([1] * 6 + [0] * 14)
    p = predict_proba(fit(LearnerSpec(kind, FAST[kind]), X, y, _names(2)), X)
    assert np.allclose(p, 0.3, atol=1e-9)


def test_forest_on_constant_features_averages_bootstrap_priors():
    X = np.ones((20, 2))
    y = np.array([1] * 6 + [0] * 14)
    model = fit(LearnerSpec("RandomForest", {"n_estimators": 400}), X, y, _names(2))
    members = predict_tree_members(model, np.array([[0.0, 0.0], [5.0, -5.0]]))
    # every tree is a single leaf, so any input gets the same score
    assert np.array_equal(members[0], members[1])
    assert predict_proba(model, X[:1])[0] == pytest.approx(0.3, abs=0.02)


def test_zero_weight_logistic_predicts_half():
    X, y = _noisy()
    model = fit(LearnerSpec("LogisticRegression"), X, y, _names(4))
    model.params["coef"][:] = 0
    model.params["intercept"][:] = 0
    assert np.all(predict_proba(model, X) == 0.5)


@pytest.mark.parametrize("kind", sorted(FAST))
def test_fit_is_deterministic_and_serializes(kind):
    X, y = _noisy()
    spec = LearnerSpec(kind, FAST[kind], seed=7)
    a, b = fit(spec, X, y, _names(4)), fit(spec, X, y, _names(4))
    assert model_to_bytes(a) == model_to_bytes(b)
    back = model_from_bytes(model_to_bytes(a))
    assert back.spec == a.spec and back.feature_names == a.feature_names
    assert np.array_equal(predict_proba(back, X), predict_proba(a, X))
    p = predict_proba(a, X)
    assert p.min() >= 0 and p.max() <= 1


def test_feature_names_must_match():
    X, y = _noisy()
    model = fit(LearnerSpec("LogisticRegression"), X, y, _names(4))
    with pytest.raises(LearnerError):
        predict_proba(model, X, ["f1", "f0", "f2", "f3"])
    with pytest.raises(LearnerError):
        predict_proba(model, X[:, :3])
    with pytest.raises(LearnerError):
        LearnerSpec("RandomForest", {"n_trees": 3})
    with pytest.raises(LearnerError):
        fit(LearnerSpec("LogisticRegression"), X, np.zeros(len(y)), _names(4))


def test_boosting_equals_staged_sum_of_trees():
    X, y = _noisy()
    model = fit(LearnerSpec("GradientBoostedTrees", FAST["GradientBoostedTrees"]), X, y, _names(4))
    leaves = predict_tree_members(model, X)
    base, lr = np.log(y.mean() / (1 - y.mean())), 0.1
    raw = base + lr * np.cumsum(leaves, axis=1).T
    assert np.allclose(staged_raw(model, X), raw)
    assert np.allclose(predict_proba(model, X), sigmoid(raw[-1]))
    assert np.allclose(boosting_raw(model, X, 3), raw[2])


def test_single_newton_tree_fits_leaf_residuals():
    # one stump with lr 1 and lambda 0: each leaf's raw score is the logit of its label mean
    X = np.repeat([[0.0], [1.0]], 10, axis=0)
    y = np.array([1] * 8 + [0] * 2 + [1] * 3 + [0] * 7)
    hp = {"n_estimators": 1, "learning_rate": 1.0, "max_depth": 1, "reg_lambda": 0.0}
    model = fit(LearnerSpec("GradientBoostedTrees", hp), X, y, ["x"])
    raw = boosting_raw(model, np.array([[0.0], [1.0]]))
    p = 0.55
    expected = [np.log(p / (1 - p)) + (0.8 - p) / (p * (1 - p)), np.log(p / (1 - p)) + (0.3 - p) / (p * (1 - p))]
    assert np.allclose(raw, expected)


def test_forest_is_mean_of_its_trees():
    X, y = _noisy()
    model = fit(LearnerSpec("RandomForest", FAST["RandomForest"]), X, y, _names(4))
    members = predict_tree_members(model, X)
    assert members.shape == (len(X), 25)
    assert np.allclose(predict_proba(model, X), members.mean(axis=1))


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["DecisionTree", "RandomForest", "GradientBoostedTrees"]), st.floats(0.1, 10), st.floats(-50, 50))
def test_trees_are_invariant_to_monotone_feature_maps(kind, a, b):
    X, y = _noisy(n=120)
    spec = LearnerSpec(kind, FAST[kind], seed=3)
    p = predict_proba(fit(spec, X, y, _names(4)), X)
    Xt = np.column_stack([a * X[:, 0] + b, np.exp(X[:, 1]), X[:, 2] ** 3, X[:, 3]])
    q = predict_proba(fit(spec, Xt, y, _names(4)), Xt)
    assert np.allclose(p, q)


def _mlp(seed=0, steps=None):
    X, y = _noisy(n=64, d=5)
    spec = LearnerSpec("MLP", {"hidden": (6, 4), "epochs": 0}, seed=seed)
    model = fit(spec, X, y, _names(5))
    return model, X, y


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mlp_gradient_check_at_init_and_after_training(seed):
    model, X, y = _mlp(seed)
    assert gradient_check(model, X[0], y[0]) < 1e-4
    Z = (X - model.mean) / model.scale
    hp = {**model.spec.params, "epochs": 100, "dropout": 0.0, "learning_rate": 1e-2}
    train_steps(model.params, Z, y.astype(float), hp, np.random.default_rng(seed), max_steps=100)
    assert gradient_check(model, X[1], y[1]) < 1e-4


def test_zero_input_gives_zero_first_layer_gradient():
    params = init_params(5, (6, 4), 0.3, np.random.default_rng(0))
    g = gradients(params, np.zeros((1, 5)), np.array([1.0]))
    assert np.all(g["W1"] == 0)


def test_mlp_training_reduces_loss():
    X, y = _noisy(n=200, d=5)
    rng = np.random.default_rng(0)
    Z = (X - X.mean(0)) / X.std(0)
    params = init_params(5, (16, 8), y.mean(), rng)
    start = loss(params, Z, y.astype(float))
    hp = {"hidden": (16, 8), "learning_rate": 1e-3, "batch_size": 32, "dropout": 0.2, "epochs": 30}
    history = train_steps(params, Z, y.astype(float), hp, rng)
    assert history[-1] < start - 0.1
