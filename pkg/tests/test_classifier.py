import math

import numpy as np
import pytest
from sklearn.base import clone

import difflab.classifier as clf
from difflab.denoiser import forward_rf
from difflab.scenes import IMAGE_SHAPE
from difflab.validation import ConfigError, NumericError
from difflab.weights import WeightFunction


class OracleModel:
    """Returns exactly the evaluation noise: every error must be zero."""

    def __init__(self, eval_set):
        self._lookup = {float(t): e for t, e in zip(eval_set.t, eval_set.eps)}

    def noisy_input(self, images, t, eps):
        return forward_rf(2.0 * images - 1.0, t, eps)

    def predict(self, z, t, prompt):
        eps = self._lookup[float(t)]
        return np.broadcast_to(eps, z.shape).copy()


class ZeroModel:
    def noisy_input(self, images, t, eps):
        return forward_rf(2.0 * images - 1.0, t, eps)

    def predict(self, z, t, prompt):
        return np.zeros_like(z)


def posterior_bruteforce(errors, weights):
    """Direct float64 evaluation of the weighted-softmax posterior."""
    k, ts = np.shape(errors)
    energy = [sum(weights[j] * errors[i][j] for j in range(ts)) / ts
              for i in range(k)]
    ex = [math.exp(-e) for e in energy]
    total = sum(ex)
    return np.array([v / total for v in ex])


# --------------------------------------------------------------------------
# eval sets
# --------------------------------------------------------------------------

def test_eval_set_grid():
    es = clf.build_eval_set(4, seed=0)
    assert np.allclose(es.t, [0.25, 0.5, 0.75, 1.0])
    assert es.eps.shape == (4,) + IMAGE_SHAPE


def test_eval_set_deterministic():
    a = clf.build_eval_set(8, seed=42)
    b = clf.build_eval_set(8, seed=42)
    assert np.array_equal(a.eps, b.eps)
    assert not np.array_equal(a.eps, clf.build_eval_set(8, seed=43).eps)


def test_eval_set_default_matches_run_config():
    from difflab.config import default_config
    assert default_config()["eval_set"]["n_timesteps"] == 30


def test_eval_set_later_bias():
    es = clf.build_eval_set(10, seed=0, bias="later")
    assert es.t.min() > 0.5 and es.t.max() == 1.0
    assert np.all(np.diff(es.t) > 0)


def test_eval_set_invalid():
    with pytest.raises(ConfigError):
        clf.build_eval_set(0, seed=0)
    with pytest.raises(ConfigError):
        clf.build_eval_set(4, seed=0, bias="sideways")


# --------------------------------------------------------------------------
# score_errors
# --------------------------------------------------------------------------

def test_oracle_model_zero_errors():
    es = clf.build_eval_set(4, seed=1)
    images = np.random.default_rng(0).uniform(0, 1, (2,) + IMAGE_SHAPE)
    tensor = clf.score_errors(OracleModel(es), images,
                              ["a photo of a red square",
                               "a photo of a blue circle"], es)
    assert tensor.errors.shape == (2, 2, 4)
    assert np.all(tensor.errors == 0.0)


def test_zero_model_prompt_independent():
    es = clf.build_eval_set(4, seed=2)
    images = np.random.default_rng(1).uniform(0, 1, (2,) + IMAGE_SHAPE)
    prompts = ["a photo of a red square", "a photo of a blue circle",
               "a photo of two dots"]
    tensor = clf.score_errors(ZeroModel(), images, prompts, es)
    assert tensor.errors.shape == (2, 3, 4)
    expected = np.sum(es.eps.reshape(4, -1) ** 2, axis=1)
    for i in range(2):
        for k in range(3):
            assert np.allclose(tensor.errors[i, k], expected, rtol=1e-6)


def test_score_errors_l1_metric():
    es = clf.build_eval_set(3, seed=3)
    images = np.random.default_rng(2).uniform(0, 1, (1,) + IMAGE_SHAPE)
    tensor = clf.score_errors(ZeroModel(), images,
                              ["a photo of a red square"], es, metric="l1")
    expected = np.sum(np.abs(es.eps.reshape(3, -1)), axis=1)
    assert np.allclose(tensor.errors[0, 0], expected, rtol=1e-6)


def test_score_errors_per_image_prompts():
    es = clf.build_eval_set(2, seed=4)
    images = np.random.default_rng(3).uniform(0, 1, (2,) + IMAGE_SHAPE)
    lists = [["a photo of a red square"],
             ["a photo of a blue circle", "a photo of a red square"]]
    tensor = clf.score_errors(ZeroModel(), images, lists, es)
    assert tensor.errors.shape == (2, 2, 2)
    assert tensor.n_prompts(0) == 1
    # padded slot stays zero
    assert np.all(tensor.errors[0, 1] == 0.0)


# --------------------------------------------------------------------------
# posterior
# --------------------------------------------------------------------------

def test_posterior_uniform_on_identical_rows():
    e = np.ones((4, 5)) * 3.3
    p = clf.posterior(e, WeightFunction.uniform())
    assert np.allclose(p, 0.25, atol=1e-12)


def test_posterior_two_class_sigmoid():
    e = np.array([[0.0], [1.0]])
    p = clf.posterior(e, np.ones(1))
    sigma = 1.0 / (1.0 + math.exp(-1.0))
    assert abs(p[0] - sigma) < 1e-4
    assert abs(p[1] - (1.0 - sigma)) < 1e-4


def test_posterior_shift_invariance():
    rng = np.random.default_rng(0)
    e = rng.uniform(0, 4, (3, 6))
    w = rng.uniform(0.5, 2.0, 6)
    p1 = clf.posterior(e, w)
    p2 = clf.posterior(e + 5.0, w)
    assert np.allclose(p1, p2, atol=1e-9)
    assert abs(p1.sum() - 1.0) < 1e-9


def test_posterior_prompt_permutation():
    rng = np.random.default_rng(1)
    e = rng.uniform(0, 4, (5, 7))
    w = rng.uniform(0.1, 1.0, 7)
    perm = rng.permutation(5)
    assert np.allclose(clf.posterior(e, w)[perm], clf.posterior(e[perm], w),
                       atol=1e-12)


def test_posterior_rejects_nonfinite():
    e = np.full((2, 3), np.inf)
    with pytest.raises(NumericError):
        clf.posterior(e, np.ones(3))


def test_posterior_oracle_equivalence_100_cases():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 5))
        ts = int(rng.integers(1, 9))
        e = rng.uniform(0.0, 5.0, (k, ts))
        w = rng.uniform(0.0, 2.0, ts)
        got = clf.posterior(e, w)
        want = posterior_bruteforce(e, w)
        worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst < 1e-6


def test_posterior_weightfunction_resolution():
    e = np.random.default_rng(3).uniform(0, 2, (3, 10))
    w = WeightFunction.exponential(7.0)
    t = np.arange(1, 11) / 10.0
    assert np.allclose(clf.posterior(e, w),
                       clf.posterior(e, np.exp(-7.0 * t)), atol=1e-12)


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------

def test_predict_lowest_weighted_error():
    e = np.array([[1.0], [0.2], [0.9]])
    assert clf.predict(e, np.ones(1)) == 1


def test_predict_tie_breaks_low_index():
    e = np.array([[0.5, 0.5], [0.5, 0.5], [0.9, 0.9]])
    assert clf.predict(e, np.ones(2)) == 0


def test_predict_weight_scale_invariance():
    rng = np.random.default_rng(4)
    for _ in range(20):
        e = rng.uniform(0, 3, (4, 6))
        w = rng.uniform(0.1, 1.0, 6)
        assert clf.predict(e, w) == clf.predict(e, 3.0 * w)


# --------------------------------------------------------------------------
# group score
# --------------------------------------------------------------------------

def test_group_score_table():
    assert clf.group_score([[0.9, 0.1], [0.2, 0.8]]) == 1
    assert clf.group_score([[0.1, 0.9], [0.2, 0.8]]) == 0
    assert clf.group_score([[0.5, 0.5], [0.2, 0.8]]) == 0  # strict inequality
    assert clf.group_score([[0.9, 0.1], [0.8, 0.8]]) == 0


def test_group_score_swap_consistency():
    # swapping both pairs keeps a correct pairing correct
    m = np.array([[0.9, 0.1], [0.2, 0.8]])
    swapped = m[::-1, ::-1]
    assert clf.group_score(m) == clf.group_score(swapped) == 1


def test_group_score_from_errors():
    w = np.ones(2)
    e1 = np.array([[0.1, 0.1], [2.0, 2.0]])   # image1 prefers text1
    e2 = np.array([[3.0, 3.0], [0.5, 0.5]])   # image2 prefers text2
    assert clf.group_score_from_errors(e1, e2, w) == 1
    assert clf.group_score_from_errors(e2, e1, w) == 0


# --------------------------------------------------------------------------
# sklearn-style wrapper
# --------------------------------------------------------------------------

def test_score_classifier_estimator():
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 2, (6, 3, 4))
    est = clf.ScoreClassifier(weights=np.ones(4))
    est2 = clone(est)
    est2.fit(X)
    proba = est2.predict_proba(X)
    assert proba.shape == (6, 3)
    assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    pred = est2.predict(X)
    for i in range(6):
        assert pred[i] == clf.predict(X[i], np.ones(4))
