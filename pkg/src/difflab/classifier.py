"""Zero-shot classification on a frozen denoiser.

A fixed evaluation set of (timestep, noise) pairs is shared across every
candidate prompt of an image; per-prompt reconstruction errors are stored
unweighted and turned into a posterior by a weighted softmax at read time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .denoiser import (
    IMAGE_DIM,
    DenoiserModel,
    encode_prompt,
    forward_ddpm,
    forward_rf,
    time_features,
    to_model_space,
)
from .scenes import IMAGE_SHAPE
from .sct import ScoreTensor
from .validation import ConfigError, NumericError, check_images, check_scores


# --------------------------------------------------------------------------
# evaluation set
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalSet:
    """Fixed (t_j, eps_j) pairs reused for every prompt of an image."""

    t: np.ndarray          # (T_s,) strictly increasing
    eps: np.ndarray        # (T_s, *IMAGE_SHAPE)
    seed: int
    bias: str = "uniform"

    @property
    def n_timesteps(self) -> int:
        return len(self.t)


def build_eval_set(n_timesteps: int, seed: int, bias: str = "uniform",
                   image_shape=IMAGE_SHAPE) -> EvalSet:
    """t_j = j / T_s on (0, 1]; "later" restricts to (0.5, 1.0]."""
    if n_timesteps < 1:
        raise ConfigError("need at least one timestep")
    j = np.arange(1, n_timesteps + 1, dtype=np.float64)
    if bias == "uniform":
        t = j / n_timesteps
    elif bias == "later":
        t = 0.5 + 0.5 * j / n_timesteps
    else:
        raise ConfigError(f"unknown eval-set bias {bias!r}")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_timesteps,) + tuple(image_shape))
    return EvalSet(t=t, eps=eps, seed=seed, bias=bias)


# --------------------------------------------------------------------------
# error scoring
# --------------------------------------------------------------------------

def _normalize_prompts(prompts, n_images: int) -> list[list[str]]:
    if not prompts:
        raise ConfigError("prompts must be non-empty")
    if isinstance(prompts[0], str):
        return [list(prompts) for _ in range(n_images)]
    lists = [list(p) for p in prompts]
    if len(lists) != n_images:
        raise ConfigError("need one prompt list per image")
    return lists


def score_errors(model: DenoiserModel, images, prompts, eval_set: EvalSet,
                 metric: str = "l2", image_ids=None, producer=None,
                 config_hash=None, chunk: int = 4096) -> ScoreTensor:
    """Reconstruction errors for every (image, prompt, timestep) triple.

    The same (t_j, eps_j) pairs are used across all prompts of an image.
    Accumulation happens in float64; the stored tensor is float32.
    """
    if metric not in ("l2", "l1"):
        raise ConfigError(f"unknown error metric {metric!r}")
    images = check_images(images, eval_set.eps.shape[1:])
    n = len(images)
    prompt_lists = _normalize_prompts(prompts, n)
    k_max = max(len(p) for p in prompt_lists)
    t_s = eval_set.n_timesteps

    if not isinstance(model, DenoiserModel):
        return _score_errors_generic(
            model, images, prompt_lists, eval_set, metric, image_ids,
            producer, config_hash,
        )

    # distinct prompts once; per-image lists index into them
    uniq: dict[str, int] = {}
    for plist in prompt_lists:
        for p in plist:
            uniq.setdefault(p, len(uniq))
    pidx = np.stack([encode_prompt(p) for p in uniq])

    from .denoiser import N_CELLS, split_cells

    p = model.params
    td = model.time_dim
    n_patch = N_CELLS * model.patch_dim
    w2_pf = p["W2"][:n_patch]
    w2_t = p["W2"][n_patch:n_patch + td]
    w2_p = p["W2"][n_patch + td:]
    emb = model.prompt_embedding(pidx)            # (U, emb_dim)
    prompt_pre = emb @ w2_p                       # (U, hidden)
    p_gate = emb @ p["G2"][td:]                   # (U, hidden)
    tf = time_features(eval_set.t, model.time_dim)
    time_pre = tf @ w2_t + p["b2"]                # (T, hidden)
    t_gate = tf @ p["G2"][:td]                    # (T, hidden)
    skip_gain = tf @ p["Gs"]                      # (T, IMAGE_DIM)
    skip_bias = tf @ p["Bs"]                      # (T, IMAGE_DIM)

    x_flat = to_model_space(images).reshape(n, -1)
    eps_flat = eval_set.eps.reshape(t_s, -1)
    errors = np.zeros((n, k_max, t_s), dtype=np.float64)

    img_chunk = max(1, chunk // t_s)
    for lo in range(0, n, img_chunk):
        hi = min(n, lo + img_chunk)
        xs = x_flat[lo:hi]
        m = hi - lo
        if model.kind == "ddpm":
            ab = model.schedule.alpha_bar(eval_set.t)
            z = (np.sqrt(ab)[None, :, None] * xs[:, None, :]
                 + np.sqrt(1.0 - ab)[None, :, None] * eps_flat[None, :, :])
        else:
            t = eval_set.t
            z = ((1.0 - t)[None, :, None] * xs[:, None, :]
                 + t[None, :, None] * eps_flat[None, :, :])
        # prompt-independent patch features, flattened per (image, timestep)
        cells = split_cells(z.reshape(m * t_s, -1))
        tf_rep = np.repeat(tf[None, :, :], m, axis=0).reshape(m * t_s, td)
        xc = np.concatenate(
            [cells, np.repeat(tf_rep[:, None, :], N_CELLS, axis=1)], axis=2
        )
        ap = xc @ p["Wp"] + p["bp"]
        hp = ap * (1.0 / (1.0 + np.exp(-ap)))
        z_pre = (hp.reshape(m, t_s, n_patch) @ w2_pf) + time_pre[None, :, :]
        skip = skip_gain[None, :, :] * z + skip_bias[None, :, :]
        for i in range(lo, hi):
            for k, prompt in enumerate(prompt_lists[i]):
                u = uniq[prompt]
                a2 = z_pre[i - lo] + prompt_pre[u]
                h2 = a2 * (1.0 / (1.0 + np.exp(-a2))) * (
                    1.0 + t_gate + p_gate[u]
                )
                out = h2 @ p["W3"] + p["b3"] + skip[i - lo]
                if not np.isfinite(out).all():
                    raise NumericError(
                        f"non-finite prediction for image {i}, prompt {prompt!r}"
                    )
                r = eps_flat - out
                if metric == "l2":
                    errors[i, k] = np.sum(r * r, axis=1)
                else:
                    errors[i, k] = np.sum(np.abs(r), axis=1)

    ids = list(image_ids) if image_ids is not None else [
        f"img-{i:05d}" for i in range(n)
    ]
    return ScoreTensor(
        errors=errors.astype(np.float32),
        prompts=prompt_lists,
        image_ids=ids,
        eval_seed=eval_set.seed,
        eval_bias=eval_set.bias,
        producer=producer or f"toy-{model.kind}",
        metric=metric,
        config_hash=config_hash,
    )


def _score_errors_generic(model, images, prompt_lists, eval_set, metric,
                          image_ids, producer, config_hash) -> ScoreTensor:
    """Scoring path for any predictor exposing noisy_input() and predict();
    used for oracle models and stand-ins."""
    n = len(images)
    k_max = max(len(p) for p in prompt_lists)
    t_s = eval_set.n_timesteps
    errors = np.zeros((n, k_max, t_s), dtype=np.float64)
    for j in range(t_s):
        t_j = float(eval_set.t[j])
        eps_j = eval_set.eps[j]
        z = model.noisy_input(images, t_j, np.broadcast_to(eps_j, images.shape))
        prompts_here = sorted({p for plist in prompt_lists for p in plist})
        for prompt in prompts_here:
            pred = np.asarray(model.predict(z, t_j, prompt), dtype=np.float64)
            if not np.isfinite(pred).all():
                raise NumericError(f"non-finite prediction for prompt {prompt!r}")
            r = (eps_j[None] - pred).reshape(n, -1)
            e = np.sum(r * r, axis=1) if metric == "l2" else np.sum(
                np.abs(r), axis=1
            )
            for i, plist in enumerate(prompt_lists):
                if prompt in plist:
                    errors[i, plist.index(prompt), j] = e[i]
    ids = list(image_ids) if image_ids is not None else [
        f"img-{i:05d}" for i in range(n)
    ]
    return ScoreTensor(
        errors=errors.astype(np.float32),
        prompts=prompt_lists,
        image_ids=ids,
        eval_seed=eval_set.seed,
        eval_bias=eval_set.bias,
        producer=producer or "generic",
        metric=metric,
        config_hash=config_hash,
    )


# --------------------------------------------------------------------------
# posterior / prediction
# --------------------------------------------------------------------------

def _grid_weights(weights, n_timesteps: int, t=None) -> np.ndarray:
    """Resolve a weight spec (array or WeightFunction) on the eval grid."""
    from .weights import WeightFunction, weights_on_grid  # cycle-free at call time

    if isinstance(weights, WeightFunction):
        if t is None:
            t = np.arange(1, n_timesteps + 1, dtype=np.float64) / n_timesteps
        return weights_on_grid(weights, np.asarray(t, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_timesteps,):
        raise ConfigError(f"weights shape {w.shape} != ({n_timesteps},)")
    if not np.isfinite(w).all():
        raise NumericError("weights contain non-finite values")
    return w


def posterior(scores, weights, t=None) -> np.ndarray:
    """Softmax over prompts of the mean weighted error, max-subtracted.

    ``scores`` is the (n_prompts, T_s) error matrix of one image; ``weights``
    is a per-timestep array or a WeightFunction (evaluated on ``t`` or the
    canonical j/T_s grid).
    """
    e = check_scores(scores)
    w = _grid_weights(weights, e.shape[1], t)
    logits = -(e @ w) / e.shape[1]
    logits -= logits.max()
    ex = np.exp(logits)
    return ex / ex.sum()


def predict(scores, weights, t=None) -> int:
    """Index of the most likely prompt; ties break to the lowest index."""
    return int(np.argmax(posterior(scores, weights, t)))


def posterior_batch(errors: np.ndarray, weights, t=None) -> np.ndarray:
    """Vectorized posterior over a (n, K, T_s) tensor of equal-K items."""
    e = np.asarray(errors, dtype=np.float64)
    w = _grid_weights(weights, e.shape[2], t)
    logits = -np.einsum("nkt,t->nk", e, w) / e.shape[2]
    logits -= logits.max(axis=1, keepdims=True)
    ex = np.exp(logits)
    return ex / ex.sum(axis=1, keepdims=True)


def predict_tensor(tensor: ScoreTensor, weights, t=None) -> np.ndarray:
    """Predicted prompt index for every image of a ScoreTensor."""
    out = np.empty(tensor.n_images, dtype=np.int64)
    for i in range(tensor.n_images):
        out[i] = predict(tensor.image_errors(i), weights, t)
    return out


def group_score(score_matrix) -> int:
    """Paired image-text indicator.

    ``score_matrix[i][j]`` is the (higher-is-better) score of text j against
    image i. Returns 1 iff each image strictly prefers its own text.
    """
    m = np.asarray(score_matrix, dtype=np.float64)
    if m.shape != (2, 2):
        raise ConfigError(f"expected a 2x2 score matrix, got {m.shape}")
    return int(m[0, 0] > m[0, 1] and m[1, 1] > m[1, 0])


def group_score_from_errors(errors_1, errors_2, weights, t=None) -> int:
    """Group score from two (2, T_s) error matrices (rows = the two texts)."""
    e1 = check_scores(errors_1)
    e2 = check_scores(errors_2)
    w = _grid_weights(weights, e1.shape[1], t)
    s1 = -(e1 @ w) / e1.shape[1]
    s2 = -(e2 @ w) / e2.shape[1]
    return group_score([[s1[0], s1[1]], [s2[0], s2[1]]])


# --------------------------------------------------------------------------
# sklearn-style wrapper
# --------------------------------------------------------------------------

class ScoreClassifier(BaseEstimator, ClassifierMixin):
    """Classifier over precomputed error tensors shaped (n, K, T_s).

    ``fit`` only records the class labels (scoring is training-free); the
    weighting is a constructor parameter so the estimator composes with
    sklearn model selection.
    """

    def __init__(self, weights="uniform"):
        self.weights = weights

    def _resolve(self, n_timesteps):
        from .weights import WeightFunction

        if isinstance(self.weights, str):
            if self.weights == "uniform":
                return np.ones(n_timesteps)
            raise ConfigError(f"unknown weighting {self.weights!r}")
        if isinstance(self.weights, WeightFunction):
            return _grid_weights(self.weights, n_timesteps)
        return _grid_weights(self.weights, n_timesteps)

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 3:
            raise ConfigError("X must be (n_items, n_prompts, n_timesteps)")
        self.n_timesteps_ = X.shape[2]
        self.classes_ = np.arange(X.shape[1])
        return self

    def predict_proba(self, X):
        X = np.asarray(X, dtype=np.float64)
        w = self._resolve(X.shape[2])
        return posterior_batch(X, w)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)
