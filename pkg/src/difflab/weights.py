"""Timestep weighting functions and their fitting on frozen score tensors.

Weights multiply per-timestep reconstruction errors before the softmax over
prompts. Fitting minimizes the cross-entropy of that posterior with respect
to the weight parameters by full-batch gradient descent; scores stay frozen
throughout, so a fit costs a few matrix products per epoch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .validation import ConfigError, NumericError

KINDS = ("uniform", "exponential", "rectified_flow", "piecewise", "polynomial")


@dataclass(frozen=True)
class WeightFunction:
    kind: str
    params: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown weighting kind {self.kind!r}")
        if self.kind == "exponential" and len(self.params) != 1:
            raise ConfigError("exponential weighting takes exactly (lambda,)")
        if self.kind == "piecewise" and not self.params:
            raise ConfigError("piecewise weighting needs at least one value")
        if self.kind == "polynomial" and not self.params:
            raise ConfigError("polynomial weighting needs coefficients")
        if self.params and not np.isfinite(self.params).all():
            raise NumericError("weight parameters must be finite")

    @classmethod
    def uniform(cls):
        return cls("uniform")

    @classmethod
    def exponential(cls, lam: float = 7.0):
        return cls("exponential", (float(lam),))

    @classmethod
    def rectified_flow(cls):
        return cls("rectified_flow")

    @classmethod
    def piecewise(cls, values):
        return cls("piecewise", tuple(float(v) for v in values))

    @classmethod
    def polynomial(cls, coeffs):
        return cls("polynomial", tuple(float(a) for a in coeffs))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "WeightFunction":
        return cls(d["kind"], tuple(d.get("params", ())))


def eval_weight(fn: WeightFunction, t) -> np.ndarray:
    """Evaluate the weight at normalized time t in (0, 1].

    Piecewise cells are right-closed, so t = j/T_s reads v[j-1]; the index is
    clamped into [0, T_s - 1]. Rectified-flow weighting t/(1-t) is undefined
    at t = 1.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise ConfigError(f"weights are defined on (0, 1]; got {t}")
    if fn.kind == "uniform":
        return np.ones_like(t)
    if fn.kind == "exponential":
        return np.exp(-fn.params[0] * t)
    if fn.kind == "rectified_flow":
        if np.any(t >= 1.0):
            raise ConfigError("rectified-flow weighting is undefined at t = 1")
        return t / (1.0 - t)
    if fn.kind == "piecewise":
        n = len(fn.params)
        idx = np.ceil(t * n - 1e-9).astype(np.int64) - 1
        idx = np.clip(idx, 0, n - 1)
        return np.asarray(fn.params, dtype=np.float64)[idx]
    # polynomial
    coeffs = np.asarray(fn.params, dtype=np.float64)
    powers = t[..., None] ** np.arange(len(coeffs))
    return powers @ coeffs


def weights_on_grid(fn: WeightFunction, t_grid: np.ndarray) -> np.ndarray:
    """Weights for a classification grid.

    Identical to ``eval_weight`` except that a piecewise function whose
    length matches the grid maps entry j-1 to the j-th timestep directly
    (integer indexing, immune to float boundary noise).
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if fn.kind == "piecewise" and len(fn.params) == len(t_grid):
        return np.asarray(fn.params, dtype=np.float64)
    return eval_weight(fn, t_grid)


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

@dataclass
class FitConfig:
    epochs: int = 5000
    lr: float = 0.05
    kind: str = "piecewise"           # "piecewise" | "polynomial"
    degree: int = 3
    seed: int = 0
    val_fraction: float = 0.2
    nonnegative: bool = False
    early_stop_patience: int | None = None  # epochs without val gain; None = off
    optimizer: str = "gd"             # "gd" (full-batch) | "adam"

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.kind not in ("piecewise", "polynomial"):
            raise ConfigError(f"cannot fit weighting kind {self.kind!r}")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class FitResult:
    weight_fn: WeightFunction
    train_curve: np.ndarray        # cross-entropy per epoch (normalized errors)
    val_accuracy: np.ndarray       # validation accuracy per epoch
    best_epoch: int
    train_accuracy: float
    degenerate: bool = False


def _design(kind: str, degree: int, t_grid: np.ndarray) -> np.ndarray:
    """Map parameters to per-timestep weights: w = P @ a."""
    n = len(t_grid)
    if kind == "piecewise":
        return np.eye(n)
    return t_grid[:, None] ** np.arange(degree + 1)[None, :]


def _ce_and_grad(e: np.ndarray, labels: np.ndarray, w: np.ndarray):
    """Cross-entropy of the weighted softmax posterior and its gradient in w.

    e is (n, K, T); logits are -(e @ w) / T.
    """
    n, _, t = e.shape
    logits = -np.einsum("nkt,t->nk", e, w) / t
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    ce = float(np.mean(lse - logits[np.arange(n), labels]))
    p = np.exp(logits - m)
    p /= p.sum(axis=1, keepdims=True)
    delta = p
    delta[np.arange(n), labels] -= 1.0
    grad = -np.einsum("nk,nkt->t", delta, e) / (n * t)
    return ce, grad


def _accuracy(e: np.ndarray, labels: np.ndarray, w: np.ndarray) -> float:
    logits = -np.einsum("nkt,t->nk", e, w)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def fit_weights(errors, labels, config: FitConfig,
                val_mask=None, t_grid=None) -> FitResult:
    """Fit a weighting on a frozen (n, K, T_s) error tensor.

    Deterministic given config.seed. Returns the parameters with the best
    validation accuracy (ties resolved to the latest epoch). A tensor whose
    errors carry no variance across prompts yields a warning and uniform
    weights.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim != 3:
        raise ConfigError("errors must be (n_items, n_prompts, n_timesteps)")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (e.shape[0],):
        raise ConfigError("need one label per item")
    if labels.min() < 0 or labels.max() >= e.shape[1]:
        raise ConfigError("labels index prompts out of range")
    if not np.isfinite(e).all():
        raise NumericError("error tensor contains non-finite values")
    n, _, t_s = e.shape
    if t_grid is None:
        t_grid = np.arange(1, t_s + 1, dtype=np.float64) / t_s
    else:
        t_grid = np.asarray(t_grid, dtype=np.float64)

    if np.allclose(e.var(axis=1), 0.0):
        warnings.warn("score tensor has no variance across prompts; "
                      "returning uniform weights")
        return FitResult(
            WeightFunction.uniform(),
            train_curve=np.zeros(0),
            val_accuracy=np.zeros(0),
            best_epoch=0,
            train_accuracy=_accuracy(e, labels, np.ones(t_s)),
            degenerate=True,
        )

    rng = np.random.default_rng(config.seed)
    if val_mask is None:
        val_mask = np.zeros(n, dtype=bool)
        n_val = int(round(config.val_fraction * n))
        if n_val:
            val_mask[rng.choice(n, size=n_val, replace=False)] = True
    else:
        val_mask = np.asarray(val_mask, dtype=bool)
    train_mask = ~val_mask
    if not train_mask.any():
        raise ConfigError("no training items left after the validation split")
    e_tr, y_tr = e[train_mask], labels[train_mask]
    e_va, y_va = e[val_mask], labels[val_mask]

    # condition the problem: the posterior is invariant to per-timestep
    # shifts shared across prompts, so center over the prompt axis and
    # normalize by the centered scale; fitted parameters are rescaled back
    # so they apply to raw errors
    e_tr = e_tr - e_tr.mean(axis=1, keepdims=True)
    e_va = e_va - e_va.mean(axis=1, keepdims=True) if len(e_va) else e_va
    scale = float(np.sqrt(np.mean(e_tr**2))) or 1.0
    e_tr = e_tr / scale
    e_va = e_va / scale

    design = _design(config.kind, config.degree, t_grid)
    n_par = design.shape[1]
    # start at the uniform weighting where the basis can express it
    a = np.zeros(n_par)
    if config.kind == "piecewise":
        a[:] = 1.0
    else:
        a[0] = 1.0

    def val_acc(params):
        return (_accuracy(e_va, y_va, design @ params) if len(e_va)
                else _accuracy(e_tr, y_tr, design @ params))

    # the initial (uniform) weighting competes in model selection too
    best_a, best_acc, best_epoch = a.copy(), val_acc(a), -1
    train_curve = np.empty(config.epochs)
    val_curve = np.empty(config.epochs)
    m_state = np.zeros(n_par)
    v_state = np.zeros(n_par)
    since_best = 0
    epochs_run = config.epochs
    for epoch in range(config.epochs):
        w = design @ a
        ce, grad_w = _ce_and_grad(e_tr, y_tr, w)
        grad_a = design.T @ grad_w
        train_curve[epoch] = ce
        if config.optimizer == "adam":
            m_state = 0.9 * m_state + 0.1 * grad_a
            v_state = 0.999 * v_state + 0.001 * grad_a**2
            mhat = m_state / (1 - 0.9 ** (epoch + 1))
            vhat = v_state / (1 - 0.999 ** (epoch + 1))
            a = a - config.lr * mhat / (np.sqrt(vhat) + 1e-8)
        else:
            a = a - config.lr * grad_a
        if config.nonnegative and config.kind == "piecewise":
            a = np.maximum(a, 0.0)
        acc = val_acc(a)
        val_curve[epoch] = acc
        if acc >= best_acc:
            best_acc, best_a, best_epoch = acc, a.copy(), epoch
            since_best = 0
        else:
            since_best += 1
            if (config.early_stop_patience is not None
                    and since_best >= config.early_stop_patience):
                epochs_run = epoch + 1
                break

    final = best_a / scale
    fn = (WeightFunction.piecewise(final) if config.kind == "piecewise"
          else WeightFunction.polynomial(final))
    return FitResult(
        weight_fn=fn,
        train_curve=train_curve[:epochs_run],
        val_accuracy=val_curve[:epochs_run],
        best_epoch=best_epoch,
        train_accuracy=_accuracy(e_tr, y_tr, design @ best_a),
    )


def lowshot_split(dataset_ids, fractions=(0.05, 0.05, 0.90), seed=0):
    """Disjoint, exhaustive (train, val, test) id split; deterministic."""
    ids = list(dataset_ids)
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ConfigError("fractions must be three values summing to 1")
    n = len(ids)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    if n_train < 1 or n_val < 1:
        raise ConfigError(
            f"dataset of {n} items is too small for fractions {fractions}"
        )
    order = np.random.default_rng(seed).permutation(n)
    train = [ids[i] for i in order[:n_train]]
    val = [ids[i] for i in order[n_train:n_train + n_val]]
    test = [ids[i] for i in order[n_train + n_val:]]
    return train, val, test


# --------------------------------------------------------------------------
# sklearn-style estimator
# --------------------------------------------------------------------------

class WeightFitter(BaseEstimator, ClassifierMixin):
    """Learns a timestep weighting from frozen error tensors.

    X is (n_items, n_prompts, n_timesteps); y gives each item's correct
    prompt index. After ``fit``, ``weight_fn_`` holds the learned weighting
    and ``predict`` applies the weighted-softmax argmax rule.
    """

    def __init__(self, kind="piecewise", degree=3, epochs=5000, lr=0.05,
                 seed=0, val_fraction=0.2, nonnegative=False,
                 early_stop_patience=None, optimizer="gd"):
        self.kind = kind
        self.degree = degree
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.val_fraction = val_fraction
        self.nonnegative = nonnegative
        self.early_stop_patience = early_stop_patience
        self.optimizer = optimizer

    def _config(self) -> FitConfig:
        return FitConfig(
            epochs=self.epochs, lr=self.lr, kind=self.kind, degree=self.degree,
            seed=self.seed, val_fraction=self.val_fraction,
            nonnegative=self.nonnegative,
            early_stop_patience=self.early_stop_patience,
            optimizer=self.optimizer,
        )

    def fit(self, X, y, val_mask=None):
        result = fit_weights(X, y, self._config(), val_mask=val_mask)
        self.weight_fn_ = result.weight_fn
        self.fit_result_ = result
        self.n_timesteps_ = np.asarray(X).shape[2]
        self.classes_ = np.arange(np.asarray(X).shape[1])
        return self

    def grid_weights_(self) -> np.ndarray:
        t = np.arange(1, self.n_timesteps_ + 1) / self.n_timesteps_
        return weights_on_grid(self.weight_fn_, t)

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        w = self.grid_weights_()
        return np.argmax(-np.einsum("nkt,t->nk", X, w), axis=1)

    def score(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))
