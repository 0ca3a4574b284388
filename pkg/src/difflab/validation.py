"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class ConfigError(ValueError):
    """Bad configuration or arguments."""


class FormatError(ValueError):
    """Malformed or corrupt artifact file."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


def as_rng(seed) -> np.random.Generator:
    """Accept an int seed or a Generator; never share global state."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_image(img, shape=None) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ConfigError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ConfigError(f"expected image shape {tuple(shape)}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError("image contains non-finite values")
    return arr


def check_images(imgs, shape=None) -> np.ndarray:
    arr = np.asarray(imgs, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ConfigError(f"expected an (N, H, W, 3) batch, got shape {arr.shape}")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise ConfigError(f"expected image shape {tuple(shape)}, got {arr.shape[1:]}")
    if not np.isfinite(arr).all():
        raise NumericError("image batch contains non-finite values")
    return arr


def check_unit_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ConfigError(f"timestep outside [0, 1]: {t}")
    return t


def check_scores(scores, n_timesteps=None) -> np.ndarray:
    """Validate a per-image error matrix shaped (n_prompts, T_s)."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"expected (n_prompts, T_s) scores, got shape {arr.shape}")
    if n_timesteps is not None and arr.shape[1] != n_timesteps:
        raise ConfigError(
            f"scores have {arr.shape[1]} timesteps, expected {n_timesteps}"
        )
    if not np.isfinite(arr).all():
        raise NumericError("scores contain non-finite values")
    return arr


def check_probabilities(p, atol=1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise NumericError("negative probability")
    if abs(float(p.sum()) - 1.0) > atol:
        raise NumericError(f"probabilities sum to {p.sum()}, not 1")
    return p
