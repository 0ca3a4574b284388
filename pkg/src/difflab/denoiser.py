"""Toy conditional denoiser: forward processes, MLP noise predictor with
manual backpropagation, Adam training loop, ancestral sampling, and the
partial-noise sweep.

The network predicts the noise added to an image given the noisy image, the
normalized timestep and a prompt embedding. Images live in [0, 1] at the API
boundary and are mapped to [-1, 1] internally (``to_model_space``).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import scenes
from .scenes import IMAGE_SHAPE, ParsedPrompt, TaskType, parse_caption
from .validation import ConfigError, NumericError, as_rng, check_unit_time

IMAGE_DIM = int(np.prod(IMAGE_SHAPE))

# prompt slots: (shape-1, color-1, shape-2, color-2, relation, count);
# index 0 of every slot table is the learned "absent" row, so the all-absent
# prompt doubles as the unconditional (null) embedding.
SLOT_CARDS = (
    len(scenes.SHAPE_NAMES) + 1,
    len(scenes.COLOR_NAMES) + 1,
    len(scenes.SHAPE_NAMES) + 1,
    len(scenes.COLOR_NAMES) + 1,
    len(scenes.RELATIONS) + 1,
    len(scenes.COUNT_WORDS) + 1,
)
N_SLOTS = len(SLOT_CARDS)


def to_model_space(x01: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(x01, dtype=np.float64) - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


# --------------------------------------------------------------------------
# forward processes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """DDPM variance schedule, or the rectified-flow linear path (no tables)."""

    kind: str  # "ddpm" | "rf"
    n_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2

    def __post_init__(self):
        if self.kind not in ("ddpm", "rf"):
            raise ConfigError(f"unknown forward process {self.kind!r}")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_min, self.beta_max, self.n_steps)

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def index_of(self, t) -> np.ndarray:
        """Nearest discrete step for normalized t in [0, 1]."""
        t = check_unit_time(t)
        return np.round(t * (self.n_steps - 1)).astype(np.int64)

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[self.index_of(t)]


def forward_ddpm(x0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with t in [0, 1]."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ConfigError(f"noise shape {eps.shape} != image shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_rf(x0, t, eps):
    """Straight-line path z_t = (1 - t) x0 + t eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ConfigError(f"noise shape {eps.shape} != image shape {x0.shape}")
    t = check_unit_time(t)
    t = np.reshape(t, np.shape(t) + (1,) * (x0.ndim - np.ndim(t)))
    return (1.0 - t) * x0 + t * eps


# --------------------------------------------------------------------------
# prompt and time encodings
# --------------------------------------------------------------------------

def encode_prompt(prompt: str | ParsedPrompt | None) -> np.ndarray:
    """Map a caption to the six slot indices (0 = absent / unconditional)."""
    idx = np.zeros(N_SLOTS, dtype=np.int64)
    if prompt is None:
        return idx
    parsed = parse_caption(prompt) if isinstance(prompt, str) else prompt
    c1, s1 = parsed.mentions[0]
    idx[0] = scenes.SHAPE_NAMES.index(s1) + 1
    if c1 is not None:
        idx[1] = scenes.COLOR_NAMES.index(c1) + 1
    if len(parsed.mentions) > 1:
        c2, s2 = parsed.mentions[1]
        idx[2] = scenes.SHAPE_NAMES.index(s2) + 1
        if c2 is not None:
            idx[3] = scenes.COLOR_NAMES.index(c2) + 1
    if parsed.relation is not None:
        idx[4] = scenes.RELATIONS.index(parsed.relation) + 1
    if parsed.count is not None:
        idx[5] = parsed.count
    return idx


def time_features(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of normalized time, frequencies pi * 2^k."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.pi * (2.0 ** np.arange(half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _silu(a):
    return a * _sigmoid(a)


def _silu_grad(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

N_CELLS = scenes.GRID * scenes.GRID
CELL_DIM = scenes.CELL * scenes.CELL * 3

PARAM_ORDER = ("Wp", "bp", "W2", "b2", "W3", "b3", "G2", "Gs", "Bs") + tuple(
    f"E{i}" for i in range(N_SLOTS)
)


def split_cells(z: np.ndarray) -> np.ndarray:
    """(B, IMAGE_DIM) -> (B, N_CELLS, CELL_DIM) grouped by grid cell."""
    b = z.shape[0]
    g, c = scenes.GRID, scenes.CELL
    z = z.reshape(b, g, c, g, c, 3)
    return z.transpose(0, 1, 3, 2, 4, 5).reshape(b, N_CELLS, CELL_DIM)


def merge_cells(cells: np.ndarray) -> np.ndarray:
    """Inverse of split_cells."""
    b = cells.shape[0]
    g, c = scenes.GRID, scenes.CELL
    z = cells.reshape(b, g, g, c, c, 3).transpose(0, 1, 3, 2, 4, 5)
    return z.reshape(b, IMAGE_DIM)


@dataclass
class DenoiserModel:
    """Noise predictor: a weight-shared per-cell patch encoder (first hidden
    layer) followed by a dense mix layer whose units are gated by the time
    and prompt embedding, then a linear decoder back to pixel shape."""

    kind: str                      # "ddpm" | "rf"
    schedule: NoiseSchedule
    params: dict[str, np.ndarray]
    hidden: int
    emb_dim: int
    time_dim: int
    patch_dim: int = 32
    trained: bool = False
    config_hash: str | None = None

    @classmethod
    def init(cls, kind: str, seed: int, hidden=512, emb_dim=64, time_dim=16,
             patch_dim=32, schedule: NoiseSchedule | None = None
             ) -> "DenoiserModel":
        if schedule is None:
            schedule = NoiseSchedule(kind)
        if schedule.kind != kind:
            raise ConfigError("schedule kind does not match model kind")
        rng = np.random.default_rng(seed)
        d_mix = N_CELLS * patch_dim + time_dim + emb_dim
        cond = time_dim + emb_dim
        params = {
            "Wp": rng.standard_normal((CELL_DIM + time_dim, patch_dim))
            / np.sqrt(CELL_DIM + time_dim),
            "bp": np.zeros(patch_dim),
            "W2": rng.standard_normal((d_mix, hidden)) / np.sqrt(d_mix),
            "b2": np.zeros(hidden),
            "W3": rng.standard_normal((hidden, IMAGE_DIM)) / np.sqrt(hidden),
            "b3": np.zeros(IMAGE_DIM),
            # multiplicative gate on the mix layer, identity at init; the
            # prompt mostly selects which features fire, which an additive
            # pathway alone learns too slowly here
            "G2": np.zeros((cond, hidden)),
            # time-dependent diagonal skip from z to the output: noise
            # prediction is near-identity at high noise, which a hidden
            # layer narrower than the image cannot express on its own
            "Gs": np.zeros((time_dim, IMAGE_DIM)),
            "Bs": np.zeros((time_dim, IMAGE_DIM)),
        }
        for i, card in enumerate(SLOT_CARDS):
            params[f"E{i}"] = rng.standard_normal((card, emb_dim))
        return cls(kind, schedule, params, hidden, emb_dim, time_dim,
                   patch_dim)

    # ---- forward/backward ------------------------------------------------

    def prompt_embedding(self, pidx: np.ndarray) -> np.ndarray:
        pidx = np.atleast_2d(pidx)
        emb = np.zeros((pidx.shape[0], self.emb_dim))
        for s in range(N_SLOTS):
            emb += self.params[f"E{s}"][pidx[:, s]]
        return emb

    def forward(self, z: np.ndarray, t, pidx: np.ndarray, want_cache=False):
        """Batched noise prediction. z is (B, IMAGE_DIM) in model space."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        b = z.shape[0]
        pidx = np.atleast_2d(pidx)
        tf = time_features(t, self.time_dim)
        if tf.shape[0] == 1 and b > 1:
            tf = np.repeat(tf, b, axis=0)
        pe = self.prompt_embedding(pidx)
        if pe.shape[0] == 1 and b > 1:
            pe = np.repeat(pe, b, axis=0)
        p = self.params
        cells = split_cells(z)                               # (B, 16, 48)
        xc = np.concatenate(
            [cells, np.repeat(tf[:, None, :], N_CELLS, axis=1)], axis=2
        )
        ap = xc @ p["Wp"] + p["bp"]                          # (B, 16, dp)
        hp = _silu(ap)
        x2 = np.concatenate([hp.reshape(b, -1), tf, pe], axis=1)
        cond = np.concatenate([tf, pe], axis=1)
        a2 = x2 @ p["W2"] + p["b2"]
        s2 = _silu(a2)
        g2 = cond @ p["G2"]
        h2 = s2 * (1.0 + g2)
        out = h2 @ p["W3"] + p["b3"] + (tf @ p["Gs"]) * z + tf @ p["Bs"]
        if want_cache:
            return out, (z, tf, xc, ap, hp, x2, cond, a2, s2, g2, h2, pidx)
        return out

    def backward(self, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
        z, tf, xc, ap, hp, x2, cond, a2, s2, g2, h2, pidx = cache
        b = dout.shape[0]
        p = self.params
        grads = {}
        grads["W3"] = h2.T @ dout
        grads["b3"] = dout.sum(axis=0)
        grads["Gs"] = tf.T @ (dout * z)
        grads["Bs"] = tf.T @ dout
        dh2 = dout @ p["W3"].T
        ds2 = dh2 * (1.0 + g2)
        dg2 = dh2 * s2
        grads["G2"] = cond.T @ dg2
        dcond = dg2 @ p["G2"].T
        da2 = ds2 * _silu_grad(a2)
        grads["W2"] = x2.T @ da2
        grads["b2"] = da2.sum(axis=0)
        dx2 = da2 @ p["W2"].T
        n_patch = N_CELLS * self.patch_dim
        dhp = dx2[:, :n_patch].reshape(b, N_CELLS, self.patch_dim)
        dap = dhp * _silu_grad(ap)
        grads["Wp"] = np.einsum("bnc,bnd->cd", xc, dap)
        grads["bp"] = dap.sum(axis=(0, 1))
        dpe = dx2[:, n_patch + self.time_dim:] + dcond[:, self.time_dim:]
        for s in range(N_SLOTS):
            g = np.zeros_like(p[f"E{s}"])
            np.add.at(g, pidx[:, s], dpe)
            grads[f"E{s}"] = g
        return grads

    def predict(self, z_t: np.ndarray, t, prompt) -> np.ndarray:
        """Spec-facing single/batch prediction; prompt is a caption or None."""
        check_unit_time(t)
        pidx = encode_prompt(prompt)
        flat = np.asarray(z_t, dtype=np.float64).reshape(-1, IMAGE_DIM)
        out = self.forward(flat, t, pidx[None, :])
        if not np.isfinite(out).all():
            raise NumericError("non-finite noise prediction")
        return out.reshape(np.shape(z_t))

    def noisy_input(self, x01, t, eps) -> np.ndarray:
        """Apply this model's forward process to a [0,1] image."""
        xm = to_model_space(x01)
        if self.kind == "ddpm":
            return forward_ddpm(xm, t, eps, self.schedule)
        return forward_rf(xm, t, eps)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 6000
    batch_size: int = 256
    lr: float = 2e-3
    lr_schedule: str = "cosine"      # "cosine" | "constant"
    seed: int = 0
    hidden: int = 512
    emb_dim: int = 64
    time_dim: int = 16
    patch_dim: int = 32
    t_sampling: str = "uniform"      # "uniform" | "logitnormal" (rf option)
    logitnormal_loc: float = 0.0
    logitnormal_scale: float = 1.0
    loss_weighting: str = "uniform"  # "uniform" | "exponential" | "rf"
    exp_lambda: float = 7.0
    p_uncond: float = 0.1
    val_every: int = 25
    val_size: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.lr) <= 0:
            raise ConfigError("steps, batch_size and lr must be positive")
        if self.t_sampling not in ("uniform", "logitnormal"):
            raise ConfigError(f"unknown t sampling {self.t_sampling!r}")
        if self.loss_weighting not in ("uniform", "exponential", "rf"):
            raise ConfigError(f"unknown loss weighting {self.loss_weighting!r}")


def _train_weights(t: np.ndarray, config: TrainConfig) -> np.ndarray:
    if config.loss_weighting == "uniform":
        return np.ones_like(t)
    if config.loss_weighting == "exponential":
        return np.exp(-config.exp_lambda * t)
    return np.minimum(t, 1.0 - 1e-3) / (1.0 - np.minimum(t, 1.0 - 1e-3))


def _sample_t(rng, n, config: TrainConfig) -> np.ndarray:
    if config.t_sampling == "logitnormal":
        u = rng.normal(config.logitnormal_loc, config.logitnormal_scale, size=n)
        return 1.0 / (1.0 + np.exp(-u))
    return rng.random(n)


def loss_and_grads(model: DenoiserModel, x0m: np.ndarray, t: np.ndarray,
                   eps: np.ndarray, pidx: np.ndarray, w: np.ndarray):
    """Weighted noise-prediction loss (mean over batch and dimensions) and
    analytic parameter gradients. x0m is flattened, model-space."""
    if model.kind == "ddpm":
        z = forward_ddpm(x0m, t, eps, model.schedule)
    else:
        z = forward_rf(x0m, t, eps)
    out, cache = model.forward(z, t, pidx, want_cache=True)
    r = out - eps
    batch, dim = r.shape
    loss = float(np.mean(w * np.mean(r * r, axis=1)))
    dout = (2.0 / (batch * dim)) * w[:, None] * r
    grads = model.backward(cache, dout)
    return loss, grads


def train(dataset, config: TrainConfig, kind: str):
    """Train a denoiser with manual backprop + Adam.

    dataset is (images01, captions); returns (model, curves) where curves
    has 'loss' per step and 'val' every val_every steps on a frozen
    validation batch with fixed timesteps and noises.
    """
    images01, captions = dataset
    images01 = np.asarray(images01, dtype=np.float64)
    if images01.ndim != 4 or len(images01) == 0 or len(captions) != len(images01):
        raise ConfigError("dataset must be a non-empty (images, captions) pair")
    n = len(images01)
    x_all = to_model_space(images01).reshape(n, -1)
    pidx_all = np.stack([encode_prompt(c) for c in captions])

    rng = np.random.default_rng(config.seed)
    model = DenoiserModel.init(
        kind, seed=int(rng.integers(2**31)), hidden=config.hidden,
        emb_dim=config.emb_dim, time_dim=config.time_dim,
        patch_dim=config.patch_dim,
    )

    # frozen validation batch: fixed items, timesteps and noises
    vi = rng.integers(0, n, size=min(config.val_size, max(1, n)))
    val_t = rng.random(len(vi))
    val_eps = rng.standard_normal((len(vi), x_all.shape[1]))
    val_w = _train_weights(val_t, config)

    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, aeps = config.adam_beta1, config.adam_beta2, config.adam_eps

    loss_curve = np.empty(config.steps)
    val_steps, val_losses = [], []
    for step in range(config.steps):
        bi = rng.integers(0, n, size=config.batch_size)
        t = _sample_t(rng, config.batch_size, config)
        eps = rng.standard_normal((config.batch_size, x_all.shape[1]))
        pidx = pidx_all[bi].copy()
        drop = rng.random(config.batch_size) < config.p_uncond
        pidx[drop] = 0
        w = _train_weights(t, config)
        loss, grads = loss_and_grads(model, x_all[bi], t, eps, pidx, w)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step}")
        loss_curve[step] = loss
        tt = step + 1
        if config.lr_schedule == "cosine":
            lr = config.lr * (0.1 + 0.45 * (1 + np.cos(np.pi * step
                                                       / config.steps)))
        else:
            lr = config.lr
        for k, g in grads.items():
            m_state[k] = b1 * m_state[k] + (1 - b1) * g
            v_state[k] = b2 * v_state[k] + (1 - b2) * g * g
            mhat = m_state[k] / (1 - b1**tt)
            vhat = v_state[k] / (1 - b2**tt)
            model.params[k] -= lr * mhat / (np.sqrt(vhat) + aeps)
        if step % config.val_every == 0 or step == config.steps - 1:
            z = (forward_ddpm(x_all[vi], val_t, val_eps, model.schedule)
                 if kind == "ddpm" else forward_rf(x_all[vi], val_t, val_eps))
            out = model.forward(z, val_t, pidx_all[vi])
            res = out - val_eps
            val_steps.append(step)
            val_losses.append(float(np.mean(val_w * np.mean(res * res, axis=1))))

    model.trained = True
    curves = {
        "loss": loss_curve,
        "val_steps": np.array(val_steps),
        "val_loss": np.array(val_losses),
    }
    return model, curves


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def _predict_eps(model, z, t, pidx_cond, guidance_scale):
    eps_c = model.forward(z, t, pidx_cond)
    if guidance_scale == 0.0:
        return eps_c
    eps_u = model.forward(z, t, np.zeros((1, N_SLOTS), dtype=np.int64))
    return (1.0 + guidance_scale) * eps_c - guidance_scale * eps_u


def denoise_from(model: DenoiserModel, z: np.ndarray, t_from: float,
                 n_steps: int, prompt, guidance_scale: float = 0.0,
                 rng=None, eta: float = 1.0, clip_denoised: bool = True):
    """Denoise model-space z from noise level t_from down to 0."""
    if n_steps <= 0:
        return z
    pidx = encode_prompt(prompt)[None, :]
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))

    if model.kind == "rf":
        ts = np.linspace(t_from, 0.0, n_steps + 1)
        delta = min(0.02, 1.0 / (2 * n_steps))
        for t_a, t_b in zip(ts[:-1], ts[1:]):
            eps_hat = _predict_eps(model, z, t_a, pidx, guidance_scale)
            te = min(t_a, 1.0 - delta)
            x0_hat = (z - te * eps_hat) / (1.0 - te)
            if clip_denoised:
                x0_hat = np.clip(x0_hat, -1.0, 1.0)
            # re-derive the noise consistent with z and the clipped estimate;
            # feeding eps_hat back directly lets prediction error compound
            eps_impl = (z - (1.0 - te) * x0_hat) / te
            z = (1.0 - t_b) * x0_hat + t_b * eps_impl
        return z

    rng = as_rng(rng if rng is not None else 0)
    abar = model.schedule.alpha_bars
    i_from = int(model.schedule.index_of(t_from))
    seq = np.unique(np.round(np.linspace(i_from, 0, n_steps + 1)).astype(int))[::-1]
    for i_a, i_b in zip(seq[:-1], seq[1:]):
        t_a = i_a / (model.schedule.n_steps - 1)
        eps_hat = _predict_eps(model, z, t_a, pidx, guidance_scale)
        ab_a, ab_b = abar[i_a], abar[i_b]
        x0_hat = (z - np.sqrt(1.0 - ab_a) * eps_hat) / np.sqrt(ab_a)
        if clip_denoised:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        eps_impl = (z - np.sqrt(ab_a) * x0_hat) / np.sqrt(1.0 - ab_a)
        sigma = eta * np.sqrt((1.0 - ab_b) / (1.0 - ab_a)) * np.sqrt(
            1.0 - ab_a / ab_b
        )
        direction = np.sqrt(max(1.0 - ab_b - sigma**2, 0.0)) * eps_impl
        z = np.sqrt(ab_b) * x0_hat + direction
        if sigma > 0:
            z = z + sigma * rng.standard_normal(z.shape)
    return z


def sample(model: DenoiserModel, prompt: str, n_steps: int,
           guidance_scale: float = 0.0, seed=0,
           eta: float = 1.0, clip_denoised: bool = True) -> np.ndarray:
    """Generate one image from pure noise, conditioned on the prompt."""
    if not model.trained:
        raise ConfigError("model is not trained; refusing to sample")
    rng = as_rng(seed)
    z = rng.standard_normal((1, IMAGE_DIM))
    if n_steps == 0:
        return from_model_space(z).reshape(IMAGE_SHAPE).astype(np.float32)
    z = denoise_from(model, z, 1.0, n_steps, prompt, guidance_scale,
                     rng=rng, eta=eta, clip_denoised=clip_denoised)
    return from_model_space(z).reshape(IMAGE_SHAPE).astype(np.float32)


def partial_denoise_sweep(model: DenoiserModel, image01, t_levels, prompt,
                          n_steps: int, seed=0, guidance_scale: float = 0.0):
    """Noise the image to each level t, then denoise t -> 0; one output per t."""
    t_levels = list(t_levels)
    if not t_levels:
        raise ConfigError("t_levels must be non-empty")
    for t in t_levels:
        if not (0.0 < t <= 1.0):
            raise ConfigError(f"sweep level outside (0, 1]: {t}")
    rng = as_rng(seed)
    flat = to_model_space(image01).reshape(1, IMAGE_DIM)
    outs = []
    for t in t_levels:
        eps = rng.standard_normal((1, IMAGE_DIM))
        if model.kind == "ddpm":
            z = forward_ddpm(flat, t, eps, model.schedule)
        else:
            z = forward_rf(flat, t, eps)
        z = denoise_from(model, z, float(t), n_steps, prompt, guidance_scale,
                         rng=rng)
        outs.append(from_model_space(z).reshape(IMAGE_SHAPE).astype(np.float32))
    return outs


# --------------------------------------------------------------------------
# model file: magic, JSON header, float32 params, crc32
# --------------------------------------------------------------------------

MODEL_MAGIC = b"DNZ1"


def save_model(path, model: DenoiserModel) -> None:
    header = {
        "kind": model.kind,
        "schedule": {
            "kind": model.schedule.kind,
            "n_steps": model.schedule.n_steps,
            "beta_min": model.schedule.beta_min,
            "beta_max": model.schedule.beta_max,
        },
        "hidden": model.hidden,
        "emb_dim": model.emb_dim,
        "time_dim": model.time_dim,
        "patch_dim": model.patch_dim,
        "trained": model.trained,
        "config_hash": model.config_hash,
        "param_shapes": {k: list(model.params[k].shape) for k in PARAM_ORDER},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += struct.pack("<I", len(hbytes))
    blob += hbytes
    for k in PARAM_ORDER:
        blob += np.ascontiguousarray(
            model.params[k], dtype="<f4"
        ).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load_model(path) -> DenoiserModel:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MODEL_MAGIC:
        raise ConfigError(f"{path}: not a denoiser model file")
    stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise ConfigError(f"{path}: checksum mismatch")
    hlen = struct.unpack("<I", blob[4:8])[0]
    header = json.loads(blob[8:8 + hlen].decode())
    off = 8 + hlen
    params = {}
    for k in PARAM_ORDER:
        shape = tuple(header["param_shapes"][k])
        size = int(np.prod(shape)) * 4
        params[k] = np.frombuffer(
            blob[off:off + size], dtype="<f4"
        ).astype(np.float64).reshape(shape)
        off += size
    sch = header["schedule"]
    model = DenoiserModel(
        kind=header["kind"],
        schedule=NoiseSchedule(sch["kind"], sch["n_steps"], sch["beta_min"],
                               sch["beta_max"]),
        params=params,
        hidden=header["hidden"],
        emb_dim=header["emb_dim"],
        time_dim=header["time_dim"],
        patch_dim=header["patch_dim"],
        trained=header["trained"],
        config_hash=header.get("config_hash"),
    )
    return model


def save_loss_curve(path, curves: dict) -> None:
    lines = ["step,loss"]
    for i, v in enumerate(curves["loss"]):
        lines.append(f"{i},{v:.10g}")
    lines.append("")
    Path(path).write_text("\n".join(lines))
