import numpy as np
import pytest

import difflab as d
from difflab import denoiser as dn


def bfs_components(mask: np.ndarray) -> int:
    """Independent connected-component counter (8-connectivity)."""
    mask = mask.copy()
    h, w = mask.shape
    count = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx]:
                continue
            count += 1
            stack = [(sy, sx)]
            mask[sy, sx] = False
            while stack:
                y, x = stack.pop()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx]:
                            mask[ny, nx] = False
                            stack.append((ny, nx))
    return count


def make_planted_band_tensor(n=400, k=4, t_s=30, band=(0.5, 0.8),
                             gap=1.0, noise_sd=2.2, seed=0):
    """Score tensor with a discriminative gap only inside the timestep band;
    all other timesteps carry sign-flipped label-independent noise.

    Returns (errors, labels, in_band_mask). Calibrated so uniform weighting
    scores ~0.5 while band-concentrated weights separate perfectly.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(1, t_s + 1) / t_s
    in_band = (t >= band[0]) & (t <= band[1])
    y = rng.integers(0, k, n)
    base = 5.0 * noise_sd + gap + 1.0
    e = np.full((n, k, t_s), base)
    e[:, :, in_band] += gap
    for i in range(n):
        e[i, y[i], in_band] -= gap
    noise = noise_sd * rng.standard_normal((n, k, int((~in_band).sum())))
    e[:, :, ~in_band] -= noise  # sign-flipped, label-independent
    assert np.all(e >= 0)
    return e, y, in_band


def make_dataset(task_counts, style, seed):
    imgs, caps = [], []
    for k, (task, n) in enumerate(sorted(task_counts.items(),
                                         key=lambda kv: kv[0].value)):
        for i in range(n):
            sc = d.sample_scene(task, seed + 1_000_000 * k + i)
            imgs.append(d.render(sc, style, seed + 5_000_000 * k + i))
            caps.append(d.caption(sc))
    return np.stack(imgs), caps


@pytest.fixture(scope="session")
def tiny_model():
    """A small single-task model, trained just enough to beat baselines."""
    data = make_dataset({d.TaskType.SINGLE_OBJECT: 400}, "flat", seed=1234)
    cfg = dn.TrainConfig(steps=2500, batch_size=64, lr=1.5e-3, seed=3,
                         hidden=192, emb_dim=48)
    model, curves = dn.train(data, cfg, "rf")
    return model, curves, data
