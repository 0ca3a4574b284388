import numpy as np
import pytest

import difflab as d
from difflab import denoiser as dn
from difflab.benchmark import verify_image
from difflab.validation import ConfigError


def test_sample_zero_steps_returns_initial_noise(tiny_model):
    model, _, _ = tiny_model
    out = dn.sample(model, "a photo of a red square", n_steps=0, seed=5)
    want = dn.from_model_space(
        np.random.default_rng(5).standard_normal((1, dn.IMAGE_DIM))
    ).reshape(d.IMAGE_SHAPE)
    assert np.allclose(out, want, atol=1e-6)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_sample_fixed_seed_identical(tiny_model):
    model, _, _ = tiny_model
    a = dn.sample(model, "a photo of a blue circle", 12, seed=9)
    b = dn.sample(model, "a photo of a blue circle", 12, seed=9)
    assert np.array_equal(a, b)
    c = dn.sample(model, "a photo of a blue circle", 12, seed=10)
    assert not np.array_equal(a, c)


def test_sample_untrained_model_rejected():
    model = dn.DenoiserModel.init("rf", seed=0, hidden=16, emb_dim=8,
                                  time_dim=4)
    with pytest.raises(ConfigError):
        dn.sample(model, "a photo of a red square", 4, seed=0)


def test_sample_with_guidance_differs(tiny_model):
    model, _, _ = tiny_model
    a = dn.sample(model, "a photo of a red square", 12, 0.0, seed=3)
    b = dn.sample(model, "a photo of a red square", 12, 2.0, seed=3)
    assert not np.array_equal(a, b)


def test_sampled_batch_verifies_above_noise_rate(tiny_model):
    model, _, _ = tiny_model
    prompt = "a photo of a red square"
    hits_model = sum(
        verify_image(dn.sample(model, prompt, 40, seed=100 + i), prompt, "flat")
        for i in range(40)
    )
    hits_noise = sum(
        verify_image(dn.sample(model, prompt, 0, seed=200 + i), prompt, "flat")
        for i in range(40)
    )
    assert hits_model > hits_noise


# --------------------------------------------------------------------------
# partial denoise sweep
# --------------------------------------------------------------------------

def test_sweep_five_levels_in_order(tiny_model):
    model, _, (images, _) = tiny_model
    levels = [0.1, 0.3, 0.5, 0.7, 0.9]
    outs = dn.partial_denoise_sweep(model, images[0], levels,
                                    "a photo of a red square", 8, seed=1)
    assert len(outs) == 5
    for img in outs:
        assert img.shape == d.IMAGE_SHAPE


def test_sweep_empty_levels_rejected(tiny_model):
    model, _, (images, _) = tiny_model
    with pytest.raises(ConfigError):
        dn.partial_denoise_sweep(model, images[0], [],
                                 "a photo of a red square", 4)


def test_sweep_small_noise_stays_close(tiny_model):
    model, _, (images, caps) = tiny_model
    x = images[0]
    t = 0.01
    seed = 77
    outs = dn.partial_denoise_sweep(model, x, [t], caps[0], 1, seed=seed)
    # reconstruction error is bounded by the forward/backward noise path:
    # || out - x || <= t/(1-t) * (||eps|| + ||eps_hat||) in model space,
    # which halves in image units
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((1, dn.IMAGE_DIM))
    xm = dn.to_model_space(x).reshape(1, -1)
    z = dn.forward_rf(xm, t, eps)
    eps_hat = model.forward(z, np.array([t]), dn.encode_prompt(caps[0])[None])
    bound = 0.5 * t / (1 - t) * (np.linalg.norm(eps) + np.linalg.norm(eps_hat))
    dist = np.linalg.norm(outs[0].astype(np.float64) - x.astype(np.float64))
    assert dist <= bound + 1e-6


def test_sweep_full_noise_is_input_independent(tiny_model):
    model, _, (images, caps) = tiny_model
    prompt = caps[0]

    def flat(img):
        v = img.astype(np.float64).ravel()
        return v - v.mean()

    def corr(a, b):
        a, b = flat(a), flat(b)
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))

    x = images[0]
    out = dn.partial_denoise_sweep(model, x, [1.0], prompt, 10, seed=5)[0]
    # null: denoise the SAME noise levels from other, unrelated images
    null = []
    for i in range(1, 25):
        other = dn.partial_denoise_sweep(model, images[i], [1.0], prompt, 10,
                                         seed=5)[0]
        null.append(corr(other, x))
    null = np.array(null)
    assert corr(out, x) <= null.mean() + 3 * null.std() + 1e-12


def test_ddpm_sampling_path():
    data_imgs = np.stack([
        d.render(d.sample_scene(d.TaskType.COLORS, i), "flat", i)
        for i in range(30)
    ])
    caps = [d.caption(d.sample_scene(d.TaskType.COLORS, i)) for i in range(30)]
    cfg = dn.TrainConfig(steps=60, batch_size=16, hidden=32, emb_dim=16,
                         time_dim=8, seed=2)
    model, _ = dn.train((data_imgs, caps), cfg, "ddpm")
    img = dn.sample(model, caps[0], 8, seed=4)
    assert img.shape == d.IMAGE_SHAPE
    assert np.isfinite(img).all()
    outs = dn.partial_denoise_sweep(model, data_imgs[0], [0.3, 0.9], caps[0],
                                    4, seed=8)
    assert len(outs) == 2
