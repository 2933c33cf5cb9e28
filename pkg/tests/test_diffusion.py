import math

import pytest
import torch

from semcolor.diffusion import (
    SamplerConfig,
    TrainBatch,
    cfg_predict,
    condition_dropout,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    denoise_loss,
    make_schedule,
    predict_x0,
    q_sample,
)
from semcolor.guidance import GuidanceConfig
from semcolor.unet import TextEmbedding


def _abar_python(T, t):
    """Cumulative product in plain Python floats, independent of torch."""
    prod = 1.0
    for k in range(t):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * k / (T - 1))
    return prod


class LinearModel:
    """eps_hat = a * z_t, ignoring every condition."""

    def __init__(self, a):
        self.a = a
        self.calls = 0

    def embed_text(self, texts):
        return TextEmbedding(torch.zeros(len(texts), 1, 1))

    def predict_noise(self, z_t, t, z_c, cond):
        self.calls += 1
        assert z_t.shape[0] == len(cond) == z_c.shape[0]
        return self.a * z_t


class OracleModel:
    """Recovers the injected noise from z_t given z0 (optionally offset)."""

    def __init__(self, z0, s, offset=0.0):
        self.z0, self.s, self.offset = z0, s, offset
        self.null_seen = []

    def embed_text(self, texts):
        return TextEmbedding(torch.zeros(len(texts), 1, 1))

    def predict_noise(self, z_t, t, z_c, cond):
        self.null_seen.append(cond.is_null.clone())
        ab = self.s.abar(t).view(-1, 1, 1, 1).to(z_t.dtype)
        return (z_t - ab.sqrt() * self.z0) / (1 - ab).sqrt() + self.offset


def test_schedule_endpoints():
    s = make_schedule(1000)
    assert float(s.betas[0]) == pytest.approx(1e-4, abs=1e-15)
    assert float(s.betas[-1]) == pytest.approx(0.02, abs=1e-15)
    assert float(s.abar(1)) == pytest.approx(1 - 1e-4, abs=1e-15)
    assert float(s.abar(0)) == 1.0
    assert float(s.abar(1000)) == pytest.approx(_abar_python(1000, 1000), rel=0.10)
    assert float(s.abar(1000)) == pytest.approx(_abar_python(1000, 1000), rel=1e-9)
    assert torch.all(s.betas[1:] > s.betas[:-1])
    assert torch.all(s.alphas_bar[1:] < s.alphas_bar[:-1])
    assert 0 < float(s.alphas_bar[-1]) < 1


def test_schedule_errors():
    with pytest.raises(ValueError):
        make_schedule(1)
    s = make_schedule(10)
    with pytest.raises(ValueError):
        s.abar(11)


def test_q_sample_closed_cases():
    s = make_schedule()
    z0 = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    t = 300
    assert torch.equal(q_sample(z0, t, torch.zeros_like(z0), s), s.abar(t).sqrt() * z0)
    eps = torch.randn_like(z0)
    out = q_sample(torch.zeros_like(z0), 1000, eps, s)
    assert torch.allclose(out, (1 - s.abar(1000)).sqrt() * eps, rtol=0, atol=1e-15)
    for bad in (0, 1001):
        with pytest.raises(ValueError):
            q_sample(z0, bad, eps, s)


def test_q_sample_monte_carlo():
    s = make_schedule()
    t, z0_val, n = 400, 0.7, 10_000
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(n, generator=gen, dtype=torch.float64)
    out = q_sample(torch.full((n,), z0_val, dtype=torch.float64), t, eps, s)
    ab = _abar_python(1000, t)
    mu, sd = math.sqrt(ab) * z0_val, math.sqrt(1 - ab)
    assert abs(float(out.mean()) - mu) <= 3 * sd / math.sqrt(n)
    assert abs(float(out.std()) - sd) <= 3 * sd / math.sqrt(2 * n)


def test_q_sample_per_item_t():
    s = make_schedule()
    z0 = torch.ones(3, 1, 2, 2, dtype=torch.float64)
    eps = torch.zeros_like(z0)
    out = q_sample(z0, torch.tensor([1, 500, 1000]), eps, s)
    for i, t in enumerate((1, 500, 1000)):
        assert torch.allclose(out[i], torch.full_like(out[i], math.sqrt(_abar_python(1000, t))), atol=1e-12)


def _batch(n, dtype=torch.float64):
    gen = torch.Generator().manual_seed(1)
    z0 = torch.randn(n, 4, 4, 4, generator=gen, dtype=dtype)
    return TrainBatch(z0, torch.randn(n, 4, 4, 4, generator=gen, dtype=dtype), ["a red circle"] * n)


def test_denoise_loss_exact_and_offset_mocks():
    s = make_schedule()
    b = _batch(8)
    loss0 = denoise_loss(b, OracleModel(b.z0, s), s, 0.05, torch.Generator().manual_seed(0))
    assert float(loss0) == pytest.approx(0.0, abs=1e-12)
    loss1 = denoise_loss(b, OracleModel(b.z0, s, offset=1.0), s, 0.05, torch.Generator().manual_seed(0))
    assert float(loss1) == pytest.approx(1.0, abs=1e-9)


def test_dropout_fraction_binomial():
    s = make_schedule()
    n = 10_000
    b = TrainBatch(torch.zeros(n, 1, 1, 1, dtype=torch.float64), torch.zeros(n, 1, 1, 1, dtype=torch.float64), [""] * n)
    m = OracleModel(b.z0, s)
    denoise_loss(b, m, s, 0.5, torch.Generator().manual_seed(5))
    frac = float(m.null_seen[0].double().mean())
    assert 0.47 <= frac <= 0.53
    drop_text, drop_zc = condition_dropout(n, 0.5, torch.Generator().manual_seed(6))
    assert 0.47 <= float(drop_zc.double().mean()) <= 0.53
    # independence: joint rate near 0.25
    assert abs(float((drop_text & drop_zc).double().mean()) - 0.25) <= 0.03


def test_condition_dropout_extremes_and_errors():
    gen = torch.Generator().manual_seed(0)
    a, b = condition_dropout(100, 0.0, gen)
    assert not a.any() and not b.any()
    a, b = condition_dropout(100, 1.0, gen)
    assert a.all() and b.all()
    with pytest.raises(ValueError):
        condition_dropout(4, 1.5, gen)


def test_zc_dropout_zeroes_latent():
    s = make_schedule()
    seen = []

    class Spy(OracleModel):
        def predict_noise(self, z_t, t, z_c, cond):
            seen.append(z_c.clone())
            return super().predict_noise(z_t, t, z_c, cond)

    b = _batch(4)
    denoise_loss(b, Spy(b.z0, s), s, 1.0, torch.Generator().manual_seed(0))
    assert torch.equal(seen[0], torch.zeros_like(b.zc))


def test_ddim_inversion_and_endpoint():
    s = make_schedule()
    gen = torch.Generator().manual_seed(2)
    z0 = torch.randn(2, 4, 8, 8, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 4, 8, 8, generator=gen, dtype=torch.float64)
    for t in (1, 20, 500, 999):
        z_t = q_sample(z0, t, eps, s)
        x0 = predict_x0(z_t, eps, t, s)
        assert torch.allclose(x0, z0, rtol=1e-5, atol=1e-8)
        assert torch.allclose(ddim_step(z_t, eps, t, 0, s), z0, rtol=1e-5, atol=1e-8)
    a = ddim_step(z_t, eps * 0.5, 999, 500, s)
    assert torch.equal(a, ddim_step(z_t, eps * 0.5, 999, 500, s))
    with pytest.raises(ValueError):
        ddim_step(z_t, eps, 10, 10, s)


def test_ddim_step_moves_along_forward_marginal():
    # with exact eps, stepping t -> t_prev lands on q_sample(z0, t_prev, eps)
    s = make_schedule()
    z0 = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    out = ddim_step(q_sample(z0, 800, eps, s), eps, 800, 300, s)
    assert torch.allclose(out, q_sample(z0, 300, eps, s), atol=1e-10)


def test_ddim_timesteps():
    assert ddim_timesteps(50, 1000) == list(range(1000, 0, -20))
    assert ddim_timesteps(1, 1000) == [1000]
    ts = ddim_timesteps(7, 1000)
    assert ts[0] == 1000 and all(a > b for a, b in zip(ts, ts[1:])) and ts[-1] >= 1
    with pytest.raises(ValueError):
        ddim_timesteps(0, 1000)


def test_ddim_sample_linear_model_closed_form():
    s = make_schedule()
    a = 0.3
    steps = 10
    zc = torch.zeros(2, 4, 4, 4, dtype=torch.float64)
    cfg = SamplerConfig(steps=steps, seed=11)
    out = ddim_sample(LinearModel(a), zc, TextEmbedding(torch.zeros(2, 1, 1)), cfg, GuidanceConfig(), None, s)

    # independent: each eta=0 step scales z by sqrt(ab_p)/sqrt(ab_t) * (1 - sqrt(1-ab_t) a) + sqrt(1-ab_p) a
    ts = [round(k * 1000 / steps) for k in range(steps, 0, -1)] + [0]
    factor = 1.0
    for t, tp in zip(ts, ts[1:]):
        ab_t, ab_p = _abar_python(1000, t), _abar_python(1000, tp)
        factor *= math.sqrt(ab_p) / math.sqrt(ab_t) * (1 - math.sqrt(1 - ab_t) * a) + math.sqrt(1 - ab_p) * a
    z_T = torch.randn(zc.shape, generator=torch.Generator().manual_seed(11), dtype=torch.float64)
    assert torch.allclose(out, z_T * factor, rtol=1e-4, atol=1e-6)


def test_ddim_sample_determinism_and_single_step():
    m = LinearModel(0.1)
    zc = torch.zeros(1, 4, 4, 4)
    cond = TextEmbedding(torch.zeros(1, 1, 1))
    a = ddim_sample(m, zc, cond, SamplerConfig(steps=5, seed=3), GuidanceConfig(), None)
    b = ddim_sample(m, zc, cond, SamplerConfig(steps=5, seed=3), GuidanceConfig(), None)
    assert torch.equal(a, b)
    c = ddim_sample(m, zc, cond, SamplerConfig(steps=5, seed=4), GuidanceConfig(), None)
    assert not torch.equal(a, c)
    one = ddim_sample(m, zc, cond, SamplerConfig(steps=1, seed=0), GuidanceConfig(), None)
    assert torch.isfinite(one).all()


def test_ddim_sample_eta_positive_is_seeded():
    m = LinearModel(0.1)
    zc = torch.zeros(1, 4, 4, 4)
    cond = TextEmbedding(torch.zeros(1, 1, 1))
    a = ddim_sample(m, zc, cond, SamplerConfig(steps=5, eta=1.0, seed=3), GuidanceConfig(), None)
    b = ddim_sample(m, zc, cond, SamplerConfig(steps=5, eta=1.0, seed=3), GuidanceConfig(), None)
    d = ddim_sample(m, zc, cond, SamplerConfig(steps=5, eta=0.0, seed=3), GuidanceConfig(), None)
    assert torch.equal(a, b) and not torch.equal(a, d)


class CondModel:
    """Returns +1 for conditioned rows and -1 for null rows."""

    def embed_text(self, texts):
        return TextEmbedding(torch.zeros(len(texts), 1, 1))

    def predict_noise(self, z_t, t, z_c, cond):
        sign = torch.where(cond.is_null, -1.0, 1.0).to(z_t.dtype)
        return sign.view(-1, 1, 1, 1).expand_as(z_t).clone()


def test_cfg_identities():
    m = CondModel()
    z = torch.zeros(2, 1, 2, 2)
    cond = TextEmbedding(torch.zeros(2, 1, 1))
    assert torch.equal(cfg_predict(m, z, 5, z, cond, 0.0), -torch.ones_like(z))
    assert torch.equal(cfg_predict(m, z, 5, z, cond, 1.0), torch.ones_like(z))
    # uncond + 3 (cond - uncond) = -1 + 6
    assert torch.allclose(cfg_predict(m, z, 5, z, cond, 3.0), torch.full_like(z, 5.0))
    with pytest.raises(ValueError):
        cfg_predict(m, z, 5, z, cond, -1.0)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(eta=-0.1)
    with pytest.raises(ValueError):
        TrainBatch(torch.zeros(2, 4, 2, 2), torch.zeros(2, 4, 4, 4), ["", ""])
