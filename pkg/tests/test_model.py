import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from motionprim.errors import SchemaVersionMismatch, UnnormalizedInput
from motionprim.model import (
    FrameEmbedding, LatentDistribution, ModelConfig, MotionPriorModel, combine, gaussian_mask,
    layout, load_checkpoint, sample, save_checkpoint, sidecar_path, tiny_config, transform_segments,
)
from motionprim.rotation import RigidTransform, identity_6d, rot6d_to_matrix


def small_model(seed=0, **kw):
    torch.manual_seed(seed)
    return MotionPriorModel(tiny_config(n_joints=3, latent_dim=8, **kw)).double().eval()


def inputs(n=10, B=1, J=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    theta = identity_6d(B, n, J) + 0.1 * torch.randn(B, n, J, 6, generator=g, dtype=torch.float64)
    gamma = torch.rand(B, n, 3, generator=g, dtype=torch.float64) * 2 - 1
    tau = torch.linspace(0, 1, n, dtype=torch.float64).expand(B, n)
    beta = torch.randn(B, 8, generator=g, dtype=torch.float64)
    return theta, gamma, tau, beta


def test_default_config():
    cfg = ModelConfig()
    assert (cfg.n_primitives, cfg.latent_dim, cfg.n_joints, cfg.n_shape) == (8, 256, 20, 8)
    assert cfg.hash() == ModelConfig().hash() != tiny_config().hash()
    with pytest.raises(ValueError):
        ModelConfig(n_primitives=0)


def test_full_scale_encoder_shapes():
    torch.manual_seed(0)
    model = MotionPriorModel().eval()
    for n in (100, 37):
        theta = identity_6d(1, n, 20).float()
        dist = model.encode(theta, torch.zeros(1, n, 3), torch.linspace(0, 1, n)[None])
        assert dist.mu.shape == dist.log_sigma.shape == (1, 8, 256)


def test_encode_rejects_unnormalized_time():
    model = small_model()
    theta, gamma, tau, _ = inputs()
    with pytest.raises(UnnormalizedInput):
        model.encode(theta, gamma, tau * 2)


def test_encode_deterministic_and_length_flexible():
    model = small_model()
    for n in (2, 7, 50):
        theta, gamma, tau, _ = inputs(n)
        a = model.encode(theta, gamma, tau)
        b = model.encode(theta, gamma, tau)
        assert torch.equal(a.mu, b.mu)
        assert a.mu.shape == (1, 2, 8)


def test_frame_embedding_contract():
    emb = FrameEmbedding(9, 15).double()
    x = torch.randn(2, 9, dtype=torch.float64)
    a = emb(x, torch.tensor([0.2, 0.2], dtype=torch.float64))
    b = emb(x, torch.tensor([0.8, 0.8], dtype=torch.float64))
    assert a.shape == (2, 16)
    assert torch.equal(a[:, :-1], b[:, :-1])
    assert not torch.equal(a[:, -1], b[:, -1])
    same = emb(torch.stack([x[0], x[0]]), torch.tensor([0.3, 0.3], dtype=torch.float64))
    assert torch.equal(same[0], same[1])


def test_sample_cases():
    mu = torch.tensor([1.0], dtype=torch.float64)
    dist = LatentDistribution(mu, torch.log(torch.tensor([2.0], dtype=torch.float64)))
    assert float(sample(dist, torch.tensor([0.5], dtype=torch.float64))) == pytest.approx(2.0)
    assert torch.equal(sample(dist, torch.zeros(1, dtype=torch.float64)), mu)
    e = torch.tensor([0.3], dtype=torch.float64)
    assert torch.equal(sample(LatentDistribution(mu, torch.zeros(1, dtype=torch.float64)), e), mu + e)


def test_sample_statistics():
    g = torch.Generator().manual_seed(0)
    mu = torch.tensor([0.5, -1.0], dtype=torch.float64)
    sigma = torch.tensor([2.0, 0.3], dtype=torch.float64)
    z = sample(LatentDistribution(mu, sigma.log()), torch.randn(100000, 2, generator=g, dtype=torch.float64))
    assert torch.allclose(z.std(0), sigma, rtol=0.02)
    assert torch.all((z.mean(0) - mu).abs() < 0.02 * sigma.clamp(min=1))


@pytest.mark.parametrize("raw,delta,Delta", [
    ([0.0] * 4, [0.25] * 4, [0, 0.25, 0.5, 0.75]),
    ([math.log(3.0), 0.0], [0.75, 0.25], [0, 0.75]),
    ([1.7], [1.0], [0.0]),
])
def test_layout_cases(raw, delta, Delta):
    out = layout(torch.tensor(raw, dtype=torch.float64), None)
    np.testing.assert_allclose(out.delta, delta, atol=1e-15)
    np.testing.assert_allclose(out.Delta, Delta, atol=1e-15)


def test_fixed_layout_is_uniform():
    out = layout(torch.tensor([3.0, -1.0, 0.2], dtype=torch.float64), None, fixed=True)
    np.testing.assert_allclose(out.delta, [1 / 3] * 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=12))
def test_layout_invariants(raw):
    out = layout(torch.tensor(raw, dtype=torch.float64), None)
    assert abs(float(out.delta.sum()) - 1) < 1e-12
    assert torch.all(out.delta >= 0)
    assert float(out.Delta[0]) == 0.0
    np.testing.assert_allclose(out.Delta[1:], torch.cumsum(out.delta, 0)[:-1], atol=1e-15)


def test_gaussian_mask_cases():
    D, d = torch.tensor(0.3, dtype=torch.float64), torch.tensor(0.4, dtype=torch.float64)
    assert float(gaussian_mask(D + d / 2, D, d)) == 1.0
    assert float(gaussian_mask(D, D, d)) == pytest.approx(math.exp(-1), abs=1e-12)
    assert float(gaussian_mask(D + d, D, d)) == pytest.approx(math.exp(-1), abs=1e-12)


def _segments(values_gamma, J=1):
    m = len(values_gamma)
    seg_gamma = torch.tensor(values_gamma, dtype=torch.float64).reshape(m, 1, 1).expand(m, 1, 3).clone()
    seg_theta = identity_6d(m, 1, J)
    return seg_theta, seg_gamma


def test_combine_hand_weighted_mean():
    # unit-width segments: the first centred sqrt(ln 2)/2 away from tau=0
    # gives mask 0.5, the second starts at tau=0 so its edge gives e^-1
    tau = torch.tensor([0.0], dtype=torch.float64)
    delta = torch.tensor([1.0, 1.0], dtype=torch.float64)
    Delta = torch.tensor([0.5 * math.sqrt(math.log(2)) - 0.5, 0.0], dtype=torch.float64)
    seg_layout = layout(torch.zeros(2, dtype=torch.float64), None)._replace(delta=delta, Delta=Delta)
    masks = gaussian_mask(tau, Delta, delta)
    np.testing.assert_allclose(masks, [0.5, math.exp(-1)], atol=1e-12)
    seg_theta, seg_gamma = _segments([0.0, 1.0])
    _, gamma, _ = combine(seg_theta, seg_gamma, seg_layout, tau)
    expected = math.exp(-1) / (0.5 + math.exp(-1))
    assert float(gamma[0, 0]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.423883, abs=1e-6)


def test_combine_identical_segments_and_single_segment():
    tau = torch.linspace(0, 1, 7, dtype=torch.float64)
    seg = layout(torch.tensor([0.3, -0.2, 1.0], dtype=torch.float64), None)
    seg_theta = identity_6d(3, 7, 2) * 1.5
    seg_gamma = torch.full((3, 7, 3), 0.25, dtype=torch.float64)
    theta, gamma, _ = combine(seg_theta, seg_gamma, seg, tau)
    torch.testing.assert_close(gamma, seg_gamma[0])
    torch.testing.assert_close(theta, seg_theta[0])
    single = layout(torch.zeros(1, dtype=torch.float64), None)
    g = torch.rand(1, 7, 3, dtype=torch.float64)
    _, gamma, _ = combine(identity_6d(1, 7, 2), g, single, tau)
    torch.testing.assert_close(gamma, g[0])


def test_combine_convexity():
    torch.manual_seed(0)
    tau = torch.rand(50, dtype=torch.float64)
    seg = layout(torch.randn(4, dtype=torch.float64), None)
    seg_gamma = torch.randn(4, 50, 3, dtype=torch.float64)
    _, gamma, _ = combine(identity_6d(4, 50, 1), seg_gamma, seg, tau)
    assert torch.all(gamma >= seg_gamma.min(0).values - 1e-12)
    assert torch.all(gamma <= seg_gamma.max(0).values + 1e-12)


def test_transform_segments_applies_rho_to_root_only():
    rot = torch.tensor([0.0, 1, 0, -1, 0, 0], dtype=torch.float64)  # 90 degrees about z
    rho = RigidTransform(rot[None], torch.tensor([[1.0, 0, 0]], dtype=torch.float64))
    theta = identity_6d(1, 2, 3)
    gamma = torch.tensor([[[1.0, 0, 0], [0, 0, 0]]], dtype=torch.float64)
    th, g = transform_segments(theta, gamma, rho)
    np.testing.assert_allclose(g[0, 0], [1, 1, 0], atol=1e-15)
    np.testing.assert_allclose(g[0, 1], [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(rot6d_to_matrix(th[0, 0, 0]), rot6d_to_matrix(rot), atol=1e-15)
    torch.testing.assert_close(th[..., 1:, :], theta[..., 1:, :])


def test_decode_shapes_and_per_timestamp_independence():
    model = small_model()
    g = torch.Generator().manual_seed(1)
    z = torch.randn(1, 2, 8, generator=g, dtype=torch.float64)
    beta = torch.randn(1, 8, generator=g, dtype=torch.float64)
    for n in (100, 240):
        out = model.decode(z, beta, torch.linspace(0, 1, n, dtype=torch.float64)[None])
        assert out.theta.shape == (1, n, 3, 6) and out.gamma.shape == (1, n, 3)
    a = model.decode(z, beta, torch.tensor([[0.5]], dtype=torch.float64))
    b = model.decode(z, beta, torch.tensor([[0.25, 0.5, 0.75]], dtype=torch.float64))
    torch.testing.assert_close(a.theta[0, 0], b.theta[0, 1], rtol=0, atol=1e-14)
    torch.testing.assert_close(a.gamma[0, 0], b.gamma[0, 1], rtol=0, atol=1e-14)


def test_segment_params_time_free_and_deterministic():
    model = small_model()
    z = torch.randn(1, 2, 8, dtype=torch.float64)
    beta = torch.randn(1, 8, dtype=torch.float64)
    r1, rho1 = model.decoder.segment_params(z, beta)
    r2, rho2 = model.decoder.segment_params(z, beta)
    assert torch.equal(r1, r2) and torch.equal(rho1.rotation, rho2.rotation)
    assert r1.shape == (1, 2) and rho1.translation.shape == (1, 2, 3)


def test_decode_continuity():
    model = small_model()
    g = torch.Generator().manual_seed(2)
    z = torch.randn(1, 2, 8, generator=g, dtype=torch.float64)
    beta = torch.randn(1, 8, generator=g, dtype=torch.float64)
    tau = torch.rand(1, 200, generator=g, dtype=torch.float64) * 0.999
    a = model.decode(z, beta, tau)
    b = model.decode(z, beta, tau + 1e-5)
    assert (a.theta - b.theta).abs().max() < 1e-3
    assert (a.gamma - b.gamma).abs().max() < 1e-3
    # also across the segment boundary
    edge = a.layout.Delta[0, 1]
    t = torch.stack([edge - 5e-5, edge + 5e-5])[None]
    out = model.decode(z, beta, t)
    assert (out.gamma[0, 0] - out.gamma[0, 1]).abs().max() < 1e-2


def test_decode_gradients_match_finite_differences():
    model = small_model()
    _, _, tau, beta = inputs(6)
    z = torch.randn(1, 2, 8, dtype=torch.float64, requires_grad=True)
    beta = beta.clone().requires_grad_(True)
    proj = torch.randn(1, 6, 3, 6, dtype=torch.float64)

    def f():
        out = model.decode(z, beta, tau)
        return (out.theta * proj).sum() + out.gamma.pow(2).sum()

    f().backward()
    for x in (z, beta):
        fd = torch.zeros_like(x)
        with torch.no_grad():
            for i in range(x.numel()):
                x.view(-1)[i] += 1e-4
                up = f()
                x.view(-1)[i] -= 2e-4
                down = f()
                x.view(-1)[i] += 1e-4
                fd.view(-1)[i] = (up - down) / 2e-4
        assert (x.grad - fd).norm() / fd.norm() < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    model = small_model().float()
    path = save_checkpoint(tmp_path / "m.pt", model, metadata={"note": "x"})
    prior, sidecar, _ = load_checkpoint(path)
    assert sidecar["config_hash"] == model.cfg.hash()
    assert "normalization" in sidecar
    for a, b in zip(model.state_dict().values(), prior.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_version_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "m.pt", small_model())
    side = sidecar_path(path)
    side.write_text(side.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(SchemaVersionMismatch):
        load_checkpoint(path)
