import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualprompt.backbone import BackboneConfig, film
from dualprompt.head import head_forward, head_param_count, unflatten_head_params
from dualprompt.inference import segment, sliding_window_probs, window_starts
from dualprompt.model import DualPromptModel, ModelConfig, load_checkpoint, parameter_checksum, save_checkpoint
from dualprompt.volume_io import FormatError, Volume

T1 = "a computed tomography of abdomen"
T2 = "a computed tomography of liver"


def small_model(seed=0, dtype=torch.float32, **kw):
    torch.manual_seed(seed)
    cfg = ModelConfig(backbone=BackboneConfig(patch_size=(8, 8, 8), **kw))
    return DualPromptModel(cfg).to(dtype)


@pytest.fixture(scope="module")
def model():
    return small_model()


def test_head_param_count_default():
    assert head_param_count(8, 8) == 153


def test_block_widths_default():
    cfg = BackboneConfig()
    assert cfg.block_widths == {"down0": 8, "down1": 16, "down2": 32, "up0": 16, "up1": 8}
    assert cfg.decoder_channels == 8 and cfg.bottleneck_channels == 32


def test_head_flatten_round_trip():
    flat = torch.randn(3, 153, dtype=torch.float64)
    assert torch.equal(unflatten_head_params(flat, 8, 8).flatten(), flat)
    with pytest.raises(ValueError):
        unflatten_head_params(torch.randn(152), 8, 8)


def test_head_forward_matches_explicit_loop():
    g = torch.Generator().manual_seed(1)
    theta = unflatten_head_params(torch.randn(2, 153, generator=g, dtype=torch.float64), 8, 8)
    f = torch.randn(2, 8, 3, 2, 2, generator=g, dtype=torch.float64)
    out = head_forward(f, theta)
    expected = np.zeros((2, 3, 2, 2))
    fn = f.numpy()
    for b in range(2):
        w1, b1, w2, b2, w3, b3 = (t[b].numpy() for t in (theta.w1, theta.b1, theta.w2, theta.b2, theta.w3, theta.b3))
        for idx in np.ndindex(3, 2, 2):
            v = fn[(b, slice(None)) + idx]
            h = np.maximum(v @ w1 + b1, 0)
            h = np.maximum(h @ w2 + b2, 0)
            expected[(b,) + idx] = 1 / (1 + np.exp(-(h @ w3 + b3)[0]))
    np.testing.assert_allclose(out.numpy(), expected, rtol=1e-12)


def test_head_rejects_channel_mismatch():
    theta = unflatten_head_params(torch.randn(1, 153), 8, 8)
    with pytest.raises(ValueError, match="channels"):
        head_forward(torch.randn(1, 4, 2, 2, 2), theta)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.floats(-3, 3), st.floats(-3, 3))
def test_film_is_per_channel_affine(c, n, g, b):
    f = torch.randn(c, n, n, dtype=torch.float64)
    gamma = torch.full((c,), g, dtype=torch.float64)
    beta = torch.full((c,), b, dtype=torch.float64)
    torch.testing.assert_close(film(f, gamma, beta), g * f + b)
    torch.testing.assert_close(film(f, torch.ones(c), torch.zeros(c)), f)


def test_film_batched_and_mismatch():
    f = torch.randn(2, 3, 4, 4, 4)
    gamma = torch.randn(2, 3)
    beta = torch.randn(2, 3)
    out = film(f, gamma, beta)
    torch.testing.assert_close(out[1, 2], gamma[1, 2] * f[1, 2] + beta[1, 2])
    with pytest.raises(ValueError):
        film(f, torch.randn(2, 4), torch.randn(2, 4))


def test_zero_projections_make_film_identity(model):
    m = small_model(seed=2)
    m.film_gen.zero_projections()
    x = torch.randn(1, 1, 8, 8, 8)
    with torch.no_grad():
        dec_a, fd_a = m.features(x, "ct", T1)
        dec_b, fd_b = m.features(x, "ct", "a magnetic resonance of thorax")
        dec_c, _ = m.features(x, "ct", T1, use_film=False)
    torch.testing.assert_close(dec_a, dec_b)
    torch.testing.assert_close(dec_a, dec_c)


def test_forward_shapes_and_range(model):
    x = torch.randn(2, 1, 8, 8, 8)
    with torch.no_grad():
        p = model(x, ["ct", "pet"], T1, [T2, "a computed tomography of spleen"])
    assert p.shape == (2, 8, 8, 8)
    assert torch.all((p >= 0) & (p <= 1))


def test_mixed_modality_batch_matches_separate_passes(model):
    x = torch.randn(2, 1, 8, 8, 8)
    with torch.no_grad():
        mixed = model(x, ["ct", "mr"], T1, T2)
        a = model(x[:1], "ct", T1, T2)
        b = model(x[1:], "mr", T1, T2)
    torch.testing.assert_close(mixed, torch.cat([a, b]), rtol=1e-5, atol=1e-6)


def test_prompts_change_output(model):
    x = torch.randn(1, 1, 8, 8, 8)
    with torch.no_grad():
        base = model(x, "ct", T1, T2)
        other_t2 = model(x, "ct", T1, "a computed tomography of spleen")
        other_t1 = model(x, "ct", "a computed tomography of thorax", T2)
    assert not torch.allclose(base, other_t2)
    assert not torch.allclose(base, other_t1)


def test_rejects_bad_inputs(model):
    with pytest.raises(ValueError):
        model(torch.randn(1, 2, 8, 8, 8), "ct", T1, T2)
    with pytest.raises(ValueError):
        model(torch.randn(1, 1, 7, 8, 8), "ct", T1, T2)


def test_encoder_not_trainable(model):
    names = [n for n, _ in model.named_parameters()]
    assert not any("encoder" in n for n in names)
    assert model.encoder.frozen


def test_end_to_end_gradient_matches_finite_differences():
    m = small_model(seed=4, dtype=torch.float64)
    x = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
    gt = (torch.rand(1, 8, 8, 8) > 0.7).double()
    from dualprompt.metrics import seg_loss

    def loss():
        return seg_loss(m(x, "ct", T1, T2), gt)

    m.zero_grad()
    loss().backward()
    checks = [
        ("film_gen.heads.down1.weight", (3, 5)),
        ("pred_mlp.proj.bias", (7,)),
        ("backbone.up.1.conv2.weight", (2, 1, 0, 1, 2)),
        ("backbone.stems.ct.0.bias", (3,)),
    ]
    params = dict(m.named_parameters())
    eps = 1e-6
    for name, idx in checks:
        p = params[name]
        analytic = p.grad[idx].item()
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + eps
            up = loss().item()
            p[idx] = old - eps
            down = loss().item()
            p[idx] = old
        numeric = (up - down) / (2 * eps)
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-9), name


def test_checkpoint_round_trip(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "m.ckpt", {"epoch": 3})
    back, extra = load_checkpoint(path)
    assert extra == {"epoch": 3}
    assert parameter_checksum(back) == parameter_checksum(model)
    x = torch.randn(1, 1, 8, 8, 8)
    with torch.no_grad():
        torch.testing.assert_close(back(x, "mr", T1, T2), model(x, "mr", T1, T2), rtol=0, atol=0)


def test_checkpoint_corruption_detected(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(1, 16))
def test_window_starts_cover_axis(size, patch):
    stride = max(1, patch // 2)
    starts = window_starts(size, patch, stride)
    covered = np.zeros(max(size, patch), bool)
    for s in starts:
        covered[s : s + patch] = True
        assert s + patch <= max(size, patch)
    assert covered[:size].all()
    assert starts == sorted(set(starts))


def test_sliding_window_single_patch_equals_forward(model):
    data = np.random.default_rng(0).normal(size=(8, 8, 8)).astype(np.float32)
    (probs,) = sliding_window_probs(model, data, "ct", T1, [T2])
    with torch.no_grad():
        direct = model(torch.from_numpy(data)[None, None], "ct", T1, T2)[0].double().numpy()
    np.testing.assert_allclose(probs, direct, rtol=1e-6)


def test_segment_pads_small_and_tiles_large_volumes(model):
    rng = np.random.default_rng(1)
    for shape in [(5, 7, 3), (13, 8, 20)]:
        v = Volume(rng.normal(size=shape).astype(np.float32), (1.5,) * 3, "pet", "abdomen", "v")
        mask, prob = segment(v, T1, T2, model)
        assert mask.data.shape == shape and prob.shape == shape
        assert set(np.unique(mask.data)) <= {0, 1}
        np.testing.assert_array_equal(mask.data, (prob >= 0.5).astype(np.uint8))
