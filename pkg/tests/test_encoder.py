import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lmcrd.encoder import (
    EncoderConfig,
    EncoderOutput,
    backbone_forward,
    build_encoder,
    load_encoder,
    mask_augment,
    mask_batch,
    pool_representation,
    save_encoder,
    view_forward,
)


def _enc(**kw):
    base = dict(input_channels=3, backbone_channels=8, backbone_depth=3, n_views=2, view_dim=8, seed=0)
    base.update(kw)
    return build_encoder(EncoderConfig(**base)).double().eval()


def test_shapes():
    enc = _enc()
    out = enc(torch.randn(5, 64, 3, dtype=torch.float64))
    assert out.h.shape == (5, 64, 8)
    assert out.g.shape == (5, 64, 2, 8)
    assert torch.isfinite(out.h).all() and torch.isfinite(out.g).all()
    single = backbone_forward(enc, torch.randn(64, 3, dtype=torch.float64))
    assert single.shape == (1, 64, 8)


def test_channel_mismatch():
    enc = _enc()
    with pytest.raises(ValueError):
        enc(torch.randn(2, 16, 4, dtype=torch.float64))
    with pytest.raises(ValueError):
        backbone_forward(enc, np.zeros((16, 2)))


def test_receptive_field_perturbation():
    enc = _enc(backbone_depth=3, kernel_size=3)
    radius = enc.config.receptive_radius
    assert radius == 7
    T, t = 41, 20
    x = torch.randn(1, T, 3, dtype=torch.float64)
    y = x.clone()
    y[0, t] += 1.0
    diff = (enc.backbone(x) - enc.backbone(y)).abs().sum(dim=-1)[0]
    changed = torch.nonzero(diff > 1e-12).flatten().tolist()
    assert changed == list(range(t - radius, t + radius + 1))


@pytest.mark.parametrize("depth,kernel", [(1, 3), (2, 5), (4, 3)])
def test_receptive_radius_formula(depth, kernel):
    # independent: sum of per-layer reaches (k-1)/2 * 2^i
    expected = sum((kernel - 1) // 2 * 2**i for i in range(depth))
    assert EncoderConfig(backbone_depth=depth, kernel_size=kernel).receptive_radius == expected


def test_zero_output_stub():
    enc = _enc()
    with torch.no_grad():
        enc.backbone.output_proj.weight.zero_()
        enc.backbone.output_proj.bias.zero_()
    h = backbone_forward(enc, torch.zeros(2, 16, 3, dtype=torch.float64))
    assert torch.count_nonzero(h) == 0


def test_translation_consistency():
    enc = _enc(backbone_depth=2)
    radius = enc.config.receptive_radius
    t = np.arange(80)[:, None]
    base = np.sin(0.3 * t + np.array([0.0, 1.0, 2.0]))
    shift = 5
    x = torch.tensor(base[shift : shift + 60][None])
    y = torch.tensor(base[:60][None])
    hx, hy = enc.backbone(x)[0], enc.backbone(y)[0]
    interior = slice(radius + shift, 60 - radius)
    assert torch.allclose(hx[radius:60 - radius - shift], hy[interior], atol=1e-12)


def test_views_shape_and_attention_rows():
    enc = build_encoder(EncoderConfig(input_channels=2, backbone_channels=6, n_views=2, view_dim=8)).double()
    h = torch.randn(64, 6, dtype=torch.float64)
    g, attn = view_forward(enc, h, return_attention=True)
    assert g.shape == (1, 64, 2, 8)
    assert attn.shape == (1, 2, 64, 64)
    assert torch.allclose(attn.sum(dim=-1), torch.ones(1, 2, 64, dtype=torch.float64), atol=1e-12)


def test_head_permutation_permutes_views():
    enc = _enc(n_views=3, view_dim=4)
    h = torch.randn(2, 10, 8, dtype=torch.float64)
    g = view_forward(enc, h)
    perm = [2, 0, 1]
    rows = torch.cat([torch.arange(v * 4, (v + 1) * 4) for v in perm])
    with torch.no_grad():
        for lin in (enc.views.query, enc.views.key, enc.views.value):
            lin.weight.copy_(lin.weight[rows])
            lin.bias.copy_(lin.bias[rows])
    g_perm = view_forward(enc, h)
    assert torch.allclose(g_perm, g[:, :, perm], atol=1e-12)


def test_views_from_raw():
    enc = _enc(views_from_raw=True)
    x = torch.randn(2, 12, 3, dtype=torch.float64)
    out = enc(x)
    assert torch.allclose(out.g, enc.views(x), atol=0)


def test_no_view_network():
    enc = _enc(use_views=False)
    out = enc(torch.randn(2, 12, 3, dtype=torch.float64))
    assert out.g is None
    assert enc.pooled(torch.randn(2, 12, 3, dtype=torch.float64)).shape == (2, 8)
    with pytest.raises(ValueError):
        view_forward(enc, torch.randn(1, 4, 8))


def test_needs_two_views():
    with pytest.raises(ValueError):
        EncoderConfig(n_views=1).validate()


def test_deterministic_inference():
    enc = _enc()
    x = torch.randn(3, 16, 3, dtype=torch.float64)
    a, b = enc(x), enc(x)
    assert torch.equal(a.h, b.h) and torch.equal(a.g, b.g)
    assert torch.equal(_enc().backbone.input_proj.weight, enc.backbone.input_proj.weight)


# --- masking ---

def test_mask_zero_ratio_is_identity():
    x = np.random.default_rng(0).normal(size=(64, 5))
    assert np.array_equal(mask_augment(x, 0.0, np.random.default_rng(1)), x)


def test_mask_quarter_of_64():
    x = np.random.default_rng(0).normal(size=(64, 5)) + 10
    out = mask_augment(x, 0.25, np.random.default_rng(1))
    zero_rows = np.flatnonzero(np.all(out == 0, axis=1))
    assert len(zero_rows) == 16 and np.all(np.diff(zero_rows) == 1)
    keep = np.setdiff1d(np.arange(64), zero_rows)
    assert np.array_equal(out[keep], x[keep])


def test_mask_deterministic():
    x = np.ones((40, 2))
    a = mask_augment(x, 0.3, np.random.default_rng(7))
    b = mask_augment(x, 0.3, np.random.default_rng(7))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        mask_augment(x, 1.0, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 80), st.floats(0, 0.95), st.integers(0, 1000))
def test_mask_batch_property(T, ratio, seed):
    x = torch.ones(3, T, 2, dtype=torch.float64)
    out = mask_batch(x, ratio, np.random.default_rng(seed))
    n = int(np.floor(ratio * T))
    for b in range(3):
        zeros = torch.nonzero(out[b, :, 0] == 0).flatten().numpy()
        assert len(zeros) == n
        if n:
            assert np.all(np.diff(zeros) == 1)
        assert torch.equal(out[b, :, 0] == 0, out[b, :, 1] == 0)


def test_mask_start_uniform_range():
    rng = np.random.default_rng(0)
    starts = set()
    for _ in range(400):
        out = mask_augment(np.ones((10, 1)), 0.5, rng)
        starts.add(int(np.flatnonzero(out[:, 0] == 0)[0]))
    assert starts == set(range(6))


# --- pooling ---

def test_pool_constant_and_length():
    h = torch.full((1, 7, 4), 2.5, dtype=torch.float64)
    g = torch.randn(1, 7, 2, 8, dtype=torch.float64)
    z = pool_representation(EncoderOutput(h, g))
    assert z.shape == (1, 20)
    assert torch.all(z[0, :4] == 2.5)


def test_pool_matches_direct_mean():
    rng = np.random.default_rng(3)
    h, g = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 2, 3))
    z = pool_representation(EncoderOutput(torch.tensor(h), torch.tensor(g))).numpy()
    for i in range(3):
        expect_h = [sum(h[i, t, c] for t in range(5)) / 5 for c in range(4)]
        expect_g = [sum(g[i, t, v, k] for t in range(5)) / 5 for v in range(2) for k in range(3)]
        assert np.allclose(z[i], expect_h + expect_g, atol=1e-12)


# --- checkpoint ---

def test_checkpoint_roundtrip(tmp_path):
    enc = build_encoder(EncoderConfig(input_channels=3, backbone_channels=8, backbone_depth=2, n_views=2, view_dim=4))
    save_encoder(enc, tmp_path / "e.bin", {"variant": "LMCRD"})
    back, header = load_encoder(tmp_path / "e.bin")
    assert header["variant"] == "LMCRD" and back.config == enc.config
    for (na, a), (nb, b) in zip(enc.state_dict().items(), back.state_dict().items()):
        assert na == nb and torch.equal(a, b)
    save_encoder(back, tmp_path / "e2.bin", {"variant": "LMCRD"})
    assert (tmp_path / "e.bin").read_bytes() == (tmp_path / "e2.bin").read_bytes()
