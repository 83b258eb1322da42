import numpy as np
import pytest

from gradcheck import max_rel_err, numeric_grad
from gridcast import tensor_nn as tn


# ---------------------------------------------------------------------------
# conv2d

def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 5))
    k = np.zeros((3, 3, 1, 1))
    for i in range(3):
        k[i, i, 0, 0] = 1.0
    out = tn.conv2d_forward(x, k, np.zeros(3))
    assert np.allclose(out, x)


def test_conv_ones_kernel_edge_effects():
    x = np.ones((1, 1, 4, 4))
    out = tn.conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))[0, 0]
    assert out[1, 1] == out[1, 2] == 9  # interior
    assert out[0, 0] == out[0, 3] == out[3, 0] == out[3, 3] == 4  # corners
    assert out[0, 1] == out[1, 0] == out[2, 3] == 6  # edges


def test_conv_zero_kernel_gives_bias():
    x = np.random.default_rng(1).normal(size=(1, 2, 3, 3))
    out = tn.conv2d_forward(x, np.zeros((4, 2, 3, 3)), np.array([1.0, -2.0, 0.5, 0.0]))
    for co, b in enumerate([1.0, -2.0, 0.5, 0.0]):
        assert np.all(out[0, co] == b)


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    gx, gk, gb = tn.conv2d_backward(x, k, np.zeros((1, 3, 4, 4)))
    assert not gx.any() and not gk.any() and not gb.any()


def test_conv_backward_bias_is_channel_sum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    go = rng.normal(size=(2, 3, 4, 4))
    _, _, gb = tn.conv2d_backward(x, k, go)
    assert np.allclose(gb, go.sum(axis=(0, 2, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_conv_backward_finite_difference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 5, 5))
    k = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    go = rng.normal(size=(2, 2, 5, 5))
    loss = lambda: float(np.sum(go * tn.conv2d_forward(x, k, b)))
    gx, gk, gb = tn.conv2d_backward(x, k, go)
    assert max_rel_err(gx, numeric_grad(loss, x)) < 1e-5
    assert max_rel_err(gk, numeric_grad(loss, k)) < 1e-5
    assert max_rel_err(gb, numeric_grad(loss, b)) < 1e-5


# ---------------------------------------------------------------------------
# relu

def test_relu_values_and_gradient():
    x = np.array([-1.0, 0.0, 2.0])
    assert tn.relu_forward(x).tolist() == [0.0, 0.0, 2.0]
    assert tn.relu_backward(x, np.ones(3)).tolist() == [0.0, 0.0, 1.0]


def test_relu_finite_difference_away_from_zero():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(40,))
    x[np.abs(x) < 0.05] = 0.5  # keep clear of the kink
    go = rng.normal(size=40)
    loss = lambda: float(np.sum(go * tn.relu_forward(x)))
    assert max_rel_err(tn.relu_backward(x, go), numeric_grad(loss, x)) < 1e-5


# ---------------------------------------------------------------------------
# maxpool

def test_maxpool_window_and_gradient_routing():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    pooled, argmax = tn.maxpool2d_forward(x)
    assert pooled[0, 0, 0, 0] == 4.0
    grad = tn.maxpool2d_backward(argmax, np.ones((1, 1, 1, 1)))
    assert grad[0, 0].tolist() == [[0.0, 0.0], [0.0, 1.0]]


def test_maxpool_tie_break_first_row_major():
    x = np.full((1, 1, 2, 2), 5.0)
    pooled, argmax = tn.maxpool2d_forward(x)
    assert pooled[0, 0, 0, 0] == 5.0
    assert argmax[0, 0, 0, 0] == 0
    grad = tn.maxpool2d_backward(argmax, np.ones((1, 1, 1, 1)))
    assert grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ValueError):
        tn.maxpool2d_forward(np.zeros((1, 1, 3, 4)))


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_finite_difference_untied(seed):
    rng = np.random.default_rng(seed)
    x = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)  # all distinct
    go = rng.normal(size=(1, 1, 4, 4))

    def loss():
        pooled, _ = tn.maxpool2d_forward(x)
        return float(np.sum(go * pooled))

    _, argmax = tn.maxpool2d_forward(x)
    analytic = tn.maxpool2d_backward(argmax, go)
    assert max_rel_err(analytic, numeric_grad(loss, x)) < 1e-5


# ---------------------------------------------------------------------------
# upconv

def test_upconv_broadcasts_single_value():
    x = np.full((1, 1, 1, 1), 3.5)
    out = tn.upconv2d_forward(x, np.ones((1, 1, 2, 2)), np.zeros(1))
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out == 3.5)


def test_upconv_zero_input_gives_bias():
    out = tn.upconv2d_forward(
        np.zeros((1, 2, 3, 3)), np.zeros((2, 3, 2, 2)), np.array([1.0, 2.0, -1.0])
    )
    assert out.shape == (1, 3, 6, 6)
    for co, b in enumerate([1.0, 2.0, -1.0]):
        assert np.all(out[0, co] == b)


@pytest.mark.parametrize("seed", range(5))
def test_upconv_backward_finite_difference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    k = rng.normal(size=(3, 2, 2, 2))
    b = rng.normal(size=2)
    go = rng.normal(size=(2, 2, 8, 8))
    loss = lambda: float(np.sum(go * tn.upconv2d_forward(x, k, b)))
    gx, gk, gb = tn.upconv2d_backward(x, k, go)
    assert max_rel_err(gx, numeric_grad(loss, x)) < 1e-5
    assert max_rel_err(gk, numeric_grad(loss, k)) < 1e-5
    assert max_rel_err(gb, numeric_grad(loss, b)) < 1e-5


# ---------------------------------------------------------------------------
# concat / pad / mse / clamp

def test_concat_and_split_shapes():
    a = np.zeros((2, 4, 3, 3))
    b = np.ones((2, 6, 3, 3))
    cat = tn.concat_channels(a, b)
    assert cat.shape == (2, 10, 3, 3)
    ga, gb = tn.split_channels(cat, 4)
    assert ga.shape == a.shape and gb.shape == b.shape
    assert np.array_equal(ga, a) and np.array_equal(gb, b)


def test_concat_rejects_mismatch():
    with pytest.raises(ValueError):
        tn.concat_channels(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 4, 4)))


def test_pad_spatial_to_multiple_16():
    x = np.zeros((1, 3, 495, 436))
    padded, hw = tn.pad_spatial(x, 16)
    assert padded.shape == (1, 3, 496, 448)
    assert hw == (495, 436)
    aligned, hw2 = tn.pad_spatial(np.zeros((1, 3, 32, 48)), 16)
    assert aligned.shape == (1, 3, 32, 48) and hw2 == (32, 48)


def test_crop_inverts_pad():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 13, 22))
    padded, hw = tn.pad_spatial(x, 8)
    assert np.array_equal(tn.crop_spatial(padded, hw), x)
    assert np.all(padded[..., 13:, :] == 0) and np.all(padded[..., :, 22:] == 0)


def test_mse_loss_values():
    assert tn.mse_loss(np.ones(4), np.ones(4))[0] == 0.0
    assert tn.mse_loss(np.zeros(1), np.array([255.0]))[0] == 65025.0
    rng = np.random.default_rng(6)
    p, t = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    loss, grad = tn.mse_loss(p, t)
    assert loss == pytest.approx(((p - t) ** 2).mean())
    assert np.allclose(grad, 2 * (p - t) / 4)
    assert max_rel_err(grad, numeric_grad(lambda: tn.mse_loss(p, t)[0], p)) < 1e-5


def test_clamp_255():
    assert tn.clamp_255(np.array([-3.0, 300.0, 128.0])).tolist() == [0.0, 255.0, 128.0]
    assert tn.round_half_up_uint8(np.array([19.5, -3.0, 300.0])).tolist() == [20, 0, 255]


# ---------------------------------------------------------------------------
# U-Net

def toy_config(**kw):
    defaults = dict(depth=2, in_channels=4, out_channels=2, base_channels=3)
    defaults.update(kw)
    return tn.UNetConfig(**defaults)


def test_unet_shapes_toy():
    params = tn.init_params(toy_config(), seed=0, dtype=np.float64)
    out = tn.unet_forward(params, np.random.default_rng(0).normal(size=(1, 4, 16, 16)))
    assert out.shape == (1, 2, 16, 16)


def test_unet_full_scale_shape():
    cfg = tn.UNetConfig(depth=5, in_channels=36, out_channels=9, base_channels=4)
    params = tn.init_params(cfg, seed=0)
    x = np.zeros((1, 36, 496, 448), dtype=np.float32)
    assert tn.unet_forward(params, x).shape == (1, 9, 496, 448)


def test_unet_rejects_misaligned_input():
    params = tn.init_params(toy_config(), seed=0)
    with pytest.raises(ValueError):
        tn.unet_forward(params, np.zeros((1, 4, 15, 16), dtype=np.float32))


def test_unet_zero_params_output_is_head_bias():
    params = tn.init_params(toy_config(), seed=0, dtype=np.float64)
    for name, arr in params.tensors.items():
        arr[:] = 0.0
    params.tensors["head.b"][:] = [2.5, -1.0]
    out = tn.unet_forward(params, np.random.default_rng(1).normal(size=(1, 4, 8, 8)))
    assert np.all(out[0, 0] == 2.5) and np.all(out[0, 1] == -1.0)


def test_unet_channel_bookkeeping():
    cfg = tn.UNetConfig(depth=3, in_channels=5, out_channels=2, base_channels=6)
    params = tn.init_params(cfg, seed=0)
    for i in range(3):
        assert params.tensors[f"enc{i}.conv2.w"].shape[0] == 6 * 2**i
    assert params.tensors["dec1.conv1.w"].shape[1] == 2 * 12  # skip + upconv


def test_unet_backward_zero_grad_out():
    params = tn.init_params(toy_config(), seed=0, dtype=np.float64)
    x = np.random.default_rng(2).normal(size=(1, 4, 8, 8))
    grads, gx = tn.unet_backward(params, x, np.zeros((1, 2, 8, 8)))
    assert not gx.any()
    assert all(not g.any() for g in grads.values())


def test_unet_grad_shapes_mirror_params():
    params = tn.init_params(toy_config(), seed=0, dtype=np.float64)
    x = np.random.default_rng(3).normal(size=(2, 4, 8, 8))
    go = np.random.default_rng(4).normal(size=(2, 2, 8, 8))
    grads, gx = tn.unet_backward(params, x, go)
    assert list(grads) == list(params.tensors)
    for name in grads:
        assert grads[name].shape == params.tensors[name].shape
    assert gx.shape == x.shape


def test_unet_backward_finite_difference():
    cfg = tn.UNetConfig(depth=2, in_channels=2, out_channels=1, base_channels=3)
    params = tn.init_params(cfg, seed=7, dtype=np.float64)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 8, 8))
    go = rng.normal(size=(1, 1, 8, 8))
    grads, gx = tn.unet_backward(params, x, go)
    loss = lambda: float(np.sum(go * tn.unet_forward(params, x)))
    for name in ("enc0.conv1.w", "enc1.conv2.b", "up0.w", "dec0.conv1.w", "head.w"):
        numeric = numeric_grad(loss, params.tensors[name], eps=1e-5)
        assert max_rel_err(grads[name], numeric) < 1e-4, name
    assert max_rel_err(gx, numeric_grad(loss, x, eps=1e-5)) < 1e-4


def test_unet_forward_deterministic():
    params = tn.init_params(toy_config(), seed=3)
    x = np.random.default_rng(5).normal(size=(2, 4, 16, 16)).astype(np.float32)
    a = tn.unet_forward(params, x)
    b = tn.unet_forward(params, x)
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip(tmp_path):
    cfg = tn.UNetConfig(depth=3, in_channels=6, out_channels=9, base_channels=4, normalize=True)
    params = tn.init_params(cfg, seed=11)
    path = tmp_path / "net.unp"
    tn.save_params(params, path)
    assert path.read_bytes()[:4] == b"UNP1"
    loaded = tn.load_params(path)
    assert loaded.config == cfg
    assert list(loaded.tensors) == list(params.tensors)
    for name in params.tensors:
        assert np.array_equal(loaded.tensors[name], params.tensors[name])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.unp"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(ValueError):
        tn.load_params(path)


def test_config_validation():
    with pytest.raises(ValueError):
        tn.UNetConfig(depth=0)
    with pytest.raises(ValueError):
        tn.UNetConfig(in_channels=0)
