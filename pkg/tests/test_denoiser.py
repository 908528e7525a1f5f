import numpy as np
import pytest

from wdm_inpaint.denoiser import (
    DenoiserNet,
    NetConfig,
    TrainConfig,
    TrainingSample,
    backward,
    loss,
    loss_and_grad,
    smooth,
    timestep_embedding,
    train,
)
from wdm_inpaint.diffusion import make_linear_schedule
from wdm_inpaint.volume import BinaryMask, Volume

TINY = NetConfig(base_channels=2, channel_mult=(1, 2), temb_dim=8)


def _batch(seed, n=2, shape=(2, 4, 4)):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 24) + shape)
    x0 = rng.normal(size=(n, 8) + shape)
    t = rng.integers(1, 1001, size=n)
    return X, t, x0


def _tiny_net(seed=0, activation="silu"):
    net = DenoiserNet(NetConfig(base_channels=2, channel_mult=(1, 2), temb_dim=8, activation=activation), seed=seed)
    # break the zero initialisation so that every layer receives gradient
    net.conv_out.w[...] = np.random.default_rng(seed + 100).normal(0, 0.3, net.conv_out.w.shape)
    net.conv_out.b[[3, 5, 6, 7]] = 3.0
    return net


def test_gradient_matches_finite_differences():
    net = _tiny_net()
    X, t, x0 = _batch(0)
    _, g = backward(net, X, t, x0, lambda_reg=0.5)
    rng = np.random.default_rng(1)
    idx = rng.choice(net.num_params, size=60, replace=False)
    h = 1e-4
    for i in idx:
        p = net.params[i]
        net.params[i] = p + h
        up = loss(net.forward(X, t, keep_cache=False), x0, 0.5)
        net.params[i] = p - h
        dn = loss(net.forward(X, t, keep_cache=False), x0, 0.5)
        net.params[i] = p
        fd = (up - dn) / (2 * h)
        assert fd == pytest.approx(g[i], rel=1e-4, abs=1e-7), i


def test_input_gradient_matches_finite_differences():
    net = _tiny_net(3)
    X, t, x0 = _batch(2)
    net.zero_grad()
    pred = net.forward(X, t)
    _, dpred = loss_and_grad(pred, x0, 0.0)
    dX = net.backward(dpred)
    rng = np.random.default_rng(4)
    h = 1e-5
    for _ in range(20):
        i = tuple(int(rng.integers(n)) for n in X.shape)
        Xp, Xm = X.copy(), X.copy()
        Xp[i] += h
        Xm[i] -= h
        fd = (loss(net.forward(Xp, t, keep_cache=False), x0, 0) - loss(net.forward(Xm, t, keep_cache=False), x0, 0)) / (2 * h)
        assert fd == pytest.approx(dX[i], rel=1e-4, abs=1e-8)


def test_output_layer_starts_at_zero():
    net = DenoiserNet(TINY)
    X, t, _ = _batch(5)
    assert np.all(net.forward(X, t) == 0)


def test_identity_activation_is_affine_in_input():
    net = _tiny_net(activation="identity")
    X1, t, _ = _batch(6)
    X2, _, _ = _batch(7)
    f = lambda X: net.forward(X, t, keep_cache=False)  # noqa: E731
    zero = f(np.zeros_like(X1))
    lhs = f(0.3 * X1 + 0.7 * X2) - zero
    rhs = 0.3 * (f(X1) - zero) + 0.7 * (f(X2) - zero)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_loss_known_values():
    x0 = np.zeros((8, 2, 2, 2))
    assert loss(x0, x0) == 0.0
    pred = np.zeros_like(x0)
    pred[0] = 1.0  # low band only: mse = 8 / 64, no regulariser contribution
    assert loss(pred, x0, 1.0) == pytest.approx(0.125)
    pred = np.zeros_like(x0)
    pred[7, 0, 0, 0] = -2.0  # hhh: mse 4/64 plus |-2|
    assert loss(pred, x0, 1.0) == pytest.approx(4 / 64 + 2.0)
    assert loss(pred, x0, 0.0) == pytest.approx(4 / 64)


def test_loss_batch_averages_samples():
    rng = np.random.default_rng(8)
    p, x = rng.normal(size=(3, 8, 2, 2, 2)), rng.normal(size=(3, 8, 2, 2, 2))
    assert loss(p, x, 0.7) == pytest.approx(np.mean([loss(p[i], x[i], 0.7) for i in range(3)]))


def test_shape_checks():
    net = DenoiserNet(TINY)
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 23, 2, 4, 4)), 1)
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 24, 3, 4, 4)), 1)
    with pytest.raises(ValueError):
        loss(np.zeros((8, 2, 2, 2)), np.zeros((8, 2, 2, 4)))


def test_embedding_layout():
    e = timestep_embedding([0, 5], 8)
    assert e.shape == (2, 8)
    assert np.array_equal(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert e[1, 0] == pytest.approx(np.sin(5.0))


def test_smooth():
    assert np.allclose(smooth([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])


def _dataset(n=3, shape=(4, 8, 8)):
    rng = np.random.default_rng(0)
    out = []
    for _ in range(n):
        y0 = Volume(rng.random(shape).astype(np.float32), (2.0, 2.0, 4.5))
        m = np.zeros(shape, bool)
        m[1:3, 2:6, 2:6] = True
        out.append(TrainingSample(y0, [BinaryMask(m, y0.spacing)]))
    return out


def test_zero_learning_rate_keeps_parameters():
    net = DenoiserNet(TINY)
    before = net.params.copy()
    train(net, _dataset(), TrainConfig(learning_rate=0.0, iterations=3, batch_size=2, log_every=0), make_linear_schedule())
    assert np.array_equal(net.params, before)


def test_training_is_seed_deterministic():
    runs = []
    for _ in range(2):
        net = DenoiserNet(TINY, seed=1)
        res = train(net, _dataset(), TrainConfig(iterations=4, batch_size=2, seed=5, lambda_reg=1e-3, log_every=0), make_linear_schedule())
        runs.append((net.params.copy(), res.losses))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert np.array_equal(runs[0][1], runs[1][1])


def test_training_reduces_loss():
    net = DenoiserNet(TINY)
    res = train(net, _dataset(), TrainConfig(iterations=150, batch_size=2, lambda_reg=1e-3, log_every=0), make_linear_schedule())
    assert res.smoothed(30)[-1] < res.losses[:30].mean()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        train(DenoiserNet(TINY), [], TrainConfig(), make_linear_schedule())


def test_checkpoint_roundtrip(tmp_path):
    net = _tiny_net(2)
    path = net.save(tmp_path / "m.ckpt", iterations=7)
    net2, header = DenoiserNet.load(path)
    assert header["iterations"] == 7
    assert net2.config == net.config
    assert np.array_equal(net2.params, net.params.astype(np.float32).astype(np.float64))
    X, t, _ = _batch(9)
    assert np.allclose(net2.forward(X, t), net.forward(X, t), atol=1e-4)


def test_checkpoint_size_mismatch(tmp_path):
    path = DenoiserNet(TINY).save(tmp_path / "m.ckpt")
    np.zeros(5, "<f4").tofile(path)
    with pytest.raises(ValueError):
        DenoiserNet.load(path)


def test_gradient_vanishes_at_zero_loss():
    # zero-initialised output layer predicts 0, which is exact for a zero target
    net = DenoiserNet(TINY)
    X, t, _ = _batch(10)
    value, g = backward(net, X, t, np.zeros((2, 8, 2, 4, 4)), lambda_reg=0.0)
    assert value == 0.0 and not g.any()


def test_lambda_zero_is_mse_only():
    net = _tiny_net(4)
    X, t, x0 = _batch(11)
    _, g = backward(net, X, t, x0, lambda_reg=0.0)
    net.zero_grad()
    pred = net.forward(X, t)
    net.backward(2.0 * (pred - x0) / pred.size)
    assert np.allclose(g, net.grads, rtol=0, atol=1e-15)
    _, g_reg = backward(net, X, t, x0, lambda_reg=0.3)
    assert not np.allclose(g, g_reg)


@pytest.mark.slow
def test_overfit_single_phantom():
    from wdm_inpaint.masking import MaskSpec, make_inpainting_mask
    from wdm_inpaint.phantom import PhantomSpec, generate_phantom

    img, labels, _ = generate_phantom(PhantomSpec())
    m, _ = make_inpainting_mask(img, labels, MaskSpec(offset_mm=18.0, patella_volume_cm3=(0.3, 10.0)))
    cfg = TrainConfig(iterations=2000, batch_size=2, lambda_reg=1 / img.data.size, log_every=0)
    res = train(DenoiserNet(NetConfig(), seed=0), [TrainingSample(img, [m])], cfg, make_linear_schedule())
    assert res.smoothed(100)[-1] < 0.1 * res.losses[:100].mean()
