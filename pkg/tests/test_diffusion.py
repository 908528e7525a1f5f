import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wdm_inpaint.diffusion import (
    ConditionedInput,
    NoiseSchedule,
    inpaint,
    make_linear_schedule,
    p_sample_step,
    posterior_coefficients,
    posterior_params,
    q_sample,
)
from wdm_inpaint.volume import BinaryMask, Volume
from wdm_inpaint.wavelet import WaveletCoeffs, dwt3_array


def _mp_alpha_bar(T, b0, b1, t):
    mpmath.mp.dps = 50
    acc = mpmath.mpf(1)
    for i in range(1, t + 1):
        beta = mpmath.mpf(b0) + mpmath.mpf(i - 1) / (T - 1) * (mpmath.mpf(b1) - mpmath.mpf(b0))
        acc *= 1 - beta
    return acc


def test_alpha_bar_T_default():
    s = make_linear_schedule()
    ref = float(_mp_alpha_bar(1000, "1e-4", "0.02", 1000))
    assert abs(s.alpha_bar[1000] / ref - 1) < 1e-9
    # the commonly quoted value, to its three significant figures
    assert f"{s.alpha_bar[1000]:.2e}" == "4.04e-05"


def test_schedule_single_step():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert s.T == 1
    assert s.alpha_bar[1] == 0.5 and s.alpha_bar[0] == 1.0


def test_schedule_constant_betas():
    s = make_linear_schedule(10, 0.01, 0.01)
    assert np.all(s.beta[1:] == 0.01)


def test_schedule_linear_values():
    s = make_linear_schedule(5, 0.1, 0.5)
    assert np.allclose(s.beta[1:], [0.1, 0.2, 0.3, 0.4, 0.5], atol=1e-15)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_schedule_invariants():
    s = make_linear_schedule()
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.allclose(s.alpha_bar[1:] / s.alpha_bar[:-1], s.alpha[1:], rtol=1e-12, atol=0)
    assert np.allclose(s.one_minus_alpha_bar, 1 - s.alpha_bar, atol=1e-14)


def test_q_sample_affine_coefficients():
    s = make_linear_schedule()
    t = 250
    one, zero = np.ones(3), np.zeros(3)
    assert np.allclose(q_sample(one, t, zero, s), np.sqrt(s.alpha_bar[t]), rtol=1e-15)
    assert np.allclose(q_sample(zero, t, one, s), np.sqrt(1 - s.alpha_bar[t]), rtol=1e-12)


def test_q_sample_zero_x0_is_scaled_noise():
    s = make_linear_schedule()
    eps = np.random.default_rng(0).normal(size=(8, 2, 2, 2))
    assert np.array_equal(q_sample(np.zeros_like(eps), 700, eps, s), np.sqrt(s.one_minus_alpha_bar[700]) * eps)


def test_q_sample_noiseless_prefix():
    s = NoiseSchedule.from_betas([0.0, 0.0, 0.1], strict=False)
    x0 = np.random.default_rng(1).normal(size=5)
    assert np.array_equal(q_sample(x0, 2, np.ones(5), s), x0)


def test_q_sample_coeffs_and_range():
    s = make_linear_schedule(10)
    c = WaveletCoeffs(np.ones((8, 1, 1, 1)), (1, 1, 1))
    out = q_sample(c, 3, np.zeros((8, 1, 1, 1)), s)
    assert isinstance(out, WaveletCoeffs)
    with pytest.raises(ValueError):
        q_sample(c, 0, np.zeros((8, 1, 1, 1)), s)
    with pytest.raises(ValueError):
        q_sample(c, 11, np.zeros((8, 1, 1, 1)), s)


def test_strict_schedule_rejects_zero_beta():
    with pytest.raises(ValueError):
        NoiseSchedule.from_betas([0.1, 0.0])


def test_posterior_t1_is_deterministic():
    s = make_linear_schedule()
    rng = np.random.default_rng(2)
    x0_hat, xt = rng.normal(size=10), rng.normal(size=10)
    mu, var = posterior_params(xt, x0_hat, 1, s)
    assert np.array_equal(mu, x0_hat)
    assert var == 0.0
    assert np.array_equal(p_sample_step(xt, x0_hat, 1, s, rng), x0_hat)


def test_posterior_beta_zero_keeps_xt():
    s = NoiseSchedule.from_betas([0.1, 0.0, 0.2], strict=False)
    rng = np.random.default_rng(3)
    xt = rng.normal(size=6)
    mu, var = posterior_params(xt, rng.normal(size=6), 2, s)
    assert np.array_equal(mu, xt)
    assert var == 0.0
    c = 0.37
    mu, _ = posterior_params(np.full(3, c), np.full(3, c), 2, s)
    assert np.all(mu == c)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 1000))
def test_posterior_matches_extended_precision(t):
    s = make_linear_schedule()
    mpmath.mp.dps = 50
    betas = [mpmath.mpf("1e-4") + mpmath.mpf(i) / 999 * (mpmath.mpf("0.02") - mpmath.mpf("1e-4")) for i in range(t)]
    ab_prev = mpmath.mpf(1)
    for b in betas[:-1]:
        ab_prev *= 1 - b
    bt = betas[-1]
    ab = ab_prev * (1 - bt)
    c_x0 = mpmath.sqrt(ab_prev) * bt / (1 - ab)
    c_xt = mpmath.sqrt(1 - bt) * (1 - ab_prev) / (1 - ab)
    var = (1 - ab_prev) / (1 - ab) * bt
    got = posterior_coefficients(t, s)
    for g, r in zip(got, (c_x0, c_xt, var)):
        assert abs(g - float(r)) <= 1e-12 * max(1.0, abs(float(r))) + 1e-300


def test_posterior_rejects_t0():
    with pytest.raises(ValueError):
        posterior_params(np.zeros(1), np.zeros(1), 0, make_linear_schedule())


@pytest.mark.parametrize("t", [1, 250, 500, 1000])
def test_q_sample_monte_carlo(t):
    s = make_linear_schedule()
    rng = np.random.default_rng(t)
    x0 = np.array([0.8, -0.3, 0.0])
    n = 10_000
    xs = q_sample(x0[None], t, rng.standard_normal((n, 3)), s)
    mean, var = xs.mean(0), xs.var(0, ddof=1)
    sd = np.sqrt(s.one_minus_alpha_bar[t])
    assert np.all(np.abs(mean - np.sqrt(s.alpha_bar[t]) * x0) < 3 * sd / np.sqrt(n))
    # standard error of a normal sample variance: sigma^2 sqrt(2 / (n - 1))
    assert np.all(np.abs(var - sd**2) < 3 * sd**2 * np.sqrt(2 / (n - 1)))


def test_p_sample_variance_monte_carlo():
    s = make_linear_schedule()
    t = 400
    rng = np.random.default_rng(5)
    n = 10_000
    xt, x0 = np.full(n, 0.2), np.full(n, -0.1)
    draws = p_sample_step(xt, x0, t, s, rng)
    mu, var = posterior_params(0.2, -0.1, t, s)
    assert abs(draws.mean() - mu) < 3 * np.sqrt(var / n)
    assert abs(draws.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))


def test_p_sample_seeded():
    s = make_linear_schedule()
    a = p_sample_step(np.zeros(4), np.ones(4), 50, s, np.random.default_rng(9))
    b = p_sample_step(np.zeros(4), np.ones(4), 50, s, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_conditioned_input_stacks_24_channels():
    x = np.zeros((8, 2, 2, 2))
    X = ConditionedInput(x, x + 1, x + 2, 5)
    st_ = X.stacked()
    assert st_.shape == (24, 2, 2, 2)
    assert np.all(st_[8:16] == 1) and np.all(st_[16:] == 2)
    with pytest.raises(ValueError):
        ConditionedInput(x, np.zeros((8, 2, 2, 4)), x, 1)


# sampler


def _scene(seed=0, shape=(4, 8, 8)):
    rng = np.random.default_rng(seed)
    truth = Volume(rng.random(shape), (1.0, 1.0, 2.0))
    patho = Volume(np.clip(truth.data + rng.normal(0, 0.2, shape), 0, 1), truth.spacing)
    m = np.zeros(shape, bool)
    m[1:3, 2:6, 1:5] = True
    return truth, patho, BinaryMask(m, truth.spacing)


def test_oracle_denoiser_reproduces_truth():
    truth, patho, mask = _scene()
    target = dwt3_array(truth.data)
    calls = []

    def oracle(X):
        calls.append(X.t)
        return target

    s = make_linear_schedule(100)
    out = inpaint(patho, mask, oracle, s, np.random.default_rng(0))
    assert calls == list(range(100, 0, -1))
    assert np.abs(out.data - truth.data)[mask.data].max() < 1e-4
    assert np.array_equal(out.data[~mask.data], patho.data[~mask.data])
    assert out.dims == patho.dims and out.spacing == patho.spacing


def test_sampler_reproducible_and_seed_sensitive():
    _, patho, mask = _scene(1)
    s = make_linear_schedule(30)
    den = lambda X: 0.5 * X.x_t  # noqa: E731
    a = inpaint(patho, mask, den, s, np.random.default_rng(4))
    b = inpaint(patho, mask, den, s, np.random.default_rng(4))
    c = inpaint(patho, mask, den, s, np.random.default_rng(5))
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data[mask.data], c.data[mask.data])


def test_conditioning_sees_masked_image_and_mask():
    _, patho, mask = _scene(2)
    seen = {}

    def spy(X):
        seen["m1"], seen["m2"] = X.cond_m1, X.cond_m2
        return np.zeros_like(X.x_t)

    inpaint(patho, mask, spy, make_linear_schedule(2), np.random.default_rng(0))
    m1 = np.where(mask.data, 0, patho.data)
    assert np.allclose(seen["m1"], dwt3_array(m1))
    assert np.allclose(seen["m2"], dwt3_array(mask.data.astype(float)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.integers(0, 7), st.integers(0, 7), st.floats(0, 1))
def test_outside_voxel_changes_pass_through(z, y, x, value):
    _, patho, mask = _scene(3)
    s = make_linear_schedule(5)
    den = lambda X: np.zeros_like(X.x_t)  # noqa: E731
    base = inpaint(patho, mask, den, s, np.random.default_rng(0))
    data = patho.data.copy()
    data[z, y, x] = value
    out = inpaint(Volume(data, patho.spacing), mask, den, s, np.random.default_rng(0))
    if not mask.data[z, y, x]:
        assert out.data[z, y, x] == np.float32(value)
        others = np.ones_like(mask.data)
        others[z, y, x] = False
        assert np.array_equal(out.data[others & ~mask.data], base.data[others & ~mask.data])


def test_inpaint_rejects_odd_dims_and_bad_channels():
    s = make_linear_schedule(3)
    v = Volume(np.zeros((4, 4, 5)), (1, 1, 1))
    with pytest.raises(ValueError):
        inpaint(v, BinaryMask(np.zeros((4, 4, 5), bool), (1, 1, 1)), lambda X: X.x_t, s, np.random.default_rng(0))

    class Wrong:
        in_channels, out_channels = 16, 8

        def __call__(self, X):
            return X.x_t

    _, patho, mask = _scene()
    with pytest.raises(ValueError):
        inpaint(patho, mask, Wrong(), s, np.random.default_rng(0))


def test_snapshots_written(tmp_path):
    _, patho, mask = _scene()
    inpaint(patho, mask, lambda X: X.x_t, make_linear_schedule(4), np.random.default_rng(0), snapshot_every=2, snapshot_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*_lll.vol"))
    assert names == ["x_0000_lll.vol", "x_0002_lll.vol"]
