import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpfilter.filters import (
    FILTER_NAMES,
    HUKF,
    PF,
    UKF,
    VBAUKF,
    FilterConfig,
    NoiseBelief,
    ParticleCloud,
    StateEstimate,
    huber_joseph_cov,
    huber_update,
    huber_weight,
    make_filter,
    measurement_moments,
    pf_step,
    regularized_inv,
    systematic_resample,
    ukf_predict,
    ukf_update,
    vb_aukf_step,
    vb_haukf_step,
    vb_predict_belief,
)
from cpfilter.model import NoiseRegime, StateSpaceModel, make_rng, simulate, ungm_model
from cpfilter.unscented import sigma_points


def linear_model(F, H, Q):
    F, H = np.atleast_2d(F), np.atleast_2d(H)
    return StateSpaceModel(
        F.shape[0], H.shape[0],
        lambda x, k: x @ F.T,
        lambda x: x @ H.T,
        np.atleast_2d(Q),
    )


def kf_predict(m, P, F, Q):
    return F @ m, F @ P @ F.T + Q


def kf_update(m, P, z, H, R):
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    return m + K @ (z - H @ m), P - K @ S @ K.T


def random_spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + 0.2 * np.eye(n)


# ---------------------------------------------------------------------------
# types and config


def test_noise_belief_invariants():
    with pytest.raises(ValueError):
        NoiseBelief(v=2.0, V=np.eye(1))  # v must exceed m + 1 = 2
    with pytest.raises(ValueError):
        NoiseBelief(v=5.0, V=np.array([[1.0, 0.0], [0.0, -1.0]]))
    b = NoiseBelief.default(2, R0=np.diag([2.0, 3.0]))
    assert b.v == 5.0
    np.testing.assert_allclose(b.expected_R(), np.diag([2.0, 3.0]))


@pytest.mark.parametrize(
    "kwargs",
    [dict(rho=0.0), dict(rho=1.5), dict(vb_iters=0), dict(vb_iters=1.5), dict(huber_delta=-1.0),
     dict(huber_delta="big"), dict(pf_particles=1)],
)
def test_filter_config_validation(kwargs):
    with pytest.raises(ValueError):
        FilterConfig(**kwargs)


def test_state_estimate_shape_check():
    with pytest.raises(ValueError):
        StateEstimate(np.zeros(2), np.eye(3))


def test_regularized_inv_singular():
    S = np.array([[1.0, 1.0], [1.0, 1.0]])
    Sinv = regularized_inv(S)
    assert np.all(np.isfinite(Sinv))
    np.testing.assert_allclose(regularized_inv(np.array([[4.0]])), [[0.25]])
    assert np.all(np.isfinite(regularized_inv(np.array([[0.0]]))))


# ---------------------------------------------------------------------------
# UKF


def test_predict_identity_no_noise():
    model = linear_model(np.eye(2), np.eye(2), np.zeros((2, 2)))
    est = StateEstimate([1.0, -1.0], np.diag([2.0, 0.5]))
    prior = ukf_predict(est, model)
    np.testing.assert_allclose(prior.mean, est.mean, atol=1e-12)
    np.testing.assert_allclose(prior.cov, est.cov, atol=1e-12)
    assert prior.step == 1


def test_predict_affine_matches_kf():
    rng = np.random.default_rng(0)
    F, Q = rng.standard_normal((3, 3)), random_spd(rng, 3)
    model = linear_model(F, np.eye(3)[:1], Q)
    m, P = rng.standard_normal(3), random_spd(rng, 3)
    prior = ukf_predict(StateEstimate(m, P), model)
    mk, Pk = kf_predict(m, P, F, Q)
    np.testing.assert_allclose(prior.mean, mk, atol=1e-8)
    np.testing.assert_allclose(prior.cov, Pk, atol=1e-8)


def test_predict_ungm_first_step():
    model = ungm_model(10.0)
    prior = ukf_predict(StateEstimate([0.0], [[1.0]]), model)
    assert np.all(np.isfinite(prior.mean)) and np.all(np.isfinite(prior.cov))
    assert prior.cov[0, 0] >= 10.0


def test_update_zero_innovation():
    model = linear_model(np.eye(2), np.array([[1.0, 0.5]]), np.eye(2))
    prior = StateEstimate([1.0, 2.0], np.diag([1.0, 2.0]))
    z = prior.mean @ np.array([1.0, 0.5])
    post = ukf_update(prior, z, model, [[1.0]])
    np.testing.assert_allclose(post.mean, prior.mean, atol=1e-12)
    assert np.trace(post.cov) < np.trace(prior.cov)


def test_update_linear_matches_kf():
    rng = np.random.default_rng(1)
    H, R = rng.standard_normal((2, 3)), random_spd(rng, 2)
    model = linear_model(np.eye(3), H, np.eye(3))
    m, P = rng.standard_normal(3), random_spd(rng, 3)
    z = rng.standard_normal(2)
    post = ukf_update(StateEstimate(m, P), z, model, R)
    mk, Pk = kf_update(m, P, z, H, R)
    np.testing.assert_allclose(post.mean, mk, atol=1e-8)
    np.testing.assert_allclose(post.cov, Pk, atol=1e-8)


def test_update_uninformative_measurement():
    model = ungm_model()
    prior = ukf_predict(StateEstimate([0.5], [[1.0]]), model)
    post = ukf_update(prior, 30.0, model, [[1e12]])
    np.testing.assert_allclose(post.mean, prior.mean, rtol=1e-4)
    np.testing.assert_allclose(post.cov, prior.cov, rtol=1e-4)


def test_ukf_linear_100_steps_matches_kf():
    F, H = np.array([[1.0, 0.1], [0.0, 0.95]]), np.array([[1.0, 0.0]])
    Q, R = np.diag([0.01, 0.1]), np.array([[0.5]])
    model = linear_model(F, H, Q)
    rng = np.random.default_rng(2)
    f = UKF(model, R, x0=[0.0, 0.0], P0=np.eye(2))
    m, P = np.zeros(2), np.eye(2)
    for _ in range(100):
        z = rng.standard_normal(1)
        f.step(z)
        m, P = kf_update(*kf_predict(m, P, F, Q), z, H, R)
    np.testing.assert_allclose(f.estimate.mean, m, atol=1e-8)
    np.testing.assert_allclose(f.estimate.cov, P, atol=1e-8)


# ---------------------------------------------------------------------------
# Huber


@pytest.mark.parametrize("r,expected", [(0.5, 1.0), (2.69, 0.5), (-1.345, 1.0), (-2.69, 0.5)])
def test_huber_weight_examples(r, expected):
    assert huber_weight(r, 1.345) == pytest.approx(expected)


def test_huber_weight_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        huber_weight(1.0, 0.0)


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(1e-3, 10))
def test_huber_weight_monotone(a, b, delta):
    lo, hi = sorted((a, b))
    assert 0 < huber_weight(hi, delta) <= huber_weight(lo, delta) <= 1


def test_huber_weight_continuous_at_delta():
    d = 1.345
    assert huber_weight(d * (1 + 1e-12), d) == pytest.approx(1.0, abs=1e-11)


def test_huber_small_residual_equals_ukf():
    model = ungm_model()
    prior = ukf_predict(StateEstimate([3.0], [[2.0]]), model)
    mm = measurement_moments(prior, model)
    z = mm.z_pred + 0.1
    a = huber_update(prior, z, model, [[1.0]])
    b = ukf_update(prior, z, model, [[1.0]])
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-10)


def test_huber_multivariate_small_residual_equals_ukf():
    rng = np.random.default_rng(3)
    H = rng.standard_normal((2, 3))
    model = StateSpaceModel(3, 2, lambda x, k: x, lambda x: np.tanh(x @ H.T), np.eye(3))
    prior = StateEstimate(rng.standard_normal(3), random_spd(rng, 3))
    z = measurement_moments(prior, model).z_pred + 1e-3
    R = random_spd(rng, 2)
    a, b = huber_update(prior, z, model, R), ukf_update(prior, z, model, R)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-10)


def test_huber_gross_outlier_leaves_prior():
    model = ungm_model()
    prior = ukf_predict(StateEstimate([3.0], [[2.0]]), model)
    mm = measurement_moments(prior, model)
    S = mm.Pzz[0, 0] + 1.0
    z = mm.z_pred + 1.345 * 1e7 * np.sqrt(S)
    post = huber_update(prior, z, model, [[1.0]])
    np.testing.assert_allclose(post.mean, prior.mean, rtol=1e-4)
    np.testing.assert_allclose(post.cov, prior.cov, rtol=1e-4)


def test_huber_downweights_outlier():
    model = ungm_model()
    prior = ukf_predict(StateEstimate([3.0], [[2.0]]), model)
    z = measurement_moments(prior, model).z_pred + 40.0
    shift_h = abs(huber_update(prior, z, model, [[1.0]]).mean - prior.mean)
    shift_u = abs(ukf_update(prior, z, model, [[1.0]]).mean - prior.mean)
    assert shift_h < shift_u


@pytest.mark.parametrize("W", [0.0, 0.01, 0.5, 1.0])
def test_joseph_psd_boundary_weights(W):
    rng = np.random.default_rng(4)
    for _ in range(200):
        n, m = rng.integers(1, 5), rng.integers(1, 4)
        P, R = random_spd(rng, n), random_spd(rng, m)
        K, H = rng.standard_normal((n, m)) * 3, rng.standard_normal((m, n)) * 3
        D = random_spd(rng, m) * rng.random()
        C = huber_joseph_cov(P, K, H, R, W, D)
        np.testing.assert_array_equal(C, C.T)
        assert np.linalg.eigvalsh(C).min() >= -1e-9


def test_joseph_w0_returns_prior():
    rng = np.random.default_rng(5)
    P = random_spd(rng, 3)
    C = huber_joseph_cov(P, rng.standard_normal((3, 1)), rng.standard_normal((1, 3)), np.eye(1), 0.0)
    np.testing.assert_allclose(C, P)


# ---------------------------------------------------------------------------
# VB


def test_vb_predict_belief():
    b = vb_predict_belief(NoiseBelief(10.0, 4.0 * np.eye(1)), 0.5)
    assert b.v == pytest.approx(0.5 * 8 + 2)
    np.testing.assert_allclose(b.V, 2.0 * np.eye(1))


def test_vb_tight_prior_matches_ukf():
    model = ungm_model()
    R_true = 2.5
    v = 1e9
    belief = NoiseBelief(v, np.array([[(v - 2.0) * R_true]]))
    cfg = FilterConfig(rho=1.0, vb_iters=1)
    est = StateEstimate([0.3], [[1.5]])
    z = 4.0
    post, _ = vb_aukf_step(est, belief, z, model, cfg)
    ref = ukf_update(ukf_predict(est, model, cfg), z, model, [[R_true]], cfg)
    np.testing.assert_allclose(post.mean, ref.mean, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(post.cov, ref.cov, rtol=1e-6, atol=1e-6)


def test_vb_zero_innovation_v_growth():
    model = ungm_model()
    cfg = FilterConfig(vb_iters=1)
    est = StateEstimate([2.0], [[1.0]])
    belief = NoiseBelief.default(1)
    prior = ukf_predict(est, model, cfg)
    z = measurement_moments(prior, model, cfg).z_pred
    post, b = vb_aukf_step(est, belief, z, model, cfg)
    np.testing.assert_allclose(post.mean, prior.mean, atol=1e-12)
    # V grows by the weighted scatter of z around the posterior measurement points
    s = sigma_points(post.mean, post.cov)
    Zp = model.measurement(s.points)
    growth = np.sum(s.w_cov * (z[0] - Zp[:, 0]) ** 2)
    pred = vb_predict_belief(belief, cfg.rho)
    np.testing.assert_allclose(b.V - pred.V, [[growth]], rtol=1e-10)
    assert b.v == pytest.approx(pred.v + 1)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 1.0), st.integers(0, 1000))
def test_vb_preserves_belief_invariant(rho, seed):
    model = ungm_model()
    traj = simulate(model, NoiseRegime("C"), 30, seed)
    est, belief = StateEstimate([0.0], [[1.0]]), NoiseBelief.default(1)
    cfg = FilterConfig(rho=rho)
    for z in traj.measurements:
        est, belief = vb_haukf_step(est, belief, z, model, cfg)
        assert belief.v > belief.m + 1
        assert belief.V[0, 0] > 0


def test_vb_noise_estimate_converges_on_linear_model():
    # x_k = 0.9 x_{k-1} + w, z_k = x_k + v with R = 4
    model = linear_model([[0.9]], [[1.0]], [[1.0]])
    R_true = 4.0
    traj = simulate(model, NoiseRegime("A", R=R_true), 500, seed=7)
    f = VBAUKF(model, R=1.0)
    tail = []
    for k, z in enumerate(traj.measurements):
        f.step(z)
        if k >= 400:
            tail.append(f.belief.expected_R()[0, 0])
    assert np.mean(tail) == pytest.approx(R_true, rel=0.3)


def test_vb_haukf_small_innovation_equals_vb_aukf():
    model = linear_model([[0.9]], [[1.0]], [[1.0]])
    est, belief = StateEstimate([0.0], [[1.0]]), NoiseBelief.default(1)
    z = 0.01
    a = vb_aukf_step(est, belief, z, model)
    b = vb_haukf_step(est, belief, z, model)
    np.testing.assert_allclose(a[0].mean, b[0].mean, atol=1e-10)
    np.testing.assert_allclose(a[0].cov, b[0].cov, atol=1e-10)
    np.testing.assert_allclose(a[1].V, b[1].V, atol=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_vb_haukf_resists_single_outlier(seed):
    # linear model: the UNGM sign ambiguity would make paired deviations chaotic
    model = linear_model([[0.9]], [[1.0]], [[1.0]])
    zs = simulate(model, NoiseRegime("A"), 60, seed=seed).measurements
    bad = zs.copy()
    bad[30] += 50.0

    def run(step, meas):
        est, belief = StateEstimate([0.0], [[1.0]]), NoiseBelief.default(1)
        out = []
        for z in meas:
            est, belief = step(est, belief, z, model)
            out.append(est.mean[0])
        return np.array(out)

    dev_h = np.abs(run(vb_haukf_step, bad) - run(vb_haukf_step, zs)).sum()
    dev_a = np.abs(run(vb_aukf_step, bad) - run(vb_aukf_step, zs)).sum()
    assert dev_h < dev_a


# ---------------------------------------------------------------------------
# particle filter


def test_cloud_validation():
    with pytest.raises(ValueError):
        ParticleCloud(np.zeros((1, 1)), np.ones(1))
    with pytest.raises(ValueError):
        ParticleCloud(np.zeros((3, 1)), np.array([0.5, 0.5, 0.5]))


def test_systematic_resample_counts():
    rng = np.random.default_rng(0)
    w = np.array([0.5, 0.25, 0.25, 0.0])
    idx = systematic_resample(w, rng)
    counts = np.bincount(idx, minlength=4)
    np.testing.assert_array_equal(counts, [2, 1, 1, 0])


def test_pf_flat_likelihood_keeps_uniform_weights():
    model = ungm_model()
    rng = make_rng(0, 1)
    cloud = ParticleCloud.from_gaussian([0.0], [[1.0]], 200, rng)
    out = pf_step(cloud, 3.0, model, [[1e300]], rng)
    np.testing.assert_allclose(out.weights, 1 / 200, atol=1e-6)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-10)


def test_pf_underflow_resets():
    model = linear_model([[1.0]], [[1.0]], [[1e-6]])
    rng = make_rng(0, 1)
    cloud = ParticleCloud.from_gaussian([0.0], [[1e-6]], 50, rng)
    # the squared residual overflows, so every log-likelihood is -inf
    out = pf_step(cloud, 1e200, model, [[1e-300]], rng)
    assert out.reset
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-10)


def test_pf_linear_gaussian_matches_kf():
    F, H, Q, R = np.array([[0.8]]), np.array([[1.0]]), np.array([[1.0]]), np.array([[0.5]])
    model = linear_model(F, H, Q)
    rng = make_rng(5, 1)
    P = 100_000
    cloud = ParticleCloud.from_gaussian([0.0], [[1.0]], P, rng)
    z = np.array([1.2])
    cloud_post = pf_step(cloud, z, model, R, rng)
    m, Pk = kf_update(*kf_predict(np.zeros(1), np.eye(1), F, Q), z, H, R)
    se = np.sqrt(Pk[0, 0] / P)
    assert abs(cloud_post.mean()[0] - m[0]) < 3 * se * 2  # allow for weighting inefficiency


def test_pf_deterministic_given_seed():
    model = ungm_model()
    traj = simulate(model, NoiseRegime("C"), 40, 1)

    def run():
        f = PF(model, 1.0, FilterConfig(pf_particles=100), rng=make_rng(1, 1))
        return [f.step(z).mean[0] for z in traj.measurements]

    assert run() == run()


# ---------------------------------------------------------------------------
# stateful interface


@pytest.mark.parametrize("name", FILTER_NAMES)
def test_step_equals_predict_update(name):
    model = ungm_model()
    traj = simulate(model, NoiseRegime("D"), 25, 2)
    f1 = make_filter(name, model, 1.0, rng=make_rng(2, 1))
    f2 = make_filter(name, model, 1.0, rng=make_rng(2, 1))
    for z in traj.measurements:
        f1.step(z)
        f2.predict()
        z_pred, S = f2.innovation()
        assert np.all(np.isfinite(z_pred)) and S[0, 0] > 0
        f2.update(z)
    np.testing.assert_array_equal(f1.estimate.mean, f2.estimate.mean)


@pytest.mark.parametrize("name", FILTER_NAMES)
def test_posterior_cov_psd_on_benchmark(name):
    model = ungm_model()
    traj = simulate(model, NoiseRegime("D"), 200, 9)
    f = make_filter(name, model, 1.0, rng=make_rng(9, 1))
    for z in traj.measurements:
        f.step(z)
        assert f.estimate.min_eig() >= -1e-9


def test_make_filter_rejects_unknown():
    with pytest.raises(ValueError):
        make_filter("EKF", ungm_model(), 1.0)


def test_hukf_records_weight():
    model = ungm_model()
    f = HUKF(model, 1.0)
    f.predict()
    f.update(1e4)
    assert 0 < f.last_weight < 1
