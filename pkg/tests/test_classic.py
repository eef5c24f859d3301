import numpy as np
import pytest

from rtsnet import classic
from rtsnet.classic import (
    FilterStep,
    SingularMatrixError,
    SmoothedStep,
    backward_gain,
    batch_map_oracle,
    forward_gain,
    kalman_filter,
    kf_predict,
    kf_update,
    mse_db,
    rts_backward_step,
    rts_smooth,
)
from rtsnet.ssmodel import (
    LorenzConfig,
    canonical_linear_model,
    linear_model,
    lorenz_model,
    rotate_observation,
    simulate_trajectory,
)


# ---------------------------------------------------------------------------
# Independent oracle: assemble the joint Gaussian of (x_{1:T}, y_{1:T}) for a
# linear model with known x0, and condition directly.  Shares no code with the
# recursive implementations under test.
# ---------------------------------------------------------------------------

def joint_gaussian_conditional(F, H, Q, R, x0, Y, upto=None):
    """Mean of x_{1:T} given y_{1:upto} (default: all), by dense conditioning."""
    F, H, Q, R = (np.atleast_2d(np.asarray(a, float)) for a in (F, H, Q, R))
    Y = np.atleast_2d(np.asarray(Y, float))
    x0 = np.asarray(x0, float).reshape(-1)
    T, n = Y.shape
    m = F.shape[0]
    upto = T if upto is None else upto

    powers = [np.eye(m)]
    for _ in range(T):
        powers.append(F @ powers[-1])
    mu_x = np.concatenate([powers[t] @ x0 for t in range(1, T + 1)])
    M = np.zeros((T * m, T * m))
    for t in range(1, T + 1):
        for k in range(1, t + 1):
            M[(t - 1) * m:t * m, (k - 1) * m:k * m] = powers[t - k]
    Cxx = M @ np.kron(np.eye(T), Q) @ M.T
    Hb = np.kron(np.eye(T), H)
    Cyy = Hb @ Cxx @ Hb.T + np.kron(np.eye(T), R)
    Cxy = Cxx @ Hb.T
    mu_y = Hb @ mu_x

    k = upto * n
    if k == 0:
        return mu_x.reshape(T, m)
    resid = Y.reshape(-1)[:k] - mu_y[:k]
    mean = mu_x + Cxy[:, :k] @ np.linalg.solve(Cyy[:k, :k], resid)
    return mean.reshape(T, m)


def random_stable_model(rng, m, n, q2=0.5, r2=0.8):
    F = rng.standard_normal((m, m))
    F *= 0.9 / max(np.abs(np.linalg.eigvals(F)).max(), 1e-9)
    H = rng.standard_normal((n, m))
    return linear_model(F, H, q2=q2, r2=r2)


def random_spd(rng, k, scale=1.0):
    A = rng.standard_normal((k, k))
    return scale * (A @ A.T + 0.1 * np.eye(k))


class TestScalarArithmetic:
    def test_predict_scalar(self):
        model = linear_model(np.eye(1), np.eye(1), q2=1.0, r2=1.0)
        prev = FilterStep(x_post=np.zeros(1), Sigma_post=np.zeros((1, 1)))
        step = kf_predict(model, prev)
        assert step.Sigma_prior[0, 0] == pytest.approx(1.0)
        assert step.S[0, 0] == pytest.approx(2.0)

    def test_predict_noiseless(self):
        model = linear_model(np.eye(2), np.eye(2), q2=0.0, r2=0.7)
        prev = FilterStep(x_post=np.ones(2), Sigma_post=np.zeros((2, 2)))
        step = kf_predict(model, prev)
        assert np.allclose(step.Sigma_prior, 0.0)
        assert np.allclose(step.S, model.R)

    def test_forward_gain_scalar(self):
        K = forward_gain(np.eye(1), np.eye(1), 2.0 * np.eye(1))
        assert K[0, 0] == pytest.approx(0.5)

    def test_forward_gain_vanishes_for_huge_R(self):
        S = np.eye(2) * 1e12
        K = forward_gain(np.eye(2), np.eye(2), S)
        assert np.all(np.abs(K) < 1e-11)

    def test_update_scalar_chain(self):
        model = linear_model(np.eye(1), np.eye(1), q2=1.0, r2=1.0)
        prev = FilterStep(x_post=np.zeros(1), Sigma_post=np.zeros((1, 1)))
        step = kf_predict(model, prev)
        step.K = forward_gain(step.Sigma_prior, step.H_hat, step.S)
        done = kf_update(step, np.array([2.0]))
        assert done.Sigma_post[0, 0] == pytest.approx(1.0 - 0.5 * 2.0 * 0.5)
        assert done.x_post[0] == pytest.approx(1.0)

    def test_update_zero_innovation(self):
        model = linear_model(np.eye(2), np.eye(2), q2=0.3, r2=0.5)
        prev = FilterStep(x_post=np.array([1.0, -2.0]), Sigma_post=0.2 * np.eye(2))
        step = kf_predict(model, prev)
        step.K = forward_gain(step.Sigma_prior, step.H_hat, step.S)
        done = kf_update(step, step.y_pred)
        assert np.allclose(done.x_post, done.x_prior)

    def test_update_requires_gain(self):
        with pytest.raises(ValueError):
            kf_update(FilterStep(x_post=np.zeros(1)), np.zeros(1))

    def test_backward_gain_scalar(self):
        G = backward_gain(0.5 * np.eye(1), np.eye(1), 1.5 * np.eye(1))
        assert G[0, 0] == pytest.approx(1.0 / 3.0)

    def test_backward_gain_decoupled(self):
        G = backward_gain(random_spd(np.random.default_rng(0), 3), np.zeros((3, 3)),
                          np.eye(3))
        assert np.allclose(G, 0.0)


class TestGainIdentities:
    @pytest.mark.parametrize("seed", range(6))
    def test_forward_gain_identity(self, seed):
        rng = np.random.default_rng(seed)
        Sigma = random_spd(rng, 2)
        H = rng.standard_normal((2, 2))
        S = random_spd(rng, 2)
        K = forward_gain(Sigma, H, S)
        assert np.allclose(K @ S, Sigma @ H.T, atol=1e-10)

    @pytest.mark.parametrize("seed", range(6))
    def test_backward_gain_identity(self, seed):
        rng = np.random.default_rng(seed)
        Sigma_post = random_spd(rng, 3)
        F = rng.standard_normal((3, 3))
        Sigma_next = random_spd(rng, 3)
        G = backward_gain(Sigma_post, F, Sigma_next)
        assert np.allclose(G @ Sigma_next, Sigma_post @ F.T, atol=1e-10)

    def test_singular_innovation_names_time_index(self):
        with pytest.raises(SingularMatrixError, match="time index 4"):
            forward_gain(np.eye(2), np.eye(2), np.zeros((2, 2)), t=4)


class TestAgainstJointGaussianOracle:
    def test_filter_marginals(self):
        rng = np.random.default_rng(5)
        model = random_stable_model(rng, 3, 3)
        x0 = rng.standard_normal(3)
        traj = simulate_trajectory(model, x0, 8, seed=2)
        steps = kalman_filter(model, x0, None, traj.observations)
        for t in range(1, 9):
            prior_oracle = joint_gaussian_conditional(
                model.F, model.H, model.Q, model.R, x0, traj.observations, upto=t - 1)
            post_oracle = joint_gaussian_conditional(
                model.F, model.H, model.Q, model.R, x0, traj.observations, upto=t)
            assert np.allclose(steps[t - 1].x_prior, prior_oracle[t - 1], atol=1e-8)
            assert np.allclose(steps[t - 1].x_post, post_oracle[t - 1], atol=1e-8)

    def test_smoother_equals_conditional_mean(self):
        rng = np.random.default_rng(9)
        model = random_stable_model(rng, 2, 2)
        x0 = rng.standard_normal(2)
        traj = simulate_trajectory(model, x0, 10, seed=3)
        out = rts_smooth(model, x0, None, traj.observations)
        oracle = joint_gaussian_conditional(
            model.F, model.H, model.Q, model.R, x0, traj.observations)
        assert np.allclose(out.smoothed_means(), oracle, atol=1e-6)

    def test_scalar_random_walk_midpoint(self):
        model = linear_model(np.eye(1), np.eye(1), q2=1.0, r2=1.0)
        Y = np.array([[1.0], [1.0]])
        out = rts_smooth(model, np.zeros(1), None, Y)
        oracle = joint_gaussian_conditional(
            np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.zeros(1), Y)
        assert np.allclose(out.smoothed_means(), oracle, atol=1e-10)

    def test_batch_map_oracle_matches_joint_gaussian(self):
        rng = np.random.default_rng(11)
        model = random_stable_model(rng, 3, 2)
        x0 = rng.standard_normal(3)
        traj = simulate_trajectory(model, x0, 12, seed=4)
        got = batch_map_oracle(model.F, model.H, model.Q, model.R, x0, None,
                               traj.observations)
        want = joint_gaussian_conditional(
            model.F, model.H, model.Q, model.R, x0, traj.observations)
        assert np.allclose(got, want, atol=1e-8)

    def test_batch_map_oracle_free_initial_state(self):
        # with Sigma0 > 0 the oracle must still equal the smoother
        rng = np.random.default_rng(13)
        model = random_stable_model(rng, 2, 2)
        x0 = rng.standard_normal(2)
        Sigma0 = 0.5 * np.eye(2)
        traj = simulate_trajectory(model, x0, 9, seed=6)
        got = batch_map_oracle(model.F, model.H, model.Q, model.R, x0, Sigma0,
                               traj.observations)
        out = rts_smooth(model, x0, Sigma0, traj.observations)
        assert np.allclose(got, out.smoothed_means(), atol=1e-6)


class TestBatchMapOracle:
    def test_scalar_random_walk_tridiagonal(self):
        # T=2, all variances 1, y=(1,1), x0=0: solve the 2-unknown system directly
        A = np.array([[3.0, -1.0], [-1.0, 2.0]])
        b = np.array([1.0, 1.0])
        expected = np.linalg.solve(A, b)
        got = batch_map_oracle(np.eye(1), np.eye(1), np.eye(1), np.eye(1),
                               np.zeros(1), None, np.array([[1.0], [1.0]]))
        assert np.allclose(got.reshape(-1), expected, atol=1e-12)

    def test_tiny_process_noise_is_deterministic_rollout(self):
        F = np.array([[0.9, 0.1], [0.0, 0.8]])
        model = linear_model(F, np.eye(2), q2=1e-12, r2=1.0)
        x0 = np.array([1.0, -1.0])
        Y = np.zeros((5, 2))
        got = batch_map_oracle(F, np.eye(2), model.Q, model.R, x0, None, Y)
        x, rollout = x0.copy(), []
        for _ in range(5):
            x = F @ x
            rollout.append(x)
        assert np.allclose(got, np.stack(rollout), atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_equals_rts_smooth_random_instances(self, seed):
        rng = np.random.default_rng(100 + seed)
        m = int(rng.integers(1, 4))
        n = int(rng.integers(1, 4))
        model = random_stable_model(rng, m, n)
        x0 = rng.standard_normal(m)
        traj = simulate_trajectory(model, x0, int(rng.integers(2, 15)), seed=seed)
        a = batch_map_oracle(model.F, model.H, model.Q, model.R, x0, None,
                             traj.observations)
        b = rts_smooth(model, x0, None, traj.observations).smoothed_means()
        assert np.allclose(a, b, atol=1e-6)


class TestKalmanFilter:
    def test_single_step_equals_predict_update(self):
        model = canonical_linear_model(2)
        y = np.array([[0.4, -0.2]])
        steps = kalman_filter(model, np.zeros(2), None, y)
        prev = FilterStep(x_post=np.zeros(2), Sigma_post=np.zeros((2, 2)))
        step = kf_predict(model, prev)
        step.K = forward_gain(step.Sigma_prior, step.H_hat, step.S)
        done = kf_update(step, y[0])
        assert np.allclose(steps[0].x_post, done.x_post)
        assert np.allclose(steps[0].Sigma_post, done.Sigma_post)

    def test_noiseless_consistency(self):
        model = canonical_linear_model(3, q2=0.0, r2=1e-10)
        traj = simulate_trajectory(model, np.array([1.0, 2.0, -1.0]), 10, seed=0)
        # wrong initial guess but informative prior: the filter locks on
        steps = kalman_filter(model, np.zeros(3), np.eye(3), traj.observations)
        got = np.stack([s.x_post for s in steps])
        assert np.allclose(got, traj.states[1:], atol=1e-4)

    def test_steady_state_matches_riccati_fixed_point(self):
        model = canonical_linear_model(2, q2=1.0, r2=1.0)
        F, H, Q, R = model.F, model.H, model.Q, model.R
        # independent oracle: iterate the discrete Riccati recursion directly
        P = np.zeros((2, 2))
        for _ in range(2000):
            Pp = F @ P @ F.T + Q
            S = H @ Pp @ H.T + R
            K = Pp @ H.T @ np.linalg.inv(S)
            P = Pp - K @ S @ K.T
        traj = simulate_trajectory(model, np.zeros(2), 300, seed=8)
        steps = kalman_filter(model, np.zeros(2), None, traj.observations)
        assert np.trace(steps[-1].Sigma_post) == pytest.approx(np.trace(P), abs=1e-6)


class TestRtsSmoother:
    def test_t1_smoother_equals_filter(self):
        model = canonical_linear_model(2)
        Y = np.array([[0.3, 0.1]])
        out = rts_smooth(model, np.zeros(2), None, Y)
        assert np.allclose(out.smoothed[0].x_smooth, out.filtered[0].x_post)
        assert np.allclose(out.smoothed[0].Sigma_smooth, out.filtered[0].Sigma_post)

    def test_zero_backward_innovation_keeps_filter_mean(self):
        model = canonical_linear_model(2)
        filt = FilterStep(x_post=np.array([0.5, -0.5]), Sigma_post=0.4 * np.eye(2))
        pred_mean = model.f(filt.x_post)
        pred_cov = model.F @ filt.Sigma_post @ model.F.T + model.Q
        nxt = SmoothedStep(x_smooth=pred_mean, Sigma_smooth=pred_cov)
        step = rts_backward_step(filt, nxt, model)
        assert np.allclose(step.x_smooth, filt.x_post, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_covariance_invariants(self, seed):
        rng = np.random.default_rng(40 + seed)
        model = random_stable_model(rng, 3, 2)
        x0 = rng.standard_normal(3)
        traj = simulate_trajectory(model, x0, 25, seed=seed)
        out = rts_smooth(model, x0, None, traj.observations)
        for fs in out.filtered:
            for C in (fs.Sigma_prior, fs.Sigma_post):
                assert np.linalg.norm(C - C.T) < 1e-10
                assert np.linalg.eigvalsh(C).min() >= -1e-8
            assert np.trace(fs.Sigma_post) <= np.trace(fs.Sigma_prior) + 1e-12
        for t, ss in enumerate(out.smoothed):
            assert np.linalg.norm(ss.Sigma_smooth - ss.Sigma_smooth.T) < 1e-10
            assert np.linalg.eigvalsh(ss.Sigma_smooth).min() >= -1e-8
            # smoothed variance never exceeds filtered variance
            assert np.trace(ss.Sigma_smooth) <= np.trace(out.filtered[t].Sigma_post) + 1e-9

    def test_smoothing_beats_filtering_on_lorenz(self):
        cfg = LorenzConfig()
        model = lorenz_model(cfg, q2=0.1, r2=0.1)  # nu = 0 dB
        from rtsnet.ssmodel import lorenz_initial_states

        x0 = lorenz_initial_states(1, 3, cfg)[0]
        traj = simulate_trajectory(model, x0, 100, seed=5)
        out = rts_smooth(model, x0, None, traj.observations)
        filt_mse = np.mean((out.filtered_means() - traj.states[1:]) ** 2)
        smooth_mse = np.mean((out.smoothed_means() - traj.states[1:]) ** 2)
        assert smooth_mse < filt_mse

    def test_final_state_clamp(self):
        model = canonical_linear_model(2)
        traj = simulate_trajectory(model, np.zeros(2), 6, seed=1)
        out = rts_smooth(model, np.zeros(2), None, traj.observations,
                         x_final=traj.states[-1])
        assert np.array_equal(out.smoothed[-1].x_smooth, traj.states[-1])
        assert np.all(out.smoothed[-1].Sigma_smooth == 0.0)

    def test_rotated_h_degrades_monotonically(self):
        model = canonical_linear_model(2, q2=1.0, r2=0.01)
        traj_set = [simulate_trajectory(model, np.zeros(2), 80, seed=s) for s in range(8)]
        mses = []
        for alpha in (0.0, 5.0, 10.0):
            wrong = model.with_observation(rotate_observation(model.H, alpha))
            errs = []
            for traj in traj_set:
                out = rts_smooth(wrong, traj.states[0], None, traj.observations)
                errs.append(np.mean((out.smoothed_means() - traj.states[1:]) ** 2))
            mses.append(np.mean(errs))
        assert mses[0] <= mses[1] <= mses[2]

    def test_output_serialization(self, tmp_path):
        model = canonical_linear_model(2)
        traj = simulate_trajectory(model, np.zeros(2), 5, seed=2)
        out = rts_smooth(model, np.zeros(2), None, traj.observations)
        arrays = out.to_arrays()
        assert arrays["K"].shape == (5, 2, 2)
        assert arrays["G"].shape == (4, 2, 2)
        path = tmp_path / "smooth.npz"
        out.save(path)
        with np.load(path) as z:
            assert np.array_equal(z["x_smooth"], out.smoothed_means())


class TestMseDb:
    def test_floor(self):
        assert mse_db(np.zeros((3, 2)), np.zeros((3, 2))) == -300.0

    def test_tenth(self):
        est = np.zeros((10, 4))
        truth = np.full((10, 4), np.sqrt(0.1))
        assert mse_db(est, truth) == pytest.approx(-10.0)

    def test_unity(self):
        est = np.zeros((5, 3))
        truth = np.ones((5, 3))
        assert mse_db(est, truth) == pytest.approx(0.0)
