import time

import numpy as np
import pytest

from rtsnet import classic, hybrid
from rtsnet.hybrid import (
    BackwardFeatures,
    BackwardGainNet,
    InferenceDivergenceError,
    RtsNetModel,
    backward_features,
    backward_gain_net,
    count_params,
    forward_features,
    lift_dynamics,
    lift_generic,
    lift_lorenz,
    rtsnet_forward,
    rtsnet_smooth,
    smooth_dataset,
)
from rtsnet.neural import DenseLayer, ParamStore, leaf, ssum, sumsq, tape_backward
from rtsnet.ssmodel import (
    LorenzConfig,
    canonical_linear_model,
    linear_model,
    lorenz_f_jac,
    lorenz_initial_states,
    lorenz_model,
    simulate_trajectory,
)


def small_net(model, seed=3):
    # narrow head keeps unit tests quick
    return RtsNetModel.from_ssmodel(model, seed=seed, head_width=32)


class TestLiftedDynamics:
    def test_linear_lift_matches_model(self):
        model = canonical_linear_model(3)
        f = lift_dynamics(model)
        x = np.random.default_rng(0).standard_normal((5, 3))
        got = f(leaf(x)).value
        want = np.stack([model.f(r) for r in x])
        assert np.allclose(got, want, atol=1e-14)

    def test_lorenz_lift_matches_model(self):
        cfg = LorenzConfig(J=5, dtau=0.02)
        model = lorenz_model(cfg)
        f = lift_lorenz(cfg)
        x = lorenz_initial_states(4, 1, cfg)
        got = f(leaf(x)).value
        want = np.stack([model.f(r) for r in x])
        assert np.allclose(got, want, atol=1e-12)

    def test_lorenz_lift_gradient_matches_analytic_jacobian(self):
        cfg = LorenzConfig(J=3, dtau=0.02)
        f = lift_lorenz(cfg)
        x0 = np.array([[1.2, -0.7, 2.0]])
        xn = leaf(x0)
        loss = ssum(f(xn))
        grads = tape_backward(loss, {"x": xn})
        # d(sum f)/dx = ones^T J
        J = lorenz_f_jac(x0[0], cfg)
        assert np.allclose(grads["x"][0], np.ones(3) @ J, atol=1e-12)

    def test_generic_lift_uses_jacobian_transpose(self):
        fn = lambda x: np.array([x[0] ** 2, x[0] * x[1]])
        jac = lambda x: np.array([[2 * x[0], 0.0], [x[1], x[0]]])
        f = lift_generic(fn, jac)
        x = leaf(np.array([[2.0, 3.0]]))
        out = f(x)
        assert np.allclose(out.value, [[4.0, 6.0]])
        grads = tape_backward(ssum(out), {"x": x})
        assert np.allclose(grads["x"][0], np.ones(2) @ jac(np.array([2.0, 3.0])))

    def test_generic_lift_falls_back_to_finite_differences(self):
        model_fn = lambda x: np.sin(x)
        f = lift_generic(model_fn)
        x = leaf(np.array([[0.3, -1.0]]))
        grads = tape_backward(ssum(f(x)), {"x": x})
        assert np.allclose(grads["x"][0], np.cos([0.3, -1.0]), atol=1e-8)


class TestFeatures:
    def test_forward_features_first_step_convention(self):
        y = np.array([1.0, -2.0])
        ypred = np.array([0.5, 0.5])
        x0 = np.array([0.1, 0.2])
        f1, f2, f3, f4 = forward_features(y, None, x0, None, None, ypred)
        assert np.array_equal(f1, np.zeros(2))
        assert np.allclose(f2, y - ypred)
        assert np.array_equal(f3, np.zeros(2))
        assert np.array_equal(f4, np.zeros(2))

    def test_forward_features_lagged_differences(self):
        f1, f2, f3, f4 = forward_features(
            y_t=np.array([2.0]), y_prev=np.array([1.5]),
            x_post_prev=np.array([3.0]), x_prior_prev=np.array([2.5]),
            x_post_prev2=np.array([1.0]), y_pred=np.array([1.8]),
        )
        assert f1[0] == pytest.approx(0.5)
        assert f2[0] == pytest.approx(0.2)
        assert f3[0] == pytest.approx(0.5)
        assert f4[0] == pytest.approx(2.0)

    def test_constant_observations_zero_difference(self):
        y = np.array([0.7, 0.7])
        f1, _, _, _ = forward_features(y, y, np.zeros(2), np.zeros(2), np.zeros(2), y)
        assert np.array_equal(f1, np.zeros(2))

    def test_backward_features(self):
        sm_next = np.array([1.0, 2.0])
        prior = np.array([0.5, 1.5])
        post = np.array([1.0, 2.0])
        feats = backward_features(sm_next, prior, post, None)
        assert np.allclose(feats.d1, [0.5, 0.5])
        assert np.array_equal(feats.d2, np.zeros(2))  # smoothing changed nothing
        assert np.array_equal(feats.d3, np.zeros(2))  # terminal boundary

    def test_backward_features_constant_smoothed(self):
        sm = np.array([2.0, -1.0])
        feats = backward_features(sm, np.zeros(2), np.ones(2), sm)
        assert np.array_equal(feats.d3, np.zeros(2))

    def test_backward_features_zero_update_difference(self):
        sm = np.array([3.0])
        feats = backward_features(sm, sm, np.array([0.0]), np.array([5.0]))
        assert np.array_equal(feats.d1, np.zeros(1))


class TestBackwardGainNet:
    def test_zero_parameters_give_zero_gain(self):
        store = ParamStore()
        net = BackwardGainNet(2, store)
        feats = BackwardFeatures(d1=np.ones(2), d2=np.ones(2), d3=np.ones(2))
        hidden = (np.zeros(4), np.zeros(4))
        G, new_hidden = backward_gain_net(net, feats, hidden, store)
        assert np.array_equal(G, np.zeros((2, 2)))
        assert new_hidden[0].shape == (4,)

    def test_gain_gradient_matches_finite_differences(self):
        store = ParamStore()
        net = BackwardGainNet(2, store)
        net.init_params(np.random.default_rng(0))
        # make the output layer nonzero so gradients flow everywhere
        net.out.init_params(np.random.default_rng(1))
        feats = np.array([[0.3, -0.2, 0.5, 0.1, -0.4, 0.2]])

        def value():
            from rtsnet.neural import no_grad
            with no_grad():
                h = (leaf(np.zeros((1, 4))), leaf(np.zeros((1, 4))))
                G, _ = net.step(leaf(feats), h, store.leaves())
                return float((G.value ** 2).sum())

        params = store.leaves()
        h = (leaf(np.zeros((1, 4))), leaf(np.zeros((1, 4))))
        G, _ = net.step(leaf(feats), h, params)
        grads = tape_backward(sumsq(G), params)
        rng = np.random.default_rng(2)
        worst = 0.0
        for name, arr in store.items():
            flat = arr.reshape(-1)
            for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + 1e-5
                up = value()
                flat[i] = old - 1e-5
                down = value()
                flat[i] = old
                fd = (up - down) / 2e-5
                ad = grads[name].reshape(-1)[i]
                worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), 1e-6))
        assert worst < 1e-4


class TestCountParams:
    def test_empty_store(self):
        assert ParamStore().total_count() == 0

    def test_single_dense_layer(self):
        store = ParamStore()
        DenseLayer("d", 2, 3).register(store)
        assert store.total_count() == 9  # 6 weights + 3 biases

    def test_full_3x3_model_in_published_regime(self):
        model = canonical_linear_model(3)
        net = RtsNetModel.from_ssmodel(model, seed=0)
        assert 20_000 <= count_params(net) <= 50_000


class TestGainInjection:
    @pytest.mark.parametrize("seed", range(3))
    def test_forward_equivalence_with_classical_gains(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 4))
        n = int(rng.integers(1, 4))
        F = rng.standard_normal((m, m))
        F *= 0.9 / max(np.abs(np.linalg.eigvals(F)).max(), 1e-9)
        model = linear_model(F, rng.standard_normal((n, m)), q2=0.4, r2=0.6)
        x0 = rng.standard_normal(m)
        traj = simulate_trajectory(model, x0, 20, seed=seed)
        steps = classic.kalman_filter(model, x0, None, traj.observations)
        net = small_net(model, seed=seed)
        fwd = rtsnet_forward(net, x0, traj.observations,
                             gain_override=lambda t: steps[t - 1].K)
        assert np.allclose(fwd.post_means(), np.stack([s.x_post for s in steps]),
                           atol=1e-8)
        assert np.allclose(fwd.prior_means(), np.stack([s.x_prior for s in steps]),
                           atol=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_smoother_equivalence_with_classical_gains(self, seed):
        rng = np.random.default_rng(10 + seed)
        m = int(rng.integers(1, 4))
        model = linear_model(
            0.8 * np.linalg.qr(rng.standard_normal((m, m)))[0],
            rng.standard_normal((m, m)), q2=0.5, r2=0.5,
        )
        x0 = rng.standard_normal(m)
        traj = simulate_trajectory(model, x0, 15, seed=seed)
        steps = classic.kalman_filter(model, x0, None, traj.observations)
        out = classic.rts_smooth(model, x0, None, traj.observations)
        net = small_net(model, seed=seed)
        sm = rtsnet_smooth(
            net, x0, traj.observations,
            gain_override=lambda t: steps[t - 1].K,
            bw_gain_override=lambda t: out.smoothed[t - 1].G,
        )
        assert np.allclose(sm.smoothed_means(), out.smoothed_means(), atol=1e-8)

    def test_zero_gain_is_pure_prediction(self):
        model = canonical_linear_model(2)
        traj = simulate_trajectory(model, np.array([1.0, -1.0]), 12, seed=0)
        net = small_net(model)
        fwd = rtsnet_forward(net, traj.states[0], traj.observations,
                             gain_override=lambda t: np.zeros((2, 2)))
        x = traj.states[0].copy()
        rollout = []
        for _ in range(12):
            x = model.f(x)
            rollout.append(x)
        assert np.array_equal(fwd.post_means(), np.stack(rollout))

    def test_zeroed_networks_are_pure_prediction(self):
        model = canonical_linear_model(2)
        traj = simulate_trajectory(model, np.array([0.5, 0.5]), 10, seed=1)
        net = small_net(model)
        net.zero_params()
        sm = rtsnet_smooth(net, traj.states[0], traj.observations)
        x = traj.states[0].copy()
        rollout = []
        for _ in range(10):
            x = model.f(x)
            rollout.append(x)
        assert np.array_equal(sm.smoothed_means(), np.stack(rollout))
        assert np.array_equal(sm.forward.post_means(), np.stack(rollout))

    def test_untrained_model_starts_at_pure_prediction(self):
        # zero-initialized output heads: no training yet means zero gains
        model = canonical_linear_model(2)
        traj = simulate_trajectory(model, np.zeros(2), 8, seed=2)
        net = small_net(model)
        fwd = rtsnet_forward(net, traj.states[0], traj.observations)
        assert np.allclose(fwd.post_means(), fwd.prior_means())


class TestInference:
    def test_batched_matches_loop(self):
        model = canonical_linear_model(2)
        net = small_net(model)
        net.params["fwd.head_out.W"][...] = 0.01  # nonzero gains
        net.params["bwd.out.W"][...] = 0.01
        data_states = np.zeros((3, 2))
        Ys = np.stack([
            simulate_trajectory(model, np.zeros(2), 7, seed=s).observations
            for s in range(3)
        ])
        batched = smooth_dataset(net, data_states, Ys)
        for i in range(3):
            single = rtsnet_smooth(net, data_states[i], Ys[i]).smoothed_means()
            assert np.allclose(batched[i], single, atol=1e-12)

    def test_divergence_error_names_step(self):
        model = canonical_linear_model(2)
        net = small_net(model)
        with pytest.raises(InferenceDivergenceError, match="t="):
            rtsnet_forward(net, np.zeros(2), np.ones((5, 2)),
                           gain_override=lambda t: np.full((2, 2), 1e200))

    def test_consumes_no_noise_statistics(self):
        # construction needs only f and h; no covariances anywhere
        model = canonical_linear_model(2)
        built = RtsNetModel(
            m=2, n=2, f=model.f, h=model.h,
            f_lift=hybrid.lift_linear(model.F), h_lift=hybrid.lift_linear(model.H),
            seed=0, head_width=16,
        )
        traj = simulate_trajectory(model, np.zeros(2), 5, seed=0)
        out = rtsnet_smooth(built, np.zeros(2), traj.observations)
        assert np.all(np.isfinite(out.smoothed_means()))

    @pytest.mark.slow
    def test_inference_cost_linear_in_t(self):
        model = canonical_linear_model(2)
        net = small_net(model)
        rng = np.random.default_rng(0)

        def run(T):
            Y = rng.standard_normal((1, T, 2))
            times = []
            for _ in range(3):
                tic = time.perf_counter()
                smooth_dataset(net, np.zeros((1, 2)), Y)
                times.append(time.perf_counter() - tic)
            return np.median(times)

        run(100)  # warm-up
        t1 = run(500)
        t2 = run(1000)
        assert 1.6 <= t2 / t1 <= 2.6
