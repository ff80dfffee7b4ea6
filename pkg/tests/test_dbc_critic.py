import numpy as np
import pytest

from dbcritic.bridge_schedule import BridgeParams, ScheduleKind, ThetaSchedule, TimeGrid
from dbcritic.dbc_critic import (
    ConfigError,
    CriticEnsemble,
    DbcConfig,
    FlowBaselineModel,
    Transition,
    anchor_loss_term,
    build_targets,
    fit_targets,
    fm_sample,
    fm_train_step,
    generate,
    q_value,
    quantile_loss_term,
    sample_returns,
    sample_returns_grad,
    soft_update,
    train_step,
)
from dbcritic.quantile_core import sample_quantile
from dbcritic.tiny_net import MlpParams

SCHEDULES = [ThetaSchedule(k) for k in ScheduleKind]


def constant_net(value, in_dim, hidden=(8,)):
    """An MLP whose output ignores its input."""
    net = MlpParams.init([in_dim, *hidden, 1], 0)
    for w, b in zip(net.weights, net.biases):
        w[...] = 0.0
        b[...] = 0.0
    net.biases[-1][...] = value
    return net


def small_config(**kw):
    base = dict(k_tgt=8, k_onl=4, hidden=(16, 16), embed_dim=4, flow_steps=3)
    base.update(kw)
    return DbcConfig(**base)


def transition(ds=2, da=1, r=1.0, m=1.0):
    return Transition(np.ones(ds), np.zeros(da), r, np.full(ds, 0.5), np.ones(da), m)


def set_constant(ensemble, value, which="both"):
    dim = ensemble.online[0].sizes[0]
    hidden = tuple(ensemble.online[0].sizes[1:-1])
    nets = [constant_net(value, dim, hidden) for _ in ensemble.online]
    if which in ("both", "online"):
        ensemble.online = [n.copy() for n in nets]
    if which in ("both", "target"):
        ensemble.target = [n.copy() for n in nets]


class TestConfig:
    def test_round_trip(self):
        cfg = small_config(bridge=BridgeParams(ThetaSchedule(ScheduleKind.COSINE)), drop_count=3)
        assert DbcConfig.from_json(cfg.to_json()) == cfg

    @pytest.mark.parametrize(
        "kw",
        [
            dict(k_tgt=2, k_onl=4),
            dict(drop_count=16, k_tgt=8, n_heads=2),
            dict(flow_steps=0),
            dict(gamma=1.0),
            dict(tau_tgt=0.0),
            dict(anchor_weight=-1.0),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            small_config(**kw)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            DbcConfig.from_dict({"gama": 0.9})


class TestTransition:
    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError):
            transition(m=0.5)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            Transition([np.nan], [0.0], 0.0, [0.0], [0.0])

    def test_stack(self):
        batch = Transition.stack([transition(r=1.0), transition(r=2.0, m=0.0)])
        assert batch.batch_size == 2
        np.testing.assert_array_equal(batch.m, [1.0, 0.0])


class TestSampling:
    @pytest.mark.parametrize("sched", SCHEDULES, ids=lambda s: s.kind.value)
    @pytest.mark.parametrize("steps", [1, 2, 5, 10, 100])
    def test_endpoint_consistency(self, sched, steps):
        cfg = small_config(flow_steps=steps, bridge=BridgeParams(sched))
        rng = np.random.default_rng(steps)
        taus = rng.uniform(0.01, 0.99, 7)
        for z_end in rng.normal(0, 10, 20):
            net = constant_net(z_end, 2 + 1 + 1 + 2 * cfg.embed_dim)
            (out,) = sample_returns([net], np.ones(2), np.zeros(1), taus, cfg)
            assert np.max(np.abs(out.atoms - z_end)) <= 1e-12

    def test_examples(self):
        cfg = small_config(flow_steps=5)
        net = constant_net(5.0, 1 + 2 * cfg.embed_dim)
        (out,) = sample_returns([net], np.zeros(0), np.zeros(0), [0.3], cfg)
        assert out.atoms[0] == pytest.approx(5.0, abs=1e-12)
        one = sample_returns([net], np.zeros(0), np.zeros(0), [0.3], small_config(flow_steps=1))
        seven = sample_returns([net], np.zeros(0), np.zeros(0), [0.3], small_config(flow_steps=7))
        assert one[0].atoms[0] == pytest.approx(seven[0].atoms[0], abs=1e-12)

    def test_custom_grid(self):
        cfg = small_config()
        net = constant_net(-1.5, 1 + 2 * cfg.embed_dim)
        grid = TimeGrid((0.0, 0.1, 0.7, 1.0))
        (out,) = sample_returns([net], np.zeros(0), np.zeros(0), [0.2, 0.8], cfg, grid)
        np.testing.assert_allclose(out.atoms, -1.5, atol=1e-12)

    def test_identity_network_stays_at_start(self):
        # f(z) = z at t = 0 gives no motion: z_start is a fixed point
        cfg = small_config(flow_steps=4)
        net = MlpParams([np.eye(1 + 2 * cfg.embed_dim)[:, :1]], [np.zeros(1)], "identity")
        (out,) = sample_returns([net], np.zeros(0), np.zeros(0), [0.25, 0.5], cfg)
        np.testing.assert_allclose(out.atoms, [0.25, 0.5], atol=1e-15)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_backprop_through_sampler(self, activation):
        cfg = small_config(flow_steps=5, activation=activation)
        ens = CriticEnsemble.create(cfg, 2, 1, seed=3)
        net = ens.online[0]
        # a larger output layer makes the sampler's path depend on z
        net.weights[-1] *= 10.0
        s, a = np.array([0.3, -0.2]), np.array([0.7])
        taus = np.linspace(0.05, 0.95, 9)
        _, grads = sample_returns_grad(net, s, a, taus, cfg)

        def objective():
            return generate([net], s, a, taus, cfg)[0].mean()

        flat = net.flat()
        g_flat = grads.flat()
        rng = np.random.default_rng(0)
        h = 1e-6
        for idx in rng.choice(flat.size, 64, replace=False):
            up, down = flat.copy(), flat.copy()
            up[idx] += h
            down[idx] -= h
            net.load_flat(up)
            f_up = objective()
            net.load_flat(down)
            f_down = objective()
            net.load_flat(flat)
            fd = (f_up - f_down) / (2 * h)
            assert abs(g_flat[idx] - fd) <= 1e-3 * max(abs(fd), abs(g_flat[idx])) + 1e-8


class TestTargets:
    def test_terminal(self):
        ens = CriticEnsemble.create(small_config(), 2, 1)
        y = build_targets(ens, transition(r=2.0, m=0.0), 0)
        np.testing.assert_array_equal(y.atoms, 2.0)

    def test_bootstrap_value(self):
        ens = CriticEnsemble.create(small_config(gamma=0.99), 2, 1)
        set_constant(ens, 2.0)
        y = build_targets(ens, transition(r=1.0), 0)
        np.testing.assert_allclose(y.atoms, 2.98, atol=1e-12)

    def test_entropy_term(self):
        ens = CriticEnsemble.create(small_config(gamma=0.5, entropy_alpha=0.2), 2, 1)
        set_constant(ens, 2.0)
        tr = Transition(np.ones(2), np.zeros(1), 0.0, np.ones(2), np.ones(1), 1.0, log_pi_next=-1.0)
        np.testing.assert_allclose(build_targets(ens, tr, 0).atoms, 0.5 * (2.0 + 0.2), atol=1e-12)

    def test_drop_count(self):
        ens = CriticEnsemble.create(small_config(k_tgt=4, k_onl=2, n_heads=2, drop_count=2), 2, 1)
        assert len(build_targets(ens, transition(), 0)) == 6

    def test_droptop_is_conservative(self):
        base = CriticEnsemble.create(small_config(n_heads=3, k_tgt=16), 2, 1, seed=1)
        dropped = base.copy()
        dropped.config = small_config(n_heads=3, k_tgt=16, drop_count=5)
        full = build_targets(base, transition(), 42)
        cut = build_targets(dropped, transition(), 42)
        assert cut.mean() <= full.mean()
        np.testing.assert_array_equal(cut.atoms, full.atoms[:-5])

    def test_stop_gradient(self):
        ens = CriticEnsemble.create(small_config(), 2, 1, seed=2)
        before = build_targets(ens, transition(), 9)
        for net in ens.online:
            for arr in net.arrays():
                arr += 1.0
        after = build_targets(ens, transition(), 9)
        np.testing.assert_array_equal(before.atoms, after.atoms)


class TestLossTerms:
    def test_quantile_examples(self):
        loss, _ = quantile_loss_term(np.full(3, 1.5), np.full(4, 1.5), np.array([0.1, 0.5, 0.9]), 1.0)
        assert loss == 0.0
        loss, _ = quantile_loss_term(np.array([1.0]), np.array([0.0, 2.0]), np.array([0.5]), 0.0)
        assert loss == pytest.approx(0.5)

    @pytest.mark.parametrize("kappa", [0.0, 0.5, 1.0])
    def test_quantile_grad(self, kappa):
        rng = np.random.default_rng(4)
        pred = rng.normal(size=(3, 5))
        targets = rng.normal(size=(3, 11))
        taus = rng.uniform(0.05, 0.95, size=(3, 5))
        _, grad = quantile_loss_term(pred, targets, taus, kappa)
        h = 1e-7
        for b in range(3):
            for i in range(5):
                up, down = pred.copy(), pred.copy()
                up[b, i] += h
                down[b, i] -= h
                fd = (
                    quantile_loss_term(up, targets, taus, kappa)[0][b]
                    - quantile_loss_term(down, targets, taus, kappa)[0][b]
                ) / (2 * h)
                assert grad[b, i] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_anchor_examples(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        loss, _, anchors = anchor_loss_term(np.array([2.5]), y, np.array([0.5]), 1.0)
        assert anchors[0] == 2.0
        assert loss == pytest.approx(0.125)
        taus = np.array([0.1, 0.6, 0.95])
        loss, grad, _ = anchor_loss_term(sample_quantile(y, taus), y, taus, 1.0)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_zero_anchor_weight_reduces_to_quantile_term(self):
        ens = CriticEnsemble.create(small_config(anchor_weight=0.0), 2, 1)
        rep = fit_targets(ens, np.ones((1, 2)), np.zeros((1, 1)), np.arange(8.0)[None], 0)
        assert rep.total == rep.quantile_loss
        assert rep.anchor_loss > 0


class TestTraining:
    def test_determinism(self):
        a = CriticEnsemble.create(small_config(), 2, 1, seed=5)
        b = a.copy()
        tr = Transition.stack([transition(r=1.0), transition(r=0.0, m=0.0)])
        ra = [train_step(a, tr, i) for i in range(5)]
        rb = [train_step(b, tr, i) for i in range(5)]
        assert ra == rb
        for na, nb in zip(a.online + a.target, b.online + b.target):
            np.testing.assert_array_equal(na.flat(), nb.flat())

    def test_degenerate_target_regression(self):
        cfg = small_config(anchor_weight=0.0, k_tgt=1, k_onl=1, kappa=0.0, lr=1e-2, n_heads=1)
        ens = CriticEnsemble.create(cfg, 2, 1, seed=0)
        c = 3.0
        s, a, y = np.ones((1, 2)), np.zeros((1, 1)), np.array([[c]])
        losses = [fit_targets(ens, s, a, y, i).quantile_loss for i in range(100)]
        assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])
        # the t = 0 prediction at the median approaches c
        (out,) = sample_returns(ens.online, s[0], a[0], [0.5], cfg)
        assert abs(out.atoms[0] - c) < 0.5 * c

    def test_train_step_moves_targets_by_polyak_rate(self):
        cfg = small_config(tau_tgt=0.5)
        ens = CriticEnsemble.create(cfg, 2, 1, seed=1)
        old_target = [t.copy() for t in ens.target]
        train_step(ens, transition(), 0)
        for on, tg, old in zip(ens.online, ens.target, old_target):
            np.testing.assert_allclose(tg.flat(), 0.5 * on.flat() + 0.5 * old.flat(), atol=1e-15)


class TestSoftUpdate:
    def test_examples(self):
        ens = CriticEnsemble.create(small_config(tau_tgt=0.005), 2, 1)
        for on, tg in zip(ens.online, ens.target):
            for p, q in zip(on.arrays(), tg.arrays()):
                p[...] = 1.0
                q[...] = 0.0
        soft_update(ens)
        for tg in ens.target:
            np.testing.assert_allclose(tg.flat(), 0.005)
        soft_update(ens, 1.0)
        for tg in ens.target:
            np.testing.assert_array_equal(tg.flat(), 1.0)
        soft_update(ens)
        for tg in ens.target:
            np.testing.assert_array_equal(tg.flat(), 1.0)

    def test_rate_bounds(self):
        ens = CriticEnsemble.create(small_config(), 2, 1)
        with pytest.raises(ValueError):
            soft_update(ens, 0.0)


class TestInference:
    def test_q_value_constant(self):
        ens = CriticEnsemble.create(small_config(), 2, 1)
        set_constant(ens, 5.0)
        assert q_value(ens, np.ones(2), np.zeros(1), 0) == pytest.approx(5.0, abs=1e-12)

    def test_q_value_is_atom_mean(self):
        ens = CriticEnsemble.create(small_config(n_heads=2), 2, 1)
        set_constant(ens, 1.0)
        ens.online[1].biases[-1][...] = 3.0
        assert q_value(ens, np.ones(2), np.zeros(1), 0) == pytest.approx(2.0, abs=1e-12)

    def test_checkpoint_round_trip(self, tmp_path):
        ens = CriticEnsemble.create(small_config(), 2, 1, seed=8)
        train_step(ens, transition(), 0)
        ens.save(tmp_path / "critic")
        back = CriticEnsemble.load(tmp_path / "critic")
        assert back.config == ens.config
        for a, b in zip(ens.online + ens.target, back.online + back.target):
            np.testing.assert_array_equal(a.flat(), b.flat())


class TestFlowBaseline:
    def test_zero_velocity_is_identity_flow(self):
        model = FlowBaselineModel.create(seed=0)
        for w, b in zip(model.params.weights, model.params.biases):
            w[...] = 0.0
            b[...] = 0.0
        out = fm_sample(model, 10_000, 1)
        assert np.std(out.atoms) == pytest.approx(1.0, rel=0.05)

    def test_degenerate_target_concentrates(self):
        model = FlowBaselineModel.create(hidden=(32, 32), seed=0, lr=3e-3, steps=40)
        rng = np.random.default_rng(0)
        for i in range(1500):
            fm_train_step(model, np.full(128, 3.0), rng)
        out = fm_sample(model, 2000, 1)
        assert abs(out.mean() - 3.0) < 0.1
        assert np.std(out.atoms) < 0.1

    def test_empty_targets(self):
        model = FlowBaselineModel.create(seed=0)
        with pytest.raises(ValueError):
            fm_train_step(model, [], 0)
