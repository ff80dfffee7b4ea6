import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dbcritic.tiny_net import (
    AdamState,
    MlpParams,
    ShapeError,
    adam_step,
    backward,
    cosine_embed,
    critic_input_dim,
    forward,
    global_norm,
    grad_clip,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)


def fd_agrees(analytic, numeric, rel=1e-4, floor=1e-10):
    return abs(analytic - numeric) <= rel * max(abs(analytic), abs(numeric)) + floor


def scalar_loss(params, x, upstream):
    out, _ = mlp_forward(params, x)
    return float(np.sum(out[:, 0] * upstream))


class TestEmbedding:
    def test_examples(self):
        np.testing.assert_allclose(cosine_embed(0.0, 3), [1, 1, 1])
        np.testing.assert_allclose(cosine_embed(1.0, 2), [-1, 1], atol=1e-15)
        np.testing.assert_allclose(cosine_embed(0.5, 2), [0, -1], atol=1e-15)

    def test_batch_shape(self):
        assert cosine_embed(np.zeros((4, 3)), 5).shape == (4, 3, 5)

    @given(x=st.floats(0, 1), dim=st.integers(1, 64))
    def test_bounded(self, x, dim):
        e = cosine_embed(x, dim)
        assert np.all(np.abs(e) <= 1.0)

    def test_bad_dim(self):
        with pytest.raises(ValueError):
            cosine_embed(0.2, 0)


class TestForward:
    def test_zero_final_layer_outputs_zero(self):
        p = MlpParams.init([critic_input_dim(3, 2, 4), 8, 8, 1], 0, final_scale=0.0)
        out, _ = forward(p, np.array([0.3, 5.0]), 0.4, np.array([0.1, 0.9]), np.ones(3), np.ones(2), 4)
        np.testing.assert_array_equal(out, 0.0)

    def test_identity_on_z(self):
        # single linear layer reading only the z_t column
        d = critic_input_dim(0, 0, 2)
        w = np.zeros((d, 1))
        w[0, 0] = 1.0
        p = MlpParams([w], [np.zeros(1)])
        out, _ = forward(p, 3.0, 0.2, 0.7, np.zeros(0), np.zeros(0), 2)
        assert out[0] == 3.0

    def test_deterministic(self):
        p = MlpParams.init([critic_input_dim(2, 1, 8), 16, 16, 1], 7)
        args = (np.array([0.2, 1.3]), 0.6, np.array([0.3, 0.8]), np.array([1.0, -1.0]), np.array([0.5]), 8)
        a, _ = forward(p, *args)
        b, _ = forward(p, *args)
        assert np.array_equal(a, b)

    def test_shape_mismatch(self):
        p = MlpParams.init([5, 4, 1], 0)
        with pytest.raises(ShapeError):
            mlp_forward(p, np.zeros((3, 6)))
        with pytest.raises(ShapeError):
            MlpParams([np.zeros((3, 4)), np.zeros((5, 1))], [np.zeros(4), np.zeros(1)])


class TestBackward:
    def test_linear_example(self):
        p = MlpParams([np.array([[2.0]])], [np.array([0.0])])
        out, cache = mlp_forward(p, np.array([[3.0]]))
        grads, dx = mlp_backward(p, cache, np.array([1.0]))
        assert out[0, 0] == 6.0
        assert grads.weights[0][0, 0] == 3.0
        assert dx[0, 0] == 2.0

    def test_gradient_shapes(self):
        p = MlpParams.init([6, 5, 4, 1], 1)
        _, cache = mlp_forward(p, np.ones((7, 6)))
        grads, dx = mlp_backward(p, cache, np.ones(7))
        assert grads.sizes == p.sizes
        assert [a.shape for a in grads.arrays()] == [a.shape for a in p.arrays()]
        assert dx.shape == (7, 6)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_finite_difference_probes(self, activation):
        rng = np.random.default_rng(11)
        p = MlpParams.init([5, 16, 16, 1], rng, activation, final_scale=1.0)
        x = rng.normal(size=(9, 5))
        up = rng.normal(size=9)
        _, cache = mlp_forward(p, x)
        grads, _ = mlp_backward(p, cache, up)
        flat_p, flat_g = p.flat(), grads.flat()
        h = 1e-5
        for idx in rng.choice(flat_p.size, size=64, replace=False):
            q = p.copy()
            v = flat_p.copy()
            v[idx] += h
            q.load_flat(v)
            plus = scalar_loss(q, x, up)
            v[idx] -= 2 * h
            q.load_flat(v)
            minus = scalar_loss(q, x, up)
            assert fd_agrees(flat_g[idx], (plus - minus) / (2 * h)), idx

    def test_input_gradient_on_z(self):
        rng = np.random.default_rng(12)
        p = MlpParams.init([critic_input_dim(2, 1, 4), 16, 16, 1], rng, final_scale=1.0)
        z = rng.normal(size=6)
        tau = rng.uniform(size=6)
        s, a = rng.normal(size=2), rng.normal(size=1)
        up = rng.normal(size=6)
        _, cache = forward(p, z, 0.3, tau, s, a, 4)
        _, dz = backward(p, cache, up)
        h = 1e-5
        for i in range(6):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fp, _ = forward(p, zp, 0.3, tau, s, a, 4)
            fm, _ = forward(p, zm, 0.3, tau, s, a, 4)
            assert fd_agrees(dz[i], up[i] * (fp[i] - fm[i]) / (2 * h))


class TestAdam:
    def test_zero_grads_and_zero_lr(self):
        p = MlpParams.init([3, 4, 1], 0)
        before = p.flat()
        st_ = AdamState.for_params(p)
        adam_step(st_, p, p.zeros_like())
        np.testing.assert_array_equal(p.flat(), before)
        g = MlpParams.init([3, 4, 1], 1)
        st0 = AdamState.for_params(p, lr=0.0)
        adam_step(st0, p, g)
        np.testing.assert_array_equal(p.flat(), before)

    def test_quadratic_sweep(self):
        best = np.inf
        for lr in (3e-4, 1e-3, 3e-3, 1e-2):
            p = MlpParams([np.zeros((1, 1))], [np.zeros(1)], "identity")
            st_ = AdamState.for_params(p, lr=lr)
            for _ in range(2000):
                theta = p.weights[0][0, 0]
                g = p.zeros_like()
                g.weights[0][0, 0] = 2 * (theta - 5.0)
                adam_step(st_, p, g)
            best = min(best, abs(p.weights[0][0, 0] - 5.0))
        assert best < 1e-2

    def test_shape_mismatch(self):
        p = MlpParams.init([3, 4, 1], 0)
        with pytest.raises(ShapeError):
            adam_step(AdamState.for_params(p), p, MlpParams.init([3, 5, 1], 0))


class TestClip:
    def _vec(self, values):
        return MlpParams([np.array([values])], [np.zeros(len(values))], "identity")

    def test_examples(self):
        g = self._vec([0.3, 0.4])
        assert grad_clip(g, 1.0).weights[0].tolist() == [[0.3, 0.4]]
        c = grad_clip(self._vec([3.0, 4.0]), 1.0)
        np.testing.assert_allclose(c.weights[0], [[0.6, 0.8]])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0.01, 10))
    def test_norm_bound(self, values, max_norm):
        c = grad_clip(self._vec(values), max_norm)
        assert global_norm([c]) <= max_norm + 1e-12

    def test_list_is_clipped_jointly(self):
        a, b = self._vec([3.0]), self._vec([4.0])
        ca, cb = grad_clip([a, b], 1.0)
        assert ca.weights[0][0, 0] == pytest.approx(0.6)
        assert cb.weights[0][0, 0] == pytest.approx(0.8)


def test_checkpoint_round_trip(tmp_path):
    nets = {"online0": MlpParams.init([4, 8, 1], 0), "target0": MlpParams.init([4, 8, 1], 1, "tanh")}
    save_checkpoint(tmp_path / "ck", nets, {"step": 3})
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"step": 3}
    for k in nets:
        np.testing.assert_array_equal(loaded[k].flat(), nets[k].flat())
        assert loaded[k].activation == nets[k].activation
