import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from compatseg import autograd as ag
from compatseg.autograd import GraphError, Tensor


def check(f, point, **kw):
    r = ag.grad_check(f, point, **kw)
    assert r["passed"], (r["max_rel_err"], r["max_abs_err"])
    return r


def rng(seed=0):
    return np.random.default_rng(seed)


class TestOps:
    def test_elementwise_chain(self):
        r = rng()
        w = r.normal(size=(2, 3))
        check(lambda x: ag.reduce_sum(ag.mul(ag.sigmoid(x), Tensor(w))), r.normal(size=(2, 3)))

    def test_softmax(self):
        r = rng(1)
        w = r.normal(size=(2, 4, 3, 3))
        check(lambda x: ag.reduce_sum(ag.mul(ag.softmax(x, axis=1), Tensor(w))), r.normal(size=(2, 4, 3, 3)))

    def test_softmax_sums_to_one(self):
        y = ag.softmax(Tensor(rng(2).normal(size=(1, 5, 2, 2))), axis=1)
        assert np.allclose(y.data.sum(axis=1), 1.0)

    def test_log_and_leaky(self):
        check(lambda x: ag.reduce_sum(ag.log(ag.sigmoid(ag.leaky_relu(x)))), rng(3).uniform(0.1, 2, size=(3, 3)))

    def test_leaky_relu_negative_slope(self):
        x = Tensor(np.array([-2.0, 3.0]), requires_grad=True)
        ag.backward(ag.reduce_sum(ag.leaky_relu(x, 0.1)))
        assert x.grad.tolist() == [0.1, 1.0]

    def test_clip_max1_blocks_above_one(self):
        x = Tensor(np.array([0.5, 1.5]), requires_grad=True)
        y = ag.clip_max1(x)
        assert y.data.tolist() == [0.5, 1.0]
        ag.backward(ag.reduce_sum(y))
        assert x.grad.tolist() == [1.0, 0.0]

    def test_take_concat_reshape(self):
        def f(x):
            a = ag.take(x, (slice(None), slice(0, 2)))
            b = ag.take(x, (slice(None), slice(2, 3)))
            c = ag.concat([b, a, a], axis=1)
            return ag.reduce_sum(ag.mul(c, c))
        check(f, rng(4).normal(size=(2, 3, 2, 2)))
        check(lambda x: ag.reduce_sum(ag.sigmoid(ag.reshape(x, (3, 4)))), rng(5).normal(size=12))

    def test_to_rows(self):
        x = rng(6).normal(size=(2, 3, 2, 2))
        rows = ag.to_rows(Tensor(x)).data
        assert rows.shape == (2, 4, 3)
        assert rows[1, 3, 2] == x[1, 2, 1, 1]
        w = rng(7).normal(size=(2, 4, 3))
        check(lambda t: ag.reduce_sum(ag.mul(ag.to_rows(t), Tensor(w))), x)

    def test_pool_and_upsample(self):
        r = rng(8)
        w = r.normal(size=(1, 2, 4, 4))
        x = r.normal(size=(1, 2, 4, 4))
        check(lambda t: ag.reduce_sum(ag.mul(ag.upsample2(ag.max_pool2(t)), Tensor(w))), x)

    def test_pool_odd_size(self):
        with pytest.raises(ValueError):
            ag.max_pool2(Tensor(np.zeros((1, 1, 3, 3))))

    def test_kernel_op(self):
        fn = lambda a: ((a**3).sum(), 3 * a**2)  # noqa: E731
        check(lambda x: ag.kernel(x, fn), rng(9).normal(size=(2, 2)))

    def test_kernel_must_be_scalar(self):
        with pytest.raises(ValueError):
            ag.kernel(Tensor(np.ones(2)), lambda a: (a, np.ones_like(a)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ag.add(Tensor(np.ones(2)), Tensor(np.ones(3)))

    def test_non_finite_forward(self):
        with pytest.raises(FloatingPointError):
            ag.add(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))


class TestConv:
    def test_matches_direct_correlation(self):
        r = rng(10)
        x = r.normal(size=(2, 3, 5, 4))
        w = r.normal(size=(2, 3, 3, 3))
        b = r.normal(size=2)
        out = ag.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.zeros((2, 2, 5, 4))
        for i in range(5):
            for j in range(4):
                want[:, :, i, j] = np.einsum("nckl,ockl->no", pad[:, :, i : i + 3, j : j + 3], w) + b
        assert np.allclose(out, want, atol=1e-12)

    def test_gradients(self):
        r = rng(11)
        x = r.normal(size=(1, 2, 4, 4))
        w = r.normal(size=(3, 2, 3, 3))
        g = r.normal(size=(1, 3, 4, 4))
        check(lambda t: ag.reduce_sum(ag.mul(ag.conv2d(t, Tensor(w)), Tensor(g))), x)
        check(lambda t: ag.reduce_sum(ag.mul(ag.conv2d(Tensor(x), t), Tensor(g))), w)
        check(lambda t: ag.reduce_sum(ag.mul(ag.conv2d(Tensor(x), Tensor(w), t), Tensor(g))), r.normal(size=3))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ag.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ag.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))))


class TestTape:
    def test_non_scalar_backward(self):
        with pytest.raises(GraphError):
            ag.backward(ag.sigmoid(Tensor(np.ones(2), requires_grad=True)))

    def test_consumed_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        loss = ag.reduce_sum(ag.sigmoid(x))
        ag.backward(loss)
        with pytest.raises(GraphError):
            ag.backward(loss)

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ag.mul(x, x)
        ag.backward(ag.reduce_sum(ag.add(y, y)))
        assert x.grad.tolist() == [8.0]

    def test_constants_get_no_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.ones(2))
        ag.backward(ag.reduce_sum(ag.mul(x, c)))
        assert c.grad is None
        assert x.grad.tolist() == [1.0, 1.0]

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=6))
    def test_replay_is_deterministic(self, values):
        def run():
            x = Tensor(np.array(values), requires_grad=True)
            ag.backward(ag.reduce_sum(ag.mul(ag.sigmoid(x), ag.leaky_relu(x))))
            return x.grad
        assert np.array_equal(run(), run())


class TestGradCheck:
    def test_detects_wrong_gradient(self):
        bad = lambda a: ((a**2).sum(), a)  # noqa: E731
        r = ag.grad_check(lambda x: ag.kernel(x, bad), np.array([1.0, 2.0]))
        assert not r["passed"]

    def test_coords_subset(self):
        bad = lambda a: ((a**2).sum(), np.array([2 * a[0], 0.0]))  # noqa: E731
        r = ag.grad_check(lambda x: ag.kernel(x, bad), np.array([1.0, 2.0]), coords=np.array([0]))
        assert r["passed"]

    def test_exclude_mask(self):
        r = ag.grad_check(lambda x: ag.reduce_sum(ag.clip_max1(x)), np.array([0.5, 1.0]),
                          exclude=np.array([False, True]))
        assert r["passed"]


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        params = {"a.w": rng(12).normal(size=(2, 3, 3, 3)), "a.b": np.array([0.5, -1.0])}
        path = tmp_path / "p.bin"
        ag.save_params(path, params)
        back = ag.load_params(path)
        assert list(back) == list(params)
        for k in params:
            assert np.array_equal(back[k], params[k])

    def test_bytes_stable(self, tmp_path):
        params = {"w": np.arange(6.0).reshape(2, 3)}
        ag.save_params(tmp_path / "a", params)
        ag.save_params(tmp_path / "b", params)
        data = (tmp_path / "a").read_bytes()
        assert data == (tmp_path / "b").read_bytes()
        assert data[:4] == b"CSGP" and data[4] == 1

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"XXXX\x01")
        with pytest.raises(ValueError):
            ag.load_params(tmp_path / "x")

    def test_bad_version(self, tmp_path):
        ag.save_params(tmp_path / "p", {"w": np.ones(1)})
        data = bytearray((tmp_path / "p").read_bytes())
        data[4] = 9
        (tmp_path / "p").write_bytes(bytes(data))
        with pytest.raises(ValueError):
            ag.load_params(tmp_path / "p")


def test_grad_check_noise_floor():
    # a large offset puts rounding noise of order eps * 1e6 / h on the difference quotient
    def f(x):
        return ag.kernel(x, lambda a: (1e6 + 1e-9 * a.sum(), np.full_like(a, 1e-9)))

    r = ag.grad_check(f, np.array([0.1, 0.2, 0.3]))
    assert r["passed"]

    def wrong(x):
        return ag.kernel(x, lambda a: (np.sum(a**2), a))  # gradient off by a factor of 2

    assert not ag.grad_check(wrong, np.ones(3))["passed"]
