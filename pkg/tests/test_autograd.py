import numpy as np
import pytest
from numpy.testing import assert_allclose

from src import autograd as ag
from src.autograd import Tape, Tensor
from src.errors import InvalidRate, NonFiniteValue, NonScalarLoss, OddSpatialDims, ShapeMismatch

F64 = np.float64


def _t(data, grad=True):
    return Tensor(np.asarray(data, dtype=F64), requires_grad=grad, dtype=F64)


def _offset(shape):
    return np.random.default_rng(99).normal(size=shape)


def check_gradients(fn, inputs: dict, rtol=1e-4, h=1e-6):
    """
    Compara backward com diferenças centrais em float64.
    A loss é mean((fn(inputs) + W)²) com W fixo, toda montada com ops do engine.
    """
    tensors = {k: _t(v) for k, v in inputs.items()}
    tape = Tape()
    for k, t in tensors.items():
        tape.watch(k, t)
    with tape:
        out = fn(tensors)
        offset = _offset(out.shape)
        loss = ag.mean_all(ag.square(ag.add(out, Tensor(offset, dtype=F64))))
    grads = ag.backward(loss, tape)

    def value(arrays):
        result = fn({k: _t(v, grad=False) for k, v in arrays.items()})
        return float(np.mean((result.data + offset) ** 2))

    for name, array in inputs.items():
        numeric = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            plus = {k: v.copy() for k, v in inputs.items()}
            minus = {k: v.copy() for k, v in inputs.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            numeric[idx] = (value(plus) - value(minus)) / (2 * h)
        assert_allclose(grads[name], numeric, rtol=rtol, atol=1e-8, err_msg=name)


class TestGradients:
    def test_conv2d_same(self, rng):
        check_gradients(
            lambda t: ag.conv2d(t["x"], t["k"], t["b"], "same"),
            {"x": rng.normal(size=(2, 2, 5, 4)), "k": rng.normal(size=(3, 2, 3, 3)),
             "b": rng.normal(size=(1, 3, 1, 1))},
        )

    def test_conv2d_valid(self, rng):
        check_gradients(
            lambda t: ag.conv2d(t["x"], t["k"], t["b"], "valid"),
            {"x": rng.normal(size=(1, 2, 5, 5)), "k": rng.normal(size=(2, 2, 3, 3)),
             "b": rng.normal(size=(1, 2, 1, 1))},
        )

    def test_conv2d_1x1(self, rng):
        check_gradients(
            lambda t: ag.conv2d(t["x"], t["k"], t["b"]),
            {"x": rng.normal(size=(1, 3, 4, 4)), "k": rng.normal(size=(2, 3, 1, 1)),
             "b": rng.normal(size=(1, 2, 1, 1))},
        )

    def test_relu_away_from_kink(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        x = np.where(np.abs(x) < 0.1, 0.5, x)
        check_gradients(lambda t: ag.relu(t["x"]), {"x": x})

    def test_softplus(self, rng):
        check_gradients(lambda t: ag.softplus(t["x"]), {"x": 3 * rng.normal(size=(1, 1, 3, 3))})

    def test_softplus_sq(self, rng):
        x = np.concatenate([3 * rng.normal(size=6), [-40.0, 31.5, 45.0]]).reshape(1, 1, 3, 3)
        check_gradients(lambda t: ag.softplus_sq(t["x"]), {"x": x})

    def test_square(self, rng):
        check_gradients(lambda t: ag.square(t["x"]), {"x": rng.normal(size=(1, 2, 3, 3))})

    def test_add(self, rng):
        check_gradients(lambda t: ag.add(t["a"], t["b"]),
                        {"a": rng.normal(size=(1, 2, 3, 3)), "b": rng.normal(size=(1, 2, 3, 3))})

    def test_concat_channels(self, rng):
        check_gradients(lambda t: ag.concat_channels(t["a"], t["b"]),
                        {"a": rng.normal(size=(1, 1, 2, 2)), "b": rng.normal(size=(1, 3, 2, 2))})

    def test_max_pool2_distinct_values(self, rng):
        x = rng.permutation(64).reshape(1, 1, 8, 8) / 8.0
        check_gradients(lambda t: ag.max_pool2(t["x"]), {"x": x})

    def test_upsample_nn2(self, rng):
        check_gradients(lambda t: ag.upsample_nn2(t["x"]), {"x": rng.normal(size=(1, 2, 3, 2))})

    def test_dropout_with_fixed_mask(self, rng):
        check_gradients(
            lambda t: ag.dropout(t["x"], 0.3, np.random.default_rng(5)),
            {"x": rng.normal(size=(1, 2, 4, 4))},
        )

    def test_mean_all(self, rng):
        check_gradients(lambda t: ag.mean_all(t["x"]), {"x": rng.normal(size=(1, 2, 3, 3))})

    def test_kl_loss(self, rng):
        target = rng.normal(size=(1, 1, 3, 3))
        check_gradients(
            lambda t: ag.kl_loss(t["mu"], t["s2"], target),
            {"mu": rng.normal(size=(1, 1, 3, 3)), "s2": rng.uniform(0.5, 2.0, size=(1, 1, 3, 3))},
        )

    def test_composite_head_and_loss(self, rng):
        target = rng.normal(size=(1, 1, 4, 4))

        def head(t):
            feats = ag.relu(ag.conv2d(t["x"], t["k1"], t["b1"]))
            mu = ag.conv2d(feats, t["km"], t["bm"])
            s2 = ag.square(ag.softplus(ag.conv2d(feats, t["ks"], t["bs"])))
            return ag.kl_loss(mu, s2, target)

        check_gradients(head, {
            "x": rng.normal(size=(1, 1, 4, 4)),
            "k1": rng.normal(size=(3, 1, 3, 3)), "b1": np.full((1, 3, 1, 1), 0.3),
            "km": rng.normal(size=(1, 3, 1, 1)), "bm": np.zeros((1, 1, 1, 1)),
            "ks": 0.1 * rng.normal(size=(1, 3, 1, 1)), "bs": np.full((1, 1, 1, 1), 0.54),
        })


class TestTapeBehaviour:
    def test_unused_parameter_gets_zeros(self):
        x, unused = _t(np.ones((1, 1, 2, 2))), _t(np.ones((1, 1, 2, 2)))
        tape = Tape()
        tape.watch("x", x)
        tape.watch("unused", unused)
        with tape:
            loss = ag.mean_all(ag.square(x))
        grads = ag.backward(loss, tape)
        assert np.all(grads["unused"] == 0)
        assert_allclose(grads["x"], 0.5)

    def test_no_tape_records_nothing(self):
        tape = Tape()
        x = _t(np.ones((1, 1, 2, 2)))
        ag.square(x)
        assert tape.nodes == []

    def test_fanout_accumulates(self):
        x = _t(np.full((1, 1, 1, 1), 3.0))
        tape = Tape()
        tape.watch("x", x)
        with tape:
            loss = ag.mean_all(ag.add(x, x))
        assert ag.backward(loss, tape)["x"].item() == 2.0

    def test_backward_requires_scalar(self):
        x = _t(np.ones((1, 1, 2, 2)))
        tape = Tape()
        with tape:
            y = ag.square(x)
        with pytest.raises(NonScalarLoss):
            ag.backward(y, tape)


class TestOpContracts:
    def test_rank_four_required(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones((2, 2)))

    def test_max_pool_odd_dims(self):
        with pytest.raises(OddSpatialDims):
            ag.max_pool2(Tensor(np.ones((1, 1, 3, 4))))

    def test_max_pool_tie_goes_to_first(self):
        x = _t(np.ones((1, 1, 2, 2)))
        tape = Tape()
        tape.watch("x", x)
        with tape:
            loss = ag.mean_all(ag.max_pool2(x))
        g = ag.backward(loss, tape)["x"][0, 0]
        assert_allclose(g, [[1.0, 0.0], [0.0, 0.0]])

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ag.add(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 3))))

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_invalid_dropout_rate(self, rate):
        with pytest.raises(InvalidRate):
            ag.dropout(Tensor(np.ones((1, 1, 2, 2))), rate, np.random.default_rng(0))

    def test_dropout_rate_zero_is_identity(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        assert ag.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_keeps_expectation(self):
        x = Tensor(np.ones((1, 1, 200, 200)))
        out = ag.dropout(x, 0.2, np.random.default_rng(1))
        kept = out.data[out.data > 0]
        assert_allclose(kept, 1.25, rtol=1e-6)
        assert out.data.mean() == pytest.approx(1.0, abs=0.02)

    def test_conv_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 4, 4)).astype(np.float32))
        k = np.zeros((1, 1, 3, 3), np.float32)
        k[0, 0, 1, 1] = 1.0
        out = ag.conv2d(x, Tensor(k), Tensor(np.zeros((1, 1, 1, 1), np.float32)))
        assert_allclose(out.data, x.data)

    def test_upsample_copies_blocks(self):
        x = Tensor(np.array([[[[1.0, 2.0]]]]))
        assert_allclose(ag.upsample_nn2(x).data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_debug_mode_names_op(self):
        ag.set_debug(True)
        try:
            with pytest.raises(NonFiniteValue, match="square"):
                ag.square(Tensor(np.full((1, 1, 1, 1), 1e30, np.float32)))
        finally:
            ag.set_debug(False)

    def test_debug_mode_names_inputs(self):
        ag.set_debug(True)
        try:
            with pytest.raises(NonFiniteValue, match="head_sigma2.bias"):
                ag.square(Tensor(np.full((1, 1, 1, 1), 1e30, np.float32), name="head_sigma2.bias"))
        finally:
            ag.set_debug(False)


class TestSoftplusSq:
    def test_matches_two_step_composition(self, rng):
        x = rng.normal(0.0, 4.0, size=(1, 2, 4, 4))
        fused = ag.softplus_sq(_t(x, grad=False)).data
        assert_allclose(fused, ag.square(ag.softplus(_t(x, grad=False))).data, rtol=1e-12)

    def test_float32_never_underflows_to_zero(self):
        x = Tensor(np.array([-60.0, -200.0, -1e4, 0.0], np.float32).reshape(1, 1, 2, 2))
        out = ag.softplus_sq(x).data
        assert out.dtype == np.float32
        assert np.all(out > 0)
        assert out[0, 0, 1, 0] == np.finfo(np.float32).tiny

    def test_linear_asymptote(self):
        x = Tensor(np.array([31.0, 100.0], np.float32).reshape(1, 1, 1, 2))
        assert_allclose(ag.softplus_sq(x).data[0, 0, 0], [961.0, 10000.0])


class TestForwardOracles:
    def test_conv2d_against_loops(self, rng):
        x = rng.normal(size=(2, 2, 5, 4))
        k = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(1, 2, 1, 1))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 2, 5, 4))
        for n in range(2):
            for o in range(2):
                for i in range(5):
                    for j in range(4):
                        acc = b[0, o, 0, 0]
                        for c in range(2):
                            for di in range(3):
                                for dj in range(3):
                                    acc += xp[n, c, i + di, j + dj] * k[o, c, di, dj]
                        expected[n, o, i, j] = acc
        out = ag.conv2d(_t(x, False), _t(k, False), _t(b, False), "same").data
        assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_max_pool2_against_loops(self, rng):
        x = rng.normal(size=(1, 2, 8, 8))
        expected = np.zeros((1, 2, 4, 4))
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    expected[0, c, i, j] = max(x[0, c, 2 * i + di, 2 * j + dj]
                                               for di in range(2) for dj in range(2))
        assert_allclose(ag.max_pool2(_t(x, False)).data, expected)

    def test_concat_three_and_five_channels(self):
        a = _t(np.zeros((2, 3, 4, 4)), False)
        b = _t(np.ones((2, 5, 4, 4)), False)
        out = ag.concat_channels(a, b).data
        assert out.shape == (2, 8, 4, 4)
        assert np.all(out[:, :3] == 0) and np.all(out[:, 3:] == 1)

    def test_mean_of_ones(self):
        assert ag.mean_all(_t(np.ones((2, 3, 4, 4)), False)).item() == 1.0

    def test_dropout_zero_fraction(self):
        out = ag.dropout(Tensor(np.ones((1, 1, 1000, 1000), np.float32)), 0.2, np.random.default_rng(3))
        assert np.mean(out.data == 0) == pytest.approx(0.2, abs=0.002)
