import math
import struct

import numpy as np
import pytest

from twostage_fsl import tensor as T
from twostage_fsl.errors import ContractError, ConfigError, DataError, NumericError
from twostage_fsl.tensor import Tape, Tensor

from oracles import central_difference, max_rel_error

RNG = np.random.default_rng(1234)


def gradcheck(fn, *arrays, h=1e-5):
    """Compare taped gradients of ``sum(fn(...) * W)`` with central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.no_grad():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    W = RNG.uniform(-1, 1, size=out_shape)

    def scalar(*arrs):
        with T.no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * W))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = T.sum(T.mul(fn(*leaves), Tensor(W)))
    T.backward(tape, loss, leaves)
    numeric = central_difference(scalar, arrays, h=h)
    return max(max_rel_error(l.grad, n) for l, n in zip(leaves, numeric))


def u(*shape):
    return RNG.uniform(-2, 2, size=shape)


def away_from_zero(*shape):
    x = u(*shape)
    return np.where(np.abs(x) < 0.1, 0.5, x)


ELEMENTWISE = {
    "add": (lambda a, b: a + b, 2),
    "sub": (lambda a, b: a - b, 2),
    "mul": (lambda a, b: a * b, 2),
    "neg": (lambda a: -a, 1),
    "square": (T.square, 1),
    "softplus": (T.softplus, 1),
    "exp": (T.exp, 1),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name):
    fn, arity = ELEMENTWISE[name]
    assert gradcheck(fn, *[u(3, 4) for _ in range(arity)]) <= 1e-4


def test_div_gradient():
    assert gradcheck(T.div, u(3, 4), away_from_zero(3, 4) + 3.0) <= 1e-4


def test_relu_gradient_away_from_kink():
    assert gradcheck(T.relu, away_from_zero(4, 5)) <= 1e-4


def test_log_and_sqrt_gradients_on_positive_inputs():
    x = RNG.uniform(0.2, 2, size=(3, 4))
    assert gradcheck(T.log, x) <= 1e-4
    assert gradcheck(T.sqrt, x) <= 1e-4


def test_broadcast_forms():
    assert gradcheck(lambda a, b: a + b, u(5, 3), u(3)) <= 1e-4
    assert gradcheck(lambda a, b: a * b, u(5, 3), u()) <= 1e-4
    assert gradcheck(lambda a, b: a / b, u(5, 3), RNG.uniform(1, 2, size=(3,))) <= 1e-4


def test_reductions_and_shapes():
    assert gradcheck(lambda a: T.sum(a), u(3, 4)) <= 1e-4
    assert gradcheck(lambda a: T.sum(a, axis=1), u(3, 4)) <= 1e-4
    assert gradcheck(lambda a: T.mean(a, axis=0), u(3, 4)) <= 1e-4
    assert gradcheck(lambda a: T.reshape(a, (4, 3)), u(3, 4)) <= 1e-4
    assert gradcheck(T.transpose, u(3, 4)) <= 1e-4
    assert gradcheck(lambda a, b: T.concat([a, b], axis=0), u(2, 3), u(4, 3)) <= 1e-4
    assert gradcheck(lambda a: T.rows(a, np.array([2, 0, 2])), u(3, 4)) <= 1e-4
    assert gradcheck(lambda a: T.pick(a, np.array([1, 3, 0])), u(3, 4)) <= 1e-4


def test_matmul_sqdist_log_softmax_gradients():
    assert gradcheck(T.matmul, u(3, 4), u(4, 2)) <= 1e-4
    assert gradcheck(T.sqdist, u(5, 3), u(4, 3)) <= 1e-4
    x = u(5, 3)
    assert gradcheck(lambda a: T.sqdist(a, a), x) <= 1e-4
    assert gradcheck(T.log_softmax, u(4, 6)) <= 1e-4


def test_conv_pool_gradients():
    assert gradcheck(T.conv2d_3x3_same, u(2, 5, 4, 2), u(3, 3, 2, 3)) <= 1e-4
    assert gradcheck(T.conv2d_1x1, u(2, 3, 3, 4), u(4, 2)) <= 1e-4
    # odd sizes: the trailing row and column are dropped
    assert gradcheck(T.maxpool2x2, u(2, 5, 7, 3)) <= 1e-4


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(train):
    C = 3
    rm, rv = RNG.normal(size=C), RNG.uniform(0.5, 2, size=C)

    def fn(x, g, b):
        return T.batchnorm(x, g, b, rm.copy(), rv.copy(), train)

    assert gradcheck(fn, u(4, 2, 2, C), u(C), u(C)) <= 1e-4


def test_sum_of_squares_gradient_is_analytic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.square(x))
    T.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_unreachable_parameter_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    theta = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(x)
    T.backward(tape, loss, [x, theta])
    np.testing.assert_array_equal(theta.grad, np.zeros((2, 2)))


def test_shared_leaf_accumulates():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.mul(x, x) + x)
    T.backward(tape, loss)
    assert x.grad[0] == 7.0


def test_analytic_values():
    assert T.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-15)
    assert T.relu(Tensor(-3.5)).item() == 0.0
    assert T.relu(Tensor(2.0)).item() == 2.0
    # stable for large magnitudes
    np.testing.assert_allclose(T.softplus(Tensor([-800.0, 800.0])).data, [0.0, 800.0])


def test_conv_keeps_spatial_size():
    x = Tensor(RNG.random((2, 28, 28, 1)))
    w = Tensor(RNG.normal(size=(3, 3, 1, 64)))
    assert T.conv2d_3x3_same(x, w).shape == (2, 28, 28, 64)


def test_conv_matches_direct_loops():
    x = RNG.normal(size=(1, 4, 5, 2))
    w = RNG.normal(size=(3, 3, 2, 3))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            for f in range(3):
                ref[0, i, j, f] = np.sum(xp[0, i:i + 3, j:j + 3, :] * w[:, :, :, f])
    np.testing.assert_allclose(T.conv2d_3x3_same(Tensor(x), Tensor(w)).data, ref, atol=1e-12)


def test_maxpool_floors_odd_sizes():
    x = Tensor(RNG.normal(size=(1, 5, 5, 2)))
    out = T.maxpool2x2(x)
    assert out.shape == (1, 2, 2, 2)
    assert out.data[0, 1, 1, 0] == x.data[0, 2:4, 2:4, 0].max()


def test_batchnorm_train_normalizes_each_channel():
    x = Tensor(RNG.normal(3.0, 5.0, size=(8, 3, 3, 4)))
    C = 4
    out = T.batchnorm(x, Tensor(np.ones(C)), Tensor(np.zeros(C)), np.zeros(C), np.ones(C), True)
    flat = out.data.reshape(-1, C)
    np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(flat.var(axis=0), 1.0, atol=1e-6)


def test_batchnorm_running_buffers():
    x = RNG.normal(size=(10, 2))
    rm, rv = np.zeros(2), np.ones(2)
    T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    before = rm.copy(), rv.copy()
    T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False)
    np.testing.assert_array_equal(rm, before[0])
    np.testing.assert_array_equal(rv, before[1])


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 2, 4)), requires_grad=True)
        with Tape() as tape:
            y = T.conv2d_3x3_same(x, w)
            loss = T.sum(T.softplus(y))
        T.backward(tape, loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.square(x)
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_shape_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ConfigError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_nan_raises_numeric_error():
    with pytest.raises(NumericError):
        T.log(Tensor([-1.0]))
    with pytest.raises(NumericError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with T.no_grad():
            T.square(x)
    assert tape.nodes == []


def test_checkpoint_round_trip(tmp_path):
    for trial in range(1000):
        rng = np.random.default_rng(trial)
        tensors = {}
        for i in range(rng.integers(1, 4)):
            shape = tuple(rng.integers(0, 4, size=rng.integers(0, 4)))
            tensors[f"net/{trial}/param{i}"] = rng.normal(size=shape) * 10.0 ** rng.integers(-300, 300)
        back = T.decode_tensors(T.encode_tensors(tensors))
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].shape == tensors[k].shape
            assert back[k].tobytes() == tensors[k].tobytes()
    path = tmp_path / "x.ckpt"
    T.save_tensors(path, tensors)
    assert path.read_bytes()[:4] == b"EPRO"
    assert T.load_tensors(path).keys() == tensors.keys()


def test_checkpoint_layout_is_little_endian():
    buf = T.encode_tensors({"ab": np.array([[1.5, -2.0]])})
    assert buf[:4] == b"EPRO"
    assert struct.unpack("<I", buf[4:8]) == (1,)
    assert struct.unpack("<I", buf[8:12]) == (2,)
    assert buf[12:14] == b"ab"
    assert struct.unpack("<III", buf[14:26]) == (2, 1, 2)
    assert struct.unpack("<2d", buf[26:42]) == (1.5, -2.0)


def test_corrupt_checkpoint_names_offset(tmp_path):
    buf = T.encode_tensors({"w": np.ones(3)})
    path = tmp_path / "bad.ckpt"
    path.write_bytes(buf[:-5])
    with pytest.raises(DataError, match="offset"):
        T.load_tensors(path)
    path.write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(DataError, match="bad.ckpt"):
        T.load_tensors(path)
