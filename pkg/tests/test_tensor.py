import numpy as np
import pytest

from stylediff.engine import tensor as T
from stylediff.engine.tensor import (
    Adam,
    Module,
    Tensor,
    backward,
    checksum,
    clip_grad_norm,
    decode_tensors,
    encode_tensors,
    load_tensors,
    make_rng,
    no_grad,
    precision,
    save_tensors,
)
from stylediff.errors import GraphError, LayoutError, ShapeError


def numeric_grad(f, arrays, index, eps=1e-6):
    """Central differences of scalar f w.r.t. arrays[index]."""
    x = arrays[index]
    grad = np.zeros_like(x)
    for pos in np.ndindex(x.shape):
        original = x[pos]
        x[pos] = original + eps
        plus = f(*arrays)
        x[pos] = original - eps
        minus = f(*arrays)
        x[pos] = original
        grad[pos] = (plus - minus) / (2 * eps)
    return grad


def assert_gradients(build, *arrays, atol=1e-6):
    """Compare backward() against finite differences for every input."""
    with precision("float64"):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        backward(build(*leaves))

        def value(*xs):
            with no_grad():
                return float(build(*[Tensor(x) for x in xs]).data)

        for i, leaf in enumerate(leaves):
            expected = numeric_grad(value, arrays, i)
            np.testing.assert_allclose(leaf.grad, expected, atol=atol, rtol=1e-5)


def weighted(out, seed=0):
    """Reduce any output to a scalar with fixed random weights."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(T.mul(out, w))


# ----------------------------------------------------------------------
# Gradients
# ----------------------------------------------------------------------

def test_elementwise_gradients(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    assert_gradients(lambda x, y: weighted(T.add(x, y)), a, b)
    assert_gradients(lambda x, y: weighted(T.sub(x, y)), a, b)
    assert_gradients(lambda x, y: weighted(T.mul(x, y)), a, b)
    assert_gradients(lambda x, y: weighted(T.div(x, T.add(T.mul(y, y), 1.0))), a, b)
    assert_gradients(lambda x: weighted(T.neg(x)), a)


def test_unary_gradients(rng):
    positive = rng.uniform(0.5, 2.0, size=(2, 5))
    assert_gradients(lambda x: weighted(T.power(x, 3.0)), positive)
    assert_gradients(lambda x: weighted(T.exp(x)), positive)
    assert_gradients(lambda x: weighted(T.log(x)), positive)
    assert_gradients(lambda x: weighted(T.sqrt(x)), positive)
    assert_gradients(lambda x: weighted(T.gelu(x)), rng.normal(size=(2, 5)))


def test_relu_gradient_away_from_kink(rng):
    x = rng.normal(size=(4, 4))
    x[np.abs(x) < 0.1] = 0.5
    assert_gradients(lambda t: weighted(T.relu(t)), x)


def test_reduction_and_shape_gradients(rng):
    x = rng.normal(size=(2, 3, 4))
    assert_gradients(lambda t: weighted(T.tsum(t, axis=1)), x)
    assert_gradients(lambda t: weighted(T.tmean(t, axis=(0, 2), keepdims=True)), x)
    assert_gradients(lambda t: weighted(T.reshape(t, (6, 4))), x)
    assert_gradients(lambda t: weighted(T.transpose(t, (2, 0, 1))), x)
    assert_gradients(lambda t: weighted(T.swapaxes(t, 0, 2)), x)


def test_getitem_accumulates_repeated_indices(rng):
    x = rng.normal(size=(5, 3))
    assert_gradients(lambda t: weighted(T.getitem(t, np.array([0, 0, 2, 4, 4]))), x)

    with precision("float64"):
        leaf = Tensor(np.ones((3, 2)), requires_grad=True)
        backward(T.tsum(T.getitem(leaf, np.array([1, 1, 1]))))
    np.testing.assert_array_equal(leaf.grad, [[0, 0], [3, 3], [0, 0]])


def test_embedding_and_concat_gradients(rng):
    table = rng.normal(size=(6, 4))
    ids = np.array([[0, 3, 3], [5, 0, 1]])
    assert_gradients(lambda t: weighted(T.embedding(t, ids)), table)
    assert_gradients(
        lambda a, b: weighted(T.concat([a, b], axis=1)),
        rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    )


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(ShapeError):
        T.embedding(Tensor(np.zeros((4, 2))), np.array([0, 4]))


def test_matmul_gradients_with_batch_broadcast(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    assert_gradients(lambda x, y: weighted(T.matmul(x, y)), a, b)
    assert_gradients(
        lambda x, w, bias: weighted(T.linear(x, w, bias)),
        a, rng.normal(size=(5, 4)), rng.normal(size=(5,))
    )


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_conv1d_gradients(rng):
    x = rng.normal(size=(2, 6, 3))
    w = rng.normal(size=(4, 3, 3))
    bias = rng.normal(size=(4,))
    assert_gradients(lambda a, b, c: weighted(T.conv1d(a, b, c)), x, w, bias)


def test_conv1d_same_padding_shape():
    out = T.conv1d(Tensor(np.ones((1, 7, 2))), Tensor(np.ones((5, 2, 3))))
    assert out.shape == (1, 7, 5)
    # edge frames see one zero-padded tap
    assert out.data[0, 0, 0] == pytest.approx(4.0)
    assert out.data[0, 3, 0] == pytest.approx(6.0)
    with pytest.raises(ShapeError):
        T.conv1d(Tensor(np.ones((1, 7, 2))), Tensor(np.ones((5, 2, 2))))


def test_softmax_family_gradients(rng):
    x = rng.normal(size=(3, 5))
    assert_gradients(lambda t: weighted(T.softmax(t, axis=-1)), x)
    assert_gradients(lambda t: weighted(T.log_softmax(t, axis=-1)), x)
    assert_gradients(lambda t: weighted(T.l2_normalize(t)), x)


def test_softmax_rows_sum_to_one(rng):
    y = T.softmax(Tensor(rng.normal(size=(4, 7)) * 50.0))
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=1e-5)


def test_layer_norm_gradients(rng):
    assert_gradients(
        lambda x, g, b: weighted(T.layer_norm(x, g, b)),
        rng.normal(size=(2, 3, 6)), rng.normal(size=(6,)), rng.normal(size=(6,)),
        atol=1e-5
    )


def test_loss_gradients(rng):
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    soft = rng.uniform(size=(4, 3))
    soft /= soft.sum(axis=1, keepdims=True)
    assert_gradients(lambda p, t: T.mse(p, t), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    assert_gradients(lambda z: T.cross_entropy(z, labels), logits)
    assert_gradients(lambda z: T.soft_cross_entropy(z, soft), logits)


def test_mse_value_and_shape_check():
    loss = T.mse(Tensor([1.0, 2.0]), Tensor([1.0, 4.0]))
    assert float(loss.data) == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        T.mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_shared_subexpression_accumulates():
    with precision("float64"):
        x = Tensor(3.0, requires_grad=True)
        y = T.mul(x, x)
        backward(T.add(y, y))
    assert float(x.grad) == pytest.approx(12.0)


# ----------------------------------------------------------------------
# Graph discipline
# ----------------------------------------------------------------------

def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.tsum(T.mul(x, 2.0))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_backward_through_consumed_intermediate_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    hidden = T.mul(x, 2.0)
    backward(T.tsum(hidden))
    with pytest.raises(GraphError):
        backward(T.tsum(T.add(hidden, 1.0)))


def test_backward_needs_scalar_and_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(T.mul(x, 2.0))
    with pytest.raises(GraphError):
        backward(T.tsum(Tensor(np.ones(3))))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.tsum(T.mul(x, 2.0))
    assert not y.requires_grad
    assert y._parents == ()


def test_precision_switches_dtype():
    assert Tensor([1.0]).dtype == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with precision("int32"):
            pass


# ----------------------------------------------------------------------
# Optimization
# ----------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    with precision("float64"):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        opt = Adam([p], lr=0.01)
        backward(T.tsum(T.mul(p, np.array([3.0, -0.2, 10.0]))))
        opt.step()
    # bias correction makes |step| = lr for any non-zero gradient
    np.testing.assert_allclose(p.data, [0.99, -1.99, 0.49], atol=1e-6)


def test_adam_minimizes_quadratic():
    with precision("float64"):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            backward(T.tsum(T.mul(p, p)))
            opt.step()
    assert np.abs(p.data).max() < 0.2


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.adam_step([p], [np.zeros(4)], T.AdamState())


def test_clip_grad_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0], dtype=np.float32)
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-4)
    # below the bound nothing changes
    assert clip_grad_norm([p], 10.0) == pytest.approx(1.0, rel=1e-4)


def test_make_rng_streams():
    a = make_rng(7, 1).normal(size=5)
    assert np.array_equal(a, make_rng(7, 1).normal(size=5))
    assert not np.array_equal(a, make_rng(7, 2).normal(size=5))
    assert not np.array_equal(a, make_rng(8, 1).normal(size=5))
    with pytest.raises(ValueError):
        make_rng(-1)


# ----------------------------------------------------------------------
# Modules and the MDLC container
# ----------------------------------------------------------------------

class TwoLayer(Module):
    def __init__(self):
        super().__init__()
        self.add_param("fc1.weight", np.ones((3, 2)))
        self.add_param("fc1.bias", np.zeros(3))


def test_module_registry_and_freezing():
    m = TwoLayer()
    assert list(m.named_parameters()) == ["fc1.weight", "fc1.bias"]
    assert m.num_parameters() == 9
    m.set_trainable(False, ["fc1.bias"])
    assert m.num_parameters(trainable_only=True) == 6
    with pytest.raises(KeyError):
        m.add_param("fc1.bias", np.zeros(3))


def test_load_state_dict_errors():
    m = TwoLayer()
    with pytest.raises(LayoutError):
        m.load_state_dict({"fc1.weight": np.zeros((3, 2))})
    with pytest.raises(ShapeError):
        m.load_state_dict({"fc1.weight": np.zeros((2, 3)), "fc1.bias": np.zeros(3)})
    m.load_state_dict({"fc1.weight": np.full((3, 2), 2.0)}, strict=False)
    assert m.named_parameters()["fc1.weight"].data[0, 0] == 2.0


def test_mdlc_round_trip(tmp_path, rng):
    tensors = {
        "scalar": np.array(1.5, dtype=np.float32),
        "matrix": rng.normal(size=(3, 4)).astype(np.float32),
        "unicode.é": np.arange(5, dtype=np.float32),
    }
    save_tensors(tmp_path / "w.mdlc", tensors)
    loaded = load_tensors(tmp_path / "w.mdlc")
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        np.testing.assert_array_equal(loaded[name], value)
    assert checksum(loaded) == checksum(tensors)


def test_mdlc_rejects_malformed_blobs():
    blob = encode_tensors({"w": np.ones((2, 2), dtype=np.float32)})
    with pytest.raises(LayoutError):
        decode_tensors(b"XXXX" + blob[4:])
    with pytest.raises(LayoutError):
        decode_tensors(blob[:-3])
    with pytest.raises(LayoutError):
        decode_tensors(blob + b"\x00")
    with pytest.raises(LayoutError):
        decode_tensors(blob[:10])
    with pytest.raises(LayoutError):
        decode_tensors(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    # the single-byte name "w" sits right after the 12-byte header and its length
    with pytest.raises(LayoutError):
        decode_tensors(blob[:16] + b"\xff" + blob[17:])


def test_checksum_detects_changes():
    a = {"w": np.zeros(3, dtype=np.float32)}
    b = {"w": np.array([0.0, 0.0, 1e-7], dtype=np.float32)}
    assert checksum(a) != checksum(b)
