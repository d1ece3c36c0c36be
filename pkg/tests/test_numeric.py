import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tubeprune import numeric as nm
from tubeprune.gradcheck import OP_TOL, check_fn, op_suite


def T(x, grad=True):
    return nm.Tensor(np.array(x, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------- forward values

def test_matmul_hand_cases():
    np.testing.assert_array_equal(nm.matmul(T([[1, 0], [0, 1]]), T([[3], [4]])).data, [[3], [4]])
    assert nm.matmul(T([[1, 2]]), T([[3], [4]])).data.item() == 11


def test_matmul_inner_dim_mismatch():
    with pytest.raises(nm.ShapeError):
        nm.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_masked_softmax_examples():
    y = nm.masked_softmax(T([[0.0, 0.0, 0.0]]), np.array([[1, 1, 1]])).data
    np.testing.assert_allclose(y, [[1 / 3] * 3], rtol=0, atol=1e-15)
    y = nm.masked_softmax(T([[5.0, -100.0, 5.0]]), np.array([[1, 0, 1]])).data
    assert y[0, 1] == 0.0
    np.testing.assert_array_equal(y[0, [0, 2]], [0.5, 0.5])


def test_masked_softmax_rejects_fully_masked_row():
    with pytest.raises(ValueError):
        nm.masked_softmax(T(np.zeros((2, 3))), np.array([[1, 0, 0], [0, 0, 0]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(-30, 30)), arrays(np.bool_, (5, 7)))
def test_masked_softmax_rows_sum_to_one_and_masked_entries_vanish(z, mask):
    mask[:, 3] = True
    y = nm.masked_softmax(T(z), mask).data
    assert (y[~mask] == 0.0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


def test_grl_forward_identity_and_scaled_reversal():
    x = T([1.0, 2.0, 3.0])
    y = nm.grl(x, 1.0)
    np.testing.assert_array_equal(y.data, x.data)
    x = T([0.0, 0.0])
    nm.grl(x, 1.0).backward(np.array([1.0, 1.0]))
    np.testing.assert_array_equal(x.grad, [-1.0, -1.0])
    x = T([0.0, 0.0])
    nm.grl(x, 0.5).backward(np.array([2.0, -4.0]))
    np.testing.assert_array_equal(x.grad, [-1.0, 2.0])


def test_cross_entropy_examples():
    assert nm.cross_entropy(T([[0.0, 0.0]]), [0]).data == pytest.approx(np.log(2), abs=1e-15)
    v = nm.cross_entropy(T([[1000.0, 0.0]]), [0]).data
    assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        nm.cross_entropy(T([[0.0, 0.0]]), [2])


def test_bce_examples():
    assert nm.bce_with_logits(T([[0.0]]), [[1.0]]).data == pytest.approx(np.log(2), abs=1e-15)
    v = nm.bce_with_logits(T([[-1000.0]]), [[0.0]]).data
    assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        nm.bce_with_logits(T([[0.0]]), [[0.5]])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_values_are_rejected():
    with pytest.raises(nm.NonFiniteError):
        nm.Tensor([1.0, np.nan])
    with pytest.raises(nm.NonFiniteError):
        nm.div(T([1.0]), T([0.0]))


def test_dropout_eval_identity_and_train_scaling():
    x = T(np.ones((50, 40)))
    assert nm.dropout(x, 0.3, None, train=False) is x
    y = nm.dropout(x, 0.25, nm.make_rng(0), train=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs((y == 0).mean() - 0.25) < 0.03


def test_relu_and_concat_gradients():
    rng = nm.make_rng(3)
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    assert check_fn(nm.relu, [x]) < OP_TOL
    assert check_fn(lambda a, b: nm.concat([a, b], axis=0), [rng.normal(size=(2, 3)), rng.normal(size=(4, 3))]) < OP_TOL


# ---------------------------------------------------------------- gradients

def test_every_registered_op_passes_finite_differences():
    results = op_suite(seed=0)
    bad = [(r.name, r.rel_err) for r in results if not r.ok]
    assert not bad


def test_matmul_gradient_finite_difference_tight():
    rng = nm.make_rng(11)
    assert check_fn(nm.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]) < 1e-6


def test_fan_out_accumulates():
    x = T([1.5, -2.0])
    (x + x).backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_diamond_graph_visits_each_node_once():
    x = T([3.0])
    y = x * x
    z = y + y * x          # x^2 + x^3
    z.backward(np.ones(1))
    assert x.grad[0] == pytest.approx(2 * 3 + 3 * 9)


def test_no_grad_records_nothing():
    x = T([1.0])
    with nm.no_grad():
        y = x * x
    assert not y.requires_grad and y._parents == ()


def test_grads_accumulate_across_backward_calls():
    x = T([1.0, 2.0])
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_op_sequence_is_bit_reproducible():
    def run():
        rng = nm.make_rng(5, 1)
        w = T(rng.normal(size=(6, 6)))
        x = T(rng.normal(size=(3, 6)), grad=False)
        h = nm.dropout(nm.gelu(nm.linear(x, w)), 0.2, rng, True)
        loss = nm.cross_entropy(nm.layernorm(h, T(np.ones(6)), T(np.zeros(6))), [0, 3, 5])
        loss.backward()
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    nm.adam_step(p, {"w": np.zeros(2)}, nm.AdamState(lr=0.1))
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = {"w": np.array([0.5])}
    nm.adam_step(p, {"w": np.array([1.0])}, nm.AdamState(lr=0.1))
    assert p["w"][0] == pytest.approx(0.4, abs=1e-8)


def test_adam_two_steps_match_scalar_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [0.3, -1.2]
    w, m, v = 2.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"w": np.array([2.0])}
    state = nm.AdamState(lr=lr)
    for g in grads:
        nm.adam_step(p, {"w": np.array([g])}, state)
    assert state.step == 2
    assert abs(p["w"][0] - w) < 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(nm.ShapeError):
        nm.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nm.AdamState())


def test_adam_class_updates_tensors_in_place():
    w = T([1.0])
    opt = nm.Adam({"w": w}, lr=0.1)
    (w * w).sum().backward()
    opt.step()
    assert w.data[0] == pytest.approx(0.9, abs=1e-8)
    opt.zero_grad()
    assert w.grad[0] == 0.0


# ---------------------------------------------------------------- rng and checkpoints

def test_make_rng_streams_are_reproducible_and_distinct():
    a = nm.make_rng(42, 1).random(4)
    np.testing.assert_array_equal(a, nm.make_rng(42, 1).random(4))
    assert not np.array_equal(a, nm.make_rng(42, 2).random(4))


def test_checkpoint_roundtrip_and_layout(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(3.5), "c": np.zeros((0, 2))}
    path = tmp_path / "x.tshd"
    nm.save_checkpoint(path, tensors)
    blob = path.read_bytes()
    assert blob[:4] == b"TSHD"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1 and blob[12:13] == b"a"
    back = nm.load_checkpoint(path)
    assert list(back) == ["a", "b", "c"]
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
        assert back[k].shape == tensors[k].shape


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        nm.load_checkpoint(path)
