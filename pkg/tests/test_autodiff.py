import numpy as np
import pytest

from conftest import numeric_grad
from mscan_lab import autodiff as ad
from mscan_lab.autodiff import Parameter, Tape
from mscan_lab.errors import GradientError, IndexOutOfRangeError, ShapeError


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.constant([0.0])).data.tolist() == [0.5]


def test_softmax_uniform():
    out = ad.softmax(ad.constant([0.0, 0.0, 0.0, 0.0]))
    assert out.data.tolist() == [0.25, 0.25, 0.25, 0.25]


def test_matmul_identity():
    v = np.array([1.5, -2.0, 3.25])
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(v))
    assert out.data.tolist() == v.tolist()


def test_max_pool_row():
    assert ad.max_pool(ad.constant([[-1.0, 3.0, 2.0]])).data.tolist() == [3.0]


def test_max_pool_empty_mask_is_zero_without_gradient():
    x = Parameter('x', [[4.0, 5.0], [1.0, 2.0]])
    mask = np.array([[False, False], [True, False]])
    with Tape() as tape:
        out = ad.max_pool(x.value, mask)
        loss = ad.total(out)
    assert out.data.tolist() == [0.0, 1.0]
    ad.backward(loss, tape)
    assert x.grad.tolist() == [[0.0, 0.0], [1.0, 0.0]]


def test_sigmoid_derivative_at_zero():
    x = Parameter('x', [0.0])
    with Tape() as tape:
        out = ad.total(ad.sigmoid(x.value))
    grads = ad.backward(out, tape)
    assert grads['x'].tolist() == [0.25]


def test_linear_form_gradient():
    w = Parameter('w', [2.0, 3.0])
    x = ad.constant([5.0, 7.0])
    with Tape() as tape:
        out = ad.total(ad.mul(w.value, x))
    assert out.item() == 31.0
    grads = ad.backward(out, tape)
    assert grads['w'].tolist() == [5.0, 7.0]


def test_shared_input_accumulates():
    x = Parameter('x', [3.0])
    with Tape() as tape:
        y = ad.mul(x.value, x.value)
        out = ad.total(ad.mul(y, y))
    ad.backward(out, tape)
    assert x.grad.tolist() == [4 * 3.0 ** 3]


def test_composite_matches_finite_differences():
    rng = np.random.default_rng(0)
    W = Parameter('W', rng.normal(size=(3, 4)))
    b = Parameter('b', rng.normal(size=4))
    table = Parameter('table', rng.normal(size=(5, 3)))
    idx = np.array([[0, 2], [4, 2]])
    labels = np.array([1.0, 0.0])
    mask = np.array([[True, True, False, True], [True, False, False, False]])

    def loss():
        emb = ad.lookup(table.value, idx)                           # (2, 2, 3)
        pooled = ad.weighted_sum(ad.softmax(ad.constant([[0.3, -0.1], [1.0, 2.0]])), emb)
        h = ad.tanh(ad.add_bias(ad.matmul(pooled, W.value), b.value))
        att = ad.mul(ad.softmax(ad.masked_fill(h, mask)), ad.constant(mask.astype(float)))
        z = ad.max_pool(ad.concat([att, ad.relu(h)]))
        return ad.mean(ad.bce_logits(z, labels))

    with Tape() as tape:
        out = loss()
    ad.backward(out, tape)
    for p in (W, b, table):
        expected = numeric_grad(lambda: loss().item(), p.value.data)
        np.testing.assert_allclose(p.grad, expected, rtol=1e-5, atol=1e-8)


def test_grad_is_zero_after_reset():
    w = Parameter('w', [1.0, 2.0])
    with Tape() as tape:
        out = ad.total(ad.mul(w.value, w.value))
    ad.backward(out, tape)
    assert w.grad.any()
    w.zero_grad()
    assert w.grad.shape == w.shape
    assert not w.grad.any()


def test_elementwise_shape_mismatch_names_kind():
    with pytest.raises(ShapeError, match=r"add: incompatible shapes \(2,\), \(3,\)"):
        ad.add(ad.constant([1.0, 2.0]), ad.constant([1.0, 2.0, 3.0]))


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(ShapeError, match='matmul'):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 2))))


def test_lookup_out_of_range():
    with pytest.raises(IndexOutOfRangeError, match='index 4'):
        ad.lookup(ad.constant(np.ones((4, 2))), np.array([0, 4]))


def test_tape_is_topological_and_replays():
    w = Parameter('w', [[0.5, -1.0], [2.0, 0.25]])
    with Tape() as tape:
        h = ad.sigmoid(ad.matmul(ad.constant([[1.0, 2.0]]), w.value))
        out = ad.mean(ad.softmax(h))
    outputs = {n.output_id for n in tape.nodes}
    produced = set()
    for node in tape.nodes:
        for inp in node.input_ids:
            # leaves are never produced; everything else comes from an earlier node
            assert inp in produced or inp not in outputs
        produced.add(node.output_id)
    assert tape.replay()
    assert out.id in produced


def test_ops_outside_tape_are_not_recorded():
    w = Parameter('w', [1.0])
    with Tape() as tape:
        ad.sigmoid(w.value)
    ad.tanh(w.value)
    assert len(tape) == 1


def test_backward_needs_scalar():
    w = Parameter('w', [1.0, 2.0])
    with Tape() as tape:
        out = ad.sigmoid(w.value)
    with pytest.raises(GradientError):
        ad.backward(out, tape)


def test_constants_receive_no_gradient():
    w = Parameter('w', [2.0])
    c = ad.constant([3.0])
    with Tape() as tape:
        out = ad.total(ad.mul(w.value, c))
    grads = ad.backward(out, tape)
    assert list(grads) == ['w']


def test_scalar_reductions_stay_zero_dimensional():
    w = Parameter('w', [[0.5, -1.0], [2.0, 0.25]])
    with Tape() as tape:
        m = ad.mean(w.value)
        s = ad.total(w.value)
        loss = ad.mean(ad.bce_logits(ad.constant([0.3, -0.7]), np.array([1.0, 0.0])))
    assert m.shape == () and s.shape == () and loss.shape == ()
    assert ad.constant(2.5).shape == ()
    assert tape.replay()
    ad.backward(m, tape)
    assert w.grad.tolist() == [[0.25, 0.25], [0.25, 0.25]]


def test_replay_flags_a_tampered_output():
    w = Parameter('w', [1.0, -2.0])
    with Tape() as tape:
        ad.mean(ad.sigmoid(w.value))
    assert tape.replay()
    last = tape.nodes[-1].output_id
    tape.values[last] = tape.values[last] + 1.0
    assert not tape.replay()


def test_masked_softmax_rows_sum_to_one_and_ignore_shifts():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    mask = rng.random((4, 6)) < 0.7
    mask[:, 0] = True

    def masked_softmax(values):
        return ad.softmax(ad.masked_fill(ad.constant(values), mask)).data

    out = masked_softmax(x)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(masked_softmax(x + 17.5), out, rtol=0, atol=1e-12)
    np.testing.assert_allclose(masked_softmax(x - 1e3), out, rtol=0, atol=1e-12)


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(5)
    w = Parameter('w', rng.normal(size=(3, 2)))
    x = ad.constant(rng.normal(size=(4, 3)))

    def first():
        return ad.mean(ad.tanh(ad.matmul(x, w.value)))

    def second():
        return ad.total(ad.sigmoid(ad.matmul(x, w.value)))

    def grad_of(build):
        w.zero_grad()
        with Tape() as tape:
            out = build()
        return ad.backward(out, tape)['w'].copy()

    a, b = 0.75, -2.0
    g1 = grad_of(first)
    g2 = grad_of(second)
    combined = grad_of(lambda: ad.add(ad.scale(first(), a), ad.scale(second(), b)))
    np.testing.assert_allclose(combined, a * g1 + b * g2, rtol=1e-12, atol=1e-14)
