import math

import numpy as np
import pytest

import hierattn.autodiff as ad
from hierattn.autodiff import Tape, Tensor
from hierattn.errors import ContractError, DimensionError, TapeError
from hierattn.gradcheck import _case_broken_backward, check_all_primitives, grad_check


def test_conv2d_pointwise_identity():
    x = np.full((1, 1, 1, 1), 5.0)
    k = np.ones((1, 1, 1, 1))
    out = ad.conv2d(Tensor(x), Tensor(k))
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 5.0


def test_conv2d_ones_sum():
    x = np.ones((1, 1, 3, 3))
    k = np.ones((1, 1, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(k), stride=1, pad=0)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv2d_output_shape_stride_pad():
    x = np.zeros((2, 3, 8, 8))
    k = np.zeros((4, 3, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(k), stride=2, pad=1)
    assert out.data.shape == (2, 4, 4, 4)


def test_conv2d_channel_mismatch_raises():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_kernel_too_large_raises():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_matches_naive_loops():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[n, o, i, j] = (patch * k[o]).sum()
    assert np.allclose(out, ref, atol=1e-12)


def test_fully_connected_identity():
    x = np.array([1.0, -2.0, 3.0])
    out = ad.fully_connected(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_fully_connected_zero_weights_bias_only():
    out = ad.fully_connected(Tensor(np.array([4.0, 5.0])),
                             Tensor(np.zeros((2, 2))),
                             Tensor(np.full(2, 0.5)))
    assert np.array_equal(out.data, [0.5, 0.5])


def test_fully_connected_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.fully_connected(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))),
                           Tensor(np.zeros(2)))


def test_activations_at_zero_and_negative():
    assert ad.pointwise_activation(Tensor(np.zeros(1)), "sigmoid").data[0] == 0.5
    assert ad.pointwise_activation(Tensor(np.zeros(1)), "tanh").data[0] == 0.0
    assert ad.pointwise_activation(Tensor(np.array([-1.0])), "relu").data[0] == 0.0


def test_unknown_activation_raises():
    with pytest.raises(ContractError):
        ad.pointwise_activation(Tensor(np.zeros(1)), "gelu")


def test_global_avg_pool_values_and_shape():
    ones = np.ones((1, 3, 4, 4))
    assert np.array_equal(ad.global_avg_pool(Tensor(ones)).data, np.ones((1, 3)))
    x = np.zeros((1, 1, 2, 2))
    x[0, 0] = [[0.0, 2.0], [0.0, 2.0]]
    assert ad.global_avg_pool(Tensor(x)).data[0, 0] == 1.0


def test_concat_slice_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal((2, 3, 3, 3))
    cat = ad.concat_channels([Tensor(a), Tensor(b)])
    assert cat.data.shape == (2, 5, 3, 3)
    back_a = ad.slice_channels(cat, 0, 2)
    back_b = ad.slice_channels(cat, 2, 5)
    assert np.array_equal(back_a.data, a)
    assert np.array_equal(back_b.data, b)


def test_concat_single_part_identity():
    a = np.arange(8.0).reshape(1, 2, 2, 2)
    assert np.array_equal(ad.concat_channels([Tensor(a)]).data, a)


def test_concat_spatial_mismatch_raises():
    with pytest.raises(DimensionError):
        ad.concat_channels([Tensor(np.zeros((1, 1, 2, 2))),
                            Tensor(np.zeros((1, 1, 3, 2)))])


def test_bilinear_resize_constant_broadcast():
    out = ad.bilinear_resize(Tensor(np.full((1, 1, 1, 1), 3.25)), 5, 5)
    assert np.array_equal(out.data, np.full((1, 1, 5, 5), 3.25))


def test_bilinear_resize_identity_same_size():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 7))
    out = ad.bilinear_resize(Tensor(x), 6, 7)
    assert np.allclose(out.data, x, atol=1e-12)


def test_bilinear_resize_corner_alignment():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = ad.bilinear_resize(Tensor(x), 4, 4).data[0, 0]
    assert out[0, 0] == 1.0 and out[0, -1] == 2.0
    assert out[-1, 0] == 3.0 and out[-1, -1] == 4.0
    # interior is the linear interpolant
    assert math.isclose(out[0, 1], 1.0 + 1.0 / 3.0, rel_tol=1e-12)


def test_cross_entropy_uniform_logits():
    loss = ad.softmax_cross_entropy(Tensor(np.zeros(7)), 3)
    assert math.isclose(loss.item(), math.log(7.0), rel_tol=1e-12)


def test_cross_entropy_confident_correct():
    logits = np.zeros(5)
    logits[2] = 50.0
    loss = ad.softmax_cross_entropy(Tensor(logits), 2)
    assert loss.item() < 1e-8


def test_cross_entropy_shift_invariance():
    rng = np.random.default_rng(11)
    logits = rng.standard_normal(6)
    a = ad.softmax_cross_entropy(Tensor(logits), 4).item()
    b = ad.softmax_cross_entropy(Tensor(logits + 100.0), 4).item()
    assert abs(a - b) < 1e-12


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal(6)
    tape = Tape()
    lt = tape.leaf(logits)
    tape.backward(ad.softmax_cross_entropy(lt, 2))
    z = np.exp(logits - logits.max())
    expected = z / z.sum()
    expected[2] -= 1.0
    assert np.allclose(lt.grad, expected, atol=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros(4)), 4)


def test_batched_cross_entropy_matches_per_row():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((3, 7))
    labels = np.array([1, 0, 6])
    batched = ad.softmax_cross_entropy(Tensor(logits), labels).data
    rows = [ad.softmax_cross_entropy(Tensor(logits[i]), labels[i]).item()
            for i in range(3)]
    assert np.allclose(batched, rows, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(9)
    s = ad.softmax(Tensor(rng.standard_normal((4, 6)))).data
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert (s > 0).all()


def test_backward_linear_combination_exact():
    tape = Tape()
    a = tape.leaf(np.array(1.5))
    b = tape.leaf(np.array(-0.5))
    out = a * 2.0 + b * 3.0
    tape.backward(out)
    assert a.grad == 2.0 and b.grad == 3.0


def test_gradient_accumulates_over_reuse():
    tape = Tape()
    a = tape.leaf(np.array(3.0))
    out = a * a  # d/da = 2a
    tape.backward(out)
    assert a.grad == 6.0


def test_double_backward_raises():
    tape = Tape()
    a = tape.leaf(np.ones(1))
    out = a.sum()
    tape.backward(out)
    with pytest.raises(TapeError):
        tape.backward(out)


def test_record_after_backward_raises():
    tape = Tape()
    a = tape.leaf(np.ones(1))
    tape.backward(a.sum())
    with pytest.raises(TapeError):
        (a * 2.0).sum()


def test_mixed_tapes_raise():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones(2))
    b = t2.leaf(np.ones(2))
    with pytest.raises(TapeError):
        a + b


def test_non_scalar_backward_root_raises():
    tape = Tape()
    a = tape.leaf(np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(a * 1.0)


def test_detach_blocks_gradient():
    tape = Tape()
    a = tape.leaf(np.array(2.0))
    out = (a * 3.0).detach() * a
    tape.backward(out)
    assert a.grad == 6.0  # only the live factor contributes


def test_minimum_clamp_gradient_zero_when_active():
    tape = Tape()
    a = tape.leaf(np.array([0.2, 0.9]))
    out = ad.minimum(a, 0.5).sum()
    tape.backward(out)
    assert np.array_equal(a.grad, [1.0, 0.0])


def test_relu_subgradient_zero_at_kink():
    tape = Tape()
    a = tape.leaf(np.array([0.0, 1.0, -1.0]))
    tape.backward(ad.relu(a).sum())
    assert np.array_equal(a.grad, [0.0, 1.0, 0.0])


def test_fully_connected_without_bias():
    out = ad.fully_connected(Tensor(np.array([1.0, 2.0])),
                             Tensor(np.array([[3.0, 4.0]])))
    assert np.array_equal(out.data, [11.0])


def test_off_tape_parameters_receive_gradients():
    # Parameter leaves live outside any tape; ops that consume them alongside
    # taped tensors must still deliver their gradients.
    rng = np.random.default_rng(13)
    w = ad.param(rng.standard_normal((3, 4)))
    b = ad.param(rng.standard_normal(3))
    x = rng.standard_normal((5, 4))
    tape = Tape()
    xt = tape.leaf(x)
    out = ad.fully_connected(xt, w, b).sum()
    tape.backward(out)
    g = np.ones((5, 3))
    assert np.allclose(w.grad, g.T @ x, atol=1e-12)
    assert np.allclose(b.grad, g.sum(axis=0), atol=1e-12)
    assert np.allclose(xt.grad, g @ w.data, atol=1e-12)


def test_off_tape_conv_kernel_and_affine_scale_get_gradients():
    rng = np.random.default_rng(14)
    k = ad.param(rng.standard_normal((2, 1, 3, 3)))
    scale = ad.param(np.ones((1, 2, 1, 1)))
    shift = ad.param(np.zeros((1, 2, 1, 1)))
    tape = Tape()
    x = tape.leaf(rng.standard_normal((1, 1, 5, 5)))
    y = ad.conv2d(x, k, pad=1) * scale + shift
    tape.backward(y.sum())
    assert k.grad is not None and np.abs(k.grad).max() > 0
    assert scale.grad is not None and shift.grad is not None
    assert np.allclose(shift.grad, np.full((1, 2, 1, 1), 25.0), atol=1e-12)


def test_forward_without_tape_records_nothing():
    a = Tensor(np.ones((2, 2)))
    out = ad.relu(a * 2.0)
    assert out.tape is None and out.grad is None


def test_ops_finite_on_finite_inputs():
    rng = np.random.default_rng(21)
    for _ in range(25):
        x = rng.standard_normal((2, 3, 6, 6)) * 10.0
        k = rng.standard_normal((4, 3, 3, 3))
        y = ad.conv2d(Tensor(x), Tensor(k), pad=1)
        y = ad.pointwise_activation(y, "tanh")
        y = ad.avg_pool(y, 2)
        y = ad.global_avg_pool(y)
        y = ad.softmax(y)
        assert np.isfinite(y.data).all()


def test_grad_check_passes_on_smooth_function():
    rng = np.random.default_rng(1)
    rep = grad_check(lambda a: ad.sigmoid(a).sum(), [rng.standard_normal((3, 3))])
    assert rep.passed and rep.max_error < 1e-4


def test_grad_check_flags_wrong_backward():
    fn, inputs = _case_broken_backward(np.random.default_rng(0))
    rep = grad_check(fn, inputs)
    assert not rep.passed


def test_primitive_suite_covers_registry_and_passes():
    rep = check_all_primitives(seed=1, instances=2)
    names = {r.name for r in rep.rows}
    for op in ad.PRIMITIVE_OPS:
        assert op in names or any(n.startswith(op + "_") for n in names)
    assert rep.passed
