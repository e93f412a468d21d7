import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commentaries.commentary import (
    Augmentation,
    AttentionMask,
    AuxTarget,
    ClassOutOfRangeError,
    ExampleWeight,
    apply_mask,
    aux_target_loss,
    blend_batch,
    cross_entropy,
    gaussian_mask,
    masked_loss,
    per_example_cross_entropy,
    shuffle_grid,
    weighted_loss,
)
from commentaries.data import Batch
from commentaries.models import MlpSpec, init_params
from commentaries.params import ParamVector
from commentaries.tensor import ShapeMismatchError, Tape, Tensor, grad
from conftest import central_difference, rel_err


def _grid(values) -> Augmentation:
    return Augmentation(ParamVector.from_arrays(["grid"], [np.asarray(values, dtype=float)]))


# --- example weights -------------------------------------------------------

def test_constant_one_weight_is_plain_cross_entropy(rng):
    com = ExampleWeight.identity(data_dim=3, hidden=4)
    logits, y, x = Tensor(rng.normal(size=(5, 2))), rng.integers(0, 2, 5), rng.normal(size=(5, 3))
    assert weighted_loss(com, logits, y, x, 3, 10).item() == cross_entropy(logits, y).item()
    assert com.is_identity


def test_constant_zero_weight_gives_zero_loss_and_gradient(rng):
    com = replace(ExampleWeight.create(3, 4), constant=0.0)
    tape = Tape()
    logits = tape.leaf(rng.normal(size=(5, 2)))
    loss = weighted_loss(com, logits, rng.integers(0, 2, 5), rng.normal(size=(5, 3)), 0, 1)
    (g,) = grad(loss, [logits])
    assert loss.item() == 0.0
    assert np.all(g.value == 0.0)


def test_hand_set_weights_against_per_example_losses(rng):
    logits = rng.normal(size=(2, 3))
    y = np.array([2, 0])
    # teacher with zero weights and a bias giving sigmoid(b) = w for each row is
    # not per-row; instead feed the weights in through a one-feature linear teacher
    spec = MlpSpec((2, 1), head="sigmoid-scalar")
    w_target = np.array([0.2, 0.8])
    pre = np.log(w_target / (1 - w_target))
    params = ParamVector.from_arrays(["w0", "b0"], [np.array([[1.0], [0.0]]), np.zeros(1)])
    com = ExampleWeight(spec, params)
    x = pre.reshape(2, 1)
    losses = [-(logits[i, y[i]] - np.log(np.exp(logits[i]).sum())) for i in range(2)]
    expected = 0.2 * losses[0] / 2 + 0.8 * losses[1] / 2
    assert weighted_loss(com, Tensor(logits), y, x, 0, 1).item() == pytest.approx(expected, rel=1e-12)


def test_weights_lie_in_unit_interval(rng):
    com = ExampleWeight.create(6, 8, seed=2)
    w = com.weights(rng.normal(size=(40, 6)) * 5, 7, 10).value
    assert np.all((w >= 0) & (w <= 1))


def test_teacher_head_checked():
    with pytest.raises(ValueError):
        ExampleWeight(MlpSpec((3, 1)), init_params(MlpSpec((3, 1)), 0))


def test_weighted_loss_flows_to_teacher_and_student(rng):
    com = ExampleWeight.create(3, 4, seed=0)
    tape = Tape()
    phi = com.params.attach(tape)
    logits = tape.leaf(rng.normal(size=(4, 2)))
    loss = weighted_loss(com.with_params(phi), logits, np.array([0, 1, 1, 0]), rng.normal(size=(4, 3)), 2, 5)
    gs = grad(loss, [logits, *phi.tensors])
    assert all(np.any(g.value != 0) for g in gs[:2])


# --- blending --------------------------------------------------------------

def _batches(rng, n=6, d=5, c=3):
    b1 = Batch(rng.uniform(size=(n, d)), rng.integers(0, c, n), np.arange(n))
    b2 = Batch(rng.uniform(size=(n, d)), rng.integers(0, c, n), np.arange(n))
    return b1, b2


def test_zero_grid_gives_three_quarters(rng):
    b1, b2 = _batches(rng)
    out = blend_batch(Augmentation.create(3), b1, b2)
    np.testing.assert_allclose(out.lambdas.value, 0.75)
    np.testing.assert_allclose(out.inputs.value, 0.75 * b1.inputs + 0.25 * b2.inputs)


def test_grid_limits(rng):
    b1, b2 = _batches(rng)
    high = blend_batch(_grid(np.full((3, 3), 60.0)), b1, b2).lambdas.value
    np.testing.assert_allclose(high, 0.5, atol=1e-20)
    low = blend_batch(Augmentation.identity(3), b1, b2)
    assert np.all(low.lambdas.value == 1.0)
    assert np.array_equal(low.inputs.value, b1.inputs)
    assert np.array_equal(low.targets.value, np.eye(3)[b1.labels])


def test_identical_images_are_fixed_points(rng):
    b1, _ = _batches(rng)
    same = Batch(b1.inputs.copy(), (b1.labels + 1) % 3, b1.indices)
    out = blend_batch(_grid(rng.normal(size=(3, 3))), b1, same)
    np.testing.assert_allclose(out.inputs.value, b1.inputs, rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=9, max_size=9), st.integers(0, 2**31))
def test_blend_invariants(values, seed):
    rng = np.random.default_rng(seed)
    b1, b2 = _batches(rng)
    out = blend_batch(_grid(np.reshape(values, (3, 3))), b1, b2)
    assert np.all((out.lambdas.value >= 0.5) & (out.lambdas.value <= 1.0))
    np.testing.assert_allclose(out.targets.value.sum(axis=1), 1.0, rtol=1e-14)
    assert np.array_equal(out.pairs, np.stack([b1.labels, b2.labels], 1))


def test_blend_class_out_of_range(rng):
    b1, b2 = _batches(rng, c=4)
    with pytest.raises(ClassOutOfRangeError):
        blend_batch(Augmentation.create(3), b1, Batch(b2.inputs, np.full(6, 3), b2.indices))


def test_blend_size_mismatch(rng):
    b1, b2 = _batches(rng)
    with pytest.raises(ShapeMismatchError):
        blend_batch(Augmentation.create(3), b1, Batch(b2.inputs[:4], b2.labels[:4], b2.indices[:4]))


def test_blend_gradient_reaches_grid(rng):
    b1, b2 = _batches(rng)
    tape = Tape()
    phi = Augmentation.create(3).params.attach(tape)
    out = blend_batch(Augmentation(phi), b1, b2)
    (g,) = grad((out.inputs * 1.0).sum(), phi.tensors)
    assert np.any(g.value != 0)


def test_blend_self_pairing_is_seeded(rng):
    b1, _ = _batches(rng)
    a = blend_batch(Augmentation.create(3), b1, rng=np.random.default_rng(5))
    b = blend_batch(Augmentation.create(3), b1, rng=np.random.default_rng(5))
    assert np.array_equal(a.inputs.value, b.inputs.value)


def test_non_square_grid_rejected():
    with pytest.raises(ValueError):
        _grid(np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_shuffle_preserves_lambda_multiset(seed):
    rng = np.random.default_rng(seed)
    com = _grid(rng.normal(size=(4, 4)))
    shuffled = shuffle_grid(com, rng)
    assert np.array_equal(np.sort(com.lambdas().value.ravel()), np.sort(shuffled.lambdas().value.ravel()))


# --- masks -----------------------------------------------------------------

def test_mask_peak_and_sigma_value():
    m = gaussian_mask(np.array([4.0, 4.0]), 2.0, 8, 8).value
    assert m[4, 4] == 1.0
    assert m[4, 6] == pytest.approx(math.exp(-0.5), rel=1e-15)
    assert m[2, 4] == pytest.approx(0.6065306597126334, rel=1e-12)


def test_mask_symmetric_on_odd_grid():
    m = gaussian_mask(np.array([3.0, 3.0]), 1.7, 7, 7).value
    np.testing.assert_array_equal(m, m[::-1, :])
    np.testing.assert_array_equal(m, m[:, ::-1])
    np.testing.assert_array_equal(m, m.T)


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 10), st.floats(-2, 10), st.floats(0.5, 10))
def test_mask_values_in_unit_interval(r, c, sigma):
    m = gaussian_mask(np.array([r, c]), sigma, 9, 9).value
    assert np.all((m > 0) & (m <= 1))


def test_mask_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_mask(np.zeros(2), 0.0, 4, 4)


def _mask_setup(rng, side=8):
    com = AttentionMask.create(side, side, 1, sigma=2.0, hidden=6, grid=(4, 4), seed=1)
    student = MlpSpec((side * side, 5, 3))
    return com, student, init_params(student, 2), rng.uniform(size=(4, side * side)), np.array([0, 1, 2, 1])


def test_infinite_sigma_mask_is_identity(rng):
    com, spec, theta, x, y = _mask_setup(rng)
    from commentaries.models import forward

    plain = cross_entropy(forward(spec, theta, x), y).item()
    assert masked_loss(com.identity(), spec, theta, x, y).item() == plain
    huge = replace(com, sigma=1e9)
    assert masked_loss(huge, spec, theta, x, y).item() == pytest.approx(plain, abs=1e-6)


def test_far_mask_blanks_image():
    m = gaussian_mask(np.array([500.0, -500.0]), 2.0, 8, 8).value
    assert np.all(m < 1e-300)


def test_masked_loss_gradient_wrt_centre(rng):
    _, spec, theta, x, y = _mask_setup(rng)
    from commentaries.models import forward

    def loss_at(c):
        mask = gaussian_mask(c, 2.0, 8, 8).reshape(4, 64)
        return cross_entropy(forward(spec, theta, Tensor(x) * mask), y)

    c0 = rng.uniform(1, 6, size=(4, 2))
    tape = Tape()
    c = tape.leaf(c0)
    (g,) = grad(loss_at(c), [c])
    num = central_difference(lambda z: loss_at(z).item(), c0, 1e-5)
    assert rel_err(g.value, num) < 1e-4


def test_mask_tiles_across_channels(rng):
    com = AttentionMask.create(4, 4, 2, sigma=1.0, hidden=3, grid=(2, 2), seed=0)
    x = np.ones((3, 32))
    out = apply_mask(com, x).value
    np.testing.assert_array_equal(out[:, :16], out[:, 16:])


def test_mask_net_requires_spatial_head():
    spec = MlpSpec((16, 4))
    with pytest.raises(ValueError):
        AttentionMask(spec, init_params(spec, 0), 1.0, 4, 4)


def test_default_sigma_is_quarter_side():
    assert AttentionMask.create(16, 16).sigma == 4.0


def test_centres_in_pixel_coordinates():
    com = AttentionMask.create(8, 8, 1, grid=(4, 4), seed=0)
    zero = com.with_params(com.params.zeros_like())
    # uniform softmax -> middle of the frame
    np.testing.assert_allclose(zero.centers(np.ones((2, 64))).value, 3.5, atol=1e-12)


# --- auxiliary targets -----------------------------------------------------

def test_aux_zero_residual_is_cross_entropy(rng):
    com = AuxTarget.create(4, 2, hidden=3, seed=0)
    x, y = rng.normal(size=(3, 4)), np.array([0, 1, 0])
    logits = Tensor(rng.normal(size=(3, 2)))
    loss = aux_target_loss(com, logits, com.targets(x), y, x)
    assert loss.item() == pytest.approx(cross_entropy(logits, y).item(), abs=1e-15)


def test_aux_weight_zero_is_cross_entropy(rng):
    com = AuxTarget.create(4, 2, hidden=3, seed=0).identity()
    x, y = rng.normal(size=(3, 4)), np.array([0, 1, 0])
    logits = Tensor(rng.normal(size=(3, 2)))
    assert aux_target_loss(com, logits, Tensor(rng.normal(size=(3, 2))), y, x).item() == \
        cross_entropy(logits, y).item()


def test_aux_hand_residual():
    com = AuxTarget.create(1, 2, hidden=2, seed=0)
    x = np.zeros((1, 1))
    t = com.targets(x).value
    pred = Tensor(t + np.array([[0.1, -0.2]]))
    logits, y = Tensor(np.zeros((1, 2))), np.array([1])
    extra = aux_target_loss(com, logits, pred, y, x).item() - cross_entropy(logits, y).item()
    assert extra == pytest.approx(0.05, abs=1e-12)


def test_aux_head_mismatch(rng):
    com = AuxTarget.create(4, 2, hidden=3, seed=0)
    with pytest.raises(ShapeMismatchError):
        aux_target_loss(com, Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 3))), np.zeros(3, int), np.zeros((3, 4)))


def test_aux_targets_bounded(rng):
    com = AuxTarget.create(4, 3, hidden=5, seed=1)
    assert np.all(np.abs(com.targets(rng.normal(size=(20, 4)) * 10).value) <= 1)


def test_aux_target_dim_validated():
    with pytest.raises(ValueError):
        AuxTarget.create(4, 0)


def test_per_example_cross_entropy_accepts_probabilities(rng):
    logits = Tensor(rng.normal(size=(2, 3)))
    a = per_example_cross_entropy(logits, np.array([1, 2])).value
    b = per_example_cross_entropy(logits, np.eye(3)[[1, 2]]).value
    np.testing.assert_array_equal(a, b)
