"""Core types: image tensors, targets, model contract enforcement."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from vlmadv.core import (
    ImageTensor,
    ModelError,
    Sample,
    Target,
    finite_diff_grad,
    loss_and_grad,
)
from vlmadv.toys import ToyLinearModel


def _img(shape=(1, 2, 2), fill=0.5):
    return ImageTensor(np.full(shape, fill))


class TestImageTensor:
    def test_holds_copy_and_freezes(self):
        arr = np.full((1, 2, 2), 0.5)
        img = ImageTensor(arr)
        arr[0, 0, 0] = 0.9
        assert img.data[0, 0, 0] == 0.5
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 0.1

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((1, 1, 2, 2)))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageTensor(np.full((1, 1, 1), 1.0001))
        with pytest.raises(ValueError):
            ImageTensor(np.full((1, 1, 1), -1e-9))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ImageTensor(np.full((1, 1, 1), np.nan))
        with pytest.raises(ValueError):
            ImageTensor(np.full((1, 1, 1), np.inf))

    def test_bounds_inclusive(self):
        img = ImageTensor(np.array([[[0.0, 1.0]]]))
        assert img.shape == (1, 1, 2)

    def test_bitwise_equal_distinguishes_signed_zero(self):
        a = ImageTensor(np.array([[[0.0]]]))
        b = ImageTensor(np.array([[[-0.0]]]))
        assert a.data == b.data  # numeric equality
        assert not a.bitwise_equal(b)  # different bit patterns
        assert a.bitwise_equal(ImageTensor(np.array([[[0.0]]])))

    def test_same_shape(self):
        assert _img((1, 2, 2)).same_shape(_img((1, 2, 2)))
        assert not _img((1, 2, 2)).same_shape(_img((2, 2, 1)))

    @given(hnp.arrays(np.float64, (1, 2, 3),
                      elements=st.floats(0.0, 1.0, allow_nan=False)))
    @settings(max_examples=50)
    def test_accepts_any_unit_box_array(self, arr):
        img = ImageTensor(arr)
        assert img.bitwise_equal(ImageTensor(arr))


class TestTarget:
    def test_class_index(self):
        t = Target.class_index(3)
        assert (t.kind, t.value) == ("class_index", 3)

    def test_class_index_rejects_negative_and_bool(self):
        with pytest.raises(ValueError):
            Target.class_index(-1)
        with pytest.raises(ValueError):
            Target.class_index(True)

    def test_token_sequence(self):
        t = Target.token_sequence([1, 0, 2])
        assert t.value == (1, 0, 2)
        with pytest.raises(ValueError):
            Target.token_sequence([])
        with pytest.raises(ValueError):
            Target.token_sequence([1, -2])

    def test_reference_set(self):
        t = Target.reference_set(["a cat", "a dog"])
        assert t.value == ("a cat", "a dog")
        with pytest.raises(ValueError):
            Target.reference_set([])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            Target("mystery", 0)


class TestSample:
    def test_needs_inputs(self):
        with pytest.raises(ValueError):
            Sample("s", (), "p", Target.class_index(0))

    def test_holds_fields(self):
        s = Sample("s1", (_img(),), "prompt", Target.class_index(1))
        assert s.id == "s1" and len(s.inputs) == 1


class _BrokenModel(ToyLinearModel):
    """Wraps the linear toy to violate the contract on demand."""

    def __init__(self, mode):
        super().__init__(seed=0, input_shape=(1, 2, 2), num_classes=3)
        self._mode = mode

    def loss_and_grad(self, inputs, prompt, target):
        loss, grads = super().loss_and_grad(inputs, prompt, target)
        if self._mode == "nan-loss":
            return float("nan"), grads
        if self._mode == "bad-shape":
            return loss, [g.reshape(-1) for g in grads]
        if self._mode == "nan-grad":
            bad = [g.copy() for g in grads]
            bad[0][0, 0, 0] = float("inf")
            return loss, bad
        if self._mode == "missing-grad":
            return loss, []
        return loss, grads


class TestLossAndGradValidation:
    def test_slot_count_enforced(self):
        model = ToyLinearModel(0, input_shape=(1, 2, 2))
        with pytest.raises(ValueError):
            loss_and_grad(model, [_img(), _img()], "", Target.class_index(0))

    @pytest.mark.parametrize("mode", ["nan-loss", "bad-shape", "nan-grad",
                                      "missing-grad"])
    def test_contract_violations_raise(self, mode):
        model = _BrokenModel(mode)
        with pytest.raises(ModelError):
            loss_and_grad(model, [_img()], "", Target.class_index(0))

    def test_clean_path_returns_floats(self):
        model = ToyLinearModel(1, input_shape=(1, 2, 2))
        loss, grads = loss_and_grad(model, [_img()], "", Target.class_index(0))
        assert isinstance(loss, float) and np.isfinite(loss)
        assert grads[0].shape == (1, 2, 2) and grads[0].dtype == np.float64


class TestFiniteDiff:
    def test_matches_analytic_on_linear_toy(self):
        model = ToyLinearModel(5, input_shape=(1, 2, 3), num_classes=4)
        x = [ImageTensor(np.linspace(0.2, 0.8, 6).reshape(1, 2, 3))]
        target = Target.class_index(2)
        _, analytic = loss_and_grad(model, x, "", target)
        numeric = finite_diff_grad(model, x, "", target)
        assert np.allclose(analytic[0], numeric[0], atol=1e-7)

    def test_rejects_boundary_points(self):
        model = ToyLinearModel(5, input_shape=(1, 1, 1))
        with pytest.raises(ValueError):
            finite_diff_grad(model, [_img((1, 1, 1), 0.0)], "",
                             Target.class_index(0))
        with pytest.raises(ValueError):
            finite_diff_grad(model, [_img((1, 1, 1), 1.0)], "",
                             Target.class_index(0))

    def test_rejects_bad_step(self):
        model = ToyLinearModel(5, input_shape=(1, 1, 1))
        with pytest.raises(ValueError):
            finite_diff_grad(model, [_img((1, 1, 1))], "",
                             Target.class_index(0), h=0.0)
