import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from commentaries.params import ParamVector
from commentaries.tensor import ShapeMismatchError, Tape


def _pv(rng):
    return ParamVector.from_arrays(["a", "b", "c"], [rng.normal(size=(2, 3)), rng.normal(size=4), np.ones((1, 1))])


def test_total_dim_and_lookup(rng):
    pv = _pv(rng)
    assert pv.total_dim == 11
    assert pv["b"].shape == (4,)
    with pytest.raises(KeyError):
        pv["missing"]


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 11, elements=st.floats(-1e6, 1e6)))
def test_flatten_unflatten_round_trip(flat):
    pv = _pv(np.random.default_rng(0))
    again = pv.unflatten(flat)
    assert np.array_equal(again.flatten(), flat)
    assert again.shapes == pv.shapes


def test_unflatten_wrong_size(rng):
    with pytest.raises(ShapeMismatchError):
        _pv(rng).unflatten(np.zeros(10))


def test_duplicate_names_rejected():
    with pytest.raises(ValueError):
        ParamVector.from_arrays(["a", "a"], [np.zeros(1), np.zeros(1)])


def test_attach_and_detach(rng):
    pv = _pv(rng)
    tape = Tape()
    on = pv.attach(tape)
    assert all(t.tape is tape for t in on)
    off = on.detach()
    assert all(t.tape is None for t in off)
    assert off.equal(pv)


def test_arithmetic(rng):
    pv = _pv(rng)
    np.testing.assert_allclose((pv + pv).flatten(), 2 * pv.flatten())
    np.testing.assert_allclose((pv - pv).flatten(), 0)
    np.testing.assert_allclose(pv.scale(3.0).flatten(), 3 * pv.flatten())
    assert pv.zeros_like().allclose(pv - pv)
