"""Tests for the synthetic phantom generator."""

import numpy as np
import pytest

from imt.errors import InvalidInputError
from imt.imgstack import load_stack
from imt.phantom import make_phantom, write_phantom_set


def test_same_seed_is_bitwise_identical():
    a = make_phantom(4, 32, 32, seed=7)
    b = make_phantom(4, 32, 32, seed=7)
    np.testing.assert_array_equal(a.data, b.data)


def test_different_seed_or_index_differs():
    a = make_phantom(2, 32, 32, seed=7)
    b = make_phantom(2, 32, 32, seed=8)
    c = make_phantom(2, 32, 32, seed=7, index=1)
    assert not np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_phantom_is_finite_with_nonzero_power():
    stack = make_phantom(3, 48, 40, seed=0)
    assert np.all(np.isfinite(stack.data.view(np.float32)))
    assert float(np.mean(np.abs(stack.data) ** 2)) > 1.0


def test_phantom_has_structure_and_phase():
    stack = make_phantom(2, 64, 64, seed=3)
    mags = np.abs(stack.data)
    # several distinct intensity plateaus, not a flat field
    assert mags.max() > 15.0
    assert np.ptp(mags) > 10.0
    # the phase polynomial makes the imaginary channel non-trivial
    assert float(np.abs(stack.data.imag).max()) > 1.0


def test_slices_deform_smoothly():
    stack = make_phantom(6, 48, 48, seed=11)
    for s in range(5):
        a, b = stack.data[s], stack.data[s + 1]
        delta = np.linalg.norm(a - b) / np.linalg.norm(a)
        assert 0.0 < delta < 0.6


def test_single_slice_phantom():
    stack = make_phantom(1, 24, 24, seed=2)
    assert stack.shape == (1, 24, 24)


def test_phantom_validation():
    with pytest.raises(InvalidInputError):
        make_phantom(0, 32, 32, seed=0)
    with pytest.raises(InvalidInputError):
        make_phantom(2, 2, 32, seed=0)
    with pytest.raises(InvalidInputError):
        make_phantom(2, 32, 32, seed=2**40)


def test_write_phantom_set(tmp_path):
    paths = write_phantom_set(4, 3, 24, 24, seed=5, out_dir=tmp_path)
    assert len(paths) == 4
    assert sorted(p.name for p in paths) == [f"phantom_{k:03d}.imts" for k in range(4)]
    first = load_stack(paths[0])
    assert first.shape == (3, 24, 24)
    # regenerating writes byte-identical files
    blob = paths[2].read_bytes()
    write_phantom_set(4, 3, 24, 24, seed=5, out_dir=tmp_path)
    assert paths[2].read_bytes() == blob
    # stacks within a set differ from each other
    assert not np.array_equal(load_stack(paths[0]).data, load_stack(paths[1]).data)


def test_write_phantom_set_validation(tmp_path):
    with pytest.raises(InvalidInputError):
        write_phantom_set(0, 3, 24, 24, seed=5, out_dir=tmp_path)
