#!/usr/bin/env python3
"""
Tests for Haar sampling, random streams and the small numeric helpers
"""

import numpy as np
import pytest
from scipy import stats

from qwalk_lab.errors import DimensionError, RangeError
from qwalk_lab.numcore import (
    as_complex_matrix,
    dft_matrix,
    haar_unitary,
    make_rng,
    spawn_streams,
    unitarity_defect,
    wrap_phase,
    wrap_to_pi,
)


def test_haar_is_unitary():
    for dim in (1, 2, 7, 64, 370):
        u = haar_unitary(dim, seed=dim)
        assert u.matrix.shape == (dim, dim)
        assert unitarity_defect(u.matrix) < 1e-10


def test_haar_reproducible_and_seed_sensitive():
    a = haar_unitary(16, seed=5).matrix
    b = haar_unitary(16, seed=5).matrix
    c = haar_unitary(16, seed=6).matrix
    assert np.array_equal(a, b)
    assert np.max(np.abs(a - c)) > 0.01


def test_haar_single_mode_is_a_phase():
    u = haar_unitary(1, seed=3).matrix
    assert abs(abs(u[0, 0]) - 1.0) < 1e-12


def test_haar_rejects_empty_dimension():
    with pytest.raises(DimensionError):
        haar_unitary(0, seed=1)


def test_haar_corner_phase_is_uniform():
    phases = np.array([np.angle(haar_unitary(4, seed=s).matrix[0, 0]) for s in range(600)])
    result = stats.kstest(phases, "uniform", args=(-np.pi, 2 * np.pi))
    assert result.pvalue > 0.01


def test_haar_corner_power_follows_beta_law():
    # |U_00|^2 of an n x n Haar unitary is Beta(1, n - 1)
    n = 5
    power = np.array([abs(haar_unitary(n, seed=1000 + s).matrix[0, 0]) ** 2 for s in range(600)])
    result = stats.kstest(power, "beta", args=(1, n - 1))
    assert result.pvalue > 0.01


def test_haar_mean_power_is_uniform_over_entries():
    dim, draws = 16, 2000
    power = np.array([np.abs(haar_unitary(dim, seed=s).matrix) ** 2 for s in range(draws)])
    mean = power.mean(axis=0)
    standard_error = power.std(axis=0, ddof=1) / np.sqrt(draws)
    assert np.all(np.abs(mean - 1 / dim) < 5 * standard_error)
    assert np.allclose(power.sum(axis=2), 1.0)


def test_unitarity_defect_rejects_rectangular():
    with pytest.raises(DimensionError):
        unitarity_defect(np.ones((2, 3)))


def test_unitarity_defect_of_scaled_identity():
    assert unitarity_defect(2 * np.eye(3)) == pytest.approx(3.0)


def test_as_complex_matrix_checks():
    with pytest.raises(DimensionError):
        as_complex_matrix(np.ones(3))
    with pytest.raises(DimensionError):
        as_complex_matrix(np.ones((0, 3)))
    with pytest.raises(ValueError):
        as_complex_matrix([[1.0, np.nan]])


def test_make_rng_range():
    with pytest.raises(RangeError):
        make_rng(-1)
    assert make_rng(11).integers(1 << 30) == make_rng(11).integers(1 << 30)


def test_spawned_streams_are_independent_and_reproducible():
    first = [g.standard_normal(4) for g in spawn_streams(9, 3)]
    again = [g.standard_normal(4) for g in spawn_streams(9, 3)]
    for a, b in zip(first, again):
        assert np.array_equal(a, b)
    assert not np.array_equal(first[0], first[1])


def test_dft_matrix_is_unitary():
    assert unitarity_defect(dft_matrix(12)) < 1e-12


def test_phase_wrapping():
    wrapped = wrap_phase(np.array([-1e-18, 2 * np.pi, 7.0, -np.pi]))
    assert np.all(wrapped >= 0) and np.all(wrapped < 2 * np.pi)
    assert wrapped[1] == pytest.approx(0.0)
    assert wrap_to_pi(3 * np.pi / 2) == pytest.approx(-np.pi / 2)


if __name__ == "__main__":
    print("🔍 TESTING NUMCORE")
    print("=" * 50)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"   ✅ {name}")
