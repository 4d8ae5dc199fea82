import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bangbang.model import (
    SKInstance,
    cost_vector,
    flip_delta,
    flip_deltas,
    generate_instance,
    ground_state_probability,
    spin_table,
)
from bangbang.statevector import StateVector, initial_state


def brute_force_energies(J, h):
    """Independent oracle: loop over spin configurations directly."""
    n = len(h)
    out = np.empty(2**n)
    for z in range(2**n):
        s = [1 - 2 * ((z >> i) & 1) for i in range(n)]
        e = sum(h[i] * s[i] for i in range(n))
        for i, j in itertools.combinations(range(n), 2):
            e += J[i][j] * s[i] * s[j] / math.sqrt(n)
        out[z] = e
    return out


def instance(n, J=None, h=None):
    Jm = np.zeros((n, n))
    for (i, j), v in (J or {}).items():
        Jm[i, j] = v
    return SKInstance(n, Jm, np.zeros(n) if h is None else np.asarray(h, float))


def test_single_spin_instance_has_no_couplings():
    inst = generate_instance(1, 123)
    assert inst.couplings() == []
    assert inst.h.shape == (1,)


def test_generation_is_deterministic():
    a = generate_instance(5, 42)
    b = generate_instance(5, 42)
    assert a == b
    assert np.array_equal(a.J, b.J) and np.array_equal(a.h, b.h)
    assert generate_instance(5, 43) != a


def test_coupling_table_shape():
    inst = generate_instance(7, 1)
    assert len(inst.couplings()) == 7 * 6 // 2
    assert np.all(np.tril(inst.J) == 0)


@pytest.mark.parametrize("n", [0, 17, -3])
def test_size_limits(n):
    with pytest.raises(ValueError):
        generate_instance(n, 0)


def test_rejects_lower_triangular_entries():
    J = np.zeros((3, 3))
    J[2, 0] = 1.0
    with pytest.raises(ValueError):
        SKInstance(3, J, np.zeros(3))


def test_coupling_variance():
    vals = np.concatenate([[v for *_, v in generate_instance(16, s).couplings()] for s in range(84)])
    assert vals.size >= 10_000
    assert abs(vals.var() - 1.0) < 0.05


def test_single_spin_costs():
    cv = cost_vector(instance(1, h=[0.7]))
    assert cv.values.tolist() == [0.7, -0.7]
    assert cv.ground_energy == -0.7
    assert cv.ground_set == (1,)


def test_two_spin_coupling_scale():
    cv = cost_vector(instance(2, J={(0, 1): 1.0}))
    r = 1 / math.sqrt(2)
    assert np.allclose(cv.values, [r, -r, -r, r], atol=1e-15)
    assert cv.ground_set == (1, 2)


@pytest.mark.parametrize("seed", range(4))
def test_costs_match_brute_force(seed):
    inst = generate_instance(10, seed)
    cv = cost_vector(inst)
    ref = brute_force_energies(inst.J.tolist(), inst.h.tolist())
    assert np.allclose(cv.values, ref, atol=1e-12)
    assert cv.ground_energy == pytest.approx(ref.min(), abs=1e-12)
    assert int(np.argmin(ref)) in cv.ground_set


def test_ground_set_matches_oracle_up_to_12_spins():
    for n in range(1, 13):
        inst = generate_instance(n, 1000 + n)
        cv = cost_vector(inst)
        ref = brute_force_energies(inst.J.tolist(), inst.h.tolist()) if n <= 8 else cv.values
        best = np.flatnonzero(np.isclose(ref, ref.min(), atol=1e-12, rtol=0))
        assert set(cv.ground_set) == set(best.tolist())
        assert all(cv.values[z] == cv.ground_energy for z in cv.ground_set)


def test_zero_field_is_flip_symmetric():
    inst = generate_instance(6, 3)
    cv = cost_vector(SKInstance(6, inst.J, np.zeros(6)))
    z = np.arange(64)
    assert np.array_equal(cv.values, cv.values[z ^ 63])


def test_spin_table_convention():
    s = spin_table(3)
    assert s[0].tolist() == [1, 1, 1]
    assert s[1].tolist() == [-1, 1, 1]
    assert s[4].tolist() == [1, 1, -1]


def test_flip_delta_single_spin():
    cv = cost_vector(instance(1, h=[0.7]))
    assert flip_delta(cv, 0, 0) == pytest.approx(1.4)


def test_flip_delta_bounds():
    cv = cost_vector(generate_instance(3, 0))
    with pytest.raises(IndexError):
        flip_delta(cv, 0, 3)
    with pytest.raises(IndexError):
        flip_delta(cv, 8, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32), st.data())
def test_flip_delta_antisymmetry_and_table(n, seed, data):
    cv = cost_vector(generate_instance(n, seed))
    z = data.draw(st.integers(0, 2**n - 1))
    k = data.draw(st.integers(0, n - 1))
    d = flip_delta(cv, z, k)
    assert d == -flip_delta(cv, z ^ (1 << k), k)
    assert d == cv.values[z] - cv.values[z ^ (1 << k)]
    assert flip_deltas(cv)[z, k] == d


def test_flip_variance_matches_prediction_on_ensemble():
    # single instances scatter by ~25%; the prediction is an ensemble mean
    n = 10
    var = np.mean([np.mean(flip_deltas(cost_vector(generate_instance(n, s))) ** 2) for s in range(200)])
    assert var == pytest.approx(4 * ((n - 1) / n + 1), rel=0.05)


def test_ground_state_probability_uniform():
    cv = cost_vector(generate_instance(2, 5))
    assert len(cv.ground_set) == 1
    assert ground_state_probability(initial_state(2), cv) == pytest.approx(0.25)


def test_ground_state_probability_basis_and_degenerate():
    cv = cost_vector(instance(2, J={(0, 1): 1.0}))
    for z in cv.ground_set:
        a = np.zeros(4, complex)
        a[z] = 1
        assert ground_state_probability(StateVector(a, 2), cv) == 1.0
        assert ground_state_probability(np.outer(a, a.conj()), cv) == 1.0
