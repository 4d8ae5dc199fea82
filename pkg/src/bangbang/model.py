"""SK spin-glass instances and their classical cost tables.

Basis-state convention: bit ``k`` of the integer index ``z`` is spin ``k``;
a bit value of 0 maps to ``s = +1`` and 1 maps to ``s = -1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_QUBITS = 16
RNG_NAME = "numpy.PCG64/standard_normal"


@dataclass(frozen=True)
class SKInstance:
    """All-to-all Ising instance with Gaussian couplings and fields.

    ``J`` is the strictly upper-triangular coupling table stored as a dense
    ``(n, n)`` array with zeros on and below the diagonal.
    """

    n: int
    J: np.ndarray
    h: np.ndarray
    seed: int | None = None
    rng: str = RNG_NAME

    def __post_init__(self):
        if not 1 <= self.n <= MAX_QUBITS:
            raise ValueError(f"n must be in [1, {MAX_QUBITS}], got {self.n}")
        J = np.asarray(self.J, dtype=float)
        h = np.asarray(self.h, dtype=float)
        if J.shape != (self.n, self.n) or h.shape != (self.n,):
            raise ValueError("coupling/field shapes do not match n")
        if np.any(np.tril(J) != 0.0):
            raise ValueError("J must be strictly upper triangular")
        J.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "h", h)

    def couplings(self):
        """List of ``(i, j, J_ij)`` for ``i < j``."""
        iu, ju = np.triu_indices(self.n, k=1)
        return [(int(i), int(j), float(self.J[i, j])) for i, j in zip(iu, ju)]

    def __eq__(self, other):
        if not isinstance(other, SKInstance):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.J, other.J)
            and np.array_equal(self.h, other.h)
        )

    __hash__ = None


def generate_instance(n: int, seed: int) -> SKInstance:
    """Draw an instance with unit-variance normal J_ij (i<j) and h_i.

    Couplings are drawn first in row-major ``i<j`` order, then the fields.
    """
    if not 1 <= n <= MAX_QUBITS:
        raise ValueError(f"n must be in [1, {MAX_QUBITS}], got {n}")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    J = np.zeros((n, n))
    J[iu, ju] = rng.standard_normal(iu.size)
    h = rng.standard_normal(n)
    return SKInstance(n=n, J=J, h=h, seed=int(seed))


def spin_table(n: int) -> np.ndarray:
    """``(2**n, n)`` array of spins s_k(z) in {+1, -1}."""
    z = np.arange(2**n)[:, None]
    bits = (z >> np.arange(n)[None, :]) & 1
    return 1 - 2 * bits.astype(np.int8)


@dataclass(frozen=True)
class CostVector:
    values: np.ndarray
    ground_energy: float
    ground_set: tuple = field(default=())

    @property
    def n(self) -> int:
        return int(self.values.size).bit_length() - 1

    @property
    def max_energy(self) -> float:
        return float(self.values.max())


def cost_vector(inst: SKInstance) -> CostVector:
    """Energies of every basis state plus the exhaustive ground-state scan."""
    s = spin_table(inst.n).astype(float)
    pair = np.einsum("zi,ij,zj->z", s, inst.J, s)
    values = pair / np.sqrt(inst.n) + s @ inst.h
    values.setflags(write=False)
    e0 = values.min()
    ground = tuple(int(z) for z in np.flatnonzero(values == e0))
    return CostVector(values=values, ground_energy=float(e0), ground_set=ground)


def flip_delta(cv: CostVector, z: int, k: int) -> float:
    """C_z - C_z' where z' is z with bit k flipped."""
    n = cv.n
    if not 0 <= k < n:
        raise IndexError(f"spin index {k} out of range for n={n}")
    if not 0 <= z < cv.values.size:
        raise IndexError(f"basis index {z} out of range")
    return float(cv.values[z] - cv.values[z ^ (1 << k)])


def flip_deltas(cv: CostVector) -> np.ndarray:
    """All ``(2**n, n)`` single-flip differences at once."""
    z = np.arange(cv.values.size)
    return np.stack(
        [cv.values - cv.values[z ^ (1 << k)] for k in range(cv.n)], axis=1
    )


def ground_state_probability(state, cv: CostVector) -> float:
    """Total weight on the (possibly degenerate) ground set.

    Accepts an amplitude vector or a density matrix.
    """
    arr = getattr(state, "amps", None)
    if arr is None:
        arr = getattr(state, "rho", state)
    arr = np.asarray(arr)
    idx = list(cv.ground_set)
    if arr.ndim == 2:
        return float(np.real(arr[idx, idx]).sum())
    return float(np.sum(np.abs(arr[idx]) ** 2))
