"""Exact closed-system evolution under H(g) = g C + (1 - g) B, B = -sum_k X_k.

The two bang kernels are exact: the cost pulse is a diagonal phase and the
mixer pulse is a product of single-qubit rotations. Segments with an
intermediate control value are integrated by a fourth-order composition of
the symmetric (Strang) splitting of those two kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import CostVector, ground_state_probability

SEGMENT_TOL = 1e-9
PROTOCOL_TOL = 1e-12
RAMP_DT = 0.005

# Yoshida triple-jump weights for a symmetric second-order step.
_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_W0 = 1.0 - 2.0 * _W1
_YOSHIDA = (_W1, _W0, _W1)


@dataclass
class StateVector:
    amps: np.ndarray
    n: int

    def copy(self) -> "StateVector":
        return StateVector(self.amps.copy(), self.n)

    @property
    def norm(self) -> float:
        return float(np.vdot(self.amps, self.amps).real)


@dataclass(frozen=True)
class Protocol:
    """Piecewise-constant control: ordered ``(g, dt)`` segments."""

    segments: tuple
    T: float = field(default=None)

    def __post_init__(self):
        segs = tuple((float(g), float(dt)) for g, dt in self.segments)
        for g, dt in segs:
            if not 0.0 <= g <= 1.0:
                raise ValueError(f"control value {g} outside [0, 1]")
            if dt < 0.0:
                raise ValueError(f"negative segment duration {dt}")
        total = math.fsum(dt for _, dt in segs)
        T = total if self.T is None else float(self.T)
        if T <= 0.0:
            raise ValueError("total time must be positive")
        if abs(total - T) > PROTOCOL_TOL * max(1.0, T):
            raise ValueError(f"segment durations sum to {total}, expected {T}")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "T", T)

    @classmethod
    def from_slices(cls, g, T: float) -> "Protocol":
        g = np.asarray(g, dtype=float)
        dt = T / g.size
        return cls(tuple((gi, dt) for gi in g), T)

    @property
    def gs(self) -> np.ndarray:
        return np.array([g for g, _ in self.segments])

    @property
    def dts(self) -> np.ndarray:
        return np.array([dt for _, dt in self.segments])

    def control_at(self, t) -> np.ndarray:
        """g(t) on the grid ``t``; a switch instant takes the later value."""
        edges = np.cumsum(self.dts)
        idx = np.searchsorted(edges, np.asarray(t), side="right")
        return self.gs[np.clip(idx, 0, len(self.segments) - 1)]

    def is_bang_bang(self, tol: float = 0.0) -> bool:
        g = self.gs
        return bool(np.all((g <= tol) | (g >= 1.0 - tol)))

    def to_bang_bang(self, tol: float = 0.0) -> "BangBangProtocol":
        """Round to the nearest bound and merge; requires bang-bang input."""
        if not self.is_bang_bang(tol):
            raise ValueError("protocol has interior control values")
        gs = (self.gs >= 0.5).astype(int)
        durs = []
        cur = None
        for g, dt in zip(gs, self.dts):
            if dt == 0.0:
                continue
            if g == cur:
                durs[-1] += dt
            else:
                if cur is None:
                    start = int(g)
                durs.append(dt)
                cur = g
        if not durs:
            raise ValueError("protocol has no nonzero segment")
        return BangBangProtocol(start, tuple(durs), self.T)


@dataclass(frozen=True)
class BangBangProtocol:
    """Alternating pulses g = start, 1 - start, start, ... of given lengths."""

    start: int
    durations: tuple
    T: float = field(default=None)

    def __post_init__(self):
        if self.start not in (0, 1):
            raise ValueError("start must be 0 or 1")
        d = tuple(float(x) for x in self.durations)
        if not d or any(x < 0.0 for x in d):
            raise ValueError("durations must be a nonempty list of nonnegative values")
        total = math.fsum(d)
        T = total if self.T is None else float(self.T)
        if T <= 0.0 or abs(total - T) > PROTOCOL_TOL * max(1.0, T):
            raise ValueError(f"durations sum to {total}, expected T={T}")
        object.__setattr__(self, "durations", d)
        object.__setattr__(self, "T", T)

    @property
    def values(self) -> np.ndarray:
        """Control value of every pulse as floats."""
        return ((np.arange(len(self.durations)) + self.start) % 2).astype(float)

    @property
    def switch_times(self) -> np.ndarray:
        return np.cumsum(self.durations)[:-1]

    def merged(self) -> "BangBangProtocol":
        """Drop zero-length pulses and fuse the neighbours they separated."""
        return self.to_protocol().to_bang_bang()

    def to_protocol(self) -> Protocol:
        return Protocol(tuple(zip(self.values, self.durations)), self.T)


def initial_state(n: int) -> StateVector:
    """Uniform superposition, the ground state of B."""
    dim = 2**n
    return StateVector(np.full(dim, 1.0 / math.sqrt(dim), dtype=complex), n)


# ---------------------------------------------------------------- raw kernels


def cost_phase(amps: np.ndarray, gamma: float, values: np.ndarray) -> np.ndarray:
    return np.exp(-1j * gamma * values) * amps


def mixer_rotation(amps: np.ndarray, beta: float, n: int) -> np.ndarray:
    """exp(-i beta B) = prod_k (cos beta + i sin beta X_k)."""
    c, s = math.cos(beta), 1j * math.sin(beta)
    shape = amps.shape
    out = amps
    for k in range(n):
        v = out.reshape(shape[:-1] + (-1, 2, 2**k))
        out = np.empty_like(v)
        out[..., 0, :] = c * v[..., 0, :] + s * v[..., 1, :]
        out[..., 1, :] = c * v[..., 1, :] + s * v[..., 0, :]
    return out.reshape(shape)


def apply_mixer_op(amps: np.ndarray, n: int) -> np.ndarray:
    """B @ amps."""
    shape = amps.shape
    out = np.zeros_like(amps)
    for k in range(n):
        split = shape[:-1] + (-1, 2, 2**k)
        out.reshape(split)[...] -= amps.reshape(split)[..., ::-1, :]
    return out


def _strang(amps, g, dt, values, n):
    amps = mixer_rotation(amps, 0.5 * (1.0 - g) * dt, n)
    amps = cost_phase(amps, g * dt, values)
    return mixer_rotation(amps, 0.5 * (1.0 - g) * dt, n)


def _split_steps(amps, g, dt, steps, values, n):
    h = dt / steps
    for _ in range(steps):
        for w in _YOSHIDA:
            amps = _strang(amps, g, w * h, values, n)
    return amps


def propagate_segment(amps, g, dt, values, n, tol=SEGMENT_TOL):
    """Evolve raw amplitudes through one constant-g segment.

    A negative ``dt`` runs the segment backwards in time.
    """
    if dt == 0.0:
        return amps
    if g == 1.0:
        return cost_phase(amps, dt, values)
    if g == 0.0:
        return mixer_rotation(amps, dt, n)
    steps = max(1, math.ceil(abs(dt) / 0.05))
    prev = _split_steps(amps, g, dt, steps, values, n)
    while True:
        steps *= 2
        cur = _split_steps(amps, g, dt, steps, values, n)
        if np.linalg.norm(cur - prev) < tol or steps > 2**20:
            return cur
        prev = cur


# ----------------------------------------------------------- public operations


def _check_duration(x):
    if x < 0:
        raise ValueError(f"pulse duration must be nonnegative, got {x}")


def apply_cost_pulse(state: StateVector, gamma: float, cv: CostVector) -> StateVector:
    _check_duration(gamma)
    return StateVector(cost_phase(state.amps, gamma, cv.values), state.n)


def apply_mixer_pulse(state: StateVector, beta: float) -> StateVector:
    _check_duration(beta)
    return StateVector(mixer_rotation(state.amps, beta, state.n), state.n)


def _segments(p):
    if isinstance(p, BangBangProtocol):
        return list(zip(p.values, p.durations))
    return list(p.segments)


def evolve_protocol(state: StateVector, p, cv: CostVector, exact_bangs: bool = True) -> StateVector:
    """Propagate through a Protocol or BangBangProtocol segment by segment.

    ``exact_bangs=False`` forces bang segments through the generic split
    integrator, which is only useful as a cross-check.
    """
    if cv.values.size != state.amps.size:
        raise ValueError("protocol/instance size mismatch")
    amps = state.amps
    for g, dt in _segments(p):
        if not exact_bangs and g in (0.0, 1.0) and dt > 0.0:
            amps = _split_steps(amps, g, dt, 1, cv.values, state.n)
        else:
            amps = propagate_segment(amps, g, dt, cv.values, state.n)
    return StateVector(amps, state.n)


def default_ramp_steps(T: float) -> int:
    return max(100, math.ceil(T / RAMP_DT))


def evolve_linear_ramp(state: StateVector, T: float, steps: int | None, cv: CostVector) -> StateVector:
    """g(t) = t/T with midpoint sampling and one Strang step per slice."""
    if steps is None:
        steps = default_ramp_steps(T)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = T / steps
    amps = state.amps
    n = state.n
    # Adjacent half mixer rotations are fused.
    gs = (np.arange(steps) + 0.5) / steps
    amps = mixer_rotation(amps, 0.5 * (1.0 - gs[0]) * dt, n)
    for j, g in enumerate(gs):
        amps = cost_phase(amps, g * dt, cv.values)
        nxt = 0.5 * (1.0 - g) * dt
        if j + 1 < steps:
            nxt += 0.5 * (1.0 - gs[j + 1]) * dt
        amps = mixer_rotation(amps, nxt, n)
    return StateVector(amps, n)


def ramp_protocol(T: float, steps: int | None = None) -> Protocol:
    """Midpoint-sampled linear ramp as an explicit piecewise-constant Protocol."""
    if steps is None:
        steps = default_ramp_steps(T)
    return Protocol.from_slices((np.arange(steps) + 0.5) / steps, T)


def energy(state, cv: CostVector) -> float:
    amps = state.amps if isinstance(state, StateVector) else np.asarray(state)
    return float(np.dot(np.abs(amps) ** 2, cv.values))


def fidelity_error(state, cv: CostVector) -> float:
    return 1.0 - ground_state_probability(state, cv)


def overlap_fidelity(a: StateVector, b: StateVector) -> float:
    return float(abs(np.vdot(a.amps, b.amps)) ** 2)


def dense_mixer(n: int) -> np.ndarray:
    """B = -sum_k X_k as a dense real matrix."""
    dim = 2**n
    z = np.arange(dim)
    B = np.zeros((dim, dim))
    for k in range(n):
        B[z, z ^ (1 << k)] -= 1.0
    return B


def dense_hamiltonian(g: float, cv: CostVector) -> np.ndarray:
    n = cv.n
    return g * np.diag(cv.values) + (1.0 - g) * dense_mixer(n)
