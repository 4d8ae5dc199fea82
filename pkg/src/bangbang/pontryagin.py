"""Costate propagation and first-order optimality checks.

For the energy cost F = sum_z |A_z(T)|^2 C_z the conjugate momenta
Pi_z = P_z + i Q_z obey the same Schroedinger equation as the amplitudes,
with Pi(T) = 2 C A(T). The control Hamiltonian is Im <Pi|H_g|A> and the
switching function is its derivative with respect to g,

    phi(t) = Im <Pi(t)| C - B |A(t)>,

which is also the functional derivative dF/dg(t). phi < 0 selects g = 1,
phi > 0 selects g = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CostVector, flip_deltas
from .statevector import (
    BangBangProtocol,
    Protocol,
    StateVector,
    apply_mixer_op,
    cost_phase,
    energy,
    initial_state,
    mixer_rotation,
    propagate_segment,
)

GRID_PER_UNIT = 1000
BISECT_TOL = 1e-10
SINGULAR_REL = 1e-8
SINGULAR_WINDOW = 10


@dataclass
class CostateVector:
    moms: np.ndarray
    n: int

    @property
    def norm(self) -> float:
        return float(np.vdot(self.moms, self.moms).real)


@dataclass
class SwitchingTrace:
    times: np.ndarray
    phi: np.ndarray
    g: np.ndarray
    switch_times: np.ndarray


@dataclass
class Certificate:
    status: str
    interior_fraction: float
    phi_max: float
    switch_times: list = field(default_factory=list)
    switch_residuals: list = field(default_factory=list)
    segment_violations: list = field(default_factory=list)
    singular_windows: list = field(default_factory=list)
    trace: SwitchingTrace | None = None

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "interior_fraction": self.interior_fraction,
            "phi_max": self.phi_max,
            "switch_times": [float(t) for t in self.switch_times],
            "switch_residuals": [float(r) for r in self.switch_residuals],
            "segment_violations": [float(v) for v in self.segment_violations],
            "singular_windows": [[float(a), float(b)] for a, b in self.singular_windows],
        }


def _segments(p):
    if isinstance(p, BangBangProtocol):
        return list(zip(p.values, p.durations))
    return list(p.segments)


def _edges(segs):
    return np.concatenate([[0.0], np.cumsum([dt for _, dt in segs])])


def evolve_between(amps, p, t0: float, t1: float, cv: CostVector) -> np.ndarray:
    """Propagate raw amplitudes (any leading batch shape) from t0 to t1.

    Works in either time direction; segment boundaries are honoured.
    """
    if t0 == t1:
        return amps
    segs = _segments(p)
    edges = _edges(segs)
    n = cv.n
    lo, hi = min(t0, t1), max(t0, t1)
    pieces = []
    for (g, _), a, b in zip(segs, edges[:-1], edges[1:]):
        a2, b2 = max(a, lo), min(b, hi)
        if b2 > a2:
            pieces.append((g, b2 - a2))
    if t1 < t0:
        pieces = [(g, -dt) for g, dt in reversed(pieces)]
    for g, dt in pieces:
        amps = propagate_segment(amps, g, dt, cv.values, n)
    return amps


def terminal_costate(final_state: StateVector, cv: CostVector) -> CostateVector:
    return CostateVector(2.0 * cv.values * final_state.amps, final_state.n)


def backward_sweep(costate_T: CostateVector, p, cv: CostVector, times=None):
    """Costate at the requested times, integrated backwards from T.

    Returns ``(times, moms)`` with ``moms[j]`` the costate at ``times[j]``.
    Default times are the segment boundaries.
    """
    T = p.T
    if times is None:
        times = _edges(_segments(p))
    times = np.asarray(times, dtype=float)
    if np.any(times < -1e-12) or np.any(times > T + 1e-12):
        raise ValueError("requested times outside [0, T]")
    order = np.argsort(-times, kind="stable")
    out = np.empty((times.size, costate_T.moms.size), dtype=complex)
    cur, t = costate_T.moms, T
    for j in order:
        cur = evolve_between(cur, p, t, times[j], cv)
        t = times[j]
        out[j] = cur
    return times, out


def forward_sweep(state0: StateVector, p, cv: CostVector, times):
    times = np.asarray(times, dtype=float)
    order = np.argsort(times, kind="stable")
    out = np.empty((times.size, state0.amps.size), dtype=complex)
    cur, t = state0.amps, 0.0
    for j in order:
        cur = evolve_between(cur, p, t, times[j], cv)
        t = times[j]
        out[j] = cur
    return times, out


def switching_function(state_t, costate_t, cv: CostVector) -> float:
    a = state_t.amps if isinstance(state_t, StateVector) else np.asarray(state_t)
    pi = costate_t.moms if isinstance(costate_t, CostateVector) else np.asarray(costate_t)
    if a.shape != pi.shape or a.shape[-1] != cv.values.size:
        raise ValueError("state/costate dimension mismatch")
    n = cv.n
    return _phi(a, pi, cv.values, n)


def _phi(a, pi, values, n):
    diff = values * a - apply_mixer_op(a, n)
    return np.imag(np.sum(np.conj(pi) * diff, axis=-1))


def _control_hamiltonian(a, pi, g, values, n):
    """Im <Pi|H_g|A>; constant along a constant-g segment."""
    h = np.zeros_like(a)
    if g != 0.0:
        h += g * values * a
    if g != 1.0:
        h += (1.0 - g) * apply_mixer_op(a, n)
    return float(np.imag(np.vdot(pi, h)))


def state_and_costate(p, cv: CostVector, state0: StateVector | None = None):
    """Initial state and the costate propagated back to t = 0."""
    if state0 is None:
        state0 = initial_state(cv.n)
    a0 = state0.amps
    aT = evolve_between(a0, p, 0.0, p.T, cv)
    piT = 2.0 * cv.values * aT
    pi0 = evolve_between(piT, p, p.T, 0.0, cv)
    return a0, pi0, aT


def pulse_gradient(bb: BangBangProtocol, cv: CostVector, state0: StateVector | None = None):
    """Cost and dF/dd_i for every pulse of a bang-bang protocol.

    ``dF/dd_i`` is the change from lengthening pulse ``i`` alone (total time
    not held fixed); it equals the control Hamiltonian on that pulse.
    """
    n = cv.n
    values = cv.values
    if state0 is None:
        state0 = initial_state(n)
    gs = bb.values
    durs = bb.durations
    m = len(durs)
    starts = np.empty((m, values.size), dtype=complex)
    a = state0.amps
    for i in range(m):
        starts[i] = a
        a = cost_phase(a, durs[i], values) if gs[i] == 1.0 else mixer_rotation(a, durs[i], n)
    cost = energy(a, cv)
    pi = 2.0 * values * a
    grad = np.empty(m)
    for i in range(m - 1, -1, -1):
        if gs[i] == 1.0:
            pi = cost_phase(pi, -durs[i], values)
            grad[i] = np.imag(np.vdot(pi, values * starts[i]))
        else:
            pi = mixer_rotation(pi, -durs[i], n)
            grad[i] = np.imag(np.vdot(pi, apply_mixer_op(starts[i], n)))
    return cost, grad


def switch_time_gradient(bb: BangBangProtocol, cv: CostVector, state0=None):
    """dF/dtau_k for every switch, other switches held fixed.

    Equals (g_before - g_after) * phi(tau_k).
    """
    cost, grad = pulse_gradient(bb, cv, state0)
    return cost, grad[:-1] - grad[1:]


def switching_trace(p, cv: CostVector, grid_per_unit: int = GRID_PER_UNIT, state0=None) -> SwitchingTrace:
    """Sample phi on a uniform grid and locate its sign changes."""
    a0, pi0, _ = state_and_costate(p, cv, state0)
    T = p.T
    npts = max(2, int(np.ceil(T * grid_per_unit)) + 1)
    times = np.linspace(0.0, T, npts)
    n = cv.n
    values = cv.values
    phi = np.empty(npts)
    switches = []
    pair = np.stack([a0, pi0])
    phi[0] = _phi(pair[0], pair[1], values, n)
    for j in range(1, npts):
        prev = pair
        pair = evolve_between(pair, p, times[j - 1], times[j], cv)
        phi[j] = _phi(pair[0], pair[1], values, n)
        if np.sign(phi[j]) != np.sign(phi[j - 1]) and phi[j] != 0.0:
            if phi[j - 1] == 0.0:
                switches.append(times[j - 1])
            else:
                switches.append(_bisect(prev, p, cv, times[j - 1], times[j], phi[j - 1]))
    g = p.control_at(times) if isinstance(p, Protocol) else p.to_protocol().control_at(times)
    return SwitchingTrace(times, phi, g, np.array(switches))


def _bisect(pair, p, cv, lo, hi, phi_lo):
    n = cv.n
    t_lo, base = lo, pair
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        cur = evolve_between(base, p, t_lo, mid, cv)
        val = _phi(cur[0], cur[1], cv.values, n)
        if np.sign(val) == np.sign(phi_lo):
            lo, base, t_lo = mid, cur, mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def phi_at(p, cv: CostVector, times, state0=None) -> np.ndarray:
    a0, pi0, _ = state_and_costate(p, cv, state0)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    order = np.argsort(times)
    out = np.empty(times.size)
    pair, t = np.stack([a0, pi0]), 0.0
    for j in order:
        pair = evolve_between(pair, p, t, times[j], cv)
        t = times[j]
        out[j] = _phi(pair[0], pair[1], cv.values, cv.n)
    return out


def pulse_end_root(state_t0, costate_t0, cv: CostVector, search_horizon: float,
                   grid_per_unit: int = GRID_PER_UNIT):
    """First root after t0 of w(s) = sum_{z,k} Im[(exp(-i dC_zk s) - 1) A_z conj(Pi_zbar(k))].

    Valid at the start of a g = 1 pulse. Returns the elapsed time ``s`` of
    the root or ``None`` when none occurs within ``search_horizon``.
    """
    if search_horizon <= 0:
        raise ValueError("search horizon must be positive")
    a = state_t0.amps if isinstance(state_t0, StateVector) else np.asarray(state_t0)
    pi = costate_t0.moms if isinstance(costate_t0, CostateVector) else np.asarray(costate_t0)
    n = cv.n
    z = np.arange(a.size)
    dC = flip_deltas(cv)
    weight = np.stack([a * np.conj(pi[z ^ (1 << k)]) for k in range(n)], axis=1)
    dC = dC.ravel()
    weight = weight.ravel()

    def w(s):
        s = np.atleast_1d(s)
        return np.imag((np.exp(-1j * np.outer(s, dC)) - 1.0) @ weight)

    npts = max(2, int(np.ceil(search_horizon * grid_per_unit)) + 1)
    grid = np.linspace(0.0, search_horizon, npts)[1:]
    vals = np.concatenate([w(chunk) for chunk in np.array_split(grid, max(1, grid.size // 512))])
    sign0 = np.sign(vals[0])
    if sign0 == 0.0:
        return float(grid[0])
    flips = np.flatnonzero(np.sign(vals) != sign0)
    if flips.size == 0:
        return None
    j = flips[0]
    if vals[j] == 0.0:
        return float(grid[j])
    lo, hi = grid[j - 1], grid[j]
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if np.sign(w(mid)[0]) == sign0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def w_function(state_t0, costate_t0, cv: CostVector, s) -> np.ndarray:
    a = state_t0.amps if isinstance(state_t0, StateVector) else np.asarray(state_t0)
    pi = costate_t0.moms if isinstance(costate_t0, CostateVector) else np.asarray(costate_t0)
    z = np.arange(a.size)
    dC = flip_deltas(cv).ravel()
    weight = np.stack([a * np.conj(pi[z ^ (1 << k)]) for k in range(cv.n)], axis=1).ravel()
    s = np.atleast_1d(np.asarray(s, dtype=float))
    return np.imag((np.exp(-1j * np.outer(s, dC)) - 1.0) @ weight)


def certify_protocol(p, cv: CostVector, switch_tol: float = 1e-3, sign_tol: float = 1e-3,
                     grid_per_unit: int = GRID_PER_UNIT, state0=None) -> Certificate:
    """First-order optimality report for a candidate protocol.

    Tolerances are relative to ``max_t |phi(t)|``. A protocol passes when it
    is bang-bang, phi vanishes at every interior switch and phi never has the
    wrong sign on a segment (phi <= 0 where g = 1, phi >= 0 where g = 0).
    """
    if isinstance(p, BangBangProtocol):
        p = p.merged()
        prot = p.to_protocol()
    else:
        prot = p
    segs = list(prot.segments)
    T = prot.T
    interior = sum(dt for g, dt in segs if 0.0 < g < 1.0) / T

    trace = switching_trace(p, cv, grid_per_unit, state0)
    phi_abs = np.abs(trace.phi)
    phi_max = float(phi_abs.max())
    scale = phi_max if phi_max > 0 else 1.0

    edges = _edges(segs)
    switches, residuals = [], []
    interior_switch = [k for k in range(1, len(segs)) if segs[k][0] != segs[k - 1][0]]
    if interior_switch:
        vals = phi_at(p, cv, edges[interior_switch], state0)
        for k, v in zip(interior_switch, vals):
            switches.append(float(edges[k]))
            residuals.append(abs(float(v)) / scale)

    violations = []
    for (g, _), a, b in zip(segs, edges[:-1], edges[1:]):
        mask = (trace.times > a) & (trace.times < b)
        if not mask.any():
            violations.append(0.0)
            continue
        seg_phi = trace.phi[mask]
        if g == 1.0:
            bad = max(0.0, float(seg_phi.max()))
        elif g == 0.0:
            bad = max(0.0, float(-seg_phi.min()))
        else:
            bad = float(np.abs(seg_phi).max())
        violations.append(bad / scale)

    singular = []
    small = phi_abs < SINGULAR_REL * scale
    run_start = None
    for j, flag in enumerate(np.append(small, False)):
        if flag and run_start is None:
            run_start = j
        elif not flag and run_start is not None:
            if j - run_start > SINGULAR_WINDOW:
                singular.append((trace.times[run_start], trace.times[j - 1]))
            run_start = None

    if phi_max == 0.0 or singular:
        status = "possibly singular"
    elif interior > 0.0:
        status = "fail"
    elif all(r < switch_tol for r in residuals) and all(v < sign_tol for v in violations):
        status = "pass"
    else:
        status = "fail"
    return Certificate(status, interior, phi_max, switches, residuals, violations, singular, trace)
