"""Density-matrix evolution with white-noise dephasing or a weak Ohmic bath.

Both master equations are integrated with fixed-step classical RK4. The
control schedule is treated as piecewise constant: bang-bang pulses exactly,
linear ramps with midpoint-sampled slices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .model import CostVector, SKInstance, cost_vector, ground_state_probability, spin_table
from .statevector import (
    BangBangProtocol,
    Protocol,
    StateVector,
    apply_mixer_op,
    default_ramp_steps,
    dense_hamiltonian,
    initial_state,
)

DEFAULT_STEP = 1e-3
TRACE_DRIFT_PER_TIME = 1e-6
HERMITICITY_TOL = 1e-9
MIN_EIGENVALUE = -1e-6
MAX_HALVINGS = 4


class InvariantViolation(RuntimeError):
    """Raised when a density-matrix invariant breaks beyond tolerance."""


@dataclass
class DensityMatrix:
    rho: np.ndarray
    n: int
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_state(cls, state: StateVector) -> "DensityMatrix":
        a = state.amps
        return cls(np.outer(a, a.conj()), state.n)

    @property
    def trace(self) -> float:
        return float(np.trace(self.rho).real)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.rho + self.rho.conj().T)).min())


@dataclass(frozen=True)
class DephasingConfig:
    W: float

    def __post_init__(self):
        if self.W < 0:
            raise ValueError("W must be nonnegative")


@dataclass(frozen=True)
class RedfieldConfig:
    """Ohmic bath parameters.

    ``secular=True`` keeps only tensor elements with matching Bohr
    frequencies, which makes the generator completely positive; the full
    (non-secular) tensor can produce small negative eigenvalues from pure
    initial states.
    """

    eta: float
    beta: float
    step: float = DEFAULT_STEP
    secular: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.step <= 0:
            raise ValueError("step must be positive")


@dataclass(frozen=True)
class LinearRamp:
    """g(t) = t/T sampled at slice midpoints."""

    T: float
    steps: int | None = None

    def to_protocol(self) -> Protocol:
        steps = default_ramp_steps(self.T) if self.steps is None else self.steps
        return Protocol.from_slices((np.arange(steps) + 0.5) / steps, self.T)


def spectral_density(omega, cfg: RedfieldConfig):
    """Ohmic S(w) = eta w / (1 - exp(-beta w)), with S(0) = eta / beta."""
    w = np.asarray(omega, dtype=float)
    x = cfg.beta * w
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    # w / (1 - e^{-x}) = (1/beta) * x / (-expm1(-x))
    val = np.where(small, 1.0 + 0.5 * x, safe / -np.expm1(-safe)) * cfg.eta / cfg.beta
    return float(val) if np.ndim(val) == 0 else val


def _segments(schedule):
    if isinstance(schedule, LinearRamp):
        schedule = schedule.to_protocol()
    if isinstance(schedule, BangBangProtocol):
        return list(zip(schedule.values, schedule.durations)), schedule.T
    if isinstance(schedule, Protocol):
        return list(schedule.segments), schedule.T
    raise TypeError(f"unsupported schedule type {type(schedule).__name__}")


def _rk4(f, rho, h, steps):
    for _ in range(steps):
        k1 = f(rho)
        k2 = f(rho + 0.5 * h * k1)
        k3 = f(rho + 0.5 * h * k2)
        k4 = f(rho + h * k3)
        rho = rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return rho


def _check(rho, tr0):
    drift = abs(np.trace(rho).real - tr0)
    lam = float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min())
    return drift, lam


def _integrate(rho0, segs, make_rhs, step):
    """Shared driver: RK4 over each constant-control segment with checks.

    ``make_rhs(g)`` returns ``(rhs, to_frame, from_frame)`` for that segment;
    frames let Redfield integrate in the instantaneous eigenbasis.
    """
    for halving in range(MAX_HALVINGS + 1):
        h_max = step / 2**halving
        rho = rho0.astype(complex)
        tr0 = float(np.trace(rho0).real)
        worst = {"trace_drift": 0.0, "hermiticity": 0.0, "min_eigenvalue": np.inf}
        elapsed = 0.0
        ok = True
        cache = {}
        for g, dt in segs:
            if dt == 0.0:
                continue
            if g not in cache:
                if len(cache) > 8:
                    cache.clear()
                cache[g] = make_rhs(g)
            rhs, to_frame, from_frame = cache[g]
            nsteps = max(1, math.ceil(dt / h_max - 1e-9))
            r = to_frame(rho)
            r = _rk4(rhs, r, dt / nsteps, nsteps)
            rho = from_frame(r)
            herm = float(np.abs(rho - rho.conj().T).max())
            rho = 0.5 * (rho + rho.conj().T)
            elapsed += dt
            drift, lam = _check(rho, tr0)
            worst["trace_drift"] = max(worst["trace_drift"], drift)
            worst["hermiticity"] = max(worst["hermiticity"], herm)
            worst["min_eigenvalue"] = min(worst["min_eigenvalue"], lam)
            if drift > TRACE_DRIFT_PER_TIME * max(elapsed, 1.0):
                ok = False
                break
        if ok:
            worst["step"] = h_max
            return rho, worst
    raise InvariantViolation(
        f"trace drift {worst['trace_drift']:.3e} exceeds tolerance even at step {h_max:.2e}"
    )


def _dephasing_rhs_factory(cv: CostVector, W: float):
    n = cv.n
    values = cv.values
    dim = values.size
    spins = spin_table(n).astype(float)
    zdamp = n - spins @ spins.T
    z = np.arange(dim)
    flips = [z ^ (1 << k) for k in range(n)]
    w2 = W * W

    def make(g):
        def rhs(rho):
            out = np.zeros_like(rho)
            if g != 0.0:
                out += -1j * g * (values[:, None] - values[None, :]) * rho
            if g != 1.0:
                b_rho = apply_mixer_op(rho.T, n).T
                rho_b = apply_mixer_op(rho, n)
                out += -1j * (1.0 - g) * (b_rho - rho_b)
            if w2 > 0.0:
                x_part = n * rho
                for f in flips:
                    x_part = x_part - rho[np.ix_(f, f)]
                out -= w2 * (zdamp * rho + x_part)
            return out

        ident = lambda r: r  # noqa: E731
        return rhs, ident, ident

    return make


def _redfield_tensor(A, lam, E, secular):
    """Dissipative Redfield tensor R[a, b, c, d] in the eigenbasis.

    Dense (d^2, d^2) array for the full tensor. With ``secular`` only the
    entries whose Bohr frequencies E_a - E_b and E_c - E_d coincide are
    built, returned as a sparse matrix.
    """
    dim = E.size
    lam_dag = np.conj(np.swapaxes(lam, 1, 2))
    M = np.einsum("iab,ibc->ac", A, lam)
    N = np.einsum("iab,ibc->ac", lam_dag, A)
    if not secular:
        eye = np.eye(dim)
        R = np.einsum("iac,idb->abcd", lam, A) + np.einsum("iac,idb->abcd", A, lam_dag)
        R -= np.einsum("bd,ac->abcd", eye, M)
        R -= np.einsum("ac,db->abcd", eye, N)
        return R.reshape(dim * dim, dim * dim)
    bohr = (E[:, None] - E[None, :]).ravel()
    tol = 1e-9 * max(1.0, float(np.abs(E).max()))
    order = np.argsort(bohr, kind="stable")
    breaks = np.flatnonzero(np.diff(bohr[order]) > tol) + 1
    rows, cols = [], []
    for group in np.split(order, breaks):
        rows.append(np.repeat(group, group.size))
        cols.append(np.tile(group, group.size))
    p = np.concatenate(rows)
    q = np.concatenate(cols)
    ia, ib = np.divmod(p, dim)
    ic, id_ = np.divmod(q, dim)
    vals = np.einsum("ik,ik->k", lam[:, ia, ic], A[:, id_, ib])
    vals += np.einsum("ik,ik->k", A[:, ia, ic], lam_dag[:, id_, ib])
    vals -= np.where(ib == id_, M[ia, ic], 0.0)
    vals -= np.where(ia == ic, N[id_, ib], 0.0)
    return sparse.csr_matrix((vals, (p, q)), shape=(dim * dim, dim * dim))


def _redfield_rhs_factory(cv: CostVector, cfg: RedfieldConfig):
    n = cv.n
    spins = spin_table(n).astype(float)

    def make(g):
        H = dense_hamiltonian(g, cv)
        E, V = np.linalg.eigh(H)
        Vh = V.conj().T
        dE = E[:, None] - E[None, :]
        to_frame = lambda rho: Vh @ rho @ V  # noqa: E731
        from_frame = lambda r: V @ r @ Vh  # noqa: E731
        if cfg.eta == 0.0:
            return (lambda r: -1j * dE * r), to_frame, from_frame
        # sigma^z_i in the eigenbasis, stacked over i
        A = np.stack([Vh @ (spins[:, i, None] * V) for i in range(n)])
        omega = E[None, :] - E[:, None]  # omega[a, b] = E_b - E_a
        lam = A * (0.5 * spectral_density(omega, cfg))[None]
        if cfg.secular:
            R = _redfield_tensor(A, lam, E, True)
            shape = dE.shape

            def rhs(r):
                return -1j * dE * r + (R @ r.reshape(-1)).reshape(shape)
        else:
            lam_dag = np.conj(np.swapaxes(lam, 1, 2))

            def rhs(r):
                X = lam @ r - r @ lam_dag
                return -1j * dE * r - (A @ X - X @ A).sum(axis=0)

        return rhs, to_frame, from_frame

    return make


def _finish(rho, n, worst, cv):
    dm = DensityMatrix(rho, n, dict(worst))
    dm.diagnostics["fidelity_error"] = 1.0 - ground_state_probability(rho, cv)
    dm.diagnostics["energy_error"] = float(np.real(np.diag(rho)) @ cv.values) - cv.ground_energy
    return dm


def _prepare(rho0, inst):
    if isinstance(rho0, SKInstance):
        raise TypeError("rho0 must be a DensityMatrix or array")
    if rho0 is None:
        rho0 = DensityMatrix.from_state(initial_state(inst.n))
    r = rho0.rho if isinstance(rho0, DensityMatrix) else np.asarray(rho0, dtype=complex)
    if r.shape != (2**inst.n, 2**inst.n):
        raise ValueError("density matrix does not match instance size")
    return r


def dephasing_evolve(rho0, schedule, cfg: DephasingConfig, inst: SKInstance,
                     step: float = DEFAULT_STEP) -> DensityMatrix:
    """Noise-averaged evolution with equal-strength z and x white noise.

    ``rho0=None`` starts from the uniform superposition.
    """
    cv = cost_vector(inst)
    r0 = _prepare(rho0, inst)
    segs, T = _segments(schedule)
    rho, worst = _integrate(r0, segs, _dephasing_rhs_factory(cv, cfg.W), step)
    return _finish(rho, inst.n, worst, cv)


def redfield_evolve(rho0, schedule, cfg: RedfieldConfig, inst: SKInstance | None = None,
                    cv: CostVector | None = None) -> DensityMatrix:
    """Born-Markov Redfield evolution with sigma^z system-bath coupling.

    Relaxation terms are rebuilt in the eigenbasis of H on every constant
    segment (every slice for ramps). The principal-value (Lamb shift)
    part is dropped. ``cfg.secular`` selects the Davies form (default) or
    the full tensor.
    """
    if cv is None:
        cv = cost_vector(inst)
    n = cv.n
    if rho0 is None:
        rho0 = DensityMatrix.from_state(initial_state(n))
    r0 = rho0.rho if isinstance(rho0, DensityMatrix) else np.asarray(rho0, dtype=complex)
    segs, T = _segments(schedule)
    rho, worst = _integrate(r0, segs, _redfield_rhs_factory(cv, cfg), cfg.step)
    return _finish(rho, n, worst, cv)


def gibbs_state(H: np.ndarray, beta: float) -> np.ndarray:
    E, V = np.linalg.eigh(H)
    p = np.exp(-beta * (E - E.min()))
    p /= p.sum()
    return (V * p) @ V.conj().T


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.linalg.eigvalsh(a - b)).sum())


NOISE_COLUMNS = (
    "protocol_id", "model", "W_or_eta", "beta", "T", "fidelity_error",
    "energy_error", "trace_drift", "min_eigenvalue",
)


def noise_row(protocol_id: str, model: str, strength: float, beta, T: float, dm: DensityMatrix) -> dict:
    d = dm.diagnostics
    return {
        "protocol_id": protocol_id, "model": model, "W_or_eta": strength,
        "beta": "" if beta is None else beta, "T": T,
        "fidelity_error": d["fidelity_error"], "energy_error": d["energy_error"],
        "trace_drift": d["trace_drift"], "min_eigenvalue": d["min_eigenvalue"],
    }


def check_invariants(dm: DensityMatrix, T: float) -> None:
    """Raise ``InvariantViolation`` if the run broke a density-matrix invariant."""
    d = dm.diagnostics
    problems = []
    if d.get("trace_drift", 0.0) > TRACE_DRIFT_PER_TIME * max(T, 1.0):
        problems.append(f"trace drift {d['trace_drift']:.3e}")
    if d.get("hermiticity", 0.0) > HERMITICITY_TOL:
        problems.append(f"hermiticity error {d['hermiticity']:.3e}")
    if d.get("min_eigenvalue", 0.0) < MIN_EIGENVALUE:
        problems.append(f"min eigenvalue {d['min_eigenvalue']:.3e}")
    if problems:
        raise InvariantViolation("; ".join(problems))
