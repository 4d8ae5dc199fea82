"""Protocol optimizers: slice Monte Carlo, bang-bang durations, QAA baseline."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .model import SKInstance, cost_vector, generate_instance, ground_state_probability
from ._kernels import bb_cost, bb_cost_grad
from .pontryagin import certify_protocol
from .statevector import (
    BangBangProtocol,
    Protocol,
    dense_mixer,
    energy,
    evolve_linear_ramp,
    evolve_protocol,
    initial_state,
)

log = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "instance_seed", "n", "T", "method", "pulses", "final_energy",
    "energy_error", "fidelity_error", "success_prob", "evaluations",
)


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed for a job key such as ``(master, index)``."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class MCConfig:
    slices: int = 40
    sweeps: int = 400
    initial_temperature: float | str = "auto"
    cooling_factor: float = 0.95
    move_width: float = 0.2
    seed: int = 0
    min_acceptance: float = 0.01
    polish_min_width: float = 1e-4
    polish_sweeps: int = 3000
    polish_patience: int = 5
    initial_protocol: np.ndarray | None = None

    def __post_init__(self):
        if self.slices < 1:
            raise ValueError("slices must be >= 1")
        if not 0.0 < self.cooling_factor < 1.0:
            raise ValueError("cooling_factor must lie in (0, 1)")
        if not 0.0 < self.move_width <= 1.0:
            raise ValueError("move_width must lie in (0, 1]")
        if not (self.initial_temperature == "auto" or float(self.initial_temperature) >= 0.0):
            raise ValueError("initial_temperature must be 'auto' or >= 0")


@dataclass
class OptimizationResult:
    best_protocol: object
    best_cost: float
    cost_trace: list = field(default_factory=list)
    evaluations: int = 0
    converged: bool = False
    info: dict = field(default_factory=dict)


# ------------------------------------------------------------------ Monte Carlo


class _SliceChain:
    """Cached slice propagators so a single-slice move is cheap to score.

    ``prefix[k]`` is the state entering slice ``k`` and ``suffix[k]`` the cost
    operator pulled back through slices ``k..S-1``, so scoring a change of
    slice ``j`` needs one propagator and one quadratic form.
    """

    def __init__(self, cv, T, g):
        self.values = cv.values
        self.C = np.diag(cv.values).astype(complex)
        self.B = dense_mixer(cv.n)
        self.dt = T / len(g)
        self.g = np.array(g, dtype=float)
        self._cache = {}
        self.U = [self.unitary(x) for x in self.g]
        S = len(g)
        self.prefix = [initial_state(cv.n).amps] + [None] * S
        self.suffix = [None] * S + [self.C]
        self._forward(0)
        self._backward(S - 1)

    def unitary(self, g):
        U = self._cache.get(g)
        if U is None:
            w, v = linalg.eigh(g * np.diag(self.values) + (1.0 - g) * self.B)
            U = (v * np.exp(-1j * self.dt * w)) @ v.conj().T
            if len(self._cache) < 64:
                self._cache[g] = U
        return U

    def _forward(self, j):
        for k in range(j, len(self.g)):
            self.prefix[k + 1] = self.U[k] @ self.prefix[k]

    def _backward(self, j):
        for k in range(j, -1, -1):
            self.suffix[k] = self.U[k].conj().T @ self.suffix[k + 1] @ self.U[k]

    def cost(self):
        psi = self.prefix[-1]
        return float(np.dot(np.abs(psi) ** 2, self.values))

    def trial(self, j, g_new):
        U = self.unitary(g_new)
        phi = U @ self.prefix[j]
        return float(np.vdot(phi, self.suffix[j + 1] @ phi).real), U

    def accept(self, j, g_new, U):
        self.g[j] = g_new
        self.U[j] = U
        self._forward(j)
        self._backward(j)


def mc_optimize(inst: SKInstance, T: float, cfg: MCConfig) -> OptimizationResult:
    """Metropolis annealing over a piecewise-constant protocol of S slices.

    One move perturbs a random slice by a uniform amount in
    ``[-move_width, move_width]``, clamped to [0, 1]. The temperature falls
    geometrically once per sweep of S moves.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    cv = cost_vector(inst)
    rng = np.random.default_rng(cfg.seed)
    S = cfg.slices
    g0 = rng.uniform(0.0, 1.0, S) if cfg.initial_protocol is None else np.asarray(cfg.initial_protocol, float)
    if g0.size != S:
        raise ValueError("initial protocol length does not match slice count")
    chain = _SliceChain(cv, T, g0)
    cost = chain.cost()
    evals = 1

    if cfg.initial_temperature == "auto":
        deltas = []
        for _ in range(S):
            j = int(rng.integers(S))
            g_new = float(np.clip(chain.g[j] + rng.uniform(-cfg.move_width, cfg.move_width), 0.0, 1.0))
            c, _ = chain.trial(j, g_new)
            evals += 1
            deltas.append(c - cost)
        temp = float(np.std(deltas))
    else:
        temp = float(cfg.initial_temperature)

    best_g, best_cost = chain.g.copy(), cost
    trace = []

    def sweep(temp, width):
        nonlocal cost, best_cost, best_g, evals
        accepted = 0
        for _ in range(S):
            j = int(rng.integers(S))
            g_new = float(np.clip(chain.g[j] + rng.uniform(-width, width), 0.0, 1.0))
            u = rng.uniform()
            if g_new == chain.g[j]:
                continue
            c, U = chain.trial(j, g_new)
            evals += 1
            dE = c - cost
            if dE <= 0.0 or (temp > 0.0 and u < math.exp(-dE / temp)):
                chain.accept(j, g_new, U)
                cost = c
                accepted += 1
                if cost < best_cost:
                    best_cost, best_g = cost, chain.g.copy()
        trace.append(best_cost)
        return accepted

    annealed = 0
    for _ in range(cfg.sweeps):
        accepted = sweep(temp, cfg.move_width)
        annealed += 1
        temp *= cfg.cooling_factor
        if accepted < cfg.min_acceptance * S:
            break

    # Zero-temperature refinement: narrow the move whenever a sweep stalls.
    width = cfg.move_width
    polished = stalled = 0
    while width >= cfg.polish_min_width and polished < cfg.polish_sweeps:
        polished += 1
        if sweep(0.0, width) < cfg.min_acceptance * S:
            stalled += 1
            if stalled >= cfg.polish_patience:
                width *= 0.5
                stalled = 0
        else:
            stalled = 0
    converged = width < cfg.polish_min_width
    prot = Protocol.from_slices(best_g, T)
    return OptimizationResult(prot, best_cost, trace, evals, converged,
                              {"sweeps": annealed, "polish_sweeps": polished, "final_temperature": temp})


# ------------------------------------------------------------ duration simplex


def project_simplex(x: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {d >= 0, sum d = total}."""
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, x.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    theta = css[rho] / (rho + 1)
    out = np.maximum(x - theta, 0.0)
    # Put the rounding residue on the largest entry so the sum is exact.
    out[np.argmax(out)] += total - math.fsum(out)
    return out


@dataclass
class _SPGState:
    x: np.ndarray
    f: float
    g: np.ndarray
    evals: int = 0
    pg_norm: float = np.inf
    iterations: int = 0


def _projected_gradient(x, start, T, cv, tol, max_iter, trace, feasibility=None, stop_tol=None):
    """Spectral projected gradient with Armijo backtracking on the simplex.

    Iterates until the unit-step projected gradient drops below ``stop_tol``
    (default ``tol``), the line search stalls, or ``max_iter``; converged
    means the final projected gradient is below ``tol``.
    """
    stop_tol = tol if stop_tol is None else stop_tol
    values, n = cv.values, cv.n

    f, g = bb_cost_grad(start, x, values, n)
    evals = 1
    alpha = 0.1 / max(1e-12, float(np.abs(g).max()))
    it = 0
    for it in range(max_iter):
        pg = project_simplex(x - g, T) - x
        if float(np.abs(pg).max()) < stop_tol:
            break
        d = project_simplex(x - alpha * g, T) - x
        slope = float(g @ d)
        if slope >= 0.0:
            d, slope = pg, float(g @ pg)
        lam = 1.0
        while True:
            x_new = x + lam * d
            x_new = np.maximum(x_new, 0.0)
            x_new[np.argmax(x_new)] += T - math.fsum(x_new)
            f_new = bb_cost(start, x_new, values, n)
            evals += 1
            if f_new <= f + 1e-4 * lam * slope or lam < 1e-12:
                break
            lam *= 0.5
        if f_new > f:
            break
        _, g_new = bb_cost_grad(start, x_new, values, n)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 0 else 1e3
        alpha = min(max(alpha, 1e-8), 1e3)
        x, f, g = x_new, f_new, g_new
        if feasibility is not None:
            feasibility(x)
        trace.append(min(trace[-1], f) if trace else f)
    pg_norm = float(np.abs(project_simplex(x - g, T) - x).max())
    converged = pg_norm < tol
    return _SPGState(x, f, g, evals, pg_norm, it), converged


def _insert_needle(bb: BangBangProtocol, cv, max_pulses, sign_tol):
    """Split a pulse where phi has the wrong sign; None if nothing to fix."""
    merged = bb.merged()
    if len(merged.durations) + 2 > max_pulses:
        return None
    cert = certify_protocol(merged, cv, sign_tol=sign_tol)
    tr = cert.trace
    scale = max(cert.phi_max, 1e-300)
    bad = np.where(tr.g == 1.0, tr.phi, -tr.phi) / scale
    j = int(np.argmax(bad))
    if bad[j] < sign_tol:
        return None
    t = tr.times[j]
    edges = np.concatenate([[0.0], np.cumsum(merged.durations)])
    i = int(np.clip(np.searchsorted(edges, t, side="right") - 1, 0, len(merged.durations) - 1))
    width = min(1e-3 * merged.T, 0.5 * merged.durations[i])
    left = min(max(t - edges[i] - 0.5 * width, 0.0), merged.durations[i] - width)
    right = merged.durations[i] - width - left
    durs = list(merged.durations[:i]) + [left, width, right] + list(merged.durations[i + 1:])
    return BangBangProtocol(merged.start, tuple(durs), merged.T)


def _pad(bb: BangBangProtocol, max_pulses):
    """Re-expand a merged protocol to ``max_pulses`` slots with zero pulses."""
    durs = list(bb.durations)
    durs += [0.0] * (max_pulses - len(durs))
    return np.array(durs)


def bb_optimize(inst: SKInstance, T: float, max_pulses: int = 40, restarts: int = 4,
                seed: int = 0, tol: float = 1e-5, stop_tol: float = 1e-9, max_iter: int = 20000,
                sign_tol: float = 1e-3, max_insertions: int = 0,
                feasibility=None) -> OptimizationResult:
    """Optimize pulse durations on the simplex sum(d) = T with adjoint gradients.

    Restart 0 starts from equal durations T/max_pulses; later restarts draw
    durations uniformly on the simplex. Both start values are tried for every
    restart. With ``max_insertions > 0``, a short opposite pulse is inserted
    wherever the switching function has the wrong sign and the optimization
    resumes (needle refinement).
    """
    if max_pulses < 2:
        raise ValueError("max_pulses must be >= 2")
    if T <= 0:
        raise ValueError("T must be positive")
    cv = cost_vector(inst)
    rng = np.random.default_rng(seed)
    best = None
    evals = 0
    trace = []
    for r in range(restarts):
        if r == 0:
            x0 = np.full(max_pulses, T / max_pulses)
        else:
            x0 = rng.dirichlet(np.ones(max_pulses)) * T
        x0[np.argmax(x0)] += T - math.fsum(x0)
        for start in (0, 1):
            run_trace = []
            state, conv = _projected_gradient(x0.copy(), start, T, cv, tol, max_iter,
                                              run_trace, feasibility, stop_tol)
            evals += state.evals
            insertions = 0
            while conv and insertions < max_insertions:
                bb = _insert_needle(BangBangProtocol(start, tuple(state.x), T), cv, max_pulses, sign_tol)
                if bb is None:
                    break
                insertions += 1
                start = bb.start
                state, conv = _projected_gradient(_pad(bb, max_pulses), start, T, cv, tol, max_iter,
                                                  run_trace, feasibility, stop_tol)
                evals += state.evals
            log.debug("restart %d start %d: cost %.10f pg %.2e", r, start, state.f, state.pg_norm)
            if best is None or state.f < best[0]:
                best = (state.f, start, state.x.copy(), conv, state.pg_norm)
            trace.append(best[0])
    f, start, x, conv, pg = best
    bb = BangBangProtocol(start, tuple(x), T).merged()
    return OptimizationResult(bb, f, trace, evals, conv,
                              {"pulses": len(bb.durations), "max_pulses": max_pulses,
                               "projected_gradient": pg, "raw_durations": x})


# ------------------------------------------------------------------- baselines


def qaa_baseline(inst: SKInstance, T: float, steps: int | None = None):
    """Linear ramp g = t/T: returns (energy error, fidelity error)."""
    if T <= 0:
        raise ValueError("T must be positive")
    cv = cost_vector(inst)
    psi = evolve_linear_ramp(initial_state(inst.n), T, steps, cv)
    return energy(psi, cv) - cv.ground_energy, 1.0 - ground_state_probability(psi, cv)


def result_row(inst: SKInstance, T: float, method: str, protocol, evaluations: int = 0) -> dict:
    cv = cost_vector(inst)
    if protocol is None:
        psi = evolve_linear_ramp(initial_state(inst.n), T, None, cv)
        pulses = 0
    else:
        psi = evolve_protocol(initial_state(inst.n), protocol, cv)
        pulses = 0 if method == "qaa" else len(getattr(protocol, "durations", getattr(protocol, "segments", ())))
    e = energy(psi, cv)
    p = ground_state_probability(psi, cv)
    return {
        "instance_seed": inst.seed, "n": inst.n, "T": T, "method": method,
        "pulses": pulses, "final_energy": e, "energy_error": e - cv.ground_energy,
        "fidelity_error": 1.0 - p, "success_prob": p, "evaluations": evaluations,
    }


# -------------------------------------------------------------------- ensembles


@dataclass
class EnsembleReport:
    rows: list
    selected: list
    aggregate: dict
    protocols: dict = field(default_factory=dict)
    converged: dict = field(default_factory=dict)


def _ensemble_job(args):
    n, T, index, master_seed, method, opts = args
    inst = generate_instance(n, derive_seed(master_seed, index))
    res = optimize(inst, T, method, **opts)
    row = result_row(inst, T, method, res.best_protocol, res.evaluations)
    qaa_e, qaa_f = qaa_baseline(inst, T)
    return index, row, res.best_protocol, res.converged, {"energy_error": qaa_e, "fidelity_error": qaa_f}


def optimize(inst: SKInstance, T: float, method: str = "bb", seed: int | None = None,
             **opts) -> OptimizationResult:
    """Dispatch to the slice Monte Carlo ("mc") or duration optimizer ("bb").

    Without an explicit ``seed`` the optimizer seed is derived from the
    instance seed, so the same instance always gets the same run.
    """
    if seed is None:
        seed = derive_seed(inst.seed if inst.seed is not None else 0, 1)
    if method == "bb":
        return bb_optimize(inst, T, seed=seed, **opts)
    if method == "mc":
        return mc_optimize(inst, T, MCConfig(seed=seed, **opts))
    raise ValueError(f"unknown method {method!r}")


def run_jobs(fn, jobs, threads: int = 1):
    """Map ``fn`` over ``jobs``; results come back in job order."""
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def instance_ensemble_run(n: int, T: float, count: int, selection: int | None = None,
                          method: str = "bb", master_seed: int = 0, rank_by: str = "success_prob",
                          threads: int = 1, **opts) -> EnsembleReport:
    """Optimize ``count`` instances; average over the best ``selection`` of them.

    ``rank_by`` is ``success_prob`` (higher is better) or ``energy_error``
    (lower is better). Each row also carries the matched linear-ramp errors.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    jobs = [(n, T, i, master_seed, method, opts) for i in range(count)]
    out = run_jobs(_ensemble_job, jobs, threads)
    out.sort(key=lambda r: r[0])
    rows, protocols, converged = [], {}, {}
    for index, row, prot, conv, qaa in out:
        row = dict(row, qaa_energy_error=qaa["energy_error"], qaa_fidelity_error=qaa["fidelity_error"])
        rows.append(row)
        protocols[row["instance_seed"]] = prot
        converged[row["instance_seed"]] = conv
    k = count if selection is None else min(selection, count)
    if rank_by == "success_prob":
        ranked = sorted(range(count), key=lambda i: (-rows[i]["success_prob"], i))
    elif rank_by == "energy_error":
        ranked = sorted(range(count), key=lambda i: (rows[i]["energy_error"], i))
    else:
        raise ValueError(f"unknown ranking {rank_by!r}")
    selected = sorted(ranked[:k])
    sel = [rows[i] for i in selected]
    keys = ("success_prob", "fidelity_error", "energy_error", "qaa_fidelity_error", "qaa_energy_error", "pulses")
    agg = {key: float(np.mean([r[key] for r in sel])) for key in keys}
    agg.update(n=n, T=T, count=count, selected=k)
    return EnsembleReport(rows, selected, agg, protocols, converged)
