"""Pulse-duration statistics and bang-bang vs linear-ramp comparison tables."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .model import SKInstance, cost_vector, flip_deltas
from .statevector import BangBangProtocol, Protocol

DEFAULT_BIN_WIDTH = 0.05
DEFAULT_UPPER = 2.0
HISTOGRAM_COLUMNS = ("n", "T", "bin_center", "probability", "samples")
COMPARISON_COLUMNS = (
    "n", "T", "noise", "strength", "method", "pairs",
    "fidelity_error", "qaa_fidelity_error", "fidelity_ratio",
    "energy_error", "qaa_energy_error", "energy_ratio",
)
_KINDS = {"both": (0.0, 1.0), "g0": (0.0,), "g1": (1.0,)}


@dataclass(frozen=True)
class DurationHistogram:
    """Normalized histogram of pulse durations.

    ``counts`` holds the raw occupation of each bin, so pooled histograms can
    be rebuilt exactly. ``samples`` keeps the pooled durations themselves
    when they are known (empty after a round trip through CSV).
    """

    bin_width: float
    counts: tuple
    n: int | None
    T: float | None
    samples: tuple = ()

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be nonnegative")
        if sum(self.counts) == 0:
            raise ValueError("histogram has no samples")

    @property
    def sample_count(self) -> int:
        return int(sum(self.counts))

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(len(self.counts)) + 0.5) * self.bin_width

    @property
    def probabilities(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=float)
        return c / c.sum()

    @property
    def bins(self) -> list:
        return list(zip(self.centers.tolist(), self.probabilities.tolist()))

    @property
    def peak_index(self) -> int:
        return int(np.argmax(self.counts))

    @property
    def peak(self) -> float:
        """Center of the most probable bin."""
        return float(self.centers[self.peak_index])

    def csv_rows(self) -> list:
        return [
            {"n": "" if self.n is None else self.n, "T": "" if self.T is None else self.T,
             "bin_center": c, "probability": p, "samples": int(k)}
            for c, p, k in zip(self.centers.tolist(), self.probabilities.tolist(), self.counts)
        ]


def _bin_index(x: np.ndarray, width: float) -> np.ndarray:
    # small slack so that exact multiples of the width land in the upper bin
    return np.floor(x / width + 1e-9).astype(int)


def histogram_from_durations(durations, bin_width: float = DEFAULT_BIN_WIDTH,
                             upper: float = DEFAULT_UPPER, n=None, T=None) -> DurationHistogram:
    d = np.asarray(durations, dtype=float)
    if d.size == 0:
        raise ValueError("no durations to histogram")
    if np.any(d < 0):
        raise ValueError("durations must be nonnegative")
    nbins = max(math.ceil(upper / bin_width - 1e-9), int(_bin_index(d, bin_width).max()) + 1)
    counts = np.bincount(_bin_index(d, bin_width), minlength=nbins)
    return DurationHistogram(bin_width, tuple(int(c) for c in counts), n, T, tuple(sorted(d.tolist())))


def _as_bang_bang(p) -> BangBangProtocol:
    if isinstance(p, BangBangProtocol):
        return p.merged()
    if isinstance(p, Protocol):
        return p.to_bang_bang()
    raise TypeError(f"expected a protocol, got {type(p).__name__}")


def pulse_durations(protocols, include: str = "both") -> list:
    """Durations of all nonzero pulses after merging equal neighbours."""
    if include not in _KINDS:
        raise ValueError(f"include must be one of {sorted(_KINDS)}")
    keep = _KINDS[include]
    out = []
    for p in protocols:
        bb = _as_bang_bang(p)
        out.extend(float(d) for g, d in zip(bb.values, bb.durations) if d > 0 and g in keep)
    return out


def collect_durations(protocols, bin_width: float = DEFAULT_BIN_WIDTH, upper: float = DEFAULT_UPPER,
                      include: str = "both", n: int | None = None) -> DurationHistogram:
    """Pool pulse durations over an ensemble of protocols.

    ``include`` selects both bounds (default), only mixer pulses ("g0") or
    only cost pulses ("g1").
    """
    protocols = list(protocols)
    if not protocols:
        raise ValueError("empty protocol ensemble")
    Ts = {round(float(p.T), 12) for p in protocols}
    if len(Ts) != 1:
        raise ValueError("protocols have different total times")
    return histogram_from_durations(pulse_durations(protocols, include), bin_width, upper, n, Ts.pop())


def merge_histograms(hists) -> DurationHistogram:
    """Combine histograms weighted by their sample counts."""
    hists = list(hists)
    if not hists:
        raise ValueError("nothing to merge")
    _check_compatible(hists)
    size = max(len(h.counts) for h in hists)
    counts = np.zeros(size, dtype=int)
    for h in hists:
        counts[: len(h.counts)] += h.counts
    samples = tuple(sorted(s for h in hists for s in h.samples)) if all(h.samples for h in hists) else ()
    ns = {h.n for h in hists}
    return DurationHistogram(hists[0].bin_width, tuple(int(c) for c in counts),
                             ns.pop() if len(ns) == 1 else None, hists[0].T, samples)


def _check_compatible(hists):
    w = hists[0].bin_width
    T = hists[0].T
    for h in hists[1:]:
        if not math.isclose(h.bin_width, w, rel_tol=1e-12):
            raise ValueError("histograms use different bin widths")
        if (h.T is None) != (T is None) or (T is not None and not math.isclose(h.T, T, rel_tol=1e-12)):
            raise ValueError("histograms belong to different total times")


def _binned_cdf(h: DurationHistogram, size: int) -> np.ndarray:
    c = np.zeros(size)
    c[: len(h.counts)] = h.counts
    return np.cumsum(c) / c.sum()


def collapse_test(h1: DurationHistogram, h2: DurationHistogram):
    """Return (KS distance, signed peak shift of h2 relative to h1 in bins).

    The KS distance uses the pooled durations when both histograms carry
    them and the binned distributions otherwise.
    """
    _check_compatible([h1, h2])
    if h1.samples and h2.samples:
        ks = float(sps.ks_2samp(h1.samples, h2.samples).statistic)
    else:
        size = max(len(h1.counts), len(h2.counts))
        ks = float(np.abs(_binned_cdf(h1, size) - _binned_cdf(h2, size)).max())
    return ks, h2.peak_index - h1.peak_index


def delta_c_variance(instances) -> float:
    """Mean of (C_{z with spin k flipped} - C_z)^2 over z, k and instances."""
    instances = [instances] if isinstance(instances, SKInstance) else list(instances)
    if not instances:
        raise ValueError("no instances")
    return float(np.mean([np.mean(flip_deltas(cost_vector(i)) ** 2) for i in instances]))


def predicted_delta_c_variance(n: int) -> float:
    """4 (J^2 + h^2) with J^2 = (n-1)/n for unit Gaussian couplings over sqrt(n)."""
    return 4.0 * ((n - 1) / n + 1.0)


def _noise_key(row):
    return str(row.get("noise", "none")), float(row.get("strength", 0.0) or 0.0)


def comparison_table(rows) -> list:
    """Per-(n, T, noise) means for each optimized method against the ramp.

    ``rows`` are per-instance dicts with ``instance_seed``, ``n``, ``T``,
    ``method`` ("qaa" marks the ramp), ``fidelity_error``, ``energy_error``
    and optionally ``noise``/``strength``. Every optimized row needs a ramp
    row for the same instance, T and noise setting and vice versa.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows")
    qaa = {}
    opt = defaultdict(dict)
    for r in rows:
        key = (int(r["instance_seed"]), int(r["n"]), float(r["T"])) + _noise_key(r)
        if r["method"] == "qaa":
            if key in qaa:
                raise ValueError(f"duplicate ramp row for {key}")
            qaa[key] = r
        else:
            if key in opt[r["method"]]:
                raise ValueError(f"duplicate {r['method']} row for {key}")
            opt[r["method"]][key] = r
    if not opt:
        raise ValueError("no optimized rows to compare")
    used = set()
    groups = defaultdict(list)
    for method, by_key in opt.items():
        for key, r in by_key.items():
            if key not in qaa:
                raise ValueError(f"no ramp row matches {method} row {key}")
            used.add(key)
            groups[(key[1], key[2], key[3], key[4], method)].append((r, qaa[key]))
    missing = set(qaa) - used
    if missing:
        raise ValueError(f"ramp rows without an optimized partner: {sorted(missing)[:3]}")
    table = []
    for (n, T, noise, strength, method) in sorted(groups):
        pairs = groups[(n, T, noise, strength, method)]
        f = float(np.mean([a["fidelity_error"] for a, _ in pairs]))
        fq = float(np.mean([b["fidelity_error"] for _, b in pairs]))
        e = float(np.mean([a["energy_error"] for a, _ in pairs]))
        eq = float(np.mean([b["energy_error"] for _, b in pairs]))
        table.append({
            "n": n, "T": T, "noise": noise, "strength": strength, "method": method,
            "pairs": len(pairs), "fidelity_error": f, "qaa_fidelity_error": fq,
            "fidelity_ratio": f / fq if fq > 0 else math.nan,
            "energy_error": e, "qaa_energy_error": eq,
            "energy_ratio": e / eq if eq > 0 else math.nan,
        })
    return table


def paired_rows(report, indices=None) -> list:
    """Split ensemble rows (which carry ramp errors inline) into matched rows."""
    idx = report.selected if indices is None else indices
    out = []
    for i in idx:
        r = report.rows[i]
        out.append(dict(r))
        out.append({"instance_seed": r["instance_seed"], "n": r["n"], "T": r["T"], "method": "qaa",
                    "fidelity_error": r["qaa_fidelity_error"], "energy_error": r["qaa_energy_error"]})
    return out
