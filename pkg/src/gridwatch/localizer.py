"""Out-of-service branch identification from covariance structure.

Full observability: a branch pair whose conditional correlation was clearly
nonzero before the event and collapses to (numerically) zero after it is
flagged as out of service.  Limited observability: pairs are ranked by the
magnitude of their conditional-correlation change to narrow the outage
region, and candidate branch admittances are re-estimated from windows of
phasor data to confirm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussmodel import CoordinateLayout, pair_conditional_stats
from .grid import GridTopology
from .simgen import substream


@dataclass(frozen=True)
class Thresholds:
    """Decision floors for the zero test.

    zero: |rho_post| below this counts as "collapsed to zero".
    active: |rho_pre| above this counts as "was a live coupling".
    """

    zero: float
    active: float

    def __post_init__(self):
        if not 0 < self.zero < self.active:
            raise ValueError(f"need 0 < zero < active, got {self.zero}, {self.active}")


# Defaults for exact model covariances, where the only "noise" is float
# arithmetic; data-driven runs should use thresholds_from_bootstrap.
EXACT_THRESHOLDS = Thresholds(zero=1e-6, active=1e-2)


def thresholds_from_bootstrap(samples: np.ndarray, pairs, layout: CoordinateLayout,
                              n_boot: int = 200, seed: int = 0,
                              zero_mult: float = 3.0,
                              active_mult: float = 10.0) -> Thresholds:
    """Data-driven floors: zero = zero_mult * the 99th percentile of the
    bootstrap deviation of the pair scores, active = active_mult * zero.

    The window should be at least as long as the one the post-event
    covariance will be estimated from, otherwise the floor undershoots the
    post-side sampling noise.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    if n < layout.dim + 2:
        raise ValueError(f"bootstrap window too short: {n} samples for dim {layout.dim}")
    rng = substream(seed, "bootstrap")
    base_cov = np.cov(samples.T, ddof=0)
    base = {pair: pair_conditional_stats(base_cov, *pair, layout)[0] for pair in pairs}
    deviations = []
    for _ in range(n_boot):
        pick = rng.integers(0, n, size=n)
        cov = np.cov(samples[pick].T, ddof=0)
        for pair in pairs:
            score, degenerate = pair_conditional_stats(cov, *pair, layout)
            if not degenerate:
                deviations.append(abs(score - base[pair]))
    zero = zero_mult * float(np.percentile(deviations, 99.0))
    return Thresholds(zero=zero, active=active_mult * zero)


@dataclass(frozen=True)
class PairScore:
    i: int
    j: int
    rho_pre: float
    rho_post: float
    degenerate: bool = False

    @property
    def delta(self) -> float:
        return abs(self.rho_post - self.rho_pre)

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j)


@dataclass(frozen=True)
class LocalizationReport:
    flagged: frozenset[tuple[int, int]]
    scores: tuple[PairScore, ...]
    method: str
    admittance_estimates: dict | None = None

    def skipped(self) -> tuple[PairScore, ...]:
        return tuple(s for s in self.scores if s.degenerate)


def _sorted_scores(scores: list[PairScore]) -> tuple[PairScore, ...]:
    return tuple(sorted(scores, key=lambda s: (-s.delta, s.i, s.j)))


def all_bus_pairs(layout: CoordinateLayout) -> list[tuple[int, int]]:
    buses = layout.buses
    return [(buses[a], buses[b]) for a in range(len(buses)) for b in range(a + 1, len(buses))]


def scan_pairs(sigma0: np.ndarray, sigma1: np.ndarray, pairs, layout: CoordinateLayout,
               thresholds: Thresholds = EXACT_THRESHOLDS,
               noise_floor: float | None = None) -> LocalizationReport:
    """Zero test over the given bus pairs (typically the known branch list).

    A pair is flagged when |rho_pre| > active and |rho_post| < zero.  Pairs
    whose conditional variance degenerates are kept in the report with the
    degenerate marker but never flagged; when noise_floor (the measurement
    noise variance) is given, pairs whose post-event marginals sit at the
    noise floor on both ends (a de-energised island) are likewise skipped,
    since everything in such an island looks conditionally independent.
    """
    sigma1 = np.asarray(sigma1, dtype=float)
    scores: list[PairScore] = []
    flagged: set[tuple[int, int]] = set()
    for i, j in pairs:
        pre, degen_pre = pair_conditional_stats(sigma0, i, j, layout)
        post, degen_post = pair_conditional_stats(sigma1, i, j, layout)
        degenerate = degen_pre or degen_post
        if noise_floor is not None and not degenerate:
            var_i = max(sigma1[c, c] for c in layout.coords_of(i))
            var_j = max(sigma1[c, c] for c in layout.coords_of(j))
            if var_i <= 4.0 * noise_floor and var_j <= 4.0 * noise_floor:
                degenerate = True
        score = PairScore(i, j, pre, post, degenerate)
        scores.append(score)
        if not degenerate and pre > thresholds.active and post < thresholds.zero:
            flagged.add(score.pair)
    return LocalizationReport(frozenset(flagged), _sorted_scores(scores), "zero_test")


def rank_changes(sigma0: np.ndarray, sigma1: np.ndarray, observed_pairs,
                 layout: CoordinateLayout, top_k: int | None = None) -> tuple[PairScore, ...]:
    """Pairs sorted by |rho_post - rho_pre| descending (ties by bus pair);
    the first stage of limited-sensor localization."""
    scores = []
    for i, j in observed_pairs:
        pre, _ = pair_conditional_stats(sigma0, i, j, layout)
        post, _ = pair_conditional_stats(sigma1, i, j, layout)
        scores.append(PairScore(i, j, pre, post))
    ranked = _sorted_scores(scores)
    return ranked[:top_k] if top_k is not None else ranked


@dataclass(frozen=True)
class PhasorWindow:
    """Complex voltage increments plus the matching injection increments.

    Injections at the candidate endpoints must be available (reconstructed
    by the metering infrastructure or, in simulation, recorded); voltage
    observability must cover the endpoints and all their neighbours.
    """

    delta_v: np.ndarray  # (T, M) complex
    delta_i: np.ndarray  # (T, M) complex

    def __post_init__(self):
        if self.delta_v.shape != self.delta_i.shape:
            raise ValueError("delta_v and delta_i windows must align")


@dataclass(frozen=True)
class AdmittanceEstimate:
    pre: complex
    post: complex
    likely_out: bool

    @property
    def magnitude_ratio(self) -> float:
        return abs(self.post) / abs(self.pre) if self.pre != 0 else float("inf")


def estimate_admittance(pre_window: PhasorWindow, post_window: PhasorWindow,
                        topology: GridTopology, candidates,
                        candidate_cut: float = 0.1) -> dict[tuple[int, int], AdmittanceEstimate]:
    """Least-squares branch admittances around each candidate, before/after.

    For an endpoint bus i with pre-event neighbours N(i), each sample gives
    one equation  dI_i = sum_e y_ie (dV_i - dV_e)  in the unknown incident
    admittances.  Estimates from both endpoints are averaged.  A branch
    whose post/pre magnitude ratio falls below candidate_cut is marked
    likely out.
    """
    adjacency = topology.adjacency()
    candidates = [(min(i, j), max(i, j)) for i, j in candidates]
    for i, j in candidates:
        if j not in adjacency[i]:
            raise ValueError(f"candidate {(i, j)} is not a branch of the topology")
    needed = max(len(adjacency[b]) for pair in candidates for b in pair)
    for name, win in (("pre", pre_window), ("post", post_window)):
        if win.delta_v.shape[0] < needed:
            raise ValueError(
                f"{name} window underdetermined: {win.delta_v.shape[0]} samples "
                f"for {needed} unknowns; need at least {needed}")

    def fit(window: PhasorWindow, bus: int) -> dict[int, complex]:
        neigh = sorted(adjacency[bus])
        dv = window.delta_v
        a = dv[:, [bus - 1] * len(neigh)] - dv[:, [e - 1 for e in neigh]]
        b = window.delta_i[:, bus - 1]
        coef, *_ = np.linalg.lstsq(a, b, rcond=None)
        return dict(zip(neigh, coef))

    out: dict[tuple[int, int], AdmittanceEstimate] = {}
    cache: dict[tuple[str, int], dict[int, complex]] = {}
    for i, j in candidates:
        est = {}
        for label, window in (("pre", pre_window), ("post", post_window)):
            vals = []
            for bus, other in ((i, j), (j, i)):
                if (label, bus) not in cache:
                    cache[(label, bus)] = fit(window, bus)
                vals.append(cache[(label, bus)][other])
            est[label] = 0.5 * (vals[0] + vals[1])
        ratio = abs(est["post"]) / abs(est["pre"]) if est["pre"] != 0 else float("inf")
        out[(i, j)] = AdmittanceEstimate(complex(est["pre"]), complex(est["post"]),
                                         bool(ratio < candidate_cut))
    return out
