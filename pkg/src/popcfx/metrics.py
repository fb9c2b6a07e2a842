"""Popularity-alignment metrics, the size-matched popular baseline, and report stats.

PDS is the chi-square distance between the binned popularity distributions of
history items and counterfactual items (both frequency-normalized over equal
width bins of [0, 1]); EPD is the mean squared per-user shift between the mean
popularity of the history and of the counterfactual set. Lower is better for
both.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as scipy_stats

from .data import PopularityTable
from .errors import DataError
from .influence import CounterfactualResult

log = logging.getLogger(__name__)

DEFAULT_BINS = 20
CHI2_EPSILON = 1e-10


@dataclass
class BiasReport:
    method: str
    cohort: str
    pds: float
    epd: float
    per_user_epd: dict[str, float]
    no_cf_rate: float
    n_users: int  # users contributing to PDS/EPD (status=found)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "cohort": self.cohort,
            "pds": self.pds,
            "epd": self.epd,
            "per_user_epd": {u: self.per_user_epd[u] for u in sorted(self.per_user_epd)},
            "no_cf_rate": self.no_cf_rate,
            "n_users": self.n_users,
        }


@dataclass
class PopPositionBin:
    cohort: str
    bin_index: int
    method: str
    mean_cf_popularity: float
    mean_normalized_position: float


@dataclass
class PairedTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False


def popularity_histogram(values: Sequence[float], bins: int) -> np.ndarray:
    """Frequency-normalized histogram over `bins` equal-width bins of [0, 1]."""
    if bins < 2:
        raise DataError("need at least 2 bins")
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise DataError("cannot histogram an empty multiset")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("popularity values must lie in [0, 1]")
    counts, _ = np.histogram(arr, bins=bins, range=(0.0, 1.0))
    return counts / counts.sum()


def pds(history_pops: Sequence[float], cf_pops: Sequence[float],
        bins: int = DEFAULT_BINS, epsilon: float = CHI2_EPSILON) -> float:
    """Chi-square distance between the two binned popularity distributions.

    Items appearing for several users are counted once per occurrence. The
    form is asymmetric: the counterfactual distribution sits in the
    denominator.
    """
    p_h = popularity_histogram(history_pops, bins)
    p_c = popularity_histogram(cf_pops, bins)
    return float(np.sum((p_h - p_c) ** 2 / (p_c + epsilon)))


def epd_local(history_mean: float, cf_mean: float) -> float:
    """Squared popularity shift for a single user."""
    return float((cf_mean - history_mean) ** 2)


def epd(pairs: Sequence[tuple[float, float]]) -> float:
    """Mean squared per-user shift between history and counterfactual popularity."""
    if not pairs:
        raise DataError("epd needs at least one (history_mean, cf_mean) pair")
    for h, c in pairs:
        if not (0.0 <= h <= 1.0 and 0.0 <= c <= 1.0):
            raise DataError(f"per-user means must lie in [0, 1], got ({h}, {c})")
    return float(np.mean([epd_local(h, c) for h, c in pairs]))


def top_popular_baseline(history: Sequence[str], popularity: PopularityTable,
                         size: int) -> list[str]:
    """The `size` most popular history items (popularity desc, item_id asc)."""
    if size > len(history):
        raise DataError(f"requested {size} items from a {len(history)}-item history")
    ranked = sorted(history, key=lambda it: (-popularity.get(it), it))
    return ranked[:size]


def no_cf_rate(results: Sequence[CounterfactualResult]) -> float:
    """Fraction of users for whom no flipping subset was found."""
    if not results:
        raise DataError("no results to rate")
    return sum(1 for r in results if r.status == "not_found") / len(results)


def paired_epd_test(epd_a: Mapping[str, float], epd_b: Mapping[str, float]) -> PairedTestResult:
    """Two-sided paired t-test on per-user EPD differences (intersection pairing)."""
    common = sorted(set(epd_a) & set(epd_b))
    if len(common) < 2:
        raise DataError("paired test needs at least 2 users present in both maps")
    diffs = np.array([epd_a[u] - epd_b[u] for u in common], dtype=np.float64)
    n = len(diffs)
    mean = float(np.mean(diffs))
    sd = float(np.std(diffs, ddof=1))
    if sd == 0.0:
        # all differences identical: no sampling variance to test against
        if mean == 0.0:
            return PairedTestResult(t=0.0, p=1.0, n=n, degenerate=True)
        return PairedTestResult(t=math.copysign(math.inf, mean), p=0.0, n=n, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * float(scipy_stats.t.sf(abs(t), n - 1))
    return PairedTestResult(t=t, p=p, n=n)


def normalized_positions(history: Sequence[str], cf_items: Sequence[str],
                         popularity: PopularityTable) -> list[float]:
    """Rank of each counterfactual item in the popularity-sorted history, scaled to [0, 1].

    0 is the user's most popular history item; a single-item history pins the
    position to 0.
    """
    ranked = sorted(history, key=lambda it: (-popularity.get(it), it))
    index = {it: pos for pos, it in enumerate(ranked)}
    denom = max(len(history) - 1, 1)
    out = []
    for it in cf_items:
        if it not in index:
            raise DataError(f"counterfactual item {it!r} not in the history")
        out.append(index[it] / denom if len(history) > 1 else 0.0)
    return out


def pop_position_bins(
    results: Sequence[CounterfactualResult],
    histories: Mapping[str, Sequence[str]],
    popularity: PopularityTable,
    bins: int = DEFAULT_BINS,
    cohort: str = "all",
) -> list[PopPositionBin]:
    """Bin users by mean history popularity; per bin and method, average the
    counterfactual popularity and its normalized position in the history.

    Bin assignment is method-independent (equal-count bins over the users with
    any found result), so methods can be compared point-for-point per bin.
    """
    found = [r for r in results if r.status == "found"]
    per_user: dict[str, dict[str, tuple[float, float]]] = {}
    for r in found:
        history = histories.get(r.user_id)
        if not history:
            raise DataError(f"no history for user {r.user_id!r}")
        positions = normalized_positions(history, r.removed_set, popularity)
        cf_pop = float(np.mean([popularity.get(it) for it in r.removed_set]))
        per_user.setdefault(r.user_id, {})[r.method] = (float(np.mean(positions)), cf_pop)

    if not per_user:
        return []
    users = sorted(per_user,
                   key=lambda u: (float(np.mean([popularity.get(i) for i in histories[u]])), u))
    groups = [g for g in np.array_split(np.array(users, dtype=object), bins) if len(g)]

    out: list[PopPositionBin] = []
    for bin_index, group in enumerate(groups):
        by_method: dict[str, list[tuple[float, float]]] = {}
        for u in group:
            for method, xy in per_user[str(u)].items():
                by_method.setdefault(method, []).append(xy)
        for method in sorted(by_method):
            xs, ys = zip(*by_method[method])
            out.append(PopPositionBin(cohort=cohort, bin_index=bin_index, method=method,
                                      mean_cf_popularity=float(np.mean(ys)),
                                      mean_normalized_position=float(np.mean(xs))))
    return out


def build_bias_report(
    results: Sequence[CounterfactualResult],
    histories: Mapping[str, Sequence[str]],
    popularity: PopularityTable,
    method: str,
    cohort: str,
    bins: int = DEFAULT_BINS,
) -> BiasReport:
    """Aggregate one (method, cohort) cell: PDS, EPD, per-user EPD, no-CF rate.

    Users whose search found nothing are excluded from PDS/EPD and show up
    only in the no-CF rate.
    """
    if not results:
        raise DataError("empty result set")
    found = [r for r in results if r.status == "found"]
    rate = no_cf_rate(results)
    if not found:
        return BiasReport(method=method, cohort=cohort, pds=float("nan"), epd=float("nan"),
                          per_user_epd={}, no_cf_rate=rate, n_users=0)
    history_pool: list[float] = []
    cf_pool: list[float] = []
    per_user_epd: dict[str, float] = {}
    pairs: list[tuple[float, float]] = []
    for r in found:
        history = histories[r.user_id]
        h_pops = [popularity.get(i) for i in history]
        c_pops = [popularity.get(i) for i in r.removed_set]
        history_pool.extend(h_pops)
        cf_pool.extend(c_pops)
        h_mean, c_mean = float(np.mean(h_pops)), float(np.mean(c_pops))
        pairs.append((h_mean, c_mean))
        per_user_epd[r.user_id] = epd_local(h_mean, c_mean)
    return BiasReport(method=method, cohort=cohort,
                      pds=pds(history_pool, cf_pool, bins=bins),
                      epd=epd(pairs), per_user_epd=per_user_epd,
                      no_cf_rate=rate, n_users=len(found))
