"""Removal-effect estimation and the greedy counterfactual search.

Removing a set E of a user's interactions is modeled as one damped Newton step
of the user's factor vector toward the user loss without E's positive terms.
That yields a concrete perturbed vector at which scores are recomputed
exactly, so "the top-1 flips" is a well-defined, testable condition.

Influence is restricted to the user's own factors; item factors, output
weights, and biases stay frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .data import Interaction
from .errors import DataError, InfluenceError
from .recsys import ModelParams, stable_seed, top_k

log = logging.getLogger(__name__)

DEFAULT_DAMPING = 1e-2
DEFAULT_MAX_SET = 10


@dataclass
class UserInfluenceState:
    """Per-user curvature and per-interaction gradients, built once per search."""

    user_id: str
    hessian: np.ndarray  # d x d, damping included
    per_item_gradients: dict[str, np.ndarray]
    frozen_negatives: dict[str, tuple[str, ...]]
    damping: float
    exclude_items: frozenset[str]  # the user's full training item set
    weight_decay: float
    _cho: tuple = field(default=None, repr=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._cho, rhs)

    @property
    def history(self) -> list[str]:
        return sorted(self.per_item_gradients)


@dataclass
class CounterfactualResult:
    user_id: str
    status: str  # "found" | "not_found"
    removed_set: list[str]
    displaced: str | None
    replacement: str | None
    estimated_gap_trace: list[float]  # gap before any removal, then after each step
    method: str = "accent"

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "status": self.status,
            "removed_set": list(self.removed_set),
            "displaced": self.displaced,
            "replacement": self.replacement,
            "estimated_gap_trace": [float(g) for g in self.estimated_gap_trace],
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CounterfactualResult":
        return cls(user_id=obj["user_id"], status=obj["status"],
                   removed_set=list(obj["removed_set"]), displaced=obj.get("displaced"),
                   replacement=obj.get("replacement"),
                   estimated_gap_trace=list(obj.get("estimated_gap_trace", [])),
                   method=obj.get("method", "accent"))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _term_matrices(params: ModelParams, item_ids: Sequence[str], labels: Sequence[float]):
    """Stack per-term rows x_t = w * q_t with offsets b_t and labels y_t."""
    idx = np.array([params.item_index(i) for i in item_ids], dtype=np.int64)
    X = params.output_weights * params.item_factors[idx]
    offsets = params.item_bias[idx]
    y = np.asarray(labels, dtype=np.float64)
    return X, offsets, y


def user_loss(p: np.ndarray, X: np.ndarray, offsets: np.ndarray, y: np.ndarray,
              weight_decay: float) -> float:
    s = X @ p + offsets
    ll = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s))) - y * s
    return float(np.sum(ll) + weight_decay * p @ p)


def user_loss_grad(p, X, offsets, y, weight_decay):
    s = X @ p + offsets
    return X.T @ (_sigmoid(s) - y) + 2.0 * weight_decay * p


def user_loss_hessian(p, X, offsets, y, weight_decay):
    s = X @ p + offsets
    sig = _sigmoid(s)
    H = (X * (sig * (1.0 - sig))[:, None]).T @ X + 2.0 * weight_decay * np.eye(len(p))
    return 0.5 * (H + H.T)


def frozen_negative_sample(params: ModelParams, user_id: str, positive: str,
                           user_items: frozenset[str], count: int) -> tuple[str, ...]:
    """Deterministic per-(user, positive) negatives, drawn from non-interacted items."""
    pool = [it for it in params.item_ids if it not in user_items]
    if not pool or count <= 0:
        return ()
    rng = np.random.default_rng(stable_seed(params.rng_seed, "frozen-neg", user_id, positive))
    take = min(count, len(pool))
    picked = rng.choice(np.array(pool, dtype=object), size=take, replace=False)
    return tuple(str(x) for x in picked)


def build_user_state(
    params: ModelParams,
    train: Sequence[Interaction],
    user_id: str,
    damping: float = DEFAULT_DAMPING,
    history: Sequence[str] | None = None,
    weight_decay: float | None = None,
    negatives_per_positive: int | None = None,
) -> UserInfluenceState:
    """Assemble the damped Hessian and per-positive gradients for one user.

    The user loss is the sum of positive log-loss terms over the (possibly
    pre-filtered) history, negative terms over frozen seeded negatives, and
    the L2 penalty on the user's factor vector.

    Args:
        history: optional subset of the user's training items to treat as the
            searchable history (a pre-filtered history). Negative sampling
            still excludes the user's full item set.
    """
    if weight_decay is None:
        weight_decay = params.config.weight_decay
    if negatives_per_positive is None:
        negatives_per_positive = params.config.negatives_per_positive

    full_items = []
    seen = set()
    for r in train:
        if r.user_id == user_id and r.item_id not in seen:
            seen.add(r.item_id)
            full_items.append(r.item_id)
    if not full_items:
        raise DataError(f"user {user_id!r} has no training interactions")
    user_item_set = frozenset(full_items)

    if history is None:
        positives = list(full_items)
    else:
        extra = set(history) - user_item_set
        if extra:
            raise DataError(f"history items not in user's training set: {sorted(extra)[:10]}")
        positives = [i for i in full_items if i in set(history)]
        if not positives:
            raise DataError(f"filtered history for user {user_id!r} is empty")

    negatives: dict[str, tuple[str, ...]] = {
        z: frozen_negative_sample(params, user_id, z, user_item_set, negatives_per_positive)
        for z in positives
    }

    term_items = list(positives) + [n for z in positives for n in negatives[z]]
    term_labels = [1.0] * len(positives) + [0.0] * (len(term_items) - len(positives))
    X, offsets, y = _term_matrices(params, term_items, term_labels)
    p_u = params.user_factors[params.user_index(user_id)]

    hessian = user_loss_hessian(p_u, X, offsets, y, weight_decay)
    hessian = hessian + damping * np.eye(params.dim)

    s_pos = X[:len(positives)] @ p_u + offsets[:len(positives)]
    sig_pos = _sigmoid(s_pos)
    grads = {z: (sig_pos[j] - 1.0) * X[j] for j, z in enumerate(positives)}

    try:
        cho = scipy.linalg.cho_factor(hessian)
    except np.linalg.LinAlgError as exc:
        raise InfluenceError(
            f"damped Hessian for user {user_id!r} is not positive definite; "
            f"increase damping (currently {damping})") from exc

    return UserInfluenceState(user_id=user_id, hessian=hessian, per_item_gradients=grads,
                              frozen_negatives=negatives, damping=damping,
                              exclude_items=user_item_set, weight_decay=weight_decay,
                              _cho=cho)


def estimate_removed_params(state: UserInfluenceState, params: ModelParams,
                            removed: Sequence[str]) -> np.ndarray:
    """User vector after one Newton step toward the loss without `removed`'s positives."""
    p_u = params.user_factors[params.user_index(state.user_id)]
    if not removed:
        return p_u.copy()
    missing = [z for z in removed if z not in state.per_item_gradients]
    if missing:
        raise DataError(f"items not in the user's searchable history: {missing[:10]}")
    g = np.sum([state.per_item_gradients[z] for z in removed], axis=0)
    return p_u + state.solve(g)


def rescore(params: ModelParams, user_id: str, user_vector: np.ndarray, item_id: str) -> float:
    """Exact score at a perturbed user vector."""
    params.user_index(user_id)  # validate the id
    i = params.item_index(item_id)
    if user_vector.shape != (params.dim,):
        raise DataError(f"user vector has shape {user_vector.shape}, expected ({params.dim},)")
    return float(params.output_weights @ (user_vector * params.item_factors[i])
                 + params.item_bias[i])


def _gap(state, params, removed, displaced, replacement) -> float:
    vec = estimate_removed_params(state, params, removed)
    return rescore(params, state.user_id, vec, displaced) \
        - rescore(params, state.user_id, vec, replacement)


def accent_explain(
    params: ModelParams,
    state: UserInfluenceState,
    user_id: str,
    k: int = 5,
    max_set: int = DEFAULT_MAX_SET,
    method: str = "accent",
) -> CounterfactualResult:
    """Greedy smallest-flipping-set search over top-k replacement candidates.

    For each candidate in positions 2..k of the user's ranked list, history
    items are added greedily, each step taking the item whose removal most
    decreases the estimated score gap to the top-1 item (recomputed at the
    perturbed user vector). A candidate's search stops when the gap turns
    negative, no item lowers it further, the budget is hit, or the history is
    exhausted. Among flipping candidates the smallest set wins; ties go to the
    more negative final gap, then to the smaller replacement item_id.
    """
    if user_id != state.user_id:
        raise DataError(f"state belongs to {state.user_id!r}, not {user_id!r}")
    if k < 2:
        raise DataError("k must be >= 2 so at least one replacement candidate exists")
    history = state.history
    budget = min(max_set, len(history))

    ranked = top_k(params, user_id, k, exclude=state.exclude_items)
    displaced = ranked.items[0][0]

    best: tuple[int, float, str, list[str], list[float]] | None = None
    for replacement, _ in ranked.items[1:]:
        removed: list[str] = []
        gap = _gap(state, params, removed, displaced, replacement)
        trace = [gap]
        while gap >= 0.0 and len(removed) < budget:
            candidates = [i for i in history if i not in removed]
            if not candidates:
                break
            scored = [(_gap(state, params, removed + [i], displaced, replacement), i)
                      for i in candidates]
            new_gap, pick = min(scored)
            if new_gap >= gap:
                break  # no item reduces the gap; give up on this candidate
            removed.append(pick)
            trace.append(new_gap)
            gap = new_gap
        if gap < 0.0:
            key = (len(removed), gap, replacement)
            if best is None or key < (best[0], best[1], best[2]):
                best = (len(removed), gap, replacement, removed, trace)

    if best is None:
        return CounterfactualResult(user_id=user_id, status="not_found", removed_set=[],
                                    displaced=displaced, replacement=None,
                                    estimated_gap_trace=[], method=method)
    _, _, replacement, removed, trace = best
    return CounterfactualResult(user_id=user_id, status="found", removed_set=removed,
                                displaced=displaced, replacement=replacement,
                                estimated_gap_trace=trace, method=method)


def exact_retrain_user(
    params: ModelParams,
    train: Sequence[Interaction],
    user_id: str,
    removed: Sequence[str] = (),
    history: Sequence[str] | None = None,
    weight_decay: float | None = None,
    negatives_per_positive: int | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> np.ndarray:
    """Re-optimize only the user's factor vector on the reduced loss (test oracle).

    Minimizes the same user loss as build_user_state but with `removed`'s
    positive terms dropped (their frozen negatives remain), by damped Newton
    with backtracking, to gradient norm < tol. Everything but the user vector
    stays frozen.
    """
    if weight_decay is None:
        weight_decay = params.config.weight_decay
    if negatives_per_positive is None:
        negatives_per_positive = params.config.negatives_per_positive

    full_items = []
    seen = set()
    for r in train:
        if r.user_id == user_id and r.item_id not in seen:
            seen.add(r.item_id)
            full_items.append(r.item_id)
    if not full_items:
        raise DataError(f"user {user_id!r} has no training interactions")
    user_item_set = frozenset(full_items)
    positives = list(full_items) if history is None else \
        [i for i in full_items if i in set(history)]
    removed = list(removed)
    extra = set(removed) - set(positives)
    if extra:
        raise DataError(f"removed items outside the history: {sorted(extra)[:10]}")

    kept_positives = [z for z in positives if z not in set(removed)]
    negatives = [n for z in positives for n in frozen_negative_sample(
        params, user_id, z, user_item_set, negatives_per_positive)]
    term_items = kept_positives + negatives
    term_labels = [1.0] * len(kept_positives) + [0.0] * len(negatives)
    X, offsets, y = _term_matrices(params, term_items, term_labels)

    p = params.user_factors[params.user_index(user_id)].copy()
    for _ in range(max_iter):
        g = user_loss_grad(p, X, offsets, y, weight_decay)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            return p
        H = user_loss_hessian(p, X, offsets, y, weight_decay)
        try:
            step = scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), g)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(H + 1e-10 * np.eye(len(p)), g)
        # full Newton step whenever it shrinks the gradient (endgame is
        # quadratic and loss comparisons drown in float noise there)
        full = p - step
        if float(np.linalg.norm(user_loss_grad(full, X, offsets, y, weight_decay))) < gnorm:
            p = full
            continue
        f0 = user_loss(p, X, offsets, y, weight_decay)
        t = 1.0
        descent = float(g @ step)
        while t > 1e-12 and user_loss(p - t * step, X, offsets, y, weight_decay) \
                > f0 - 1e-4 * t * descent:
            t *= 0.5
        p = p - t * step
    raise InfluenceError(
        f"user re-fit for {user_id!r} did not reach gradient norm {tol} in {max_iter} steps")
