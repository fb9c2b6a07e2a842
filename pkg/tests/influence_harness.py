"""Shared builders for removal-estimate fidelity checks.

Instances put the probe user's factor vector at the exact optimum of its user
loss first (as a converged trainer would), so the one-step removal estimate is
compared against the re-fit oracle from a stationary start.
"""

from itertools import combinations

import numpy as np

from popcfx.data import Interaction
from popcfx.influence import (
    estimate_removed_params,
    exact_retrain_user,
    rescore,
)
from popcfx.recsys import ModelParams, TrainConfig, top_k


def brute_force_min_flip(params, state, k):
    """Smallest flipping subset size under the same removal estimator (exhaustive)."""
    ranked = top_k(params, state.user_id, k, exclude=state.exclude_items)
    displaced = ranked.items[0][0]
    history = state.history
    best_size = None
    for replacement, _ in ranked.items[1:]:
        for size in range(0, len(history) + 1):
            if best_size is not None and size >= best_size:
                break
            flipped = False
            for subset in combinations(history, size):
                vec = estimate_removed_params(state, params, list(subset))
                gap = rescore(params, state.user_id, vec, displaced) \
                    - rescore(params, state.user_id, vec, replacement)
                if gap < 0:
                    flipped = True
                    break
            if flipped:
                best_size = size
                break
    return best_size


def make_stationary_instance(seed, d_max=4, h_max=10, extra_items=8):
    """Random tiny model + single-user history with a stationary user vector.

    Weight decay 1e-2 and 3 negatives per positive keep the optimum inside the
    curved part of the sigmoid, like a model trained to convergence with
    regularization rather than one run into saturation.
    """
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, d_max + 1))
    h = int(rng.integers(2, h_max + 1))
    n_items = h + extra_items
    item_ids = [f"i{j:02d}" for j in range(n_items)]
    user = "u0"

    Q = rng.normal(0.0, 0.6, size=(n_items, d))
    w = rng.normal(0.0, 0.8, size=d)
    w += np.sign(w + 1e-12) * 0.2  # keep every output weight away from zero
    b = rng.normal(0.0, 0.3, size=n_items)
    P = rng.uniform(-0.5, 0.5, size=(1, d))
    cfg = TrainConfig(dim=d, weight_decay=1e-2, negatives_per_positive=3, seed=int(seed))
    params = ModelParams(user_ids=[user], item_ids=item_ids, user_factors=P,
                         item_factors=Q, output_weights=w, item_bias=b,
                         rng_seed=int(seed), config=cfg)

    history = [str(x) for x in rng.choice(np.array(item_ids, dtype=object),
                                          size=h, replace=False)]
    train_rows = [Interaction(user, it, ts) for ts, it in enumerate(history)]
    params.user_factors[0] = exact_retrain_user(params, train_rows, user, removed=())
    return params, train_rows, history


def collect_score_changes(n_instances=60, seed0=100, damping=1e-2, probes_per_instance=3):
    """Paired (estimated, exact) score changes for singleton removals and probe items."""
    from popcfx.influence import build_user_state, estimate_removed_params, rescore
    from popcfx.recsys import score

    estimated, exact = [], []
    for seed in range(seed0, seed0 + n_instances):
        params, train_rows, history = make_stationary_instance(seed)
        rng = np.random.default_rng(seed + 7)
        state = build_user_state(params, train_rows, "u0", damping=damping)
        removed = [str(rng.choice(np.array(history, dtype=object)))]
        p_est = estimate_removed_params(state, params, removed)
        p_exact = exact_retrain_user(params, train_rows, "u0", removed=removed)
        probe_items = rng.choice(np.array(params.item_ids, dtype=object),
                                 size=probes_per_instance, replace=False)
        for item in probe_items:
            item = str(item)
            base = score(params, "u0", item)
            estimated.append(rescore(params, "u0", p_est, item) - base)
            exact.append(rescore(params, "u0", p_exact, item) - base)
    return np.array(estimated), np.array(exact)
