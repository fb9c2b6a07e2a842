"""Synthetic dataset with planted popularity skew and out-of-character items.

Fifty users over a 41-item catalog: a 5-item mainstream head that every
blockbuster user consumes, plus four niche genres of nine items. Each niche
user's history carries exactly one mainstream item and each blockbuster
user's history exactly one niche item - the planted out-of-character
interactions the profile filter is expected to discard. Descriptions reuse a
small per-genre token pool, so a leave-one-out profile moves sharply when the
lone cross-genre item disappears and barely at all otherwise. The small
mainstream head also keeps same-genre items inside every niche user's top-5
replacement candidates, which is what lets the planted popular item act as
the pivotal removal during the counterfactual search.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Interaction, ItemMeta

GENRE_POOLS = {
    "Mainstream": ["explosion", "franchise", "spectacle", "stunts"],
    "Western": ["canyon", "duel", "frontier", "saloon", "drifter", "tumbleweed"],
    "Noir": ["detective", "fog", "neon", "racket", "shadows", "cigarette"],
    "Documentary": ["archive", "footage", "interview", "verite", "narration", "chronicle"],
    "Animation": ["handdrawn", "palette", "whimsy", "storybook", "inkwork", "daydream"],
}
NICHE_GENRES = ["Western", "Noir", "Documentary", "Animation"]
ITEM_PREFIX = {"Mainstream": "m", "Western": "w", "Noir": "n",
               "Documentary": "d", "Animation": "a"}
TITLE_STEMS = {
    "Mainstream": "Maximum Impact",
    "Western": "Dry River",
    "Noir": "Midnight Ledger",
    "Documentary": "Field Notes",
    "Animation": "Paper Lantern",
}

N_MAINSTREAM = 5
N_PER_NICHE_GENRE = 9
USERS_PER_NICHE_GENRE = 6
N_BLOCKBUSTER = 32
N_MID = 2
NICHE_TOKENS_PER_ITEM = 4
MAINSTREAM_TOKENS_PER_ITEM = 3


def _item_id(genre: str, j: int) -> str:
    return f"{ITEM_PREFIX[genre]}{j:02d}"


def _genre_items(genre: str) -> list[str]:
    count = N_MAINSTREAM if genre == "Mainstream" else N_PER_NICHE_GENRE
    return [_item_id(genre, j) for j in range(count)]


def make_item_catalog() -> dict[str, ItemMeta]:
    """41 items: 5 mainstream + 9 per niche genre, pool-drawn descriptions."""
    catalog: dict[str, ItemMeta] = {}
    for genre in ["Mainstream"] + NICHE_GENRES:
        pool = GENRE_POOLS[genre]
        per_item = MAINSTREAM_TOKENS_PER_ITEM if genre == "Mainstream" \
            else NICHE_TOKENS_PER_ITEM
        for j, iid in enumerate(_genre_items(genre)):
            tokens = [pool[(j + t) % len(pool)] for t in range(per_item)]
            year = 1950 + 3 * j if genre == "Western" else 1990 + 2 * j
            catalog[iid] = ItemMeta(
                item_id=iid,
                title=f"{TITLE_STEMS[genre]} {j + 1} ({year})",
                categories=(genre,),
                description=" ".join(tokens),
            )
    return catalog


def make_toy_dataset(seed: int = 7) -> tuple[list[Interaction], dict[str, ItemMeta]]:
    """Interactions + catalog for the bundled end-to-end pipeline runs.

    Niche users interact with all nine items of one niche genre plus one
    planted mainstream item (mid-history, never the latest, so leave-one-out
    holds out an in-character item). Blockbuster users consume the whole
    mainstream head plus one planted niche item. Two mid users sit between
    the cohorts.
    """
    rng = np.random.default_rng(seed)
    catalog = make_item_catalog()
    mainstream = _genre_items("Mainstream")
    niche_items = [i for g in NICHE_GENRES for i in _genre_items(g)]

    interactions: list[Interaction] = []

    def add_history(user: str, base_items: list[str], plant: str | None, t0: int):
        items = list(base_items)
        order = list(rng.permutation(len(items)))
        ordered = [items[i] for i in order]
        if plant is not None:
            ordered.insert(len(ordered) // 2, plant)
        for pos, iid in enumerate(ordered):
            rating = float(rng.integers(3, 6))
            interactions.append(Interaction(user, iid, t0 + pos, rating))

    user_no = 0
    for genre in NICHE_GENRES:
        for _ in range(USERS_PER_NICHE_GENRE):
            user = f"u_n{user_no:02d}"
            plant = mainstream[user_no % len(mainstream)]
            add_history(user, _genre_items(genre), plant, t0=1000 * user_no)
            user_no += 1

    for k in range(N_BLOCKBUSTER):
        user = f"u_b{k:02d}"
        plant = niche_items[(k * 7) % len(niche_items)]
        # skip one mainstream item so the ranked list always offers a second,
        # comparably-scored mainstream candidate next to the held-out one
        base = [m for j, m in enumerate(mainstream) if j != k % len(mainstream)]
        add_history(user, base, plant, t0=1000 * (100 + k))

    for k in range(N_MID):
        user = f"u_m{k:02d}"
        genre = NICHE_GENRES[k % len(NICHE_GENRES)]
        mixed = mainstream[:4] + _genre_items(genre)[:4]
        add_history(user, mixed, None, t0=1000 * (200 + k))

    interactions.sort(key=lambda r: (r.timestamp, r.user_id, r.item_id))
    return interactions, catalog


def make_scale_dataset(n_users: int = 943, n_clusters: int = 8,
                       items_per_cluster: int = 180, n_head: int = 120,
                       per_user: int = 100, head_frac: float = 0.35,
                       seed: int = 11) -> list[Interaction]:
    """MovieLens-100K-scale synthetic interactions with learnable structure.

    Users belong to preference clusters with dedicated item blocks; a shared
    head of popular items is drawn with a heavy-tailed weight so popularity
    skew and cluster taste are both present for the recommender to pick up.
    """
    rng = np.random.default_rng(seed)
    head = [f"h{j:04d}" for j in range(n_head)]
    blocks = [[f"c{c}_{j:03d}" for j in range(items_per_cluster)]
              for c in range(n_clusters)]
    head_weights = 1.0 / np.arange(1, n_head + 1) ** 0.8
    head_weights /= head_weights.sum()
    rows: list[Interaction] = []
    for u in range(n_users):
        cluster = u % n_clusters
        size = int(rng.integers(per_user - 40, per_user + 40))
        n_head_u = min(int(round(size * head_frac)), n_head)
        n_block_u = min(size - n_head_u, items_per_cluster)
        picked_head = rng.choice(n_head, size=n_head_u, replace=False, p=head_weights)
        picked_block = rng.choice(items_per_cluster, size=n_block_u, replace=False)
        items = [head[j] for j in picked_head] + [blocks[cluster][j] for j in picked_block]
        for ts, idx in enumerate(rng.permutation(len(items))):
            rows.append(Interaction(f"u{u:04d}", items[idx], ts))
    rows.sort(key=lambda r: (r.timestamp, r.user_id, r.item_id))
    return rows


def write_toy_dataset(out_dir: str | Path, seed: int = 7) -> tuple[Path, Path]:
    """Write interactions.tsv + items.jsonl; returns the two paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    interactions, catalog = make_toy_dataset(seed)
    inter_path = out_dir / "interactions.tsv"
    with open(inter_path, "w", encoding="utf-8") as fh:
        for r in interactions:
            rating = "" if r.rating is None else f"{r.rating:g}"
            fh.write(f"{r.user_id}\t{r.item_id}\t{rating}\t{r.timestamp}\n")
    items_path = out_dir / "items.jsonl"
    with open(items_path, "w", encoding="utf-8") as fh:
        for iid in sorted(catalog):
            m = catalog[iid]
            fh.write(json.dumps({"item_id": m.item_id, "title": m.title,
                                 "categories": list(m.categories),
                                 "description": m.description},
                                sort_keys=True, ensure_ascii=False) + "\n")
    return inter_path, items_path
