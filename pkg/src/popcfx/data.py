"""Interaction ingestion, k-core filtering, popularity scores, splits, and cohorts."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

log = logging.getLogger(__name__)

FORMATS = ("auto", "tsv", "csv")


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    rating: float | None = None


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    title: str
    categories: tuple[str, ...] = ()
    description: str = ""


@dataclass
class PopularityTable:
    """Per-item popularity: fraction of distinct training users who touched the item."""

    scores: dict[str, float]
    provenance: str = "train"

    def __getitem__(self, item_id: str) -> float:
        return self.scores[item_id]

    def get(self, item_id: str, default: float = 0.0) -> float:
        return self.scores.get(item_id, default)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.scores

    def max_score(self) -> float:
        return max(self.scores.values())


@dataclass
class Cohort:
    label: str  # "niche" | "blockbuster"
    user_ids: list[str]
    warning: bool = False  # set when fewer survivors than requested


@dataclass
class Split:
    train: list[Interaction]
    test: dict[str, str]  # user_id -> held-out item_id


@dataclass
class LoadReport:
    interactions: list[Interaction]
    n_malformed: int
    n_duplicates: int


def _parse_row(row: Sequence[str]) -> Interaction | None:
    """Parse one (user, item, rating?, timestamp) row; None when malformed."""
    if len(row) == 3:
        user, item, rating_text, ts_text = row[0], row[1], "", row[2]
    elif len(row) == 4:
        user, item, rating_text, ts_text = row
    else:
        return None
    user, item = user.strip(), item.strip()
    if not user or not item:
        return None
    try:
        timestamp = int(ts_text.strip())
    except ValueError:
        return None
    if timestamp < 0:
        return None
    rating: float | None = None
    rating_text = rating_text.strip()
    if rating_text:
        try:
            rating = float(rating_text)
        except ValueError:
            return None
    return Interaction(user, item, timestamp, rating)


def load_interactions(path: str | Path, fmt: str = "auto") -> LoadReport:
    """Read a delimited interaction file.

    Args:
        path: tab- or comma-delimited file with (user, item, rating?, timestamp) rows.
        fmt: "tsv", "csv", or "auto" (sniff the first line).

    Returns:
        LoadReport with the deduplicated, timestamp-sorted interactions plus
        counts of malformed and duplicate rows.
    """
    if fmt not in FORMATS:
        raise DataError(f"unknown interaction format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read interactions file {path}: {exc}") from exc

    lines = text.splitlines()
    if fmt == "auto":
        first = next((ln for ln in lines if ln.strip()), "")
        fmt = "tsv" if "\t" in first else "csv"
    delimiter = "\t" if fmt == "tsv" else ","

    seen: set[tuple[str, str, int]] = set()
    out: list[Interaction] = []
    n_malformed = 0
    n_duplicates = 0
    for row in csv.reader(lines, delimiter=delimiter):
        if not row or all(not c.strip() for c in row):
            continue
        inter = _parse_row(row)
        if inter is None:
            n_malformed += 1
            continue
        key = (inter.user_id, inter.item_id, inter.timestamp)
        if key in seen:
            n_duplicates += 1
            continue
        seen.add(key)
        out.append(inter)

    if not out:
        raise DataError(f"no valid interaction rows in {path}")
    out.sort(key=lambda r: (r.timestamp, r.user_id, r.item_id))
    if n_malformed or n_duplicates:
        log.warning(
            "loaded %s: %d rows kept, %d malformed, %d duplicates dropped",
            path, len(out), n_malformed, n_duplicates,
        )
    return LoadReport(out, n_malformed, n_duplicates)


def load_item_meta(path: str | Path) -> dict[str, ItemMeta]:
    """Read one-JSON-object-per-line item metadata keyed by item_id."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read metadata file {path}: {exc}") from exc
    metas: dict[str, ItemMeta] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        item_id = str(obj.get("item_id", "")).strip()
        title = str(obj.get("title", "")).strip()
        if not item_id or not title:
            raise DataError(f"{path}:{lineno}: item_id and title are required")
        if item_id in metas:
            raise DataError(f"{path}:{lineno}: duplicate item_id {item_id!r}")
        categories = tuple(str(c) for c in obj.get("categories", []))
        metas[item_id] = ItemMeta(item_id, title, categories, str(obj.get("description", "")))
    if not metas:
        raise DataError(f"no metadata rows in {path}")
    return metas


def collapse_repeats(interactions: Iterable[Interaction]) -> list[Interaction]:
    """Keep one event per (user, item), the latest-timestamp one."""
    latest: dict[tuple[str, str], Interaction] = {}
    for inter in interactions:
        key = (inter.user_id, inter.item_id)
        prev = latest.get(key)
        if prev is None or inter.timestamp > prev.timestamp:
            latest[key] = inter
    out = list(latest.values())
    out.sort(key=lambda r: (r.timestamp, r.user_id, r.item_id))
    return out


def k_core_filter(interactions: Sequence[Interaction], k: int) -> list[Interaction]:
    """Iterate to the fixpoint where every surviving user and item has >= k rows."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    rows = list(interactions)
    while True:
        user_counts: dict[str, int] = defaultdict(int)
        item_counts: dict[str, int] = defaultdict(int)
        for r in rows:
            user_counts[r.user_id] += 1
            item_counts[r.item_id] += 1
        kept = [r for r in rows if user_counts[r.user_id] >= k and item_counts[r.item_id] >= k]
        if len(kept) == len(rows):
            break
        rows = kept
    if not rows:
        raise DataError(f"{k}-core filtering removed every interaction; dataset too sparse")
    return rows


def compute_popularity(train_interactions: Sequence[Interaction]) -> PopularityTable:
    """Popularity of item i = |distinct users who interacted with i| / |distinct users|."""
    if not train_interactions:
        raise DataError("cannot compute popularity of an empty training set")
    users_per_item: dict[str, set[str]] = defaultdict(set)
    all_users: set[str] = set()
    for r in train_interactions:
        users_per_item[r.item_id].add(r.user_id)
        all_users.add(r.user_id)
    n_users = len(all_users)
    scores = {item: len(users) / n_users for item, users in users_per_item.items()}
    return PopularityTable(scores, provenance="train")


def user_histories(interactions: Iterable[Interaction]) -> dict[str, list[Interaction]]:
    """Group interactions per user, each list in (timestamp, item_id) order."""
    per_user: dict[str, list[Interaction]] = defaultdict(list)
    for r in interactions:
        per_user[r.user_id].append(r)
    for rows in per_user.values():
        rows.sort(key=lambda r: (r.timestamp, r.item_id))
    return dict(per_user)


def leave_one_out_split(interactions: Sequence[Interaction]) -> Split:
    """Hold out each user's latest-timestamp interaction as their single test item.

    Timestamp ties are broken toward the lexicographically larger item_id.
    Users must have at least 2 interactions and no repeated (user, item) pairs
    (run collapse_repeats first if the source data has repeats).
    """
    per_user = user_histories(interactions)
    singletons = sorted(u for u, rows in per_user.items() if len(rows) < 2)
    if singletons:
        raise DataError(
            "leave-one-out needs >= 2 interactions per user; offending users: "
            + ", ".join(singletons[:20])
        )
    train: list[Interaction] = []
    test: dict[str, str] = {}
    for user in sorted(per_user):
        rows = per_user[user]
        items = [r.item_id for r in rows]
        if len(set(items)) != len(items):
            raise DataError(f"user {user!r} has repeated items; collapse_repeats first")
        held = max(rows, key=lambda r: (r.timestamp, r.item_id))
        test[user] = held.item_id
        train.extend(r for r in rows if r is not held)
    train.sort(key=lambda r: (r.timestamp, r.user_id, r.item_id))
    return Split(train=train, test=test)


def popular_item_set(popularity: PopularityTable, frac: float = 0.2) -> set[str]:
    """The top `frac` of catalog items ranked by popularity, item_id tie-break."""
    ranked = sorted(popularity.scores.items(), key=lambda kv: (-kv[1], kv[0]))
    n_popular = max(1, int(len(ranked) * frac))
    return {item for item, _ in ranked[:n_popular]}


def select_cohorts(
    train: Sequence[Interaction],
    popularity: PopularityTable,
    top_frac: float = 0.2,
    bottom_frac: float = 0.2,
    max_history: int = 100,
    per_group: int = 250,
    popular_frac: float = 0.2,
) -> tuple[Cohort, Cohort]:
    """Pick the most-niche and most-blockbuster users for explanation targets.

    Users are scored by the fraction of their history that falls in the top
    `popular_frac` of items by popularity. Users with more than `max_history`
    interactions are dropped, the middle of the ranking is discarded, and the
    `per_group` most extreme users on each side are kept (most extreme first).

    Returns:
        (niche, blockbuster) cohorts. When a side has fewer than `per_group`
        survivors, all of them are returned and the cohort's warning flag set.
    """
    if not (0.0 < top_frac and 0.0 < bottom_frac):
        raise DataError("top_frac and bottom_frac must be positive")
    if top_frac + bottom_frac > 1.0 + 1e-12:
        raise DataError("top_frac + bottom_frac must not exceed 1")

    popular = popular_item_set(popularity, popular_frac)
    histories = user_histories(train)
    scored: list[tuple[float, str]] = []
    for user, rows in histories.items():
        if len(rows) > max_history:
            continue
        items = [r.item_id for r in rows]
        frac = sum(1 for i in items if i in popular) / len(items)
        scored.append((frac, user))
    scored.sort(key=lambda su: (su[0], su[1]))

    n = len(scored)
    n_bottom = int(n * bottom_frac)
    n_top = int(n * top_frac)
    bottom_pool = scored[:n_bottom]  # ascending: most niche first
    top_pool = scored[n - n_top:][::-1]  # descending: most blockbuster first

    niche = Cohort("niche", [u for _, u in bottom_pool[:per_group]],
                   warning=len(bottom_pool) < per_group)
    blockbuster = Cohort("blockbuster", [u for _, u in top_pool[:per_group]],
                         warning=len(top_pool) < per_group)
    if niche.warning or blockbuster.warning:
        log.warning(
            "cohort pools smaller than per_group=%d (niche=%d, blockbuster=%d)",
            per_group, len(bottom_pool), len(top_pool),
        )
    return niche, blockbuster
