"""Latent-factor recommender: elementwise-product model with learned output weights.

score(u, i) = w . (p_u * q_i) + b_i, trained as pointwise log-loss over
positives plus sampled negatives with mini-batch SGD and L2 weight decay.
Training is single-threaded and bitwise deterministic for a given seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .data import Split
from .errors import DataError, TrainingError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"POPCFX01"


@dataclass
class TrainConfig:
    dim: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 20
    negatives_per_positive: int = 4
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise DataError("dim must be >= 1")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise DataError("weight_decay must be >= 0")

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class ModelParams:
    user_ids: list[str]
    item_ids: list[str]
    user_factors: np.ndarray   # |U| x d
    item_factors: np.ndarray   # |I| x d
    output_weights: np.ndarray  # d
    item_bias: np.ndarray       # |I|
    rng_seed: int
    config: TrainConfig = field(default_factory=TrainConfig)
    _user_index: dict[str, int] = field(default_factory=dict, repr=False)
    _item_index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._user_index:
            self._user_index = {u: i for i, u in enumerate(self.user_ids)}
        if not self._item_index:
            self._item_index = {it: i for i, it in enumerate(self.item_ids)}

    @property
    def dim(self) -> int:
        return self.user_factors.shape[1]

    def user_index(self, user_id: str) -> int:
        try:
            return self._user_index[user_id]
        except KeyError:
            raise DataError(f"unknown user {user_id!r}") from None

    def item_index(self, item_id: str) -> int:
        try:
            return self._item_index[item_id]
        except KeyError:
            raise DataError(f"unknown item {item_id!r}") from None


@dataclass
class RankedList:
    user_id: str
    items: list[tuple[str, float]]  # (item_id, logit), scores non-increasing
    k: int


def stable_seed(*parts: int | str) -> int:
    """Platform-independent 64-bit seed derived from mixed parts."""
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def score(params: ModelParams, user_id: str, item_id: str) -> float:
    """Predicted logit for one user-item pair."""
    u = params.user_index(user_id)
    i = params.item_index(item_id)
    return float(params.output_weights @ (params.user_factors[u] * params.item_factors[i])
                 + params.item_bias[i])


def score_items(params: ModelParams, user_id: str, item_indices: np.ndarray) -> np.ndarray:
    """Logits for one user against many item indices at once."""
    u = params.user_index(user_id)
    q = params.item_factors[item_indices]
    return (params.user_factors[u] * q) @ params.output_weights + params.item_bias[item_indices]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log1p_exp(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x), overflow safe."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def batch_loss(P, Q, w, b, users, items, labels, weight_decay):
    """Mean log-loss over a batch plus L2 of all parameters.

    Kept separate from the update step so the analytic gradients can be
    checked against finite differences of this exact function.
    """
    s = (P[users] * Q[items]) @ w + b[items]
    # -[y log sigma + (1-y) log(1-sigma)] = log(1+e^s) - y*s
    bce = _log1p_exp(s) - labels * s
    reg = weight_decay * (np.sum(P * P) + np.sum(Q * Q) + np.sum(w * w) + np.sum(b * b))
    return float(np.mean(bce) + reg)


def batch_gradients(P, Q, w, b, users, items, labels, weight_decay):
    """Analytic gradients of batch_loss w.r.t. (P, Q, w, b)."""
    B = len(users)
    pu = P[users]
    qi = Q[items]
    s = (pu * qi) @ w + b[items]
    err = (_sigmoid(s) - labels) / B  # d(mean bce)/ds
    dP = np.zeros_like(P)
    dQ = np.zeros_like(Q)
    db = np.zeros_like(b)
    np.add.at(dP, users, err[:, None] * qi * w)
    np.add.at(dQ, items, err[:, None] * pu * w)
    np.add.at(db, items, err)
    dw = (pu * qi).T @ err
    dP += 2.0 * weight_decay * P
    dQ += 2.0 * weight_decay * Q
    dw += 2.0 * weight_decay * w
    db += 2.0 * weight_decay * b
    return dP, dQ, dw, db


def _sample_negatives(rng, item_count, pos_users, negatives_per_positive, pos_key_set):
    """Draw items the user has not interacted with, one block per positive."""
    n = len(pos_users) * negatives_per_positive
    neg_users = np.repeat(pos_users, negatives_per_positive)
    neg_items = rng.integers(0, item_count, size=n, dtype=np.int64)
    keys = neg_users * item_count + neg_items
    bad = np.isin(keys, pos_key_set)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg_items[idx] = rng.integers(0, item_count, size=len(idx), dtype=np.int64)
        keys[idx] = neg_users[idx] * item_count + neg_items[idx]
        bad[idx] = np.isin(keys[idx], pos_key_set)
    return neg_users, neg_items


def train(split: Split, config: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> ModelParams:
    """Fit the model on the train half of a split.

    Negatives are resampled every epoch from each user's non-interacted items.
    Raises TrainingError (with the epoch index) if the loss goes non-finite.
    """
    if not split.train:
        raise DataError("cannot train on an empty split")
    user_ids = sorted({r.user_id for r in split.train})
    item_ids = sorted({r.item_id for r in split.train})
    uidx = {u: i for i, u in enumerate(user_ids)}
    iidx = {it: i for i, it in enumerate(item_ids)}
    pos_users = np.array([uidx[r.user_id] for r in split.train], dtype=np.int64)
    pos_items = np.array([iidx[r.item_id] for r in split.train], dtype=np.int64)
    n_users, n_items, d = len(user_ids), len(item_ids), config.dim
    if n_items <= config.negatives_per_positive:
        raise DataError("catalog too small for the requested negative sampling rate")

    pos_keys = np.unique(pos_users * n_items + pos_items)

    rng = np.random.default_rng(config.seed)
    P = rng.uniform(-0.05, 0.05, size=(n_users, d))
    Q = rng.uniform(-0.05, 0.05, size=(n_items, d))
    w = rng.uniform(-0.05, 0.05, size=d)
    b = np.zeros(n_items)

    lr, wd = config.learning_rate, config.weight_decay
    for epoch in range(1, config.epochs + 1):
        neg_users, neg_items = _sample_negatives(
            rng, n_items, pos_users, config.negatives_per_positive, pos_keys)
        users = np.concatenate([pos_users, neg_users])
        items = np.concatenate([pos_items, neg_items])
        labels = np.concatenate([np.ones(len(pos_users)), np.zeros(len(neg_users))])
        order = rng.permutation(len(users))
        users, items, labels = users[order], items[order], labels[order]

        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(users), config.batch_size):
            sl = slice(start, start + config.batch_size)
            bu, bi, bl = users[sl], items[sl], labels[sl]
            pu = P[bu]
            qi = Q[bi]
            s = (pu * qi) @ w + b[bi]
            bce = _log1p_exp(s) - bl * s
            loss = float(np.mean(bce))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            epoch_loss += loss
            n_batches += 1

            err = (_sigmoid(s) - bl) / len(bu)
            dw = (pu * qi).T @ err
            grad_p = err[:, None] * qi * w
            grad_q = err[:, None] * pu * w
            # decay touches every parameter each step, data terms only touched rows
            P *= 1.0 - 2.0 * lr * wd
            Q *= 1.0 - 2.0 * lr * wd
            b *= 1.0 - 2.0 * lr * wd
            w -= lr * (dw + 2.0 * wd * w)
            np.add.at(P, bu, -lr * grad_p)
            np.add.at(Q, bi, -lr * grad_q)
            np.add.at(b, bi, -lr * err)

        mean_loss = epoch_loss / max(1, n_batches)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        if epoch == 1 or epoch % 10 == 0 or epoch == config.epochs:
            log.info("epoch %d/%d mean batch loss %.6f", epoch, config.epochs, mean_loss)

    return ModelParams(user_ids=user_ids, item_ids=item_ids, user_factors=P,
                       item_factors=Q, output_weights=w, item_bias=b,
                       rng_seed=config.seed, config=config)


def top_k(params: ModelParams, user_id: str, k: int,
          exclude: Iterable[str] = ()) -> RankedList:
    """The k highest-logit items outside `exclude`; ties to the smaller item_id."""
    if k < 1:
        raise DataError("k must be >= 1")
    exclude = set(exclude)
    candidates = [(it, idx) for idx, it in enumerate(params.item_ids) if it not in exclude]
    if len(candidates) < k:
        raise DataError(f"only {len(candidates)} candidate items for top-{k}")
    idxs = np.array([idx for _, idx in candidates], dtype=np.int64)
    logits = score_items(params, user_id, idxs)
    ranked = sorted(zip((c[0] for c in candidates), logits), key=lambda t: (-t[1], t[0]))
    return RankedList(user_id=user_id, items=[(it, float(s)) for it, s in ranked[:k]], k=k)


def evaluate_ndcg(params: ModelParams, split: Split, num_negatives: int = 100,
                  cutoff: int = 10, seed: int = 0) -> float:
    """Sampled-negative nDCG@cutoff over the held-out items.

    For each test user the held-out item is ranked against num_negatives items
    the user never interacted with (seeded per user; capped at the number of
    available non-interacted items). Per-user gain is 1/log2(rank+1) inside
    the cutoff, 0 outside; the mean over users is returned.
    """
    if not split.test:
        raise DataError("split has no test rows")
    train_items: dict[str, set[str]] = {}
    for r in split.train:
        train_items.setdefault(r.user_id, set()).add(r.item_id)

    gains = []
    all_items = params.item_ids
    for user in sorted(split.test):
        held = split.test[user]
        if user not in params._user_index or held not in params._item_index:
            continue
        interacted = train_items.get(user, set()) | {held}
        pool = [it for it in all_items if it not in interacted]
        rng = np.random.default_rng(stable_seed(seed, "ndcg", user))
        take = min(num_negatives, len(pool))
        negatives = list(rng.choice(np.array(pool, dtype=object), size=take, replace=False)) \
            if take else []
        cand = [held] + [str(x) for x in negatives]
        idxs = np.array([params.item_index(it) for it in cand], dtype=np.int64)
        logits = score_items(params, user, idxs)
        ranked = sorted(zip(cand, logits), key=lambda t: (-t[1], t[0]))
        rank = next(pos for pos, (it, _) in enumerate(ranked, start=1) if it == held)
        gains.append(1.0 / np.log2(rank + 1) if rank <= cutoff else 0.0)
    if not gains:
        raise DataError("no test user overlaps the model vocabulary")
    return float(np.mean(gains))


def save_model(params: ModelParams, path: str | Path) -> None:
    """Versioned binary checkpoint (dims header + row-major arrays) + JSON manifest."""
    path = Path(path)
    header = {
        "version": 1,
        "dim": params.dim,
        "n_users": len(params.user_ids),
        "n_items": len(params.item_ids),
        "rng_seed": params.rng_seed,
        "config": asdict(params.config),
        "user_ids": params.user_ids,
        "item_ids": params.item_ids,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for arr in (params.user_factors, params.item_factors,
                    params.output_weights, params.item_bias):
            fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    manifest = {
        "dim": params.dim,
        "n_users": len(params.user_ids),
        "n_items": len(params.item_ids),
        "seed": params.rng_seed,
        "config_hash": params.config.content_hash(),
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                                         encoding="utf-8")


def load_model(path: str | Path) -> ModelParams:
    """Read a checkpoint written by save_model."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model checkpoint {path}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a model checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    if header.get("version") != 1:
        raise DataError(f"unsupported checkpoint version {header.get('version')}")
    d, n_users, n_items = header["dim"], header["n_users"], header["n_items"]
    offset = 12 + header_len
    sizes = [(n_users, d), (n_items, d), (d,), (n_items,)]
    arrays = []
    for shape in sizes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype=np.float64, count=count, offset=offset).reshape(shape)
        arrays.append(arr.copy())
        offset += count * 8
    config = TrainConfig(**header["config"])
    return ModelParams(user_ids=header["user_ids"], item_ids=header["item_ids"],
                       user_factors=arrays[0], item_factors=arrays[1],
                       output_weights=arrays[2], item_bias=arrays[3],
                       rng_seed=header["rng_seed"], config=config)
