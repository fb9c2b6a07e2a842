"""LLM user profiles and the greedy history filter.

Builds a textual preference profile from a user's history, embeds it, and
repeatedly discards the history item whose absence moves the embedded profile
the furthest (largest cosine dissimilarity), leaving a filtered history for
the counterfactual search.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import ItemMeta
from .errors import DataError, FilterInterrupted, ProviderError
from .providers import ProviderHandle

log = logging.getLogger(__name__)

# Chosen so the tie-break comparison is stable across platforms.
DISSIMILARITY_DECIMALS = 12

_VERB_BY_DOMAIN = {"movies": "watched"}


def _singular(noun: str) -> str:
    return noun[:-1] if noun.endswith("s") else noun


@dataclass
class ProfilePrompt:
    domain_noun: str
    header: str
    item_lines: list[str]
    word_limit: int = 300

    def text(self) -> str:
        return self.header + "\n" + "\n".join(self.item_lines)


@dataclass
class UserProfile:
    user_id: str
    history_key: str
    text: str
    embedding: np.ndarray
    provider_id: str


@dataclass
class FilterResult:
    user_id: str
    removed: list[str]
    step_dissimilarities: list[float]
    remaining_history: list[str]


def item_line(meta: ItemMeta) -> str:
    """Render one "Title (Year) - Categories - Description" history line.

    Items without a description drop that segment rather than leaving a
    dangling separator.
    """
    parts = [meta.title]
    if meta.categories:
        parts.append(", ".join(meta.categories))
    if meta.description:
        parts.append(meta.description)
    return " - ".join(parts)


def build_prompt(items: Sequence[ItemMeta], domain_noun: str = "movies",
                 word_limit: int = 300) -> ProfilePrompt:
    """Assemble the profile-request prompt for one history."""
    if not items:
        raise DataError("cannot build a prompt from an empty history")
    if word_limit <= 0:
        raise DataError("word_limit must be positive")
    verb = _VERB_BY_DOMAIN.get(domain_noun, "interacted with")
    header = (
        f"Your task is to analyze a list of {domain_noun} a user has interacted with "
        f"and describe the profile and the preferences of the user in less than "
        f"{word_limit} words. Try to not be too broad (e.g. mention too many general "
        f"categories such as action or comedy). Do not mention specific "
        f"{_singular(domain_noun)} titles.\n\n"
        f"The user has {verb} the following {domain_noun}:"
    )
    return ProfilePrompt(domain_noun=domain_noun, header=header,
                         item_lines=[item_line(m) for m in items], word_limit=word_limit)


def history_key(item_ids: Sequence[str]) -> str:
    """Order-independent fingerprint of an item-id subset."""
    return hashlib.sha256("\n".join(sorted(item_ids)).encode("utf-8")).hexdigest()


def generate_profile(provider: ProviderHandle, prompt: ProfilePrompt) -> str:
    """Get the profile text for a prompt, going through the provider cache."""
    text = provider.profile_text(prompt)
    if not text:
        raise ProviderError("provider returned an empty profile")
    return text


def embed_profile(provider: ProviderHandle, text: str) -> np.ndarray:
    """Embed profile text; result is checked to be unit norm."""
    if not text:
        raise ProviderError("cannot embed an empty profile")
    vec = provider.embed(text)
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > 1e-6:
        raise ProviderError(f"embedding is not unit norm (|e| = {norm})")
    return vec


def cosine_dissimilarity(a: np.ndarray, b: np.ndarray) -> float:
    """1 - a.b for unit vectors; lands in [0, 2]."""
    if a.shape != b.shape:
        raise DataError(f"embedding dims differ: {a.shape} vs {b.shape}")
    return float(1.0 - a @ b)


def profile_of(provider: ProviderHandle, user_id: str, items: Sequence[ItemMeta],
               domain_noun: str = "movies") -> UserProfile:
    """Full generate->embed round trip for one item subset."""
    prompt = build_prompt(items, domain_noun)
    text = generate_profile(provider, prompt)
    embedding = embed_profile(provider, text)
    return UserProfile(user_id=user_id, history_key=history_key([m.item_id for m in items]),
                       text=text, embedding=embedding, provider_id=provider.provider_id)


def greedy_filter(
    user_id: str,
    history: Sequence[str],
    n: int,
    provider: ProviderHandle,
    metadata: Mapping[str, ItemMeta],
    min_remaining: int = 2,
    domain_noun: str = "movies",
) -> FilterResult:
    """Drop the n history items whose removal most changes the embedded profile.

    At each step every remaining item is tentatively removed, the leave-one-out
    profile is generated and embedded, and the item with the largest cosine
    dissimilarity to the current profile is discarded permanently (ties to the
    smaller item_id). The winner's embedding becomes the next comparison point.

    Args:
        user_id: whose history is being filtered.
        history: item ids in prompt (timestamp) order.
        n: number of items to discard.
        provider: chat + embedding backend handle.
        metadata: item_id -> ItemMeta for prompt rendering.
        min_remaining: floor on the surviving history length.
        domain_noun: noun used in the prompt template ("movies", "video games").

    Raises:
        FilterInterrupted: the provider failed mid-loop; carries the number of
            completed steps and the partial result. Completed provider calls
            stay cached, so a rerun resumes cheaply.
    """
    history = list(history)
    if n < 0:
        raise DataError("n must be >= 0")
    if len(history) - n < min_remaining:
        raise DataError(
            f"filtering {n} of {len(history)} items would leave fewer than "
            f"min_remaining={min_remaining}")
    missing = [i for i in history if i not in metadata]
    if missing:
        raise DataError(f"history items missing metadata: {missing[:10]}")

    removed: list[str] = []
    dissimilarities: list[float] = []
    remaining = list(history)
    if n == 0:
        return FilterResult(user_id, removed, dissimilarities, remaining)

    def metas(ids):
        return [metadata[i] for i in ids]

    try:
        current = profile_of(provider, user_id, metas(remaining), domain_noun).embedding
        for _ in range(n):
            best_item: str | None = None
            best_diss = -np.inf
            best_embedding: np.ndarray | None = None
            for candidate in remaining:
                trial = [i for i in remaining if i != candidate]
                prof = profile_of(provider, user_id, metas(trial), domain_noun)
                diss = round(cosine_dissimilarity(current, prof.embedding),
                             DISSIMILARITY_DECIMALS)
                if diss > best_diss or (diss == best_diss and candidate < best_item):
                    best_item, best_diss, best_embedding = candidate, diss, prof.embedding
            removed.append(best_item)
            dissimilarities.append(best_diss)
            remaining.remove(best_item)
            current = best_embedding
    except ProviderError as exc:
        partial = FilterResult(user_id, removed, dissimilarities, remaining)
        raise FilterInterrupted(
            f"provider failed for user {user_id} after {len(removed)} of {n} steps: {exc}",
            steps_completed=len(removed), partial=partial) from exc

    return FilterResult(user_id, removed, dissimilarities, remaining)
