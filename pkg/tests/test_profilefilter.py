import numpy as np
import pytest

from popcfx.data import ItemMeta
from popcfx.errors import DataError, FilterInterrupted, ProviderError
from popcfx.profilefilter import (
    DISSIMILARITY_DECIMALS,
    FilterResult,
    build_prompt,
    cosine_dissimilarity,
    embed_profile,
    generate_profile,
    greedy_filter,
    history_key,
    item_line,
    profile_of,
)
from popcfx.providers import ProviderConfig, ProviderHandle, ResponseCache, stub_embed, stub_profile


def meta(item_id, title, cats, desc=""):
    return ItemMeta(item_id, title, tuple(cats), desc)


DIE_HARD = meta("i1", "Die Hard (1988)", ["Action", "Thriller"],
                "NYPD cop John McClane battles terrorists in a tower")


@pytest.fixture
def stub_handle(tmp_path):
    return ProviderHandle(ProviderConfig(kind="stub", embed_dim=1024),
                          ResponseCache(tmp_path / "cache"))


# ---------------------------------------------------------------------------
# prompt construction


def test_prompt_single_item_line_count():
    prompt = build_prompt([DIE_HARD], "movies")
    assert len(prompt.item_lines) == 1
    assert prompt.text().count("Die Hard") == 1


def test_prompt_deterministic_under_metadata_map_order():
    items = [meta("a", "A", ["X"], "d1"), meta("b", "B", ["Y"], "d2")]
    assert build_prompt(items, "movies").text() == build_prompt(list(items), "movies").text()


def test_prompt_die_hard_line_format():
    assert item_line(DIE_HARD) == (
        "Die Hard (1988) - Action, Thriller - NYPD cop John McClane battles "
        "terrorists in a tower")


def test_prompt_header_constraints_present():
    prompt = build_prompt([DIE_HARD], "movies")
    text = prompt.text()
    assert "in less than 300 words" in text
    assert "not be too broad" in text
    assert "Do not mention specific movie titles" in text
    assert "The user has watched the following movies:" in text


def test_prompt_domain_noun_adapts():
    text = build_prompt([meta("g", "Halo (2001)", ["Shooter"], "spartan")],
                        "video games").text()
    assert "a list of video games" in text
    assert "Do not mention specific video game titles" in text
    assert "watched" not in text


def test_prompt_omits_missing_description():
    line = item_line(meta("i", "Alien (1979)", ["Horror"]))
    assert line == "Alien (1979) - Horror"


def test_prompt_empty_history_raises():
    with pytest.raises(DataError):
        build_prompt([], "movies")


def test_history_key_order_independent():
    assert history_key(["b", "a"]) == history_key(["a", "b"])
    assert history_key(["a"]) != history_key(["a", "b"])


# ---------------------------------------------------------------------------
# profiles and embeddings


def test_generate_profile_cache_hit_no_second_call(stub_handle):
    prompt = build_prompt([DIE_HARD], "movies")
    t1 = generate_profile(stub_handle, prompt)
    made = stub_handle.requests_made
    t2 = generate_profile(stub_handle, prompt)
    assert t1 == t2
    assert stub_handle.requests_made == made
    assert stub_handle.cache_hits == 1


def test_stub_profile_genre_histogram_ordering(stub_handle):
    items = [meta(f"a{i}", f"A{i}", ["Action"], "boom") for i in range(3)]
    items.append(meta("d0", "D0", ["Drama"], "tears"))
    text = generate_profile(stub_handle, build_prompt(items, "movies"))
    assert text.index("Action:3") < text.index("Drama:1")


def test_embed_profile_unit_norm(stub_handle):
    vec = embed_profile(stub_handle, "CATEGORIES:\nAction:1")
    assert abs(np.linalg.norm(vec) - 1.0) <= 1e-6


def test_embed_profile_identical_text_identical_vector(stub_handle):
    a = embed_profile(stub_handle, "some profile text")
    b = embed_profile(stub_handle, "some profile text")
    assert np.array_equal(a, b)


def test_cosine_dissimilarity_trivia():
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 1.0])
    assert cosine_dissimilarity(a, a) == 0.0
    assert cosine_dissimilarity(a, -a) == 2.0
    assert cosine_dissimilarity(a, b) == 1.0
    with pytest.raises(DataError):
        cosine_dissimilarity(a, np.array([1.0, 0.0, 0.0]))


# ---------------------------------------------------------------------------
# greedy filter


ACTION_WESTERN = {
    "a1": meta("a1", "Speed Run (1994)", ["Action"], "explosive car chase downtown"),
    "a2": meta("a2", "Point Blank (1996)", ["Action"], "explosive car chase downtown"),
    "a3": meta("a3", "Last Stand (1998)", ["Action"], "explosive car chase downtown"),
    "a4": meta("a4", "Overdrive (2001)", ["Action"], "explosive car chase downtown"),
    "w1": meta("w1", "Dry Gulch (1952)", ["Western"], "dusty frontier duel standoff"),
}


def _oracle_greedy(history, metadata, n, dim=1024):
    """Independent per-step argmax evaluation straight from the stub definitions."""
    remaining = list(history)
    current = stub_embed(stub_profile([metadata[i] for i in remaining]), dim)
    removed, steps = [], []
    for _ in range(n):
        scored = []
        for cand in remaining:
            trial = [i for i in remaining if i != cand]
            emb = stub_embed(stub_profile([metadata[i] for i in trial]), dim)
            scored.append((round(float(1.0 - current @ emb), DISSIMILARITY_DECIMALS),
                           cand, emb))
        best = max(scored, key=lambda s: (s[0], [-ord(c) for c in s[1]]))
        removed.append(best[1])
        steps.append(best[0])
        remaining.remove(best[1])
        current = best[2]
    return removed, steps, remaining


def test_greedy_filter_n0_identity(stub_handle):
    history = list(ACTION_WESTERN)
    res = greedy_filter("u", history, 0, stub_handle, ACTION_WESTERN)
    assert res.removed == [] and res.remaining_history == history
    assert stub_handle.requests_made == 0


def test_greedy_filter_removes_the_lone_western(stub_handle):
    history = ["a1", "a2", "a3", "a4", "w1"]
    expected_removed, expected_steps, _ = _oracle_greedy(history, ACTION_WESTERN, 1)
    assert expected_removed == ["w1"]  # the out-of-character item
    res = greedy_filter("u", history, 1, stub_handle, ACTION_WESTERN, min_remaining=2)
    assert res.removed == expected_removed
    assert res.step_dissimilarities == pytest.approx(expected_steps, abs=1e-12)
    assert res.remaining_history == ["a1", "a2", "a3", "a4"]


def test_greedy_filter_two_steps_match_stepwise_oracle(stub_handle):
    history = ["a1", "a2", "a3", "a4", "w1"]
    expected_removed, expected_steps, expected_rest = _oracle_greedy(history, ACTION_WESTERN, 2)
    res = greedy_filter("u", history, 2, stub_handle, ACTION_WESTERN, min_remaining=2)
    assert res.removed == expected_removed
    assert res.remaining_history == expected_rest
    assert res.step_dissimilarities == pytest.approx(expected_steps, abs=1e-12)
    # step 2 is an all-ways tie between identical action items: id tie-break
    assert res.removed[1] == "a1"


def test_greedy_filter_randomized_histories_match_oracle(tmp_path):
    rng = np.random.default_rng(11)
    genres = ["Action", "Drama", "Western", "Noir", "Comedy"]
    pools = {g: f"{g.lower()}tok1 {g.lower()}tok2 {g.lower()}tok3" for g in genres}
    for trial in range(20):
        size = int(rng.integers(4, 8))
        metadata = {}
        history = []
        for j in range(size):
            g = genres[int(rng.integers(0, len(genres)))]
            iid = f"t{trial}_i{j}"
            metadata[iid] = meta(iid, f"Title {trial}-{j} (2000)", [g], pools[g])
            history.append(iid)
        n = int(rng.integers(0, min(3, size - 2) + 1))
        handle = ProviderHandle(ProviderConfig(kind="stub"),
                                ResponseCache(tmp_path / f"c{trial}"))
        res = greedy_filter(f"u{trial}", history, n, handle, metadata)
        exp_removed, exp_steps, exp_rest = _oracle_greedy(history, metadata, n)
        assert res.removed == exp_removed, f"trial {trial}"
        assert res.remaining_history == exp_rest
        assert res.step_dissimilarities == pytest.approx(exp_steps, abs=1e-12)
        assert all(0.0 <= d <= 2.0 for d in res.step_dissimilarities)
        assert set(res.removed) | set(res.remaining_history) == set(history)
        assert not set(res.removed) & set(res.remaining_history)


def test_greedy_filter_warm_cache_zero_calls(tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    cfg = ProviderConfig(kind="stub")
    history = ["a1", "a2", "a3", "a4", "w1"]
    cold = ProviderHandle(cfg, cache)
    first = greedy_filter("u", history, 2, cold, ACTION_WESTERN)
    assert cold.requests_made > 0
    warm = ProviderHandle(cfg, cache)
    second = greedy_filter("u", history, 2, warm, ACTION_WESTERN)
    assert warm.requests_made == 0
    assert warm.cache_hits > 0
    assert second == first


def test_greedy_filter_chat_call_budget(tmp_path):
    # per-step candidate profiles plus the single initial full-history profile
    class CountingHandle(ProviderHandle):
        def __init__(self, cfg):
            super().__init__(cfg, None)
            self.chat_calls = 0

        def profile_text(self, prompt):
            self.chat_calls += 1
            return super().profile_text(prompt)

    h = len(ACTION_WESTERN)
    for n in (1, 2, 3):
        handle = CountingHandle(ProviderConfig(kind="stub"))
        greedy_filter("u", list(ACTION_WESTERN), n, handle, ACTION_WESTERN)
        exact = 1 + sum(h - j for j in range(n))
        assert handle.chat_calls == exact
        assert handle.chat_calls <= n * h + 1


def test_greedy_filter_floor_precondition():
    with pytest.raises(DataError):
        greedy_filter("u", ["a1", "a2", "a3"], 2, None, ACTION_WESTERN, min_remaining=2)


def test_greedy_filter_provider_failure_carries_partial(tmp_path):
    class FlakyHandle(ProviderHandle):
        def __init__(self, cfg, cache, fail_after):
            super().__init__(cfg, cache)
            self.calls = 0
            self.fail_after = fail_after

        def embed(self, text):
            self.calls += 1
            if self.calls > self.fail_after:
                raise ProviderError("backend went away")
            return super().embed(text)

    history = ["a1", "a2", "a3", "a4", "w1"]
    # enough embeds for the initial profile and step 1, then die during step 2
    handle = FlakyHandle(ProviderConfig(kind="stub"), ResponseCache(tmp_path / "c"), 8)
    with pytest.raises(FilterInterrupted) as exc_info:
        greedy_filter("u", history, 2, handle, ACTION_WESTERN)
    err = exc_info.value
    assert err.steps_completed == 1
    assert isinstance(err.partial, FilterResult)
    assert err.partial.removed == ["w1"]


def test_profile_of_reports_provider_and_key(stub_handle):
    prof = profile_of(stub_handle, "u9", [DIE_HARD], "movies")
    assert prof.user_id == "u9"
    assert prof.provider_id == stub_handle.provider_id
    assert prof.history_key == history_key(["i1"])
    assert abs(np.linalg.norm(prof.embedding) - 1.0) <= 1e-6
