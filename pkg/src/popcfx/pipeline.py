"""End-to-end pipeline: prepare -> cohorts -> train -> eval -> filter -> explain
-> evaluate -> report, with a run manifest and cache-backed resumability.

Every stage validates that its upstream artifacts exist (naming the stage that
produces them), writes outputs via atomic rename, and appends a completion
event with output hashes to the append-only manifest. All outputs are
deterministic for a fixed config, so fresh runs with identical settings
produce byte-identical files.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import jsonschema

from . import data as data_mod
from . import metrics as metrics_mod
from . import report as report_mod
from .errors import ConfigError, MissingArtifactError
from .influence import CounterfactualResult, accent_explain, build_user_state
from .profilefilter import FilterResult, greedy_filter
from .providers import ProviderConfig, ProviderHandle, ResponseCache
from .recsys import TrainConfig, evaluate_ndcg, load_model, save_model, train

log = logging.getLogger(__name__)

STAGES = ("prepare", "cohorts", "train", "eval", "filter", "explain", "evaluate", "report")
METHODS = ("accent", "accent_filtered", "top_popular")
COHORT_LABELS = ("niche", "blockbuster", "combined")

DEFAULT_CONFIG: dict = {
    "dataset": {
        "name": "dataset",
        "interactions": "data/toy/interactions.tsv",
        "metadata": "data/toy/items.jsonl",
        "format": "auto",
        "k_core": 5,
        "domain_noun": "movies",
    },
    "cohorts": {
        "top_frac": 0.2,
        "bottom_frac": 0.2,
        "max_history": 100,
        "per_group": 250,
        "popular_frac": 0.2,
    },
    "train": {
        "dim": 16,
        "learning_rate": 1e-3,
        "weight_decay": 1e-3,
        "epochs": 20,
        "negatives_per_positive": 4,
        "batch_size": 256,
        "seed": 0,
    },
    "influence": {"k": 5, "max_set": 10, "damping": 1e-2},
    "filter": {"n": 5, "min_remaining": 2},
    "provider": {
        "kind": "stub",
        "endpoint": "",
        "model_name": "",
        "temperature": 0.0,
        "timeout_s": 30.0,
        "max_retries": 3,
        "api_key_env": "",
        "embed_dim": 1024,
        "max_in_flight": 4,
    },
    "metrics": {"bins": 20},
    "eval": {"num_negatives": 100, "cutoff": 10, "seed": 0},
    "report_format": "csv",
    "out_dir": "runs/out",
    "cache_dir": "runs/cache",
    "workers": 1,
}

_number = {"type": "number"}
_string = {"type": "string"}
_integer = {"type": "integer"}

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": _string,
                "interactions": _string,
                "metadata": _string,
                "format": {"enum": ["auto", "tsv", "csv"]},
                "k_core": {"type": "integer", "minimum": 1},
                "domain_noun": _string,
            },
        },
        "cohorts": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "top_frac": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "bottom_frac": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_history": {"type": "integer", "minimum": 1},
                "per_group": {"type": "integer", "minimum": 1},
                "popular_frac": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dim": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "negatives_per_positive": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "seed": _integer,
            },
        },
        "influence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 2},
                "max_set": {"type": "integer", "minimum": 0},
                "damping": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "filter": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 0},
                "min_remaining": {"type": "integer", "minimum": 1},
            },
        },
        "provider": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["stub", "remote"]},
                "endpoint": _string,
                "model_name": _string,
                "temperature": {"type": "number", "minimum": 0},
                "timeout_s": {"type": "number", "exclusiveMinimum": 0},
                "max_retries": {"type": "integer", "minimum": 0},
                "api_key_env": _string,
                "embed_dim": {"type": "integer", "minimum": 8},
                "max_in_flight": {"type": "integer", "minimum": 1},
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"bins": {"type": "integer", "minimum": 2}},
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_negatives": {"type": "integer", "minimum": 1},
                "cutoff": {"type": "integer", "minimum": 1},
                "seed": _integer,
            },
        },
        "report_format": {"enum": ["csv", "svg"]},
        "out_dir": _string,
        "cache_dir": _string,
        "workers": {"type": "integer", "minimum": 1},
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- overrides, validated against CONFIG_SCHEMA."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        try:
            jsonschema.validate(loaded, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"config {path} rejected: {exc.message}") from exc
        cfg = _deep_merge(cfg, loaded)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"effective config rejected: {exc.message}") from exc
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def _dump_jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)


class RunManifest:
    """Append-only JSONL event log plus a convenience JSON snapshot."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.out_dir / "manifest.jsonl"
        self.snapshot_path = self.out_dir / "manifest.json"
        self._events: list[dict] = []
        if self.log_path.exists():
            for line in self.log_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._events.append(json.loads(line))

    def append(self, event: dict) -> None:
        self._events.append(event)
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True, ensure_ascii=False) + "\n")
        self._write_snapshot()

    def _write_snapshot(self) -> None:
        stages: dict[str, dict] = {}
        header: dict = {}
        for ev in self._events:
            if ev.get("event") == "run_start":
                header = {k: ev[k] for k in ("run_id", "config_hash",
                                             "dataset_fingerprints", "seeds") if k in ev}
            elif ev.get("event") == "stage_complete":
                stages[ev["stage"]] = {"status": "complete",
                                       "outputs": ev.get("outputs", {}),
                                       "counters": ev.get("counters", {})}
            elif ev.get("event") == "stage_failed":
                stages[ev["stage"]] = {"status": "failed", "error": ev.get("error", "")}
        _atomic_write_text(self.snapshot_path, _dump_json({**header, "stages": stages}))

    def record_start(self, cfg: dict) -> None:
        fingerprints = {}
        for key in ("interactions", "metadata"):
            p = Path(cfg["dataset"][key])
            if p.exists():
                fingerprints[key] = _sha256_file(p)
        chash = config_hash(cfg)
        run_id = hashlib.sha256(
            (chash + json.dumps(fingerprints, sort_keys=True)).encode()).hexdigest()[:16]
        self.append({"event": "run_start", "run_id": run_id, "config_hash": chash,
                     "dataset_fingerprints": fingerprints,
                     "seeds": {"train": cfg["train"]["seed"], "eval": cfg["eval"]["seed"]}})

    def record_complete(self, stage: str, outputs: list[Path],
                        counters: dict | None = None) -> None:
        hashes = {str(p.relative_to(self.out_dir)) if p.is_relative_to(self.out_dir)
                  else str(p): _sha256_file(p) for p in outputs}
        event = {"event": "stage_complete", "stage": stage, "outputs": hashes}
        if counters:
            event["counters"] = counters
        self.append(event)

    def record_failed(self, stage: str, error: str) -> None:
        self.append({"event": "stage_failed", "stage": stage, "error": error})


# ---------------------------------------------------------------------------
# artifact paths


class Artifacts:
    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.prepared_dir = self.out_dir / "prepared"
        self.interactions = self.prepared_dir / "interactions.tsv"
        self.train_tsv = self.prepared_dir / "train.tsv"
        self.test_tsv = self.prepared_dir / "test.tsv"
        self.popularity = self.prepared_dir / "popularity.tsv"
        self.items = self.prepared_dir / "items.jsonl"
        self.prepare_stats = self.prepared_dir / "stats.json"
        self.cohorts = self.out_dir / "cohorts.json"
        self.model = self.out_dir / "model.bin"
        self.eval_json = self.out_dir / "eval.json"
        self.filtered = self.out_dir / "filtered.jsonl"
        self.cfs = {m: self.out_dir / f"cfs_{m}.jsonl" for m in METHODS}
        self.report_json = self.out_dir / "report.json"
        self.report_dir = self.out_dir / "report"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(
                f"missing artifact {path}; run the '{producer}' stage first",
                stage_to_run=producer)
        return path


def _write_interactions_tsv(path: Path, rows) -> None:
    lines = []
    for r in rows:
        rating = "" if r.rating is None else format(r.rating, "g")
        lines.append(f"{r.user_id}\t{r.item_id}\t{rating}\t{r.timestamp}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _read_split(art: Artifacts) -> data_mod.Split:
    art.require(art.train_tsv, "prepare")
    art.require(art.test_tsv, "prepare")
    train_rows = data_mod.load_interactions(art.train_tsv, "tsv").interactions
    test: dict[str, str] = {}
    for line in art.test_tsv.read_text(encoding="utf-8").splitlines():
        if line.strip():
            user, item = line.split("\t")[:2]
            test[user] = item
    return data_mod.Split(train=train_rows, test=test)


def _read_popularity(art: Artifacts) -> data_mod.PopularityTable:
    art.require(art.popularity, "prepare")
    scores = {}
    for line in art.popularity.read_text(encoding="utf-8").splitlines():
        if line.strip():
            item, value = line.split("\t")
            scores[item] = float(value)
    return data_mod.PopularityTable(scores, provenance="train")


def _read_cohorts(art: Artifacts) -> dict[str, list[str]]:
    from .errors import DataError
    art.require(art.cohorts, "cohorts")
    obj = json.loads(art.cohorts.read_text(encoding="utf-8"))
    try:
        return {label: list(obj[label]["user_ids"]) for label in ("niche", "blockbuster")}
    except (KeyError, TypeError) as exc:
        raise DataError(
            f"{art.cohorts} must map 'niche' and 'blockbuster' to user_ids lists") from exc


def _read_filtered(art: Artifacts) -> dict[str, FilterResult]:
    out = {}
    for line in art.filtered.read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            out[obj["user_id"]] = FilterResult(
                user_id=obj["user_id"], removed=list(obj["removed"]),
                step_dissimilarities=list(obj["step_dissimilarities"]),
                remaining_history=list(obj["remaining_history"]))
    return out


def _read_cfs(path: Path) -> list[CounterfactualResult]:
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(CounterfactualResult.from_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# stages


def stage_prepare(cfg: dict, art: Artifacts) -> list[Path]:
    ds = cfg["dataset"]
    report = data_mod.load_interactions(ds["interactions"], ds["format"])
    metas = data_mod.load_item_meta(ds["metadata"])
    collapsed = data_mod.collapse_repeats(report.interactions)
    cored = data_mod.k_core_filter(collapsed, ds["k_core"])
    split = data_mod.leave_one_out_split(cored)
    popularity = data_mod.compute_popularity(split.train)

    art.prepared_dir.mkdir(parents=True, exist_ok=True)
    _write_interactions_tsv(art.interactions, cored)
    _write_interactions_tsv(art.train_tsv, split.train)
    _atomic_write_text(art.test_tsv, "".join(
        f"{u}\t{split.test[u]}\n" for u in sorted(split.test)))
    _atomic_write_text(art.popularity, "".join(
        f"{item}\t{popularity.scores[item]!r}\n"  # repr: exact float round-trip
        for item in sorted(popularity.scores)))
    kept_items = {r.item_id for r in cored}
    _atomic_write_text(art.items, _dump_jsonl(
        {"item_id": m.item_id, "title": m.title, "categories": list(m.categories),
         "description": m.description}
        for m in (metas[i] for i in sorted(kept_items & set(metas)))))
    missing_meta = sorted(kept_items - set(metas))
    stats = {
        "n_rows_raw": len(report.interactions),
        "n_malformed": report.n_malformed,
        "n_duplicates": report.n_duplicates,
        "n_rows_k_core": len(cored),
        "n_users": len({r.user_id for r in cored}),
        "n_items": len(kept_items),
        "n_train": len(split.train),
        "n_test": len(split.test),
        "items_without_metadata": missing_meta,
    }
    if missing_meta:
        log.warning("%d items lack metadata; profile prompts will fail for them",
                    len(missing_meta))
    _atomic_write_text(art.prepare_stats, _dump_json(stats))
    return [art.interactions, art.train_tsv, art.test_tsv, art.popularity,
            art.items, art.prepare_stats]


def stage_cohorts(cfg: dict, art: Artifacts) -> list[Path]:
    split = _read_split(art)
    popularity = _read_popularity(art)
    cc = cfg["cohorts"]
    niche, blockbuster = data_mod.select_cohorts(
        split.train, popularity, top_frac=cc["top_frac"], bottom_frac=cc["bottom_frac"],
        max_history=cc["max_history"], per_group=cc["per_group"],
        popular_frac=cc["popular_frac"])
    _atomic_write_text(art.cohorts, _dump_json({
        "niche": {"label": "niche", "user_ids": niche.user_ids, "warning": niche.warning},
        "blockbuster": {"label": "blockbuster", "user_ids": blockbuster.user_ids,
                        "warning": blockbuster.warning},
    }))
    return [art.cohorts]


def stage_train(cfg: dict, art: Artifacts) -> list[Path]:
    split = _read_split(art)
    params = train(split, TrainConfig(**cfg["train"]))
    save_model(params, art.model)
    return [art.model, Path(str(art.model) + ".json")]


def stage_eval(cfg: dict, art: Artifacts) -> list[Path]:
    art.require(art.model, "train")
    params = load_model(art.model)
    split = _read_split(art)
    ev = cfg["eval"]
    ndcg = evaluate_ndcg(params, split, num_negatives=ev["num_negatives"],
                         cutoff=ev["cutoff"], seed=ev["seed"])
    _atomic_write_text(art.eval_json, _dump_json({
        "ndcg": ndcg, "cutoff": ev["cutoff"], "num_negatives": ev["num_negatives"],
        "seed": ev["seed"], "n_test_users": len(split.test)}))
    log.info("nDCG@%d = %.4f over %d users", ev["cutoff"], ndcg, len(split.test))
    return [art.eval_json]


def _provider_handle(cfg: dict) -> ProviderHandle:
    pc = ProviderConfig(**cfg["provider"])
    cache = ResponseCache(cfg["cache_dir"]) if cfg.get("cache_dir") else None
    return ProviderHandle(pc, cache)


def stage_filter(cfg: dict, art: Artifacts) -> tuple[list[Path], dict]:
    split = _read_split(art)
    cohorts = _read_cohorts(art)
    art.require(art.items, "prepare")
    metas = data_mod.load_item_meta(art.items)
    histories = data_mod.user_histories(split.train)
    users = cohorts["niche"] + cohorts["blockbuster"]
    handle = _provider_handle(cfg)
    fc = cfg["filter"]
    noun = cfg["dataset"]["domain_noun"]

    def run_one(user: str) -> FilterResult:
        history = [r.item_id for r in histories[user]]
        return greedy_filter(user, history, fc["n"], handle, metas,
                             min_remaining=fc["min_remaining"], domain_noun=noun)

    workers = cfg.get("workers", 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, users))
    else:
        results = [run_one(u) for u in users]

    _atomic_write_text(art.filtered, _dump_jsonl(
        {"user_id": r.user_id, "removed": r.removed,
         "step_dissimilarities": r.step_dissimilarities,
         "remaining_history": r.remaining_history} for r in results))
    counters = {"provider_requests": handle.requests_made,
                "provider_cache_hits": handle.cache_hits}
    return [art.filtered], counters


def stage_explain(cfg: dict, art: Artifacts,
                  methods: tuple[str, ...] | None = None) -> list[Path]:
    art.require(art.model, "train")
    params = load_model(art.model)
    split = _read_split(art)
    cohorts = _read_cohorts(art)
    users = cohorts["niche"] + cohorts["blockbuster"]
    inf = cfg["influence"]
    filtered = _read_filtered(art) if art.filtered.exists() else None
    if methods is None:
        methods = ("accent",) + (("accent_filtered",) if filtered is not None else ())
    if "accent_filtered" in methods and filtered is None:
        raise MissingArtifactError(
            "accent_filtered needs filtered histories; run the 'filter' stage first",
            stage_to_run="filter")

    def explain_users(method: str) -> list[CounterfactualResult]:
        def run_one(user: str) -> CounterfactualResult:
            history = None
            if method == "accent_filtered":
                history = filtered[user].remaining_history if user in filtered else None
            state = build_user_state(params, split.train, user,
                                     damping=inf["damping"], history=history)
            return accent_explain(params, state, user, k=inf["k"],
                                  max_set=inf["max_set"], method=method)
        workers = cfg.get("workers", 1)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(run_one, users))
        return [run_one(u) for u in users]

    outputs = []
    for method in methods:
        results = explain_users(method)
        _atomic_write_text(art.cfs[method], _dump_jsonl(r.to_dict() for r in results))
        outputs.append(art.cfs[method])
    return outputs


def _top_popular_results(accent_results, histories, popularity):
    out = []
    for r in accent_results:
        if r.status != "found":
            out.append(CounterfactualResult(user_id=r.user_id, status="not_found",
                                            removed_set=[], displaced=r.displaced,
                                            replacement=None, estimated_gap_trace=[],
                                            method="top_popular"))
            continue
        picked = metrics_mod.top_popular_baseline(histories[r.user_id], popularity,
                                                  len(r.removed_set))
        out.append(CounterfactualResult(user_id=r.user_id, status="found",
                                        removed_set=picked, displaced=r.displaced,
                                        replacement=None, estimated_gap_trace=[],
                                        method="top_popular"))
    return out


def stage_evaluate(cfg: dict, art: Artifacts,
                   cfs_path: Path | None = None,
                   cfs_baseline_path: Path | None = None) -> list[Path]:
    cfs_path = cfs_path or art.cfs["accent"]
    if cfs_baseline_path is None and art.cfs["accent_filtered"].exists():
        cfs_baseline_path = art.cfs["accent_filtered"]
    art.require(cfs_path, "explain")
    popularity = _read_popularity(art)
    split = _read_split(art)
    cohorts = _read_cohorts(art)
    histories = {u: [r.item_id for r in rows]
                 for u, rows in data_mod.user_histories(split.train).items()}
    bins = cfg["metrics"]["bins"]

    results_by_method: dict[str, list[CounterfactualResult]] = {}
    results_by_method["accent"] = _read_cfs(cfs_path)
    if cfs_baseline_path is not None and Path(cfs_baseline_path).exists():
        results_by_method["accent_filtered"] = _read_cfs(Path(cfs_baseline_path))
    results_by_method["top_popular"] = _top_popular_results(
        results_by_method["accent"], histories, popularity)
    _atomic_write_text(art.cfs["top_popular"], _dump_jsonl(
        r.to_dict() for r in results_by_method["top_popular"]))

    cohort_users = {"niche": set(cohorts["niche"]),
                    "blockbuster": set(cohorts["blockbuster"]),
                    "combined": set(cohorts["niche"]) | set(cohorts["blockbuster"])}

    reports: list[dict] = []
    per_user_epd: dict[tuple[str, str], dict[str, float]] = {}
    for method, results in results_by_method.items():
        for label in COHORT_LABELS:
            subset = [r for r in results if r.user_id in cohort_users[label]]
            if not subset:
                continue
            rep = metrics_mod.build_bias_report(subset, histories, popularity,
                                                method=method, cohort=label, bins=bins)
            per_user_epd[(method, label)] = rep.per_user_epd
            reports.append(rep.to_dict())

    for rep in reports:
        key = (rep["method"], rep["cohort"])
        base = per_user_epd.get(("accent", rep["cohort"]), {})
        rep["p_value_vs_accent"] = None
        rep["t_vs_accent"] = None
        rep["test_degenerate"] = None
        if rep["method"] != "accent" and len(set(base) & set(per_user_epd[key])) >= 2:
            test = metrics_mod.paired_epd_test(per_user_epd[key], base)
            rep["p_value_vs_accent"] = test.p
            rep["t_vs_accent"] = test.t
            rep["test_degenerate"] = test.degenerate

    fig_bins = []
    for label in ("niche", "blockbuster"):
        pooled = [r for results in results_by_method.values() for r in results
                  if r.user_id in cohort_users[label]]
        fig_bins.extend(metrics_mod.pop_position_bins(pooled, histories, popularity,
                                                      bins=bins, cohort=label))

    _atomic_write_text(art.report_json, _dump_json({
        "dataset": cfg["dataset"]["name"],
        "bins": bins,
        "reports": reports,
        "fig_bins": [asdict(b) for b in fig_bins],
    }))
    return [art.report_json, art.cfs["top_popular"]]


def stage_report(cfg: dict, art: Artifacts, fmt: str | None = None) -> list[Path]:
    art.require(art.report_json, "evaluate")
    payload = json.loads(art.report_json.read_text(encoding="utf-8"))
    rows = [{
        "dataset": payload["dataset"],
        "cohort": rep["cohort"],
        "method": rep["method"],
        "pds": rep["pds"],
        "epd": rep["epd"],
        "no_cf_rate": rep["no_cf_rate"],
        "p_value_vs_accent": rep.get("p_value_vs_accent"),
    } for rep in payload["reports"]]
    rows.sort(key=lambda r: (r["cohort"], r["method"]))
    fig_bins = [metrics_mod.PopPositionBin(**b) for b in payload["fig_bins"]]
    fmt = fmt or cfg.get("report_format", "csv")
    return report_mod.emit_report(rows, fig_bins, art.report_dir, fmt=fmt,
                                  dataset=payload["dataset"])


STAGE_FUNCS = {
    "prepare": stage_prepare,
    "cohorts": stage_cohorts,
    "train": stage_train,
    "eval": stage_eval,
    "filter": stage_filter,
    "explain": stage_explain,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_pipeline(cfg: dict, stages: list[str] | None = None) -> RunManifest:
    """Execute the requested stages in canonical order, recording the manifest."""
    requested = list(STAGES) if stages is None else list(stages)
    unknown = [s for s in requested if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stages: {unknown}; valid: {list(STAGES)}")
    ordered = [s for s in STAGES if s in requested]
    art = Artifacts(cfg["out_dir"])
    manifest = RunManifest(cfg["out_dir"])
    manifest.record_start(cfg)
    for stage in ordered:
        log.info("stage %s starting", stage)
        func = STAGE_FUNCS[stage]
        try:
            result = func(cfg, art)
        except Exception as exc:
            manifest.record_failed(stage, f"{type(exc).__name__}: {exc}")
            raise
        if isinstance(result, tuple):
            outputs, counters = result
        else:
            outputs, counters = result, None
        manifest.record_complete(stage, outputs, counters)
        log.info("stage %s complete (%d outputs)", stage, len(outputs))
    return manifest
