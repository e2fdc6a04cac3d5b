"""Config-driven experiment runner: trials, summaries, reports.

An experiment is described by one JSON document (schema in the README).
Trial i derives every random stream from base_seed + i, so a report is
a pure function of its config: the same file in gives the same bytes
out. The `compare` driver reruns the same data seeds under all three
regimes; `sweep` reruns the configured regime across k-shot sizes.

Reports carry the wall-clock time in memory but never write it to disk;
emitted files must stay byte-identical across reruns.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import (
    Dataset,
    PartitionPlan,
    Shard,
    gen_blobs,
    load_csv,
    sample_kshot,
    split_public_private,
    stratified_split,
)
from .federation import (
    FedConfig,
    FederationError,
    RoundHistory,
    run_centralized,
    run_fedavg,
    run_ffm,
)
from .models import AdapterComposite, Logistic, Mlp, ModelSpec, SoftPrompt
from .seeding import derive_seed
from .simnet import LatencyModel, write_trace_jsonl


class ConfigError(ValueError):
    """Raised with a field path when an experiment config is invalid."""


_MISSING = object()


def _check_keys(section: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}; allowed: {sorted(allowed)}")


def _get(section: dict, key: str, kinds, path: str, default=_MISSING,
         predicate=None, explain: str = ""):
    if key not in section:
        if default is _MISSING:
            raise ConfigError(f"{path}.{key}: required key is missing")
        return default
    value = section[key]
    if value is None and default is not _MISSING:
        return default
    if kinds is not None and not isinstance(value, kinds):
        names = (
            kinds.__name__ if isinstance(kinds, type)
            else "/".join(k.__name__ for k in kinds)
        )
        raise ConfigError(
            f"{path}.{key}: expected {names}, got {type(value).__name__}"
        )
    if predicate is not None and not predicate(value):
        raise ConfigError(f"{path}.{key}: invalid value {value!r} ({explain})")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    dataset: dict
    model: dict
    clients: int
    partition: dict
    k_shot: int | None
    test_fraction: float
    fed: FedConfig
    latency: dict | None
    trials: int
    base_seed: int
    summary_stat: str
    per_round_arrival: bool
    output: str
    trace_output: str | None


_TOP_KEYS = {
    "dataset", "model", "clients", "partition", "k_shot", "test_fraction",
    "fed", "latency", "trials", "base_seed", "summary_stat",
    "per_round_arrival", "output", "trace_output",
}

_FED_KEYS = {
    "mode", "rounds", "local_epochs", "local_lr", "batch_size", "server_lr",
    "participation_fraction", "tau", "server_epochs", "asynchronous",
    "weighting", "public_first_round_only", "central_epoch_budget",
    "deploy_fraction",
}


def parse_config(document: dict) -> ExperimentConfig:
    """Validate a config document; every error names the offending field."""
    if not isinstance(document, dict):
        raise ConfigError(f"config root must be an object, got {type(document).__name__}")
    _check_keys(document, _TOP_KEYS, "config")

    dataset = _get(document, "dataset", dict, "config")
    kind = _get(dataset, "type", str, "config.dataset",
                predicate=lambda v: v in ("blobs", "csv"),
                explain="must be 'blobs' or 'csv'")
    if kind == "blobs":
        _check_keys(dataset, {"type", "classes", "per_class", "d", "separation",
                              "noise_sd"}, "config.dataset")
        _get(dataset, "classes", int, "config.dataset",
             predicate=lambda v: v >= 2, explain=">= 2")
        _get(dataset, "per_class", int, "config.dataset",
             predicate=lambda v: v >= 1, explain=">= 1")
        _get(dataset, "d", int, "config.dataset",
             predicate=lambda v: v >= 1, explain=">= 1")
        _get(dataset, "separation", (int, float), "config.dataset")
        _get(dataset, "noise_sd", (int, float), "config.dataset",
             predicate=lambda v: v >= 0, explain=">= 0")
    else:
        _check_keys(dataset, {"type", "path", "label_column"}, "config.dataset")
        _get(dataset, "path", str, "config.dataset")
        _get(dataset, "label_column", str, "config.dataset")

    model = _get(document, "model", dict, "config")
    _validate_model(model, "config.model")

    clients = _get(document, "clients", int, "config",
                   predicate=lambda v: v >= 1, explain=">= 1")

    partition = _get(document, "partition", dict, "config")
    scheme = _get(partition, "scheme", str, "config.partition",
                  predicate=lambda v: v in ("iid", "label_shard", "dirichlet"),
                  explain="must be iid, label_shard, or dirichlet")
    if scheme == "dirichlet":
        _check_keys(partition, {"scheme", "alpha"}, "config.partition")
        _get(partition, "alpha", (int, float), "config.partition",
             predicate=lambda v: v > 0, explain="> 0")
    elif scheme == "label_shard":
        _check_keys(partition, {"scheme", "shards_per_part"}, "config.partition")
        _get(partition, "shards_per_part", int, "config.partition", default=2,
             predicate=lambda v: v >= 1, explain=">= 1")
    else:
        _check_keys(partition, {"scheme"}, "config.partition")

    k_shot = _get(document, "k_shot", int, "config", default=None,
                  predicate=lambda v: v is None or v >= 1, explain=">= 1")
    test_fraction = _get(document, "test_fraction", (int, float), "config",
                         default=0.25, predicate=lambda v: 0 < v < 1,
                         explain="in (0, 1)")

    fed_section = _get(document, "fed", dict, "config")
    _check_keys(fed_section, _FED_KEYS, "config.fed")
    fed_kwargs = dict(fed_section)
    if isinstance(fed_kwargs.get("server_lr"), list):
        fed_kwargs["server_lr"] = tuple(fed_kwargs["server_lr"])
    try:
        fed = FedConfig(**fed_kwargs)
    except FederationError as exc:
        raise ConfigError(f"config.fed: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"config.fed: {exc}") from exc

    latency = _get(document, "latency", dict, "config", default=None)
    if latency is not None:
        _check_keys(latency, {"base", "jitter", "seed"}, "config.latency")
        _get(latency, "base", (int, float, dict), "config.latency", default=1.0)
        _get(latency, "jitter", (int, float, dict), "config.latency", default=0.0)
        _get(latency, "seed", int, "config.latency", default=0)

    trials = _get(document, "trials", int, "config", default=1,
                  predicate=lambda v: v >= 1, explain=">= 1")
    base_seed = _get(document, "base_seed", int, "config", default=0)
    summary_stat = _get(document, "summary_stat", str, "config", default="median",
                        predicate=lambda v: v in ("best", "median"),
                        explain="must be 'best' or 'median'")
    per_round = _get(document, "per_round_arrival", bool, "config", default=False)
    if per_round and k_shot is None:
        raise ConfigError("config.per_round_arrival: requires k_shot to be set")
    output = _get(document, "output", str, "config", default="report.json")
    trace_output = _get(document, "trace_output", str, "config", default=None)

    return ExperimentConfig(
        raw=copy.deepcopy(document),
        dataset=dataset,
        model=model,
        clients=clients,
        partition=partition,
        k_shot=k_shot,
        test_fraction=float(test_fraction),
        fed=fed,
        latency=latency,
        trials=trials,
        base_seed=base_seed,
        summary_stat=summary_stat,
        per_round_arrival=per_round,
        output=output,
        trace_output=trace_output,
    )


def _validate_model(model: dict, path: str) -> None:
    kind = _get(model, "kind", str, path,
                predicate=lambda v: v in ("logistic", "mlp", "adapter", "soft_prompt"),
                explain="must be logistic, mlp, adapter, or soft_prompt")
    if kind == "logistic":
        _check_keys(model, {"kind"}, path)
    elif kind == "mlp":
        _check_keys(model, {"kind", "hidden"}, path)
        _get(model, "hidden", int, path, predicate=lambda v: v >= 1, explain=">= 1")
    elif kind == "adapter":
        _check_keys(model, {"kind", "backbone"}, path)
        backbone = _get(model, "backbone", dict, path)
        _get(backbone, "kind", str, f"{path}.backbone",
             predicate=lambda v: v in ("logistic", "mlp"),
             explain="must be logistic or mlp")
        _validate_model(backbone, f"{path}.backbone")
    else:
        _check_keys(model, {"kind", "inner", "prompt_len"}, path)
        inner = _get(model, "inner", dict, path)
        _get(inner, "kind", str, f"{path}.inner",
             predicate=lambda v: v in ("logistic", "mlp"),
             explain="must be logistic or mlp")
        _validate_model(inner, f"{path}.inner")
        _get(model, "prompt_len", int, path,
             predicate=lambda v: v >= 1, explain=">= 1")


def build_model_spec(model: dict, d: int, classes: int) -> ModelSpec:
    """Bind a model section to the dataset's width and class count."""
    kind = model["kind"]
    if kind == "logistic":
        return Logistic(d=d, classes=classes)
    if kind == "mlp":
        return Mlp(d=d, hidden=model["hidden"], classes=classes)
    if kind == "adapter":
        backbone = build_model_spec(model["backbone"], d, classes)
        return AdapterComposite(backbone=backbone, head_classes=classes)
    inner = build_model_spec(model["inner"], d + model["prompt_len"], classes)
    return SoftPrompt(inner=inner, prompt_len=model["prompt_len"])


def _build_dataset(config: ExperimentConfig) -> Dataset:
    section = config.dataset
    if section["type"] == "blobs":
        return gen_blobs(
            classes=section["classes"],
            per_class=section["per_class"],
            d=section["d"],
            separation=float(section["separation"]),
            noise_sd=float(section["noise_sd"]),
            seed=derive_seed(config.base_seed, "dataset"),
        )
    return load_csv(section["path"], section["label_column"])


def _partition_kwargs(config: ExperimentConfig) -> dict:
    scheme = config.partition["scheme"]
    if scheme == "dirichlet":
        return {"alpha": float(config.partition["alpha"])}
    if scheme == "label_shard":
        return {"shards_per_part": config.partition.get("shards_per_part", 2)}
    return {}


def _kshot_plan(plan: PartitionPlan, k: int, trial_seed: int) -> PartitionPlan:
    public = sample_kshot(plan.public, k, derive_seed(trial_seed, "kshot", "public"))
    private = tuple(
        sample_kshot(shard, k, derive_seed(trial_seed, "kshot", cid))
        for cid, shard in enumerate(plan.private)
    )
    return PartitionPlan(public=public, private=private,
                         scheme=plan.scheme, seed=plan.seed)


def _growing_schedule(full_plan: PartitionPlan, base_plan: PartitionPlan,
                      k: int, trial_seed: int, rounds: int):
    """Per-round shard growth: inject a fresh k-shot increment each round."""
    per_client: dict[int, dict[int, Shard]] = {}
    for cid, pool in enumerate(full_plan.private):
        active = base_plan.private[cid]
        rounds_map = {1: active}
        held = set(active.indices.tolist())
        for t in range(2, rounds + 1):
            remaining = np.array(
                sorted(set(pool.indices.tolist()) - held), dtype=np.int64
            )
            if remaining.size:
                fresh = sample_kshot(
                    Shard(pool.dataset, remaining), k,
                    derive_seed(trial_seed, "kshot", cid, t),
                )
                held |= set(fresh.indices.tolist())
            rounds_map[t] = Shard(
                pool.dataset, np.array(sorted(held), dtype=np.int64)
            )
        per_client[cid] = rounds_map
    batches = {
        cid: {t: shard.batch() for t, shard in rounds_map.items()}
        for cid, rounds_map in per_client.items()
    }

    def schedule(round_index: int, client_id: int):
        return batches[client_id][round_index]

    return schedule


def _build_latency(config: ExperimentConfig, trial_seed: int) -> LatencyModel | None:
    if not config.fed.asynchronous:
        return None
    nodes = ["server"] + [f"c{k}" for k in range(config.clients)]
    section = config.latency or {"base": 1.0, "jitter": 0.0, "seed": 0}

    def resolve(value, node):
        if isinstance(value, dict):
            return float(value.get(node, 0.0))
        return 0.0 if node == "server" else float(value)

    base = {n: resolve(section.get("base", 1.0), n) for n in nodes}
    jitter = {n: resolve(section.get("jitter", 0.0), n) for n in nodes}
    seed = derive_seed(trial_seed, "latency", section.get("seed", 0))
    return LatencyModel(base=base, jitter=jitter, seed=seed)


@dataclass
class TrialResult:
    trial: int
    seed: int
    partition_seed: int
    history: RoundHistory


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    kernel_backend: str
    trials: list[TrialResult]
    summary: dict
    comm_totals: dict
    wall_time_sec: float


def summarize(finals: list[tuple[float, float]], stat: str) -> dict:
    """Pick the reported trial: best accuracy, or lower-middle median."""
    if not finals:
        raise ConfigError("cannot summarize an empty trial list")
    if stat not in ("best", "median"):
        raise ConfigError(f"unknown summary stat {stat!r}")
    if stat == "best":
        pick = max(range(len(finals)), key=lambda i: (finals[i][0], -i))
    else:
        order = sorted(range(len(finals)), key=lambda i: (finals[i][0], i))
        pick = order[(len(finals) - 1) // 2]
    accuracy, loss = finals[pick]
    return {"stat": stat, "accuracy": accuracy, "loss": loss, "trial": pick}


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run all trials of one experiment under the configured regime."""
    started = time.perf_counter()
    ds = _build_dataset(config)
    test, train = stratified_split(
        ds, config.test_fraction, derive_seed(config.base_seed, "test-split")
    )
    spec = build_model_spec(config.model, ds.n_features, ds.classes)
    results: list[TrialResult] = []
    for i in range(config.trials):
        trial_seed = config.base_seed + i
        partition_seed = derive_seed(trial_seed, "partition")
        full_plan = split_public_private(
            train, config.clients, config.partition["scheme"], partition_seed,
            **_partition_kwargs(config),
        )
        plan = full_plan
        schedule = None
        if config.k_shot is not None:
            plan = _kshot_plan(full_plan, config.k_shot, trial_seed)
            if config.per_round_arrival:
                schedule = _growing_schedule(
                    full_plan, plan, config.k_shot, trial_seed, config.fed.rounds
                )
        mode = config.fed.mode
        if mode == "centralized":
            history = run_centralized(config.fed, plan, spec, test, trial_seed)
        elif mode == "fl_only":
            history = run_fedavg(
                config.fed, plan, spec, test, trial_seed,
                latency=_build_latency(config, trial_seed),
                shard_schedule=schedule,
            )
        else:
            history = run_ffm(
                config.fed, plan, spec, test, trial_seed,
                latency=_build_latency(config, trial_seed),
                shard_schedule=schedule,
            )
        if config.trace_output:
            write_trace_jsonl(
                history.trace, f"{config.trace_output}.{mode}.trial{i}.jsonl"
            )
        results.append(TrialResult(i, trial_seed, partition_seed, history))
    finals = [(r.history.final_accuracy, r.history.final_loss) for r in results]
    summary = summarize(finals, config.summary_stat)
    messages = sum(rec.messages for r in results for rec in r.history.records)
    total_bytes = sum(rec.bytes for r in results for rec in r.history.records)
    return ExperimentReport(
        config=config,
        kernel_backend=kernels.active_backend(),
        trials=results,
        summary=summary,
        comm_totals={"messages": messages, "bytes": total_bytes},
        wall_time_sec=time.perf_counter() - started,
    )


def _finite_or_none(value: float) -> float | None:
    # diverged runs carry NaN/inf losses; reports stay valid JSON and the
    # per-record diverged flag preserves the signal
    return float(value) if math.isfinite(value) else None


def _history_dict(history: RoundHistory) -> dict:
    return {
        "mode": history.mode,
        "initial": {
            "params_hash": history.initial_hash,
            "test_accuracy": history.initial_accuracy,
            "test_loss": _finite_or_none(history.initial_loss),
        },
        "rounds": [
            {
                "round": rec.round_index,
                "params_hash": rec.params_hash,
                "train_loss": _finite_or_none(rec.train_loss),
                "test_accuracy": rec.test_accuracy,
                "test_loss": _finite_or_none(rec.test_loss),
                "participants": list(rec.participants),
                "n_flushes": rec.n_flushes,
                "messages": rec.messages,
                "bytes": rec.bytes,
                "diverged": rec.diverged,
            }
            for rec in history.records
        ],
        "final": {
            "test_accuracy": history.final_accuracy,
            "test_loss": _finite_or_none(history.final_loss),
        },
        "diverged": history.diverged,
        "divergence_note": history.divergence_note,
    }


def report_to_dict(report: ExperimentReport) -> dict:
    """JSON-ready report; key order is fixed and wall time is omitted."""
    return {
        "schema": "fedsim-report-v1",
        "kind": "run",
        "kernel_backend": report.kernel_backend,
        "config": report.config.raw,
        "trials": [
            {
                "trial": r.trial,
                "seed": r.seed,
                "partition_seed": r.partition_seed,
                **_history_dict(r.history),
            }
            for r in report.trials
        ],
        "summary": report.summary,
        "comm_totals": report.comm_totals,
    }


def run_compare(config: ExperimentConfig) -> dict:
    """All three regimes over identical data seeds, side by side."""
    regimes = {}
    for mode in ("centralized", "fl_only", "ffm"):
        doc = copy.deepcopy(config.raw)
        doc.setdefault("fed", {})["mode"] = mode
        report = run_experiment(parse_config(doc))
        regimes[mode] = report_to_dict(report)
    return {
        "schema": "fedsim-report-v1",
        "kind": "compare",
        "config": config.raw,
        "regimes": regimes,
    }


def run_sweep(config: ExperimentConfig, kshots: list[int]) -> dict:
    """One run summary per k-shot size, same seeds throughout."""
    if not kshots:
        raise ConfigError("sweep requires at least one k value")
    entries = []
    for k in kshots:
        if k < 1:
            raise ConfigError(f"k-shot values must be >= 1, got {k}")
        doc = copy.deepcopy(config.raw)
        doc["k_shot"] = k
        report = run_experiment(parse_config(doc))
        entries.append({"k_shot": k, **report_to_dict(report)})
    return {
        "schema": "fedsim-report-v1",
        "kind": "sweep",
        "config": config.raw,
        "entries": entries,
    }


_CSV_HEADER = [
    "k_shot", "mode", "trial", "round", "participants", "n_flushes",
    "train_loss", "test_loss", "test_accuracy", "messages", "bytes",
    "diverged", "params_hash",
]


def _csv_rows(document: dict) -> list[list]:
    rows = []

    def add_run(run_doc: dict, k_shot):
        for trial in run_doc["trials"]:
            for rec in trial["rounds"]:
                rows.append([
                    "" if k_shot is None else k_shot,
                    trial["mode"],
                    trial["trial"],
                    rec["round"],
                    ";".join(str(p) for p in rec["participants"]),
                    rec["n_flushes"],
                    "" if rec["train_loss"] is None else repr(rec["train_loss"]),
                    "" if rec["test_loss"] is None else repr(rec["test_loss"]),
                    repr(rec["test_accuracy"]),
                    rec["messages"],
                    rec["bytes"],
                    rec["diverged"],
                    rec["params_hash"],
                ])

    if document["kind"] == "run":
        add_run(document, document["config"].get("k_shot"))
    elif document["kind"] == "compare":
        for regime in document["regimes"].values():
            add_run(regime, document["config"].get("k_shot"))
    else:
        for entry in document["entries"]:
            add_run(entry, entry["k_shot"])
    return rows


def emit(document: dict, fmt: str, path: str) -> None:
    """Write a report document; identical documents yield identical bytes."""
    if fmt == "json":
        payload = json.dumps(document, indent=2, ensure_ascii=False) + "\n"
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(payload)
        except OSError as exc:
            raise RuntimeError(f"cannot write report to {path!r}: {exc}") from exc
    elif fmt == "csv":
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(_CSV_HEADER)
                writer.writerows(_csv_rows(document))
        except OSError as exc:
            raise RuntimeError(f"cannot write report to {path!r}: {exc}") from exc
    else:
        raise ConfigError(f"unknown report format {fmt!r}; use json or csv")


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            document = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    return parse_config(document)
