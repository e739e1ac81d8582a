"""Grid evaluation harness: run config, grid runner, results store, reports.

A run walks the full grid (model x dataset x strategy x attack-or-clean),
attacks each sampled item, scores the model's generation on the adversarial
inputs with the task metric, and aggregates to one ResultRow per grid cell.
Rows persist to an append-only JSONL store and render as markdown tables
(strategies as rows or attacks as rows) and flat CSV.

Determinism: identical config (including seed) with in-process toy models
produces byte-identical stores, provided the config pins the timestamp;
an unpinned timestamp is the single wall-clock field. Reduction is by
sample order, never completion order, so worker count does not matter.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .attacks import AttackConfig, attack as run_attack
from .core import DifferentiableModel, ModelError, Sample, Target
from .dataset import (
    Dataset,
    DatasetError,
    TASK_CAPTIONING,
    TASK_VQA,
    load_dataset,
    sample_subset,
)
from .metrics import (
    AnnotationSet,
    aggregate,
    cider_score,
    compute_document_frequencies,
    vqa_accuracy,
)
from .oracle import (
    OracleClient,
    OracleError,
    ProtocolError,
    RemoteModel,
    RemoteRewriter,
    TransportError,
    open_transport,
)
from .prompts import (
    CAPTION_TAGS,
    VQA_TAGS,
    CaptionStrategy,
    FixtureRewriter,
    RewriteCache,
    RewriterClient,
    StubRewriter,
    VqaStrategy,
    apply_caption_strategy,
    rewrite_question,
)
from .toys import TOY_FAMILIES, make_toy_model

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError", "EndpointError", "StoreError",
    "DatasetSpec", "ModelSpec", "RewriterSpec", "RunConfig", "ResultRow",
    "load_run_config", "config_hash", "run_grid",
    "persist_rows", "load_rows", "emit_report", "rows_from_csv",
]

STORE_SCHEMA_VERSION = 1
CLEAN_TAG = "None"
METRIC_BY_TASK = {TASK_CAPTIONING: "cider", TASK_VQA: "vqa_accuracy"}


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 1)."""


class EndpointError(RuntimeError):
    """Model endpoint unreachable or failed its handshake (CLI exit 2)."""


class StoreError(RuntimeError):
    """Results store unreadable or schema-incompatible."""


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    path: str


@dataclass(frozen=True)
class ModelSpec:
    """kind "toy" builds in-process; kind "oracle" dials a transport spec."""

    name: str
    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("toy", "oracle"):
            raise ConfigError(f"model {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "toy":
            fam = self.options.get("family")
            if fam not in TOY_FAMILIES:
                raise ConfigError(
                    f"model {self.name!r}: family must be one of "
                    f"{sorted(TOY_FAMILIES)}, got {fam!r}")
        elif not self.options.get("transport"):
            raise ConfigError(f"model {self.name!r}: oracle needs a transport")


@dataclass(frozen=True)
class RewriterSpec:
    kind: str = "stub"  # stub | fixture | oracle
    path: str | None = None
    transport: str | None = None
    cache: str | None = None

    def __post_init__(self):
        if self.kind not in ("stub", "fixture", "oracle"):
            raise ConfigError(f"unknown rewriter kind {self.kind!r}")
        if self.kind == "fixture" and not self.path:
            raise ConfigError("fixture rewriter needs a path")
        if self.kind == "oracle" and not self.transport:
            raise ConfigError("oracle rewriter needs a transport")


@dataclass(frozen=True)
class RunConfig:
    datasets: tuple[DatasetSpec, ...]
    models: tuple[ModelSpec, ...]
    attacks: tuple[AttackConfig, ...]
    caption_strategies: tuple[str, ...] = ("Original",)
    vqa_strategies: tuple[str, ...] = ("Original",)
    sample_size: int = 1000
    seed: int = 0
    output_dir: str = "results"
    workers: int = 1
    failure_threshold: float = 0.0
    timestamp: str | None = None  # pin for byte-identical stores
    rewriter: RewriterSpec = field(default_factory=RewriterSpec)
    endpoint_timeout: float = 120.0

    def __post_init__(self):
        if not self.datasets:
            raise ConfigError("config needs at least one dataset")
        if not self.models:
            raise ConfigError("config needs at least one model")
        if self.sample_size < 1:
            raise ConfigError("sample size must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not (0.0 <= self.failure_threshold <= 1.0):
            raise ConfigError("failure threshold must be within [0, 1]")
        for tag in self.caption_strategies:
            if tag not in CAPTION_TAGS:
                raise ConfigError(
                    f"unknown caption strategy {tag!r}; "
                    f"valid: {list(CAPTION_TAGS)}")
        for tag in self.vqa_strategies:
            if tag not in VQA_TAGS:
                raise ConfigError(
                    f"unknown vqa strategy {tag!r}; valid: {list(VQA_TAGS)}")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError("model names must be unique")


def _parse_epsilon(value) -> float:
    """Accepts a float, an int, or an exact "a/b" fraction string."""
    if isinstance(value, bool):
        raise ConfigError(f"bad epsilon {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str) and "/" in value:
        num, _, den = value.partition("/")
        try:
            return int(num.strip()) / int(den.strip())
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"bad epsilon fraction {value!r}") from None
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad epsilon {value!r}") from None


_ATTACK_KEYS = {"method", "epsilon", "iterations", "step_size", "input_mask",
                "seed", "random_start"}


def attack_from_table(tbl: dict) -> AttackConfig:
    unknown = set(tbl) - _ATTACK_KEYS
    if unknown:
        raise ConfigError(f"unknown attack fields {sorted(unknown)}")
    if "method" not in tbl or "epsilon" not in tbl:
        raise ConfigError("attack needs method and epsilon")
    kwargs = dict(tbl)
    kwargs["epsilon"] = _parse_epsilon(kwargs["epsilon"])
    if "input_mask" in kwargs and kwargs["input_mask"] is not None:
        kwargs["input_mask"] = tuple(int(i) for i in kwargs["input_mask"])
    try:
        return AttackConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad attack {tbl!r}: {exc}") from None


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"{where} is missing {key!r}")
    return table[key]


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """RunConfig from a TOML file plus CLI-style overrides.

    Override keys mirror the CLI flags: attack (list of methods), eps
    (list of epsilons), iters, strategy (list of tags), dataset (list of
    paths), sample_size, seed, out, workers. attack/eps rebuild the
    attack list as their cross product.
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None

    run = raw.get("run", {})
    base = path.resolve().parent

    def _resolve(p: str) -> str:
        q = Path(p)
        return str(q if q.is_absolute() else base / q)

    datasets = tuple(
        DatasetSpec(name=str(_require(d, "name", "dataset entry")),
                    path=_resolve(str(_require(d, "path", "dataset entry"))))
        for d in raw.get("datasets", ())
    )
    models = tuple(
        ModelSpec(
            name=str(_require(m, "name", "model entry")),
            kind=str(_require(m, "kind", "model entry")),
            options={k: v for k, v in m.items() if k not in ("name", "kind")},
        )
        for m in raw.get("models", ())
    )
    attacks = tuple(attack_from_table(t) for t in raw.get("attacks", ()))
    strategies = raw.get("strategies", {})
    rw = raw.get("rewriter", {})
    rewriter = RewriterSpec(
        kind=str(rw.get("kind", "stub")),
        path=_resolve(rw["path"]) if rw.get("path") else None,
        transport=rw.get("transport"),
        cache=_resolve(rw["cache"]) if rw.get("cache") else None,
    )

    cfg = RunConfig(
        datasets=datasets,
        models=models,
        attacks=attacks,
        caption_strategies=tuple(strategies.get("caption", ("Original",))),
        vqa_strategies=tuple(strategies.get("vqa", ("Original",))),
        sample_size=int(run.get("sample_size", 1000)),
        seed=int(run.get("seed", 0)),
        output_dir=_resolve(str(run.get("output", "results"))),
        workers=int(run.get("workers", 1)),
        failure_threshold=float(run.get("failure_threshold", 0.0)),
        timestamp=run.get("timestamp"),
        rewriter=rewriter,
        endpoint_timeout=float(run.get("endpoint_timeout", 120.0)),
    )
    return apply_overrides(cfg, overrides or {})


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    unknown = set(overrides) - {"attack", "eps", "iters", "strategy",
                                "dataset", "sample_size", "seed", "out",
                                "workers"}
    if unknown:
        raise ConfigError(f"unknown overrides {sorted(unknown)}")
    changes: dict = {}
    methods = overrides.get("attack")
    epsilons = overrides.get("eps")
    iters = overrides.get("iters")
    if methods or epsilons or iters is not None:
        base_methods = (list(methods) if methods
                        else sorted({a.method for a in cfg.attacks}))
        base_eps = ([_parse_epsilon(e) for e in epsilons] if epsilons
                    else sorted({a.epsilon for a in cfg.attacks}))
        if not base_methods or not base_eps:
            raise ConfigError(
                "attack overrides need both a method and an epsilon when "
                "the config file lists no attacks")
        # inherit the largest configured budget: FGSM entries coerce theirs
        # to 1 and must not starve rebuilt iterative attacks
        n_iter = int(iters) if iters is not None else max(
            (a.iterations for a in cfg.attacks), default=100)
        try:
            changes["attacks"] = tuple(
                AttackConfig(method=m, epsilon=e, iterations=n_iter)
                for m in base_methods for e in base_eps
            )
        except ValueError as exc:
            raise ConfigError(f"bad attack override: {exc}") from None
    if overrides.get("strategy"):
        tags = tuple(overrides["strategy"])
        caption = tuple(t for t in tags if t in CAPTION_TAGS)
        vqa = tuple(t for t in tags if t in VQA_TAGS)
        bad = [t for t in tags if t not in CAPTION_TAGS and t not in VQA_TAGS]
        if bad:
            raise ConfigError(f"unknown strategies {bad}")
        changes["caption_strategies"] = caption or ("Original",)
        changes["vqa_strategies"] = vqa or ("Original",)
    if overrides.get("dataset"):
        changes["datasets"] = tuple(
            DatasetSpec(name=Path(p).stem, path=str(p))
            for p in overrides["dataset"]
        )
    if overrides.get("sample_size") is not None:
        changes["sample_size"] = int(overrides["sample_size"])
    if overrides.get("seed") is not None:
        changes["seed"] = int(overrides["seed"])
    if overrides.get("out"):
        changes["output_dir"] = str(overrides["out"])
    if overrides.get("workers") is not None:
        changes["workers"] = int(overrides["workers"])
    try:
        return replace(cfg, **changes) if changes else cfg
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_hash(cfg: RunConfig) -> str:
    """12-hex digest of the experiment identity.

    Covers what determines the numbers (datasets by name, models, attacks,
    strategies, sample size, seed, toolkit version) and skips plumbing
    (paths, output dir, workers, timestamps).
    """
    essence = {
        "datasets": [d.name for d in cfg.datasets],
        "models": [
            {"name": m.name, "kind": m.kind,
             "options": {k: (list(v) if isinstance(v, (tuple, list)) else v)
                         for k, v in sorted(m.options.items())}}
            for m in cfg.models
        ],
        "attacks": [
            [a.method, a.epsilon, a.iterations, a.step_size,
             list(a.input_mask) if a.input_mask is not None else None,
             a.seed, a.random_start]
            for a in cfg.attacks
        ],
        "strategies": {"caption": list(cfg.caption_strategies),
                       "vqa": list(cfg.vqa_strategies)},
        "sample_size": cfg.sample_size,
        "seed": cfg.seed,
        "version": __version__,
    }
    blob = json.dumps(essence, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Result rows and the JSONL store


@dataclass(frozen=True)
class ResultRow:
    """One grid cell: (model, task, attack, epsilon, strategy) -> value.

    value is the dataset-mean metric scaled by 100 (table convention);
    it is None exactly when status is "failed" (an aborted cell's
    explicit marker). Clean rows carry attack "None" and epsilon 0.
    """

    model: str
    task: str
    dataset: str
    attack: str
    epsilon: float
    strategy: str
    metric: str
    value: float | None
    sample_count: int
    failures: int
    seed: int
    config_hash: str
    timestamp: str
    version: str
    status: str = "ok"

    def __post_init__(self):
        if self.status not in ("ok", "failed"):
            raise ValueError(f"bad row status {self.status!r}")
        if self.status == "ok":
            if self.value is None or self.value < 0.0:
                raise ValueError(f"row value must be >= 0, got {self.value!r}")
        elif self.value is not None:
            raise ValueError("failed rows carry value None")
        if self.attack == CLEAN_TAG and self.epsilon != 0.0:
            raise ValueError("clean rows carry epsilon 0")

    def to_json(self) -> dict:
        return {
            "schema": STORE_SCHEMA_VERSION,
            "model": self.model, "task": self.task, "dataset": self.dataset,
            "attack": self.attack, "epsilon": self.epsilon,
            "strategy": self.strategy, "metric": self.metric,
            "value": self.value, "sample_count": self.sample_count,
            "failures": self.failures, "seed": self.seed,
            "config_hash": self.config_hash, "timestamp": self.timestamp,
            "version": self.version, "status": self.status,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ResultRow":
        version = obj.get("schema")
        if version != STORE_SCHEMA_VERSION:
            raise StoreError(
                f"store schema {version!r}, this build reads "
                f"{STORE_SCHEMA_VERSION}")
        fields = {k: obj[k] for k in (
            "model", "task", "dataset", "attack", "epsilon", "strategy",
            "metric", "value", "sample_count", "failures", "seed",
            "config_hash", "timestamp", "version", "status") if k in obj}
        missing = {"model", "task", "attack", "epsilon", "strategy",
                   "metric", "value"} - set(fields)
        if missing:
            raise StoreError(f"row is missing fields {sorted(missing)}")
        try:
            return cls(**{
                "dataset": "", "sample_count": 0, "failures": 0, "seed": 0,
                "config_hash": "", "timestamp": "", "version": "",
                "status": "ok", **fields,
            })
        except (TypeError, ValueError) as exc:
            raise StoreError(f"bad row: {exc}") from None


def persist_rows(rows: Sequence[ResultRow], store_path) -> Path:
    """Appends rows to a JSONL store, one canonical line each."""
    store_path = Path(store_path)
    store_path.parent.mkdir(parents=True, exist_ok=True)
    with open(store_path, "a", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row.to_json(), sort_keys=True) + "\n")
    return store_path


def load_rows(store_path, tolerant: bool = False) -> list[ResultRow]:
    """Store rows in file order; corrupt lines raise with their 1-based
    line number unless tolerant, which skips them with a warning."""
    store_path = Path(store_path)
    try:
        text = store_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise StoreError(f"store not found: {store_path}") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise StoreError("row must be a JSON object")
            rows.append(ResultRow.from_json(obj))
        except (json.JSONDecodeError, StoreError) as exc:
            if tolerant:
                log.warning("%s line %d: skipping corrupt row (%s)",
                            store_path, lineno, exc)
                continue
            raise StoreError(f"{store_path} line {lineno}: {exc}") from None
    return rows


# ---------------------------------------------------------------------------
# Endpoints


class _ToyEndpoint:
    def __init__(self, spec: ModelSpec):
        self.name = spec.name
        opts = dict(spec.options)
        family = opts.pop("family")
        seed = int(opts.pop("seed", 0))
        if "shape" in opts:
            shape = tuple(int(d) for d in opts.pop("shape"))
            if family == "two-branch":
                opts["input_shapes"] = (shape, shape)
            else:
                opts["input_shape"] = shape
        if "classes" in opts:
            opts["num_classes"] = int(opts.pop("classes"))
        try:
            self._model = make_toy_model(family, seed, **opts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model {self.name!r}: {exc}") from None

    def model(self) -> DifferentiableModel:
        return self._model

    def close(self) -> None:
        pass


class _OracleEndpoint:
    """One wire connection per worker thread, shared handshake contract."""

    def __init__(self, spec: ModelSpec, timeout: float):
        self.name = spec.name
        self._spec = str(spec.options["transport"])
        self._timeout = float(spec.options.get("timeout", timeout))
        self._local = threading.local()
        self._clients: list[OracleClient] = []
        self._lock = threading.Lock()
        self.model()  # fail fast on an unreachable endpoint

    def model(self) -> DifferentiableModel:
        model = getattr(self._local, "model", None)
        if model is None:
            try:
                client = OracleClient(open_transport(self._spec),
                                      timeout=self._timeout)
                model = RemoteModel(client)
            except (TransportError, ProtocolError, OracleError, OSError) as exc:
                raise EndpointError(
                    f"endpoint {self.name!r} ({self._spec}): {exc}") from None
            self._local.model = model
            with self._lock:
                self._clients.append(client)
        return model

    def close(self) -> None:
        with self._lock:
            clients, self._clients = self._clients, []
        for client in clients:
            try:
                client.close()
            except Exception:  # noqa: BLE001 - best-effort teardown
                pass


def _build_endpoint(spec: ModelSpec, timeout: float):
    if spec.kind == "toy":
        return _ToyEndpoint(spec)
    return _OracleEndpoint(spec, timeout)


def _build_rewriter(spec: RewriterSpec,
                    timeout: float) -> tuple[RewriterClient, RewriteCache | None]:
    cache = RewriteCache(spec.cache) if spec.cache else None
    if spec.kind == "stub":
        return StubRewriter(), cache
    if spec.kind == "fixture":
        try:
            return FixtureRewriter.from_jsonl(spec.path), cache
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"rewriter fixture {spec.path}: {exc}") from None
    try:
        client = OracleClient(open_transport(spec.transport), timeout=timeout)
        return RemoteRewriter(client), cache
    except (TransportError, ProtocolError, OracleError, OSError) as exc:
        raise EndpointError(f"rewriter ({spec.transport}): {exc}") from None


# ---------------------------------------------------------------------------
# Grid runner


@dataclass(frozen=True)
class _Unit:
    """One prepared evaluation item: loaded inputs, prompt, scorer."""

    id: str
    inputs: tuple
    prompt: str
    declared: Target
    score: Callable[[str], float]


def _dataset_task(dataset: Dataset, name: str) -> str:
    tasks = {rec.task for rec in dataset.records}
    if len(tasks) != 1:
        raise ConfigError(
            f"dataset {name!r} mixes tasks {sorted(tasks)}; "
            "split it into one file per task")
    return tasks.pop()


def _prepare_units(subset: Dataset, task: str, strategy_tag: str,
                   rewriter: RewriterClient,
                   cache: RewriteCache | None) -> list[_Unit]:
    units: list[_Unit] = []
    if task == TASK_CAPTIONING:
        corpus = compute_document_frequencies(
            [rec.references for rec in subset.records])
        prompt = apply_caption_strategy(CaptionStrategy(strategy_tag))
        for rec in subset.records:
            refs = rec.references

            def score(text: str, _refs=refs) -> float:
                return cider_score(text, _refs, corpus)

            units.append(_Unit(rec.id, subset.load_inputs(rec), prompt,
                               Target.reference_set(refs), score))
    else:
        for rec in subset.records:
            question = rewrite_question(
                rewriter, VqaStrategy(strategy_tag), rec.question, cache=cache)
            annotations = AnnotationSet(rec.id, rec.answers)

            def score(text: str, _ann=annotations) -> float:
                return vqa_accuracy(text, _ann)

            units.append(_Unit(rec.id, subset.load_inputs(rec), question,
                               Target.reference_set(rec.answers), score))
    return units


_SAMPLE_ERRORS = (ModelError, OracleError, TransportError, ProtocolError,
                  ValueError, ArithmeticError)


def _evaluate_cell(endpoint, units: Sequence[_Unit],
                   attack_cfg: AttackConfig | None, workers: int,
                   threshold: float) -> tuple[float | None, int, int]:
    """(mean metric x100 or None, evaluated count, failure count).

    Reduction is in unit order. A cell whose failure fraction exceeds
    the threshold aborts and reports value None.
    """

    def job(unit: _Unit) -> float:
        model = endpoint.model()
        target = model.derive_target(unit.inputs, unit.prompt, unit.declared)
        sample = Sample(unit.id, tuple(unit.inputs), unit.prompt, target)
        if attack_cfg is None:
            adversarial = sample.inputs
        else:
            adversarial = run_attack(model, sample, attack_cfg).adversarial_inputs
        return float(unit.score(model.generate(adversarial, unit.prompt)))

    outcomes: list[float | Exception] = [None] * len(units)  # type: ignore
    if workers == 1:
        for i, unit in enumerate(units):
            try:
                outcomes[i] = job(unit)
            except _SAMPLE_ERRORS as exc:
                outcomes[i] = exc
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(job, u) for u in units]
            for i, fut in enumerate(futures):
                try:
                    outcomes[i] = fut.result()
                except _SAMPLE_ERRORS as exc:
                    outcomes[i] = exc

    values = [v for v in outcomes if not isinstance(v, Exception)]
    failures = len(outcomes) - len(values)
    if failures:
        first = next(v for v in outcomes if isinstance(v, Exception))
        log.warning("cell had %d/%d failed samples; first: %s",
                    failures, len(outcomes), first)
    if failures > threshold * len(units) or not values:
        return None, len(values), failures
    return aggregate(values) * 100.0, len(values), failures


def attack_tag(cfg: AttackConfig) -> str:
    return cfg.method.upper()


def run_grid(cfg: RunConfig) -> list[ResultRow]:
    """All grid cells as rows; aborted cells become failed marker rows."""
    stamp = cfg.timestamp or datetime.now(timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ")
    chash = config_hash(cfg)
    rewriter, cache = _build_rewriter(cfg.rewriter, cfg.endpoint_timeout)
    endpoints = []
    rows: list[ResultRow] = []
    try:
        endpoints = [_build_endpoint(m, cfg.endpoint_timeout)
                     for m in cfg.models]
        for ds_spec in cfg.datasets:
            try:
                dataset = load_dataset(ds_spec.path)
            except (DatasetError, OSError) as exc:
                raise ConfigError(
                    f"dataset {ds_spec.name!r}: {exc}") from None
            task = _dataset_task(dataset, ds_spec.name)
            metric = METRIC_BY_TASK[task]
            subset = sample_subset(dataset, cfg.sample_size, cfg.seed)
            tags = (cfg.caption_strategies if task == TASK_CAPTIONING
                    else cfg.vqa_strategies)
            for strategy_tag in tags:
                units = _prepare_units(subset, task, strategy_tag,
                                       rewriter, cache)
                for endpoint in endpoints:
                    # clean cell first: never depends on the attack list
                    cells = [(CLEAN_TAG, 0.0, None)] + [
                        (attack_tag(a), a.epsilon, a) for a in cfg.attacks]
                    for tag, eps, attack_cfg in cells:
                        value, count, failures = _evaluate_cell(
                            endpoint, units, attack_cfg, cfg.workers,
                            cfg.failure_threshold)
                        rows.append(ResultRow(
                            model=endpoint.name, task=task,
                            dataset=ds_spec.name, attack=tag, epsilon=eps,
                            strategy=strategy_tag, metric=metric,
                            value=value, sample_count=count,
                            failures=failures, seed=cfg.seed,
                            config_hash=chash, timestamp=stamp,
                            version=__version__,
                            status="ok" if value is not None else "failed",
                        ))
    finally:
        for endpoint in endpoints:
            endpoint.close()
    return rows


# ---------------------------------------------------------------------------
# Report emitter


def _epsilon_label(eps: float) -> str:
    scaled = eps * 255.0
    if abs(scaled - round(scaled)) < 1e-9 and round(scaled) >= 1:
        return f"{int(round(scaled))}/255"
    return f"{eps:.5g}"


def _attack_labels(rows: Sequence[ResultRow]) -> dict[tuple[str, float], str]:
    """Display label per (attack tag, epsilon), clean last, disambiguated
    by epsilon only when a method appears at several epsilons."""
    seen: list[tuple[str, float]] = []
    for row in rows:
        key = (row.attack, row.epsilon)
        if key not in seen:
            seen.append(key)
    # clean column last, everything else in first-appearance order
    seen = ([k for k in seen if k[0] != CLEAN_TAG]
            + [k for k in seen if k[0] == CLEAN_TAG])
    eps_per_method: dict[str, set[float]] = {}
    for tag, eps in seen:
        eps_per_method.setdefault(tag, set()).add(eps)
    labels = {}
    for tag, eps in seen:
        if tag == CLEAN_TAG:
            labels[(tag, eps)] = "Clean"
        elif len(eps_per_method[tag]) > 1:
            labels[(tag, eps)] = f"{tag} {_epsilon_label(eps)}"
        else:
            labels[(tag, eps)] = tag
    return labels


def _fmt_cell(row: ResultRow | None) -> str:
    if row is None:
        return "-"
    if row.status != "ok":
        return "failed"
    return f"{row.value:.2f}"


def _group_rows(rows: Sequence[ResultRow]):
    groups: dict[tuple[str, str, str], list[ResultRow]] = {}
    for row in rows:
        groups.setdefault((row.model, row.task, row.dataset), []).append(row)
    return groups


def _markdown_tables(rows: Sequence[ResultRow], layout: str) -> str:
    if layout not in ("strategies", "attacks"):
        raise ValueError(f"unknown report layout {layout!r}")
    out: list[str] = []
    for (model, task, dataset), group in _group_rows(rows).items():
        title = f"## {model} / {task}" + (f" ({dataset})" if dataset else "")
        out.append(title)
        out.append("")
        labels = _attack_labels(group)
        strategies = []
        for row in group:
            if row.strategy not in strategies:
                strategies.append(row.strategy)
        cell: dict[tuple, ResultRow] = {
            ((r.attack, r.epsilon), r.strategy): r for r in group}
        if layout == "strategies":
            header = ["Prompt"] + [labels[k] for k in labels]
            out.append("| " + " | ".join(header) + " |")
            out.append("|" + "|".join([" --- "] + [" ---: "] * len(labels)) + "|")
            for strat in strategies:
                line = [strat] + [
                    _fmt_cell(cell.get((k, strat))) for k in labels]
                out.append("| " + " | ".join(line) + " |")
        else:
            header = ["Attack"] + list(strategies)
            out.append("| " + " | ".join(header) + " |")
            out.append("|" + "|".join([" --- "] + [" ---: "] * len(strategies)) + "|")
            for key, label in labels.items():
                line = [label] + [
                    _fmt_cell(cell.get((key, strat))) for strat in strategies]
                out.append("| " + " | ".join(line) + " |")
        out.append("")
    return "\n".join(out)


def _average_tasks_table(rows: Sequence[ResultRow]) -> str:
    """Cross-task mean per (model, attack, epsilon); raw-scale caveat."""
    out = ["## Cross-task average", "",
           "Caution: averages CIDEr x100 and VQA accuracy x100 on their",
           "raw scales; comparable only within one metric convention.", ""]
    acc: dict[tuple, list[float]] = {}
    for row in rows:
        if row.status == "ok":
            acc.setdefault((row.model, row.attack, row.epsilon), []).append(
                row.value)
    out.append("| Model | Attack | Mean value |")
    out.append("| --- | --- | ---: |")
    labels = _attack_labels(rows)
    for (model, tag, eps), values in acc.items():
        label = labels.get((tag, eps), tag)
        out.append(f"| {model} | {label} | {aggregate(values):.2f} |")
    out.append("")
    return "\n".join(out)


CSV_HEADER = ["schema", "model", "task", "dataset", "attack", "epsilon",
              "strategy", "metric", "value", "sample_count", "failures",
              "status", "seed", "config_hash", "timestamp", "version"]


def _csv_text(rows: Sequence[ResultRow]) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([
            STORE_SCHEMA_VERSION, r.model, r.task, r.dataset, r.attack,
            repr(r.epsilon), r.strategy, r.metric,
            "" if r.value is None else repr(r.value),
            r.sample_count, r.failures, r.status, r.seed, r.config_hash,
            r.timestamp, r.version,
        ])
    return buf.getvalue()


def rows_from_csv(path) -> list[ResultRow]:
    """Inverse of the CSV emitter; floats round-trip exactly via repr."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise StoreError(f"unexpected CSV header {header!r}")
        rows = []
        for record in reader:
            if len(record) != len(CSV_HEADER):
                raise StoreError(f"CSV row has {len(record)} fields")
            obj = dict(zip(CSV_HEADER, record))
            if int(obj["schema"]) != STORE_SCHEMA_VERSION:
                raise StoreError(f"CSV schema {obj['schema']!r}")
            rows.append(ResultRow(
                model=obj["model"], task=obj["task"], dataset=obj["dataset"],
                attack=obj["attack"], epsilon=float(obj["epsilon"]),
                strategy=obj["strategy"], metric=obj["metric"],
                value=None if obj["value"] == "" else float(obj["value"]),
                sample_count=int(obj["sample_count"]),
                failures=int(obj["failures"]), status=obj["status"],
                seed=int(obj["seed"]), config_hash=obj["config_hash"],
                timestamp=obj["timestamp"], version=obj["version"],
            ))
    return rows


def emit_report(rows: Sequence[ResultRow], format: str, out_dir,
                layout: str = "strategies",
                average_tasks: bool = False) -> list[Path]:
    """Writes report.md and/or report.csv under out_dir; returns paths."""
    if not rows:
        raise ValueError("cannot report zero rows")
    if format not in ("markdown", "csv", "both"):
        raise ValueError(f"unknown report format {format!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    if format in ("markdown", "both"):
        text = _markdown_tables(rows, layout)
        if average_tasks:
            text += "\n" + _average_tasks_table(rows)
        path = out_dir / "report.md"
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    if format in ("csv", "both"):
        path = out_dir / "report.csv"
        path.write_text(_csv_text(rows), encoding="utf-8")
        paths.append(path)
    return paths
