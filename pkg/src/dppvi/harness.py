"""Experiment configuration, execution, reports and trace replay.

One experiment runs a single method over several seeds.  Outputs written to
``config.output``:

``report.json``
    Per-seed final metrics, mean and standard error, communications, epsilons
    and every default the run relied on.
``trace.jsonl``
    A header with the full configuration, then per seed the round records and
    the final natural parameters (base64 of little-endian float64).
``rounds.csv``
    ``seed, round, communications, accuracy, mean_loglik`` for plotting.
"""

from __future__ import annotations

import base64
import copy
import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SplitSpec, load_tabular, split_clients, synth_gaussian_mean, synth_logreg, train_validation_split
from .errors import ConfigError, NonNormalizable, OptimizerDiverged
from .expfam import lambda_bytes, lambda_checksum, lambda_from_bytes
from .models import Dataset, ModelSpec
from .privacy import DpConfig, PrivacyLedger, SUBSAMPLING_LABEL
from .protocol import (
    AggregatorMode,
    ExperimentTrace,
    OptimizerConfig,
    RoundRecord,
    RunConfig,
    Schedule,
    run_bcm,
    run_global_vi,
    run_pvi,
)

METHODS = ("pvi_standard", "pvi_dp_opt", "pvi_local_avg", "pvi_virtual", "global_vi", "bcm_same", "bcm_split")
DP_REQUIRED = ("pvi_dp_opt", "pvi_local_avg", "pvi_virtual")
EPSILON_PRESETS = (0.5, 1.0, 2.0)
PRIVACY_NOTE = "hyperparameter tuning leakage excluded"
MAX_RERUNS = 2
TRACE_VERSION = 1
DIVERGENCE = (NonNormalizable, OptimizerDiverged, FloatingPointError)


@dataclass
class ExperimentConfig:
    """Human-editable description of one experiment.

    ``data`` selects the source: ``{"source": "synthetic", "n": ..,
    "theta_true": [..]}`` for logistic data, ``{"source": "gaussian", "n":
    .., "theta_true": [..]}`` for the conjugate Gaussian-mean model, or
    ``{"source": "file", "path": .., "schema": ..}`` for a CSV.  ``dp`` holds
    ``epsilon`` or ``noise_multiplier`` (exactly one), ``delta`` and
    ``clip_norm``; leave it ``None`` for non-private runs.
    """

    method: str
    model: dict = field(default_factory=lambda: {"kind": "logistic_regression", "input_dim": 2})
    data: dict = field(default_factory=lambda: {"source": "synthetic", "n": 2000})
    split: dict = field(default_factory=lambda: {"M": 10, "rho": 0.0, "kappa": 0.0})
    schedule: dict = field(default_factory=lambda: {"kind": "sequential", "global_updates": 10, "damping": 1.0})
    aggregator: str = "none"
    dp: dict | None = None
    optimizer: dict = field(default_factory=lambda: {"lr": 1e-2, "local_steps": 50, "batch_size": None,
                                                     "mc_samples": 1})
    local_partitions: int = 1
    seed: int = 0
    repeats: int = 1
    test_fraction: float = 0.2
    n_mc_eval: int = 100
    eval_every: int = 1
    output: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.method in DP_REQUIRED and self.dp is None:
            raise ConfigError(f"{self.method} needs a dp section")
        if self.method == "pvi_standard" and self.dp is not None:
            raise ConfigError("pvi_standard is non-private; drop the dp section")
        if self.dp is not None:
            has_eps = self.dp.get("epsilon") is not None
            has_sigma = self.dp.get("noise_multiplier") is not None
            if has_eps == has_sigma:
                raise ConfigError("give exactly one of dp.epsilon and dp.noise_multiplier")
        if self.data.get("source") not in ("synthetic", "gaussian", "file"):
            raise ConfigError(f"unknown data source {self.data.get('source')!r}")
        try:
            self.model_spec()
            self.run_config(self.seed)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.repeats)]

    def model_spec(self) -> ModelSpec:
        return ModelSpec(**self.model)

    def dp_config(self) -> DpConfig | None:
        if self.dp is None:
            return None
        return DpConfig(
            clip_norm=float(self.dp.get("clip_norm", 1.0)),
            noise_multiplier=float(self.dp.get("noise_multiplier") or 0.0),
            target_epsilon=self.dp.get("epsilon"),
            target_delta=float(self.dp.get("delta", 1e-5)),
        )

    def run_config(self, seed: int) -> RunConfig:
        opt = {"lr": 1e-2, "local_steps": 50, "batch_size": None, "mc_samples": 1, **self.optimizer}
        sched = {"kind": "sequential", "global_updates": 10, "damping": 1.0, **self.schedule}
        method = self.method[4:] if self.method.startswith("pvi_") else "standard"
        return RunConfig(
            model=self.model_spec(), method=method, schedule=Schedule(**sched),
            aggregator=AggregatorMode(self.aggregator), opt=OptimizerConfig(**opt), dp=self.dp_config(),
            local_partitions=self.local_partitions, seed=seed, n_mc_eval=self.n_mc_eval,
            eval_every=self.eval_every,
        )

    def materialized(self) -> dict:
        """Configuration with every default filled in."""
        doc = asdict(self)
        doc["optimizer"] = {"lr": 1e-2, "local_steps": 50, "batch_size": None, "mc_samples": 1, **self.optimizer}
        doc["schedule"] = {"kind": "sequential", "global_updates": 10, "damping": 1.0, **self.schedule}
        doc["split"] = {"M": 10, "rho": 0.0, "kappa": 0.0, **self.split}
        doc["model"] = asdict(self.model_spec())
        if self.dp is not None:
            doc["dp"] = {"clip_norm": 1.0, "delta": 1e-5, "epsilon": None, "noise_multiplier": None, **self.dp}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "method" not in doc:
            raise ConfigError("config needs a method")
        return cls(**copy.deepcopy(doc))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)


# --------------------------------------------------------------------------
# data assembly


def build_data(config: ExperimentConfig, seed: int) -> tuple[list[Dataset], Dataset]:
    """Client shards and held-out set for one data seed."""
    data = config.data
    model = config.model_spec()
    split = {"M": 10, "rho": 0.0, "kappa": 0.0, **config.split}
    if data["source"] == "file":
        table = load_tabular(data["path"], data["schema"], seed=seed, train_fraction=1.0 - config.test_fraction)
        train, test = table.train, table.validation
    else:
        n = int(data.get("n", 2000))
        n_total = int(round(n / (1.0 - config.test_fraction)))
        if data["source"] == "synthetic":
            theta = data.get("theta_true")
            if theta is None:
                theta = np.random.default_rng(seed).standard_normal(model.input_dim + 1)
            pooled = synth_logreg(n_total, model.input_dim, theta, seed=seed)
        else:
            theta = data.get("theta_true", np.zeros(model.input_dim))
            pooled = synth_gaussian_mean(n_total, theta, noise_var=model.noise_var, seed=seed)
        train, test = train_validation_split(pooled, seed=seed, train_fraction=1.0 - config.test_fraction)
    shards = split_clients(train, SplitSpec(split["M"], split["rho"], split["kappa"], seed=seed))
    return shards, test


def derived_seed(seed: int, attempt: int) -> int:
    """Seed for the ``attempt``-th rerun of a diverged run (0 returns ``seed``)."""
    if attempt == 0:
        return seed
    return int(np.random.SeedSequence(seed, spawn_key=(attempt,)).generate_state(1)[0])


def run_single(config: ExperimentConfig, data_seed: int, run_seed: int | None = None) -> ExperimentTrace:
    """Execute the configured method once; data from ``data_seed``, algorithm randomness from ``run_seed``."""
    run_seed = data_seed if run_seed is None else run_seed
    shards, test = build_data(config, data_seed)
    rc = config.run_config(run_seed)
    if config.method.startswith("pvi_"):
        return run_pvi(rc, shards, test)
    if config.method == "global_vi":
        return run_global_vi(rc, shards, test)
    return run_bcm(config.method[4:], rc, shards, test)


# --------------------------------------------------------------------------
# reports


@dataclass
class SeedResult:
    seed: int
    run_seed: int | None
    reruns: int
    status: str
    accuracy: float | None = None
    mean_loglik: float | None = None
    communications: int | None = None
    epsilons: list | None = None
    error: str | None = None

    @property
    def epsilon_max(self) -> float | None:
        if not self.epsilons:
            return None
        return max(self.epsilons)


@dataclass
class ExperimentReport:
    method: str
    config: dict
    per_seed: list[SeedResult]
    mean: dict
    sem: dict | None
    communications: int | None
    epsilon_max: float | None
    metadata: dict
    trace_path: str | None = None

    @property
    def completed(self) -> list[SeedResult]:
        return [r for r in self.per_seed if r.status == "ok"]

    @property
    def diverged(self) -> bool:
        return any(r.status != "ok" for r in self.per_seed)

    def to_dict(self) -> dict:
        doc = asdict(self)
        for r, d in zip(self.per_seed, doc["per_seed"]):
            d["epsilon_max"] = r.epsilon_max
        return doc

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def _seed_result(seed, run_seed, reruns, trace: ExperimentTrace) -> SeedResult:
    final = trace.final
    return SeedResult(seed, run_seed, reruns, "ok", final.accuracy, final.mean_loglik,
                      final.cumulative_communications, final.epsilons)


def aggregate(method: str, config_doc: dict, results: list[SeedResult], metadata: dict,
              trace_path=None) -> ExperimentReport:
    done = [r for r in results if r.status == "ok"]
    mean, sem = {}, None
    for key in ("accuracy", "mean_loglik"):
        vals = [getattr(r, key) for r in done if getattr(r, key) is not None]
        mean[key] = float(np.mean(vals)) if vals else None
    if len(done) >= 2:
        sem = {}
        for key in ("accuracy", "mean_loglik"):
            vals = [getattr(r, key) for r in done if getattr(r, key) is not None]
            sem[key] = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) >= 2 else None
    comms = done[0].communications if done else None
    eps = [r.epsilon_max for r in done if r.epsilon_max is not None]
    return ExperimentReport(method, config_doc, results, mean, sem, comms, max(eps) if eps else None, metadata,
                            None if trace_path is None else str(trace_path))


def _metadata(config: ExperimentConfig, traces: list[ExperimentTrace]) -> dict:
    meta = {
        "privacy_accounting": PRIVACY_NOTE,
        "accountant": "exact Gaussian composition; Poisson-subsampled Gaussian RDP for subsampled steps",
        "epsilon_scope": "per client (parallel composition); joint for trusted aggregation",
        "noise_convention": "std = noise_multiplier * 2 * clip_norm",
        "dp_budget_plan": "noise multiplier calibrated for each client's total planned mechanism invocations",
        "damping_scope": "aggregate server update; prior not damped",
        "local_objective": "local averaging uses kl_weight = 1/N with untempered likelihood",
        "preprocessing": "standardize continuous (train statistics), one-hot categorical"
                         if config.data.get("source") == "file" else None,
    }
    if traces:
        meta["subsampling"] = traces[0].metadata.get("subsampling")
        meta["noise_multipliers"] = [t.metadata.get("noise_multipliers") for t in traces]
    if meta.get("subsampling") is None and config.method in ("pvi_dp_opt", "global_vi", "bcm_same", "bcm_split") \
            and config.dp is not None:
        meta["subsampling"] = SUBSAMPLING_LABEL
    return meta


# --------------------------------------------------------------------------
# trace files


def _trace_lines(seed: SeedResult, trace: ExperimentTrace | None):
    yield {"type": "run", "seed": seed.seed, "run_seed": seed.run_seed, "reruns": seed.reruns,
           "status": seed.status, "error": seed.error}
    if trace is None:
        return
    for rec in trace.records:
        yield {"type": "round", "seed": seed.seed, **rec.to_dict()}
    yield {
        "type": "final", "seed": seed.seed,
        "lambda": base64.b64encode(lambda_bytes(trace.final_lambda)).decode("ascii"),
        "lambda_checksum": lambda_checksum(trace.final_lambda),
        "ledgers": [led.to_dict() for led in trace.ledgers],
    }


def write_trace(path, config: ExperimentConfig, results, traces) -> None:
    with open(path, "w") as fh:
        header = {"type": "header", "version": TRACE_VERSION, "config": config.materialized(),
                  "raw_config": asdict(config)}
        fh.write(json.dumps(_jsonable(header)) + "\n")
        for res, tr in zip(results, traces):
            for line in _trace_lines(res, tr):
                fh.write(json.dumps(_jsonable(line)) + "\n")


def read_trace(path) -> dict:
    """Parse a trace file into ``{"header": .., "runs": {seed: {...}}}``."""
    runs: dict = {}
    header = None
    with open(path) as fh:
        for line in fh:
            doc = json.loads(line)
            kind = doc.pop("type")
            if kind == "header":
                header = doc
                continue
            seed = doc.pop("seed")
            run = runs.setdefault(seed, {"rounds": []})
            if kind == "run":
                run.update(doc)
            elif kind == "round":
                run["rounds"].append(doc)
            elif kind == "final":
                run["final_lambda"] = lambda_from_bytes(base64.b64decode(doc["lambda"]))
                run["lambda_checksum"] = doc["lambda_checksum"]
                run["ledgers"] = [PrivacyLedger.from_dict(d) for d in doc["ledgers"]]
    if header is None:
        raise ConfigError(f"{path} has no header line")
    return {"header": header, "runs": runs}


def write_csv(path, results, traces) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "round", "communications", "accuracy", "mean_loglik"])
        for res, tr in zip(results, traces):
            if tr is None:
                continue
            for rec in tr.records:
                w.writerow([res.seed, rec.round, rec.cumulative_communications, rec.accuracy, rec.mean_loglik])


def report_from_trace(path) -> ExperimentReport:
    """Rebuild the report numbers from a trace file alone."""
    doc = read_trace(path)
    config = ExperimentConfig.from_dict(doc["header"]["raw_config"])
    results = []
    for seed, run in doc["runs"].items():
        if run["status"] != "ok":
            results.append(SeedResult(seed, run["run_seed"], run["reruns"], run["status"], error=run.get("error")))
            continue
        last = run["rounds"][-1]
        results.append(SeedResult(seed, run["run_seed"], run["reruns"], "ok", last["accuracy"], last["mean_loglik"],
                                  last["cumulative_communications"], _eps_from_json(last["epsilons"])))
    return aggregate(config.method, config.materialized(), results, _metadata(config, []), path)


def _eps_from_json(eps):
    if eps is None:
        return None
    return [float(e) for e in eps]


# --------------------------------------------------------------------------
# entry points


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Run every seed, isolating divergences, and emit report and trace files."""
    results, traces = [], []
    for seed in config.seeds:
        trace, error, attempt, run_seed = None, None, 0, seed
        for attempt in range(MAX_RERUNS + 1):
            run_seed = derived_seed(seed, attempt)
            try:
                trace = run_single(config, seed, run_seed)
                break
            except DIVERGENCE as exc:
                error = f"{type(exc).__name__}: {exc}"
        if trace is None:
            results.append(SeedResult(seed, run_seed, attempt, "diverged", error=error))
        else:
            results.append(_seed_result(seed, run_seed, attempt, trace))
        traces.append(trace)
    out = Path(config.output) if (write and config.output) else None
    trace_path = None if out is None else out / "trace.jsonl"
    report = aggregate(config.method, config.materialized(), results,
                       _metadata(config, [t for t in traces if t is not None]), trace_path)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_trace(trace_path, config, results, traces)
        write_csv(out / "rounds.csv", results, traces)
        report.write(out / "report.json")
    report.traces = traces
    return report


def count_communications(trace) -> int:
    """Cumulative server-client message exchanges at the end of a run."""
    if isinstance(trace, ExperimentTrace):
        return trace.communications
    records = trace["rounds"] if isinstance(trace, dict) else trace
    if not records:
        return 0
    last = records[-1]
    return int(last.cumulative_communications if isinstance(last, RoundRecord) else last["cumulative_communications"])


@dataclass
class ReplayResult:
    ok: bool
    mismatches: list[str]
    report: ExperimentReport | None = None


def replay(trace_path) -> ReplayResult:
    """Re-execute every seed recorded in a trace and compare all numbers exactly."""
    doc = read_trace(trace_path)
    config = ExperimentConfig.from_dict(doc["header"]["raw_config"])
    mismatches, results = [], []
    for seed, run in doc["runs"].items():
        if run["status"] != "ok":
            results.append(SeedResult(seed, run["run_seed"], run["reruns"], run["status"], error=run.get("error")))
            continue
        trace = run_single(config, seed, run["run_seed"])
        fresh = [json.loads(json.dumps(_jsonable(r.to_dict()))) for r in trace.records]
        if fresh != run["rounds"]:
            for a, b in zip(fresh, run["rounds"]):
                if a != b:
                    mismatches.append(f"seed {seed} round {b.get('round')}: {a} != {b}")
            if len(fresh) != len(run["rounds"]):
                mismatches.append(f"seed {seed}: {len(fresh)} rounds replayed, {len(run['rounds'])} recorded")
        if lambda_checksum(trace.final_lambda) != run["lambda_checksum"]:
            mismatches.append(f"seed {seed}: final natural parameters differ")
        results.append(_seed_result(seed, run["run_seed"], run["reruns"], trace))
    report = aggregate(config.method, config.materialized(), results, _metadata(config, []), trace_path)
    recorded = report_from_trace(trace_path)
    for key in ("mean", "sem", "communications", "epsilon_max"):
        if getattr(recorded, key) != getattr(report, key):
            mismatches.append(f"{key}: {getattr(report, key)} != {getattr(recorded, key)}")
    return ReplayResult(not mismatches, mismatches, report)


def _set_path(doc: dict, dotted: str, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


@dataclass
class SweepResult:
    points: list[dict]
    reports: list[ExperimentReport | None]
    errors: list[str | None]
    selection: dict | None


def sweep(template: ExperimentConfig, grid: dict[str, list]) -> SweepResult:
    """Single-seed run per grid point and the point with the best mean log-likelihood.

    Grid keys are dotted config paths such as ``"optimizer.lr"``.  Failing
    points are recorded and skipped.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        return SweepResult([], [], [], None)
    keys = list(grid)
    points, reports, errors = [], [], []
    base = asdict(template)
    for i, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        point = dict(zip(keys, values))
        doc = copy.deepcopy(base)
        for k, v in point.items():
            _set_path(doc, k, v)
        doc["repeats"] = 1
        if template.output:
            doc["output"] = str(Path(template.output) / f"point_{i:03d}")
        points.append(point)
        try:
            rep = run_experiment(ExperimentConfig.from_dict(doc))
            if rep.diverged:
                raise OptimizerDiverged(rep.per_seed[0].error or "diverged")
            reports.append(rep)
            errors.append(None)
        except (ConfigError, *DIVERGENCE) as exc:
            reports.append(None)
            errors.append(f"{type(exc).__name__}: {exc}")
    scored = [(r.mean["mean_loglik"], i) for i, r in enumerate(reports)
              if r is not None and r.mean.get("mean_loglik") is not None]
    selection = None
    if scored:
        best_ll, best = max(scored)
        selection = {"index": best, "point": points[best], "mean_loglik": best_ll, "criterion": "mean_loglik"}
    if template.output:
        Path(template.output).mkdir(parents=True, exist_ok=True)
        Path(template.output, "selection.json").write_text(json.dumps(_jsonable(
            {"points": points, "errors": errors, "selection": selection})))
    return SweepResult(points, reports, errors, selection)
