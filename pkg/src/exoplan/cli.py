"""Experiment harness.

Each stage reads the artifacts of the previous one from ``--out-dir`` and
writes its own; training and planning never open the environment file.

    exoplan generate-env   -> env.json
    exoplan collect        -> dataset_<tier>.jsonl
    exoplan train-model    -> model_<tier>_<model>.json
    exoplan plan           -> policy_<tier>_<model>.json, penalized_<tier>_<model>.json
    exoplan evaluate       -> report_<tier>_<model>.json, results.csv
    exoplan ablate         -> ablate.csv
    exoplan verify-theory  -> theory/<check>.json, theory/summary.json

Exit codes: 0 success, 1 check failure, 2 usage error, 3 artifact error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ._io import atomic_write_text
from .datagen import (
    TIERS,
    action_entropy,
    collect,
    default_policy_count,
    distinct_deterministic_policies,
    load_dataset,
    make_behavior_policies,
    read_dataset_header,
    save_dataset,
    true_endo_factor,
)
from .estimators import JointModelLearner, PenalizedPlanner, SeparatedModelLearner
from .exbmdp import (
    DRIFT_PROFILES,
    PolicyTable,
    exo_chain,
    latent_return,
    load_spec,
    random_spec,
    save_spec,
    validate,
)
from .exceptions import (
    ConfigurationError,
    DatasetParseError,
    FingerprintMismatchError,
    FormatVersionError,
    MissingArtifactError,
)
from .penalize import ESTIMATORS, evaluate_policy, latent_policy, mean_uncertainty, normalization_bounds, save_penalized
from .sepmodel import (
    SCHEDULE_MODES,
    SamplingSchedule,
    load_model,
    model_from_dict,
    model_to_dict,
    next_batch,
    save_model,
)
from .theory import DEFAULT_COUNTS, SUITES, run_suite

log = logging.getLogger("exoplan")

ARTIFACT_FORMAT_VERSION = 1
CSV_SCHEMA_VERSION = 1
EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ARTIFACT = 0, 1, 2, 3
COLLECT_TIERS = TIERS + ("deterministic",)
MODELS = ("separated", "joint")
ENTROPY_EPOCHS = 30

# stream tags for per-stage seeds
_ENV, _POLICY, _COLLECT, _TRAIN, _ENTROPY, _SWAP = 11, 12, 13, 14, 15, 16


@dataclass
class ExperimentConfig:
    """Every knob of the harness; flags and config files map onto these fields."""

    seed: int = 0
    n_endo: int = 6
    n_exo: int = 4
    n_act: int = 3
    drift: str = "fast_random_walk"
    discount: float = 0.9
    tier: str = "random"
    n_traj: int = 40
    horizon: int = 100
    schedule: str = "conservative"
    model: str = "separated"
    K: int = 5
    alpha: float = 0.1
    lam: float = 1.0
    estimator: str = "md"
    epochs: int | None = None
    batch_size: int = 4
    chunk_len: int = 25
    out_dir: str = "runs"
    jobs: int = 1
    # ablation grid
    ablate_seeds: int = 4
    ablate_tiers: tuple = ("random",)
    ablate_schedules: tuple = ("conservative", "random")
    ablate_models: tuple = ("separated", "joint")
    ablate_estimators: tuple = ("md",)
    ablate_lams: tuple = (1.0,)
    # theory checks
    suites: tuple = SUITES
    theory_count: int | None = None
    corrupt: bool = False

    # fields that do not change any artifact's content
    _UNHASHED = ("out_dir", "jobs")

    def __post_init__(self):
        for name in ("ablate_tiers", "ablate_schedules", "ablate_models", "ablate_estimators", "ablate_lams", "suites"):
            value = getattr(self, name)
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            setattr(self, name, tuple(value))
        self.ablate_lams = tuple(float(v) for v in self.ablate_lams)

    def validate(self) -> "ExperimentConfig":
        def positive(name, minimum=1):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < minimum:
                raise ConfigurationError(f"{name} must be an integer >= {minimum}, got {value!r}")

        for name in ("n_endo", "n_exo", "n_act", "n_traj", "K", "batch_size", "chunk_len", "jobs", "ablate_seeds"):
            positive(name)
        positive("horizon", 2)
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        for name in ("epochs", "theory_count"):
            if getattr(self, name) is not None:
                positive(name)
        if not 0.0 <= self.discount < 1.0:
            raise ConfigurationError(f"discount must lie in [0, 1), got {self.discount}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        for lam in (self.lam,) + self.ablate_lams:
            if not (np.isfinite(lam) and lam >= 0):
                raise ConfigurationError(f"lam must be >= 0, got {lam}")
        choices = {
            "drift": (self.drift, DRIFT_PROFILES),
            "tier": (self.tier, COLLECT_TIERS + ("all",)),
            "schedule": (self.schedule, SCHEDULE_MODES),
            "model": (self.model, MODELS),
            "estimator": (self.estimator, ESTIMATORS),
        }
        for name, (value, allowed) in choices.items():
            if value not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {value!r}")
        grids = {
            "ablate_tiers": COLLECT_TIERS,
            "ablate_schedules": SCHEDULE_MODES,
            "ablate_models": MODELS,
            "ablate_estimators": ESTIMATORS,
            "suites": SUITES,
        }
        for name, allowed in grids.items():
            bad = [v for v in getattr(self, name) if v not in allowed]
            if bad:
                raise ConfigurationError(f"{name}: unknown entries {bad}; allowed {allowed}")
        return self

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    def config_hash(self) -> str:
        obj = {k: v for k, v in self.to_dict().items() if k not in self._UNHASHED}
        return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def meta(self, stage: str) -> dict:
        return {
            "format_version": ARTIFACT_FORMAT_VERSION,
            "config_hash": self.config_hash(),
            "seed": self.seed,
            "stage": stage,
        }


def load_config_file(path) -> dict:
    """Read a YAML or JSON mapping of config fields."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"config file {path}: unknown fields {unknown}")
    return data


def stage_seed(seed: int, *tags) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# artifact paths and fingerprints

def _out(cfg) -> Path:
    return Path(cfg.out_dir)


def env_path(cfg):
    return _out(cfg) / "env.json"


def dataset_path(cfg, tier):
    return _out(cfg) / f"dataset_{tier}.jsonl"


def model_path(cfg, tier, model):
    return _out(cfg) / f"model_{tier}_{model}.json"


def policy_path(cfg, tier, model):
    return _out(cfg) / f"policy_{tier}_{model}.json"


def report_path(cfg, tier, model):
    return _out(cfg) / f"report_{tier}_{model}.json"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `exoplan {stage}` first")
    return path


def model_fingerprint(model) -> str:
    return hashlib.sha256(json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _check_fp(what, expected, found):
    if expected != found:
        raise FingerprintMismatchError(f"{what}: expected {expected}, found {found}", expected=expected, found=found)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        return obj if np.isfinite(obj) else repr(obj)
    return obj


def write_json(path, obj):
    atomic_write_text(path, json.dumps(_jsonable(obj), sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# stages

def cmd_generate_env(cfg: ExperimentConfig) -> Path:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _ENV]))
    spec = random_spec(cfg.n_endo, cfg.n_exo, cfg.n_act, rng, drift=cfg.drift, discount=cfg.discount)
    report = validate(spec)
    if not report:
        raise ConfigurationError(f"generated spec is invalid: {report.violations}")
    path = env_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_spec(spec, path, extra={"run": cfg.meta("generate-env"), "drift": cfg.drift})
    return path


def _tiers(cfg):
    return TIERS if cfg.tier == "all" else (cfg.tier,)


def _behavior(spec, tier, n_traj, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, _POLICY, COLLECT_TIERS.index(tier)]))
    if tier == "deterministic":
        return distinct_deterministic_policies(spec, min(n_traj, spec.n_act ** spec.n_endo), rng)
    return make_behavior_policies(spec, tier, default_policy_count(tier, n_traj), rng)


def collect_tier(spec, tier, n_traj, horizon, seed):
    policies = _behavior(spec, tier, n_traj, seed)
    return collect(spec, policies, n_traj, horizon, stage_seed(seed, _COLLECT, COLLECT_TIERS.index(tier)))


def cmd_collect(cfg: ExperimentConfig) -> list:
    spec = load_spec(_require(env_path(cfg), "generate-env"))
    paths = []
    for tier in _tiers(cfg):
        ds = collect_tier(spec, tier, cfg.n_traj, cfg.horizon, cfg.seed)
        path = dataset_path(cfg, tier)
        save_dataset(ds, path, extra_header={"run": cfg.meta("collect")})
        paths.append(path)
    return paths


def schedule_for(cfg, ds, mode=None):
    return SamplingSchedule(mode or cfg.schedule, len(ds), batch_size=cfg.batch_size, chunk_len=cfg.chunk_len)


def entropy_series(ds, schedule: SamplingSchedule, seed, epochs=ENTROPY_EPOCHS) -> list:
    """Batch action entropy over the first ``min(n, epochs)`` epochs of ``schedule``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _ENTROPY]))
    return [action_entropy(next_batch(schedule, ds, rng)) for _ in range(min(schedule.n, epochs))]


def fit_model(cfg, ds, kind):
    seed = stage_seed(cfg.seed, _TRAIN)
    if kind == "separated":
        learner = SeparatedModelLearner(cfg.schedule, cfg.K, cfg.alpha, cfg.epochs, cfg.batch_size,
                                        cfg.chunk_len, random_state=seed)
    else:
        learner = JointModelLearner(cfg.K, cfg.alpha, random_state=seed)
    return learner.fit(ds).model_


def _uncertainty_summary(model, ds):
    return {est: mean_uncertainty(model, ds, est) for est in ESTIMATORS}


def cmd_train_model(cfg: ExperimentConfig) -> list:
    """Fit on the dataset alone; the environment file is never opened here."""
    paths = []
    for tier in _tiers(cfg):
        ds = load_dataset(_require(dataset_path(cfg, tier), "collect"))
        model = fit_model(cfg, ds, cfg.model)
        other = fit_model(cfg, ds, "joint" if cfg.model == "separated" else "separated")
        diagnostics = {
            "entropy_series": entropy_series(ds, schedule_for(cfg, ds), cfg.seed),
            "uncertainty": {cfg.model: _uncertainty_summary(model, ds), other.kind: _uncertainty_summary(other, ds)},
        }
        path = model_path(cfg, tier, cfg.model)
        save_model(model, path, extra=_jsonable({"run": cfg.meta("train-model"), "diagnostics": diagnostics}))
        paths.append(path)
    return paths


def _load_model_file(path):
    obj = json.loads(Path(path).read_text())
    return model_from_dict(obj), obj


def cmd_plan(cfg: ExperimentConfig) -> list:
    """Plan on the penalized learned model; the environment file is never opened here."""
    paths = []
    for tier in _tiers(cfg):
        model = load_model(_require(model_path(cfg, tier, cfg.model), "train-model"))
        planner = PenalizedPlanner(cfg.estimator, cfg.lam, cfg.discount).fit(model)
        stem = f"{tier}_{cfg.model}"
        pen = planner.penalized_
        save_penalized(pen, _out(cfg) / f"penalized_{stem}.json")
        obj = {
            "kind": "planned_policy",
            "run": cfg.meta("plan"),
            "model_kind": model.kind,
            "model_fingerprint": model_fingerprint(model),
            "dataset_fingerprint": model.dataset_fingerprint,
            "estimator": cfg.estimator,
            "lam": repr(float(cfg.lam)),
            "discount": repr(float(cfg.discount)),
            "probs": [[repr(float(p)) for p in row] for row in planner.policy_.probs],
        }
        path = policy_path(cfg, tier, cfg.model)
        write_json(path, obj)
        paths.append(path)
    return paths


def _load_policy(path) -> tuple:
    obj = json.loads(Path(path).read_text())
    if obj.get("run", {}).get("format_version") != ARTIFACT_FORMAT_VERSION:
        raise FormatVersionError(f"{path}: unsupported policy format")
    return PolicyTable(np.array([[float(p) for p in row] for row in obj["probs"]])), obj


def tier_bounds(cfg, spec) -> tuple:
    stats = []
    for tier in TIERS:
        header = read_dataset_header(_require(dataset_path(cfg, tier), "collect --tier all"))
        _check_fp(f"dataset_{tier} environment", spec.fingerprint(), header["env_fingerprint"])
        stats.append({k: float(v) for k, v in header["stats"].items()})
    return normalization_bounds(stats)


def swap_returns(spec, latent, seed) -> tuple:
    """Exact return of a latent-pair policy before and after replacing the exogenous chain."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SWAP]))
    swapped = spec.with_exo(exo_chain(spec.n_exo, "fast_random_walk", rng))
    return latent_return(spec, latent), latent_return(swapped, latent)


RESULT_COLUMNS = (
    "tier", "model", "schedule", "estimator", "lam", "seed", "config_hash",
    "return", "normalized", "partition_recovered",
)


def evaluate_run(spec, ds, model, policy, bounds, seed) -> dict:
    latent = latent_policy(spec, ds.decoder, model, policy)
    ret, norm = evaluate_policy(spec, latent, bounds)
    before, after = swap_returns(spec, latent, seed)
    recovered = None
    if model.partition is not None:
        recovered = model.partition.endo_factor == true_endo_factor(spec, ds.decoder)
    return {
        "return": ret,
        "normalized": norm,
        "partition_recovered": recovered,
        "swap_return_before": before,
        "swap_return_after": after,
    }


def cmd_evaluate(cfg: ExperimentConfig) -> list:
    spec = load_spec(_require(env_path(cfg), "generate-env"))
    bounds = tier_bounds(cfg, spec)
    paths = []
    for tier in _tiers(cfg):
        ds = load_dataset(_require(dataset_path(cfg, tier), "collect"), spec=spec)
        model, model_obj = _load_model_file(_require(model_path(cfg, tier, cfg.model), "train-model"))
        _check_fp(f"model_{tier}_{cfg.model} training data", ds.fingerprint(), model.dataset_fingerprint)
        policy, policy_obj = _load_policy(_require(policy_path(cfg, tier, cfg.model), "plan"))
        _check_fp(f"policy_{tier}_{cfg.model} model", model_fingerprint(model), policy_obj["model_fingerprint"])
        result = evaluate_run(spec, ds, model, policy, bounds, cfg.seed)
        report = {
            "kind": "run_report",
            "run": cfg.meta("evaluate"),
            "tier": tier,
            "model": cfg.model,
            "normalization_bounds": list(bounds),
            "returns": {"raw": result["return"], "normalized": result["normalized"]},
            "distractor_swap": {"before": result["swap_return_before"], "after": result["swap_return_after"]},
            "partition_recovered": result["partition_recovered"],
            "action_entropy_series": model_obj.get("diagnostics", {}).get("entropy_series"),
            "uncertainty": model_obj.get("diagnostics", {}).get("uncertainty"),
        }
        path = report_path(cfg, tier, cfg.model)
        write_json(path, report)
        paths.append(path)
        _upsert_result(cfg, {
            "tier": tier, "model": cfg.model, "schedule": cfg.schedule, "estimator": cfg.estimator,
            "lam": repr(float(cfg.lam)), "seed": cfg.seed, "config_hash": cfg.config_hash(),
            "return": repr(result["return"]), "normalized": repr(result["normalized"]),
            "partition_recovered": "" if result["partition_recovered"] is None else int(result["partition_recovered"]),
        })
    return paths


def _csv_text(columns, rows, comment) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in columns})
    return buf.getvalue()


def read_csv_rows(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _upsert_result(cfg, row):
    """Add ``row`` to results.csv, replacing any earlier row with the same key."""
    path = _out(cfg) / "results.csv"
    key = ("tier", "model", "config_hash")
    rows = read_csv_rows(path) if path.exists() else []
    rows = [r for r in rows if tuple(r[k] for k in key) != tuple(str(row[k]) for k in key)]
    rows.append({k: str(v) for k, v in row.items()})
    rows.sort(key=lambda r: tuple(r[k] for k in key))
    atomic_write_text(path, _csv_text(RESULT_COLUMNS, rows, f"exoplan results schema_version={CSV_SCHEMA_VERSION}"))


# ---------------------------------------------------------------------------
# ablation grid

ABLATE_COLUMNS = (
    "row_type", "tier", "model", "schedule", "estimator", "lam", "seed", "n", "status",
    "return", "normalized", "partition_recovered", "early_entropy",
    "uncertainty_md", "uncertainty_vlp", "swap_delta", "error",
)
_NUMERIC = ("return", "normalized", "partition_recovered", "early_entropy",
            "uncertainty_md", "uncertainty_vlp", "swap_delta")


def _ablate_seed(cfg: ExperimentConfig, run_seed: int) -> list:
    """All grid cells for one seed; failures are recorded per row."""
    rows = []
    local = dataclasses.replace(cfg, seed=run_seed)
    rng = np.random.default_rng(np.random.SeedSequence([run_seed, _ENV]))
    spec = random_spec(cfg.n_endo, cfg.n_exo, cfg.n_act, rng, drift=cfg.drift, discount=cfg.discount)
    datasets = {}
    for tier in dict.fromkeys(TIERS + cfg.ablate_tiers):
        datasets[tier] = collect_tier(spec, tier, cfg.n_traj, cfg.horizon, run_seed)
    bounds = normalization_bounds([datasets[t].stats for t in TIERS])
    for tier in cfg.ablate_tiers:
        ds = datasets[tier]
        for model_kind in cfg.ablate_models:
            for schedule in cfg.ablate_schedules:
                cell = dataclasses.replace(local, schedule=schedule, model=model_kind)
                base = {"row_type": "data", "tier": tier, "model": model_kind, "schedule": schedule, "seed": run_seed}
                try:
                    model = fit_model(cell, ds, model_kind)
                    unc = _uncertainty_summary(model, ds)
                    early = float(np.mean(entropy_series(ds, schedule_for(cell, ds), run_seed)))
                except Exception as exc:  # noqa: BLE001 - recorded in the row
                    for est in cfg.ablate_estimators:
                        for lam in cfg.ablate_lams:
                            rows.append(dict(base, estimator=est, lam=lam, status="error", error=f"{type(exc).__name__}: {exc}"))
                    continue
                for est in cfg.ablate_estimators:
                    for lam in cfg.ablate_lams:
                        row = dict(base, estimator=est, lam=lam, early_entropy=early,
                                   uncertainty_md=unc["md"], uncertainty_vlp=unc["vlp"])
                        try:
                            policy = PenalizedPlanner(est, lam, cfg.discount).fit(model).policy_
                            res = evaluate_run(spec, ds, model, policy, bounds, run_seed)
                            rec = res["partition_recovered"]
                            row.update(
                                status="ok", normalized=res["normalized"], **{"return": res["return"]},
                                partition_recovered="" if rec is None else int(rec),
                                swap_delta=abs(res["swap_return_after"] - res["swap_return_before"]),
                            )
                        except Exception as exc:  # noqa: BLE001 - recorded in the row
                            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
                        rows.append(row)
    return rows


def _aggregate(rows) -> list:
    groups = {}
    for row in rows:
        if row["status"] == "ok":
            key = (row["tier"], row["model"], row["schedule"], row["estimator"], row["lam"])
            groups.setdefault(key, []).append(row)
    out = []
    for key, members in groups.items():
        tier, model, schedule, est, lam = key
        for kind, fn in (("mean", np.mean), ("std", np.std)):
            agg = {"row_type": kind, "tier": tier, "model": model, "schedule": schedule, "estimator": est,
                   "lam": lam, "n": len(members), "status": "ok"}
            for col in _NUMERIC:
                vals = [float(m[col]) for m in members if m.get(col, "") != ""]
                if vals:
                    agg[col] = float(fn(vals))
            out.append(agg)
    return out


def _fmt(row):
    return {k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()}


def cmd_ablate(cfg: ExperimentConfig) -> Path:
    from joblib import Parallel, delayed

    grid = (cfg.ablate_tiers, cfg.ablate_models, cfg.ablate_schedules, cfg.ablate_estimators, cfg.ablate_lams)
    if not all(grid):
        raise ConfigurationError("ablation grid is empty")
    seeds = [cfg.seed + i for i in range(cfg.ablate_seeds)]
    per_seed = Parallel(n_jobs=cfg.jobs)(delayed(_ablate_seed)(cfg, s) for s in seeds)
    rows = [row for chunk in per_seed for row in chunk]
    rows += _aggregate(rows)
    meta = cfg.meta("ablate")
    comment = (f"exoplan ablate schema_version={CSV_SCHEMA_VERSION} format_version={meta['format_version']} "
               f"config_hash={meta['config_hash']} seed={meta['seed']}")
    path = _out(cfg) / "ablate.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, _csv_text(ABLATE_COLUMNS, [_fmt(r) for r in rows], comment))
    return path


# ---------------------------------------------------------------------------
# theory checks

def cmd_verify_theory(cfg: ExperimentConfig) -> tuple:
    """Run the selected checks; returns ``(summary_path, all_passed)``."""
    if not cfg.suites:
        raise ConfigurationError("no theory checks selected")
    outdir = _out(cfg) / "theory"
    outdir.mkdir(parents=True, exist_ok=True)
    summary = {"kind": "theory_summary", "run": cfg.meta("verify-theory"), "checks": {}}
    for name in cfg.suites:
        count = cfg.theory_count or DEFAULT_COUNTS[name]
        corrupt = cfg.corrupt and name == "performance_bound"
        reports = [r.to_dict() for r in run_suite(name, count, cfg.seed, corrupt_zero_penalty=corrupt)]
        n_pass = sum(r["passed"] for r in reports)
        write_json(outdir / f"{name}.json",
                   {"kind": "theory_reports", "check": name, "run": cfg.meta("verify-theory"), "reports": reports})
        summary["checks"][name] = {"count": count, "passed": n_pass, "failed": count - n_pass,
                                   "corrupted": corrupt, "ok": n_pass == count}
    summary["all_passed"] = all(c["ok"] for c in summary["checks"].values())
    path = outdir / "summary.json"
    write_json(path, summary)
    return path, summary["all_passed"]


# ---------------------------------------------------------------------------
# argument parsing

COMMANDS = {
    "generate-env": cmd_generate_env,
    "collect": cmd_collect,
    "train-model": cmd_train_model,
    "plan": cmd_plan,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "verify-theory": cmd_verify_theory,
}


def _flag_type(field):
    default = field.default
    if isinstance(default, bool):
        return None
    if isinstance(default, tuple):
        return str
    if isinstance(default, float):
        return float
    if isinstance(default, int) or field.name in ("epochs", "theory_count"):
        return int
    return str


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file of config fields; flags override it")
    common.add_argument("-v", "--verbose", action="store_true")
    for field in dataclasses.fields(ExperimentConfig):
        flag = "--" + field.name.replace("_", "-")
        if isinstance(field.default, bool):
            common.add_argument(flag, dest=field.name, action="store_true", default=None)
        else:
            common.add_argument(flag, dest=field.name, type=_flag_type(field), default=None, metavar=field.name.upper())
    parser = argparse.ArgumentParser(prog="exoplan", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).split("\n")[0])
    return parser


def resolve_config(args) -> ExperimentConfig:
    values = load_config_file(args.config) if args.config else {}
    for field in dataclasses.fields(ExperimentConfig):
        flag = getattr(args, field.name, None)
        if flag is not None:
            values[field.name] = flag
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr)
    log.setLevel(level)
    start = time.perf_counter()
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg)
    except ConfigurationError as exc:
        log.error("usage error: %s", exc)
        return EXIT_USAGE
    except (MissingArtifactError, FingerprintMismatchError, FormatVersionError, DatasetParseError) as exc:
        log.error("artifact error: %s", exc)
        return EXIT_ARTIFACT
    elapsed = time.perf_counter() - start
    if args.command == "verify-theory":
        path, ok = result
        log.info("%s: %s (%.2fs)", args.command, "all checks passed" if ok else "CHECK FAILURE", elapsed)
        log.info("summary: %s", path)
        return EXIT_OK if ok else EXIT_CHECK
    for path in result if isinstance(result, list) else [result]:
        log.info("wrote %s", path)
    log.info("%s finished in %.2fs", args.command, elapsed)
    return EXIT_OK


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
