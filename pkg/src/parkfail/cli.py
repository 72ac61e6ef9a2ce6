"""``parkfail`` command line: one JSON run config drives every stage.

Stages read and write only under the run's output directory::

    baseline/      episodes of the original environment
    datasets/<d>/  failure scenarios and both training sets per failure definition
    models/<d>/    trained maneuver models and loss histories
    envs/<d>/      environment specs for the two intelligent environments
    evaluation/    failure-frame ratios per environment
    retraining/    refit surrogates and their comparison
    report/        the cross-environment comparison table
    manifest.json  sha256 of every file above

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import traceback
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from . import evaluation
from .envgen import INTELLIGENT_A, INTELLIGENT_B, ORIGINAL, EnvironmentSpec
from .network import GarageNetwork, NetworkError, load_network, resolve_map
from .perception import DEFINITIONS, SensorConfig, SurrogateDetector, SurrogateParams, load_params
from .policy import PolicyModel, TrainConfig, write_history
from .recorder import (ALL_STATES, CRITICAL_ONLY, CriticalStateRule, Episode, build_dataset,
                       config_hash, dump_episode, extract_failure_scenarios, load_episode, load_training_set,
                       mark_critical, save_training_set)
from .sim import SimConfig

log = logging.getLogger("parkfail")

CONFIG_SCHEMA = "parkfail.runconfig/1"
MANIFEST_SCHEMA = "parkfail.manifest/1"
OUTPUT_ROOT_ENV = "PARKFAIL_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
FAILED_MARKER = "FAILED"
ERROR_RECORD = "error.json"
MODES = (ALL_STATES, CRITICAL_ONLY)
MODE_ENV = {ALL_STATES: INTELLIGENT_A, CRITICAL_ONLY: INTELLIGENT_B}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# --- run config --------------------------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    seeds: tuple[int, ...]
    duration: float  # scenario seconds per seed

    @classmethod
    def from_dict(cls, d: dict, name: str) -> "Phase":
        try:
            seeds = tuple(int(s) for s in d["seeds"])
            duration = float(d["duration"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"{name}: needs 'seeds' (list of ints) and 'duration' (seconds)") from e
        if not seeds:
            raise ConfigError(f"{name}: at least one seed is required")
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"{name}: duplicate seeds")
        if not duration > 0:
            raise ConfigError(f"{name}: duration must be > 0")
        return cls(seeds, duration)

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "duration": self.duration}


@dataclass(frozen=True)
class RetrainSettings:
    enabled: bool = False
    definition: str = "a"
    phase: Phase = Phase((0,), 950.0)

    def to_dict(self) -> dict:
        return {"enabled": self.enabled, "definition": self.definition, **self.phase.to_dict()}


@dataclass(frozen=True)
class RunConfig:
    network: str
    sim: SimConfig
    sensor: SensorConfig
    surrogate: str
    definitions: tuple[str, ...]
    critical: CriticalStateRule
    train: TrainConfig
    env_radius: float
    check_visibility: bool
    output: str
    baseline: Phase
    evaluation: Phase
    retraining: RetrainSettings
    long_format: bool = False
    base_dir: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        return {
            "schema": CONFIG_SCHEMA,
            "network": self.network,
            "sim": self.sim.to_dict(),
            "sensor": {"range": self.sensor.range, "fov": self.sensor.fov,
                       "mount_offset": self.sensor.mount_offset},
            "surrogate": self.surrogate,
            "definitions": list(self.definitions),
            "critical": {"radius": self.critical.radius, "lookback": self.critical.lookback},
            "train": self.train.to_dict(),
            "environment": {"radius": self.env_radius, "check_visibility": self.check_visibility},
            "output": self.output,
            "baseline": self.baseline.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "retraining": self.retraining.to_dict(),
            "long_format": self.long_format,
        }

    @property
    def hash(self) -> str:
        # the output location does not change results, so it stays out of the hash
        d = self.to_dict()
        d.pop("output")
        return config_hash(d)

    def network_path(self) -> Path:
        return _resolve_input(self.network, self.base_dir, resolve_map)

    def surrogate_path(self) -> Path | None:
        if self.surrogate == "default":
            return None
        return _resolve_input(self.surrogate, self.base_dir, Path)

    def output_dir(self) -> Path:
        out = Path(self.output)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        return out


def _resolve_input(value: str, base_dir: Path, fallback: Callable[[str], Path]) -> Path:
    p = Path(value)
    if not p.is_absolute() and (base_dir / p).exists():
        return base_dir / p
    try:
        r = Path(fallback(value))
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot find {value!r}: {e}") from e
    if not r.exists():
        raise ConfigError(f"file not found: {value}")
    return r


def _section(d: dict, key: str) -> dict:
    v = d.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError(f"'{key}' must be an object")
    return v


def run_config_from_dict(d: dict, base_dir: Path = Path(".")) -> RunConfig:
    if d.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
        raise ConfigError(f"unsupported config schema {d.get('schema')!r}")
    known = {"schema", "network", "sim", "sensor", "surrogate", "definitions", "critical", "train", "environment",
             "output", "baseline", "evaluation", "retraining", "long_format"}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        sim = SimConfig.from_dict(_section(d, "sim"))
        sensor = SensorConfig(**_section(d, "sensor"))
        critical = CriticalStateRule(**_section(d, "critical"))
        train = TrainConfig(**_section(d, "train"))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    defs = tuple(d.get("definitions", list(DEFINITIONS)))
    bad = [x for x in defs if x not in DEFINITIONS]
    if bad or not defs:
        raise ConfigError(f"definitions must be a nonempty subset of {sorted(DEFINITIONS)}, got {list(defs)}")
    env = _section(d, "environment")
    radius = float(env.get("radius", 20.0))
    if not radius > 0:
        raise ConfigError("environment.radius must be > 0")
    rt = _section(d, "retraining")
    retraining = RetrainSettings()
    if rt:
        if rt.get("definition", "a") not in DEFINITIONS:
            raise ConfigError(f"retraining.definition must be one of {sorted(DEFINITIONS)}")
        retraining = RetrainSettings(bool(rt.get("enabled", True)), rt.get("definition", "a"),
                                     Phase.from_dict(rt, "retraining"))
    if "network" not in d or "output" not in d:
        raise ConfigError("config needs 'network' and 'output'")
    cfg = RunConfig(
        network=str(d["network"]), sim=sim, sensor=sensor, surrogate=str(d.get("surrogate", "default")),
        definitions=defs, critical=critical, train=train, env_radius=radius,
        check_visibility=bool(env.get("check_visibility", True)), output=str(d["output"]),
        baseline=Phase.from_dict(_section(d, "baseline"), "baseline"),
        evaluation=Phase.from_dict(_section(d, "evaluation"), "evaluation"),
        retraining=retraining, long_format=bool(d.get("long_format", False)), base_dir=base_dir,
    )
    cfg.network_path()
    cfg.surrogate_path()
    return cfg


def bundled_configs() -> list[str]:
    folder = resources.files("parkfail") / "data" / "configs"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def _config_source(name_or_path: str) -> tuple[dict, Path]:
    p = Path(name_or_path)
    if not p.exists() and name_or_path in bundled_configs():
        text = (resources.files("parkfail") / "data" / "configs" / f"{name_or_path}.json").read_text(encoding="utf-8")
        return json.loads(text), Path(".")
    try:
        return json.loads(p.read_text(encoding="utf-8")), p.parent
    except FileNotFoundError as e:
        raise ConfigError(f"config not found: {name_or_path} (bundled: {', '.join(bundled_configs())})") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{name_or_path}: invalid JSON: {e}") from e


def apply_overrides(d: dict, assignments: Sequence[str]) -> dict:
    """``key.sub=value`` assignments; only existing or new scalar leaves may be set."""
    d = json.loads(json.dumps(d))
    for a in assignments:
        if "=" not in a:
            raise ConfigError(f"override {a!r} is not key=value")
        key, raw = a.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(value, (dict, list)):
            raise ConfigError(f"override {key}: only scalar values may be set from the command line")
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not an object")
        if isinstance(node.get(parts[-1]), (dict, list)):
            raise ConfigError(f"override {key}: target is not a scalar")
        node[parts[-1]] = value
    return d


def load_run_config(name_or_path: str, overrides: Sequence[str] = (), output: str | None = None) -> RunConfig:
    d, base = _config_source(name_or_path)
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    d = apply_overrides(d, overrides)
    if output is not None:
        d["output"] = output
    return run_config_from_dict(d, base)


# --- run context and file helpers ----------------------------------------------------------------


@dataclass
class Context:
    cfg: RunConfig
    net: GarageNetwork
    params: SurrogateParams
    out: Path

    @property
    def detector(self) -> SurrogateDetector:
        return SurrogateDetector(self.params, self.cfg.sensor)

    @property
    def tag(self) -> str:
        return f"config_hash={self.cfg.hash}"

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, rel: str, doc: dict, schema: str) -> Path:
        body = {"schema": schema, "config_hash": self.cfg.hash, **doc}
        p = self.path(rel)
        p.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return p

    def write_csv(self, rel: str, header: Sequence[str], rows: Sequence[Sequence], schema: str) -> Path:
        p = self.path(rel)
        with open(p, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {schema} {self.tag}\n")
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        return p


def make_context(cfg: RunConfig) -> Context:
    try:
        net = load_network(cfg.network_path())
    except NetworkError as e:
        raise ConfigError(f"invalid network: {e}") from e
    sp = cfg.surrogate_path()
    try:
        params = load_params(sp if sp is not None else "default")
    except (ValueError, KeyError) as e:
        raise ConfigError(f"invalid surrogate: {e}") from e
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return Context(cfg, net, params, out)


def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_opt(x: float | None) -> str:
    return "" if x is None else _fmt(x)


def _amp_text(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.2f}"


# --- stages ------------------------------------------------------------------------------------------


def stage_simulate(ctx: Context, env: EnvironmentSpec | None = None, subdir: str = "baseline",
                   phase: Phase | None = None) -> evaluation.EvalReport:
    cfg = ctx.cfg
    env = env or EnvironmentSpec(ORIGINAL)
    phase = phase or cfg.baseline
    episodes: list[Episode] = []
    rep = evaluation.failure_ratio(ctx.net, cfg.sim, ctx.detector, env, phase.duration, phase.seeds,
                                   list(DEFINITIONS), keep=episodes, label=env.kind)
    for ep in episodes:
        ep.meta = {"environment": env.kind, "run_config": cfg.hash}
        dump_episode(ep, ctx.path(subdir, "episodes", f"{ep.id}.jsonl"))
    evaluation.write_reports([rep], ctx.out / subdir, stem="summary",
                             comment=f"{evaluation.REPORT_SCHEMA} {ctx.tag}")
    log.info("%s: %d episodes, ratios %s", subdir, len(episodes),
             {k: round(v.ratio, 5) for k, v in rep.stats.items()})
    return rep


def _baseline_episodes(ctx: Context) -> list[Episode]:
    folder = ctx.out / "baseline" / "episodes"
    files = sorted(folder.glob("*.jsonl")) if folder.exists() else []
    if not files:
        raise StageError("extract", f"no baseline episodes under {folder}; run 'simulate' first")
    eps = [load_episode(f) for f in files]
    order = {s: i for i, s in enumerate(ctx.cfg.baseline.seeds)}
    return sorted(eps, key=lambda e: order.get(e.seed, len(order) + e.seed))


def stage_extract(ctx: Context, defs: Sequence[str]) -> dict[str, dict]:
    eps = _baseline_episodes(ctx)
    summary = {}
    for d in defs:
        scenarios = [mark_critical(s, ctx.cfg.critical, ctx.net)
                     for ep in eps for s in extract_failure_scenarios(ep, DEFINITIONS[d])]
        sets = {m: build_dataset(scenarios, m, ctx.net, ctx.cfg.sim.v_max) for m in MODES}
        for m, samples in sets.items():
            save_training_set(samples, ctx.path("datasets", d, f"{m}.jsonl"),
                              {"definition": d, "mode": m, "config_hash": ctx.cfg.hash})
        rows = [[s.id, s.episode.id, s.failure_frame, s.start, len(s.critical), " ".join(map(str, s.critical_bvs))]
                for s in scenarios]
        ctx.write_csv(f"datasets/{d}/scenarios.csv",
                      ["scenario", "episode", "failure_frame", "window_start", "critical_states", "critical_bvs"],
                      rows, "parkfail.scenarios/1")
        summary[d] = {
            "definition": str(DEFINITIONS[d]),
            "scenarios": len(scenarios),
            "critical_states": sum(len(s.critical) for s in scenarios),
            "samples": {m: len(v) for m, v in sets.items()},
        }
        ctx.write_json(f"datasets/{d}/summary.json", summary[d], "parkfail.datasets/1")
        log.info("extract %s: %d scenarios, samples %s", d, len(scenarios), summary[d]["samples"])
    return summary


def stage_train(ctx: Context, defs: Sequence[str]) -> dict[str, dict]:
    out = {}
    for d in defs:
        path = ctx.out / "datasets" / d / f"{ALL_STATES}.jsonl"
        if not path.exists():
            raise StageError("train", f"missing {path}; run 'extract' first")
        samples, _ = load_training_set(path)
        n_scen = len({s.scenario for s in samples})
        if not samples:
            log.warning("train %s: no failure scenarios, models stay at the uniform initialization", d)
        rep = evaluation.train_modes(samples, PolicyModel.zeros(ctx.net), ctx.cfg.train)
        curves = {CRITICAL_ONLY: (rep.critical_train, rep.critical_val), ALL_STATES: (rep.all_train, rep.all_val)}
        for m in MODES:
            model = rep.models[m]
            doc = {**model.to_dict(), "config_hash": ctx.cfg.hash, "definition": d, "mode": m}
            p = ctx.path("models", d, f"{m}.json")
            p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
            write_history(ctx.path("models", d, f"history_{m}.csv"), *curves[m],
                          comment=f"parkfail.history/1 {ctx.tag}")
        out[d] = {
            "scenarios": n_scen,
            "comparable": n_scen >= 50,
            "n_train": rep.n_train,
            "n_val": rep.n_val,
            "final_val_loss": {CRITICAL_ONLY: _last(rep.critical_val), ALL_STATES: _last(rep.all_val)},
            "epoch_within_5pct_of_min": {CRITICAL_ONLY: rep.critical_epoch_near_min,
                                         ALL_STATES: rep.all_epoch_near_min},
        }
        ctx.write_json(f"models/{d}/curves.json", out[d], "parkfail.curves/1")
        if ctx.cfg.long_format:
            rows = [[m, e, _fmt(v)] for m in MODES for e, v in enumerate(curves[m][1], start=1)]
            ctx.write_csv(f"models/{d}/val_loss_long.csv", ["mode", "epoch", "val_loss"], rows,
                          "parkfail.history/1")
        log.info("train %s: %s", d, out[d]["final_val_loss"])
    return out


def _last(xs: Sequence[float]) -> float | None:
    return None if not xs or math.isnan(xs[-1]) else float(xs[-1])


def stage_gen_env(ctx: Context, defs: Sequence[str]) -> None:
    schema = "parkfail.environment/1"
    ctx.write_json("envs/original.json", EnvironmentSpec(ORIGINAL, radius=ctx.cfg.env_radius).to_dict(), schema)
    for d in defs:
        for m in MODES:
            mp = ctx.out / "models" / d / f"{m}.json"
            if not mp.exists():
                raise StageError("gen-env", f"missing {mp}; run 'train' first")
            model = PolicyModel.load(mp)
            model.check_network(ctx.net)
            spec = EnvironmentSpec(MODE_ENV[m], model, ctx.cfg.env_radius, ctx.cfg.check_visibility,
                                   model_path=f"../../models/{d}/{m}.json")
            ctx.write_json(f"envs/{d}/{MODE_ENV[m]}.json", spec.to_dict(), schema)


def stage_evaluate(ctx: Context, defs: Sequence[str]) -> dict[str, list[evaluation.EvalReport]]:
    phase = ctx.cfg.evaluation
    names = list(DEFINITIONS)
    tag = f"{evaluation.REPORT_SCHEMA} {ctx.tag}"
    original = evaluation.failure_ratio(ctx.net, ctx.cfg.sim, ctx.detector, EnvironmentSpec(ORIGINAL),
                                        phase.duration, phase.seeds, names, label=ORIGINAL)
    evaluation.write_reports([original], ctx.out / "evaluation", stem=ORIGINAL,
                             long_format=ctx.cfg.long_format, comment=tag)
    out = {}
    for d in defs:
        reports = [original]
        for kind in (INTELLIGENT_A, INTELLIGENT_B):
            sp = ctx.out / "envs" / d / f"{kind}.json"
            if not sp.exists():
                raise StageError("evaluate", f"missing {sp}; run 'gen-env' first")
            spec = EnvironmentSpec.load(sp)
            reports.append(evaluation.failure_ratio(ctx.net, ctx.cfg.sim, ctx.detector, spec, phase.duration,
                                                    phase.seeds, names, label=kind))
        evaluation.write_reports(reports, ctx.out / "evaluation" / d, long_format=ctx.cfg.long_format,
                                 comment=tag)
        out[d] = reports
        log.info("evaluate %s: %s", d, {r.environment: round(r.ratio(d), 5) for r in reports})
    return out


def _load_reports(ctx: Context, d: str) -> dict[str, dict]:
    p = ctx.out / "evaluation" / d / "environments.json"
    if not p.exists():
        raise StageError("report", f"missing {p}; run 'evaluate' first")
    doc = json.loads(p.read_text(encoding="utf-8"))
    return {r["environment"]: r for r in doc["reports"]}


def comparison_rows(ctx: Context, defs: Sequence[str]) -> list[dict]:
    rows = []
    for d in defs:
        reps = _load_reports(ctx, d)
        stats = {k: reps[k]["definitions"][d] for k in (ORIGINAL, INTELLIGENT_A, INTELLIGENT_B)}
        base = stats[ORIGINAL]["ratio"]

        def amp(k: str) -> float | None:
            # undefined without any baseline failure
            return stats[k]["ratio"] / base if base > 0 else None

        wo, wb = tuple(stats[ORIGINAL]["wilson"]), tuple(stats[INTELLIGENT_B]["wilson"])
        amp_a, amp_b = amp(INTELLIGENT_A), amp(INTELLIGENT_B)
        rows.append({
            "definition": d,
            "failure": str(DEFINITIONS[d]),
            "ratio": {k: v["ratio"] for k, v in stats.items()},
            "wilson": {k: list(v["wilson"]) for k, v in stats.items()},
            "bootstrap": {k: list(v["bootstrap"]) for k, v in stats.items()},
            "amplification": {INTELLIGENT_A: amp_a, INTELLIGENT_B: amp_b},
            "b_at_least_2x": amp_b is not None and amp_b >= 2.0 and not evaluation.intervals_overlap(wo, wb),
            "b_beats_a": amp_b is not None and amp_b > amp_a,
        })
    return rows


def stage_report(ctx: Context, defs: Sequence[str]) -> dict:
    rows = comparison_rows(ctx, defs)
    doc: dict = {"definitions": rows}
    rp = ctx.out / "retraining" / "report.json"
    if rp.exists():
        r = json.loads(rp.read_text(encoding="utf-8"))
        doc["retraining"] = {"definition": r["definition"], "relative_reduction": r["relative_reduction"]}
    ctx.write_json("report/comparison.json", doc, "parkfail.comparison/1")
    header = ["definition", "failure", "original", "intelligent_a", "intelligent_b", "amp_a", "amp_b",
              "b_at_least_2x", "b_beats_a"]
    table = [[r["definition"], r["failure"], _fmt(r["ratio"][ORIGINAL]), _fmt(r["ratio"][INTELLIGENT_A]),
              _fmt(r["ratio"][INTELLIGENT_B]), _fmt_opt(r["amplification"][INTELLIGENT_A]),
              _fmt_opt(r["amplification"][INTELLIGENT_B]), r["b_at_least_2x"], r["b_beats_a"]] for r in rows]
    ctx.write_csv("report/comparison.csv", header, table, "parkfail.comparison/1")
    lines = [f"<!-- parkfail.comparison/1 {ctx.tag} -->",
             "| def | failure | original | intelligent a | intelligent b | amp a | amp b |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        ra, am = r["ratio"], r["amplification"]
        lines.append(f"| {r['definition']} | {r['failure']} | {ra[ORIGINAL]:.2%} | {ra[INTELLIGENT_A]:.2%} | "
                     f"{ra[INTELLIGENT_B]:.2%} | {_amp_text(am[INTELLIGENT_A])} | {_amp_text(am[INTELLIGENT_B])} |")
    if "retraining" in doc:
        red = doc["retraining"]["relative_reduction"]
        lines.append("")
        lines.append("Surrogate refit on intelligent-b data vs original data, relative reduction: "
                     + ", ".join(f"{k} {v:.1%}" for k, v in sorted(red.items())))
    ctx.path("report", "comparison.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines[1:]))
    return doc


def stage_retrain(ctx: Context) -> evaluation.RetrainingReport:
    rt = ctx.cfg.retraining
    d = rt.definition
    sp = ctx.out / "envs" / d / f"{INTELLIGENT_B}.json"
    if not sp.exists():
        raise StageError("retrain", f"missing {sp}; run 'gen-env' first")
    collected: dict[str, list[Episode]] = {}
    for name, spec in ((ORIGINAL, EnvironmentSpec(ORIGINAL)), (INTELLIGENT_B, EnvironmentSpec.load(sp))):
        eps: list[Episode] = []
        evaluation.failure_ratio(ctx.net, ctx.cfg.sim, ctx.detector, spec, rt.phase.duration, rt.phase.seeds,
                                 [d], keep=eps, label=name)
        for ep in eps:
            ep.meta = {"environment": name, "run_config": ctx.cfg.hash, "purpose": "retraining"}
            dump_episode(ep, ctx.path("retraining", "datasets", name, f"{ep.id}.jsonl"))
        collected[name] = eps
    frames = {k: sum(len(e.frames) for e in v) for k, v in collected.items()}
    phase = ctx.cfg.evaluation
    rep = evaluation.retraining_comparison(collected[ORIGINAL], collected[INTELLIGENT_B], ctx.params, ctx.net,
                                           ctx.cfg.sim, ctx.cfg.sensor, phase.duration, phase.seeds, [d])
    for name, p in rep.params.items():
        doc = {**p.to_dict(), "config_hash": ctx.cfg.hash, "trained_on": name}
        ctx.path("retraining", f"surrogate_{name}.json").write_text(
            json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    ctx.write_json("retraining/report.json", {"definition": d, "dataset_frames": frames, **rep.to_dict()},
                   "parkfail.retraining/1")
    log.info("retrain %s: reduction %.3f", d, rep.reduction(d))
    return rep


# --- manifest and failure records --------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(ctx: Context) -> Path:
    files = {}
    for p in sorted(ctx.out.rglob("*")):
        rel = p.relative_to(ctx.out).as_posix()
        if p.is_file() and rel not in ("manifest.json", FAILED_MARKER, ERROR_RECORD):
            files[rel] = sha256_file(p)
    doc = {"schema": MANIFEST_SCHEMA, "config_hash": ctx.cfg.hash, "config": ctx.cfg.to_dict(), "files": files}
    doc["config"].pop("output")
    p = ctx.out / "manifest.json"
    p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return p


def _clear_failure(out: Path) -> None:
    for name in (FAILED_MARKER, ERROR_RECORD):
        (out / name).unlink(missing_ok=True)


def _record_failure(out: Path | None, stage: str, exc: BaseException, code: int) -> None:
    record = {"schema": "parkfail.error/1", "stage": stage, "error": type(exc).__name__, "message": str(exc),
              "exit_code": code}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if out is not None and out.exists():
        (out / ERROR_RECORD).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        (out / FAILED_MARKER).write_text(f"{stage}: {exc}\n", encoding="utf-8")


# --- commands ------------------------------------------------------------------------------------------


def _defs(args, cfg: RunConfig) -> list[str]:
    if getattr(args, "definitions", None):
        defs = [x.strip() for x in args.definitions.split(",") if x.strip()]
        bad = [x for x in defs if x not in DEFINITIONS]
        if bad:
            raise ConfigError(f"unknown definitions {bad}; choose from {sorted(DEFINITIONS)}")
        return defs
    return list(cfg.definitions)


def cmd_validate_map(args) -> int:
    try:
        net = load_network(resolve_map(args.map))
    except NetworkError as e:
        print(json.dumps({"valid": False, "violations": e.violations}, indent=1))
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as e:
        print(json.dumps({"valid": False, "violations": [str(e)]}, indent=1))
        return EXIT_CONFIG
    print(json.dumps({
        "valid": True, "name": net.name, "nodes": len(net.nodes), "lanes": len(net.lanes),
        "decision_points": len(net.decision_points), "obstacles": len(net.obstacles),
        "spawn_points": len(net.spawn_points), "exits": len(net.exit_points),
        "parking_spots": len(net.parking_spots), "av_route_lanes": len(net.av_route),
    }, indent=1))
    return EXIT_OK


def cmd_simulate(ctx: Context, args) -> None:
    if args.env:
        spec = EnvironmentSpec.load(args.env)
        stage_simulate(ctx, spec, subdir=f"simulate/{spec.kind}", phase=ctx.cfg.evaluation)
    else:
        stage_simulate(ctx)


def cmd_pipeline(ctx: Context, args) -> None:
    defs = _defs(args, ctx.cfg)
    stages: list[tuple[str, Callable[[], object]]] = [
        ("simulate", lambda: stage_simulate(ctx)),
        ("extract", lambda: stage_extract(ctx, defs)),
        ("train", lambda: stage_train(ctx, defs)),
        ("gen-env", lambda: stage_gen_env(ctx, defs)),
        ("evaluate", lambda: stage_evaluate(ctx, defs)),
    ]
    if ctx.cfg.retraining.enabled:
        if ctx.cfg.retraining.definition not in defs:
            raise ConfigError("retraining.definition must be among the pipeline's definitions")
        stages.append(("retrain", lambda: stage_retrain(ctx)))
    stages.append(("report", lambda: stage_report(ctx, defs)))
    for name, fn in stages:
        log.info("stage %s", name)
        _run_stage(name, fn)


def _run_stage(name: str, fn: Callable[[], object]) -> object:
    try:
        return fn()
    except (StageError, ConfigError):
        raise
    except Exception as e:  # any stage crash becomes a stage failure with a record
        log.debug("stage %s failed:\n%s", name, traceback.format_exc())
        raise StageError(name, f"{type(e).__name__}: {e}") from e


STAGE_COMMANDS: dict[str, Callable[[Context, argparse.Namespace], object]] = {
    "simulate": cmd_simulate,
    "extract": lambda ctx, a: stage_extract(ctx, _defs(a, ctx.cfg)),
    "train": lambda ctx, a: stage_train(ctx, _defs(a, ctx.cfg)),
    "gen-env": lambda ctx, a: stage_gen_env(ctx, _defs(a, ctx.cfg)),
    "evaluate": lambda ctx, a: stage_evaluate(ctx, _defs(a, ctx.cfg)),
    "retrain": lambda ctx, a: stage_retrain(ctx),
    "report": lambda ctx, a: stage_report(ctx, _defs(a, ctx.cfg)),
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parkfail", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    vm = sub.add_parser("validate-map", help="check a garage map and print its summary")
    vm.add_argument("map", help="bundled map name or JSON path")

    helps = {
        "simulate": "run the original environment (or --env) and log episodes",
        "extract": "cut failure windows, mark critical states, build both training sets",
        "train": "train the all-states and critical-only maneuver models",
        "gen-env": "write the intelligent environment specs",
        "evaluate": "failure-frame ratios of the original and intelligent environments",
        "retrain": "refit the surrogate on original vs intelligent-b data and compare",
        "report": "cross-environment comparison table",
        "pipeline": "all stages in order, then a manifest",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, help=f"run config path or bundled name ({', '.join(bundled_configs())})")
        sp.add_argument("--output", help=f"output directory (relative paths resolve under ${OUTPUT_ROOT_ENV} when set)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scalar config entry, e.g. sim.dt=0.5 or evaluation.duration=600")
        if name != "retrain":
            sp.add_argument("--definitions", help="comma-separated subset of a,b,c,d")
        if name == "simulate":
            sp.add_argument("--env", help="environment spec to simulate instead of the original environment")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate-map":
        return cmd_validate_map(args)
    out: Path | None = None
    stage = args.command
    try:
        cfg = load_run_config(args.config, args.overrides, args.output)
        out = cfg.output_dir()
        ctx = make_context(cfg)
        _clear_failure(ctx.out)
        _run_stage(stage, lambda: STAGE_COMMANDS[stage](ctx, args))
        write_manifest(ctx)
    except ConfigError as e:
        _record_failure(out, stage, e, EXIT_CONFIG)
        return EXIT_CONFIG
    except StageError as e:
        _record_failure(out, e.stage, e, EXIT_STAGE)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
