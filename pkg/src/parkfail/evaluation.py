"""Monte Carlo failure statistics, the exact enumeration oracle, training-mode
comparison and the retraining comparison."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .envgen import ORIGINAL, EnvironmentSpec, make_provider
from .network import GarageNetwork
from .perception import (DEFINITIONS, FailureDefinition, SensorConfig, SurrogateDetector, SurrogateParams,
                         fit_surrogate, is_failure)
from .policy import PolicyModel, TrainConfig, featurize, loss, train
from .recorder import Episode, TrainingSample, config_hash
from .sim import Maneuver, ManeuverProvider, SceneState, SimConfig, decision_queries, run_episode, step

ENUMERATION_CAP = 10**6
REPORT_SCHEMA = "parkfail.report/1"


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n <= 0:
        return (0.0, 1.0)
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # rounding can push a bound past p itself at k = 0 or k = n
    return (max(0.0, min(centre - half, p)), min(1.0, max(centre + half, p)))


def bootstrap_interval(failures: Sequence[int], frames: Sequence[int], resamples: int = 1000,
                       seed: int = 0, confidence: float = 0.95) -> tuple[float, float]:
    """Percentile interval of the pooled ratio, resampling whole episodes."""
    f = np.asarray(failures, dtype=float)
    n = np.asarray(frames, dtype=float)
    if len(f) == 0:
        return (0.0, 1.0)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(f), size=(resamples, len(f)))
    ratios = f[idx].sum(axis=1) / n[idx].sum(axis=1)
    alpha = (1 - confidence) / 2
    return (float(np.quantile(ratios, alpha)), float(np.quantile(ratios, 1 - alpha)))


@dataclass
class DefinitionStats:
    definition: str
    failures: int
    frames: int
    ratio: float
    wilson: tuple[float, float]
    per_seed: list[float]
    bootstrap: tuple[float, float]


@dataclass
class EvalReport:
    environment: str
    stats: dict[str, DefinitionStats]
    seeds: list[int]
    duration: float
    config_hash: str
    meta: dict = field(default_factory=dict)

    def ratio(self, name: str) -> float:
        return self.stats[name].ratio

    def to_dict(self) -> dict:
        return {
            "environment": self.environment,
            "seeds": list(self.seeds),
            "duration_s": self.duration,
            "config_hash": self.config_hash,
            "meta": self.meta,
            "definitions": {k: asdict(v) for k, v in self.stats.items()},
        }


def failure_ratio(net: GarageNetwork, cfg: SimConfig, detector: SurrogateDetector, env: EnvironmentSpec,
                  duration: float, seeds: Sequence[int], definitions: Sequence[str] | None = None,
                  keep: list[Episode] | None = None, label: str | None = None) -> EvalReport:
    """Pooled failure-frame ratio of ``env`` over one episode per seed.

    Pass a list as ``keep`` to receive the simulated episodes.
    """
    steps = cfg.steps_for(duration)
    if steps < 1:
        raise ValueError("duration must cover at least one time step")
    if not seeds:
        raise ValueError("need at least one seed")
    names = list(definitions or DEFINITIONS)
    defs = {n: detector.definitions.get(n, DEFINITIONS.get(n)) for n in names}
    run_cfg = _with_horizon(cfg, steps)
    provider = make_provider(env, cfg.v_max, detector.sensor)
    per_seed_fail = {n: [] for n in names}
    per_seed_frames = []
    for seed in seeds:
        ep = run_episode(net, run_cfg, seed, provider, detector, episode_id=f"{label or env.kind}-seed{seed}")
        ep.meta = {"environment": label or env.kind}
        per_seed_frames.append(len(ep.frames))
        for n in names:
            d = defs[n]
            per_seed_fail[n].append(sum(is_failure(fr.metrics, d) for fr in ep.frames))
        if keep is not None:
            keep.append(ep)
    stats = {}
    total = sum(per_seed_frames)
    for n in names:
        k = sum(per_seed_fail[n])
        stats[n] = DefinitionStats(
            n, k, total, k / total, wilson_interval(k, total),
            [f / m for f, m in zip(per_seed_fail[n], per_seed_frames)],
            bootstrap_interval(per_seed_fail[n], per_seed_frames),
        )
    h = config_hash({"sim": run_cfg.to_dict(), "env": env.to_dict(), "seeds": list(seeds),
                     "surrogate": detector.params.to_dict(), "network": net.name})
    return EvalReport(label or env.kind, stats, list(seeds), duration, h)


def _with_horizon(cfg: SimConfig, steps: int) -> SimConfig:
    d = cfg.to_dict()
    d["horizon"] = steps
    return SimConfig.from_dict(d)


def estimate_event_probability(episodes: Sequence[Episode], definition: FailureDefinition) -> tuple[float, float]:
    """Fraction of episodes with at least one failure frame, and its standard error."""
    if not episodes:
        raise ValueError("no episodes to estimate from")
    hits = [any(is_failure(fr.metrics, definition) for fr in ep.frames) for ep in episodes]
    p = sum(hits) / len(hits)
    return p, math.sqrt(p * (1 - p) / len(hits))


# --- exact enumeration ------------------------------------------------------------------------


@dataclass
class ExactResult:
    probability: float
    mass: float  # total probability over all sequences; 1 up to rounding
    sequences: int
    identity_error: float | None = None  # max relative |exp(-log loss) - product| over sequences


def _deterministic(params: SurrogateParams) -> bool:
    return bool((params.sigma == 0).all() and np.isin(params.miss, (0.0, 1.0)).all())


def exhaustive_event_probability(net: GarageNetwork, cfg: SimConfig, initial: SceneState,
                                 provider: ManeuverProvider, detector: SurrogateDetector,
                                 definition: FailureDefinition, cap: int = ENUMERATION_CAP) -> ExactResult:
    """Sum, over every maneuver sequence from ``initial``, of the failure indicator
    times the product of the chosen options' probabilities.

    Needs noise-free perception (sigma 0, miss in {0, 1}), no spawning, and a
    fixed parking dwell so that the scenario is a function of the maneuvers.
    """
    if not _deterministic(detector.params):
        raise ValueError("exact enumeration needs deterministic perception (sigma 0, miss 0 or 1)")
    if any((cfg.spawn_rate if cfg.spawn_rate is not None else sp.rate) > 0 for sp in net.spawn_points):
        raise ValueError("exact enumeration needs spawn_rate 0")
    if cfg.dwell_min != cfg.dwell_max:
        raise ValueError("exact enumeration needs a fixed parking dwell")
    model = getattr(provider, "model", None)
    out = ExactResult(0.0, 0.0, 0, 0.0 if model is not None else None)

    def rng():
        return np.random.default_rng(0)

    def rec(scene: SceneState, prob: float, failed: bool, samples: list[TrainingSample]) -> None:
        failed = failed or is_failure(detector.observe(net, scene, rng()).metrics, definition)
        queries = decision_queries(net, scene) if scene.k < cfg.horizon else []
        if scene.k >= cfg.horizon:
            out.sequences += 1
            if out.sequences > cap:
                raise ValueError(f"enumeration exceeds {cap} sequences")
            out.mass += prob
            if failed:
                out.probability += prob
            if model is not None and samples:
                direct = float(np.prod([s_p for s_p in (_taken_prob(model, s) for s in samples)]))
                via_log = math.exp(-loss(model, samples))
                err = abs(via_log - direct) / max(abs(direct), 1e-300)
                out.identity_error = max(out.identity_error or 0.0, err)
            return
        choices = provider.distributions(net, scene, queries)
        for combo in itertools.product(*(range(len(c.probs)) for c in choices)):
            p = prob
            mans, new = [], []
            for (vid, dp), ch, o in zip(queries, choices, combo):
                p *= ch.probs[o]
                mans.append(Maneuver.choose(vid, dp, o))
                if model is not None:
                    f = featurize(scene, vid, dp, net, cfg.v_max)
                    new.append(TrainingSample(tuple(f), dp, o, True, True, "enum", scene.k, vid))
            rec(step(net, cfg, scene, mans, rng()), p, failed, samples + new)

    rec(initial, 1.0, False, [])
    return out


def _taken_prob(model: PolicyModel, s: TrainingSample) -> float:
    from .policy import predict

    return float(predict(model, np.array(s.features), s.dp)[s.option])


# --- training-mode comparison ------------------------------------------------------------------


@dataclass
class CurveReport:
    critical_val: list[float]
    all_val: list[float]
    critical_train: list[float]
    all_train: list[float]
    critical_epoch_near_min: int
    all_epoch_near_min: int
    n_train: dict[str, int]
    n_val: int
    models: dict[str, PolicyModel] = field(default_factory=dict, repr=False)

    @property
    def final(self) -> tuple[float, float]:
        return self.critical_val[-1], self.all_val[-1]


def _train_or_keep(model0: PolicyModel, samples, cfg: TrainConfig, val):
    if not samples:
        return model0.copy(), [], []
    return train(model0, samples, cfg, val)


def epoch_near_min(curve: Sequence[float], tolerance: float = 0.05) -> int:
    """First epoch (1-based) whose loss is within ``tolerance`` of the curve minimum
    (0 for an empty or all-NaN curve)."""
    finite = [x for x in curve if not math.isnan(x)]
    if not finite:
        return 0
    best = min(finite)
    for e, x in enumerate(curve, start=1):
        if x <= best + tolerance * abs(best):
            return e
    return len(curve)


def compare_training_modes(samples: Sequence[TrainingSample], model0: PolicyModel, cfg: TrainConfig,
                           min_scenarios: int = 50) -> CurveReport:
    """Train on critical-only vs all states; both validate on the critical samples
    of the same held-out scenarios."""
    scenarios = {s.scenario for s in samples}
    if len(scenarios) < min_scenarios:
        raise ValueError(f"need at least {min_scenarios} failure scenarios, got {len(scenarios)}")
    return train_modes(samples, model0, cfg)


def train_modes(samples: Sequence[TrainingSample], model0: PolicyModel, cfg: TrainConfig) -> CurveReport:
    """Both training modes on one scenario split, without the data-volume check.

    A mode with no training samples keeps ``model0`` and gets empty curves.
    """
    from .policy import split_by_scenario

    train_all, val_all = split_by_scenario(samples, cfg.val_fraction, cfg.split_seed)
    train_crit = [s for s in train_all if s.critical]
    val = [s for s in val_all if s.critical]
    m_crit, tc, vc = _train_or_keep(model0, train_crit, cfg, val)
    m_all, ta, va = _train_or_keep(model0, train_all, cfg, val)
    return CurveReport(vc, va, tc, ta, epoch_near_min(vc), epoch_near_min(va),
                       {"critical_only": len(train_crit), "all_states": len(train_all)}, len(val),
                       {"critical_only": m_crit, "all_states": m_all})


# --- retraining comparison ---------------------------------------------------------------------


@dataclass
class RetrainingReport:
    original_trained: EvalReport
    intelligent_trained: EvalReport
    params: dict[str, SurrogateParams] = field(repr=False, default_factory=dict)

    def reduction(self, name: str) -> float:
        a = self.original_trained.ratio(name)
        b = self.intelligent_trained.ratio(name)
        return (a - b) / a if a > 0 else 0.0

    def to_dict(self) -> dict:
        names = list(self.original_trained.stats)
        return {
            "original_trained": self.original_trained.to_dict(),
            "intelligent_trained": self.intelligent_trained.to_dict(),
            "relative_reduction": {n: self.reduction(n) for n in names},
        }


def retraining_comparison(orig_dataset: Sequence[Episode], intel_dataset: Sequence[Episode],
                          base: SurrogateParams, net: GarageNetwork, cfg: SimConfig, sensor: SensorConfig,
                          duration: float, seeds: Sequence[int],
                          definitions: Sequence[str] | None = None) -> RetrainingReport:
    if not orig_dataset or not intel_dataset:
        raise ValueError("both datasets must be nonempty")
    p_orig = fit_surrogate(orig_dataset, base)
    p_int = fit_surrogate(intel_dataset, base)
    env = EnvironmentSpec(ORIGINAL)
    r_orig = failure_ratio(net, cfg, SurrogateDetector(p_orig, sensor), env, duration, seeds, definitions,
                           label="original/orig-data")
    r_int = failure_ratio(net, cfg, SurrogateDetector(p_int, sensor), env, duration, seeds, definitions,
                          label="original/intel-data")
    return RetrainingReport(r_orig, r_int, {"original": p_orig, "intelligent": p_int})


# --- report files ---------------------------------------------------------------------------------


def amplification(base: EvalReport, other: EvalReport, name: str) -> float:
    b = base.ratio(name)
    return other.ratio(name) / b if b > 0 else math.inf


def intervals_overlap(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def write_reports(reports: Sequence[EvalReport], directory: str | Path, stem: str = "environments",
                  long_format: bool = False, comment: str | None = None) -> list[Path]:
    """CSV table plus JSON summary; optionally a long-format CSV for plotting."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in reports:
        for name, s in r.stats.items():
            rows.append([r.environment, name, s.failures, s.frames, repr(s.ratio), repr(s.wilson[0]),
                         repr(s.wilson[1]), repr(s.bootstrap[0]), repr(s.bootstrap[1])])
    csv_path = d / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["environment", "definition", "failure_frames", "frames", "ratio", "wilson_lo", "wilson_hi",
                    "bootstrap_lo", "bootstrap_hi"])
        w.writerows(rows)
    json_path = d / f"{stem}.json"
    doc = {"schema": REPORT_SCHEMA, "comment": comment, "reports": [r.to_dict() for r in reports]}
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    out = [csv_path, json_path]
    if long_format:
        lp = d / f"{stem}_long.csv"
        with open(lp, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["env", "definition", "ratio"])
            for r in reports:
                for name, s in r.stats.items():
                    w.writerow([r.environment, name, repr(s.ratio)])
        out.append(lp)
    return out
