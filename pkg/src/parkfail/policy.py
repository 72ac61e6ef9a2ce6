"""BV maneuver distribution: one multinomial logistic regression per decision point.

The training objective is the negative log-likelihood of the route choices kept
in a training set, summed over samples. Failure and critical-state indicators
are not weights here: a sample is in the set or it is not.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .network import GarageNetwork, pose_on_lane
from .sim import SceneState

if TYPE_CHECKING:
    from .recorder import TrainingSample

log = logging.getLogger(__name__)

FEATURE_SPEC = "parkfail.features/1"
N_FEATURES = 7
POSITION_SCALE = 20.0
DENSITY_SCALE = 5.0
DENSITY_RADIUS = 10.0


class PolicyError(ValueError):
    pass


def featurize(scene: SceneState, bv_id: int, dp_id: str, net: GarageNetwork, v_max: float) -> np.ndarray:
    """``[ahead/20, left/20, dist/20, av_speed/v_max, bv_speed/v_max, density/5, 1]``.

    ``ahead``/``left`` locate the AV in the deciding BV's frame; density counts
    other vehicles (AV included) within 10 m of the BV.
    """
    dp = net.decision_points.get(dp_id)
    if dp is None:
        raise PolicyError(f"unknown decision point {dp_id}")
    bv = scene.get(bv_id)
    lane = net.lanes[bv.lane]
    if lane.dst != dp.node or bv.progress != lane.length:
        raise PolicyError(f"vehicle {bv_id} is not at decision point {dp_id}")
    bx, by, h = pose_on_lane(net, bv.lane, bv.progress)
    hx, hy = math.cos(h), math.sin(h)
    av = scene.av
    ax, ay, _ = pose_on_lane(net, av.lane, av.progress)
    rx, ry = ax - bx, ay - by
    density = 0
    for v in scene.vehicles:
        if v.id == bv_id:
            continue
        x, y, _ = pose_on_lane(net, v.lane, v.progress)
        if math.hypot(x - bx, y - by) <= DENSITY_RADIUS:
            density += 1
    return np.array([
        (rx * hx + ry * hy) / POSITION_SCALE,
        (hx * ry - hy * rx) / POSITION_SCALE,
        math.hypot(rx, ry) / POSITION_SCALE,
        av.speed / v_max,
        bv.speed / v_max,
        density / DENSITY_SCALE,
        1.0,
    ])


@dataclass
class PolicyModel:
    weights: dict[str, np.ndarray]  # decision point id -> (options, N_FEATURES)
    feature_spec: str = FEATURE_SPEC

    @classmethod
    def zeros(cls, net: GarageNetwork) -> "PolicyModel":
        return cls({d: np.zeros((len(dp.options), N_FEATURES)) for d, dp in net.decision_points.items()})

    def copy(self) -> "PolicyModel":
        return PolicyModel({k: w.copy() for k, w in self.weights.items()}, self.feature_spec)

    def check_network(self, net: GarageNetwork) -> None:
        for d, dp in net.decision_points.items():
            w = self.weights.get(d)
            if w is None or w.shape != (len(dp.options), N_FEATURES):
                raise PolicyError(f"model has no {len(dp.options)}x{N_FEATURES} block for {d}")

    def to_dict(self) -> dict:
        return {"schema": "parkfail.policy/1", "feature_spec": self.feature_spec,
                "weights": {k: self.weights[k].tolist() for k in sorted(self.weights)}}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyModel":
        return cls({k: np.array(v, dtype=float) for k, v in d["weights"].items()}, d["feature_spec"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    # log1p over the non-maximal terms keeps tiny losses from rounding to 0
    top = np.argmax(z, axis=-1)[..., None]
    np.put_along_axis(e, top, 0.0, axis=-1)
    return z - m - np.log1p(e.sum(axis=-1, keepdims=True))


def predict(model: PolicyModel, f: np.ndarray, dp: str) -> np.ndarray:
    w = model.weights.get(dp)
    if w is None:
        raise PolicyError(f"unknown decision point {dp}")
    return np.exp(_log_softmax(w @ np.asarray(f, dtype=float)))


# --- loss and gradient ----------------------------------------------------------------------


Batches = dict[str, tuple[np.ndarray, np.ndarray]]


def batch(samples: Sequence["TrainingSample"] | Batches) -> Batches:
    """Group samples by decision point into (features, taken option) arrays."""
    if isinstance(samples, dict):
        return samples
    groups: dict[str, tuple[list, list]] = {}
    for s in samples:
        fs, ys = groups.setdefault(s.dp, ([], []))
        fs.append(s.features)
        ys.append(s.option)
    return {dp: (np.array(fs, dtype=float).reshape(-1, N_FEATURES), np.array(ys, dtype=int))
            for dp, (fs, ys) in sorted(groups.items())}


def _check(model: PolicyModel, batches: Batches) -> None:
    for dp, (_, y) in batches.items():
        w = model.weights.get(dp)
        if w is None:
            raise PolicyError(f"sample at decision point {dp}, which the model does not know")
        if len(y) and (y.min() < 0 or y.max() >= w.shape[0]):
            raise PolicyError(f"option index out of range at {dp}")


def loss(model: PolicyModel, samples: Sequence["TrainingSample"] | Batches) -> float:
    """Summed negative log-likelihood of the taken options (log-sum-exp stabilised)."""
    b = batch(samples)
    _check(model, b)
    if not any(len(y) for _, y in b.values()):
        log.warning("loss of an empty training set is defined as 0")
        return 0.0
    total = 0.0
    for dp in sorted(b):
        f, y = b[dp]
        lp = _log_softmax(f @ model.weights[dp].T)
        total -= float(lp[np.arange(len(y)), y].sum())
    return total


def gradient(model: PolicyModel, samples: Sequence["TrainingSample"] | Batches) -> dict[str, np.ndarray]:
    b = batch(samples)
    _check(model, b)
    grads = {dp: np.zeros_like(w) for dp, w in model.weights.items()}
    for dp in sorted(b):
        f, y = b[dp]
        if not len(y):
            continue
        p = np.exp(_log_softmax(f @ model.weights[dp].T))
        p[np.arange(len(y)), y] -= 1.0
        grads[dp] = p.T @ f
    return grads


def product_form(model: PolicyModel, samples: Sequence["TrainingSample"]) -> float:
    """Plain product of the taken-option probabilities (no log transform)."""
    prod = 1.0
    for s in samples:
        prod *= float(predict(model, np.array(s.features), s.dp)[s.option])
    return prod


def product_form_objective(model: PolicyModel, scenarios: Mapping[str, Sequence["TrainingSample"]]) -> float:
    """Negated sum over failure scenarios of each scenario's probability product."""
    return -sum(product_form(model, ss) for ss in scenarios.values())


# --- training ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 400
    val_fraction: float = 0.2
    split_seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def is_validation_scenario(scenario: str, fraction: float, seed: int) -> bool:
    # keyed on the scenario id alone so every dataset built from the same
    # scenarios splits identically
    return random.Random(f"{seed}/{scenario}").random() < fraction


def split_by_scenario(samples: Sequence["TrainingSample"], fraction: float, seed: int):
    train, val = [], []
    for s in samples:
        (val if is_validation_scenario(s.scenario, fraction, seed) else train).append(s)
    return train, val


def _mean_loss(model: PolicyModel, b: Batches) -> float:
    n = sum(len(y) for _, y in b.values())
    return loss(model, b) / n if n else math.nan


def train(model0: PolicyModel, samples: Sequence["TrainingSample"], cfg: TrainConfig,
          val_samples: Sequence["TrainingSample"] | None = None):
    """Full-batch Adam for ``cfg.epochs`` epochs.

    Without ``val_samples`` the set is split by scenario. Returns the final model
    and per-sample mean train/validation losses after each epoch.
    """
    if val_samples is None:
        train_set, val_set = split_by_scenario(samples, cfg.val_fraction, cfg.split_seed)
    else:
        train_set, val_set = list(samples), list(val_samples)
    if not train_set:
        raise PolicyError("cannot train on an empty training set")
    model = model0.copy()
    tb, vb = batch(train_set), batch(val_set)
    m = {k: np.zeros_like(w) for k, w in model.weights.items()}
    v = {k: np.zeros_like(w) for k, w in model.weights.items()}
    train_hist, val_hist = [], []
    for t in range(1, cfg.epochs + 1):
        g = gradient(model, tb)
        for k in sorted(model.weights):
            m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g[k]
            v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g[k] ** 2
            mhat = m[k] / (1 - cfg.beta1**t)
            vhat = v[k] / (1 - cfg.beta2**t)
            model.weights[k] = model.weights[k] - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        train_hist.append(_mean_loss(model, tb))
        val_hist.append(_mean_loss(model, vb))
    return model, train_hist, val_hist


def write_history(path: str | Path, train_hist: Sequence[float], val_hist: Sequence[float],
                  comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, (a, b) in enumerate(zip(train_hist, val_hist), start=1):
            w.writerow([e, repr(float(a)), repr(float(b))])
