"""Per-electrode configuration search over the factor x threshold grid.

For each electrode the predictor is evaluated on every (factor, threshold)
pair.  The largest factor with a pair inside the error budget wins; within
that factor the lowest predicted error wins, then the strictest threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .acquisition import DEFAULT_PLAN, ClockPlan, ElectrodeSchedule, FactorSet
from .predictor import DEFAULT_THRESHOLDS_SIGMA, ErrorEstimate, MlpModel, PredictorInput, predict_batch
from .signal_core import SpikeTemplate
from .synthetic import NOISE_SIGMA_UV


def total_error(est: ErrorEstimate) -> float:
    return est.fnr + est.fpr


@dataclass(frozen=True)
class OptimizerSettings:
    epsilon: float = 0.05
    factor_set: FactorSet = FactorSet()
    threshold_grid_sigmas: tuple[float, ...] = DEFAULT_THRESHOLDS_SIGMA

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        th = tuple(float(t) for t in self.threshold_grid_sigmas)
        object.__setattr__(self, "threshold_grid_sigmas", th)
        if not th:
            raise ValueError("threshold grid is empty")
        if any(t >= 0 for t in th):
            raise ValueError("thresholds must be negative")
        if any(b >= a for a, b in zip(th, th[1:])):
            raise ValueError("threshold grid must be strictly descending")


@dataclass(frozen=True)
class ErrorGrid:
    """Predicted (fnr, fpr) for every factor x threshold pair of one electrode."""

    electrode_id: int
    factors: tuple[int, ...]
    thresholds_uv: tuple[float, ...]
    estimates: np.ndarray = field(repr=False)  # (n_factors, n_thresholds, 2)

    @property
    def total(self) -> np.ndarray:
        return self.estimates.sum(axis=-1)

    def best_per_factor(self) -> np.ndarray:
        """Lowest predicted total error at each factor."""
        return self.total.min(axis=1)


def _threshold_uv(th_sigma: float, noise_sigma_uv: float) -> float:
    # 0.1 uV resolution, the precision the config downlink carries
    return round(th_sigma * noise_sigma_uv, 1)


def predict_grid(template: SpikeTemplate, model: MlpModel, settings: OptimizerSettings,
                 plan: ClockPlan = DEFAULT_PLAN,
                 noise_sigma_uv: float = NOISE_SIGMA_UV) -> ErrorGrid:
    if not noise_sigma_uv > 0:
        raise ValueError("noise sigma must be positive")
    factors = tuple(settings.factor_set)
    th_uv = tuple(_threshold_uv(t, noise_sigma_uv) for t in settings.threshold_grid_sigmas)
    rows = []
    for x in factors:
        rate = min(plan.r_max_hz / x, template.base_rate_hz)
        for th in th_uv:
            rows.append(PredictorInput.make(template, rate, th, noise_sigma_uv).features())
    est = predict_batch(model, np.array(rows)).reshape(len(factors), len(th_uv), 2)
    return ErrorGrid(template.electrode_id, factors, th_uv, est)


def select_from_grid(grid: ErrorGrid, epsilon: float, plan: ClockPlan = DEFAULT_PLAN) -> ElectrodeSchedule:
    """Apply the budget rule to precomputed predictions."""
    total = grid.total
    feasible = total <= epsilon
    if feasible.any():
        fi = int(np.flatnonzero(feasible.any(axis=1))[-1])
        row = total[fi]
        # lowest error first, ties to the strictest (most negative) threshold
        ti = min(np.flatnonzero(feasible[fi]), key=lambda j: (row[j], grid.thresholds_uv[j]))
        flagged = False
    else:
        fi = grid.factors.index(1)
        row = total[fi]
        ti = min(range(len(row)), key=lambda j: (row[j], grid.thresholds_uv[j]))
        flagged = True
    factor = grid.factors[fi]
    return ElectrodeSchedule(grid.electrode_id, plan.r_max_hz / factor, factor,
                             plan.r_max_hz / factor, grid.thresholds_uv[ti], flagged)


def optimize_electrode(template: SpikeTemplate, model: MlpModel, settings: OptimizerSettings,
                       plan: ClockPlan = DEFAULT_PLAN,
                       noise_sigma_uv: float = NOISE_SIGMA_UV) -> ElectrodeSchedule:
    """Lowest realized rate whose predicted total error fits the budget.

    Falls back to factor 1 with the minimum-error threshold, flagged, when no
    pair is feasible.
    """
    grid = predict_grid(template, model, settings, plan, noise_sigma_uv)
    return select_from_grid(grid, settings.epsilon, plan)


@dataclass(frozen=True)
class ConfigVector:
    schedules: tuple[ElectrodeSchedule, ...]
    epoch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "schedules", tuple(self.schedules))
        ids = [s.electrode_id for s in self.schedules]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate electrode ids")
        if not 0 <= self.epoch < 2**16:
            raise ValueError("epoch out of range")

    def __len__(self):
        return len(self.schedules)

    @property
    def factors(self) -> np.ndarray:
        return np.array([s.factor for s in self.schedules])

    def mean_factor(self) -> float:
        return float(self.factors.mean())

    def acquisition_cr(self) -> float:
        """Long-run full-rate over executed command ratio."""
        return len(self.schedules) / float(np.sum(1.0 / self.factors))

    def validate(self, plan: ClockPlan, factors: FactorSet = FactorSet()) -> None:
        for s in self.schedules:
            s.validate(plan, factors)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "electrodes": [
                {"electrode_id": s.electrode_id, "target_rate_hz": s.target_rate_hz,
                 "factor": s.factor, "threshold_uv": s.threshold_uv, "flagged": s.flagged}
                for s in self.schedules
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict, plan: ClockPlan = DEFAULT_PLAN) -> "ConfigVector":
        scheds = []
        for e in doc["electrodes"]:
            x = int(e["factor"])
            scheds.append(ElectrodeSchedule(int(e["electrode_id"]), float(e["target_rate_hz"]), x,
                                            plan.r_max_hz / x, float(e["threshold_uv"]),
                                            bool(e["flagged"])))
        cv = cls(tuple(scheds), int(doc["epoch"]))
        cv.validate(plan)
        return cv

    def save_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load_json(cls, path: str | Path, plan: ClockPlan = DEFAULT_PLAN) -> "ConfigVector":
        return cls.from_dict(json.loads(Path(path).read_text()), plan)


def optimize_array(templates: Sequence[SpikeTemplate], model: MlpModel, settings: OptimizerSettings,
                   plan: ClockPlan = DEFAULT_PLAN, noise_sigma_uv=NOISE_SIGMA_UV,
                   epoch: int = 0) -> ConfigVector:
    """Independent per-electrode search, results in electrode order.

    ``noise_sigma_uv`` may be a scalar or one value per electrode.
    """
    sig = np.broadcast_to(np.asarray(noise_sigma_uv, dtype=float), (len(templates),))
    scheds = [optimize_electrode(t, model, settings, plan, float(s)) for t, s in zip(templates, sig)]
    return ConfigVector(tuple(scheds), epoch)


def uniform_config(templates: Sequence[SpikeTemplate], model: MlpModel, factor: int,
                   settings: OptimizerSettings, plan: ClockPlan = DEFAULT_PLAN,
                   noise_sigma_uv=NOISE_SIGMA_UV, epoch: int = 0) -> ConfigVector:
    """Every electrode at ``factor``, each with its lowest-error threshold.

    The uniform comparator gets the same threshold search as the adaptive
    scheme so the comparison isolates the rate allocation.
    """
    one = OptimizerSettings(0.5, FactorSet((1, factor)) if factor != 1 else FactorSet((1,)),
                            settings.threshold_grid_sigmas)
    sig = np.broadcast_to(np.asarray(noise_sigma_uv, dtype=float), (len(templates),))
    scheds = []
    for t, s in zip(templates, sig):
        grid = predict_grid(t, model, one, plan, float(s))
        row = grid.total[grid.factors.index(factor)]
        ti = min(range(len(row)), key=lambda j: (row[j], grid.thresholds_uv[j]))
        scheds.append(ElectrodeSchedule(t.electrode_id, plan.r_max_hz / factor, factor,
                                        plan.r_max_hz / factor, grid.thresholds_uv[ti]))
    return ConfigVector(tuple(scheds), epoch)


def epsilon_for_cr(grids: Sequence[ErrorGrid], target_cr: float,
                   plan: ClockPlan = DEFAULT_PLAN) -> tuple[float, float]:
    """Budget whose adaptive allocation lands closest to ``target_cr``.

    The selected factors only change where the budget crosses one of the
    per-factor minimum predicted errors, so those breakpoints are scanned
    exhaustively, together with a budget below all of them (every electrode
    on the full-rate fallback).  Returns (epsilon, achieved CR).
    """
    cands = sorted({0.0} | {float(v) for g in grids for v in g.best_per_factor()})
    best = None
    for eps in cands:
        eps = min(max(eps, 1e-9), 1 - 1e-9)
        f = np.array([select_from_grid(g, eps, plan).factor for g in grids])
        cr = len(f) / float(np.sum(1.0 / f))
        score = abs(cr - target_cr) / target_cr
        if best is None or score < best[0]:
            best = (score, eps, cr)
    return best[1], best[2]
