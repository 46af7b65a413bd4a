"""Ground truth, event matching, detection and compression metrics."""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .signal_core import (
    DEAD_TIME_S,
    NeuralTrace,
    SpikeEvent,
    SpikeTemplate,
    condition,
    detect_spikes,
    estimate_noise_sigma,
    resample_trace,
)

MATCH_WINDOW_S = 5e-4
MERGE_WINDOW_S = 5e-4


@dataclass(frozen=True)
class NeuronSpikeTrain:
    neuron_id: int
    spike_times_s: np.ndarray
    footprint: frozenset[int]

    def __post_init__(self):
        t = np.asarray(self.spike_times_s, dtype=float)
        object.__setattr__(self, "spike_times_s", t)
        object.__setattr__(self, "footprint", frozenset(self.footprint))
        if np.any(np.diff(t) < 0):
            raise ValueError("spike times must be ascending")
        if not self.footprint:
            raise ValueError("footprint must not be empty")


@dataclass(frozen=True)
class ElectrodeGroundTruth:
    electrode_id: int
    event_times_s: np.ndarray

    def shifted(self, offset_s: float) -> "ElectrodeGroundTruth":
        """Truth moved by a known pipeline latency."""
        return ElectrodeGroundTruth(self.electrode_id, self.event_times_s + offset_s)


@dataclass(frozen=True)
class DetectionReport:
    n_true: int
    n_detected: int
    n_matched: int
    fnr: float = field(init=False)
    fpr: float = field(init=False)
    sde: float = field(init=False)

    def __post_init__(self):
        if not 0 <= self.n_matched <= min(self.n_true, self.n_detected):
            raise ValueError("matched count out of range")
        denom = max(self.n_true, 1)
        fnr = (self.n_true - self.n_matched) / denom
        fpr = min(1.0, (self.n_detected - self.n_matched) / denom)
        object.__setattr__(self, "fnr", fnr)
        object.__setattr__(self, "fpr", fpr)
        object.__setattr__(self, "sde", fnr + fpr)

    def as_dict(self) -> dict:
        return {"n_true": self.n_true, "n_detected": self.n_detected, "n_matched": self.n_matched,
                "fnr": self.fnr, "fpr": self.fpr, "sde": self.sde}


def merge_close(times: np.ndarray, window_s: float = MERGE_WINDOW_S) -> np.ndarray:
    """Collapse runs of events closer than ``window_s`` to their first member.

    Chaining is anchored: an event merges into the current group only when it
    lies within ``window_s`` of the group's first time.
    """
    times = np.sort(np.asarray(times, dtype=float))
    if len(times) == 0:
        return times
    keep = [times[0]]
    for t in times[1:]:
        if t - keep[-1] > window_s:
            keep.append(t)
    return np.array(keep)


def project_ground_truth(trains: Iterable[NeuronSpikeTrain], electrode: int,
                         merge_window_s: float = MERGE_WINDOW_S) -> ElectrodeGroundTruth:
    """OR-combine the spike trains of every neuron visible on ``electrode``."""
    parts = [t.spike_times_s for t in trains if electrode in t.footprint]
    times = np.concatenate(parts) if parts else np.empty(0)
    return ElectrodeGroundTruth(electrode, merge_close(times, merge_window_s))


def match_events(truth: ElectrodeGroundTruth, detected: Sequence[SpikeEvent] | np.ndarray,
                 window_s: float = MATCH_WINDOW_S) -> DetectionReport:
    """Greedy one-to-one matching, detections visited in time order.

    Each detection takes the nearest still-unmatched truth event within
    ``window_s``; ties go to the earlier truth event.
    """
    if not window_s > 0:
        raise ValueError("match window must be positive")
    t_true = np.asarray(truth.event_times_s, dtype=float)
    if len(detected) and isinstance(detected[0], SpikeEvent):
        t_det = np.sort([e.time_s for e in detected])
    else:
        t_det = np.sort(np.asarray(detected, dtype=float))
    used = np.zeros(len(t_true), dtype=bool)
    matched = 0
    for t in t_det.tolist():
        lo = np.searchsorted(t_true, t - window_s, side="left")
        hi = np.searchsorted(t_true, t + window_s, side="right")
        best, best_d = -1, math.inf
        for k in range(lo, hi):
            d = abs(t_true[k] - t)
            if not used[k] and d <= window_s and d < best_d:
                best, best_d = k, d
        if best >= 0:
            used[best] = True
            matched += 1
    return DetectionReport(len(t_true), len(t_det), matched)


LOBE_DEPTH_FRACTION = 0.6


@functools.lru_cache(maxsize=4096)
def _trigger_span_cached(waveform: bytes, base_rate: float, rate: float, threshold_uv: float,
                         dead_time_s: float) -> tuple[float, float]:
    wf = np.frombuffer(waveform)
    half = len(wf) // 2
    n_phase = max(1, int(round(base_rate / rate)))
    span = int(round(0.06 * base_rate))
    offsets = []
    for j in range(n_phase):
        x = np.zeros(span)
        centre = span // 2 + j
        x[centre - half:centre - half + len(wf)] += wf
        y = condition(resample_trace(NeuralTrace.from_array(x, base_rate), 0, rate)).samples[0]
        t0 = centre / base_rate
        # deep local minima: lobes that noise can push over the threshold
        inner = y[1:-1]
        is_min = (inner < y[:-2]) & (inner <= y[2:]) & (inner <= LOBE_DEPTH_FRACTION * y.min())
        lobes = (np.flatnonzero(is_min) + 1) / rate - t0
        first = lobes[:1]
        if threshold_uv < 0:
            out = NeuralTrace.from_array(y, rate)
            events = detect_spikes(out, threshold_uv, dead_time_s)
            if events:
                first = np.array([events[0].time_s - t0])
        # lobes after the dead time of the first would be separate events
        keep = lobes[lobes <= lobes[0] + dead_time_s] if len(lobes) else lobes
        offsets.extend(keep.tolist())
        offsets.extend(first.tolist())
    if not offsets:
        return 0.0, 0.0
    return float(min(offsets)), float(max(offsets))


def trigger_span(template: SpikeTemplate, rate_hz: float, threshold_uv: float,
                 dead_time_s: float = DEAD_TIME_S) -> tuple[float, float]:
    """Earliest and latest delay at which the headstage may report a spike.

    The noise-free template is pushed through acquisition and conditioning at
    every decimation phase.  Heavily filtered templates often show several
    negative lobes of similar depth and noise decides which one triggers
    first, so every lobe at least 0.6 times as deep as the deepest, plus the
    first noise-free detection, contributes a candidate delay relative to
    the template's centre sample.
    """
    wf = np.ascontiguousarray(template.waveform, dtype=float)
    return _trigger_span_cached(wf.tobytes(), float(template.base_rate_hz), float(rate_hz),
                                float(threshold_uv), float(dead_time_s))


def detection_latency(template: SpikeTemplate, rate_hz: float, threshold_uv: float,
                      dead_time_s: float = DEAD_TIME_S) -> float:
    """Centre of the trigger span: the offset applied to ground-truth times."""
    lo, hi = trigger_span(template, rate_hz, threshold_uv, dead_time_s)
    return 0.5 * (lo + hi)


def match_template_events(template: SpikeTemplate, rate_hz: float, threshold_uv: float,
                          spike_times_s, detected, window_s: float = MATCH_WINDOW_S,
                          dead_time_s: float = DEAD_TIME_S) -> DetectionReport:
    """Match detections against spike times of a known template.

    Truth is moved to the centre of the trigger span and the match window is
    widened by half the span, so a detection on any plausible lobe counts.
    """
    lo, hi = trigger_span(template, rate_hz, threshold_uv, dead_time_s)
    truth = ElectrodeGroundTruth(template.electrode_id, np.asarray(spike_times_s, dtype=float))
    return match_events(truth.shifted(0.5 * (lo + hi)), detected, window_s + 0.5 * (hi - lo))


# ---------------------------------------------------------------------------
# Compression
# ---------------------------------------------------------------------------


def compression_ratio(full_rate: float, acquired: float) -> float:
    """Full-rate volume over acquired (or transmitted) volume."""
    if acquired <= 0:
        raise ZeroDivisionError("nothing acquired or transmitted")
    return full_rate / acquired


def acquisition_cr(cost) -> float:
    """Full-rate sample commands over executed commands for an ``AcquisitionCost``."""
    return compression_ratio(cost.total_rounds * len(cost.executed), cost.total_executed)


def transmission_cr(n_channels: int, n_samples: int, transmitted_bits: int,
                    bits_per_sample: int = 16) -> float:
    return compression_ratio(n_channels * n_samples * bits_per_sample, transmitted_bits)


# ---------------------------------------------------------------------------
# Error injection
# ---------------------------------------------------------------------------


def inject_errors(truth_train, fnr: float, fpr: float, seed: int) -> np.ndarray:
    """Corrupt a binary spike train with missed and spurious spikes.

    Every 1 is cleared with probability ``fnr``.  Every 0 is set with a
    per-bin probability chosen so the expected number of insertions equals
    ``fpr`` times the number of true spikes.
    """
    if not (0 <= fnr <= 1 and 0 <= fpr <= 1):
        raise ValueError("fnr and fpr must lie in [0, 1]")
    src = np.asarray(truth_train)
    y = src.astype(bool)
    rng = np.random.default_rng(seed)
    out = y.copy()
    n_true = int(y.sum())
    n_idle = y.size - n_true
    drop = rng.random(y.shape) < fnr
    out[y & drop] = False
    p_idle = min(1.0, fpr * n_true / n_idle) if n_idle else 0.0
    add = rng.random(y.shape) < p_idle
    out[~y & add] = True
    return out.astype(src.dtype)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_FIELDS = ("scheme", "config", "cr_acq", "cr_tx", "fnr", "fpr", "sde", "executed_ops")


@dataclass
class ComparisonRow:
    scheme: str
    config: str
    cr_acq: float
    cr_tx: float
    fnr: float
    fpr: float
    sde: float
    executed_ops: int

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}


def write_report(rows: Sequence[ComparisonRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in sorted(rows, key=lambda r: (r.scheme, r.config)):
            w.writerow(row.as_dict())
    return path


# ---------------------------------------------------------------------------
# End-to-end measurement
# ---------------------------------------------------------------------------

EVENT_PACKET_BITS = 16 * 8


def calibration_sigmas(trace: NeuralTrace) -> np.ndarray:
    """Broadband noise sigma of every channel, in uV, from full-rate data."""
    return np.array([estimate_noise_sigma(trace.channel(ch)) for ch in trace.channel_ids])


def detect_channel(trace: NeuralTrace, channel: int, threshold_uv: float,
                   dead_time_s: float = DEAD_TIME_S) -> list[SpikeEvent]:
    """Band-pass and threshold one channel given in ADC counts or uV."""
    return detect_spikes(condition(trace.channel(channel)), threshold_uv, dead_time_s)


@dataclass(frozen=True)
class SchemeResult:
    """Per-electrode detection reports plus cost and payload totals."""

    reports: tuple[DetectionReport, ...]
    executed_ops: int
    full_rate_ops: int
    transmitted_bits: int
    raw_bits: int

    @property
    def fnr(self) -> float:
        return float(np.mean([r.fnr for r in self.reports]))

    @property
    def fpr(self) -> float:
        return float(np.mean([r.fpr for r in self.reports]))

    @property
    def sde(self) -> float:
        return float(np.mean([r.sde for r in self.reports]))

    @property
    def cr_acq(self) -> float:
        return compression_ratio(self.full_rate_ops, self.executed_ops)

    @property
    def cr_tx(self) -> float:
        if self.transmitted_bits <= 0:
            return math.inf
        return compression_ratio(self.raw_bits, self.transmitted_bits)

    def row(self, scheme: str, config: str) -> ComparisonRow:
        return ComparisonRow(scheme, config, self.cr_acq, self.cr_tx, self.fnr, self.fpr, self.sde,
                             self.executed_ops)


def measure_config(recording, config, plan) -> SchemeResult:
    """Acquire, condition and detect a recording under a ``ConfigVector``."""
    from .acquisition import acquire

    trace = recording.trace
    acquired, cost = acquire(trace, config.schedules, plan)
    by_id = {s.electrode_id: s for s in config.schedules}
    reports, n_events = [], 0
    for k, tpl in enumerate(recording.templates):
        sched = by_id[tpl.electrode_id]
        events = detect_channel(acquired, tpl.electrode_id, sched.threshold_uv)
        n_events += len(events)
        reports.append(match_template_events(tpl, sched.realized_rate_hz, sched.threshold_uv,
                                             recording.spike_times_s[k], events))
    n_samples = max(len(s) for s in trace.samples)
    return SchemeResult(tuple(reports), cost.total_executed, cost.total_rounds * trace.n_channels,
                        n_events * EVENT_PACKET_BITS, trace.n_channels * n_samples * 16)


def measure_baseline(recording, roundtrip, cfg, thresholds_uv) -> SchemeResult:
    """Full-rate digitisation, block codec round trip, then standard detection."""
    trace = recording.trace
    reports, bits = [], 0
    for k, tpl in enumerate(recording.templates):
        ch = tpl.electrode_id
        rec, b = roundtrip(trace.values(ch), cfg)
        bits += b
        rate = trace.sample_rate_hz[trace.index(ch)]
        events = detect_spikes(condition(NeuralTrace.from_array(rec, rate, 1.0, [ch])),
                               thresholds_uv[k])
        reports.append(match_template_events(tpl, rate, thresholds_uv[k],
                                             recording.spike_times_s[k], events))
    n_samples = max(len(s) for s in trace.samples)
    full = trace.n_channels * n_samples
    return SchemeResult(tuple(reports), full, full, bits, full * 16)


def run_comparison(recording, model, settings, plan=None, schemes=("adaptive", "dct", "cs"),
                   dct_configs=None, cs_configs=None, uniform_factors=(2, 3)) -> list[ComparisonRow]:
    """One report row per (scheme, config point) on a synthetic recording.

    ``adaptive`` contributes the row at ``settings.epsilon``, a uniform row for
    every factor in ``uniform_factors`` and an adaptive row whose budget was
    chosen to match each uniform row's acquisition CR.  Both baselines detect
    with the per-electrode thresholds the optimizer picks at full rate.
    """
    from .acquisition import DEFAULT_PLAN
    from .baselines import CsConfig, DctConfig, cs_roundtrip, dct_roundtrip
    from .optimizer import OptimizerSettings, epsilon_for_cr, optimize_array, predict_grid, uniform_config

    schemes = tuple(schemes)
    if not schemes:
        raise ValueError("no schemes requested")
    unknown = set(schemes) - {"adaptive", "dct", "cs"}
    if unknown:
        raise ValueError(f"unknown schemes {sorted(unknown)}")
    plan = plan or DEFAULT_PLAN
    templates = recording.templates
    sig = calibration_sigmas(recording.trace)
    rows = []
    if "adaptive" in schemes:
        cv = optimize_array(templates, model, settings, plan, sig)
        rows.append(measure_config(recording, cv, plan).row("adaptive", f"eps={settings.epsilon:g}"))
        grids = [predict_grid(t, model, settings, plan, s) for t, s in zip(templates, sig)]
        for u in uniform_factors:
            cvu = uniform_config(templates, model, u, settings, plan, sig)
            rows.append(measure_config(recording, cvu, plan).row("uniform", f"x={u}"))
            eps, _ = epsilon_for_cr(grids, u, plan)
            cva = optimize_array(templates, model, OptimizerSettings(eps, settings.factor_set,
                                                                     settings.threshold_grid_sigmas),
                                 plan, sig)
            rows.append(measure_config(recording, cva, plan).row("adaptive", f"cr~{u}"))
    if "dct" in schemes or "cs" in schemes:
        raw = uniform_config(templates, model, 1, settings, plan, sig)
        th = [s.threshold_uv for s in raw.schedules]
        for cfg in (dct_configs or [DctConfig(128, k) for k in (8, 16, 32)]) if "dct" in schemes else []:
            rows.append(measure_baseline(recording, dct_roundtrip, cfg, th).row("dct", cfg.label))
        for cfg in (cs_configs or [CsConfig(128, m) for m in (16, 32, 64)]) if "cs" in schemes else []:
            rows.append(measure_baseline(recording, cs_roundtrip, cfg, th).row("cs", cfg.label))
    return rows
