"""Synthetic recordings: parametric spike templates in Gaussian white noise.

These stand in for a spike-sorting simulator.  Every electrode carries one
neuron whose waveform is a biphasic template; ground truth is the trough time
of each inserted spike.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal_core import BASE_RATE_HZ, TEMPLATE_LEN, NeuralTrace, SpikeTemplate, load_trace, save_trace

AMPLITUDE_RANGE_UV = (20.0, 400.0)
WIDTH_RANGE_MS = (0.3, 1.0)
NOISE_SIGMA_UV = 5.0
FIRING_RATE_HZ = 20.0
REFRACTORY_S = 3e-3
SEGMENT_S = 10.0
UV_PER_COUNT = 0.195  # Intan RHD2000 LSB


def biphasic_waveform(amplitude_uv: float, width_ms: float, rebound: float = 0.35,
                      base_rate_hz: float = BASE_RATE_HZ) -> np.ndarray:
    """Trough-then-rebound waveform with its trough on the centre sample.

    ``width_ms`` is the full width at half depth of the trough; the rebound is
    twice as wide and ``rebound`` times as deep, peaking 0.8 widths after the
    trough.  Scaled so the most negative sample equals ``-amplitude_uv``.
    """
    t_ms = (np.arange(TEMPLATE_LEN) - TEMPLATE_LEN // 2) / base_rate_hz * 1e3
    s1 = width_ms / 2.3548
    s2 = 2.0 * s1
    trough = -np.exp(-0.5 * (t_ms / s1) ** 2)
    hump = rebound * np.exp(-0.5 * ((t_ms - 0.8 * width_ms) / s2) ** 2)
    wf = trough + hump
    return wf * (amplitude_uv / -wf.min())


def template_bank(n: int, seed: int, amplitude_range=AMPLITUDE_RANGE_UV,
                  width_range=WIDTH_RANGE_MS) -> list[SpikeTemplate]:
    """``n`` random templates, amplitudes log-uniform, widths uniform."""
    rng = np.random.default_rng(seed)
    lo, hi = np.log(amplitude_range[0]), np.log(amplitude_range[1])
    amps = np.exp(rng.uniform(lo, hi, n))
    widths = rng.uniform(*width_range, n)
    rebounds = rng.uniform(0.2, 0.5, n)
    return [SpikeTemplate(i, biphasic_waveform(a, w, r))
            for i, (a, w, r) in enumerate(zip(amps, widths, rebounds))]


def spaced_bank(n: int, seed: int, amplitude_range=(20.0, 300.0)) -> list[SpikeTemplate]:
    """Templates whose amplitudes are evenly log-spaced across the range.

    Used for array-level experiments where every electrode class should be
    represented regardless of the seed.
    """
    rng = np.random.default_rng(seed)
    amps = np.geomspace(*amplitude_range, n)
    rng.shuffle(amps)
    widths = rng.uniform(*WIDTH_RANGE_MS, n)
    rebounds = rng.uniform(0.2, 0.5, n)
    return [SpikeTemplate(i, biphasic_waveform(a, w, r))
            for i, (a, w, r) in enumerate(zip(amps, widths, rebounds))]


def poisson_spike_times(rate_hz: float, duration_s: float, rng: np.random.Generator,
                        refractory_s: float = REFRACTORY_S, margin_s: float = 2e-3) -> np.ndarray:
    """Poisson process with an absolute refractory period, mean rate preserved.

    Times are kept ``margin_s`` away from both ends of the segment.
    """
    if rate_hz <= 0:
        raise ValueError("firing rate must be positive")
    mean_isi = 1.0 / rate_hz
    if mean_isi <= refractory_s:
        raise ValueError("firing rate too high for the refractory period")
    n_max = int(rate_hz * duration_s * 2 + 20)
    isi = refractory_s + rng.exponential(mean_isi - refractory_s, n_max)
    isi[0] = rng.exponential(mean_isi)
    t = margin_s + np.cumsum(isi)
    return t[(t >= margin_s) & (t < duration_s - margin_s)]


def insert_templates(x: np.ndarray, waveform: np.ndarray, times_s: np.ndarray,
                     rate_hz: float) -> np.ndarray:
    """Add ``waveform`` with its centre sample at each time (rounded to the grid)."""
    half = len(waveform) // 2
    centres = np.rint(np.asarray(times_s) * rate_hz).astype(np.int64)
    idx = centres[:, None] + np.arange(-half, len(waveform) - half)[None, :]
    ok = (idx >= 0) & (idx < len(x))
    np.add.at(x, idx[ok], np.broadcast_to(waveform, idx.shape)[ok])
    return centres


@dataclass(frozen=True)
class SyntheticRecording:
    """A multi-electrode recording with its templates and ground truth."""

    trace: NeuralTrace
    templates: tuple[SpikeTemplate, ...]
    spike_times_s: tuple[np.ndarray, ...]
    noise_sigma_uv: float
    seed: int


def synthesize_recording(templates, duration_s: float = SEGMENT_S, seed: int = 0,
                         noise_sigma_uv: float = NOISE_SIGMA_UV,
                         firing_rate_hz: float = FIRING_RATE_HZ,
                         rate_hz: float = BASE_RATE_HZ,
                         uv_per_count: float | None = UV_PER_COUNT) -> SyntheticRecording:
    """One neuron per electrode, independent noise per electrode.

    With ``uv_per_count`` set, samples are quantised to int16 counts like an
    ADC dump; pass ``None`` to keep float microvolts.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate_hz))
    rows, times = [], []
    for tpl in templates:
        x = rng.standard_normal(n) * noise_sigma_uv
        ts = poisson_spike_times(firing_rate_hz, duration_s, rng) if n else np.empty(0)
        ts = np.rint(ts * rate_hz) / rate_hz
        insert_templates(x, tpl.waveform, ts, rate_hz)
        rows.append(x)
        times.append(ts)
    data = np.array(rows).reshape(len(templates), n)
    if uv_per_count is None:
        scale = 1.0
    else:
        scale = uv_per_count
        data = np.clip(np.rint(data / scale), -32768, 32767).astype(np.int16)
    trace = NeuralTrace.from_array(data, rate_hz, scale, [t.electrode_id for t in templates])
    return SyntheticRecording(trace, tuple(templates), tuple(times), noise_sigma_uv, seed)


def save_recording(rec: SyntheticRecording, directory: str | Path) -> Path:
    """Write trace, templates and ground truth into ``directory``.

    Files: ``trace.bin`` (+ ``.json`` sidecar), ``templates.json`` and
    ``ground_truth.json``.  Output is byte-identical for identical input.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_trace(rec.trace, d / "trace.bin")
    tpl = [{"electrode_id": t.electrode_id, "base_rate_hz": t.base_rate_hz,
            "waveform_uv": [float(v) for v in t.waveform]} for t in rec.templates]
    (d / "templates.json").write_text(json.dumps(tpl) + "\n")
    truth = {"seed": rec.seed, "noise_sigma_uv": rec.noise_sigma_uv,
             "spike_times_s": {str(t.electrode_id): [float(v) for v in ts]
                               for t, ts in zip(rec.templates, rec.spike_times_s)}}
    (d / "ground_truth.json").write_text(json.dumps(truth) + "\n")
    return d


def load_recording(directory: str | Path) -> SyntheticRecording:
    d = Path(directory)
    if not (d / "trace.bin").exists():
        raise FileNotFoundError(f"no recording in {d}")
    trace = load_trace(d / "trace.bin")
    templates = tuple(SpikeTemplate(t["electrode_id"], np.array(t["waveform_uv"]), t["base_rate_hz"])
                      for t in json.loads((d / "templates.json").read_text()))
    truth = json.loads((d / "ground_truth.json").read_text())
    times = tuple(np.array(truth["spike_times_s"][str(t.electrode_id)]) for t in templates)
    return SyntheticRecording(trace, templates, times, truth["noise_sigma_uv"], truth["seed"])
