"""Trace containers and the headstage conditioning chain.

The chain mirrors what runs on the FPGA after the ADC: a causal band-pass,
per-channel noise normalisation (whitening) and negative threshold-crossing
detection.  ``resample_trace`` stands in for the analog front-end: it
reconstructs the band-limited waveform and re-digitises it on a new grid.
"""

from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

log = logging.getLogger(__name__)

BASE_RATE_HZ = 30_000.0
TEMPLATE_LEN = 61

KERNEL_HALF_WIDTH = 64
KAISER_BETA = 8.6
ANTIALIAS_FRACTION = 0.45

BAND_LOW_HZ = 300.0
BAND_HIGH_HZ = 3000.0
BAND_ORDER = 2  # prototype order; band-pass transform doubles it to 4
CLAMP_BELOW_RATE_HZ = 6700.0

DEAD_TIME_S = 2.5e-3
MAD_SCALE = 0.6745


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeuralTrace:
    """Multi-channel recording whose channels may run at different rates.

    ``samples`` holds one 1-D array per channel.  Raw acquisitions are int16
    ADC counts; processed traces keep the same count scale in float64.
    Physical values are ``samples * uv_per_count`` expressed in ``unit``
    (``"uV"`` everywhere except whitened traces, which are in ``"sigma"``).
    """

    samples: tuple[np.ndarray, ...]
    sample_rate_hz: tuple[float, ...]
    uv_per_count: float
    channel_ids: tuple[int, ...]
    unit: str = "uV"

    def __post_init__(self):
        n = len(self.samples)
        if n == 0:
            raise ValueError("trace has no channels")
        if len(self.sample_rate_hz) != n or len(self.channel_ids) != n:
            raise ValueError("samples, sample_rate_hz and channel_ids differ in length")
        if not self.uv_per_count > 0:
            raise ValueError(f"uv_per_count must be positive, got {self.uv_per_count}")
        if any(not r > 0 for r in self.sample_rate_hz):
            raise ValueError("sample rates must be positive")
        if any(c < 0 for c in self.channel_ids):
            raise ValueError("channel ids must be non-negative")
        if len(set(self.channel_ids)) != n:
            raise ValueError("channel ids must be unique")
        for s in self.samples:
            if s.ndim != 1:
                raise ValueError("each channel must be one-dimensional")
        # channels may be produced by rounding a fractional sample count, so a
        # common duration only has to hold to one sample at each channel's rate
        lo = max((len(s) - 1 - 1e-9 * len(s)) / r for s, r in zip(self.samples, self.sample_rate_hz))
        hi = min((len(s) + 1 + 1e-9 * len(s)) / r for s, r in zip(self.samples, self.sample_rate_hz))
        if lo > hi:
            raise ValueError("channel lengths disagree with a common duration")

    @classmethod
    def from_array(cls, data, sample_rate_hz: float, uv_per_count: float = 1.0,
                   channel_ids: Sequence[int] | None = None, unit: str = "uV") -> "NeuralTrace":
        """Build a uniform-rate trace from a (n_channels, n_samples) array."""
        data = np.asarray(data)
        if data.ndim == 1:
            data = data[None, :]
        if channel_ids is None:
            channel_ids = range(data.shape[0])
        return cls(
            samples=tuple(np.array(row) for row in data),
            sample_rate_hz=tuple(float(sample_rate_hz) for _ in range(data.shape[0])),
            uv_per_count=float(uv_per_count),
            channel_ids=tuple(int(c) for c in channel_ids),
            unit=unit,
        )

    @property
    def n_channels(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return max(len(s) / r for s, r in zip(self.samples, self.sample_rate_hz))

    def index(self, channel: int) -> int:
        try:
            return self.channel_ids.index(channel)
        except ValueError:
            raise KeyError(f"unknown channel {channel}") from None

    def channel(self, channel: int) -> "NeuralTrace":
        i = self.index(channel)
        return replace(self, samples=(self.samples[i],),
                       sample_rate_hz=(self.sample_rate_hz[i],),
                       channel_ids=(channel,))

    def values(self, channel: int | None = None) -> np.ndarray:
        """Physical values of one channel (the only one if ``channel`` is None)."""
        i = 0 if channel is None else self.index(channel)
        if channel is None and self.n_channels != 1:
            raise ValueError("channel must be given for multi-channel traces")
        return self.samples[i] * self.uv_per_count

    @property
    def rate(self) -> float:
        """Sample rate of a single-channel trace."""
        if self.n_channels != 1:
            raise ValueError("rate is only defined for single-channel traces")
        return self.sample_rate_hz[0]

    def is_uniform(self) -> bool:
        return len(set(self.sample_rate_hz)) == 1 and len({len(s) for s in self.samples}) == 1


def stack_channels(traces: Sequence[NeuralTrace]) -> NeuralTrace:
    """Concatenate single- or multi-channel traces that share scale and unit."""
    first = traces[0]
    for t in traces[1:]:
        if t.uv_per_count != first.uv_per_count or t.unit != first.unit:
            raise ValueError("cannot stack traces with different scaling")
    return NeuralTrace(
        samples=tuple(s for t in traces for s in t.samples),
        sample_rate_hz=tuple(r for t in traces for r in t.sample_rate_hz),
        uv_per_count=first.uv_per_count,
        channel_ids=tuple(c for t in traces for c in t.channel_ids),
        unit=first.unit,
    )


@dataclass(frozen=True)
class SpikeTemplate:
    electrode_id: int
    waveform: np.ndarray = field(repr=False)
    base_rate_hz: float = BASE_RATE_HZ

    def __post_init__(self):
        wf = np.asarray(self.waveform, dtype=float)
        object.__setattr__(self, "waveform", wf)
        if wf.shape != (TEMPLATE_LEN,):
            raise ValueError(f"template must have {TEMPLATE_LEN} samples, got {wf.shape}")
        if not np.any(np.abs(wf) > 0):
            raise ValueError("template is identically zero")
        if not self.base_rate_hz > 0:
            raise ValueError("base_rate_hz must be positive")

    @classmethod
    def ingest(cls, electrode_id: int, waveform, base_rate_hz: float = BASE_RATE_HZ) -> "SpikeTemplate":
        """Center-crop or zero-pad an arbitrary-length waveform to the fixed length."""
        wf = np.asarray(waveform, dtype=float).ravel()
        n = len(wf)
        if n > TEMPLATE_LEN:
            start = (n - TEMPLATE_LEN) // 2
            wf = wf[start:start + TEMPLATE_LEN]
        elif n < TEMPLATE_LEN:
            before = (TEMPLATE_LEN - n) // 2
            wf = np.pad(wf, (before, TEMPLATE_LEN - n - before))
        return cls(electrode_id, wf, base_rate_hz)

    @property
    def peak_uv(self) -> float:
        """Largest absolute amplitude."""
        return float(np.max(np.abs(self.waveform)))

    @property
    def trough_index(self) -> int:
        return int(np.argmin(self.waveform))


@dataclass(frozen=True)
class SpikeEvent:
    electrode_id: int
    time_s: float
    peak_amplitude: float


# ---------------------------------------------------------------------------
# Band-limited resampling
# ---------------------------------------------------------------------------


def _sinc_kernel(offsets: np.ndarray, cutoff: float, half_width: float) -> np.ndarray:
    """Kaiser-windowed sinc low-pass evaluated at ``offsets`` (input samples).

    ``cutoff`` is in cycles per input sample.
    """
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * offsets)
    ratio = np.clip(offsets / half_width, -1.0, 1.0)
    w = np.i0(KAISER_BETA * np.sqrt(1.0 - ratio ** 2)) / np.i0(KAISER_BETA)
    return h * w


def _kernel_geometry(src_rate: float, dst_rate: float) -> tuple[float, int]:
    slow = min(src_rate, dst_rate)
    cutoff = ANTIALIAS_FRACTION * slow / src_rate
    half = KERNEL_HALF_WIDTH * src_rate / slow
    return cutoff, int(np.ceil(half))


def _resample_direct(x: np.ndarray, src_rate: float, dst_rate: float, n_out: int,
                     chunk: int = 4096) -> np.ndarray:
    """Evaluate the interpolant output by output.  Works for any rate ratio."""
    cutoff, half = _kernel_geometry(src_rate, dst_rate)
    pad = half + 1
    xp = np.pad(x, pad, mode="edge")
    taps = np.arange(-half + 1, half + 1)
    out = np.empty(n_out)
    for start in range(0, n_out, chunk):
        k = np.arange(start, min(start + chunk, n_out))
        pos = k * (src_rate / dst_rate)
        base = np.floor(pos).astype(np.int64)
        frac = pos - base
        w = _sinc_kernel(taps[None, :] - frac[:, None], cutoff, half)
        w /= w.sum(axis=1, keepdims=True)
        idx = base[:, None] + taps[None, :] + pad
        out[k] = np.sum(xp[idx] * w, axis=1)
    return out


def _resample_polyphase(x: np.ndarray, p: int, q: int, src_rate: float, dst_rate: float,
                        n_out: int) -> np.ndarray:
    """Same interpolant as ``_resample_direct`` for a rational ratio p/q.

    Output k sits at input position k*q/p; its fractional offset repeats with
    period p, so each of the p phases is one correlation with a fixed kernel.
    """
    cutoff, half = _kernel_geometry(src_rate, dst_rate)
    pad = half + 1
    xp = np.pad(x, pad, mode="edge")
    taps = np.arange(-half + 1, half + 1)
    out = np.empty(n_out)
    for j in range(min(p, n_out)):
        base0, rem = divmod(j * q, p)
        w = _sinc_kernel(taps - rem / p, cutoff, half)
        w /= w.sum()
        corr = sps.oaconvolve(xp, w[::-1], mode="valid")
        first = base0 + pad - half + 1
        ks = np.arange(j, n_out, p)
        out[ks] = corr[first + (ks - j) // p * q]
    return out


def resample_trace(trace: NeuralTrace, channel: int, target_rate_hz: float) -> NeuralTrace:
    """Re-digitise one channel on a new uniform grid starting at t = 0.

    The waveform is reconstructed with a Kaiser-windowed sinc whose cutoff is
    0.45 of the slower of the two rates, so decimation never aliases.  The
    kernel spans 64 periods of the slower grid on each side; past the record
    edges the signal is held at its end values.  Output length is
    ``ceil(n_in * target / source)``.
    """
    if not target_rate_hz > 0:
        raise ValueError(f"target rate must be positive, got {target_rate_hz}")
    i = trace.index(channel)
    x = trace.samples[i]
    src = trace.sample_rate_hz[i]
    single = trace.channel(channel)
    if target_rate_hz == src:
        return replace(single, samples=(x.copy(),))

    n_out = int(np.ceil(len(x) * target_rate_hz / src - 1e-9))
    xf = x.astype(float)
    ratio = Fraction(target_rate_hz / src).limit_denominator(1000)
    if abs(float(ratio) - target_rate_hz / src) <= 1e-12 * target_rate_hz / src:
        y = _resample_polyphase(xf, ratio.numerator, ratio.denominator, src, target_rate_hz, n_out)
    else:
        y = _resample_direct(xf, src, target_rate_hz, n_out)
    return replace(single, samples=(y,), sample_rate_hz=(float(target_rate_hz),))


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _warn_clamp(rate: float, high: float) -> None:
    log.warning("sample rate %.1f Hz too low for %.0f Hz band edge; clamping to %.1f Hz",
                rate, BAND_HIGH_HZ, high)


def passband_for_rate(rate_hz: float) -> tuple[float, float]:
    """Default pass band, with the upper edge clamped for slow channels."""
    high = BAND_HIGH_HZ
    if rate_hz < CLAMP_BELOW_RATE_HZ:
        high = min(BAND_HIGH_HZ, ANTIALIAS_FRACTION * rate_hz)
        _warn_clamp(float(rate_hz), high)
    return BAND_LOW_HZ, high


@functools.lru_cache(maxsize=64)
def bandpass_sos(rate_hz: float, low_hz: float = BAND_LOW_HZ,
                 high_hz: float = BAND_HIGH_HZ) -> np.ndarray:
    if high_hz >= rate_hz / 2:
        raise ValueError(f"upper cutoff {high_hz} Hz is at or above Nyquist for {rate_hz} Hz")
    if not 0 < low_hz < high_hz:
        raise ValueError(f"invalid band ({low_hz}, {high_hz})")
    sos = sps.butter(BAND_ORDER, [low_hz, high_hz], btype="bandpass", fs=rate_hz, output="sos")
    sos.setflags(write=False)
    return sos


def bandpass_filter(trace: NeuralTrace, low_hz: float = BAND_LOW_HZ,
                    high_hz: float = BAND_HIGH_HZ) -> NeuralTrace:
    """Causal Butterworth band-pass as a cascade of two biquads.

    Raises ``ValueError`` when ``high_hz`` is not below Nyquist; use
    :func:`passband_for_rate` to pick a legal band for decimated channels.
    """
    sos = bandpass_sos(float(trace.rate), float(low_hz), float(high_hz))
    y = sps.sosfilt(sos.copy(), trace.samples[0].astype(float))
    return replace(trace, samples=(y,))


def condition(trace: NeuralTrace) -> NeuralTrace:
    """Band-pass with the rate-appropriate (possibly clamped) band."""
    return bandpass_filter(trace, *passband_for_rate(trace.rate))


def filter_noise_gain(rate_hz: float, n: int = 1 << 15) -> float:
    """RMS gain of the default conditioning filter for unit white noise."""
    imp = np.zeros(n)
    imp[0] = 1.0
    sos = bandpass_sos(float(rate_hz), *passband_for_rate(rate_hz))
    return float(np.sqrt(np.sum(sps.sosfilt(sos.copy(), imp) ** 2)))


def estimate_noise_sigma(trace: NeuralTrace) -> float:
    """Robust noise scale: median absolute deviation / 0.6745, in trace units."""
    v = trace.values()
    if len(v) < 100:
        raise ValueError(f"need at least 100 samples to estimate noise, got {len(v)}")
    return float(np.median(np.abs(v - np.median(v))) / MAD_SCALE)


def whiten(trace: NeuralTrace, sigma: float) -> NeuralTrace:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return replace(trace, samples=(trace.values() / sigma,), uv_per_count=1.0, unit="sigma")


def detect_spikes(trace: NeuralTrace, threshold: float,
                  dead_time_s: float = DEAD_TIME_S) -> list[SpikeEvent]:
    """Negative threshold crossings, one event per excursion.

    An excursion is a maximal run of samples strictly below ``threshold``;
    its event sits on the most negative sample.  An excursion that starts
    within ``dead_time_s`` of the previous emitted event is dropped.
    ``peak_amplitude`` is reported in the trace's unit.
    """
    if not threshold < 0:
        raise ValueError(f"threshold must be negative, got {threshold}")
    if dead_time_s < 0:
        raise ValueError("dead time must be non-negative")
    v = trace.values()
    rate = trace.rate
    below = np.concatenate(([False], v < threshold, [False]))
    edges = np.flatnonzero(np.diff(below.view(np.int8)))
    starts, stops = edges[0::2], edges[1::2]
    if len(starts) == 0:
        return []
    channel = trace.channel_ids[0]
    dead = dead_time_s * rate
    events = []
    last = -np.inf
    for a, b in zip(starts.tolist(), stops.tolist()):
        if a - last < dead:
            continue
        k = a + int(np.argmin(v[a:b]))
        events.append(SpikeEvent(channel, k / rate, float(v[k])))
        last = k
    return events


def detect_in_uv(filtered: NeuralTrace, threshold_uv: float,
                 dead_time_s: float = DEAD_TIME_S) -> list[SpikeEvent]:
    """Headstage detection: whiten by the channel's own noise, then threshold.

    ``threshold_uv`` refers to the filtered signal; it is converted to sigmas
    with the same noise estimate used for whitening, so the crossing set is
    the one a direct microvolt threshold would give.
    """
    sigma = estimate_noise_sigma(filtered)
    if sigma <= 0:
        return detect_spikes(filtered, threshold_uv, dead_time_s)
    white = whiten(filtered, sigma)
    events = detect_spikes(white, threshold_uv / sigma, dead_time_s)
    return [replace(e, peak_amplitude=e.peak_amplitude * sigma) for e in events]


# ---------------------------------------------------------------------------
# Binary ingestion
# ---------------------------------------------------------------------------


def save_trace(trace: NeuralTrace, path: str | Path) -> tuple[Path, Path]:
    """Write channel-interleaved little-endian int16 plus a JSON sidecar."""
    if not trace.is_uniform():
        raise ValueError("only uniform-rate traces can be written interleaved")
    path = Path(path)
    data = np.stack([np.rint(s) for s in trace.samples], axis=1)
    if data.min(initial=0) < -32768 or data.max(initial=0) > 32767:
        raise ValueError("samples exceed the int16 range")
    data.astype("<i2").tofile(path)
    meta = {
        "n_channels": trace.n_channels,
        "sample_rate_hz": trace.sample_rate_hz[0],
        "uv_per_count": trace.uv_per_count,
        "channel_ids": list(trace.channel_ids),
    }
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def load_trace(path: str | Path) -> NeuralTrace:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    n_ch = int(meta["n_channels"])
    raw = np.fromfile(path, dtype="<i2")
    if raw.size % n_ch:
        raise ValueError(f"{path}: {raw.size} samples is not a multiple of {n_ch} channels")
    data = raw.reshape(-1, n_ch).T.astype(np.int16)
    return NeuralTrace.from_array(data, meta["sample_rate_hz"], meta["uv_per_count"],
                                  meta.get("channel_ids"))
