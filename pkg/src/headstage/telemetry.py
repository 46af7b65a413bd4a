"""Wire formats for the config downlink and spike uplink, and the session driver.

Both packet types are little-endian and end in an IEEE CRC-32 over every
preceding byte.  The headstage side only ever sees decoded config packets.
"""

from __future__ import annotations

import json
import logging
import socket
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .acquisition import DEFAULT_PLAN, ClockPlan, ElectrodeSchedule, FactorSet, acquire
from .evaluation import DetectionReport, calibration_sigmas, match_template_events
from .optimizer import ConfigVector, OptimizerSettings, optimize_array
from .signal_core import SpikeEvent, condition, detect_in_uv

log = logging.getLogger(__name__)

VERSION = 1
CONFIG_MAGIC = b"ACFG"
EVENT_MAGIC = b"ASPK"
CONFIG_HEADER = struct.Struct("<4sBHB")
CONFIG_ENTRY = struct.Struct("<BBh")
EVENT_BODY = struct.Struct("<4sBBIh")
CRC = struct.Struct("<I")
EVENT_SIZE = EVENT_BODY.size + CRC.size
I16 = (-32768, 32767)


class PacketError(ValueError):
    """Base class for every decode failure."""


class BadMagic(PacketError):
    pass


class BadCrc(PacketError):
    pass


class Truncated(PacketError):
    pass


class UnsupportedVersion(PacketError):
    pass


class Oversized(PacketError):
    """Bytes left over after a complete packet."""


def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def _tenths(value: float) -> int:
    v = int(round(value * 10))
    if not I16[0] <= v <= I16[1]:
        raise ValueError(f"{value} does not fit a 16-bit tenths field")
    return v


# ---------------------------------------------------------------------------
# Config downlink
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfigEntry:
    electrode_id: int
    factor: int
    threshold_tenths_uv: int

    @property
    def threshold_uv(self) -> float:
        return self.threshold_tenths_uv / 10


@dataclass(frozen=True)
class ConfigPacket:
    epoch: int
    entries: tuple[ConfigEntry, ...]
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not 0 <= self.epoch < 2**16:
            raise ValueError("epoch must fit 16 bits")
        if len(self.entries) > 255:
            raise ValueError("at most 255 electrodes per packet")
        for e in self.entries:
            if not (0 <= e.electrode_id < 256 and 0 < e.factor < 256):
                raise ValueError(f"entry out of range: {e}")
            if not I16[0] <= e.threshold_tenths_uv <= I16[1]:
                raise ValueError(f"threshold out of range: {e}")

    @classmethod
    def from_config(cls, cv: ConfigVector) -> "ConfigPacket":
        return cls(cv.epoch, tuple(ConfigEntry(s.electrode_id, s.factor, _tenths(s.threshold_uv))
                                   for s in cv.schedules))

    def to_config(self, plan: ClockPlan = DEFAULT_PLAN, factors: FactorSet = FactorSet()) -> ConfigVector:
        """Schedules as the headstage reconstructs them (no flags, no targets)."""
        scheds = []
        for e in self.entries:
            if e.factor not in factors:
                raise ValueError(f"factor {e.factor} not supported by this headstage")
            rate = plan.r_max_hz / e.factor
            scheds.append(ElectrodeSchedule(e.electrode_id, rate, e.factor, rate, e.threshold_uv))
        return ConfigVector(tuple(scheds), self.epoch)

    @property
    def size(self) -> int:
        return CONFIG_HEADER.size + CONFIG_ENTRY.size * len(self.entries) + CRC.size


def encode_config(p: ConfigPacket) -> bytes:
    body = CONFIG_HEADER.pack(CONFIG_MAGIC, p.version, p.epoch, len(p.entries))
    body += b"".join(CONFIG_ENTRY.pack(e.electrode_id, e.factor, e.threshold_tenths_uv)
                     for e in p.entries)
    return body + CRC.pack(_crc(body))


def _config_size(data: bytes) -> int:
    return CONFIG_HEADER.size + CONFIG_ENTRY.size * data[7] + CRC.size


def decode_config(data: bytes) -> ConfigPacket:
    data = bytes(data)
    if len(data) < 4 or data[:4] != CONFIG_MAGIC:
        if len(data) < 4 and CONFIG_MAGIC.startswith(data):
            raise Truncated("packet shorter than its magic")
        raise BadMagic(f"expected {CONFIG_MAGIC!r}, got {data[:4]!r}")
    if len(data) < CONFIG_HEADER.size:
        raise Truncated("config header incomplete")
    n = _config_size(data)
    if len(data) < n:
        raise Truncated(f"config packet needs {n} bytes, got {len(data)}")
    (crc,) = CRC.unpack_from(data, n - CRC.size)
    if crc != _crc(data[:n - CRC.size]):
        raise BadCrc("config packet checksum mismatch")
    if len(data) > n:
        raise Oversized(f"{len(data) - n} bytes after config packet")
    _, version, epoch, count = CONFIG_HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"config version {version}")
    entries = tuple(ConfigEntry(*CONFIG_ENTRY.unpack_from(data, CONFIG_HEADER.size + i * CONFIG_ENTRY.size))
                    for i in range(count))
    try:
        return ConfigPacket(epoch, entries, version)
    except ValueError as exc:  # e.g. a zero factor that passed the checksum
        raise PacketError(str(exc)) from None


# ---------------------------------------------------------------------------
# Event uplink
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpikeEventPacket:
    electrode_id: int
    timestamp_ticks: int
    peak_tenths_uv: int
    version: int = VERSION

    def __post_init__(self):
        if not 0 <= self.electrode_id < 256:
            raise ValueError("electrode id must fit 8 bits")
        if not 0 <= self.timestamp_ticks < 2**32:
            raise ValueError("timestamp must fit 32 bits")
        if not I16[0] <= self.peak_tenths_uv <= I16[1]:
            raise ValueError("peak must fit 16 bits")

    @classmethod
    def from_event(cls, event: SpikeEvent, f_clk_hz: float) -> "SpikeEventPacket":
        ticks = int(round(event.time_s * f_clk_hz))
        peak = int(np.clip(round(event.peak_amplitude * 10), *I16))
        return cls(event.electrode_id, ticks, peak)

    def to_event(self, f_clk_hz: float) -> SpikeEvent:
        return SpikeEvent(self.electrode_id, self.timestamp_ticks / f_clk_hz, self.peak_tenths_uv / 10)


def encode_event(p: SpikeEventPacket) -> bytes:
    body = EVENT_BODY.pack(EVENT_MAGIC, p.version, p.electrode_id, p.timestamp_ticks, p.peak_tenths_uv)
    return body + CRC.pack(_crc(body))


def decode_event(data: bytes) -> SpikeEventPacket:
    data = bytes(data)
    if len(data) < 4 or data[:4] != EVENT_MAGIC:
        if len(data) < 4 and EVENT_MAGIC.startswith(data):
            raise Truncated("packet shorter than its magic")
        raise BadMagic(f"expected {EVENT_MAGIC!r}, got {data[:4]!r}")
    if len(data) < EVENT_SIZE:
        raise Truncated(f"event packet needs {EVENT_SIZE} bytes, got {len(data)}")
    (crc,) = CRC.unpack_from(data, EVENT_BODY.size)
    if crc != _crc(data[:EVENT_BODY.size]):
        raise BadCrc("event packet checksum mismatch")
    if len(data) > EVENT_SIZE:
        raise Oversized(f"{len(data) - EVENT_SIZE} bytes after event packet")
    _, version, electrode, ticks, peak = EVENT_BODY.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"event version {version}")
    return SpikeEventPacket(electrode, ticks, peak, version)


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------


class StreamDecoder:
    """Incremental decoder for a byte stream of mixed packets.

    ``feed`` returns decoded packets and typed errors in stream order.  After
    an error the decoder skips to the next magic.  A packet whose checksum
    fails while another magic starts inside it is reported as
    :class:`Truncated`, since the sender evidently cut it short.
    """

    MAGICS = (CONFIG_MAGIC, EVENT_MAGIC)

    def __init__(self):
        self.buf = bytearray()

    def _next_magic(self, start: int) -> int:
        hits = [self.buf.find(m, start) for m in self.MAGICS]
        hits = [h for h in hits if h >= 0]
        return min(hits) if hits else -1

    def feed(self, data: bytes, final: bool = False) -> list:
        self.buf += data
        out = []
        while self.buf:
            k = self._next_magic(0)
            if k != 0:
                # garbage before the next magic (or no magic at all)
                if k < 0:
                    keep = 3 if not final else 0  # a magic may straddle chunks
                    junk = len(self.buf) - keep
                    if junk > 0:
                        out.append(BadMagic(f"skipped {junk} bytes without a magic"))
                        del self.buf[:junk]
                    if not final:
                        break
                    self.buf.clear()
                    break
                out.append(BadMagic(f"skipped {k} bytes before a magic"))
                del self.buf[:k]
                continue
            magic = bytes(self.buf[:4])
            if magic == CONFIG_MAGIC:
                if len(self.buf) < CONFIG_HEADER.size:
                    size = None
                else:
                    size = _config_size(self.buf)
                decode = decode_config
            else:
                size, decode = EVENT_SIZE, decode_event
            if size is None or len(self.buf) < size:
                nxt = self._next_magic(4)
                if nxt > 0:
                    out.append(Truncated(f"packet cut short after {nxt} bytes"))
                    del self.buf[:nxt]
                    continue
                if final:
                    out.append(Truncated(f"stream ended {len(self.buf)} bytes into a packet"))
                    self.buf.clear()
                break
            try:
                out.append(decode(bytes(self.buf[:size])))
                del self.buf[:size]
            except PacketError as exc:
                nxt = self._next_magic(4)
                if isinstance(exc, BadCrc) and 0 < nxt < size:
                    exc = Truncated(f"packet cut short after {nxt} bytes")
                out.append(exc)
                del self.buf[:nxt if nxt > 0 else (size if nxt < 0 else 4)]
        return out

    def close(self) -> list:
        return self.feed(b"", final=True)


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------


class ByteChannel:
    """Ordered in-process byte pipe with an optional drop fault.

    ``drop`` is called with each payload and returns True to lose it.
    """

    def __init__(self, drop=None):
        self.queue: deque[bytes] = deque()
        self.drop = drop
        self.sent = 0
        self.dropped = 0

    def send(self, data: bytes) -> bool:
        self.sent += len(data)
        if self.drop is not None and self.drop(data):
            self.dropped += 1
            return False
        self.queue.append(bytes(data))
        return True

    def receive(self) -> bytes:
        out = b"".join(self.queue)
        self.queue.clear()
        return out


class SocketChannel(ByteChannel):
    """Same contract over a local socket pair."""

    def __init__(self, drop=None):
        super().__init__(drop)
        self.tx, self.rx = socket.socketpair()
        self.rx.setblocking(False)

    def send(self, data: bytes) -> bool:
        self.sent += len(data)
        if self.drop is not None and self.drop(data):
            self.dropped += 1
            return False
        self.tx.sendall(data)
        return True

    def receive(self) -> bytes:
        chunks = []
        while True:
            try:
                chunk = self.rx.recv(65536)
            except BlockingIOError:
                break
            if not chunk:
                break
            chunks.append(chunk)
        return b"".join(chunks)

    def close(self):
        self.tx.close()
        self.rx.close()


def drop_epochs(epochs: Sequence[int]):
    """Fault predicate losing the config packets of the given epochs."""
    lost = set(epochs)

    def pred(data: bytes) -> bool:
        if data[:4] != CONFIG_MAGIC or len(data) < CONFIG_HEADER.size:
            return False
        return CONFIG_HEADER.unpack_from(data)[2] in lost

    return pred


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------


class Headstage:
    """Device-side state: the last decoded config and its epoch."""

    def __init__(self, plan: ClockPlan = DEFAULT_PLAN, factors: FactorSet = FactorSet()):
        self.plan = plan
        self.factors = factors
        self.config: ConfigVector | None = None
        self.decoder = StreamDecoder()

    @property
    def epoch(self) -> int | None:
        return None if self.config is None else self.config.epoch

    def receive_downlink(self, data: bytes) -> list:
        """Apply any config packets in ``data``; returns codec errors."""
        errors = []
        for item in self.decoder.feed(data):
            if isinstance(item, ConfigPacket):
                try:
                    self.config = item.to_config(self.plan, self.factors)
                except ValueError as exc:
                    errors.append(exc)
            elif isinstance(item, Exception):
                errors.append(item)
        return errors

    def stream(self, segment, t0_s: float) -> tuple[list[bytes], object]:
        """Acquire, condition and detect one segment; returns packets and cost."""
        acquired, cost = acquire(segment, self.config.schedules, self.plan)
        by_id = {s.electrode_id: s for s in self.config.schedules}
        packets = []
        for ch in acquired.channel_ids:
            filtered = condition(acquired.channel(ch))
            for e in detect_in_uv(filtered, by_id[ch].threshold_uv):
                ev = SpikeEvent(ch, e.time_s + t0_s, e.peak_amplitude)
                packets.append((ev.time_s, ch, encode_event(SpikeEventPacket.from_event(ev, self.plan.f_clk_hz))))
        packets.sort()
        return [p for _, _, p in packets], cost


@dataclass
class SessionLog:
    records: list[dict] = field(default_factory=list)

    def add(self, kind: str, **fields) -> None:
        self.records.append({"record": kind, **fields})

    def of(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["record"] == kind]

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "SessionLog":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line])

    @property
    def stale(self) -> bool:
        return any(r.get("stale") for r in self.of("segment"))

    def reports(self) -> dict[int, DetectionReport]:
        return {r["electrode_id"]: DetectionReport(r["n_true"], r["n_detected"], r["n_matched"])
                for r in self.of("report")}


def _slice(trace, a: int, b: int):
    from dataclasses import replace
    return replace(trace, samples=tuple(s[a:b] for s in trace.samples))


def run_session(recording, model, settings: OptimizerSettings, plan: ClockPlan = DEFAULT_PLAN,
                duration_s: float | None = None, recalibration_interval_s: float | None = None,
                drop_config_epochs: Sequence[int] = (), log_events: bool = True,
                channel_cls=ByteChannel) -> SessionLog:
    """Calibrate, push the config over the downlink, stream events back.

    The recording is cut into segments of ``recalibration_interval_s``
    (one segment by default).  Each segment starts a new config epoch,
    numbered from 1.  Config packets for ``drop_config_epochs`` are lost on
    the downlink; the headstage then keeps streaming under its previous
    config and the segment is logged as stale.
    """
    trace = recording.trace
    rate = trace.sample_rate_hz[0]
    if not trace.is_uniform():
        raise ValueError("session input must be a uniform full-rate recording")
    n_total = len(trace.samples[0])
    n = n_total if duration_s is None else min(n_total, int(round(duration_s * rate)))
    seg_len = n if not recalibration_interval_s else int(round(recalibration_interval_s * rate))
    seg_len = max(1, seg_len)
    bounds = [(a, min(a + seg_len, n)) for a in range(0, n, seg_len)] or [(0, 0)]

    downlink = channel_cls(drop_epochs(drop_config_epochs) if drop_config_epochs else None)
    uplink = channel_cls()
    headstage = Headstage(plan, settings.factor_set)
    server = StreamDecoder()
    log_ = SessionLog()
    events: dict[int, list[SpikeEvent]] = {ch: [] for ch in trace.channel_ids}
    executed = np.zeros(trace.n_channels, dtype=np.int64)
    rounds = 0
    used: list[tuple[int, int]] = []  # (samples streamed, active epoch)
    issued: dict[int, ConfigVector] = {}
    # offline calibration: broadband noise of every electrode
    sig = calibration_sigmas(trace)

    for epoch, (a, b) in enumerate(bounds, start=1):
        cv = optimize_array(recording.templates, model, settings, plan, sig, epoch=epoch)
        issued[epoch] = cv
        packet = encode_config(ConfigPacket.from_config(cv))
        delivered = downlink.send(packet)
        errors = headstage.receive_downlink(downlink.receive())
        log_.add("config", epoch=epoch, delivered=delivered, active_epoch=headstage.epoch,
                 packet_hex=packet.hex(), flagged=[s.electrode_id for s in cv.schedules if s.flagged],
                 factors=[s.factor for s in cv.schedules],
                 thresholds_uv=[s.threshold_uv for s in cv.schedules])
        for exc in errors:
            log_.add("codec_error", link="downlink", epoch=epoch, error=type(exc).__name__, detail=str(exc))
        if headstage.config is None:
            log_.add("halt", epoch=epoch, reason="no configuration ever received")
            break
        stale = headstage.epoch != epoch
        if stale:
            log.warning("downlink lost epoch %d; streaming on epoch %d", epoch, headstage.epoch)

        n_events = 0
        if b > a:
            packets, cost = headstage.stream(_slice(trace, a, b), a / rate)
            for p in packets:
                uplink.send(p)
            executed += np.array(cost.executed)
            rounds += cost.total_rounds
            for item in server.feed(uplink.receive()):
                if isinstance(item, SpikeEventPacket):
                    ev = item.to_event(plan.f_clk_hz)
                    events[ev.electrode_id].append(ev)
                    n_events += 1
                    if log_events:
                        log_.add("event", electrode_id=item.electrode_id, ticks=item.timestamp_ticks,
                                 peak_uv=item.peak_tenths_uv / 10, epoch=headstage.epoch)
                else:
                    log_.add("codec_error", link="uplink", epoch=epoch, error=type(item).__name__,
                             detail=str(item))
        used.append((b - a, headstage.epoch))
        log_.add("segment", epoch=epoch, active_epoch=headstage.epoch, stale=stale,
                 t0_s=a / rate, t1_s=b / rate, n_events=n_events)
    for item in server.close():
        log_.add("codec_error", link="uplink", epoch=None, error=type(item).__name__, detail=str(item))

    log_.add("cost", channel_ids=list(trace.channel_ids), executed=executed.tolist(),
             skipped=(rounds - executed).tolist(), total_rounds=rounds)
    _final_reports(log_, recording, used, issued, events, n, rate)
    uplink_bits = sum(r["n_events"] for r in log_.of("segment")) * EVENT_SIZE * 8
    full = trace.n_channels * n
    log_.add("summary", n_epochs=len(log_.of("config")), stale=log_.stale,
             executed=int(executed.sum()), full_rate=full,
             cr_acq=full / executed.sum() if executed.sum() else None,
             uplink_bits=uplink_bits, raw_bits=full * 16,
             downlink_bits=downlink.sent * 8)
    return log_


def _final_reports(log_: SessionLog, recording, used, issued, events, n, rate) -> None:
    """Per-electrode detection report over the streamed span.

    Matching uses the schedule that was active for the longest share of the
    session on each electrode; ``flagged`` comes from the server's copy of
    that epoch, since flags never travel over the downlink.
    """
    for k, tpl in enumerate(recording.templates):
        ch = tpl.electrode_id
        truth = recording.spike_times_s[k]
        truth = truth[truth < n / rate]
        if used:
            durations: dict[tuple, int] = {}
            for length, epoch in used:
                s = next(s for s in issued[epoch].schedules if s.electrode_id == ch)
                key = (s.factor, s.threshold_uv, s.realized_rate_hz, s.flagged)
                durations[key] = durations.get(key, 0) + length
            factor, th, r, flagged = max(durations, key=durations.get)
            rep = match_template_events(tpl, r, th, truth, events[ch])
        else:
            factor, th, flagged = None, None, None
            rep = DetectionReport(len(truth), 0, 0)
        log_.add("report", electrode_id=ch, factor=factor, threshold_uv=th, flagged=flagged,
                 **rep.as_dict())
