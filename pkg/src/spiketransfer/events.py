"""DVS event streams: binary codec, frame integration, and simulation.

Event files (".evt") are little-endian:
    magic "EVT1" | width u16 | height u16 | count u32 |
    count records of: t u32 (microseconds) | x u16 | y u16 | p u8
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sHHI")
_RECORD = struct.Struct("<IHHB")
RECORD_SIZE = _RECORD.size
LOG_FLOOR = 1e-3


class EventError(ValueError):
    pass


class BadMagic(EventError):
    pass


class TruncatedRecord(EventError):
    pass


class CoordinateOutOfRange(EventError):
    pass


class NonMonotonicTimestamp(EventError):
    pass


class ZeroSlices(EventError):
    pass


class NonPositiveThreshold(EventError):
    pass


class EmptySequence(EventError):
    pass


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    width: int
    height: int
    events: list[Event] = field(default_factory=list)

    def validate(self) -> None:
        last_t = -1
        for i, ev in enumerate(self.events):
            if ev.t < 0:
                raise NonMonotonicTimestamp(f"event {i}: negative timestamp {ev.t}")
            if ev.t < last_t:
                raise NonMonotonicTimestamp(
                    f"event {i}: timestamp {ev.t} after {last_t}")
            if not (0 <= ev.x < self.width and 0 <= ev.y < self.height):
                raise CoordinateOutOfRange(
                    f"event {i}: ({ev.x}, {ev.y}) outside {self.width}x{self.height}")
            if ev.p not in (0, 1):
                raise CoordinateOutOfRange(f"event {i}: polarity {ev.p} not in {{0,1}}")
            last_t = ev.t

    def __len__(self) -> int:
        return len(self.events)


@dataclass
class FrameTensor:
    """Per-polarity event counts, shape [T, 2, H, W]."""
    values: np.ndarray

    @property
    def slices(self) -> int:
        return self.values.shape[0]


def decode_event_file(data: bytes) -> EventStream:
    """Parse an .evt byte string; errors carry the first offending offset."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"bad magic at offset 0: {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedRecord(f"truncated header at offset {len(data)}")
    _, width, height, count = _HEADER.unpack_from(data, 0)
    events: list[Event] = []
    off = _HEADER.size
    last_t = -1
    for i in range(count):
        if off + RECORD_SIZE > len(data):
            raise TruncatedRecord(f"record {i} truncated at offset {off}")
        t, x, y, p = _RECORD.unpack_from(data, off)
        if x >= width or y >= height:
            raise CoordinateOutOfRange(
                f"record {i} at offset {off}: ({x}, {y}) outside {width}x{height}")
        if p > 1:
            raise CoordinateOutOfRange(
                f"record {i} at offset {off}: polarity {p} not in {{0,1}}")
        if t < last_t:
            raise NonMonotonicTimestamp(
                f"record {i} at offset {off}: timestamp {t} after {last_t}")
        events.append(Event(t, x, y, p))
        last_t = t
        off += RECORD_SIZE
    return EventStream(width=width, height=height, events=events)


def encode_event_file(stream: EventStream) -> bytes:
    stream.validate()
    parts = [_HEADER.pack(MAGIC, stream.width, stream.height, len(stream.events))]
    for ev in stream.events:
        parts.append(_RECORD.pack(ev.t, ev.x, ev.y, ev.p))
    return b"".join(parts)


def read_event_file(path) -> EventStream:
    with open(path, "rb") as fh:
        return decode_event_file(fh.read())


def write_event_file(stream: EventStream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_event_file(stream))


def integrate_frames(stream: EventStream, num_slices: int) -> FrameTensor:
    """Bin events into [T, 2, H, W] count frames by event index.

    Slice j covers event indices [floor(N/T)*j, floor(N/T)*(j+1)); trailing
    events past floor(N/T)*T are dropped.
    """
    if num_slices < 1:
        raise ZeroSlices(f"slice count must be >= 1, got {num_slices}")
    stream.validate()
    t = num_slices
    values = np.zeros((t, 2, stream.height, stream.width), dtype=np.float64)
    per = len(stream.events) // t
    for j in range(t):
        for ev in stream.events[per * j:per * (j + 1)]:
            values[j, ev.p, ev.y, ev.x] += 1.0
    return FrameTensor(values=values)


def simulate_dvs(frames: list[np.ndarray], timestamps: list[int],
                 threshold: float) -> EventStream:
    """Emit events where per-pixel log-luminance crosses multiples of threshold.

    Each pixel keeps a reference log level; upon each frame, floor(|delta|/C)
    events of the matching polarity fire at the frame timestamp and the
    reference advances by that many steps of C.
    """
    if threshold <= 0:
        raise NonPositiveThreshold(f"threshold must be > 0, got {threshold}")
    if len(frames) < 2:
        raise EmptySequence("need at least 2 frames")
    if len(frames) != len(timestamps):
        raise EmptySequence("frames and timestamps must pair up")
    first = np.asarray(frames[0], dtype=np.float64)
    h, w = first.shape
    ref = np.log(np.maximum(first, LOG_FLOOR))
    events: list[Event] = []
    for frame, ts in zip(frames[1:], timestamps[1:]):
        img = np.asarray(frame, dtype=np.float64)
        if img.shape != (h, w):
            raise EmptySequence(f"frame shape {img.shape} differs from {(h, w)}")
        lum = np.log(np.maximum(img, LOG_FLOOR))
        delta = lum - ref
        n = np.floor(np.abs(delta) / threshold).astype(np.int64)
        ys, xs = np.nonzero(n)
        batch = []
        for y, x in zip(ys.tolist(), xs.tolist()):
            k = int(n[y, x])
            pol = 1 if delta[y, x] > 0 else 0
            sign = 1.0 if pol else -1.0
            ref[y, x] += sign * k * threshold
            batch.extend([Event(int(ts), x, y, pol)] * k)
        batch.sort(key=lambda ev: (ev.y, ev.x, ev.p))
        events.extend(batch)
    return EventStream(width=w, height=h, events=events)
