"""Synthetic paired static/event corpus: moving-shape renders at desk scale.

Layout under the corpus root:
    static/<category>/<id>.ppm    8-bit P6 renders
    event/<category>/<id>.evt     DVS-simulated streams
    labels.csv                    path,category_id,domain,split
    manifest.txt                  geometry, timestep count, category names
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import events as ev
from .transfer import LabeledSet


class DatasetError(ValueError):
    pass


class IoError(DatasetError):
    pass


class InvalidConfig(DatasetError):
    pass


class MissingFile(DatasetError):
    pass


class DecodeError(DatasetError):
    pass


SHAPE_KINDS = ("square", "disk", "cross", "bar", "triangle")


# ---------------------------------------------------------------------------
# PPM codec (P6, 8-bit)

def write_ppm(rgb: np.ndarray, path) -> None:
    """rgb: [3, H, W] floats in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    h, w = rgb.shape[1:]
    raw = (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raw.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingFile(f"no such file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        fields_found: list[bytes] = []
        pos = 0
        while len(fields_found) < 4:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":  # comment line
                pos = data.index(b"\n", pos) + 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            fields_found.append(data[start:pos])
        pos += 1  # single whitespace after maxval
        magic, ws, hs, maxval = fields_found
        if magic != b"P6":
            raise DecodeError(f"{path}: not a P6 PPM (magic {magic!r})")
        w, h, mv = int(ws), int(hs), int(maxval)
        if mv != 255:
            raise DecodeError(f"{path}: unsupported maxval {mv}")
        body = data[pos:pos + 3 * w * h]
        if len(body) != 3 * w * h:
            raise DecodeError(f"{path}: truncated pixel data")
        arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    except (ValueError, IndexError) as exc:
        raise DecodeError(f"{path}: malformed PPM header") from exc
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# shape rendering

def shape_mask(kind: str, size: int, cy: float, cx: float, r: float,
               angle: float = 0.0, aspect: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if angle:
        c, s = np.cos(angle), np.sin(angle)
        dy, dx = c * dy - s * dx, s * dy + c * dx
    if aspect != 1.0:
        dy, dx = dy * aspect, dx / aspect
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "cross":
        t = max(1.0, r / 3.0)
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if kind == "bar":
        t = max(1.0, r / 3.0)
        return (np.abs(dx) <= r) & (np.abs(dy) <= t)
    if kind == "triangle":
        inside = (dy >= -r) & (dy <= r)
        return inside & (np.abs(dx) <= (dy + r) / 2.0)
    raise InvalidConfig(f"unknown shape kind {kind!r}")


@dataclass
class SynthConfig:
    categories: tuple[str, ...] = SHAPE_KINDS
    image_size: int = 28
    statics_per_category: int = 200
    event_train_per_category: int = 20
    event_test_per_category: int = 50
    motion_frames: int = 12
    contrast_threshold: float = 0.5
    noise_level: float = 1.5
    timesteps: int = 6
    seed: int = 0

    def __post_init__(self):
        if (self.image_size < 8 or self.statics_per_category < 1
                or self.event_train_per_category < 1
                or self.event_test_per_category < 1 or self.motion_frames < 2
                or self.timesteps < 1 or not self.categories):
            raise InvalidConfig("all counts must be positive and size >= 8")
        for kind in self.categories:
            if kind not in SHAPE_KINDS:
                raise InvalidConfig(f"unknown shape kind {kind!r}")


@dataclass
class DatasetManifest:
    root: str
    entries: list[tuple[str, int, str, str]]  # (relative path, category, domain, split)
    categories: list[str]
    geometry: tuple[int, int]
    timesteps: int


def render_static(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Random textured shape on a dark speckled background, [3, H, W] in [0, 1].

    The render style mirrors what the event simulator produces for the same
    shape kinds (bright textured region, sparse background activity), so the
    two domains depict the same visual content through different sensors."""
    img = np.zeros((3, size, size))
    speckle = rng.random((size, size)) < 0.05
    img[:, speckle] = rng.uniform(0.3, 1.0, size=speckle.sum())
    r = rng.uniform(0.18, 0.34) * size
    cy = rng.uniform(r, size - 1 - r)
    cx = rng.uniform(r, size - 1 - r)
    # orientation and stretch vary freely; the scarce event split cannot
    # cover these axes, the plentiful static split can
    mask = shape_mask(kind, size, cy, cx, r, angle=rng.uniform(0, 2 * np.pi),
                      aspect=rng.uniform(0.7, 1.4))
    texture = rng.uniform(0.45, 0.9, size=(size, size))
    color = rng.uniform(0.3, 1.0, size=3)
    color_ch = int(rng.integers(3))
    img[:, mask] = color[:, None] * texture[mask][None, :]
    img[color_ch, mask] = texture[mask]  # keep the value channel = texture
    return img


def render_motion_sequence(kind: str, size: int, n_frames: int,
                           rng: np.random.Generator) -> tuple[list[np.ndarray], list[int]]:
    """Luminance frames of one shape drifting across a dark background."""
    r = rng.uniform(0.18, 0.34) * size
    margin = r + 1
    cy = rng.uniform(margin, size - 1 - margin)
    cx = rng.uniform(margin, size - 1 - margin)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(0.8, 1.6)
    tilt = rng.uniform(0.0, 2.0 * np.pi)  # shape orientation, fixed per clip
    aspect = rng.uniform(0.7, 1.4)
    vy, vx = speed * np.sin(angle), speed * np.cos(angle)
    # surface texture carried along with the shape so interior pixels also
    # change under motion; otherwise only the outline triggers events
    texture = rng.uniform(0.45, 0.9, size=(size, size))
    ys, xs = np.mgrid[0:size, 0:size]
    frames = []
    for k in range(n_frames):
        y, x = cy + vy * k, cx + vx * k
        # bounce off the borders to keep the shape in frame
        y = _reflect(y, margin, size - 1 - margin)
        x = _reflect(x, margin, size - 1 - margin)
        lum = np.full((size, size), 0.05)
        mask = shape_mask(kind, size, y, x, r, angle=tilt, aspect=aspect)
        ty = np.mod(ys - int(round(y - cy)), size)
        tx = np.mod(xs - int(round(x - cx)), size)
        lum[mask] = texture[ty[mask], tx[mask]]
        frames.append(lum)
    stamps = [k * 1000 for k in range(n_frames)]
    return frames, stamps


def _reflect(v: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return lo
    span = hi - lo
    v = (v - lo) % (2 * span)
    return lo + (span - abs(v - span))


def _inject_noise(stream: ev.EventStream, level: float,
                  rng: np.random.Generator) -> ev.EventStream:
    """Add uniformly random spurious events, count = level * signal count."""
    n = int(level * len(stream.events))
    if n == 0:
        return stream
    t_max = stream.events[-1].t if stream.events else 1000
    noise = [ev.Event(int(rng.integers(0, t_max + 1)),
                      int(rng.integers(0, stream.width)),
                      int(rng.integers(0, stream.height)),
                      int(rng.integers(0, 2))) for _ in range(n)]
    merged = sorted(stream.events + noise, key=lambda e: (e.t, e.y, e.x, e.p))
    return ev.EventStream(width=stream.width, height=stream.height, events=merged)


def generate_synthetic_pair_set(cfg: SynthConfig, root) -> DatasetManifest:
    """Render the full corpus to disk, deterministically under cfg.seed."""
    root = str(root)
    try:
        os.makedirs(root, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {root}: {exc}") from exc
    entries: list[tuple[str, int, str, str]] = []
    for ci, kind in enumerate(cfg.categories):
        sdir = os.path.join(root, "static", kind)
        edir = os.path.join(root, "event", kind)
        os.makedirs(sdir, exist_ok=True)
        os.makedirs(edir, exist_ok=True)
        for i in range(cfg.statics_per_category):
            rng = np.random.default_rng([cfg.seed, 0, ci, i])
            rel = f"static/{kind}/{i:04d}.ppm"
            write_ppm(render_static(kind, cfg.image_size, rng),
                      os.path.join(root, rel))
            entries.append((rel, ci, "static", "train"))
        n_event = cfg.event_train_per_category + cfg.event_test_per_category
        for i in range(n_event):
            rng = np.random.default_rng([cfg.seed, 1, ci, i])
            frames, stamps = render_motion_sequence(kind, cfg.image_size,
                                                    cfg.motion_frames, rng)
            stream = ev.simulate_dvs(frames, stamps, cfg.contrast_threshold)
            stream = _inject_noise(stream, cfg.noise_level, rng)
            rel = f"event/{kind}/{i:04d}.evt"
            ev.write_event_file(stream, os.path.join(root, rel))
            split = "train" if i < cfg.event_train_per_category else "test"
            entries.append((rel, ci, "event", split))
    entries.sort()
    manifest = DatasetManifest(root=root, entries=entries,
                               categories=list(cfg.categories),
                               geometry=(cfg.image_size, cfg.image_size),
                               timesteps=cfg.timesteps)
    _write_manifest(manifest)
    return manifest


def _write_manifest(m: DatasetManifest) -> None:
    with open(os.path.join(m.root, "labels.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("path,category_id,domain,split\n")
        for rel, ci, domain, split in m.entries:
            fh.write(f"{rel},{ci},{domain},{split}\n")
    with open(os.path.join(m.root, "manifest.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(f"width = {m.geometry[1]}\n")
        fh.write(f"height = {m.geometry[0]}\n")
        fh.write(f"timesteps = {m.timesteps}\n")
        fh.write(f"categories = {','.join(m.categories)}\n")


def read_manifest(root) -> DatasetManifest:
    root = str(root)
    labels = os.path.join(root, "labels.csv")
    mpath = os.path.join(root, "manifest.txt")
    if not os.path.exists(labels) or not os.path.exists(mpath):
        raise MissingFile(f"{root}: labels.csv or manifest.txt missing")
    meta: dict[str, str] = {}
    with open(mpath, encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
    entries = []
    with open(labels, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            rel, ci, domain, split = line.strip().split(",")
            entries.append((rel, int(ci), domain, split))
    return DatasetManifest(root=root, entries=entries,
                           categories=meta["categories"].split(","),
                           geometry=(int(meta["height"]), int(meta["width"])),
                           timesteps=int(meta["timesteps"]))


@dataclass
class LoadedData:
    static_train: LabeledSet
    event_train: LabeledSet
    event_test: LabeledSet
    manifest: DatasetManifest


def load_dataset(root, timesteps: int | None = None) -> LoadedData:
    """Load the corpus: statics as [3, H, W] reals, events frame-integrated."""
    m = read_manifest(root)
    t = timesteps if timesteps is not None else m.timesteps
    statics, s_labels = [], []
    ev_train, ev_train_labels = [], []
    ev_test, ev_test_labels = [], []
    for rel, ci, domain, split in m.entries:
        path = os.path.join(m.root, rel)
        if not os.path.exists(path):
            raise MissingFile(f"manifest entry missing on disk: {path}")
        if domain == "static":
            statics.append(read_ppm(path))
            s_labels.append(ci)
        else:
            try:
                stream = ev.read_event_file(path)
            except ev.EventError as exc:
                raise DecodeError(f"{path}: {exc}") from exc
            frames = ev.integrate_frames(stream, t).values
            if split == "train":
                ev_train.append(frames)
                ev_train_labels.append(ci)
            else:
                ev_test.append(frames)
                ev_test_labels.append(ci)
    return LoadedData(
        static_train=LabeledSet(statics, np.asarray(s_labels)),
        event_train=LabeledSet(ev_train, np.asarray(ev_train_labels)),
        event_test=LabeledSet(ev_test, np.asarray(ev_test_labels)),
        manifest=m)
