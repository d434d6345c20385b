"""Training engine: static encoding, paired sampling, sliding replacement,
the per-batch update, and the epoch loop with CSV metrics."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import snn
from .autodiff import Tensor

MODES = ("baseline", "transfer", "transfer_no_slide", "dal_only", "mmd")


class OutOfRangePixel(ValueError):
    pass


class MissingCategory(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class EmptyTestSet(ValueError):
    pass


class InvalidConfig(ValueError):
    pass


@dataclass
class SlideState:
    b_i: int   # batch index within epoch, 0-based
    b_l: int   # batches per epoch
    e_c: int   # current epoch, 0-based
    e_m: int   # max epochs
    e_s: int   # epoch at which the transfer loss stops


def replacement_probability(s: SlideState) -> float:
    """Cubic ramp of global batch progress toward the e_s boundary, clamped at 1."""
    frac = (s.b_i + s.e_c * s.b_l) / (s.e_s * s.b_l)
    return min(1.0, frac ** 3)


# ---------------------------------------------------------------------------
# static-image encoding

def hsv_value(rgb: np.ndarray) -> np.ndarray:
    """Value channel of HSV: per-pixel max over R, G, B."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ad.ShapeMismatch(f"hsv_value expects [3, H, W], got {rgb.shape}")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise OutOfRangePixel(f"pixel values outside [0, 1]: "
                              f"[{rgb.min():.4f}, {rgb.max():.4f}]")
    return rgb.max(axis=0)


def encode_static(image: np.ndarray, timesteps: int) -> np.ndarray:
    """Duplicate a static image into [T, 2, H, W].

    RGB images go through the HSV value channel; grayscale [H, W] or
    [1, H, W] images replicate directly.  Both polarity channels are equal
    and the frame repeats at every step.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 3:
        v = hsv_value(image)
    elif image.ndim == 3 and image.shape[0] == 1:
        v = image[0]
    elif image.ndim == 2:
        v = image
    else:
        raise ad.ShapeMismatch(f"encode_static: bad image shape {image.shape}")
    return np.broadcast_to(v, (timesteps, 2) + v.shape).copy()


# ---------------------------------------------------------------------------
# datasets in memory

@dataclass
class LabeledSet:
    """Samples plus integer category labels.

    Static sets hold value-channel images [H, W]; event sets hold
    frame-integrated inputs [T, 2, H, W].
    """
    inputs: list[np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.inputs)

    def by_category(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c)
                for c in np.unique(self.labels)}


@dataclass
class PairedBatch:
    static_inputs: np.ndarray   # [B, T, 2, H, W]
    event_inputs: np.ndarray    # [B, T, 2, H, W]
    labels: np.ndarray          # [B]
    replaced: np.ndarray        # [B] bool


def sample_paired_batch(static_set: LabeledSet, event_set: LabeledSet,
                        batch_size: int, timesteps: int,
                        rng: np.random.Generator) -> PairedBatch:
    """Class-balanced round-robin event draw, each paired with a uniform
    same-category static sample."""
    ev_cats = event_set.by_category()
    st_cats = static_set.by_category()
    cats = sorted(ev_cats)
    missing = [c for c in cats if c not in st_cats]
    if missing or not cats:
        raise MissingCategory(f"categories missing from static set: {missing}")
    statics = []
    events = []
    labels = []
    for m in range(batch_size):
        c = cats[m % len(cats)]
        ei = int(rng.choice(ev_cats[c]))
        si = int(rng.choice(st_cats[c]))
        events.append(event_set.inputs[ei])
        statics.append(encode_static(static_set.inputs[si], timesteps))
        labels.append(c)
    return PairedBatch(static_inputs=np.stack(statics),
                       event_inputs=np.stack(events),
                       labels=np.asarray(labels, dtype=np.int64),
                       replaced=np.zeros(batch_size, dtype=bool))


def sample_event_batch(event_set: LabeledSet, batch_size: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced round-robin draw from the event set alone."""
    ev_cats = event_set.by_category()
    cats = sorted(ev_cats)
    if not cats:
        raise MissingCategory("event set is empty")
    inputs = []
    labels = []
    for m in range(batch_size):
        c = cats[m % len(cats)]
        ei = int(rng.choice(ev_cats[c]))
        inputs.append(event_set.inputs[ei])
        labels.append(c)
    return np.stack(inputs), np.asarray(labels, dtype=np.int64)


def apply_sliding_replacement(batch: PairedBatch, p: float,
                              rng: np.random.Generator) -> PairedBatch:
    """Independently swap each static slot for its paired event input with
    probability p."""
    if not 0.0 <= p <= 1.0:
        raise InvalidConfig(f"replacement probability {p} outside [0, 1]")
    draw = rng.random(batch.labels.shape[0]) < p
    statics = batch.static_inputs.copy()
    statics[draw] = batch.event_inputs[draw]
    return PairedBatch(static_inputs=statics, event_inputs=batch.event_inputs,
                       labels=batch.labels, replaced=batch.replaced | draw)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    """Adam moment accumulators keyed by parameter name."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_update(params: list[tuple[str, Tensor]], opt: OptimizerState) -> None:
    opt.step += 1
    b1c = 1.0 - opt.beta1 ** opt.step
    b2c = 1.0 - opt.beta2 ** opt.step
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = opt.m.setdefault(name, np.zeros_like(p.data))
        v = opt.v.setdefault(name, np.zeros_like(p.data))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.data = p.data - opt.lr * (m / b1c) / (np.sqrt(v / b2c) + opt.eps)


def zero_grads(params: list[tuple[str, Tensor]]) -> None:
    for _, p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    arch: str = "15C5-AP2-40C5-AP2-FC-FC"
    timesteps: int = 6
    classes: int = 5
    batch_size: int = 16
    epochs: int = 30
    e_s: int = 0              # 0 means "same as epochs"
    lr: float = 1e-3
    lambda_cls_s: float = 1.0
    lambda_kt: float = 0.5
    tet_lambda: float = 0.05
    tet_phi: float = 0.5
    tau: float = 0.5
    v_th: float = 0.5
    surrogate_width: float = 1.0
    seed: int = 1
    mode: str = "transfer"
    static_dir: str = ""
    event_dir: str = ""
    out_dir: str = "out"

    def __post_init__(self):
        if self.e_s == 0:
            self.e_s = self.epochs
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")

    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(lambda_cls_s=self.lambda_cls_s,
                             lambda_kt=self.lambda_kt,
                             tet_lambda=self.tet_lambda, tet_phi=self.tet_phi)

    def lif(self) -> snn.LIFConfig:
        return snn.LIFConfig(tau=self.tau, v_th=self.v_th,
                             surrogate_width=self.surrogate_width)

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    if key not in _CONFIG_TYPES:
        raise InvalidConfig(f"unknown config key {key!r}")
    kind = _CONFIG_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {key!r}: {raw!r}") from exc


def parse_config(text: str, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Parse flat `key = value` text, then apply overrides."""
    values: dict = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {ln}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw)
    return TrainConfig(**values)


def load_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)


# ---------------------------------------------------------------------------
# training

@dataclass
class StepReport:
    loss_all: float
    loss_cls_s: float
    loss_kt: float
    p_used: float


def _check_finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLoss(f"{what} is non-finite: {value}")
    return value


def train_step(net: snn.Network, eta: L.EtaParams, batch: PairedBatch,
               s: SlideState, w: L.LossWeights, opt: OptimizerState,
               rng: np.random.Generator, mode: str = "transfer") -> StepReport:
    """One update following the replacement-then-two-forwards recipe."""
    if mode == "transfer_no_slide":
        p = 0.0 if s.e_c < s.e_s else 1.0
    else:
        p = replacement_probability(s)
    batch = apply_sliding_replacement(batch, p, rng)

    trace_s = snn.network_forward(net, batch.static_inputs, head="s")
    trace_t = snn.network_forward(net, batch.event_inputs, head="t")

    cls_s = L.tet_loss(trace_s.head_out["s"], batch.labels, w)
    if mode == "dal_only":
        kt = L.domain_alignment_loss(trace_s.penult, trace_t.penult)
        # the event head still needs its supervised signal (equal mixing)
        kt = ad.scale(ad.add(kt, L.tet_loss(trace_t.head_out["t"], batch.labels, w)), 0.5)
    else:
        metric = "mmd" if mode == "mmd" else "cka"
        kt = L.knowledge_transfer_loss(trace_s.penult, trace_t.penult,
                                       trace_t.head_out["t"], batch.labels,
                                       eta, w, metric=metric)
    kt_active = s.e_c < s.e_s
    loss = L.total_loss(cls_s, kt, w, kt_active)
    _check_finite(loss.item(), "total loss")

    params = net.parameters()
    if mode in ("transfer", "transfer_no_slide", "mmd"):
        params = params + [("eta", eta.eta)]
    zero_grads(params)
    loss.backward()
    optimizer_update(params, opt)
    snn.reset_state(net)
    return StepReport(loss_all=loss.item(), loss_cls_s=cls_s.item(),
                      loss_kt=kt.item(), p_used=p)


def baseline_step(net: snn.Network, inputs: np.ndarray, labels: np.ndarray,
                  w: L.LossWeights, opt: OptimizerState) -> StepReport:
    """Plain event-side update: TET loss through the event head only."""
    trace = snn.network_forward(net, inputs, head="t")
    loss = L.tet_loss(trace.head_out["t"], labels, w)
    _check_finite(loss.item(), "baseline loss")
    params = net.parameters()
    zero_grads(params)
    loss.backward()
    optimizer_update(params, opt)
    snn.reset_state(net)
    return StepReport(loss_all=loss.item(), loss_cls_s=loss.item(),
                      loss_kt=0.0, p_used=1.0)


def evaluate(net: snn.Network, event_test: LabeledSet, batch_size: int = 64) -> float:
    """Accuracy of argmax over the time-averaged event-head readout."""
    if len(event_test) == 0:
        raise EmptyTestSet("no test samples")
    correct = 0
    for start in range(0, len(event_test), batch_size):
        chunk = event_test.inputs[start:start + batch_size]
        labels = event_test.labels[start:start + batch_size]
        trace = snn.network_forward(net, np.stack(chunk), head="t")
        logits = np.mean([o.data for o in trace.head_out["t"]], axis=0)
        correct += int((logits.argmax(axis=1) == labels).sum())
    snn.reset_state(net)
    return correct / len(event_test)


@dataclass
class TrainResult:
    net: snn.Network
    eta: L.EtaParams
    rows: list[dict]
    metrics_path: str | None = None
    model_path: str | None = None


def metrics_header(timesteps: int) -> list[str]:
    return (["epoch", "train_loss_all", "train_loss_cls_s", "train_loss_kt",
             "p_final_batch", "test_acc"]
            + [f"eta_sigmoid_{t}" for t in range(timesteps)])


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_metrics_csv(rows: list[dict], timesteps: int, path) -> None:
    header = metrics_header(timesteps)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[h]) for h in header))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def train(config: TrainConfig, static_train: LabeledSet | None,
          event_train: LabeledSet, event_test: LabeledSet,
          progress=None) -> TrainResult:
    """Run the full schedule and persist metrics plus a checkpoint.

    Fully deterministic given config.seed: sampling, replacement draws,
    and initialization all flow from one generator.
    """
    geom = (2,) + event_train.inputs[0].shape[-2:] if len(event_train) else (2, 0, 0)
    net = snn.build_network(config.arch, geom, config.classes, config.timesteps,
                            cfg=config.lif(), seed=config.seed)
    eta = L.EtaParams.zeros(config.timesteps)
    opt = OptimizerState(lr=config.lr)
    w = config.loss_weights()
    rng = np.random.default_rng(config.seed)
    # an epoch makes two passes over the event pool: event data is scarce by
    # design, and a single pass gives so few optimizer steps per epoch that
    # neither mode converges within a desk-scale epoch budget
    b_l = max(1, -(-2 * len(event_train) // config.batch_size))
    rows: list[dict] = []

    try:
        for e_c in range(config.epochs):
            losses_all, losses_cls, losses_kt = [], [], []
            p_final = 1.0 if config.mode == "baseline" else 0.0
            for b_i in range(b_l):
                if config.mode == "baseline":
                    inputs, labels = sample_event_batch(event_train,
                                                        config.batch_size, rng)
                    report = baseline_step(net, inputs, labels, w, opt)
                else:
                    if static_train is None:
                        raise InvalidConfig(f"mode {config.mode!r} needs a static set")
                    batch = sample_paired_batch(static_train, event_train,
                                                config.batch_size,
                                                config.timesteps, rng)
                    state = SlideState(b_i=b_i, b_l=b_l, e_c=e_c,
                                       e_m=config.epochs, e_s=config.e_s)
                    report = train_step(net, eta, batch, state, w, opt, rng,
                                        mode=config.mode)
                losses_all.append(report.loss_all)
                losses_cls.append(report.loss_cls_s)
                losses_kt.append(report.loss_kt)
                p_final = report.p_used
            acc = evaluate(net, event_test)
            row = {"epoch": e_c,
                   "train_loss_all": float(np.mean(losses_all)),
                   "train_loss_cls_s": float(np.mean(losses_cls)),
                   "train_loss_kt": float(np.mean(losses_kt)),
                   "p_final_batch": p_final,
                   "test_acc": acc}
            for t, sv in enumerate(eta.sigmoid_values()):
                row[f"eta_sigmoid_{t}"] = float(sv)
            rows.append(row)
            if progress is not None:
                progress(row)
    finally:
        metrics_path = model_path = None
        if config.out_dir:
            os.makedirs(config.out_dir, exist_ok=True)
            metrics_path = os.path.join(config.out_dir, "metrics.csv")
            write_metrics_csv(rows, config.timesteps, metrics_path)
            model_path = os.path.join(config.out_dir, "model.mdl")
            snn.save_model(net, model_path)
            with open(os.path.join(config.out_dir, "config_resolved.txt"),
                      "w", encoding="utf-8") as fh:
                fh.write(config.to_text())

    return TrainResult(net=net, eta=eta, rows=rows,
                       metrics_path=metrics_path, model_path=model_path)
