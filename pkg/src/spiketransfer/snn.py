"""Time-stepped spiking network with surrogate-gradient firing.

The trunk is built from layer strings like "15C5-AP2-40C5-AP2-FC-FC";
the final FC token becomes two independent affine heads read out through
a leaky, non-firing membrane integrator.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODEL_MAGIC = b"MDL1"


class SpecParseError(ValueError):
    pass


class GeometryUnderflow(ValueError):
    pass


class NonFiniteActivation(FloatingPointError):
    pass


@dataclass
class LIFConfig:
    tau: float = 0.5
    v_th: float = 0.5
    surrogate_width: float = 1.0
    smooth_mode: bool = False


@dataclass
class LIFState:
    """Carried potential entering the next step (post leak and reset)."""
    u: Tensor
    membrane: Tensor | None = None  # post-integration potential of the last step


def fire(u: Tensor, cfg: LIFConfig) -> Tensor:
    """Spike nonlinearity H(u - v_th) with a rectangular surrogate backward.

    In smooth_mode the forward itself becomes sigmoid((u - v_th)/a) so the
    whole network is differentiable for gradient checking.
    """
    if cfg.smooth_mode:
        return ad.sigmoid(ad.scale(ad.shift(u, -cfg.v_th), 1.0 / cfg.surrogate_width))
    s = (u.data >= cfg.v_th).astype(np.float64)

    def bwd(out: Tensor) -> None:
        ad.accumulate(u, out.grad * surrogate_grad(u, cfg))

    return ad.make_op(s, (u,), bwd)


def surrogate_grad(u: Tensor | np.ndarray, cfg: LIFConfig) -> np.ndarray:
    """dH/du stand-in: (1/a) inside the window |u - v_th| <= a/2."""
    x = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    a = cfg.surrogate_width
    if cfg.smooth_mode:
        z = (x - cfg.v_th) / a
        sig = 1.0 / (1.0 + np.exp(-z))
        return sig * (1.0 - sig) / a
    return np.where(np.abs(x - cfg.v_th) <= a / 2.0, 1.0 / a, 0.0)


def lif_step(state: LIFState, current: Tensor, cfg: LIFConfig) -> tuple[Tensor, LIFState]:
    """One membrane update: integrate, fire, leak the reset potential."""
    if state.u.data.shape != current.data.shape:
        raise ad.ShapeMismatch(
            f"lif_step: state {state.u.data.shape} vs current {current.data.shape}")
    u_int = ad.add(state.u, current)
    s = fire(u_int, cfg)
    keep = ad.shift(ad.scale(s, -1.0), 1.0)  # 1 - s
    carry = ad.scale(ad.mul(u_int, keep), cfg.tau)
    return s, LIFState(u=carry, membrane=u_int)


# ---------------------------------------------------------------------------
# architecture

@dataclass
class ConvLIF:
    weight: Tensor
    padding: int


@dataclass
class AvgPool:
    pass


@dataclass
class DenseLIF:
    weight: Tensor
    bias: Tensor


@dataclass
class Head:
    weight: Tensor
    bias: Tensor


@dataclass
class Network:
    arch: str
    input_geom: tuple[int, int, int]  # (channels, H, W)
    classes: int
    timesteps: int
    cfg: LIFConfig
    trunk: list
    head_s: Head
    head_t: Head
    penult_dim: int
    # transient per-forward state, zeroed by reset_state
    _states: list = field(default_factory=list, repr=False)
    _head_u: dict = field(default_factory=dict, repr=False)

    def parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = []
        for i, layer in enumerate(self.trunk):
            if isinstance(layer, ConvLIF):
                params.append((f"trunk{i}.conv.weight", layer.weight))
            elif isinstance(layer, DenseLIF):
                params.append((f"trunk{i}.fc.weight", layer.weight))
                params.append((f"trunk{i}.fc.bias", layer.bias))
        params.append(("head_s.weight", self.head_s.weight))
        params.append(("head_s.bias", self.head_s.bias))
        params.append(("head_t.weight", self.head_t.weight))
        params.append(("head_t.bias", self.head_t.bias))
        return params


@dataclass
class ForwardTrace:
    penult: list[Tensor]                 # per step, [B, D] post-integration potentials
    head_out: dict[str, list[Tensor]]    # per head, per step [B, K] integrator readouts
    layer_mp: list[np.ndarray] | None = None   # per layer, time-averaged potentials [B, D_l]
    spike_counts: list[float] | None = None    # per layer, total spikes (diagnostics)


_CONV_RE = re.compile(r"^(\d+)C(\d+)$")
_FC_RE = re.compile(r"^FC(\d+)?$")
DEFAULT_HIDDEN_FC = 128


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def build_network(arch: str, input_geom: tuple[int, int, int], classes: int,
                  timesteps: int, cfg: LIFConfig | None = None,
                  seed: int = 0) -> Network:
    """Construct a network from a layer string such as "15C5-AP2-40C5-AP2-FC-FC"."""
    cfg = cfg or LIFConfig()
    rng = np.random.default_rng(seed)
    tokens = arch.split("-")
    if not tokens or not _FC_RE.match(tokens[-1]):
        raise SpecParseError(f"architecture must end with an FC head token: {arch!r}")
    if _FC_RE.match(tokens[-1]).group(1):
        raise SpecParseError("head FC token must be unsized (its width is the class count)")
    c, h, w = input_geom
    trunk: list = []
    for pos, tok in enumerate(tokens[:-1]):
        m = _CONV_RE.match(tok)
        if m:
            n, k = int(m.group(1)), int(m.group(2))
            pad = k // 2
            oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
            if oh < 1 or ow < 1:
                raise GeometryUnderflow(f"token {pos} ({tok}): {oh}x{ow} below 1x1")
            trunk.append(ConvLIF(weight=_he_uniform(rng, (n, c, k, k), c * k * k),
                                 padding=pad))
            c, h, w = n, oh, ow
            continue
        if tok == "AP2":
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise GeometryUnderflow(f"token {pos} (AP2): cannot pool {h}x{w}")
            trunk.append(AvgPool())
            h, w = h // 2, w // 2
            continue
        m = _FC_RE.match(tok)
        if m:
            width = int(m.group(1)) if m.group(1) else DEFAULT_HIDDEN_FC
            fan_in = c * h * w
            trunk.append(DenseLIF(weight=_he_uniform(rng, (fan_in, width), fan_in),
                                  bias=Tensor(np.zeros(width), requires_grad=True)))
            c, h, w = width, 1, 1
            continue
        raise SpecParseError(f"token {pos}: unrecognized {tok!r}")
    penult_dim = c * h * w
    head_s = Head(weight=_he_uniform(rng, (penult_dim, classes), penult_dim),
                  bias=Tensor(np.zeros(classes), requires_grad=True))
    head_t = Head(weight=_he_uniform(rng, (penult_dim, classes), penult_dim),
                  bias=Tensor(np.zeros(classes), requires_grad=True))
    return Network(arch=arch, input_geom=input_geom, classes=classes,
                   timesteps=timesteps, cfg=cfg, trunk=trunk,
                   head_s=head_s, head_t=head_t, penult_dim=penult_dim)


def reset_state(net: Network) -> None:
    """Zero every membrane state and head integrator."""
    net._states = []
    net._head_u = {}


def _flatten(t: Tensor) -> Tensor:
    b = t.data.shape[0]
    return ad.reshape(t, (b, int(np.prod(t.data.shape[1:]))))


def network_forward(net: Network, x: np.ndarray, head: str = "both",
                    record_layers: bool = False,
                    record_spikes: bool = False) -> ForwardTrace:
    """Run T timesteps over a batch [B, T, C, H, W].

    The forward self-resets, so traces are a pure function of (weights, x).
    Head integrators leak with the trunk tau and never fire; their potential
    at each step is the readout.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5 or x.shape[1] != net.timesteps or x.shape[2:] != tuple(net.input_geom):
        raise ad.ShapeMismatch(
            f"network_forward: input {x.shape}, expected [B, {net.timesteps}, "
            f"{net.input_geom[0]}, {net.input_geom[1]}, {net.input_geom[2]}]")
    b = x.shape[0]
    reset_state(net)
    heads = {"s": [net.head_s], "t": [net.head_t], "both": [net.head_s, net.head_t]}
    if head not in heads:
        raise ValueError(f"head must be one of s, t, both; got {head!r}")
    head_layers = dict(zip(("s", "t") if head == "both" else (head,), heads[head]))

    n_lif = sum(isinstance(l, (ConvLIF, DenseLIF)) for l in net.trunk)
    states: list[LIFState | None] = [None] * n_lif
    head_u: dict[str, Tensor] = {}
    penult: list[Tensor] = []
    head_out: dict[str, list[Tensor]] = {k: [] for k in head_layers}
    mp_sum: list[np.ndarray | None] = [None] * n_lif
    spike_totals = [0.0] * n_lif

    for t in range(net.timesteps):
        cur = Tensor(x[:, t])
        li = 0
        penult_t: Tensor | None = None
        for layer in net.trunk:
            if isinstance(layer, ConvLIF):
                drive = ad.conv2d(cur, layer.weight, layer.padding)
            elif isinstance(layer, DenseLIF):
                drive = ad.fully_connected(_flatten(cur), layer.weight, layer.bias)
            else:
                cur = ad.avg_pool2d(cur)
                continue
            if states[li] is None:
                states[li] = LIFState(u=Tensor(np.zeros_like(drive.data)))
            s, states[li] = lif_step(states[li], drive, net.cfg)
            if not np.isfinite(states[li].membrane.data).all():
                raise NonFiniteActivation(f"non-finite membrane in trunk layer {li}")
            if record_layers:
                mp = states[li].membrane.data.reshape(b, -1)
                mp_sum[li] = mp.copy() if mp_sum[li] is None else mp_sum[li] + mp
            if record_spikes:
                spike_totals[li] += float(s.data.sum())
            penult_t = _flatten(states[li].membrane)
            cur = s
            li += 1
        if penult_t is None:  # degenerate trunk-free arch: penult is the input itself
            penult_t = _flatten(cur)
        penult.append(penult_t)
        feat = _flatten(cur)
        for name, hl in head_layers.items():
            drive = ad.fully_connected(feat, hl.weight, hl.bias)
            prev = head_u.get(name)
            u = drive if prev is None else ad.add(ad.scale(prev, net.cfg.tau), drive)
            if not np.isfinite(u.data).all():
                raise NonFiniteActivation(f"non-finite head readout at step {t}")
            head_u[name] = u
            head_out[name].append(u)

    net._states = states
    net._head_u = head_u
    return ForwardTrace(
        penult=penult, head_out=head_out,
        layer_mp=[m / net.timesteps for m in mp_sum] if record_layers else None,
        spike_counts=spike_totals if record_spikes else None)


def layer_names(net: Network) -> list[str]:
    names = []
    i = 0
    for layer in net.trunk:
        if isinstance(layer, ConvLIF):
            names.append(f"conv{i}")
            i += 1
        elif isinstance(layer, DenseLIF):
            names.append(f"fc{i}")
            i += 1
    return names


# ---------------------------------------------------------------------------
# checkpoints

def save_model(net: Network, path) -> None:
    """Write a bit-exact .mdl checkpoint."""
    parts = [MODEL_MAGIC]
    spec_b = net.arch.encode("utf-8")
    parts.append(struct.pack("<H", len(spec_b)))
    parts.append(spec_b)
    c, h, w = net.input_geom
    parts.append(struct.pack("<HHHHHH", c, h, w, net.classes, net.timesteps, 0))
    params = net.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, tensor in params:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", tensor.data.ndim))
        for d in tensor.data.shape:
            parts.append(struct.pack("<I", d))
        parts.append(tensor.data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path, cfg: LIFConfig | None = None) -> Network:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise SpecParseError(f"bad model magic: {data[:4]!r}")
    off = 4
    (slen,) = struct.unpack_from("<H", data, off)
    off += 2
    arch = data[off:off + slen].decode("utf-8")
    off += slen
    c, h, w, classes, timesteps, _ = struct.unpack_from("<HHHHHH", data, off)
    off += 12
    net = build_network(arch, (c, h, w), classes, timesteps, cfg=cfg)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    by_name = dict(net.parameters())
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        if name not in by_name:
            raise SpecParseError(f"unknown parameter {name!r} in checkpoint")
        by_name[name].data = arr.astype(np.float64).copy()
    return net
