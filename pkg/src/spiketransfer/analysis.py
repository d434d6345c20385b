"""Domain-mismatch diagnostics: cross-layer CKA heatmaps and membrane
histograms, exported as CSV with optional rendered figures."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import snn
from .autodiff import Tensor

DEFAULT_PROBE_SAMPLES = 512


class LayerTapInvalid(ValueError):
    pass


class IoError(OSError):
    pass


@dataclass
class HeatmapResult:
    row_layers: list[str]   # model A taps
    col_layers: list[str]   # model B taps
    matrix: np.ndarray      # CKA values in [0, 1]
    sample_count: int


@dataclass
class HistogramResult:
    layer: str
    edges: np.ndarray       # bins + 1 boundaries
    counts: np.ndarray      # bins occupancy
    sample_count: int


def _collect_features(net: snn.Network, inputs: np.ndarray, taps: list[str],
                      batch_size: int = 64) -> dict[str, np.ndarray]:
    """Time-averaged, flattened membrane potentials per tapped layer."""
    names = snn.layer_names(net)
    bad = [t for t in taps if t not in names]
    if bad:
        raise LayerTapInvalid(f"unknown layer taps {bad}; available: {names}")
    idx = [names.index(t) for t in taps]
    chunks: dict[str, list[np.ndarray]] = {t: [] for t in taps}
    for start in range(0, inputs.shape[0], batch_size):
        trace = snn.network_forward(net, inputs[start:start + batch_size],
                                    head="t", record_layers=True)
        for tap, i in zip(taps, idx):
            chunks[tap].append(trace.layer_mp[i])
    snn.reset_state(net)
    return {t: np.concatenate(chunks[t], axis=0) for t in taps}


def cka_heatmap(model_a: snn.Network, model_b: snn.Network, probe: np.ndarray,
                taps: list[str] | None = None) -> HeatmapResult:
    """Linear CKA between every tapped layer pair of the two models."""
    if model_a.arch != model_b.arch:
        raise LayerTapInvalid("models must share an architecture")
    taps = taps or snn.layer_names(model_a)
    probe = np.asarray(probe, dtype=np.float64)
    feats_a = _collect_features(model_a, probe, taps)
    feats_b = _collect_features(model_b, probe, taps)
    n = len(taps)
    matrix = np.zeros((n, n))
    for i, ta in enumerate(taps):
        ka = L.gram_linear(Tensor(feats_a[ta]))
        for j, tb in enumerate(taps):
            kb = L.gram_linear(Tensor(feats_b[tb]))
            matrix[i, j] = L.cka(ka, kb).item()
    return HeatmapResult(row_layers=list(taps), col_layers=list(taps),
                         matrix=matrix, sample_count=probe.shape[0])


def membrane_histogram(net: snn.Network, inputs: np.ndarray, layer: str,
                       bins: int = 50, batch_size: int = 64) -> HistogramResult:
    """Histogram of one layer's membrane potentials over samples and steps."""
    if bins < 2:
        raise LayerTapInvalid(f"bins must be >= 2, got {bins}")
    names = snn.layer_names(net)
    if layer not in names:
        raise LayerTapInvalid(f"unknown layer {layer!r}; available: {names}")
    li = names.index(layer)
    values = []
    inputs = np.asarray(inputs, dtype=np.float64)
    for start in range(0, inputs.shape[0], batch_size):
        chunk = inputs[start:start + batch_size]
        trace = _forward_all_membranes(net, chunk, li)
        values.append(trace)
    snn.reset_state(net)
    flat = np.concatenate([v.ravel() for v in values])
    lo, hi = float(flat.min()), float(flat.max())
    if hi <= lo:
        hi = lo + 1.0  # single occupied bin for constant data
    counts, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    return HistogramResult(layer=layer, edges=edges, counts=counts,
                           sample_count=inputs.shape[0])


def _forward_all_membranes(net: snn.Network, x: np.ndarray, li: int) -> np.ndarray:
    """Per-step membrane potentials of layer li, shape [T, B, D]."""
    collected = []
    states = None
    for t in range(net.timesteps):
        mem, states = _step_membrane(net, x[:, t], states, li)
        collected.append(mem)
    return np.stack(collected)


def _step_membrane(net: snn.Network, frame: np.ndarray, states, li: int):
    from . import autodiff as ad
    cur = Tensor(frame)
    n_lif = sum(isinstance(l, (snn.ConvLIF, snn.DenseLIF)) for l in net.trunk)
    if states is None:
        states = [None] * n_lif
    target = None
    i = 0
    for layer in net.trunk:
        if isinstance(layer, snn.ConvLIF):
            drive = ad.conv2d(cur, layer.weight, layer.padding)
        elif isinstance(layer, snn.DenseLIF):
            b = cur.data.shape[0]
            drive = ad.fully_connected(
                ad.reshape(cur, (b, int(np.prod(cur.data.shape[1:])))),
                layer.weight, layer.bias)
        else:
            cur = ad.avg_pool2d(cur)
            continue
        if states[i] is None:
            states[i] = snn.LIFState(u=Tensor(np.zeros_like(drive.data)))
        s, states[i] = snn.lif_step(states[i], drive, net.cfg)
        if i == li:
            target = states[i].membrane.data.reshape(frame.shape[0], -1)
        cur = s
        i += 1
    return target, states


# ---------------------------------------------------------------------------
# export

def _g17(x: float) -> str:
    return format(float(x), ".17g")


def export_csv(result, path) -> None:
    """Deterministic RFC-4180-style CSV for either result type."""
    try:
        if isinstance(result, HeatmapResult):
            lines = ["layer," + ",".join(result.col_layers)]
            for name, row in zip(result.row_layers, result.matrix):
                lines.append(name + "," + ",".join(_g17(v) for v in row))
        elif isinstance(result, HistogramResult):
            lines = ["bin_start,bin_end,count"]
            for i, c in enumerate(result.counts):
                lines.append(f"{_g17(result.edges[i])},{_g17(result.edges[i + 1])},{int(c)}")
        else:
            raise TypeError(f"cannot export {type(result).__name__}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# figures (CLI report path)

def _mpl():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_heatmap(result: HeatmapResult, path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(result.matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(result.col_layers)), result.col_layers, rotation=45)
    ax.set_yticks(range(len(result.row_layers)), result.row_layers)
    ax.set_xlabel("model B layer")
    ax.set_ylabel("model A layer")
    ax.set_title(f"layer-wise CKA ({result.sample_count} samples)")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_histogram(result: HistogramResult, path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    widths = np.diff(result.edges)
    ax.bar(result.edges[:-1], result.counts, width=widths, align="edge",
           color="#4878cf", edgecolor="none")
    ax.set_xlabel("membrane potential")
    ax.set_ylabel("count")
    ax.set_title(f"{result.layer} membrane potentials "
                 f"({result.sample_count} samples)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_curves(rows: list[dict], path) -> None:
    plt = _mpl()
    epochs = [r["epoch"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(epochs, [r["train_loss_all"] for r in rows], label="total")
    ax1.plot(epochs, [r["train_loss_cls_s"] for r in rows], label="cls")
    ax1.plot(epochs, [r["train_loss_kt"] for r in rows], label="transfer")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.legend()
    ax2.plot(epochs, [r["test_acc"] for r in rows], color="#d65f5f")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("test accuracy")
    ax2.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
