"""Command-line entry point.

Verbs: gen-data, train, eval, analyze-cka, mp-hist, inspect-events.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import analysis, datasets, events, snn, transfer


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spiketransfer",
                                 description="Event-camera transfer-training toolkit")
    sub = ap.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic paired corpus")
    g.add_argument("--out", required=True, help="corpus root directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--categories", default=",".join(datasets.SHAPE_KINDS))
    g.add_argument("--image-size", type=int, default=28)
    g.add_argument("--statics", type=int, default=200)
    g.add_argument("--event-train", type=int, default=20)
    g.add_argument("--event-test", type=int, default=50)
    g.add_argument("--frames", type=int, default=12)
    g.add_argument("--contrast", type=float, default=0.5)
    g.add_argument("--noise", type=float, default=1.5)
    g.add_argument("--timesteps", type=int, default=6)

    t = sub.add_parser("train", help="train a model per a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on an event test set")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="corpus root")

    a = sub.add_parser("analyze-cka", help="cross-layer CKA heatmap of two models")
    a.add_argument("--model-a", required=True)
    a.add_argument("--model-b", required=True)
    a.add_argument("--data", required=True, help="corpus root for probe inputs")
    a.add_argument("--samples", type=int, default=analysis.DEFAULT_PROBE_SAMPLES)
    a.add_argument("--out", required=True)
    a.add_argument("--run-id", default="run")
    a.add_argument("--taps", default=None, help="comma-separated layer names")

    h = sub.add_parser("mp-hist", help="membrane-potential histogram of one layer")
    h.add_argument("--model", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--layer", required=True)
    h.add_argument("--bins", type=int, default=50)
    h.add_argument("--samples", type=int, default=analysis.DEFAULT_PROBE_SAMPLES)
    h.add_argument("--out", required=True)
    h.add_argument("--run-id", default="run")

    i = sub.add_parser("inspect-events", help="summarize an .evt file")
    i.add_argument("file")
    return ap


def _resolve_root(path: str) -> str:
    if os.path.exists(os.path.join(path, "labels.csv")):
        return path
    parent = os.path.dirname(os.path.normpath(path))
    if os.path.exists(os.path.join(parent, "labels.csv")):
        return parent
    raise datasets.MissingFile(f"no corpus (labels.csv) at or above {path}")


def _probe_inputs(root: str, timesteps: int, samples: int) -> np.ndarray:
    data = datasets.load_dataset(root, timesteps)
    pool = data.event_test.inputs + data.event_train.inputs
    if not pool:
        raise datasets.MissingFile(f"no event samples under {root}")
    return np.stack(pool[:samples])


def _snapshot(out_dir: str, name: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        for k, v in payload.items():
            fh.write(f"{k} = {v}\n")


def _cmd_gen_data(args) -> int:
    cfg = datasets.SynthConfig(
        categories=tuple(args.categories.split(",")),
        image_size=args.image_size,
        statics_per_category=args.statics,
        event_train_per_category=args.event_train,
        event_test_per_category=args.event_test,
        motion_frames=args.frames,
        contrast_threshold=args.contrast,
        noise_level=args.noise,
        timesteps=args.timesteps,
        seed=args.seed)
    manifest = datasets.generate_synthetic_pair_set(cfg, args.out)
    _snapshot(args.out, "gen_data_args.txt", vars(args))
    print(f"wrote {len(manifest.entries)} samples under {args.out}")
    return 0


def _cmd_train(args) -> int:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise transfer.InvalidConfig(f"--set expects KEY=VALUE, got {item!r}")
        k, _, v = item.partition("=")
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    config = transfer.load_config(args.config, overrides)
    static_root = _resolve_root(config.static_dir) if config.static_dir else None
    event_root = _resolve_root(config.event_dir)
    data = datasets.load_dataset(event_root, config.timesteps)
    static_set = None
    if config.mode != "baseline":
        if static_root is None:
            raise transfer.InvalidConfig("non-baseline modes need static_dir")
        if static_root == event_root:
            static_set = data.static_train
        else:
            static_set = datasets.load_dataset(static_root, config.timesteps).static_train
    progress = None
    if not args.quiet:
        progress = lambda row: print(
            f"epoch {row['epoch']:3d}  loss {row['train_loss_all']:.4f}  "
            f"acc {row['test_acc']:.4f}  p {row['p_final_batch']:.4f}")
    result = transfer.train(config, static_set, data.event_train,
                            data.event_test, progress=progress)
    analysis.render_training_curves(
        result.rows, os.path.join(config.out_dir, "training_curves.png"))
    print(f"final test accuracy: {result.rows[-1]['test_acc']:.4f}"
          if result.rows else "no epochs run")
    return 0


def _cmd_eval(args) -> int:
    net = snn.load_model(args.model)
    root = _resolve_root(args.data)
    data = datasets.load_dataset(root, net.timesteps)
    acc = transfer.evaluate(net, data.event_test)
    print(f"test accuracy: {acc:.4f} ({len(data.event_test)} samples)")
    return 0


def _cmd_analyze_cka(args) -> int:
    net_a = snn.load_model(args.model_a)
    net_b = snn.load_model(args.model_b)
    root = _resolve_root(args.data)
    probe = _probe_inputs(root, net_a.timesteps, args.samples)
    taps = args.taps.split(",") if args.taps else None
    result = analysis.cka_heatmap(net_a, net_b, probe, taps)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"{args.run_id}_heatmap.csv")
    analysis.export_csv(result, csv_path)
    analysis.render_heatmap(result, os.path.join(args.out, f"{args.run_id}_heatmap.png"))
    _snapshot(args.out, f"{args.run_id}_heatmap_args.txt", vars(args))
    print(f"wrote {csv_path} (diag mean "
          f"{np.mean(np.diag(result.matrix)):.4f})")
    return 0


def _cmd_mp_hist(args) -> int:
    net = snn.load_model(args.model)
    root = _resolve_root(args.data)
    probe = _probe_inputs(root, net.timesteps, args.samples)
    result = analysis.membrane_histogram(net, probe, args.layer, args.bins)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"{args.run_id}_mp_hist.csv")
    analysis.export_csv(result, csv_path)
    analysis.render_histogram(result, os.path.join(args.out, f"{args.run_id}_mp_hist.png"))
    _snapshot(args.out, f"{args.run_id}_mp_hist_args.txt", vars(args))
    print(f"wrote {csv_path} ({int(result.counts.sum())} potentials binned)")
    return 0


def _cmd_inspect_events(args) -> int:
    stream = events.read_event_file(args.file)
    n_on = sum(1 for e in stream.events if e.p == 1)
    duration = stream.events[-1].t - stream.events[0].t if stream.events else 0
    print(f"file:      {args.file}")
    print(f"geometry:  {stream.width} x {stream.height}")
    print(f"events:    {len(stream.events)}")
    print(f"duration:  {duration} us")
    print(f"on/off:    {n_on} / {len(stream.events) - n_on}")
    return 0


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze-cka": _cmd_analyze_cka,
    "mp-hist": _cmd_mp_hist,
    "inspect-events": _cmd_inspect_events,
}


def run(argv: list[str]) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return _DISPATCH[args.verb](args)
    except (transfer.InvalidConfig, datasets.DatasetError, events.EventError,
            snn.SpecParseError, snn.GeometryUnderflow, analysis.LayerTapInvalid,
            transfer.NonFiniteLoss, transfer.EmptyTestSet, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
