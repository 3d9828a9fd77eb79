"""Command-line front end: ``accgrad <command> [--config FILE] [--key value ...]``.

Every setting can come from a plain-text config file (``key = value`` per
line, ``#`` comments) and be overridden by the flag of the same name.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import codec, engine, fixtures, models, pipeline, scenes, selector


class ConfigError(ValueError):
    pass


def _int_list(text):
    return [int(v) for v in str(text).replace(",", " ").split()]


def _float_list(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


# key -> (type, default, help)
KEYS = {
    "seed": (int, None, "random seed; required by train and sweep"),
    "threads": (int, 1, "worker threads (work currently runs serially; only 1 is accepted)"),
    # paths
    "scenes": (str, "scenes", "directory of frame_NNNN.npy files and manifest.csv"),
    "out": (str, None, "output file or directory (command specific)"),
    "model": (str, None, "selector checkpoint (AGP1); defaults to the shipped fixture"),
    "dnn": (str, "blob_detector", "final DNN: fixture name or AGP1 path"),
    "dnn_kind": (str, models.DETECTOR, "kind of a final DNN given by path"),
    "dnn_widths": (_int_list, [8, 8, 8], "layer widths of a final DNN given by path"),
    "encoded": (str, "encoded", "directory of chunk_NNNN.agv files"),
    # scene generation
    "n_frames": (int, 30, "frames to generate"),
    "height": (int, 128, "frame height in pixels (multiple of 16)"),
    "width": (int, 128, "frame width in pixels (multiple of 16)"),
    "n_blobs": (int, 6, "blobs per frame"),
    "speed": (float, 1.0, "maximum blob speed in px/frame"),
    "texture": (float, 0.02, "background texture strength"),
    # stream
    "chunk": (int, 10, "frames per chunk"),
    "k": (int, 10, "selector runs once every k frames"),
    "alpha": (float, 0.2, "selector probability threshold"),
    "gamma": (int, 5, "mask dilation in macroblocks"),
    "qp_hi": (int, 30, "QP of selected macroblocks"),
    "qp_lo": (int, 40, "QP of the remaining macroblocks"),
    "bandwidth": (float, 2.5e6, "shared link bandwidth in bits/s"),
    "streams": (int, 5, "streams sharing the link"),
    "latency": (float, 0.1, "one-way latency in seconds"),
    "fps": (float, 30.0, "frame rate"),
    # training
    "epochs": (int, 15, "selector training epochs"),
    "lr": (float, 0.003, "selector learning rate"),
    "pos_weight": (float, 4.0, "weight of positive blocks in the selector loss"),
    "downsample": (int, 10, "label one image in this many"),
    "budget": (float, 0.10, "fraction of blocks labelled positive"),
    "qp_low": (int, 40, "QP of the degraded frame used for labels"),
    "batch_size": (int, 8, "selector mini-batch size"),
    "optimizer": (str, "adam", "adam or sgd"),
    "momentum": (float, 0.9, "momentum for sgd"),
    # experiments
    "alphas": (_float_list, [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9], "alpha values for sweep"),
    "frame": (int, 0, "frame index used by oracle"),
    "c": (int, 4, "block budget for oracle"),
    "max_distance": (int, 10, "largest frame distance for persistence"),
    "widths": (_int_list, [1, 2, 4, 6, 8], "compute multipliers for fp-tolerance"),
    "fp_epochs": (int, 20, "training epochs per fp-tolerance model"),
    "fp_samples": (int, 256, "training scenes used by fp-tolerance"),
    "fp_heldout": (int, 64, "held-out scenes scored by fp-tolerance"),
}

STREAM_KEYS = ("chunk", "k", "alpha", "gamma", "qp_hi", "qp_lo", "bandwidth", "streams", "latency", "fps")
TRAIN_KEYS = ("epochs", "lr", "pos_weight", "downsample", "budget", "qp_low", "seed", "batch_size",
              "optimizer", "momentum")


def _convert(key, raw, where):
    kind = KEYS[key][0]
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: bad value for '{key}': {raw!r}") from None


def read_config(path):
    """Parse ``key = value`` lines; unknown keys and malformed lines are errors."""
    values = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    with fh:
        for n, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            where = f"{path}:{n}"
            if "=" not in text:
                raise ConfigError(f"{where}: expected 'key = value'")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in KEYS:
                raise ConfigError(f"{where}: unknown key '{key}'")
            values[key] = _convert(key, raw, where)
    return values


def resolve(args):
    """Defaults, then config file, then explicit flags."""
    cfg = {k: v[1] for k, v in KEYS.items()}
    if args.config:
        cfg.update(read_config(args.config))
    for key in KEYS:
        raw = getattr(args, key, None)
        if raw is not None:
            cfg[key] = _convert(key, raw, f"--{key}")
    if cfg["threads"] != 1:
        raise ConfigError("threads: only 1 is supported")
    return cfg


def stream_config(cfg):
    return pipeline.StreamConfig(**{k: cfg[k] for k in STREAM_KEYS})


def train_config(cfg):
    return selector.TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})


def _require(cfg, *keys):
    for key in keys:
        if cfg[key] is None:
            raise ConfigError(f"missing required setting '{key}'")


def _load_dnn(cfg):
    name = cfg["dnn"]
    if name in fixtures.FIXTURES:
        return fixtures.load_fixture(name)
    if not os.path.exists(name):
        raise ConfigError(f"final DNN not found: {name}")
    return models.FinalDnn.load(name, cfg["dnn_kind"], tuple(cfg["dnn_widths"]))


def _load_model(cfg):
    if cfg["model"] is None:
        return fixtures.load_selector()
    if not os.path.exists(cfg["model"]):
        raise ConfigError(f"selector checkpoint not found: {cfg['model']}")
    return selector.AccModelNet.load(cfg["model"])


def _load_frames(directory):
    if not os.path.isdir(directory):
        raise ConfigError(f"scene directory not found: {directory}")
    paths = sorted(glob.glob(os.path.join(directory, "frame_*.npy")))
    return [np.load(p) for p in paths]


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _fmt(x):
    return repr(float(x))


# commands

def cmd_gen_scenes(cfg, out):
    out_dir = cfg["out"] or cfg["scenes"]
    os.makedirs(out_dir, exist_ok=True)
    seed = 0 if cfg["seed"] is None else cfg["seed"]
    video = scenes.moving_blobs(seed, cfg["n_frames"], cfg["height"], cfg["width"], cfg["n_blobs"],
                                speed=cfg["speed"], texture=cfg["texture"]) if cfg["n_frames"] else []
    rows = ["frame,file,n_blobs,centers"]
    for i, sc in enumerate(video):
        name = f"frame_{i:04d}.npy"
        np.save(os.path.join(out_dir, name), sc.frame)
        centers = ";".join(f"{x:.4f}:{y:.4f}" for x, y in sc.centers)
        rows.append(f"{i},{name},{len(sc.centers)},{centers}")
    _write(os.path.join(out_dir, "manifest.csv"), "\n".join(rows) + "\n")
    print(f"wrote {len(video)} frames to {out_dir}", file=out)


def cmd_train(cfg, out):
    _require(cfg, "seed")
    frames = _load_frames(cfg["scenes"])
    if not frames:
        raise ConfigError(f"no frames in {cfg['scenes']}")
    dnn = _load_dnn(cfg)
    tcfg = train_config(cfg)
    counter = engine.PropagationCounter()
    samples = selector.build_dataset(frames, dnn, tcfg, counter)
    labelled = counter.snapshot()
    model = selector.AccModelNet.create(frames[0].shape[0], seed=tcfg.seed)
    model, losses = selector.train(model, samples, tcfg, counter)
    path = cfg["out"] or "selector.agp"
    model.params.save(path)
    report = selector.cost_report(len(frames), tcfg)
    report.update({"images": len(frames), "labelled": len(samples),
                   "forward": labelled[0], "backward": labelled[1]})
    _write(path + ".cost.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write(path + ".loss.csv", "epoch,loss\n" + "".join(f"{i},{_fmt(v)}\n" for i, v in enumerate(losses)))
    print(f"wrote {path} ({len(samples)} labelled frames, final loss {losses[-1]:.5f})", file=out)


def cmd_encode(cfg, out):
    frames = _load_frames(cfg["scenes"])
    if not frames:
        raise ConfigError(f"no frames in {cfg['scenes']}")
    scfg = stream_config(cfg)
    model = _load_model(cfg)
    out_dir = cfg["out"] or cfg["encoded"]
    os.makedirs(out_dir, exist_ok=True)
    chunks, results = pipeline.encode_stream(frames, model, scfg)
    rows = ["chunk,frames,bytes,selector_invocations,mask_sources,hq_blocks,encoding_ops,streaming_delay"]
    for enc, r in zip(chunks, results):
        with open(os.path.join(out_dir, f"chunk_{r.index:04d}.agv"), "wb") as fh:
            fh.write(codec.pack_chunk(enc))
        rows.append(f"{r.index},{r.frame_indices[0]}-{r.frame_indices[-1]},{r.bytes},{r.selector_invocations},"
                    f"{' '.join(map(str, r.mask_sources))},{' '.join(map(str, r.hq_blocks))},"
                    f"{r.encoding_ops},{_fmt(r.streaming_delay)}")
    masks = pipeline.selector_masks(frames, model, scfg)
    for i, m in masks.items():
        _write(os.path.join(out_dir, f"mask_{i:04d}.pbm"), engine.mask_to_pbm(m))
    _write(os.path.join(out_dir, "chunks.csv"), "\n".join(rows) + "\n")
    total = sum(r.bytes for r in results)
    print(f"wrote {len(chunks)} chunks, {total} bytes, "
          f"{sum(r.selector_invocations for r in results)} selector runs to {out_dir}", file=out)


def _read_chunks(directory):
    paths = sorted(glob.glob(os.path.join(directory, "chunk_*.agv")))
    if not paths:
        raise ConfigError(f"no chunk files in {directory}")
    chunks = []
    for p in paths:
        with open(p, "rb") as fh:
            try:
                chunks.append(codec.unpack_chunk(fh.read()))
            except codec.BitstreamError as exc:
                raise ConfigError(f"{p}: {exc}") from None
    return chunks


def cmd_decode(cfg, out):
    chunks = _read_chunks(cfg["encoded"])
    out_dir = cfg["out"] or "decoded"
    os.makedirs(out_dir, exist_ok=True)
    n = 0
    for chunk in chunks:
        for enc in chunk:
            np.save(os.path.join(out_dir, f"frame_{n:04d}.npy"), codec.decode_frame(enc))
            n += 1
    print(f"decoded {n} frames to {out_dir}", file=out)


def cmd_eval(cfg, out):
    chunks = _read_chunks(cfg["encoded"])
    frames = _load_frames(cfg["scenes"])
    dnn = _load_dnn(cfg)
    n = sum(len(c) for c in chunks)
    if n != len(frames):
        raise ConfigError(f"{n} encoded frames but {len(frames)} reference frames")
    accs, mean = pipeline.evaluate_stream(chunks, dnn, frames)
    path = cfg["out"] or "accuracy.csv"
    _write(path, "frame,accuracy\n" + "".join(f"{i},{_fmt(a)}\n" for i, a in enumerate(accs)))
    print(f"mean accuracy {mean:.4f} over {len(accs)} frames; wrote {path}", file=out)


def cmd_sweep(cfg, out):
    _require(cfg, "seed")
    frames = _load_frames(cfg["scenes"])
    if not frames:
        raise ConfigError(f"no frames in {cfg['scenes']}")
    dnn = _load_dnn(cfg)
    model = _load_model(cfg)
    scfg = stream_config(cfg)
    path = cfg["out"] or "sweep.csv"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    points = pipeline.sweep(frames, model, dnn, cfg["alphas"], scfg, csv_path=path)
    hq = pipeline.uniform_point(frames, dnn, scfg.qp_hi, scfg, label="all-hq")
    svg = pipeline.svg_line_chart(
        {"selector": [(p.mean_delay, p.mean_acc) for p in points],
         "all-hq": [(hq.mean_delay, hq.mean_acc)]},
        "mean streaming delay (s)", "accuracy")
    _write(os.path.splitext(path)[0] + ".svg", svg)
    for a, p in zip(cfg["alphas"], points):
        print(f"alpha={a:g} acc={p.mean_acc:.4f} bytes={p.total_bytes} "
              f"({p.total_bytes / hq.total_bytes:.1%} of all-HQ) delay={p.mean_delay:.3f}s", file=out)
    print(f"all-HQ acc={hq.mean_acc:.4f} bytes={hq.total_bytes}; wrote {path}", file=out)


def cmd_oracle(cfg, out):
    dnn = _load_dnn(cfg)
    frames = _load_frames(cfg["scenes"])
    if cfg["frame"] >= len(frames):
        raise ConfigError(f"frame {cfg['frame']} out of range ({len(frames)} frames)")
    H = models.pad_frame(frames[cfg["frame"]])
    L = models.degrade_frame(H, cfg["qp_lo"])
    out_dir = cfg["out"] or "oracle"
    os.makedirs(out_dir, exist_ok=True)
    values = engine.compute_accgrad(dnn, H, L)
    engine.write_accgrad_csv(values, os.path.join(out_dir, "accgrad.csv"))
    top = engine.topc_mask(values, cfg["c"])
    best, best_loss = engine.exhaustive_best_mask(dnn, H, L, cfg["c"])
    top_loss = engine.local_composite_losses(dnn, H, L, top.reshape(1, -1))[0]
    search = engine.idealized_search(dnn, H, cfg["qp_lo"], L=L)
    _write(os.path.join(out_dir, "accgrad_top.pbm"), engine.mask_to_pbm(top))
    _write(os.path.join(out_dir, "exhaustive.pbm"), engine.mask_to_pbm(best))
    _write(os.path.join(out_dir, "idealized.pbm"), engine.mask_to_pbm(search.mask))
    _write(os.path.join(out_dir, "losses.csv"),
           f"mask,loss\naccgrad_top,{_fmt(top_loss)}\nexhaustive,{_fmt(best_loss)}\n")
    print(f"top-{cfg['c']} loss {top_loss:.6g}, exhaustive best {best_loss:.6g}, "
          f"idealized search {'converged' if search.converged else 'stopped'} after "
          f"{search.iterations} rounds; wrote {out_dir}", file=out)


def cmd_persistence(cfg, out):
    frames = _load_frames(cfg["scenes"])
    if len(frames) < 2:
        raise ConfigError("persistence needs at least two frames")
    curve = pipeline.persistence_curve(frames, _load_model(cfg), cfg["max_distance"], stream_config(cfg))
    path = cfg["out"] or "persistence.csv"
    _write(path, "distance,fraction_unchanged\n" + "".join(f"{d},{_fmt(f)}\n" for d, f in curve))
    _write(os.path.splitext(path)[0] + ".svg",
           pipeline.svg_line_chart({"unchanged": curve}, "frame distance", "fraction unchanged"))
    print(f"fraction unchanged at distance {curve[-1][0]}: {curve[-1][1]:.4f}; wrote {path}", file=out)


def cmd_fp_tolerance(cfg, out):
    seed = 0 if cfg["seed"] is None else cfg["seed"]
    n = cfg["fp_samples"]
    samples = pipeline.seg_samples_from_scenes(
        scenes.make_scenes(seed, n + cfg["fp_heldout"], **pipeline.FP_SCENE))
    result = pipeline.fp_tolerance_experiment(cfg["widths"], samples[:n], samples[n:] or None,
                                              epochs=cfg["fp_epochs"], seed=seed)
    path = cfg["out"] or "fp_tolerance.csv"
    rows = ["loss,width,epoch,value"]
    for kind, runs in result.items():
        for m, run in runs.items():
            rows += [f"{kind},{m},{e},{_fmt(v)}" for e, v in enumerate(run.curve)]
            rows.append(f"{kind},{m},final,{_fmt(run.final)}")
    _write(path, "\n".join(rows) + "\n")
    series = {f"{kind} final": [(m, r.final) for m, r in sorted(runs.items())] for kind, runs in result.items()}
    _write(os.path.splitext(path)[0] + ".svg", pipeline.svg_line_chart(series, "compute multiplier", "final loss"))
    for kind, runs in result.items():
        finals = ", ".join(f"{m}x={r.final:.4f}" for m, r in sorted(runs.items()))
        gap = pipeline.relative_gap(runs) if {4, 8} <= set(runs) else float("nan")
        print(f"{kind}: {finals}; relative 4x/8x gap {gap:.3f}", file=out)
    print(f"wrote {path}", file=out)


COMMANDS = {
    "gen-scenes": (cmd_gen_scenes, "generate a moving-blob scene set"),
    "train": (cmd_train, "label scenes with AccGrad and train a selector"),
    "encode": (cmd_encode, "encode scenes with selector masks into AGV1 chunks"),
    "decode": (cmd_decode, "decode AGV1 chunks to frames"),
    "eval": (cmd_eval, "score decoded chunks against the final DNN on the originals"),
    "sweep": (cmd_sweep, "accuracy/bytes/delay tradeoff over alpha"),
    "oracle": (cmd_oracle, "AccGrad top-c vs exhaustive and idealized masks on one frame"),
    "persistence": (cmd_persistence, "how long selector masks stay unchanged"),
    "fp-tolerance": (cmd_fp_tolerance, "compare loss gaps across model widths"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="accgrad", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    for key, (_, default, help_text) in KEYS.items():
        shown = default if not isinstance(default, list) else ",".join(map(str, default))
        common.add_argument(f"--{key}", default=None, metavar="V", help=f"{help_text} (default: {shown})")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        COMMANDS[args.command][0](cfg, out)
    except (ConfigError, ValueError, OSError, codec.CodecError) as exc:
        print(f"accgrad {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
