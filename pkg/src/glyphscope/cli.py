"""Command-line entry point.

Exit codes: 0 success, 2 bad arguments, 3 unreadable or invalid input,
4 the algorithm ran but failed (no edges, unknown font, divergence, ...).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import color_engine, fixtures, predict_engine, size_engine, style_net
from .errors import DetectionError, GlyphError, InputError
from .imageio import read_image

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_FAILURE = 4
DEFAULT_SEED = 0


class _Timer:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.stages: list[tuple[str, float]] = []

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        yield
        self.stages.append((name, time.perf_counter() - start))

    def report(self):
        if self.enabled:
            for name, secs in self.stages:
                print(f"time {name} {secs * 1000:.3f} ms", file=sys.stderr)


def _emit(args, report: dict, text_lines: list[str]) -> None:
    if args.format == "structured":
        print(json.dumps(report, sort_keys=True))
    else:
        print("\n".join(text_lines))


def _fail(args, exc: GlyphError, code: int) -> int:
    reason = getattr(exc, "reason", "error")
    if getattr(args, "format", "text") == "structured":
        print(json.dumps({"status": "error", "reason": reason, "message": str(exc)}, sort_keys=True))
    print(f"error: {reason}: {exc}", file=sys.stderr)
    return code


def _need_file(path, what):
    if not Path(path).is_file():
        raise InputError(f"{what} {path} does not exist")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_detect(args) -> int:
    _need_file(args.image, "image")
    _need_file(args.model, "model file")
    timer = _Timer(args.time)
    with timer.stage("load"):
        image = read_image(args.image)
        model = style_net.load_weights(args.model)
    with timer.stage("preprocess"):
        tensor = style_net.preprocess(image)
    with timer.stage("infer"):
        style = style_net.infer(model, tensor)
    with timer.stage("color"):
        color = color_engine.detect_text_color(image, args.k)
    with timer.stage("size"):
        size = size_engine.detect_text_height(
            image, size_engine.EdgeScanConfig(args.threshold, args.min_edge_pixels))
    timer.report()
    top = style.top_k(args.top_k)
    report = {
        "status": "ok",
        "style": [{"label": label, "confidence": round(conf, 6)} for label, conf in top],
        "color": list(color.rgb),
        "single_cluster": color.single_cluster,
        "height": size.height,
        "first_row": size.first_row,
        "last_row": size.last_row,
    }
    lines = ["style:"] + [f"  {label} {conf:.6f}" for label, conf in top]
    lines.append("color: {} {} {}".format(*color.rgb) + (" (single cluster)" if color.single_cluster else ""))
    lines.append(f"height: {size.height} (rows {size.first_row}..{size.last_row})")
    _emit(args, report, lines)
    return EXIT_OK


def _prediction_config(args) -> predict_engine.PredictionConfig:
    kwargs = {"top_n": args.top_n, "widen_factor": args.widen_factor}
    if args.priority:
        names = [p.strip() for p in args.priority.split(",")]
        idx = []
        for n in names:
            if n.isdigit():
                idx.append(int(n))
            elif n in predict_engine.ATTRIBUTE_NAMES:
                idx.append(predict_engine.ATTRIBUTE_NAMES.index(n))
            else:
                raise InputError(f"unknown attribute {n!r}")
        kwargs["priority"] = tuple(idx)
    if args.weights:
        kwargs["weights"] = tuple(float(v) for v in args.weights.split(","))
    if args.interval is not None:
        kwargs["intervals"] = (float(args.interval),) * 11
    if args.min_candidates is not None:
        kwargs["min_candidates"] = args.min_candidates
    return predict_engine.PredictionConfig(**kwargs)


def cmd_predict(args) -> int:
    _need_file(args.dataset, "dataset")
    config = _prediction_config(args)
    dataset = predict_engine.read_fonts(args.dataset)
    ranked = predict_engine.predict_similar(args.query, dataset, config)
    report = {"status": "ok", "query": args.query,
              "results": [{"rank": i + 1, "name": n, "distance": d} for i, (n, d) in enumerate(ranked)]}
    lines = [f"{i + 1}\t{n}\t{d!r}" for i, (n, d) in enumerate(ranked)]
    _emit(args, report, lines)
    return EXIT_OK


def cmd_extend(args) -> int:
    _need_file(args.seed_file, "seed file")
    _need_file(args.new_file, "new-font file")
    seed = predict_engine.read_fonts(args.seed_file)
    new = predict_engine.read_fonts(args.new_file)
    config = predict_engine.ExtensionConfig(args.k, args.mode)
    out = predict_engine.extend_dataset(seed, new, config)
    predict_engine.write_fonts(args.output, out, provenance=True)
    n_ext = len(out) - len(seed)
    _emit(args, {"status": "ok", "records": len(out), "extended": n_ext, "output": str(args.output)},
          [f"wrote {len(out)} records ({n_ext} extended) to {args.output}"])
    return EXIT_OK


def _load_style_split(manifest, split):
    xs, ys = [], []
    for entry in manifest:
        if entry.get("split") == split:
            xs.append(style_net.preprocess(read_image(entry["path"])))
            ys.append(int(entry["label"]))
    return xs, ys


def cmd_train(args) -> int:
    manifest = fixtures.read_manifest(args.fixtures)
    labels = {}
    for entry in manifest:
        if "label" in entry:
            labels[int(entry["label"])] = entry.get("class", f"class-{entry['label']}")
    if not labels:
        raise InputError("manifest lists no labelled style samples")
    if sorted(labels) != list(range(len(labels))):
        raise InputError("style labels must be 0..N-1")
    x, y = _load_style_split(manifest, "train")
    xv, yv = _load_style_split(manifest, "val")
    model = style_net.StyleNet.build([labels[i] for i in range(len(labels))], seed=args.seed)
    config = style_net.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                   learning_rate=args.lr, momentum=args.momentum, seed=args.seed)

    def log(m):
        val = "n/a" if m.val_accuracy is None else f"{m.val_accuracy:.4f}"
        print(f"epoch {m.epoch} loss {m.loss:.5f} train {m.train_accuracy:.4f} val {val}",
              file=sys.stderr if args.format == "structured" else sys.stdout, flush=True)

    if args.epochs > 0:
        result = style_net.train(model, x, y, config, xv, yv, log=log)
        history = result.history
    else:
        history = []
    style_net.save_weights(model, args.output)
    report = {"status": "ok", "output": str(args.output), "params": model.param_count(),
              "epochs": [{"epoch": m.epoch, "loss": m.loss, "train_accuracy": m.train_accuracy,
                          "val_accuracy": m.val_accuracy} for m in history]}
    _emit(args, report, [f"saved {model.param_count()} parameters to {args.output}"])
    return EXIT_OK


def cmd_gen_fixtures(args) -> int:
    path = fixtures.write_fixture_set(args.output, seed=args.seed, n_train=args.n_train,
                                      n_val=args.n_val, n_detector=args.n_detector)
    if args.fonts:
        seeds, new = fixtures.gen_font_dataset(args.fonts[0], args.fonts[1], seed=args.seed)
        predict_engine.write_fonts(Path(args.output) / "seed_fonts.csv", seeds)
        predict_engine.write_fonts(Path(args.output) / "new_fonts.csv",
                                   [predict_engine.FontRecord(r.name, None, r.embedding) for r in new])
    _emit(args, {"status": "ok", "manifest": str(path)}, [f"wrote manifest {path}"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "structured"), default=argparse.SUPPRESS,
                        help="report format (default: text)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help=f"random seed (default: {DEFAULT_SEED})")
    common.add_argument("--time", action="store_true", default=argparse.SUPPRESS,
                        help="print per-stage wall-clock timings to stderr")

    parser = argparse.ArgumentParser(prog="glyphscope", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", parents=[common], help="detect style, colour and size of a text crop")
    p.add_argument("image", help="PPM/PGM text crop")
    p.add_argument("--model", required=True, help="FNET weight file")
    p.add_argument("-k", "--k", type=int, default=color_engine.DEFAULT_K, help="K-means cluster count")
    p.add_argument("-T", "--threshold", type=float, default=30.0, help="edge threshold")
    p.add_argument("--min-edge-pixels", type=int, default=2)
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("predict", parents=[common], help="rank fonts similar to a query font")
    p.add_argument("query")
    p.add_argument("dataset", help="font CSV")
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--interval", type=float, help="half-width for every priority attribute")
    p.add_argument("--priority", help="11 comma-separated attribute names or indices")
    p.add_argument("--weights", help="11 comma-separated positive weights")
    p.add_argument("--widen-factor", type=float, default=1.5)
    p.add_argument("--min-candidates", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("extend", parents=[common], help="derive attributes for embedding-only fonts")
    p.add_argument("seed_file")
    p.add_argument("new_file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-k", "--k", type=int, default=5)
    p.add_argument("--mode", choices=("inverse_distance", "paper_literal"), default="inverse_distance")
    p.set_defaults(func=cmd_extend)

    p = sub.add_parser("train", parents=[common], help="train the style network on a fixture set")
    p.add_argument("fixtures", help="fixture directory or manifest")
    p.add_argument("-o", "--output", required=True, help="FNET weight file to write")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-fixtures", parents=[common], help="write procedural fixtures")
    p.add_argument("output", help="output directory")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--n-detector", type=int, default=5)
    p.add_argument("--fonts", type=int, nargs=2, metavar=("N_SEED", "N_NEW"),
                   help="also write a synthetic font table pair")
    p.set_defaults(func=cmd_gen_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("format", "text"), ("seed", DEFAULT_SEED), ("time", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        return args.func(args)
    except DetectionError as exc:
        return _fail(args, exc, EXIT_FAILURE)
    except (GlyphError, OSError, UnicodeDecodeError) as exc:
        if not isinstance(exc, GlyphError):
            exc = InputError(str(exc))
        return _fail(args, exc, EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
