"""Command-line entry point: ``dmt <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 validation or data error, 3 network or
pool error. Any long option can also come from ``--config FILE`` (a JSON
object keyed by option name, dashes or underscores); explicit flags win.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import DmtError, PoolError

DEFAULT_SEED = 7
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_POOL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _box(text):
    vals = _floats(text)
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("box is left,top,width,height")
    return tuple(vals)


def _load_params(path):
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: params file must hold a JSON object")
    return data


# ----------------------------------------------------------------------- commands


def _models(paths):
    from .pool.blob import load_model

    return [load_model(p) for p in paths]


def _detector_params(args):
    from .detector import DetectorTrainParams

    params = _load_params(args.params)
    for name in ("c", "epsilon"):
        if getattr(args, name) is not None:
            params[name] = getattr(args, name)
    params["seed"] = args.seed
    return DetectorTrainParams(**params)


_ERT_FLAGS = ("oversampling", "nu", "tree_depth", "feature_pool_size", "test_splits", "cascades",
              "trees_per_cascade", "lambda_")


def _ert_params(args):
    from .ert import ErtTrainParams

    params = _load_params(args.params)
    if "lambda" in params:
        params["lambda_"] = params.pop("lambda")
    for name in _ERT_FLAGS:
        if getattr(args, name) is not None:
            params[name] = getattr(args, name)
    params["seed"] = args.seed
    return ErtTrainParams(**params)


def cmd_train_detector(args):
    from .datasets import parse_annotations
    from .detector import evaluate_detector, train_detector
    from .pool.blob import save_model

    ds = parse_annotations(args.dataset)
    model = train_detector(ds, _detector_params(args))
    save_model(model, args.output)
    rep = evaluate_detector(model, ds)
    print(f"trained on {len(ds)} images; training recall {rep.recall:.3f} precision {rep.precision:.3f}")


def cmd_train_shape(args):
    from .datasets import parse_annotations
    from .ert import train_ert
    from .pool.blob import save_model

    ds = parse_annotations(args.dataset)
    model = train_ert(ds, _ert_params(args))
    save_model(model, args.output)
    print(f"trained {model.n_trees} trees on {len(ds)} images; "
          f"training error {model.training_errors[0]:.4f} -> {model.training_errors[-1]:.4f}")


def cmd_aggregate_mwma(args):
    from .mwma import aggregate_mwma
    from .pool.blob import save_model

    model = aggregate_mwma(_models(args.models), args.multiplicities)
    save_model(model, args.output)
    print(f"aggregated {len(args.models)} detectors -> {args.output}")


def cmd_aggregate_wba(args):
    from .pool.blob import save_model
    from .wba import aggregate_wba

    model = aggregate_wba(_models(args.models), args.deviations)
    save_model(model, args.output)
    print(f"aggregated {len(args.models)} shape models ({model.n_trees} trees, "
          f"total deviation {model.total_deviation:g}) -> {args.output}")


def cmd_detect(args):
    from .datasets import load_png
    from .detector import detect

    dets = detect(load_png(args.image), _models(args.models))
    for d in dets:
        x, y, w, h = d.box
        print(json.dumps({"box": [x, y, w, h], "score": d.score, "model": d.model_index}))


def cmd_localize(args):
    from .datasets import load_png
    from .detector import detect
    from .wba import localize_any

    img = load_png(args.image)
    model = _models([args.model])[0]
    if args.box is not None:
        box = args.box
    elif args.detector:
        dets = detect(img, _models(args.detector))
        if not dets:
            raise DmtError("no face detected")
        box = dets[0].box
    else:
        raise DmtError("give --box or --detector")
    shape = localize_any(img, box, model)
    for i, (x, y) in enumerate(shape):
        print(f"{i},{float(x)!r},{float(y)!r}")


def cmd_ear_trace(args):
    from .ebc import read_frame_manifest, trace_sequence

    frames, times = read_frame_manifest(args.frames)
    trace = trace_sequence(frames, times, _models(args.detector), _models([args.shape])[0])
    if args.output:
        trace.to_csv(args.output)
    print(f"{len(trace.samples)} frames; EAR min {trace.min_ear:.4f} max {trace.max_ear:.4f}; "
          f"peak closure {max(s.closure for s in trace.samples):.1f}%")


def cmd_evaluate(args):
    from .datasets import parse_annotations
    from .detector import DetectorModel, evaluate_detector
    from .ert import evaluate_ert

    models = _models(args.models)
    ds = parse_annotations(args.dataset)
    if all(isinstance(m, DetectorModel) for m in models):
        rep = evaluate_detector(models, ds)
        out = {"tp": rep.tp, "fp": rep.fp, "fn": rep.fn, "recall": rep.recall, "precision": rep.precision}
    elif len(models) == 1:
        out = {"mean_error": evaluate_ert(models[0], ds)}
    else:
        raise DmtError("evaluate takes one shape model or any number of detectors")
    print(json.dumps(out, sort_keys=True))


def cmd_dataset_split(args):
    from .datasets import parse_annotations, split_dataset, write_annotations

    ds = parse_annotations(args.dataset)
    holdout = float(args.holdout) if "." in args.holdout else int(args.holdout)
    parts, test = split_dataset(ds, args.parts, holdout=holdout, seed=args.seed)
    out = Path(args.output)
    for k, part in enumerate(parts, 1):
        write_annotations(part, out / f"part_{k}.xml")
    write_annotations(test, out / "test.xml")
    print(f"{len(parts)} parts of {len(parts[0])} images, {len(test)} test images -> {out}")


def cmd_synth_gen(args):
    from .datasets import write_annotations
    from .ebc import write_frame_manifest
    from .synth import synth_generate

    params = _load_params(args.params)
    if args.count is not None and args.kind != "blink":
        params["count"] = args.count
    if args.closures is not None:
        params["closures"] = args.closures
    out = Path(args.output)
    result = synth_generate(args.kind, params, seed=args.seed)
    if args.kind == "blink":
        write_frame_manifest(out, result.frames, result.times, prefix="blink")
        write_annotations(result.dataset, out / "annotations.xml", write_images=False)
        print(f"{len(result.frames)} frames -> {out}")
    else:
        write_annotations(result, out / "annotations.xml")
        print(f"{len(result)} images -> {out / 'annotations.xml'}")


def cmd_pool_serve(args):
    from .pool.server import PoolServer

    server = PoolServer(args.root, args.pool)
    print(f"pool serving {args.root} on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


def _client(args):
    from .pool.client import PoolClient

    return PoolClient(args.pool)


def cmd_pool_push(args):
    blob = Path(args.model).read_bytes()
    from .pool.blob import read_header

    kind = args.kind or read_header(blob)[0]
    meta = {"kind": kind, "dataset_label": args.label}
    if args.metrics:
        meta["metrics"] = json.loads(args.metrics)
    print(_client(args).push_blob(blob, meta))


def cmd_pool_pull(args):
    client = _client(args)
    if args.id is None:
        for entry in client.list(kind=args.kind, label=args.label):
            print(json.dumps(entry, sort_keys=True))
        return
    blob = client.pull_blob(args.id)
    if args.output:
        Path(args.output).write_bytes(blob)
    print(json.dumps(client.meta(args.id), sort_keys=True))


def cmd_pool_aggregate(args):
    from .pool.blob import save_model
    from .pool.client import aggregate_from_pool

    options = {"multiplicities": args.multiplicities, "deviations": args.deviations,
               "push": args.push, "dataset_label": args.label}
    result = aggregate_from_pool(_client(args), args.ids, args.kind, options)
    if args.output:
        save_model(result.model, args.output)
    print(json.dumps({**result.metadata, "id": result.id}, sort_keys=True))


def cmd_experiment(args):
    from .datasets import parse_annotations
    from .experiment import run_experiment

    dataset = parse_annotations(args.dataset) if args.dataset else None
    holdout = None
    if args.holdout is not None:
        holdout = float(args.holdout) if "." in args.holdout else int(args.holdout)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    result = run_experiment(args.kind, n_parts=args.parts, seed=args.seed, dataset=dataset,
                            holdout=holdout, params=_load_params(args.params),
                            pool_address=args.pool, log=log)
    print(result.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(result.to_csv())


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="random seed (default 7)")
    common.add_argument("--config", help="JSON file with default option values")

    pool_opts = _Parser(add_help=False)
    pool_opts.add_argument("--pool", default=os.environ.get("DMT_POOL_ADDR"),
                           help="pool host:port (default $DMT_POOL_ADDR)")

    parser = _Parser(prog="dmt", description="Train, aggregate and share detection and landmark models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_, parents=(common,)):
        p = sub.add_parser(name, help=help_, parents=list(parents))
        p.set_defaults(func=func)
        return p

    p = add("train-detector", cmd_train_detector, "train a HOG window classifier")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--params", help="JSON training parameters")
    p.add_argument("--c", type=float)
    p.add_argument("--epsilon", type=float)

    p = add("train-shape", cmd_train_shape, "train a regression-tree landmark model")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--params", help="JSON training parameters")
    for flag in ("oversampling", "tree-depth", "feature-pool-size", "test-splits", "cascades",
                 "trees-per-cascade"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)

    p = add("aggregate-mwma", cmd_aggregate_mwma, "average detector models")
    p.add_argument("models", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--multiplicities", type=_ints)

    p = add("aggregate-wba", cmd_aggregate_wba, "combine shape models into subdivisions")
    p.add_argument("models", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--deviations", type=_floats)

    p = add("detect", cmd_detect, "run detectors on an image (JSON lines)")
    p.add_argument("models", nargs="+")
    p.add_argument("--image", required=True)

    p = add("localize", cmd_localize, "place landmarks in a face box")
    p.add_argument("model")
    p.add_argument("--image", required=True)
    p.add_argument("--box", type=_box, help="left,top,width,height")
    p.add_argument("--detector", nargs="+", help="detector models used when --box is absent")

    p = add("ear-trace", cmd_ear_trace, "eyelid-closure trace over a frame directory")
    p.add_argument("--frames", required=True, help="directory with manifest.csv")
    p.add_argument("--detector", nargs="+", required=True)
    p.add_argument("--shape", required=True)
    p.add_argument("-o", "--output")

    p = add("evaluate", cmd_evaluate, "score models on an annotated dataset")
    p.add_argument("dataset")
    p.add_argument("models", nargs="+")

    p = add("dataset-split", cmd_dataset_split, "cut a dataset into equal parts plus a test set")
    p.add_argument("dataset")
    p.add_argument("--parts", type=int, default=6)
    p.add_argument("--holdout", default="0", help="test images (count, or fraction with a dot)")
    p.add_argument("-o", "--output", required=True)

    p = add("synth-gen", cmd_synth_gen, "write a synthetic corpus")
    p.add_argument("kind", choices=["detector", "landmarks", "blink"])
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--closures", type=_floats, help="blink closure percent per frame")
    p.add_argument("--params", help="JSON generator parameters")

    p = add("pool-serve", cmd_pool_serve, "run a pool service", (common, pool_opts))
    p.add_argument("--root", required=True)

    p = add("pool-push", cmd_pool_push, "upload a model blob", (common, pool_opts))
    p.add_argument("model")
    p.add_argument("--label", required=True, help="dataset label")
    p.add_argument("--kind", choices=["detector", "ert", "ert-aggregated"])
    p.add_argument("--metrics", help='JSON object, e.g. {"recall": 0.9}')

    p = add("pool-pull", cmd_pool_pull, "download a model (or list entries without an id)",
            (common, pool_opts))
    p.add_argument("id", nargs="?")
    p.add_argument("-o", "--output")
    p.add_argument("--kind")
    p.add_argument("--label")

    p = add("pool-aggregate", cmd_pool_aggregate, "pull entries and aggregate locally", (common, pool_opts))
    p.add_argument("ids", nargs="+")
    p.add_argument("--kind", choices=["detector", "ert"])
    p.add_argument("--multiplicities", type=_ints)
    p.add_argument("--deviations", type=_floats)
    p.add_argument("--label", help="dataset label for the result")
    p.add_argument("--push", action="store_true", help="upload the aggregate")
    p.add_argument("-o", "--output")

    p = add("experiment", cmd_experiment, "split, train, pool, aggregate and tabulate", (common, pool_opts))
    p.add_argument("--kind", choices=["detector", "ert"], required=True)
    p.add_argument("--parts", type=int, default=6)
    p.add_argument("--dataset", help="annotation XML (default: synthetic corpus)")
    p.add_argument("--holdout")
    p.add_argument("--params", help="JSON training parameters")
    p.add_argument("--csv", help="write the table as CSV")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from ``--config`` when present."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    found, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if not found.config or command is None:
        return parser.parse_args(argv)
    data = _load_params(found.config)
    sub = choices[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest == "lambda":
            dest = "lambda_"
        if dest not in actions or dest in ("help", "config"):
            parser.error(f"unknown config key {key!r} for {command}")
        defaults[dest] = value
        if actions[dest].option_strings:
            actions[dest].required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError) as exc:
        print(f"dmt: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        args.func(args)
    except PoolError as exc:
        print(f"dmt: pool error: {exc}", file=sys.stderr)
        return EXIT_POOL
    except (DmtError, ValueError, KeyError, OSError) as exc:
        print(f"dmt: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
