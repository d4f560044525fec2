"""Command-line entry point.

Exit codes: 0 success (possibly with per-record warnings), 1 usage error,
2 data error, 3 numerical failure.

Configuration comes from an optional ``--config`` file of UTF-8 ``key=value``
lines (``#`` starts a comment), then ``--set key=value`` overrides, then the
dedicated flags.  Later sources win.  Unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import dataset_io as dio
from . import evaluation as ev
from . import geometry as G
from . import locnet as L
from . import trn as T
from .distributions import DomainError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

GT_NOTE = "ground truth: Euclidean norm of the hip midpoint (synthetic) or of the label location (KITTI)"
TRUTH_HEADER = "# pedloc-truth v1\n# frame track_id gt_distance center_x center_y center_z height\n"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config handling


def read_config_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _parse_pairs(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_OPTIONAL_FLOAT = {"gamma_bound"}
_INT_TUPLES = {"scales"}


def _coerce(key, raw, default):
    try:
        if key in _OPTIONAL_FLOAT:
            return None if raw.lower() == "none" else float(raw)
        if key in _INT_TUPLES:
            return None if raw.lower() == "none" else tuple(int(v) for v in raw.split(","))
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def build(cls, settings: dict, **fixed):
    """Instantiate dataclass ``cls`` from the string settings it knows about."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in fixed:
            kwargs[f.name] = fixed[f.name]
        elif f.name in settings:
            default = f.default if f.default is not dataclasses.MISSING else None
            kwargs[f.name] = _coerce(f.name, settings[f.name], default)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _known(*classes, extra=()):
    keys = set(extra)
    for cls in classes:
        keys.update(f.name for f in dataclasses.fields(cls))
    return keys


def gather_settings(args, allowed) -> dict:
    settings = {}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    settings.update(_parse_pairs(getattr(args, "set", None)))
    unknown = sorted(set(settings) - set(allowed))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return settings


def _synth_config(settings, intrinsics=None):
    kw = {}
    if intrinsics is not None:
        kw["intrinsics"] = intrinsics
    if settings.get("image_size", "").lower() == "none":
        settings = dict(settings)
        settings.pop("image_size")
        kw["image_size"] = None
    return build(G.SynthConfig, settings, **kw)


# ---------------------------------------------------------------------------
# file helpers


def _check_writable(path, force):
    path = Path(path)
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    if not path.parent.exists():
        raise DataError(f"directory {path.parent} does not exist")


def atomic_write(path, data, force=False, binary=False):
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    _check_writable(path, force)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb" if binary else "w", **({} if binary else {"encoding": "utf-8", "newline": "\n"})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _open_text(path):
    try:
        return open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def parse_intrinsics(args) -> G.CameraIntrinsics:
    if getattr(args, "calib", None):
        with _open_text(args.calib) as f:
            return dio.parse_kitti_calib(f)
    if getattr(args, "intrinsics", None):
        try:
            fx, fy, cx, cy = (float(v) for v in args.intrinsics.split(","))
        except ValueError:
            raise UsageError("--intrinsics expects fx,fy,cx,cy") from None
        return G.CameraIntrinsics(fx, fy, cx, cy)
    return G.DEFAULT_INTRINSICS


def _intrinsics_dict(k):
    return dataclasses.asdict(k)


def _records_to_arrays(records, k):
    xs, ys, skipped = [], [], 0
    for r in records:
        if r.gt_distance is None:
            skipped += 1
            continue
        try:
            xs.append(L.build_input(r.to_keypoints(), k))
        except G.VisibilityError:
            skipped += 1
            continue
        ys.append(r.gt_distance)
    if not xs:
        raise DataError("no usable labelled records")
    return np.array(xs), np.array(ys), skipped


def _load_labelled_records(args):
    with _open_text(args.data) as f:
        records = dio.read_keypoints(f)
    if getattr(args, "kitti_labels", None):
        label_dir = Path(args.kitti_labels)
        by_frame = {}
        for r in records:
            by_frame.setdefault(r.frame, []).append(r)
        matched = []
        for frame in sorted(by_frame):
            path = label_dir / f"{frame:06d}.txt"
            if not path.exists():
                continue
            with _open_text(path) as f:
                objects = dio.parse_kitti_labels(f)
            matched += dio.match_keypoints_to_labels(by_frame[frame], objects, args.iou_threshold)
        records = matched
    return records


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    settings = gather_settings(args, _known(G.SynthConfig, extra=("n",)))
    if args.noise is not None:
        settings["pixel_noise_sigma"] = str(args.noise)
    n = args.n if args.n is not None else int(settings.get("n", 1000))
    settings.pop("n", None)
    k = parse_intrinsics(args)
    try:
        config = _synth_config(settings, k)
        samples = G.synth_scene(n, args.seed, config)
    except G.GeometryError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    if not out.is_dir():
        raise DataError(f"output directory {out} does not exist")
    paths = {name: out / f"{args.prefix}{name}" for name in ("keypoints.txt", "truth.txt", "manifest.json")}
    for p in paths.values():
        _check_writable(p, args.force)

    records = [dio.KeypointRecord.from_keypoints(s.keypoints, frame=i, track_id=0, gt_distance=s.gt_distance)
               for i, s in enumerate(samples)]
    import io

    buf = io.StringIO()
    dio.write_keypoints(records, buf)
    truth = io.StringIO()
    truth.write(TRUTH_HEADER)
    for i, s in enumerate(samples):
        vals = [s.gt_distance, *s.gt_center, s.height]
        truth.write(" ".join([str(i), "0"] + [format(v, ".17g") for v in vals]) + "\n")
    manifest = {
        "command": "synth",
        "seed": args.seed,
        "n": n,
        "synth_config": _jsonable(dataclasses.asdict(config)),
        "files": {k_: p.name for k_, p in paths.items()},
    }
    atomic_write(paths["keypoints.txt"], buf.getvalue(), args.force)
    atomic_write(paths["truth.txt"], truth.getvalue(), args.force)
    atomic_write(paths["manifest.json"], json.dumps(manifest, indent=2, sort_keys=True) + "\n", args.force)
    print(f"wrote {n} samples to {out}")
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def cmd_train_loc(args):
    settings = gather_settings(args, _known(L.LocNetConfig, L.TrainSpec, extra=("val_fraction",)))
    fixed_net = {"loss_kind": args.loss} if args.loss else {}
    config = build(L.LocNetConfig, settings, **fixed_net)
    spec = build(L.TrainSpec, settings, seed=args.seed,
                 **({"max_epochs": args.epochs} if args.epochs is not None else {}))
    val_fraction = float(settings.get("val_fraction", args.val_fraction))
    _check_writable(args.model, args.force)
    if args.log:
        _check_writable(args.log, args.force)
    k = parse_intrinsics(args)
    records = _load_labelled_records(args)
    x, y, skipped = _records_to_arrays(records, k)
    if len(y) < 2:
        raise DataError("need at least 2 labelled records")
    try:
        split = dio.split_dataset(range(len(y)), 1.0 - val_fraction, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tr, va = np.array(split.train), np.array(split.val)
    if len(tr) == 0 or len(va) == 0:
        raise DataError("split left an empty train or validation set")
    try:
        model = L.init_model(config, seed=args.seed, mean_distance=float(y[tr].mean()))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model, history = L.train(model, (x[tr], y[tr]), (x[va], y[va]), spec)
    model.metadata["intrinsics"] = _intrinsics_dict(k)
    model.metadata["split_seed"] = args.seed
    model.metadata["val_fraction"] = val_fraction
    model.metadata["n_train"] = int(len(tr))
    model.metadata["n_val"] = int(len(va))
    import io

    buf = io.StringIO()
    L.save_model(model, buf)
    atomic_write(args.model, buf.getvalue(), args.force)
    if args.log:
        lines = [json.dumps({"epoch": i, "train_loss": t, "val_loss": v, "best_val_loss": b}, sort_keys=True)
                 for i, (t, v, b) in enumerate(zip(history.train_loss, history.val_loss, history.best_val_loss))]
        atomic_write(args.log, "\n".join(lines) + "\n", args.force)
    print(f"trained {config.loss_kind} model: {len(history.val_loss)} epochs, "
          f"best val loss {model.metadata['final_val_loss']:.4f} (epoch {history.best_epoch}); "
          f"{skipped} records skipped")
    return EXIT_OK


def _load_locnet(path):
    with _open_text(path) as f:
        return L.load_model(f)


def _model_intrinsics(args, model):
    if getattr(args, "calib", None) or getattr(args, "intrinsics", None):
        return parse_intrinsics(args)
    if "intrinsics" in model.metadata:
        return G.CameraIntrinsics(**model.metadata["intrinsics"])
    return G.DEFAULT_INTRINSICS


def cmd_eval_loc(args):
    settings = gather_settings(args, _known(ev.AleBins))
    bins = build(ev.AleBins, settings)
    if args.ingest:
        with _open_text(args.ingest) as f:
            try:
                reports = ev.read_report_csv(f, bins)
            except ValueError as exc:
                raise DataError(str(exc)) from None
    else:
        if not args.model or not args.data:
            raise UsageError("eval-loc needs --model and --data (or --ingest)")
        model = _load_locnet(args.model)
        k = _model_intrinsics(args, model)
        x, y, skipped = _records_to_arrays(_load_labelled_records(args), k)
        reports = [ev.ale_report(np.column_stack([L.point_estimate(model, x), y]), bins,
                                 method=args.name or model.config.loss_kind)]
        if args.geometric_height:
            preds = []
            with _open_text(args.data) as f:
                records = [r for r in dio.read_keypoints(f) if r.gt_distance is not None]
            for r in records:
                try:
                    preds.append((G.geometric_distance(r.to_keypoints(), k, args.geometric_height), r.gt_distance))
                except G.GeometryError:
                    continue
            if preds:
                reports.append(ev.ale_report(preds, bins, method="geometric"))
    text = ev.render_table(reports, show_counts=not args.ingest)
    text += f"# {reports[0].rule}\n"
    if not args.ingest:
        text += f"# {GT_NOTE}\n"
    sys.stdout.write(text)
    if args.report:
        atomic_write(args.report, text, args.force)
    if args.csv:
        atomic_write(args.csv, ev.report_csv(reports), args.force)
    return EXIT_OK


def cmd_infer_loc(args):
    model = _load_locnet(args.model)
    k = _model_intrinsics(args, model)
    with _open_text(args.data) as f:
        records = dio.read_keypoints(f)
    lines, warnings = ["# id distance q05 q95"], 0
    for r in records:
        try:
            dist, (lo, hi) = L.predict_distance(model, r.to_keypoints(), k)
        except (G.GeometryError, DomainError) as exc:
            warnings += 1
            lines.append(f"{r.record_id} error {exc}")
            continue
        lines.append(f"{r.record_id} {dist:.6f} {lo:.6f} {hi:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write(args.out, text, args.force)
    else:
        sys.stdout.write(text)
    if warnings:
        print(f"warning: {warnings} record(s) could not be localized", file=sys.stderr)
    return EXIT_OK


def cmd_trn_synth(args):
    settings = gather_settings(args, {"n_frames", "dim", "num_classes", "variant", "amplitude", "noise",
                                      "motif_seed"})
    kw = dict(n_frames=int(settings.get("n_frames", args.frames)), dim=int(settings.get("dim", args.dim)),
              num_classes=int(settings.get("num_classes", args.classes)),
              variant=settings.get("variant", args.variant),
              amplitude=float(settings.get("amplitude", 5.0)), noise=float(settings.get("noise", 1.0)),
              motif_seed=int(settings.get("motif_seed", 0)))
    try:
        x, labels = T.synth_motif(args.n, args.seed, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _check_writable(args.out, args.force)
    tmp_dir = Path(args.out).parent
    fd, tmp = tempfile.mkstemp(dir=tmp_dir, prefix=".features.")
    os.close(fd)
    try:
        T.write_features(tmp, x, labels, text=args.text)
        os.replace(tmp, args.out)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    print(f"wrote {args.n} sequences ({kw['variant']}, N={kw['n_frames']}, D={kw['dim']}) to {args.out}")
    return EXIT_OK


def _read_feature_file(path):
    try:
        x, labels = T.read_features(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    return T.flatten_streams(x), labels


def cmd_trn_train(args):
    settings = gather_settings(args, _known(T.TrnConfig, L.TrainSpec))
    x_tr, y_tr = _read_feature_file(args.train)
    x_va, y_va = _read_feature_file(args.val)
    if y_tr is None or y_va is None:
        raise DataError("training and validation files must be labelled")
    if x_tr.shape[1:] != x_va.shape[1:]:
        raise DataError(f"train/val shapes differ: {x_tr.shape[1:]} vs {x_va.shape[1:]}")
    config = build(T.TrnConfig, settings, seed=args.seed, max_scale=x_tr.shape[1], feature_dim=x_tr.shape[2])
    spec = build(L.TrainSpec, settings, seed=args.seed,
                 **({"max_epochs": args.epochs} if args.epochs is not None else {}))
    _check_writable(args.model, args.force)
    try:
        model = T.init_trn(config)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        model, history = T.trn_train(model, (x_tr, y_tr), (x_va, y_va), spec)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    import io

    buf = io.StringIO()
    T.save_trn(model, buf)
    atomic_write(args.model, buf.getvalue(), args.force)
    acc = history.val_accuracy[history.best_epoch]
    print(f"trained TRN: {len(history.val_loss)} epochs, best epoch {history.best_epoch}, "
          f"val accuracy {100 * acc:.1f}%")
    return EXIT_OK


def cmd_trn_eval(args):
    with _open_text(args.model) as f:
        model = T.load_trn(f)
    x, y = _read_feature_file(args.data)
    if y is None:
        raise DataError("evaluation file must be labelled")
    try:
        pred = T.predict_labels(model, x)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    report = ev.accuracy_report(pred, y)
    text = report.render(args.name or "TRN")
    sys.stdout.write(text)
    if args.report:
        atomic_write(args.report, text, args.force)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p, seed_required=False):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if seed_required:
        p.add_argument("--seed", type=int, required=True, help="random seed (required)")


def _camera(p):
    p.add_argument("--intrinsics", metavar="FX,FY,CX,CY", help="pinhole intrinsics")
    p.add_argument("--calib", help="KITTI calibration file (P2 is used)")


def build_parser():
    parser = _Parser(prog="pedloc", description="Monocular pedestrian localization and temporal relation tools.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic keypoint dataset")
    _common(p, seed_required=True)
    _camera(p)
    p.add_argument("--n", type=int, help="number of pedestrians (default 1000)")
    p.add_argument("--noise", type=float, help="pixel noise sigma")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prefix", default="", help="filename prefix for the outputs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-loc", help="train the localization network")
    _common(p, seed_required=True)
    _camera(p)
    p.add_argument("--data", required=True, help="keypoint file with ground truth")
    p.add_argument("--kitti-labels", help="directory of KITTI label files to join by frame")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--loss", choices=L.LOSS_KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--log", help="output training log (JSON lines)")
    p.set_defaults(func=cmd_train_loc)

    p = sub.add_parser("eval-loc", help="ALE report by distance bin")
    _common(p)
    _camera(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--kitti-labels")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--ingest", help="render per-bin values from a report CSV instead")
    p.add_argument("--name", help="method name in the report")
    p.add_argument("--geometric-height", type=float, help="also report the geometric baseline")
    p.add_argument("--report", help="write the text table here")
    p.add_argument("--csv", help="write the machine-readable report here")
    p.set_defaults(func=cmd_eval_loc)

    p = sub.add_parser("infer-loc", help="distance and 90%% interval per record")
    _common(p)
    _camera(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer_loc)

    p = sub.add_parser("trn", help="temporal relation network workflows")
    tsub = p.add_subparsers(dest="trn_command", parser_class=_Parser)
    tsub.required = True

    q = tsub.add_parser("synth-motif", help="write synthetic motif feature sequences")
    _common(q, seed_required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--frames", type=int, default=8)
    q.add_argument("--dim", type=int, default=32)
    q.add_argument("--classes", type=int, default=8)
    q.add_argument("--variant", choices=(T.POSITION, T.SPAN), default=T.POSITION)
    q.add_argument("--text", action="store_true", help="structured-text instead of binary")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_trn_synth)

    q = tsub.add_parser("train", help="train a TRN classifier")
    _common(q, seed_required=True)
    q.add_argument("--train", required=True)
    q.add_argument("--val", required=True)
    q.add_argument("--epochs", type=int)
    q.add_argument("--model", required=True)
    q.set_defaults(func=cmd_trn_train)

    q = tsub.add_parser("eval", help="accuracy of a TRN classifier")
    _common(q)
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--name")
    q.add_argument("--report")
    q.set_defaults(func=cmd_trn_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pedloc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except L.TrainingDivergence as exc:
        print(f"pedloc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, dio.ParseError, dio.SchemaError, L.ModelFormatError, T.FeatureFormatError,
            G.GeometryError, ValueError, OSError) as exc:
        print(f"pedloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
