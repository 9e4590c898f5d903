"""``vecmap`` command line: generate | run | ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file-format
error, 3 numeric failure.  Without ``--out`` outputs go under
``$VECMAP_OUT`` (default ``./vecmap_out``).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics, runner, tracker
from .config import PipelineConfig
from .errors import ConfigError, FormatError, NumericError, VecmapError
from .geometry import grid_shape
from .tensor import ParameterStore
from .world import CLASSES, WorldConfig, generate_scenario, load_scenario, save_scenario

OUT_ENV = "VECMAP_OUT"
MANIFEST_FORMAT = "vecmap-manifest"
MANIFEST_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("vecmap")


class UsageError(VecmapError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(arg: str | None) -> Path:
    return Path(arg if arg else os.environ.get(OUT_ENV, "vecmap_out"))


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from exc
    return path


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


# ---------------------------------------------------------------- generate


def _floats(text: str, n: int, flag: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"{flag} expects {n} comma-separated numbers, got {text!r}") from exc
    if len(vals) != n:
        raise UsageError(f"{flag} expects {n} comma-separated numbers, got {text!r}")
    return vals


def cmd_generate(args) -> int:
    wc = WorldConfig(n_frames=args.frames, speed=args.speed, turn_rate=args.turn_rate, n_lanes=args.lanes,
                     n_crossings=args.crossings, feature_noise=args.noise, feature_dropout=args.dropout,
                     channels=args.channels, empty=args.empty, window=_floats(args.window, 4, "--window"),
                     resolution=args.resolution, n_points=args.points)
    wc.validate()
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = _mkdir(_out_dir(args.out))
    names = []
    for i in range(args.count):
        name = f"scenario_{i:04d}.json"
        try:
            save_scenario(generate_scenario(wc, args.seed + i), out / name)
        except OSError as exc:
            raise OSError(f"cannot write {out / name}: {exc.strerror}") from exc
        names.append(name)
    _write(out / "index.json", json.dumps({"format": "vecmap-scenario-index", "version": 1,
                                           "seed": args.seed, "scenarios": names}, indent=1) + "\n")
    print(f"wrote {len(names)} scenarios to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- run


def expand_scenarios(paths: list[str]) -> list[Path]:
    """Files as given; a directory or an index.json expands to its listed scenarios."""
    out = []
    for p in map(Path, paths):
        index = p / "index.json" if p.is_dir() else p if p.name == "index.json" else None
        if index is None:
            out.append(p)
            continue
        try:
            names = json.loads(index.read_text(encoding="utf-8"))["scenarios"]
        except OSError as exc:
            raise OSError(f"cannot read {index}: {exc.strerror}") from exc
        except (ValueError, KeyError) as exc:
            raise FormatError(f"{index}: malformed scenario index") from exc
        out.extend(index.parent / n for n in names)
    return out


def _load_sequences(paths: list[Path]):
    seqs = []
    for p in paths:
        try:
            seqs.append(runner.observe_all(load_scenario(p)))
        except OSError as exc:
            raise OSError(f"cannot read scenario {p}: {exc.strerror}") from exc
    return seqs


def _check_compatible(cfg: PipelineConfig, seqs, paths) -> None:
    want = grid_shape(cfg.window, cfg.resolution) + (cfg.channels,)
    for p, seq in zip(paths, seqs):
        for obs in seq[:1]:
            got = obs.bev_features.features.shape
            pts = {g.polyline.points.shape[0] for g in obs.gt_instances}
            if got != want or pts - {cfg.n_points}:
                raise ConfigError(f"scenario {p} (grid {got}, points {sorted(pts)}) does not match the config "
                                  f"(grid {want}, points {cfg.n_points})")


def dumps_manifest(m: dict) -> str:
    return json.dumps(m, indent=1, sort_keys=True) + "\n"


def read_manifest(path: str | Path) -> dict:
    try:
        m = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: malformed manifest") from exc
    if m.get("format") != MANIFEST_FORMAT or m.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} file")
    return m


def _load_checkpoint(path: str, cfg: PipelineConfig) -> ParameterStore:
    params = tracker.init_params(cfg)
    try:
        _, state = ParameterStore.read_checkpoint(path)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    params.load_state_dict(state)
    return params


def _dump_nonfinite(out: Path, exc: runner.NonFiniteLoss) -> Path:
    obs = exc.frame
    feats = obs.bev_features.features
    diag = {"error": str(exc), "frame_index": obs.frame_index, "losses": exc.losses,
            "features": {"min": float(np.nanmin(feats)), "max": float(np.nanmax(feats)),
                         "finite": bool(np.all(np.isfinite(feats)))},
            "gt_instances": [{"id": g.instance_id, "class": CLASSES[g.cls],
                              "points": g.polyline.points.tolist()} for g in obs.gt_instances]}
    path = out / "nonfinite_frame.json"
    _write(path, json.dumps(diag, indent=1, sort_keys=True) + "\n")
    return path


def cmd_run(args) -> int:
    if args.manifest:
        m = read_manifest(args.manifest)
        cfg = PipelineConfig.from_text(m["config"])
        mode, epochs, scen = m["mode"], m["epochs"], [Path(p) for p in m["scenarios"]]
        ckpt_in, out = m["checkpoint_in"], _out_dir(args.out or m["out_dir"])
    else:
        if not args.scenarios:
            raise UsageError("run: --scenarios is required (or --manifest)")
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        mode, epochs = args.mode, args.epochs if args.epochs is not None else cfg.epochs
        scen, ckpt_in, out = expand_scenarios(args.scenarios), args.checkpoint_in, _out_dir(args.out)
    if epochs < 0:
        raise UsageError("--epochs must be >= 0")
    if mode == "infer" and not ckpt_in:
        raise UsageError("infer mode needs --checkpoint-in")
    if ckpt_in and not Path(ckpt_in).is_file():
        raise OSError(f"checkpoint not found: {ckpt_in}")
    _mkdir(out)
    ckpt_out = out / "checkpoint.txt"
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "config": cfg.to_text(),
                "seed": cfg.seed, "mode": mode, "epochs": epochs, "scenarios": [str(p) for p in scen],
                "checkpoint_in": ckpt_in, "checkpoint_out": str(ckpt_out) if mode == "train" else None,
                "out_dir": str(out), "created": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    if not args.manifest:
        _write(out / "manifest.json", dumps_manifest(manifest))
    seqs = _load_sequences(scen)
    _check_compatible(cfg, seqs, scen)
    params = _load_checkpoint(ckpt_in, cfg) if ckpt_in else tracker.init_params(cfg)

    if mode == "train":
        try:
            losses = runner.train(params, cfg, seqs, epochs)
        except runner.NonFiniteLoss as exc:
            path = _dump_nonfinite(out, exc)
            raise NumericError(f"{exc} (diagnostics in {path})") from exc
        params.save(ckpt_out)
        _write(out / "losses.csv", "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))
        print(f"trained {epochs} epochs on {len(seqs)} sequences; checkpoint {ckpt_out}")
        return EXIT_OK

    preds_dir, gt_dir = _mkdir(out / "predictions"), _mkdir(out / "ground_truth")
    records = []
    for path, seq in zip(scen, seqs):
        name = path.stem
        rows = runner.prediction_rows(runner.run_sequence(params, cfg, seq))
        gts = runner.gt_records(seq)
        metrics.write_log(preds_dir / f"{name}.jsonl", name, rows)
        metrics.write_log(gt_dir / f"{name}.jsonl", name, metrics.gt_rows(gts))
        records.append(metrics.EvalRecord(name, rows, gts))
    res = metrics.evaluate(records, cfg.window, cfg.resolution, cfg.thickness)
    _write(out / "metrics.csv", metrics.results_csv(res))
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"mAP {res.mAP:.4f}  mAP_raster {res.raster_mAP:.4f}  {metrics.CMAP_LABEL} {res.c_mAP:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- ablate

ABLATION_HEADER = ["n", "mAP", metrics.CMAP_LABEL, "L_pred"]


def ablate_history(cfg: PipelineConfig, train_seqs, heldout_seqs, n_list, epochs: int) -> tuple[list[list], float]:
    """One model per history length with the same seed and budget.

    Returns table rows [n, mAP, C-mAP, L_pred] and the zero-offset L_pred.
    """
    rows, baseline = [], None
    for n in n_list:
        c = cfg.replace(history=int(n))
        params = tracker.init_params(c)
        runner.train(params, c, train_seqs, epochs)
        res = metrics.evaluate(runner.eval_records(params, c, heldout_seqs), c.window, c.resolution,
                               c.thickness, raster=False)
        lp, base, _ = runner.heldout_pred_loss(params, c, heldout_seqs)
        baseline = base if baseline is None else baseline
        rows.append([int(n), res.mAP, res.c_mAP, lp])
        log.info("history %d: mAP %.4f C-mAP %.4f L_pred %.4f (zero offset %.4f)", n, res.mAP, res.c_mAP, lp, base)
    return rows, baseline


def ablation_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for n, m, cm, lp in rows:
        w.writerow([n, repr(float(m)), repr(float(cm)), repr(float(lp))])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    try:
        n_list = [int(x) for x in args.n_list.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--n-list must be comma-separated integers, got {args.n_list!r}") from exc
    if not n_list or min(n_list) < 1:
        raise UsageError("--n-list needs at least one positive integer")
    epochs = args.epochs if args.epochs is not None else cfg.epochs
    train_paths = expand_scenarios(args.scenarios)
    held_paths = expand_scenarios(args.heldout) if args.heldout else []
    if not held_paths:
        if len(train_paths) < 2:
            raise UsageError("need --heldout scenarios or at least two --scenarios to split")
        k = max(1, len(train_paths) // 4)
        train_paths, held_paths = train_paths[:-k], train_paths[-k:]
    out = _mkdir(_out_dir(args.out))
    _write(out / "ablation_manifest.json", dumps_manifest({
        "format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "config": cfg.to_text(), "seed": cfg.seed,
        "mode": "ablate", "epochs": epochs, "n_list": n_list, "scenarios": [str(p) for p in train_paths],
        "heldout": [str(p) for p in held_paths], "out_dir": str(out),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z")}))
    train_seqs, held_seqs = _load_sequences(train_paths), _load_sequences(held_paths)
    _check_compatible(cfg, train_seqs + held_seqs, train_paths + held_paths)
    rows, baseline = ablate_history(cfg, train_seqs, held_seqs, n_list, epochs)
    _write(out / "ablation.csv", ablation_csv(rows))
    _write(out / "ablation_baseline.json", json.dumps({"zero_offset_L_pred": baseline}, indent=1) + "\n")
    print("History Frames  " + "  ".join(f"{r[0]:>6d}" for r in rows))
    print("mAP             " + "  ".join(f"{r[1]:6.3f}" for r in rows))
    print(f"{metrics.CMAP_LABEL:<16}" + "  ".join(f"{r[2]:6.3f}" for r in rows))
    print("L_pred          " + "  ".join(f"{r[3]:6.3f}" for r in rows) + f"   (zero offset {baseline:.3f})")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vecmap", description="Online vectorized map construction at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic scenario files")
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--frames", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--speed", type=float, default=5.0)
    g.add_argument("--turn-rate", type=float, default=0.0)
    g.add_argument("--lanes", type=int, default=2)
    g.add_argument("--crossings", type=int, default=1)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--dropout", type=float, default=0.0)
    g.add_argument("--channels", type=int, default=32)
    g.add_argument("--window", default="-16,16,-16,16", help="x_min,x_max,y_min,y_max in metres")
    g.add_argument("--resolution", type=float, default=0.5)
    g.add_argument("--points", type=int, default=20, help="points per ground-truth polyline")
    g.add_argument("--empty", action="store_true", help="scenarios without map elements")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="train a model or run inference and evaluation")
    r.add_argument("--scenarios", nargs="+", help="scenario files, directories or index.json")
    r.add_argument("--config")
    r.add_argument("--mode", choices=("train", "infer"), default="infer")
    r.add_argument("--epochs", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--checkpoint-in")
    r.add_argument("--manifest", help="replay a previous run from its manifest")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="history-length sweep for the future-guidance head")
    a.add_argument("--scenarios", nargs="+", required=True)
    a.add_argument("--heldout", nargs="+")
    a.add_argument("--config")
    a.add_argument("--n-list", default="2,3,4,5,6")
    a.add_argument("--epochs", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
