"""``sentinel`` command line: fit, detect, simulate, eval.

Exit codes: 0 success (detect: no alarms), 1 alarms raised (detect only),
2 input or config error, 3 model error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from sentinel import config as cfgmod
from sentinel.detector import Detector, write_events
from sentinel.evaluation import (
    compare_methods,
    config_hash,
    emit_figures,
    roc_auc,
    write_json,
)
from sentinel.geometry import GeometryError
from sentinel.ingest import (
    ModelFormatError,
    ParseError,
    Pipeline,
    file_sha256,
    fit_pipeline,
    iter_nslkdd,
    load_nslkdd,
)
from sentinel.sde import run_fpt_experiment, window_labels_after_onset

logger = logging.getLogger("sentinel")

EXIT_OK, EXIT_ALARM, EXIT_INPUT, EXIT_MODEL = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# Flag name -> dotted config path.
_DETECTOR_FLAGS = {
    "window": "detector.window_size",
    "history": "detector.history_len",
    "kappa": "detector.kappa",
    "stride": "detector.stride",
    "ridge": "detector.ridge",
    "threshold_floor": "detector.threshold_floor",
    "drift_patience": "detector.drift_patience",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--temperature", type=float, help="operational temperature for the Landauer bound")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_detector_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("detector")
    g.add_argument("--window", type=int, help="window size W")
    g.add_argument("--history", type=int, help="threshold history length L")
    g.add_argument("--kappa", type=float, help="threshold multiplier")
    g.add_argument("--stride", type=int)
    g.add_argument("--ridge", type=float)
    g.add_argument("--threshold-floor", type=float)
    g.add_argument("--drift-patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sentinel", description="Streaming KL-divergence anomaly detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit encoder, PCA and safe model on normal training data")
    p.add_argument("train_path")
    p.add_argument("--out", default="model.json", help="model output path")
    p.add_argument("--pca-dims", type=int)
    p.add_argument("--bandwidth", type=float, help="KDE bandwidth")
    p.add_argument("--holdout-fraction", type=float)
    p.add_argument("--window", type=int, help="window size used for static-threshold calibration")
    p.add_argument("--ridge", type=float)
    _add_common(p)

    p = sub.add_parser("detect", help="stream records through the detector")
    p.add_argument("model_path")
    p.add_argument("data_path")
    p.add_argument("--out-dir", default="detect_out")
    _add_detector_flags(p)
    _add_common(p)

    p = sub.add_parser("simulate", help="run the drift-diffusion first-passage experiment")
    p.add_argument("--out-dir", default="simulate_out")
    p.add_argument("--trials", type=int)
    p.add_argument("--diffusion-factor", type=float)
    p.add_argument("--drift-factor", type=float)
    p.add_argument("--onset", type=float)
    _add_common(p)

    p = sub.add_parser("eval", help="score dynamic and static detectors on a labeled file")
    p.add_argument("model_path")
    p.add_argument("test_path")
    p.add_argument("--out-dir", default="eval_out")
    p.add_argument("--subsample", type=int, help="score a seeded subset of N records (file order kept)")
    p.add_argument("--quorum", type=float, help="attack fraction above which a window is labeled attack")
    _add_detector_flags(p)
    _add_common(p)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out: dict = {}
    simple = {
        "seed": "seed",
        "temperature": "temperature",
        "pca_dims": "pipeline.pca_dims",
        "bandwidth": "pipeline.bandwidth",
        "holdout_fraction": "pipeline.holdout_fraction",
        "subsample": "evaluation.subsample",
        "quorum": "evaluation.quorum",
        "trials": "simulation.n_trials",
        "diffusion_factor": "simulation.schedule.diffusion_factor",
        "drift_factor": "simulation.schedule.drift_factor",
        "onset": "simulation.schedule.onset_time",
        **_DETECTOR_FLAGS,
    }
    for attr, dotted in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfgmod.set_path(out, dotted, value)
    if args.command == "fit":
        # In fit, --ridge and --window feed the pipeline as well.
        if getattr(args, "ridge", None) is not None:
            cfgmod.set_path(out, "pipeline.ridge", args.ridge)
    return out


def _resolve(args) -> dict:
    try:
        return cfgmod.load_config(args.config, _overrides(args))
    except cfgmod.ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_INPUT) from None


def _echo(cfg: dict, command: str, inputs: dict) -> dict:
    return {**cfg, "command": command, "inputs": inputs}


def _load_model(path) -> Pipeline:
    try:
        return Pipeline.load(path)
    except ModelFormatError as exc:
        raise CliError(f"model error: {exc}", EXIT_MODEL) from None


def _load_records(path):
    try:
        return load_nslkdd(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_INPUT) from None
    except ParseError as exc:
        raise CliError(f"parse error in {path}: {exc}", EXIT_INPUT) from None


# --------------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = _resolve(args)
    records = _load_records(args.train_path)
    if not records:
        raise CliError(f"parse error in {args.train_path}: no records", EXIT_INPUT)
    p = cfg["pipeline"]
    try:
        pipe = fit_pipeline(
            records,
            pca_dims=p["pca_dims"],
            bandwidth=p["bandwidth"],
            ridge=p["ridge"],
            holdout_fraction=p["holdout_fraction"],
            window_size=cfg["detector"]["window_size"],
            seed=cfg["seed"],
        )
    except (ValueError, GeometryError) as exc:
        raise CliError(f"fit failed: {exc}", EXIT_MODEL) from None
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    pipe.save(out)
    echo = _echo(cfg, "fit", {"train_path": str(args.train_path),
                              "train_sha256": file_sha256(args.train_path)})
    write_json(out.with_suffix(".config.json"), echo)
    m = pipe.meta
    ev = np.asarray(m["explained_variance"])
    print(f"normals used: {m['n_fit']} (held out {m['n_holdout']} of {m['n_normal']})")
    print(f"PCA: {m['encoded_width']} -> {m['pca_dims']} dims, "
          f"explained variance {np.array2string(ev, precision=4)}")
    print(f"safe covariance condition number: {m['condition_number']:.4g}")
    print(f"model written to {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _resolve(args)
    pipe = _load_model(args.model_path)
    try:
        detector = Detector(pipe.safe, cfgmod.detector_config(cfg), cfg["temperature"])
    except ValueError as exc:
        raise CliError(f"model error: {exc}", EXIT_MODEL) from None
    os.makedirs(args.out_dir, exist_ok=True)
    events_path = os.path.join(args.out_dir, "events.ndjson")
    n_events = n_alarms = 0
    landauer_total = 0.0
    fpt = None
    try:
        with open(args.data_path, "rb") as src, open(events_path, "w", encoding="utf-8") as sink:
            for rec in iter_nslkdd(src):
                event = detector.step(pipe.transform_one(rec))
                if event is None:
                    continue
                n_events += 1
                if event.alarmed:
                    n_alarms += 1
                    landauer_total += event.landauer
                if event.is_fpt:
                    fpt = event.step
                sink.write(event.to_json())
                sink.write("\n")
    except OSError as exc:
        raise CliError(f"cannot read {args.data_path}: {exc}", EXIT_INPUT) from None
    except ParseError as exc:
        raise CliError(f"parse error in {args.data_path}: {exc}", EXIT_INPUT) from None

    summary = {
        "n_events": n_events,
        "n_alarms": n_alarms,
        "fpt_step": fpt,
        "landauer_total": landauer_total,
    }
    write_json(os.path.join(args.out_dir, "summary.json"), summary)
    echo = _echo(cfg, "detect", {"model_path": str(args.model_path), "data_path": str(args.data_path)})
    write_json(os.path.join(args.out_dir, "config.json"), echo)
    print(f"events: {n_events}, alarms: {n_alarms}")
    print(f"first passage: {'none' if fpt is None else f'step {fpt}'}")
    print(f"Landauer work over alarmed windows: {landauer_total:.6g} (k_B units)")
    return EXIT_ALARM if n_alarms else EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    sim = cfg["simulation"]
    sde_cfg = cfgmod.sde_config(cfg)
    sched = cfgmod.schedule(cfg)
    det_cfg = cfgmod.sim_detector_config(cfg)
    try:
        det_cfg.check_dimension(sde_cfg.dim)
        result = run_fpt_experiment(
            sde_cfg, sched, det_cfg, sim["safe_fit_time"], sim["n_trials"],
            temperature=cfg["temperature"], keep_trajectories=True,
        )
    except ValueError as exc:
        raise CliError(f"config error: {exc}", EXIT_INPUT) from None

    out = Path(args.out_dir)
    (out / "events").mkdir(parents=True, exist_ok=True)
    (out / "trajectories").mkdir(exist_ok=True)
    for i, events in enumerate(result.event_logs):
        write_events(events, out / "events" / f"trial_{i:04d}.ndjson")
    for i, traj in enumerate(result.trajectories[: sim["export_trajectories"]]):
        traj.write_csv(out / "trajectories" / f"trial_{i:04d}.csv")
    with open(out / "fpt_samples.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial", "fpt_step", "fpt_time"])
        for i, (s, t) in enumerate(zip(result.fpt_steps, result.fpt_times)):
            writer.writerow([i, "" if s is None else s, "" if t is None else repr(t)])
    write_json(out / "fpt.json", result.summary())

    onset_step = int(round(sched.onset_time / sde_cfg.dt))
    first = result.event_logs[0]
    truth0 = window_labels_after_onset(first, det_cfg.window_size, onset_step)
    pooled_scores, pooled_truth = [], []
    for events in result.event_logs:
        pooled_scores.extend(e.kl_nats for e in events)
        pooled_truth.extend(window_labels_after_onset(events, det_cfg.window_size, onset_step))
    scores = np.asarray(pooled_scores)
    scores[~np.isfinite(scores)] = np.finfo(float).max
    if 0 < sum(pooled_truth) < len(pooled_truth):
        roc = roc_auc(scores, pooled_truth)
        emit_figures(out, first, truth0, roc, names=("fig4a", "fig4b", "fig4c"),
                     time_scale=sde_cfg.dt)
    else:
        from sentinel.evaluation import RocCurve
        emit_figures(out, first, truth0, RocCurve(((0.0, 0.0), (1.0, 1.0)), float("nan")),
                     names=("fig4a", "fig4b", "fig4c"), time_scale=sde_cfg.dt)
    write_json(out / "config.json", _echo(cfg, "simulate", {}))

    med = result.median_fpt()
    print(f"trials: {len(result.fpt_steps)}, detections: {len(result.detected)}")
    print(f"median FPT: {'none' if math.isinf(med) else f'{med:.3f} s'} "
          f"(onset {sched.onset_time:g} s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    pipe = _load_model(args.model_path)
    records = _load_records(args.test_path)
    n = cfg["evaluation"]["subsample"]
    if n is not None and n < len(records):
        rng = np.random.default_rng(cfg["seed"])
        keep = np.sort(rng.choice(len(records), size=n, replace=False))
        records = [records[i] for i in keep]
    labels = np.array([r.is_attack for r in records], dtype=int)
    try:
        Z = pipe.transform(records)
        det_cfg = cfgmod.detector_config(cfg)
        det_cfg.check_dimension(pipe.safe.dim)
        result = compare_methods(
            pipe.safe, Z, labels, det_cfg,
            calibration_kl=pipe.calibration_kl(det_cfg.window_size, det_cfg.ridge),
            quorum=cfg["evaluation"]["quorum"],
            temperature=cfg["temperature"],
        )
    except ValueError as exc:
        raise CliError(f"model error: {exc}", EXIT_MODEL) from None

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scored = result.scored_events
    emit_figures(out, scored, result.truth, result.roc, roc_raw=result.roc_raw)
    write_events(result.events, out / "events.ndjson")
    echo = _echo(cfg, "eval", {"model_path": str(args.model_path), "test_path": str(args.test_path)})
    report = result.report({
        "seed": cfg["seed"],
        "config_hash": config_hash(echo),
        "dataset_sha256": {
            "test": file_sha256(args.test_path),
            "model": file_sha256(args.model_path),
        },
        "n_records": len(records),
    })
    write_json(out / "metrics.json", report)
    write_json(out / "config.json", echo)

    table = result.table()
    print(f"{'method':<18}{'acc%':>9}{'prec%':>9}{'rec%':>9}{'fpr%':>9}")
    for name, row in table.items():
        cells = "".join(f"{'n/a' if v is None else f'{v:.1f}':>9}" for v in row.values())
        print(f"{name:<18}{cells}")
    print(f"AUC (margin): {result.roc.auc:.4f}   AUC (raw KL): {result.roc_raw.auc:.4f}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "detect": cmd_detect, "simulate": cmd_simulate, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"sentinel {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
