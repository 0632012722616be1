"""Command-line entry point: ingest, synth, train, predict, evaluate, gradcheck.

Exit codes: 0 success, 1 contract/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data.ais import parse_timestamp
from .data.dataset import Dataset, build_dataset, load_dataset, write_dataset
from .data.geodesy import project_utm
from .data.synth import SynthConfig, synthesize
from .data.trajectory import Trajectory, resample
from .errors import ConfigError, ContractError, DataError, ExtentError, FormatError, NumericError, VesselTrajError
from .evaluation import NMI, BinRow, ade, ape, coverage, evaluate_predictions, horizon_steps, write_bins_csv
from .export import prediction_features, write_attention_csv, write_geojson, write_predictions_csv
from .model import ModelConfig, TrajectoryModel, one_hot
from .training import nll_loss, train
from .uncertainty import combine_moments, mc_forward

logger = logging.getLogger("vesseltraj")


# -- helpers ------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    cfg = cfg.with_overrides(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace("data", seed=args.seed).replace("train", seed=args.seed)
    return cfg


def prepare_outdir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out / "config.json").write_text(cfg.to_json())
    return out


def _model_config(cfg: RunConfig, vocab: list[str], unlabeled: bool, seq_in: int, seq_out: int) -> ModelConfig:
    mc = cfg.model
    v = 0 if unlabeled else len(vocab)
    if mc.n_intents not in (0, v) and not unlabeled:
        raise ExtentError(f"model.n_intents = {mc.n_intents} but the dataset has {len(vocab)} intention classes")
    return replace(mc, n_intents=v, seq_in=seq_in, seq_out=seq_out)


def _origin(cfg: RunConfig, ds: Dataset) -> tuple[tuple[float, float], str]:
    if cfg.eval.origin is not None:
        return tuple(cfg.eval.origin), "config"
    if "origin" in ds.meta:
        return tuple(ds.meta["origin"]), "dataset"
    return tuple(ds.stats.mean.tolist()), "training mean"


def _print_counts(ds: Dataset) -> None:
    for name, c in ds.counts().items():
        print(f"  {name:5s}: {c['trajectories']:6d} trajectories  {c['windows']:8d} windows")


# -- ingest / synth -----------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = resolve_config(args)
    ds, parsed = build_dataset(args.csv, cfg.data, workers=args.workers)
    out = prepare_outdir(args, cfg)
    data_path, man_path = write_dataset(ds, out, cfg.to_dict())
    print(f"rows read: {parsed.n_rows}  skipped (malformed): {parsed.n_skipped}  filtered (ship type): {parsed.n_filtered}")
    if parsed.skipped_lines:
        shown = ", ".join(str(n) for n in parsed.skipped_lines[:10])
        print(f"  first skipped lines: {shown}")
    _print_counts(ds)
    print(f"wrote {data_path} and {man_path}")
    return 0


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    d = cfg.data
    sc = SynthConfig(
        scenario=args.scenario,
        n=args.n,
        noise=args.noise,
        seed=d.seed,
        delta=d.delta,
        seq_in=d.seq_in,
        seq_out=d.seq_out,
        splits=d.splits,
        accel=args.accel,
        period=args.period,
    )
    ds = synthesize(sc)
    out = prepare_outdir(args, cfg)
    echo = cfg.to_dict()
    echo["synth"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(sc).items()}
    data_path, man_path = write_dataset(ds, out, echo)
    _print_counts(ds)
    print(f"wrote {data_path} and {man_path}")
    return 0


# -- train --------------------------------------------------------------------


def val_metrics(model: TrajectoryModel, ds: Dataset, split: str = "val") -> dict:
    """Deterministic-pass APE/ADE in metres on a split, for the training log."""
    ws = ds[split]
    psi = ws.psi_onehot(model.config.n_intents) if model.config.labeled else None
    out = model.forward(ws.x, psi, mode="deterministic")
    pred = ds.stats.denormalize(out.mean_array())
    truth = ds.stats.denormalize(ws.y)
    res = {f"val_ape_{name}": ape(pred, truth, k) for name, k in horizon_steps(ds.meta.get("delta", 900.0), ws.y.shape[1]).items()}
    res["val_ade"] = ade(pred, truth)
    return res


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.loss:
        cfg = cfg.replace("train", loss=args.loss)
    if args.epochs is not None:
        cfg = cfg.replace("train", max_epochs=args.epochs)
    ds = load_dataset(args.dataset)
    out = prepare_outdir(args, cfg)
    ckpt_path = out / "model.ckpt"
    opt, start, best = None, 0, math.inf
    if args.resume:
        ck = load_checkpoint(args.resume, expect_vocab=None if args.unlabeled else ds.vocab)
        model, opt, start, best = ck.model, ck.optimizer, ck.epoch, ck.best_val_loss
        if not np.allclose(ck.stats.mean, ds.stats.mean) or not np.allclose(ck.stats.std, ds.stats.std):
            raise DataError("checkpoint normalization does not match the dataset")
        print(f"resuming from epoch {start}")
    else:
        mcfg = _model_config(cfg, ds.vocab, args.unlabeled, ds.seq_in, ds.seq_out)
        model = TrajectoryModel.init(mcfg, cfg.train.seed)
    vocab = [] if not model.config.labeled else ds.vocab

    def on_divergence(best_params, epoch):
        for k, arr in best_params.items():
            model.params[k].data[...] = arr
        save_checkpoint(Checkpoint(model, ds.stats, vocab, cfg.train.to_dict(), epoch - 1, best), out / "last_good.ckpt")
        print(f"training diverged at epoch {epoch}; last good parameters saved to {out / 'last_good.ckpt'}")

    def on_epoch(rec):
        if args.verbose or rec.epoch % max(1, args.print_every) == 0:
            print(f"epoch {rec.epoch:5d}  train {rec.train_loss:.5f}  val {rec.val_loss:.5f}", flush=True)

    result = train(
        model,
        ds["train"],
        ds["val"],
        cfg.train,
        evaluate_val=lambda m: val_metrics(m, ds),
        log_path=out / "train_log.csv",
        on_divergence=on_divergence,
        optimizer=opt,
        start_epoch=start,
        best_val_loss=best,
        on_epoch=on_epoch,
    )
    save_checkpoint(
        Checkpoint(
            result.model,
            ds.stats,
            vocab,
            cfg.train.to_dict(),
            result.epoch,
            result.best_val_loss,
            result.optimizer,
            {"best_epoch": result.best_epoch, "dataset": Path(args.dataset).name},
        ),
        ckpt_path,
    )
    print(f"epochs run through {result.epoch}, best epoch {result.best_epoch} (val loss {result.best_val_loss:.5f})")
    print(f"wrote {ckpt_path}")
    return 0


# -- predict ------------------------------------------------------------------


def read_track(path: Path | str, delta: float, zone: int) -> np.ndarray:
    """Track CSV -> planar points at spacing ``delta``.

    Accepts columns ``easting,northing`` (already uniform) or
    ``timestamp,lat,lon`` (projected and resampled).
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: empty track")
    keys = {k.strip().lower(): k for k in rows[0]}
    try:
        if "easting" in keys and "northing" in keys:
            return np.array([[float(r[keys["easting"]]), float(r[keys["northing"]])] for r in rows])
        if {"timestamp", "lat", "lon"} <= set(keys):
            t = np.array([parse_timestamp(r[keys["timestamp"]]) for r in rows])
            lat = np.array([float(r[keys["lat"]]) for r in rows])
            lon = np.array([float(r[keys["lon"]]) for r in rows])
            e, n = project_utm(lat, lon, zone)
            res = resample(Trajectory("track", t, np.column_stack([e, n])), delta)
            if res is None:
                raise ContractError(f"{path}: track spans less than one sampling interval")
            return res.xy
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    raise FormatError(f"{path}: need columns easting,northing or timestamp,lat,lon")


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    ck = load_checkpoint(args.checkpoint)
    model, stats = ck.model, ck.stats
    l = model.config.seq_in
    zone = cfg.data.zone
    truth = None
    if args.track:
        pts = read_track(args.track, cfg.data.delta, zone)
        if len(pts) < l:
            raise ContractError(f"track has {len(pts)} points after resampling; the model needs {l}")
        x = stats.normalize(pts[-l:])[None]
        ids = ["track"]
        psi = None
        if model.config.labeled:
            if args.intent is None:
                raise ConfigError(f"labeled model: pass --intent, one of {ck.vocab}")
            if args.intent not in ck.vocab:
                raise ExtentError(f"intention {args.intent!r} is not in the vocabulary {ck.vocab}")
            psi = one_hot([ck.vocab.index(args.intent)], model.config.n_intents)
    elif args.dataset:
        ds = load_dataset(args.dataset)
        if model.config.labeled and ds.vocab != ck.vocab:
            raise ExtentError(f"intention vocabulary mismatch: checkpoint {ck.vocab} vs dataset {ds.vocab}")
        ws = ds[args.split]
        if args.max_windows is not None:
            ws = ws.subset(np.arange(min(len(ws), args.max_windows)))
        x = stats.normalize(ds.stats.denormalize(ws.x))
        truth = ds.stats.denormalize(ws.y)
        ids = [f"{t}:{s}" for t, s in zip(ws.window_traj_ids, ws.start)]
        psi = ws.psi_onehot(model.config.n_intents) if model.config.labeled else None
    else:
        raise ConfigError("predict needs --track or --dataset")
    M = args.samples or cfg.uncertainty.samples
    batch = mc_forward(model, x, psi, M, cfg.train.seed, workers=args.workers, keep_alphas=True)
    res = combine_moments(batch).denormalized(stats)
    out = prepare_outdir(args, cfg)
    samples = stats.denormalize(batch.means) if args.with_samples else None
    history = stats.denormalize(x)
    fc = prediction_features(res.mean, res.cov, history, cfg.eval.levels, zone, ids, samples)
    write_geojson(out / "predictions.geojson", fc)
    write_predictions_csv(out / "predictions.csv", res.mean, res.cov, zone, ids, truth)
    write_attention_csv(out / "attention.csv", batch.alphas.mean(axis=1), ids)
    print(f"{len(ids)} window(s), {res.mean.shape[1]} steps, M={M}; wrote {out / 'predictions.geojson'}")
    return 0


# -- evaluate -----------------------------------------------------------------

COVERAGE_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


def evaluate_split(model, ds: Dataset, stats, split: str, M: int, seed: int, workers: int, psi_mode: str, cfg: RunConfig):
    ws = ds[split]
    x = stats.normalize(ds.stats.denormalize(ws.x))
    psi = None
    if model.config.labeled:
        psi = ws.psi_onehot(model.config.n_intents)
        if psi_mode == "zero":
            psi = np.zeros_like(psi)
    res = combine_moments(mc_forward(model, x, psi, M, seed, workers=workers)).denormalized(stats)
    truth = ds.stats.denormalize(ws.y)
    last = ds.stats.denormalize(ws.x[:, -1, :])
    origin, source = _origin(cfg, ds)
    report = evaluate_predictions(
        res.mean, res.cov, truth, last, origin, ds.meta.get("delta", cfg.data.delta), cfg.eval.bin_nmi * NMI, cfg.eval.levels
    )
    report.extra.update({"split": split, "samples": M, "seed": seed, "origin": list(origin), "origin_source": source, "intention": psi_mode})
    return report, res, truth


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.dataset)
    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    if model.config.labeled and ds.vocab != ck.vocab:
        raise ExtentError(f"intention vocabulary mismatch: checkpoint {ck.vocab} vs dataset {ds.vocab}")
    if len(ds[args.split]) == 0:
        raise DataError(f"split {args.split!r} has no windows")
    M = args.samples or cfg.uncertainty.samples
    out = prepare_outdir(args, cfg)
    modes = ["given", "zero"] if model.config.labeled else ["none"]
    for mode in modes:
        report, res, truth = evaluate_split(model, ds, ck.stats, args.split, M, cfg.train.seed, args.workers, mode, cfg)
        suffix = "" if mode in ("given", "none") else "_psi_zero"
        (out / f"report{suffix}.json").write_text(report.to_json())
        write_bins_csv(out / f"bins{suffix}.csv", [BinRow(**b) for b in report.bins])
        with open(out / f"coverage{suffix}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "coverage"])
            for lv in COVERAGE_GRID:
                w.writerow([lv, repr(coverage(res.mean, res.cov, truth, lv)[0])])
        label = {"given": "labeled", "zero": "labeled, intention zeroed", "none": "unlabeled"}[mode]
        apes = "  ".join(f"APE({k}) {v / 1000:.3f} km / {v / NMI:.3f} nmi" for k, v in report.ape_m.items())
        print(f"[{label}] windows {report.n_windows}  {apes}  ADE {report.ade_km:.3f} km / {report.ade_nmi:.3f} nmi")
        print(f"[{label}] coverage " + "  ".join(f"{k}: {v:.3f}" for k, v in report.coverage.items()))
    return 0


# -- gradcheck ----------------------------------------------------------------


def run_gradcheck(seed: int = 0, sabotage: list[str] | None = None, tol: float = 1e-4, rate: float = 0.2):
    """Finite-difference check of every parameter of a tiny labeled model against the sequence NLL."""
    cfg = ModelConfig(hidden=4, n_intents=3, rec_dropout=rate, intent_dropout=rate, seq_in=3, seq_out=3)
    model = TrajectoryModel.init(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    B = 2
    x = rng.normal(size=(B, 3, 2))
    y = rng.normal(size=(B, 3, 2))
    psi = one_hot(rng.integers(0, 3, size=B), 3)
    masks = model.sample_masks(B, np.random.default_rng(seed + 2), "train")
    params = model.parameters()
    unknown = set(sabotage or []) - set(params)
    if unknown:
        raise ConfigError(f"unknown parameter(s) to sabotage: {sorted(unknown)}; choose from {sorted(params)}")

    def f():
        mean, head = model.forward(x, psi, masks=masks).stacked()
        return nll_loss(mean, head, y)

    corrupt = [params[n] for n in sabotage or []]
    return ag.grad_check(f, list(params.values()), tol=tol, corrupt=corrupt)


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    reports = run_gradcheck(seed, args.sabotage, args.tol)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} tensors pass at tol {args.tol:g} ({time.perf_counter() - t0:.1f} s)")
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="seed for data splits, training and MC sampling")
    common.add_argument("--workers", type=int, default=1, help="upper bound on worker threads")
    common.add_argument("--outdir", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vesseltraj", description="Vessel trajectory prediction with uncertainty.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="AIS CSV -> windowed dataset")
    s.add_argument("csv")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", parents=[common], help="synthetic dataset")
    s.add_argument("--scenario", choices=["lines", "crossroad"], default="lines")
    s.add_argument("--n", type=int, default=200, help="number of trajectories")
    s.add_argument("--noise", type=float, default=0.0, help="position noise sigma in metres")
    s.add_argument("--accel", type=float, default=0.0, help="lines: max along-track acceleration, m/s^2")
    s.add_argument("--period", type=float, default=0.0, help="lines: shuttle period in samples (0 = off)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("dataset")
    s.add_argument("--loss", choices=["nll", "mae"])
    s.add_argument("--epochs", type=int, help="shorthand for --set train.max_epochs=N")
    s.add_argument("--resume", metavar="CHECKPOINT")
    s.add_argument("--unlabeled", action="store_true", help="ignore intention labels in the dataset")
    s.add_argument("--print-every", type=int, default=10)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="MC prediction with ellipses")
    s.add_argument("checkpoint")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--track", help="CSV with easting,northing or timestamp,lat,lon")
    g.add_argument("--dataset")
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--max-windows", type=int)
    s.add_argument("--samples", type=int, help="MC samples M")
    s.add_argument("--intent", help="intention class name for a labeled model")
    s.add_argument("--with-samples", action="store_true", help="also export every MC sample track")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="metrics on a dataset split")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--samples", type=int, help="MC samples M")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--sabotage", action="append", metavar="PARAM", help="negate the gradient of this parameter")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except VesselTrajError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
