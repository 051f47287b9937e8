"""Command-line entry point orchestrating the full experiment lifecycle.

Commands: gen, train-lidar, train-fusion, eval, matrix, robust, analyze.
Every command takes --config/--seed/--out/--workers/--paper-mode, derives
all randomness from the single config seed through named streams, and
writes byte-stable outputs (no timestamps). UNCFUSE_LOG controls stderr
verbosity (0 warnings, 1 info, 2 debug).
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click

from .config import ConfigError, RunConfig, load_config, paper_scale
from .detector import (FusionContext, FusionModel, ProposalModel,
                       TrainingDivergence, infer, train_fusion,
                       train_proposal_network)
from .evaluation import (evaluate, robustness_sweep, run_experiment_matrix,
                         write_json_summary, write_report_csv, write_rows_csv)
from .synthworld import (frame_from_dict, frame_to_dict, generate_scene,
                         read_dataset, write_dataset)
from .uncstats import (analyze, collect_records, write_analysis_summary,
                       write_fit_csv, write_histogram_csv)

log = logging.getLogger("uncfuse")

EXIT_BAD_INPUT = 2
EXIT_DIVERGED = 3

MODE_ALIASES = {"learned": "learned_sampling", "baseline": "baseline",
                "no_sampling": "no_sampling", "learned_sampling": "learned_sampling"}


def _setup_logging():
    level_name = os.environ.get("UNCFUSE_LOG", "0").strip().lower()
    level = {"0": logging.WARNING, "warn": logging.WARNING,
             "1": logging.INFO, "info": logging.INFO,
             "2": logging.DEBUG, "debug": logging.DEBUG}.get(level_name,
                                                             logging.WARNING)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def common_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="Config file (structured key-nested text)."),
        click.option("--seed", type=int, default=None,
                     help="Override the config seed."),
        click.option("--out", "out_dir", type=click.Path(), default="runs",
                     help="Output directory."),
        click.option("--workers", type=int, default=1, show_default=True,
                     help="Parallel workers for frame generation and seeds."),
        click.option("--paper-mode", is_flag=True,
                     help="Scale constants to the full-size protocol."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def build_config(config_path, seed, paper_mode) -> RunConfig:
    try:
        cfg = load_config(config_path) if config_path else RunConfig()
    except FileNotFoundError:
        raise click.UsageError(f"config file not found: {config_path}")
    except ConfigError as e:
        raise click.UsageError(f"bad config file {config_path}: {e}")
    if paper_mode:
        cfg = paper_scale(cfg)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    cfg.validate()
    return cfg


def _prepare_out(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_frames(path, what: str):
    if not Path(path).exists():
        raise click.UsageError(f"{what} dataset not found: {path}")
    return read_dataset(path)


def _load_proposal(path) -> ProposalModel:
    if not Path(path).exists():
        raise click.UsageError(f"proposal checkpoint not found: {path}")
    return ProposalModel.load(path)


def _load_fusion(path) -> FusionModel:
    if not Path(path).exists():
        raise click.UsageError(f"fusion checkpoint not found: {path}")
    return FusionModel.load(path)


def _write_loss_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss_cls", "loss_reg", "lr"])
        for step, lc, lr_, lr in rows:
            w.writerow([step, repr(float(lc)), repr(float(lr_)), repr(float(lr))])


def _gen_one(args):
    cfg_world, seed, split, i = args
    frame = generate_scene(cfg_world, seed, frame_id=f"{split}-{i:06d}",
                           stream=f"world/{split}/{i}")
    return frame_to_dict(frame)


def _generate_split(cfg: RunConfig, split: str, n: int, workers: int):
    tasks = [(cfg.world, cfg.seed, split, i) for i in range(n)]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            dicts = list(pool.map(_gen_one, tasks, chunksize=16))
    else:
        dicts = [_gen_one(t) for t in tasks]
    return [frame_from_dict(d) for d in dicts]


@click.group()
def main():
    """Probabilistic LiDAR-camera fusion experiments on synthetic scenes."""
    _setup_logging()


@main.command("gen")
@common_options
@click.option("--n-train", type=int, default=None, help="Override train frame count.")
@click.option("--n-test", type=int, default=None, help="Override test frame count.")
def cmd_gen(config_path, seed, out_dir, workers, paper_mode, n_train, n_test):
    """Generate train/test datasets plus a manifest."""
    cfg = build_config(config_path, seed, paper_mode)
    out = _prepare_out(out_dir)
    n_train = cfg.n_train if n_train is None else n_train
    n_test = cfg.n_test if n_test is None else n_test
    if n_train < 0 or n_test < 0:
        raise click.UsageError("frame counts must be non-negative")
    log.info("generating %d train / %d test frames", n_train, n_test)
    train = _generate_split(cfg, "train", n_train, workers)
    test = _generate_split(cfg, "test", n_test, workers)
    write_dataset(train, out / "train.jsonl")
    write_dataset(test, out / "test.jsonl")
    manifest = {"command": "gen", "config_hash": cfg.content_hash(),
                "seed": cfg.seed, "n_train": n_train, "n_test": n_test,
                "paper_mode": bool(paper_mode), "format": "jsonl-v1"}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    click.echo(f"wrote {out / 'train.jsonl'} ({n_train} frames), "
               f"{out / 'test.jsonl'} ({n_test} frames)")


@main.command("train-lidar")
@common_options
@click.option("--data", "data_path", type=click.Path(), required=True,
              help="Training dataset (jsonl).")
@click.option("--deterministic", is_flag=True,
              help="Train the plain (non-probabilistic) head.")
def cmd_train_lidar(config_path, seed, out_dir, workers, paper_mode,
                    data_path, deterministic):
    """Train the stage-one proposal network; write checkpoint + loss log."""
    cfg = build_config(config_path, seed, paper_mode)
    out = _prepare_out(out_dir)
    frames = _load_frames(data_path, "train")
    rows = []
    try:
        model = train_proposal_network(frames, cfg, cfg.seed,
                                       probabilistic=not deterministic,
                                       log_rows=rows)
    except TrainingDivergence as e:
        _write_loss_log(rows, out / "loss_lidar.csv")
        click.echo(f"training diverged at step {e.step}: loss {e.value}", err=True)
        sys.exit(EXIT_DIVERGED)
    model.save(out / "proposal.json",
               extra_meta={"probabilistic": not deterministic})
    _write_loss_log(rows, out / "loss_lidar.csv")
    click.echo(f"wrote {out / 'proposal.json'} and {out / 'loss_lidar.csv'}")


def parse_fusion_mode(mode: str):
    """'baseline' | 'no_sampling' | 'learned' | 'fixed:<sigma>' -> (mode, sigma)."""
    mode = mode.strip()
    if mode.startswith("fixed:"):
        try:
            sigma = float(mode.split(":", 1)[1])
        except ValueError:
            raise click.UsageError(f"bad fixed-sigma mode {mode!r}")
        if sigma <= 0:
            raise click.UsageError("fixed-sigma value must be positive")
        return "fixed_sigma", sigma
    if mode == "fixed_sigma":
        return "fixed_sigma", None
    if mode in MODE_ALIASES:
        return MODE_ALIASES[mode], None
    raise click.UsageError(
        f"unknown fusion mode {mode!r}; expected baseline, no_sampling, "
        f"learned, or fixed:<sigma>")


@main.command("train-fusion")
@common_options
@click.option("--data", "data_path", type=click.Path(), required=True,
              help="Training dataset (jsonl).")
@click.option("--proposal", "proposal_path", type=click.Path(), required=True,
              help="Stage-one checkpoint.")
@click.option("--mode", default="learned", show_default=True,
              help="baseline | no_sampling | learned | fixed:<sigma>.")
def cmd_train_fusion(config_path, seed, out_dir, workers, paper_mode,
                     data_path, proposal_path, mode):
    """Train the fusion head on top of a frozen proposal network."""
    cfg = build_config(config_path, seed, paper_mode)
    out = _prepare_out(out_dir)
    frames = _load_frames(data_path, "train")
    model = _load_proposal(proposal_path)
    mode_name, sigma = parse_fusion_mode(mode)
    context = FusionContext(frames, model, cfg)
    rows = []
    try:
        fusion = train_fusion(context, mode_name, cfg.seed, log_rows=rows,
                              fixed_sigma=sigma)
    except TrainingDivergence as e:
        _write_loss_log(rows, out / "loss_fusion.csv")
        click.echo(f"training diverged at step {e.step}: loss {e.value}", err=True)
        sys.exit(EXIT_DIVERGED)
    fusion.save(out / "fusion.json", extra_meta={"cli_mode": mode})
    _write_loss_log(rows, out / "loss_fusion.csv")
    click.echo(f"wrote {out / 'fusion.json'} and {out / 'loss_fusion.csv'}")


def detections_from_jsonl(path):
    from .detector import Detection
    from .geometry import Box3D
    dets = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            dets.append(Detection(frame_id=d["frame_id"],
                                  box=Box3D.from_dict(d["box"]),
                                  score=float(d["score"]),
                                  proposal_id=int(d.get("proposal_id", 0))))
    return dets


@main.command("eval")
@common_options
@click.option("--data", "data_path", type=click.Path(), required=True,
              help="Test dataset (jsonl).")
@click.option("--proposal", "proposal_path", type=click.Path(), default=None)
@click.option("--fusion", "fusion_path", type=click.Path(), default=None)
@click.option("--detections", "detections_path", type=click.Path(), default=None,
              help="Evaluate precomputed detections (jsonl) instead of a model.")
def cmd_eval(config_path, seed, out_dir, workers, paper_mode, data_path,
             proposal_path, fusion_path, detections_path):
    """Evaluate a trained detector (or precomputed detections)."""
    cfg = build_config(config_path, seed, paper_mode)
    out = _prepare_out(out_dir)
    frames = _load_frames(data_path, "test")
    if detections_path is not None:
        dets = detections_from_jsonl(detections_path)
    else:
        if proposal_path is None or fusion_path is None:
            raise click.UsageError("eval needs --proposal and --fusion "
                                   "(or --detections)")
        model = _load_proposal(proposal_path)
        fusion = _load_fusion(fusion_path)
        dets = []
        for f in frames:
            dets.extend(infer(f, model, fusion, cfg))
    report = evaluate(frames, dets, cfg.evaluation)
    write_report_csv(report, out / "report.csv")
    summary = {"macro_ap": {m: report.macro_ap(m) for m in cfg.evaluation.metrics},
               "cells": [{"metric": c.metric, "bin_lo": c.bin_lo,
                          "bin_hi": c.bin_hi, "iou_thresh": c.iou_thresh,
                          "ap": c.ap, "tp": c.tp, "fp": c.fp, "fn": c.fn,
                          "n_gt": c.n_gt} for c in report.cells]}
    write_json_summary(summary, out / "report.json")
    click.echo(f"wrote {out / 'report.csv'} and {out / 'report.json'}")


MATRIX_FIELDS = ["variant", "seed", "status", "metric", "bin_lo", "bin_hi",
                 "iou_thresh", "ap", "tp", "fp", "fn", "n_gt", "error"]


def _matrix_one_seed(args):
    train, test, cfg, seed, ablation = args
    res = run_experiment_matrix(train, test, cfg, [seed], ablation=ablation,
                                log=log.info)
    return res.rows


@main.command("matrix")
@common_options
@click.option("--train-data", type=click.Path(), required=True)
@click.option("--test-data", type=click.Path(), required=True)
@click.option("--seeds", default=None,
              help="Comma-separated seed list (default: config seed).")
@click.option("--ablation", is_flag=True,
              help="Include fixed-sigma and all-dims ablation variants.")
def cmd_matrix(config_path, seed, out_dir, workers, paper_mode, train_data,
               test_data, seeds, ablation):
    """Train and evaluate the experiment matrix over a seed set."""
    cfg = build_config(config_path, seed, paper_mode)
    out = _prepare_out(out_dir)
    train = _load_frames(train_data, "train")
    test = _load_frames(test_data, "test")
    seed_list = ([int(s) for s in seeds.split(",")] if seeds else [cfg.seed])
    tasks = [(train, test, cfg, s, ablation) for s in seed_list]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_matrix_one_seed, tasks))
    else:
        per_seed = [_matrix_one_seed(t) for t in tasks]
    rows = [r for chunk in per_seed for r in chunk]
    write_rows_csv(rows, MATRIX_FIELDS, out / "matrix.csv")
    by_variant = {}
    for r in rows:
        if r.get("status") != "ok" or r.get("metric") is None:
            continue
        key = (r["variant"], r["metric"])
        if r["ap"] is not None:
            by_variant.setdefault(key, []).append(r["ap"])
    summary = {"mean_ap": {f"{v}/{m}": sum(a) / len(a)
                           for (v, m), a in sorted(by_variant.items())},
               "seeds": seed_list, "ablation": bool(ablation)}
    write_json_summary(summary, out / "matrix.json")
    click.echo(f"wrote {out / 'matrix.csv'} and {out / 'matrix.json'}")


@main.command("robust")
@common_options
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--model", "model_specs", multiple=True, required=True,
              help="label=proposal.json:fusion.json (repeatable).")
def cmd_robust(config_path, seed, out_dir, workers, paper_mode, data_path,
               model_specs):
    """Sweep sensor-misalignment sigma and record AP for each model."""
    cfg = build_config(config_path, seed, paper_mode)
    out = _prepare_out(out_dir)
    frames = _load_frames(data_path, "test")
    models = {}
    for spec_str in model_specs:
        if "=" not in spec_str or ":" not in spec_str.split("=", 1)[1]:
            raise click.UsageError(
                f"bad --model {spec_str!r}; expected label=proposal:fusion")
        label, paths = spec_str.split("=", 1)
        prop_path, fusion_path = paths.split(":", 1)
        models[label] = (_load_proposal(prop_path), _load_fusion(fusion_path))
    curve, detail = robustness_sweep(frames, models, cfg,
                                     cfg.robustness.sigmas, cfg.seed,
                                     log=log.info)
    write_rows_csv(curve, ["model", "sigma", "ap"], out / "robust_curve.csv")
    write_rows_csv(detail, ["model", "sigma", "metric", "bin_lo", "bin_hi",
                            "ap", "tp", "fp", "fn", "n_gt"],
                   out / "robust_detail.csv")
    click.echo(f"wrote {out / 'robust_curve.csv'} and {out / 'robust_detail.csv'}")


@main.command("analyze")
@common_options
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--proposal", "proposal_path", type=click.Path(), required=True)
def cmd_analyze(config_path, seed, out_dir, workers, paper_mode, data_path,
                proposal_path):
    """Collect proposal uncertainties and fit the difficulty models."""
    cfg = build_config(config_path, seed, paper_mode)
    out = _prepare_out(out_dir)
    frames = _load_frames(data_path, "test")
    model = _load_proposal(proposal_path)
    records = collect_records(frames, model,
                              score_floor=cfg.evaluation.score_floor)
    if not records:
        click.echo("no matched records above the score floor", err=True)
        sys.exit(EXIT_BAD_INPUT)
    bundle = analyze(records, cfg.analysis)
    for resp, fit in bundle.fits.items():
        write_fit_csv(fit, out / f"fit_{resp}.csv")
    for fname, hist in bundle.histograms.items():
        write_histogram_csv(hist, out / f"hist_{fname}.csv")
    write_analysis_summary(bundle, out / "analysis.json")
    click.echo(f"wrote fit/histogram CSVs and {out / 'analysis.json'}")


if __name__ == "__main__":
    main()
