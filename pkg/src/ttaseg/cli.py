"""Command-line pipeline: gen-data, train-seg, train-dae, adapt, evaluate, report.

Every command is idempotent given an unchanged config + seed: completed stages
record a content hash over the config sections they depend on and are skipped
on rerun. Exit codes: 0 success, 2 config error, 3 dependency error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import report as report_mod
from .config import ExperimentConfig, load_config, section_hash
from .errors import ConfigError, DependencyError, NumericalAbort
from .grids import LabelMap, ProbMap, read_volume, restore_to_original, write_volume
from .metrics import evaluate_pair
from .networks import (
    build_denoiser,
    build_normalizer,
    build_segmenter,
    load_checkpoint,
    predict_volume,
    save_checkpoint,
)
from .seeds import derive_seed
from .subjects import load_split, load_subject
from .synth import build_dataset, load_manifest, manifest_subjects
from .training import train_dae, train_segcnn
from .tta import TTAConfig, adapt, adapt_fast, build_atlas, dae_postprocess

log = logging.getLogger("ttaseg")

_TRAIN_SEG_SECTIONS = ["dataset", "prep", "augment", "networks", "train_seg"]
_TRAIN_DAE_SECTIONS = ["dataset", "prep", "dae_augment", "networks", "train_dae", "noise"]
_ADAPT_SECTIONS = sorted(set(_TRAIN_SEG_SECTIONS + _TRAIN_DAE_SECTIONS + ["tta", "runs"]))


# ---------------------------------------------------------------------------
# Stage bookkeeping
# ---------------------------------------------------------------------------

def _stage_path(out: Path, stage: str) -> Path:
    return out / "stages" / f"{stage}.json"


def _stage_done(out: Path, stage: str, content_hash: str) -> bool:
    p = _stage_path(out, stage)
    if not p.exists():
        return False
    try:
        stamp = json.loads(p.read_text())
    except json.JSONDecodeError:
        return False
    return stamp.get("config_hash") == content_hash and stamp.get("completed")


def _mark_stage(out: Path, stage: str, content_hash: str) -> None:
    p = _stage_path(out, stage)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps({"config_hash": content_hash, "completed": True}, sort_keys=True) + "\n")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {hint}: {path} (run the upstream stage first)")
    return path


def _write_history_csv(path: Path, history, score_name: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "train_loss", score_name])
        for step, loss, score in history:
            w.writerow([step, repr(loss), repr(score)])


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, raw: dict, out: Path, args) -> None:
    h = section_hash(raw, ["dataset"])
    if _stage_done(out, "gen-data", h):
        log.info("gen-data up to date, skipping")
        return
    log.info("generating dataset under %s", out / "data")
    build_dataset(
        cfg.dataset.anatomy,
        cfg.dataset.domains,
        cfg.dataset.counts,
        out / "data",
        root_seed=derive_seed(cfg.seed, "dataset"),
        overwrite=True,
    )
    _mark_stage(out, "gen-data", h)


def _manifest(out: Path) -> dict:
    _require(out / "data" / "dataset_manifest.json", "dataset manifest")
    return load_manifest(out / "data")


def cmd_train_seg(cfg: ExperimentConfig, raw: dict, out: Path, args) -> None:
    h = section_hash(raw, _TRAIN_SEG_SECTIONS)
    if _stage_done(out, "train-seg", h):
        log.info("train-seg up to date, skipping")
        return
    manifest = _manifest(out)
    sd = cfg.dataset.source_domain
    train = load_split(out / "data", manifest, sd, "train", cfg.prep)
    val = load_split(out / "data", manifest, sd, "val", cfg.prep)
    tcfg = dataclasses.replace(cfg.train_seg, seed=derive_seed(cfg.seed, "train_seg"))
    log.info("training segmenter on %d SD subjects (%d iterations)",
             len(train), tcfg.total_iterations)
    result = train_segcnn(
        [(s.image, s.label) for s in train],
        [(s.image, s.label) for s in val],
        cfg.networks, tcfg, cfg.augment,
    )
    ckpt = out / "models" / "segcnn"
    save_checkpoint(ckpt, {"normalizer": result.normalizer, "segmenter": result.segmenter},
                    result.best_step, result.best_score, extra={"kind": "segcnn"})
    _write_history_csv(ckpt / "train_log.csv", result.history, "val_dice")
    log.info("best validation Dice %.4f at step %d", result.best_score, result.best_step)
    _mark_stage(out, "train-seg", h)


def cmd_train_dae(cfg: ExperimentConfig, raw: dict, out: Path, args) -> None:
    h = section_hash(raw, _TRAIN_DAE_SECTIONS)
    if _stage_done(out, "train-dae", h):
        log.info("train-dae up to date, skipping")
        return
    manifest = _manifest(out)
    sd = cfg.dataset.source_domain
    train = load_split(out / "data", manifest, sd, "train", cfg.prep)
    val = load_split(out / "data", manifest, sd, "val", cfg.prep)
    tcfg = dataclasses.replace(cfg.train_dae, seed=derive_seed(cfg.seed, "train_dae"))
    log.info("training denoiser on %d SD label volumes (%d iterations)",
             len(train), tcfg.total_iterations)
    result = train_dae(
        [s.label for s in train], [s.label for s in val],
        cfg.networks, tcfg, cfg.noise, cfg.dae_augment,
    )
    ckpt = out / "models" / "dae"
    save_checkpoint(ckpt, {"denoiser": result.denoiser}, result.best_step,
                    result.best_score, extra={"kind": "dae"})
    _write_history_csv(ckpt / "train_log.csv", result.history, "val_denoise_dice")

    atlas = build_atlas([
        LabelMap(s.label, cfg.prep.target_spacing_mm, cfg.networks.num_labels) for s in train
    ])
    write_volume(out / "models" / "atlas", atlas)
    log.info("best denoising Dice %.4f at step %d", result.best_score, result.best_step)
    _mark_stage(out, "train-dae", h)


def _load_models(cfg: ExperimentConfig, out: Path):
    normalizer = build_normalizer(cfg.networks)
    segmenter = build_segmenter(cfg.networks)
    denoiser = build_denoiser(cfg.networks)
    load_checkpoint(_require(out / "models" / "segcnn", "segmenter checkpoint"),
                    {"normalizer": normalizer, "segmenter": segmenter})
    load_checkpoint(_require(out / "models" / "dae", "denoiser checkpoint"),
                    {"denoiser": denoiser})
    for m in (normalizer, segmenter, denoiser):
        m.eval()
    atlas_path = out / "models" / "atlas.volhdr.json"
    atlas = read_volume(atlas_path) if atlas_path.exists() else None
    return normalizer, segmenter, denoiser, atlas


def _run_tta_cfg(cfg: ExperimentConfig, run) -> TTAConfig:
    mode = run.mode if not run.mode.startswith("postproc:") else "none"
    return dataclasses.replace(
        cfg.tta, mode=mode,
        warm_start="first-subject" if run.fast else "none",
    )


def _save_prediction(pred_dir: Path, subject_id: str, result) -> None:
    write_volume(pred_dir / subject_id, result.prediction)
    result.trace.write_csv(pred_dir / f"{subject_id}.trace.csv")
    torch.save(result.normalizer.state_dict(), pred_dir / f"{subject_id}.phi.pt")
    meta = {
        "subject": subject_id,
        "best_iteration": result.trace.best_iteration,
        "initial_d_dae": result.trace.initial_d_dae,
        "best_d_dae": result.trace.best_d_dae,
    }
    (pred_dir / f"{subject_id}.adapt.json").write_text(
        json.dumps(meta, sort_keys=True) + "\n"
    )


def cmd_adapt(cfg: ExperimentConfig, raw: dict, out: Path, args) -> None:
    mode_filter = getattr(args, "mode", None)
    runs = [r for r in cfg.runs if mode_filter is None or r.mode == mode_filter]
    if not runs:
        raise ConfigError(f"no configured run has mode {mode_filter!r}")
    manifest = _manifest(out)
    normalizer, segmenter, denoiser, atlas = _load_models(cfg, out)
    phi_init = normalizer.state_dict()
    workers = max(1, getattr(args, "workers", 1) or 1)

    for run in runs:
        stage = f"adapt-{run.method}"
        h = section_hash(raw, _ADAPT_SECTIONS) + f":{run.method}"
        if _stage_done(out, stage, h):
            log.info("%s up to date, skipping", stage)
            continue
        tta_cfg = _run_tta_cfg(cfg, run)
        if tta_cfg.mode == "dae+atlas" and atlas is None:
            raise ConfigError(f"run {run.method!r} needs the atlas; rerun train-dae")
        for domain in run.domains:
            subjects = load_split(out / "data", manifest, domain, "test", cfg.prep)
            if not subjects:
                raise DependencyError(f"no test subjects for domain {domain!r} in the manifest")
            pred_dir = out / "predictions" / run.method / domain
            pred_dir.mkdir(parents=True, exist_ok=True)
            log.info("%s: adapting %d subjects of %s (mode %s)",
                     run.method, len(subjects), domain, run.mode)

            if run.mode.startswith("postproc:"):
                passes = int(run.mode.split(":", 1)[1])
                for s in subjects:
                    probs = predict_volume(normalizer, segmenter, s.image, tta_cfg.batch_size)
                    canonical = dae_postprocess(
                        ProbMap(probs, cfg.prep.target_spacing_mm), denoiser, passes
                    )
                    write_volume(pred_dir / s.subject_id,
                                 restore_to_original(canonical, s.record))
            elif run.fast:
                results = adapt_fast(
                    [(s.image, s.record, s.label) for s in subjects],
                    segmenter, phi_init, denoiser, atlas, tta_cfg,
                )
                for s, res in zip(subjects, results):
                    _save_prediction(pred_dir, s.subject_id, res)
            else:
                def one(s):
                    return adapt(s.image, s.record, segmenter, phi_init, denoiser,
                                 atlas, tta_cfg, gt=s.label)

                if workers > 1:
                    with ThreadPoolExecutor(max_workers=workers) as ex:
                        results = list(ex.map(one, subjects))
                else:
                    results = [one(s) for s in subjects]
                for s, res in zip(subjects, results):
                    _save_prediction(pred_dir, s.subject_id, res)
        _mark_stage(out, stage, h)


def cmd_evaluate(cfg: ExperimentConfig, raw: dict, out: Path, args) -> None:
    h = section_hash(raw, _ADAPT_SECTIONS + ["eval"])
    if _stage_done(out, "evaluate", h):
        log.info("evaluate up to date, skipping")
        return
    manifest = _manifest(out)
    workers = max(1, getattr(args, "workers", 1) or 1)

    tasks = []
    for run in cfg.runs:
        for domain in run.domains:
            for entry in manifest_subjects(manifest, domain=domain, split="test"):
                pred_path = out / "predictions" / run.method / domain / entry["id"]
                _require(Path(str(pred_path) + ".volhdr.json"), "prediction")
                tasks.append((run.method, domain, entry))

    def one(task):
        method, domain, entry = task
        pred = read_volume(out / "predictions" / method / domain / entry["id"])
        truth = read_volume(out / "data" / entry["label"])
        return evaluate_pair(pred, truth, entry["id"], domain, method)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(one, tasks))
    else:
        records = [one(t) for t in tasks]

    metrics_dir = out / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    report_mod.write_metrics_csv(metrics_dir / "metrics.csv", records)
    log.info("wrote %d metric rows", sum(len(r.dice_per_label) for r in records))
    _mark_stage(out, "evaluate", h)


def cmd_report(cfg: ExperimentConfig, raw: dict, out: Path, args) -> None:
    h = section_hash(raw, _ADAPT_SECTIONS + ["eval"]) + (":plots" if args.plots else "")
    if _stage_done(out, "report", h):
        log.info("report up to date, skipping")
        return
    rows = report_mod.read_metrics_csv(out / "metrics" / "metrics.csv")
    agg = report_mod.aggregate(rows)
    sig = report_mod.significance(
        rows, cfg.eval.comparisons, cfg.eval.n_permutations,
        seed=derive_seed(cfg.seed, "permtest"),
    )
    report_dir = out / "report"
    report_mod.write_results(report_dir, agg, sig)
    report_mod.collect_convergence(out / "predictions", report_dir)
    if args.plots:
        report_mod.make_plots(report_dir, agg)
    log.info("report written to %s", report_dir)
    print((report_dir / "results.txt").read_text())
    _mark_stage(out, "report", h)


# ---------------------------------------------------------------------------
# Argument parsing / dispatch
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-seg": cmd_train_seg,
    "train-dae": cmd_train_dae,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttaseg",
        description="Test-time adaptable segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config overlaid on the selected profile")
        p.add_argument("--profile", default="desk",
                       help="bundled base profile (desk, desk_ablations, micro, paper)")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--out", type=Path, required=True, help="experiment directory")
        p.add_argument("--workers", type=int, default=1,
                       help="per-subject parallelism in adapt / evaluate")
        if name == "adapt":
            p.add_argument("--mode", default=None,
                           help="restrict to configured runs with this mode "
                                "(dae, dae+atlas, adapt-all, oracle, none, postproc:k)")
        if name == "report":
            p.add_argument("--plots", action="store_true", help="also render static images")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg, raw = load_config(args.profile, args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](cfg, raw, out, args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return 2
    except DependencyError as e:
        log.error("dependency error: %s", e)
        return 3
    except NumericalAbort as e:
        log.error("numerical abort: %s", e)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
