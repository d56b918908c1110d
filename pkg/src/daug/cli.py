"""Staged pipeline: synth -> train-diffusion / train-classifier -> gen-heatmaps -> train-hybrid -> eval.

Every stage directory carries a ``stage.json`` recording the stage hash and
seed. A rerun with the same hash is a no-op; a different hash is refused
unless ``--force`` is given. ``ablate`` and ``figures`` hang off the heatmap
stage.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .classifier import load_classifier, save_classifier, train_classifier
from .config import ExperimentConfig, dump_config, load_config
from .diffusion import (GuidanceSpec, denoising_mse, load_denoiser, make_schedule, save_denoiser,
                        train_denoiser)
from .errors import ConflictError, DependencyError
from .experiments import (build_inputs, evaluate_encoder, false_positive_study, format_ablation, format_report,
                          localization_study, run_ablation, summarize_ablation, unified_ranking_check)
from .heatmap import generate_bank, load_bank
from .hybridclip import load_encoder, save_encoder, train_hybrid
from .synthdata import load_dataset, save_dataset, generate_dataset, stack_images, stack_labels
from .taxonomy import SUPER_CLASSES, to_superclass

log = logging.getLogger("daug")

STAGE_DIRS = {
    "synth": "data", "train-diffusion": "denoiser", "train-classifier": "classifier",
    "gen-heatmaps": "heatmaps", "train-hybrid": "hybrid", "eval": "eval", "ablate": "ablation",
    "figures": "figures",
}
UPSTREAM = {
    "synth": [], "train-diffusion": ["synth"], "train-classifier": ["synth"],
    "gen-heatmaps": ["synth", "train-diffusion", "train-classifier"],
    "train-hybrid": ["synth", "gen-heatmaps"],
    "eval": ["synth", "train-diffusion", "train-classifier", "gen-heatmaps", "train-hybrid"],
    "ablate": ["synth", "gen-heatmaps"],
    "figures": ["synth", "train-diffusion", "train-classifier"],
}


class Run:
    """Resolved config, output root and per-stage bookkeeping for one invocation."""

    def __init__(self, cfg: ExperimentConfig, root: Path, force: bool = False):
        self.cfg = cfg
        self.root = Path(root)
        self.force = force
        self.hashes = cfg.stage_hashes()
        self._started = {}

    def dir(self, stage: str) -> Path:
        return self.root / STAGE_DIRS[stage]

    def stage_record(self, stage: str) -> dict | None:
        f = self.dir(stage) / "stage.json"
        return json.loads(f.read_text()) if f.exists() else None

    def require(self, stage: str):
        for up in UPSTREAM[stage]:
            if up == "gen-heatmaps" and stage == "train-hybrid" and not self.cfg.hybrid_uses_heatmaps:
                continue
            rec = self.stage_record(up)
            if rec is None:
                raise DependencyError(up, up)
            if rec["hash"] != self.hashes[up]:
                raise ConflictError(
                    f"stage '{up}' in {self.dir(up)} was built from a different config "
                    f"(hash {rec['hash']}, expected {self.hashes[up]}); rerun `daug {up} --force`")

    def begin(self, stage: str) -> bool:
        """True when the stage must run; False when it is already up to date."""
        self.require(stage)
        self._started[stage] = time.time()
        rec = self.stage_record(stage)
        if rec is None:
            return True
        if rec["hash"] == self.hashes[stage] and not self.force:
            return False
        if rec["hash"] != self.hashes[stage] and not self.force:
            raise ConflictError(
                f"{self.dir(stage)} holds stage '{stage}' with config hash {rec['hash']}, "
                f"current config hashes to {self.hashes[stage]}; pass --force to overwrite")
        shutil.rmtree(self.dir(stage))
        return True

    def finish(self, stage: str, extra=None):
        rec = {"stage": stage, "hash": self.hashes[stage], "config_hash": self.cfg.hash(),
               "seed": self.cfg.seed, "version": __version__,
               "upstream": {u: self.hashes[u] for u in UPSTREAM[stage]},
               "elapsed_s": round(time.time() - self._started.get(stage, time.time()), 3)}
        rec.update(extra or {})
        d = self.dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        _write_json(d / "stage.json", rec)

    def summary(self, command: str, status: str, started: float, outputs=None, extra=None):
        s = {"command": command, "status": status, "stage_hash": self.hashes.get(command),
             "config_hash": self.cfg.hash(), "seed": self.cfg.seed, "output_root": str(self.root),
             "elapsed_s": round(time.time() - started, 3), "outputs": outputs or {}}
        s.update(extra or {})
        _write_json(self.root / "summaries" / f"{command}.json", s)
        return s

    # loaders shared by downstream stages
    def dataset(self):
        return load_dataset(self.dir("synth"))[1]

    def models(self):
        den, schedule, _ = load_denoiser(self.dir("train-diffusion"))
        clf, _ = load_classifier(self.dir("train-classifier"))
        return den, clf, schedule


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, (np.integer, np.floating, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------- commands

def cmd_synth(run: Run) -> dict:
    if not run.begin("synth"):
        return {"skipped": True}
    tr, va, te = generate_dataset(run.cfg.dataset)
    save_dataset(run.dir("synth"), run.cfg.dataset, {"train": tr, "val": va, "test": te})
    counts = {k: len(v) for k, v in (("train", tr), ("val", va), ("test", te))}
    run.finish("synth", {"counts": counts})
    return {"skipped": False, "counts": counts}


def cmd_train_diffusion(run: Run) -> dict:
    if not run.begin("train-diffusion"):
        return {"skipped": True}
    splits = run.dataset()
    sc = run.cfg.schedule
    schedule = make_schedule(sc.T, sc.beta_start, sc.beta_end)
    model, curve = train_denoiser(stack_images(splits["train"]), schedule, run.cfg.denoiser)
    val_mse = denoising_mse(model, stack_images(splits["val"]), schedule) if splits["val"] else None
    save_denoiser(run.dir("train-diffusion"), model, schedule, run.cfg.denoiser, curve, {"val_mse": val_mse})
    run.finish("train-diffusion", {"loss_curve": curve, "val_mse": val_mse})
    return {"skipped": False, "final_loss": curve[-1] if curve else None, "val_mse": val_mse}


def cmd_train_classifier(run: Run) -> dict:
    if not run.begin("train-classifier"):
        return {"skipped": True}
    splits = run.dataset()
    sc = run.cfg.schedule
    schedule = make_schedule(sc.T, sc.beta_start, sc.beta_end)
    tr, va = splits["train"], splits["val"]
    val = (stack_images(va), to_superclass(stack_labels(va))) if va else None
    model, curve, report = train_classifier(stack_images(tr), to_superclass(stack_labels(tr)), schedule,
                                            run.cfg.classifier, val)
    save_classifier(run.dir("train-classifier"), model, run.cfg.classifier, curve, report)
    run.finish("train-classifier", {"loss_curve": curve, "ap": report})
    return {"skipped": False, "ap": report}


def cmd_gen_heatmaps(run: Run) -> dict:
    stage = "gen-heatmaps"
    fresh = run.begin(stage)  # stale or forced banks are wiped here; matching ones are reused
    splits = run.dataset()
    den, clf, schedule = run.models()
    hc = run.cfg.heatmaps
    samples = splits["train"] + splits["val"] + splits["test"]
    bank = generate_bank(samples, hc.guide_specs(), den, clf, schedule, run.dir(stage), hc.t_start,
                         hc.smooth_radius, run.cfg.seed, hc.batch_size)
    if fresh or bank.computed:
        run.finish(stage, {"guides": [g.key for g in hc.guide_specs()], "n_samples": len(samples)})
    return {"skipped": not fresh and bank.computed == 0, "computed": bank.computed,
            "cache_hits": bank.cache_hits}


def _encoder_inputs(run: Run, splits):
    if not run.cfg.hybrid_uses_heatmaps:
        return None, None
    guide = run.cfg.heatmaps.default_guide
    return load_bank(run.dir("gen-heatmaps"), guide), guide.key


def cmd_train_hybrid(run: Run) -> dict:
    if not run.begin("train-hybrid"):
        return {"skipped": True}
    splits = run.dataset()
    bank, key = _encoder_inputs(run, splits)
    train = splits["train"]
    model, curve = train_hybrid(build_inputs(train, bank, key), [s.report for s in train],
                                stack_labels(train), run.cfg.hybrid)
    prov = {"dataset_hash": run.hashes["synth"],
            "heatmap_bank": run.hashes["gen-heatmaps"] if bank is not None else None,
            "heatmap_guide": key}
    save_encoder(run.dir("train-hybrid"), model, run.cfg.hybrid, curve, prov)
    run.finish("train-hybrid", {"loss_curve": curve})
    return {"skipped": False, "final_loss": curve[-1] if curve else None}


def cmd_eval(run: Run) -> dict:
    if not run.begin("eval"):
        return {"skipped": True}
    splits = run.dataset()
    bank, key = _encoder_inputs(run, splits)
    model, _ = load_encoder(run.dir("train-hybrid"))
    test = splits["test"]
    x_test = build_inputs(test, bank, key)
    md = {"seed": run.cfg.seed, "config_hash": run.cfg.hash()}
    reports = evaluate_encoder(model, test, x_test, run.cfg.eval.k, md)
    out = run.dir("eval")
    out.mkdir(parents=True, exist_ok=True)
    for task, rep in reports.items():
        _write_json(out / f"{task}.json", rep.to_dict())
    (out / "reports.txt").write_text("\n\n".join(format_report(r) for r in reports.values()) + "\n")
    unified = unified_ranking_check(model, x_test)
    _write_json(out / "unified.json", unified)

    guide = run.cfg.heatmaps.default_guide
    heat_bank = load_bank(run.dir("gen-heatmaps"), guide)
    heatmaps = {s.id: heat_bank.get(s.id, guide) for s in test}
    loc = localization_study(test, heatmaps)
    loc["guide"] = guide.key
    _write_json(out / "localization.json", loc)

    den, clf, schedule = run.models()
    ec = run.cfg.eval
    fp = false_positive_study(den, clf, schedule, ec.fp_disease, ec.fp_confuser, ec.fp_samples, ec.fp_scale,
                              run.cfg.heatmaps.t_start, run.cfg.heatmaps.smooth_radius, run.cfg.seed,
                              run.cfg.dataset.image_size)
    _write_json(out / "false_positive.json", fp)
    run.finish("eval")
    return {"skipped": False, "classification_wavg": reports["classification"].wavg,
            "r2x_wavg": reports["r2x"].wavg, "x2x_wavg": reports["x2x"].wavg,
            "unified_identical": unified["identical"], "pointing_accuracy": loc["pointing_accuracy"],
            "null_accuracy": loc["null_accuracy"], "fp_mean_difference": fp["mean_difference"],
            "fp_ci95": fp["ci95"]}


def cmd_ablate(run: Run) -> dict:
    stage = "ablate"
    if not run.begin(stage):
        return {"skipped": True}
    splits = run.dataset()
    guide = run.cfg.heatmaps.default_guide
    bank = load_bank(run.dir("gen-heatmaps"), guide)
    out = run.dir(stage)
    rows_dir = out / "rows"
    rows_dir.mkdir(parents=True, exist_ok=True)

    def keep(row, model):
        _write_json(rows_dir / f"{row['augmentation']}-{row['criterion']}-seed{row['seed']}.json", row)

    rows = run_ablation(splits, bank, guide.key, tuple(run.cfg.eval.ablation_seeds),
                        hybrid_cfg=run.cfg.hybrid, k=run.cfg.eval.k, clip_w=run.cfg.eval.clip_w, on_result=keep)
    summary = summarize_ablation(rows)
    _write_json(out / "summary.json", summary)
    table = format_ablation(summary)
    (out / "table.txt").write_text(table + "\n")
    run.finish(stage, {"n_runs": len(rows)})
    print(table)
    return {"skipped": False, "n_runs": len(rows), "summary": summary}


def cmd_figures(run: Run) -> dict:
    from .figures import ablation_bars, heatmap_grid

    stage = "figures"
    if not run.begin(stage):
        return {"skipped": True}
    splits = run.dataset()
    den, clf, schedule = run.models()
    hc, ec = run.cfg.heatmaps, run.cfg.eval
    out = run.dir(stage)
    diseased = [s for s in splits["test"] if s.labels14[0] == 0 and s.masks.any()][:ec.figure_samples]
    files = []
    # remove each sample's first super-class finding
    guides = [GuidanceSpec(int(np.flatnonzero(s.labels7[1:])[0]) + 1 if s.labels7[1:].any() else 0,
                           -1 if s.labels7[1:].any() else 1, "softmax", hc.default_guide.scale)
              for s in diseased]
    files.append(heatmap_grid(diseased, guides, den, clf, schedule, hc.t_start, out / "remove_finding.png",
                              hc.smooth_radius, run.cfg.seed, "-class guidance on diseased test samples"))
    nf = [GuidanceSpec(0, 1, "softmax", hc.default_guide.scale)] * len(diseased)
    files.append(heatmap_grid(diseased, nf, den, clf, schedule, hc.t_start, out / "no_finding.png",
                              hc.smooth_radius, run.cfg.seed, "+No Finding guidance"))
    from .synthdata import single_disease_samples
    target = SUPER_CLASSES.index("Pleural")
    probe = single_disease_samples(ec.fp_disease, ec.figure_samples, run.cfg.dataset.image_size, run.cfg.seed)
    files.append(heatmap_grid(probe, [GuidanceSpec(target, 1, "softmax", ec.fp_scale)] * len(probe), den, clf,
                              schedule, hc.t_start, out / "amplify_pleural.png", hc.smooth_radius, run.cfg.seed,
                              f"+{SUPER_CLASSES[target]} on {ec.fp_disease}-only samples"))
    summary_file = run.dir("ablate") / "summary.json"
    if summary_file.exists():
        files.append(ablation_bars(json.loads(summary_file.read_text()), out / "ablation.png"))
    run.finish(stage, {"files": [str(f.name) for f in files]})
    return {"skipped": False, "files": [str(f) for f in files]}


def cmd_all(run: Run) -> dict:
    results = {}
    for name in ("synth", "train-diffusion", "train-classifier", "gen-heatmaps", "train-hybrid", "eval",
                 "ablate", "figures"):
        started = time.time()
        results[name] = COMMANDS[name](run)
        run.summary(name, "ok", started, results[name])
    return {"stages": {k: v.get("skipped") for k, v in results.items()}}


COMMANDS = {
    "synth": cmd_synth, "train-diffusion": cmd_train_diffusion, "train-classifier": cmd_train_classifier,
    "gen-heatmaps": cmd_gen_heatmaps, "train-hybrid": cmd_train_hybrid, "eval": cmd_eval,
    "ablate": cmd_ablate, "figures": cmd_figures, "all": cmd_all,
}


HELP = {
    "synth": "render the synthetic dataset",
    "train-diffusion": "train the denoising U-Net",
    "train-classifier": "train the noise-aware super-class classifier",
    "gen-heatmaps": "translate every sample and cache its heatmaps",
    "train-hybrid": "train the dual encoder with the configured loss weight",
    "eval": "classification, retrieval, unified-ranking and heatmap studies",
    "ablate": "augmentation x criterion grid over the configured seeds",
    "figures": "heatmap comparison grids and the ablation chart",
    "all": "every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="daug", description="Diffusion heatmap augmentation pipeline on synthetic CXRs")
    p.add_argument("--version", action="version", version=f"daug {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="reseed every stage")
    common.add_argument("--out", help="output root (else $DAUG_OUTPUT_ROOT, else config output_root)")
    common.add_argument("--force", action="store_true", help="overwrite a stage built from another config")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    show = sub.add_parser("show-config", parents=[common], help="print the resolved config")
    show.set_defaults(show=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)  # bit-identical reruns need a fixed reduction order
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.command == "show-config":
        sys.stdout.write(dump_config(cfg))
        return 0
    run = Run(cfg, cfg.resolved_root(args.out), args.force)
    started = time.time()
    try:
        result = COMMANDS[args.command](run)
    except (DependencyError, ConflictError) as e:
        run.summary(args.command, "error", started, extra={"error": str(e), "error_type": type(e).__name__})
        print(f"error: {e}", file=sys.stderr)
        return 2
    summary = run.summary(args.command, "ok", started, result)
    print(json.dumps({k: summary[k] for k in ("command", "status", "elapsed_s")} | {"result": _brief(result)},
                     default=_default))
    return 0


def _brief(result: dict) -> dict:
    return {k: v for k, v in result.items() if k != "summary"}


if __name__ == "__main__":
    raise SystemExit(main())
