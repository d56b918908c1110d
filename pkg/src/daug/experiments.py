"""Evaluation harness: encoder metrics, the augmentation x criterion ablation, and heatmap studies."""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
import torch
from scipy.stats import rankdata

from .diffusion import GuidanceSpec
from .errors import DependencyError
from .heatmap import HeatmapBank, augment_channels, make_heatmap, translate_batch
from .hybridclip import (ClassPromptSet, HybridConfig, build_linear_head, embed_images, embed_texts,
                         retrieve, retrieve_many, train_hybrid)
from .metrics import MetricReport, classification_report, dilate, heatmap_localization, map_at_k
from .synthdata import canonical_region, single_disease_samples, stack_labels
from .taxonomy import FINE_CLASSES, SUPER_CLASSES, TAXONOMY

log = logging.getLogger(__name__)

# rows of the ablation table, in display order
CELLS = (("none", "clip"), ("none", "hybrid"), ("daug", "clip"), ("daug", "hybrid"))
CELL_NAMES = {("none", "clip"): "Baseline (CLIP)", ("none", "hybrid"): "Hybrid",
              ("daug", "clip"): "DAug+CLIP", ("daug", "hybrid"): "DAug+Hybrid"}


def build_inputs(samples, bank: HeatmapBank | None = None, guide_key: str | None = None) -> np.ndarray:
    """(N, 3, H, W) encoder inputs; channel 3 is the heatmap or zeros."""
    out = []
    for s in samples:
        heat = np.zeros_like(s.image) if bank is None else bank.get(s.id, guide_key)
        out.append(augment_channels(s.image, heat))
    return np.stack(out).astype(np.float32)


def evaluate_encoder(model, test_samples, test_inputs, k: int = 5, metadata=None) -> dict[str, MetricReport]:
    """Classification AUC, r->x and x->x mAP@k, all on the held-out split.

    r->x ranks every test image for every test report (the paired image is a
    legitimate hit). x->x is leave-one-out: the query image is removed from
    its own gallery.
    """
    md = dict(metadata or {})
    y = stack_labels(test_samples)
    head = build_linear_head(model, _fresh_prompts(model))
    probs = head(torch.as_tensor(test_inputs)).numpy()
    reports = {"classification": classification_report(probs, y, FINE_CLASSES, "classification", md)}

    gal = embed_images(model, test_inputs)
    q_txt = embed_texts(model, [s.report for s in test_samples])
    reports["r2x"] = map_at_k(retrieve_many(q_txt, gal, k), y, y, k, FINE_CLASSES, "r2x", md)
    reports["x2x"] = map_at_k(retrieve_many(gal, gal, k, exclude_self=True), y, y, k, FINE_CLASSES, "x2x", md)
    return reports


def _fresh_prompts(model) -> ClassPromptSet:
    prompts = ClassPromptSet()
    prompts.refresh(model)
    return prompts


def unified_ranking_check(model, inputs) -> dict:
    """Compare per-image class rankings from the linear head and from prompt retrieval.

    Both sides are turned into tie-aware rank vectors; the check passes only
    when they agree exactly for every image.
    """
    prompts = _fresh_prompts(model)
    probs = build_linear_head(model, prompts)(torch.as_tensor(inputs)).numpy()
    img = embed_images(model, inputs)
    cls = prompts.embeddings(model).numpy()
    n_classes = len(cls)
    mismatched = []
    for i in range(len(inputs)):
        order = retrieve(img[i], cls, n_classes)
        sims = cls.astype(np.float64) @ img[i].astype(np.float64)
        head_rank = rankdata(-probs[i], method="min")
        retr_rank = rankdata(-sims, method="min")
        # retrieval order must also agree with the head once its ties are broken by class index
        head_order = np.lexsort((np.arange(n_classes), -probs[i]))
        if not (np.array_equal(head_rank, retr_rank) and list(head_order) == order):
            mismatched.append(i)
    return {"n_images": len(inputs), "n_mismatched": len(mismatched), "mismatched": mismatched[:20],
            "identical": not mismatched}


def run_ablation(splits: dict, bank: HeatmapBank | None, guide_key: str | None, seeds=(0, 1, 2),
                 cells=CELLS, hybrid_cfg: HybridConfig = HybridConfig(), k: int = 5,
                 clip_w: float = 1.0, on_result=None) -> list[dict]:
    """Train and evaluate one encoder per (cell, seed).

    Each cell is ``(augmentation, criterion)`` with augmentation in
    {none, daug} and criterion in {clip, hybrid}; ``clip`` means ``w = clip_w``.
    ``on_result`` is called with every finished row (used for checkpointing).
    """
    if any(aug == "daug" for aug, _ in cells) and bank is None:
        raise DependencyError("gen-heatmaps", "gen-heatmaps")
    train, test = splits["train"], splits["test"]
    inputs = {}
    for aug in sorted({a for a, _ in cells}):
        b = bank if aug == "daug" else None
        inputs[aug] = (build_inputs(train, b, guide_key), build_inputs(test, b, guide_key))
    rows = []
    for aug, crit in cells:
        for seed in seeds:
            w = clip_w if crit == "clip" else hybrid_cfg.w
            cfg = replace(hybrid_cfg, w=w, seed=int(seed))
            x_train, x_test = inputs[aug]
            model, curve = train_hybrid(x_train, [s.report for s in train], stack_labels(train), cfg)
            md = {"augmentation": aug, "criterion": crit, "seed": int(seed), "w": w}
            reports = evaluate_encoder(model, test, x_test, k, md)
            row = {"augmentation": aug, "criterion": crit, "seed": int(seed), "w": w, "loss_curve": curve,
                   "reports": {t: r.to_dict() for t, r in reports.items()}}
            log.info("ablation %s seed %d: auc %.4f r2x %.4f x2x %.4f", CELL_NAMES[(aug, crit)], seed,
                     reports["classification"].wavg, reports["r2x"].wavg, reports["x2x"].wavg)
            rows.append(row)
            if on_result is not None:
                on_result(row, model)
    return rows


def summarize_ablation(rows) -> dict:
    """Mean, min and max of every task's wAvg and Avg per cell across seeds."""
    out = {}
    for aug, crit in CELLS:
        mine = [r for r in rows if (r["augmentation"], r["criterion"]) == (aug, crit)]
        if not mine:
            continue
        cell = {"seeds": [r["seed"] for r in mine]}
        for task in mine[0]["reports"]:
            for stat in ("wavg", "avg"):
                vals = np.array([r["reports"][task][stat] for r in mine], dtype=np.float64)
                cell[f"{task}_{stat}"] = {"mean": float(vals.mean()), "min": float(vals.min()),
                                          "max": float(vals.max())}
        out[CELL_NAMES[(aug, crit)]] = cell
    return out


def format_ablation(summary: dict) -> str:
    tasks = [("r2x", "r->x mAP@5"), ("x2x", "x->x mAP@5"), ("classification", "AUC")]
    head = f"{'Method':<16}" + "".join(f"{name + ' wAvg':>22}" for _, name in tasks)
    lines = [head, "-" * len(head)]
    for cell, stats in summary.items():
        parts = []
        for task, _ in tasks:
            s = stats[f"{task}_wavg"]
            parts.append(f"{s['mean']:.3f} [{s['min']:.3f},{s['max']:.3f}]".rjust(22))
        lines.append(f"{cell:<16}" + "".join(parts))
    return "\n".join(lines)


def format_report(report: MetricReport) -> str:
    names = report.metadata.get("classes", FINE_CLASSES)
    lines = [f"{report.task}"]
    for name, v, n in zip(names, report.per_class, report.counts):
        lines.append(f"  {name:<28}{'absent' if v is None else f'{v:.4f}':>8}  n={n}")
    lines.append(f"  {'Avg':<28}{report.avg:>8.4f}")
    lines.append(f"  {'wAvg':<28}{report.wavg:>8.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- heatmap studies

def union_mask(sample) -> np.ndarray:
    return sample.masks.any(0)


def localization_study(samples, heatmaps: dict) -> dict:
    """Pointing game and best IoU of each diseased sample's heatmap against its union mask.

    ``heatmaps`` maps sample id to heatmap. The null baseline is the mean
    dilated-mask area fraction, which is what a uniformly random argmax scores.
    """
    hits, ious, null = [], [], []
    per_super = {k: [] for k in range(1, len(SUPER_CLASSES))}
    for s in samples:
        mask = union_mask(s)
        if not mask.any():
            continue
        r = heatmap_localization(heatmaps[s.id], mask)
        hits.append(r["pointing_hit"])
        ious.append(r["best_iou"])
        null.append(float(dilate(mask).mean()))
        for k in per_super:
            if s.labels7[k]:
                per_super[k].append(r["pointing_hit"])
    acc = float(np.mean(hits)) if hits else float("nan")
    base = float(np.mean(null)) if null else float("nan")
    return {
        "n": len(hits), "pointing_accuracy": acc, "null_accuracy": base,
        "ratio_to_null": acc / base if null else float("nan"),
        "mean_best_iou": float(np.mean(ious)) if ious else float("nan"),
        "per_super_class": {SUPER_CLASSES[k]: {"n": len(v), "accuracy": float(np.mean(v)) if v else None}
                            for k, v in per_super.items()},
    }


def off_target_fraction(heatmap: np.ndarray, region: np.ndarray) -> float:
    total = float(heatmap.sum())
    return float((heatmap * region).sum()) / total if total > 0 else 0.0


def bootstrap_ci(diffs, n_boot: int = 10_000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    d = np.asarray(diffs, dtype=np.float64)
    means = d[rng.integers(0, len(d), size=(n_boot, len(d)))].mean(1)
    lo, hi = np.percentile(means, [50 * (1 - level), 50 * (1 + level)])
    return float(lo), float(hi)


def false_positive_study(denoiser, classifier, schedule, disease: str = "Pleural Effusion",
                         confuser: int = 3, n: int = 60, scale: float = 3.0, t_start: int | None = None,
                         smooth_radius: int = 1, seed: int = 0, image_size: int = 32) -> dict:
    """Amplify one disease on samples that carry only it, under both guidance modes.

    Off-target mass is the heatmap fraction inside the confuser's canonical
    region, excluding the dilated own-disease mask. A positive mean of
    (sigmoid - softmax) means softmax guidance leaks less into the confuser.
    """
    t_start = schedule.T // 2 if t_start is None else t_start
    target = TAXONOMY.super_of(disease)
    samples = single_disease_samples(disease, n, image_size, seed)
    images = np.stack([s.image for s in samples])
    region = canonical_region(confuser, image_size)
    fractions = {}
    for mode in ("sigmoid", "softmax"):
        guide = GuidanceSpec(target, 1, mode, scale)
        out = translate_batch(images, [s.id for s in samples], guide, denoiser, classifier, schedule,
                              t_start, seed)
        fractions[mode] = [off_target_fraction(make_heatmap(s.image, o, smooth_radius),
                                               region & ~dilate(union_mask(s)))
                           for s, o in zip(samples, out)]
    diffs = np.array(fractions["sigmoid"]) - np.array(fractions["softmax"])
    lo, hi = bootstrap_ci(diffs, seed=seed)
    return {
        "disease": disease, "target_super_class": target, "confuser_super_class": confuser,
        "n": n, "scale": scale, "t_start": t_start,
        "mean_sigmoid": float(np.mean(fractions["sigmoid"])),
        "mean_softmax": float(np.mean(fractions["softmax"])),
        "mean_difference": float(diffs.mean()), "ci95": [lo, hi],
        "per_sample": {m: [float(v) for v in f] for m, f in fractions.items()},
    }
