"""PNG grids comparing softmax and sigmoid guided heatmaps."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .diffusion import GuidanceSpec  # noqa: E402
from .heatmap import make_heatmap, translate_batch  # noqa: E402
from .taxonomy import SUPER_CLASSES  # noqa: E402

COLUMNS = ("input", "translated (softmax)", "heatmap sigmoid", "heatmap softmax", "ground truth")


def heatmap_grid(samples, guides, denoiser, classifier, schedule, t_start: int, path,
                 smooth_radius: int = 1, seed: int = 0, title: str | None = None) -> Path:
    """One row per sample: input, softmax translation, both heatmaps, union mask.

    ``guides[i]`` is a GuidanceSpec whose mode is ignored; each row is
    rendered once per mode.
    """
    images = np.stack([s.image for s in samples])
    ids = [s.id for s in samples]
    out = {}
    for mode in ("sigmoid", "softmax"):
        rows = []
        for i, g in enumerate(guides):
            spec = GuidanceSpec(g.target, g.sign, mode, g.scale)
            rows.append(translate_batch(images[i:i + 1], ids[i:i + 1], spec, denoiser, classifier,
                                        schedule, t_start, seed)[0])
        out[mode] = rows
    fig, axes = plt.subplots(len(samples), len(COLUMNS), figsize=(2.1 * len(COLUMNS), 2.1 * len(samples)),
                             squeeze=False)
    for r, (s, g) in enumerate(zip(samples, guides)):
        panels = [
            s.image, out["softmax"][r],
            make_heatmap(s.image, out["sigmoid"][r], smooth_radius),
            make_heatmap(s.image, out["softmax"][r], smooth_radius),
            s.masks.any(0).astype(np.float32),
        ]
        for c, (ax, img) in enumerate(zip(axes[r], panels)):
            ax.imshow(img, cmap="gray" if c < 2 or c == 4 else "inferno", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(COLUMNS[c], fontsize=8)
        sign = "+" if g.sign > 0 else "-"
        axes[r][0].set_ylabel(f"{s.id}\n{sign}{SUPER_CLASSES[g.target]}", fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def ablation_bars(summary: dict, path) -> Path:
    tasks = [("r2x", "r->x mAP@5"), ("x2x", "x->x mAP@5"), ("classification", "AUC")]
    cells = list(summary)
    fig, axes = plt.subplots(1, len(tasks), figsize=(4 * len(tasks), 3.2))
    for ax, (task, label) in zip(axes, tasks):
        mean = [summary[c][f"{task}_wavg"]["mean"] for c in cells]
        lo = [m - summary[c][f"{task}_wavg"]["min"] for m, c in zip(mean, cells)]
        hi = [summary[c][f"{task}_wavg"]["max"] - m for m, c in zip(mean, cells)]
        ax.bar(range(len(cells)), mean, yerr=[lo, hi], color="#5b8db8", capsize=3)
        ax.set_xticks(range(len(cells)))
        ax.set_xticklabels(cells, rotation=30, ha="right", fontsize=7)
        ax.set_title(f"{label} (wAvg)", fontsize=9)
        ax.set_ylim(min(mean) - 0.1, 1.0)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
