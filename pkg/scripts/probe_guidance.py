"""Compare guidance protocols for heatmap localization on a finished run.

    python scripts/probe_guidance.py runs/desk --n 100 --scales 3 10

For every diseased test sample it scores two protocols against ground truth:
"+NF" pushes toward No Finding and is scored against the union of all disease
masks; "-k" pushes away from each present super-class k and is scored against
that class's own masks.
"""
import argparse
import json

import numpy as np
import torch

from daug.classifier import load_classifier
from daug.diffusion import GuidanceSpec, load_denoiser
from daug.experiments import localization_study
from daug.heatmap import make_heatmap, translate_batch
from daug.metrics import dilate, heatmap_localization
from daug.synthdata import load_dataset
from daug.taxonomy import TAXONOMY


def main():
    p = argparse.ArgumentParser()
    p.add_argument("root")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--scales", type=float, nargs="+", default=[3.0])
    p.add_argument("--modes", nargs="+", default=["softmax", "sigmoid"])
    p.add_argument("--t-start", type=int, default=100)
    args = p.parse_args()
    torch.set_num_threads(1)

    den, schedule, _ = load_denoiser(f"{args.root}/denoiser")
    clf, _ = load_classifier(f"{args.root}/classifier")
    test = load_dataset(f"{args.root}/data")[1]["test"]
    diseased = [s for s in test if s.masks.any()][:args.n]
    images = np.stack([s.image for s in diseased])
    ids = [s.id for s in diseased]

    results = []
    for mode in args.modes:
        for scale in args.scales:
            out = translate_batch(images, ids, GuidanceSpec(0, 1, mode, scale), den, clf, schedule, args.t_start, 0)
            loc = localization_study(diseased, {s.id: make_heatmap(s.image, o) for s, o in zip(diseased, out)})
            results.append({"protocol": "+NF", "mode": mode, "scale": scale, "accuracy": loc["pointing_accuracy"],
                            "null": loc["null_accuracy"]})

            hits, null = [], []
            for k in range(1, 7):
                group = [s for s in diseased if s.labels7[k]]
                masks = [np.any([s.masks[f] for f in TAXONOMY.members(k)], axis=0) for s in group]
                keep = [i for i, m in enumerate(masks) if m.any()]
                if not keep:
                    continue
                group, masks = [group[i] for i in keep], [masks[i] for i in keep]
                out = translate_batch(np.stack([s.image for s in group]), [s.id for s in group],
                                      GuidanceSpec(k, -1, mode, scale), den, clf, schedule, args.t_start, 0)
                for s, o, m in zip(group, out, masks):
                    hits.append(heatmap_localization(make_heatmap(s.image, o), m)["pointing_hit"])
                    null.append(float(dilate(m).mean()))
            results.append({"protocol": "-k", "mode": mode, "scale": scale, "accuracy": float(np.mean(hits)),
                            "null": float(np.mean(null))})
            for r in results[-2:]:
                print(json.dumps(r))


if __name__ == "__main__":
    main()
