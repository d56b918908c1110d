"""One test per acceptance criterion, each at its stated tolerance.

Criteria 6 to 10 read the artifacts of a full desk-scale run
(``configs/desk.yaml``). The run is cached under ``.cache/acceptance`` (or
``$DAUG_ACCEPTANCE_ROOT``) and only recomputed when its config changes; the
first run takes about half an hour on one CPU core.
"""
import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from daug.classifier import NoisyClassifier, guidance_grad, log_prob
from daug.cli import main
from daug.diffusion import GuidanceSpec, OracleDenoiser, forward_sample, make_schedule, to_model_domain, translate
from daug.hybridclip import hybrid_loss
from daug.metrics import auc_roc, map_at_k
from daug.synthdata import DatasetSpec, generate_split
from daug.taxonomy import SUPER_CLASSES, TAXONOMY

REPO = Path(__file__).resolve().parents[1]
DESK = REPO / "configs" / "desk.yaml"
TINY = REPO / "configs" / "tiny.yaml"


@pytest.fixture(scope="session")
def desk():
    root = Path(os.environ.get("DAUG_ACCEPTANCE_ROOT", REPO / ".cache" / "acceptance"))
    assert main(["all", "--config", str(DESK), "--out", str(root)]) == 0
    return root


def _json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- 1. metric oracles

def _auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def _map_loops(ranked, qlab, glab, k):
    out = []
    for c in range(qlab.shape[1]):
        aps = []
        for q in range(len(qlab)):
            if qlab[q, c]:
                hits, acc = 0, 0.0
                for i in range(k):
                    if glab[ranked[q][i], c]:
                        hits += 1
                        acc += hits / (i + 1)
                aps.append(acc / hits if hits else 0.0)
        out.append(sum(aps) / len(aps) if aps else None)
    return out


def test_criterion_01_metric_oracles(record_property):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(4, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 1)
        worst = max(worst, abs(auc_roc(scores, labels) - _auc_pairs(scores, labels)))
    for _ in range(50):
        nq, ng, nc = int(rng.integers(2, 8)), int(rng.integers(5, 15)), int(rng.integers(1, 6))
        qlab, glab = rng.integers(0, 2, (nq, nc)), rng.integers(0, 2, (ng, nc))
        ranked = [list(rng.permutation(ng)) for _ in range(nq)]
        for a, b in zip(map_at_k(ranked, qlab, glab, 5).per_class, _map_loops(ranked, qlab, glab, 5)):
            assert (a is None) == (b is None)
            if a is not None:
                worst = max(worst, abs(a - b))
    elapsed = time.time() - t0
    record_property("detail", f"max |delta| {worst:.1e}, {elapsed:.1f}s")
    assert worst <= 1e-9 and elapsed < 10


# ---------------------------------------------------------------- 2. schedule and forward process

def test_criterion_02_schedule_and_forward(record_property):
    t0 = time.time()
    s = make_schedule(200, 1e-4, 0.02)
    prod, err = 1.0, 0.0
    for t in range(200):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t / 199)
        err = max(err, abs(s.alpha_bar[t] - prod))
    n = 10_000
    g = torch.Generator().manual_seed(0)
    zs = []
    for t, x0 in ((25, -0.5), (100, 0.3), (200, 0.9)):
        x = torch.full((n,), x0, dtype=torch.float64)
        for k in range(t):
            x = (1 - s.beta[k]) ** 0.5 * x + s.beta[k] ** 0.5 * torch.randn(n, generator=g, dtype=torch.float64)
        closed = forward_sample(torch.full((n, 1), x0, dtype=torch.float64), t,
                                torch.randn(n, 1, generator=g, dtype=torch.float64), s)[:, 0]
        for a in (x, closed):
            ab = s.alpha_bar[t - 1]
            zs.append(abs(a.mean().item() - ab ** 0.5 * x0) / ((1 - ab) / n) ** 0.5)
            zs.append(abs(a.var().item() - (1 - ab)) / ((1 - ab) * (2 / (n - 1)) ** 0.5))
    elapsed = time.time() - t0
    record_property("detail", f"alpha_bar err {err:.1e}, worst z {max(zs):.2f}, {elapsed:.1f}s")
    assert err <= 1e-12 and max(zs) < 3 and elapsed < 60


# ---------------------------------------------------------------- 3. gradients

def _rel_fd(f, x, grad, idx, h):
    xp, xm = x.clone(), x.clone()
    xp.view(-1)[idx] += h
    xm.view(-1)[idx] -= h
    fd = (f(xp) - f(xm)) / (2 * h)
    g = grad.view(-1)[idx].item()
    return abs(fd - g) / max(abs(fd), abs(g), 1e-12)


def test_criterion_03_gradients(record_property):
    t0 = time.time()
    torch.manual_seed(0)
    model = NoisyClassifier(7, 8).double().eval()
    gen = torch.Generator().manual_seed(3)
    worst = {"sigmoid": 0.0, "softmax": 0.0, "hybrid": 0.0}
    for mode in ("sigmoid", "softmax"):
        for point in range(10):
            x = torch.randn(1, 1, 16, 16, generator=gen, dtype=torch.float64)
            t = int(torch.randint(1, 200, (1,), generator=gen))
            grad = guidance_grad(model, x, t, point % 7, mode)

            def f(z):
                with torch.no_grad():
                    return log_prob(model(z, t), point % 7, mode).sum().item()

            idx = int(grad.abs().view(-1).argmax())
            worst[mode] = max(worst[mode], _rel_fd(f, x, grad, idx, 1e-3))
    for point in range(10):
        raw = torch.randn(6 + 6 + 14, 8, generator=gen, dtype=torch.float64).requires_grad_(True)
        y = torch.randint(0, 2, (6, 14), generator=gen).numpy()
        w = float(torch.rand(1, generator=gen))

        def loss(r):
            e = F.normalize(r, dim=-1)
            return hybrid_loss(e[:6], e[6:12], e[12:], y, 0.1, w)

        (grad,) = torch.autograd.grad(loss(raw), raw)
        idx = int(torch.randint(0, raw.numel(), (1,), generator=gen))
        worst["hybrid"] = max(worst["hybrid"], _rel_fd(lambda r: loss(r).item(), raw.detach(), grad, idx, 1e-6))
    elapsed = time.time() - t0
    record_property("detail", ", ".join(f"{k} rel {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert max(worst.values()) < 1e-3 and elapsed < 120


# ---------------------------------------------------------------- 4. softmax invariance

class _Shifted(nn.Module):
    def __init__(self, inner, c):
        super().__init__()
        self.inner, self.c = inner, c

    def forward(self, x, t):
        return self.inner(x, t) + self.c


def test_criterion_04_softmax_shift_invariance(record_property):
    torch.manual_seed(1)
    model = NoisyClassifier(7, 8).double().eval()
    x = torch.randn(4, 1, 16, 16, dtype=torch.float64)
    rel = {}
    for mode in ("softmax", "sigmoid"):
        base = guidance_grad(model, x, 50, 2, mode)
        shifted = guidance_grad(_Shifted(model, 3.0), x, 50, 2, mode)
        rel[mode] = ((shifted - base).norm() / base.norm()).item()
    record_property("detail", f"softmax rel change {rel['softmax']:.1e}, sigmoid {rel['sigmoid']:.2f}")
    assert rel["softmax"] <= 1e-6 and rel["sigmoid"] > 1e-2


# ---------------------------------------------------------------- 5. oracle round trip

class _AnyClassifier(nn.Module):
    def forward(self, x, t):
        return x.flatten(1)[:, :7]


def test_criterion_05_oracle_round_trip(record_property):
    s = make_schedule(200)
    imgs = np.stack([smp.image for smp in generate_split(DatasetSpec(image_size=32, seed=5), "test", 4)])
    x0 = to_model_domain(torch.as_tensor(imgs)).unsqueeze(1)
    out = translate(imgs, GuidanceSpec(1, 1, "softmax", 0.0), 100, OracleDenoiser(x0, s), _AnyClassifier(), s,
                    torch.Generator().manual_seed(0))
    mae = float(np.abs(out - imgs).mean())
    record_property("detail", f"MAE {mae:.1e}")
    assert mae < 1e-2


# ---------------------------------------------------------------- 6 to 10. desk-scale pipeline

@pytest.mark.slow
def test_criterion_06_heatmap_localization(desk, record_property):
    loc = _json(desk / "eval" / "localization.json")
    runtime = sum(_json(desk / d / "stage.json")["elapsed_s"] for d in ("denoiser", "classifier", "heatmaps"))
    record_property("detail", f"n={loc['n']} pointing {loc['pointing_accuracy']:.3f}, "
                              f"null {loc['null_accuracy']:.3f} ({loc['ratio_to_null']:.1f}x), "
                              f"train+bank {runtime / 60:.1f} min")
    assert loc["n"] >= 100
    assert loc["pointing_accuracy"] >= 0.7
    assert loc["pointing_accuracy"] >= 3 * loc["null_accuracy"]
    assert runtime <= 30 * 60


@pytest.mark.slow
def test_criterion_07_false_positive_reduction(desk, record_property):
    fp = _json(desk / "eval" / "false_positive.json")
    lo, hi = fp["ci95"]
    record_property("detail", f"n={fp['n']} sigmoid {fp['mean_sigmoid']:.3f} vs softmax {fp['mean_softmax']:.3f}, "
                              f"diff {fp['mean_difference']:.3f} CI [{lo:.3f}, {hi:.3f}]")
    # the correlated pair: amplified Pleural versus the Airspace Density region
    assert TAXONOMY.super_of(fp["disease"]) == SUPER_CLASSES.index("Pleural") == fp["target_super_class"]
    assert fp["confuser_super_class"] == SUPER_CLASSES.index("Airspace Density")
    assert fp["n"] >= 50
    assert fp["mean_difference"] > 0 and lo > 0


def _ablation(desk, metric):
    summary = _json(desk / "ablation" / "summary.json")
    assert all(len(cell["seeds"]) == 3 for cell in summary.values())
    return {name: summary[name][metric]["mean"] for name in ("Baseline (CLIP)", "DAug+CLIP", "DAug+Hybrid")}


@pytest.mark.slow
def test_criterion_08_ablation_classification(desk, record_property):
    m = _ablation(desk, "classification_wavg")
    record_property("detail", ", ".join(f"{k} {v:.4f}" for k, v in m.items()))
    assert m["DAug+Hybrid"] >= m["DAug+CLIP"] >= m["Baseline (CLIP)"]
    assert m["DAug+Hybrid"] - m["Baseline (CLIP)"] >= 0.02


@pytest.mark.slow
def test_criterion_09_ablation_retrieval(desk, record_property):
    m = _ablation(desk, "r2x_wavg")
    record_property("detail", ", ".join(f"{k} {v:.4f}" for k, v in m.items()))
    assert m["DAug+Hybrid"] >= m["DAug+CLIP"] >= m["Baseline (CLIP)"]


@pytest.mark.slow
def test_criterion_10_unified_ranking(desk, record_property):
    u = _json(desk / "eval" / "unified.json")
    n_test = _json(desk / "data" / "stage.json")["counts"]["test"]
    record_property("detail", f"{u['n_images']} images, {u['n_mismatched']} mismatched")
    assert u["identical"] and u["n_mismatched"] == 0 and u["n_images"] == n_test


# ---------------------------------------------------------------- 11. determinism

def _fingerprint(root: Path) -> dict:
    fp = {}
    for stage in ("denoiser", "classifier", "hybrid"):
        fp[f"{stage}/loss_curve"] = _json(root / stage / "stage.json")["loss_curve"]
    for f in sorted((root / "eval").glob("*.json")) + sorted((root / "ablation" / "rows").glob("*.json")):
        if f.name != "stage.json":
            fp[str(f.relative_to(root))] = f.read_text()
    fp["eval/reports.txt"] = (root / "eval" / "reports.txt").read_text()
    for f in sorted((root / "heatmaps").rglob("*.png")):
        fp[str(f.relative_to(root))] = f.read_bytes()
    for name in ("weights.pt",):
        for d in ("denoiser", "classifier", "hybrid"):
            p = root / d / name
            if p.exists():
                fp[f"{d}/{name}"] = p.read_bytes()
    return fp


def test_criterion_11_determinism(tmp_path, record_property):
    runs = []
    for i in range(2):
        root = tmp_path / f"run{i}"
        assert main(["all", "--config", str(TINY), "--out", str(root)]) == 0
        runs.append(_fingerprint(root))
    a, b = runs
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    record_property("detail", f"{len(a)} artifacts compared, {len(differing)} differ")
    assert not differing, differing[:5]
    assert len(a["hybrid/loss_curve"]) > 0 and len([k for k in a if k.endswith(".png")]) > 0
