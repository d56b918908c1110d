"""Noise-aware multi-label classifier over the seven super-classes.

Trained with per-class sigmoid + BCE (images may carry several findings) but
used at guidance time in either sigmoid or softmax mode. Softmax guidance
pushes the target logit up *relative to the others*, which keeps correlated
findings from being painted in alongside the target.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, forward_sample, state_hash, timestep_embedding, to_model_domain
from .errors import GuidanceError, TrainingError
from .metrics import average_precision


class NoisyClassifier(nn.Module):
    """Small conv encoder with a time embedding; emits one logit per super-class."""

    def __init__(self, n_classes: int = 7, width: int = 16):
        super().__init__()
        self.n_classes = n_classes
        self.width = width
        w = width
        tdim = 4 * w
        self.time_mlp = nn.Sequential(nn.Linear(w, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv1 = nn.Conv2d(1, w, 3, padding=1)
        self.conv2 = nn.Conv2d(w, 2 * w, 3, padding=1, stride=2)
        self.conv3 = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.conv4 = nn.Conv2d(2 * w, 4 * w, 3, padding=1, stride=2)
        self.t1 = nn.Linear(tdim, w)
        self.t3 = nn.Linear(tdim, 2 * w)
        self.norm1 = nn.GroupNorm(4, w)
        self.norm3 = nn.GroupNorm(4, 2 * w)
        self.head = nn.Linear(4 * w, n_classes)

    def forward(self, x, t):
        t = torch.as_tensor(t, dtype=torch.long).expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.width).to(x.dtype))
        h = F.silu(self.norm1(self.conv1(x)) + self.t1(temb)[:, :, None, None])
        h = F.silu(self.conv2(h))
        h = F.silu(self.norm3(self.conv3(h)) + self.t3(temb)[:, :, None, None])
        h = F.silu(self.conv4(h))
        return self.head(h.mean(dim=(2, 3)))


def class_probs(model, x_t: torch.Tensor, t, mode: str) -> torch.Tensor:
    """Sigmoid per logit, or softmax across all logits."""
    with torch.no_grad():
        z = model(x_t, t)
    if mode == "sigmoid":
        return torch.sigmoid(z)
    if mode == "softmax":
        return torch.softmax(z, dim=-1)
    raise ValueError(f"mode must be sigmoid or softmax, got {mode!r}")


def log_prob(z: torch.Tensor, target: int, mode: str) -> torch.Tensor:
    if mode == "sigmoid":
        return F.logsigmoid(z[:, target])
    if mode == "softmax":
        return F.log_softmax(z, dim=-1)[:, target]
    raise ValueError(f"mode must be sigmoid or softmax, got {mode!r}")


def guidance_grad(model, x_t: torch.Tensor, t, target: int, mode: str) -> torch.Tensor:
    """grad_x log p_mode(target | x_t, t), one gradient per batch element.

    In softmax mode this equals dz_target/dx - sum_j p_j dz_j/dx.
    """
    with torch.enable_grad():
        x = x_t.detach().requires_grad_(True)
        z = model(x, t)
        if not 0 <= target < z.shape[-1]:
            raise ValueError(f"target {target} outside [0, {z.shape[-1]})")
        (g,) = torch.autograd.grad(log_prob(z, target, mode).sum(), x)
    if not torch.isfinite(g).all():
        raise GuidanceError(f"non-finite {mode} guidance gradient")
    return g


# ---------------------------------------------------------------- training

@dataclass
class ClassifierConfig:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 2e-3
    width: int = 16
    weight_decay: float = 1e-4
    max_pos_weight: float = 8.0
    seed: int = 0


def positive_weights(labels: np.ndarray, cap: float) -> torch.Tensor:
    pos = labels.sum(0).astype(np.float64)
    neg = len(labels) - pos
    w = np.where(pos > 0, neg / np.maximum(pos, 1.0), 1.0)
    return torch.as_tensor(np.clip(w, 1.0, cap), dtype=torch.float32)


@torch.no_grad()
def evaluate_ap(model, images: np.ndarray, labels7: np.ndarray, schedule: NoiseSchedule,
                t=None, seed: int = 0) -> list[float | None]:
    """Per-super-class AP on noised inputs.

    ``t=None`` draws t uniformly per sample; an int evaluates one noise level.
    Classes with no positives are reported as None.
    """
    gen = torch.Generator().manual_seed(seed)
    x0 = to_model_domain(torch.as_tensor(images, dtype=torch.float32)).unsqueeze(1)
    if t is None:
        tt = torch.randint(1, schedule.T + 1, (len(x0),), generator=gen)
    else:
        tt = torch.full((len(x0),), int(t), dtype=torch.long)
    eps = torch.randn(x0.shape, generator=gen)
    scores = torch.sigmoid(model(forward_sample(x0, tt, eps, schedule), tt)).numpy()
    out = []
    for k in range(labels7.shape[1]):
        y = labels7[:, k]
        out.append(None if y.sum() == 0 else float(average_precision(scores[:, k], y)))
    return out


def train_classifier(images: np.ndarray, labels7: np.ndarray, schedule: NoiseSchedule,
                     cfg: ClassifierConfig = ClassifierConfig(), val=None):
    """Multi-label BCE on noised inputs x_t, t ~ U{1..T}.

    ``val`` is an optional (images, labels7) pair. Returns
    ``(model, loss_curve, ap_report)``.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    n_classes = labels7.shape[1]
    model = NoisyClassifier(n_classes, cfg.width)
    x_all = to_model_domain(torch.as_tensor(images, dtype=torch.float32)).unsqueeze(1)
    y_all = torch.as_tensor(labels7, dtype=torch.float32)
    pos_weight = positive_weights(labels7, cfg.max_pos_weight)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(x_all)
    spe = max(1, math.ceil(n / cfg.batch_size))
    total = max(1, cfg.epochs * spe)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: 0.5 * (1 + math.cos(math.pi * min(k, total) / total)))
    curve, history = [], []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        running = 0.0
        for k in range(spe):
            idx = perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            x0, y = x_all[idx], y_all[idx]
            t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            z = model(forward_sample(x0, t, eps, schedule), t)
            loss = F.binary_cross_entropy_with_logits(z, y, pos_weight=pos_weight)
            lv = loss.item()
            history.append(lv)
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite classifier loss at epoch {epoch} step {k}",
                                    {"recent_losses": history[-10:]})
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += lv
        curve.append(running / spe)
    model.eval()
    report = {}
    if val is not None:
        vi, vl = val
        report = {
            "ap_fixed_t": evaluate_ap(model, vi, vl, schedule, t=schedule.T // 4, seed=cfg.seed),
            "fixed_t": schedule.T // 4,
            "ap_random_t": evaluate_ap(model, vi, vl, schedule, t=None, seed=cfg.seed),
        }
    return model, curve, report


def save_classifier(path, model: NoisyClassifier, cfg: ClassifierConfig, curve, report, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "weights.pt")
    manifest = {
        "architecture": {"kind": "noisy_conv", "width": model.width, "n_classes": model.n_classes},
        "train_config": asdict(cfg),
        "seed": cfg.seed,
        "loss_curve": list(curve),
        "ap": report,
        "weights_hash": state_hash(model),
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_classifier(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    arch = manifest["architecture"]
    model = NoisyClassifier(arch["n_classes"], arch["width"])
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    model.eval()
    return model, manifest
