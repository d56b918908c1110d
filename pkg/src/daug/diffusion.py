"""DDPM: linear schedule, closed-form forward noising, a small U-Net noise
predictor, ancestral sampling, classifier-guided steps and half-noising
image-to-image translation.

Timesteps are 1-based (t = 1..T). Inside this module images live in [-1, 1];
``train_denoiser`` and ``translate`` take and return images in [0, 1].
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, GuidanceError, TrainingError


def to_model_domain(img01):
    return img01 * 2.0 - 1.0


def from_model_domain(x):
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False, compare=False)
    alpha: np.ndarray = field(repr=False, compare=False)
    alpha_bar: np.ndarray = field(repr=False, compare=False)

    def at(self, name: str, t) -> float:
        """Value of ``beta``/``alpha``/``alpha_bar`` at 1-based step t (alpha_bar_0 = 1)."""
        t = int(t)
        if name == "alpha_bar" and t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(getattr(self, name)[t - 1])

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) < 2:
        raise ConfigurationError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), beta, alpha, alpha_bar)


def _per_sample(schedule: NoiseSchedule, name: str, t, like: torch.Tensor) -> torch.Tensor:
    """Broadcastable (B, 1, ..., 1) tensor of a schedule quantity."""
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 0) or torch.any(t > schedule.T):
        raise ValueError(f"timestep outside [0, {schedule.T}]")
    table = np.concatenate([[1.0], getattr(schedule, name)]) if name == "alpha_bar" else \
        np.concatenate([[0.0], getattr(schedule, name)])
    vals = torch.as_tensor(table, dtype=like.dtype)[t]
    if vals.ndim == 0:
        return vals
    return vals.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with x0 already in [-1, 1].

    ``t`` is an int or a per-sample tensor; t = 0 is the noise-free limit.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = _per_sample(schedule, "alpha_bar", t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


# ---------------------------------------------------------------- networks

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim, groups=4):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.temb = nn.Linear(tdim, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x))) + self.temb(temb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Three-level encoder/decoder noise predictor with sinusoidal time embedding."""

    def __init__(self, base_width: int = 16, in_channels: int = 1):
        super().__init__()
        w = base_width
        self.base_width = w
        self.in_channels = in_channels
        tdim = 4 * w
        self.time_mlp = nn.Sequential(nn.Linear(w, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inc = nn.Conv2d(in_channels, w, 3, padding=1)
        self.down1 = ResBlock(w, w, tdim)
        self.down2 = ResBlock(w, 2 * w, tdim)
        self.down3 = ResBlock(2 * w, 2 * w, tdim)
        self.mid = ResBlock(2 * w, 2 * w, tdim)
        self.up3 = ResBlock(4 * w, 2 * w, tdim)
        self.up2 = ResBlock(4 * w, w, tdim)
        self.up1 = ResBlock(2 * w, w, tdim)
        self.out = nn.Conv2d(w, in_channels, 3, padding=1)

    def forward(self, x, t):
        t = torch.as_tensor(t, dtype=torch.long).expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.base_width).to(x.dtype))
        h1 = self.down1(self.inc(x), temb)
        h2 = self.down2(F.avg_pool2d(h1, 2), temb)
        h3 = self.down3(F.avg_pool2d(h2, 2), temb)
        h = self.mid(h3, temb)
        h = F.interpolate(self.up3(torch.cat([h, h3], 1), temb), scale_factor=2, mode="nearest")
        h = F.interpolate(self.up2(torch.cat([h, h2], 1), temb), scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, h1], 1), temb)
        return self.out(F.silu(h))


class OracleDenoiser(nn.Module):
    """Noise predictor that knows the clean image: returns the exact noise in x_t."""

    def __init__(self, x0: torch.Tensor, schedule: NoiseSchedule):
        super().__init__()
        self.x0 = x0
        self.schedule = schedule

    def forward(self, x, t):
        ab = _per_sample(self.schedule, "alpha_bar", t, x)
        return (x - ab.sqrt() * self.x0) / (1.0 - ab).sqrt()


# ---------------------------------------------------------------- training

@dataclass
class DenoiserConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 2e-3
    base_width: int = 16
    ema_decay: float = 0.995
    seed: int = 0


def _check_finite(loss, where, history):
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss at {where}", {"where": where, "recent_losses": history[-10:]})


def train_denoiser(images: np.ndarray, schedule: NoiseSchedule, cfg: DenoiserConfig = DenoiserConfig()):
    """Fit the noise predictor by MSE on (x_t, t) pairs with t ~ U{1..T}.

    Returns ``(model, loss_curve)`` where the curve holds one mean loss per
    epoch. The returned model carries the EMA weights when ``ema_decay > 0``.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = UNet(cfg.base_width)
    ema = UNet(cfg.base_width)
    ema.load_state_dict(model.state_dict())
    ema.requires_grad_(False)
    data = to_model_domain(torch.as_tensor(np.asarray(images), dtype=torch.float32)).unsqueeze(1)
    n = data.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    total = max(1, cfg.epochs * steps_per_epoch)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: min(1.0, (k + 1) / 100) * 0.5 * (1 + math.cos(math.pi * min(k, total) / total)))
    curve, history = [], []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        running = 0.0
        for k in range(steps_per_epoch):
            x0 = data[perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            xt = forward_sample(x0, t, eps, schedule)
            loss = F.mse_loss(model(xt, t), eps)
            lv = loss.item()
            history.append(lv)
            _check_finite(lv, f"epoch {epoch} step {k}", history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            with torch.no_grad():
                d = cfg.ema_decay
                for pe, pm in zip(ema.parameters(), model.parameters()):
                    pe.mul_(d).add_(pm, alpha=1 - d)
            running += lv
        curve.append(running / steps_per_epoch)
    final = ema if cfg.ema_decay > 0 else model
    final.eval()
    return final, curve


@torch.no_grad()
def denoising_mse(model, images: np.ndarray, schedule: NoiseSchedule, seed: int = 0) -> float:
    """Held-out noise-prediction MSE on a fixed draw of (t, eps)."""
    gen = torch.Generator().manual_seed(seed)
    x0 = to_model_domain(torch.as_tensor(np.asarray(images), dtype=torch.float32)).unsqueeze(1)
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    return F.mse_loss(model(forward_sample(x0, t, eps, schedule), t), eps).item()


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class GuidanceSpec:
    target: int  # 0-based super-class index
    sign: int = 1
    mode: str = "softmax"
    scale: float = 3.0

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ConfigurationError(f"sign must be +1 or -1, got {self.sign}")
        if self.mode not in ("sigmoid", "softmax"):
            raise ConfigurationError(f"mode must be sigmoid or softmax, got {self.mode!r}")
        if self.scale < 0:
            raise ConfigurationError("guidance scale must be nonnegative")

    @property
    def key(self) -> str:
        sign = "+" if self.sign > 0 else "-"
        return f"{sign}{self.target + 1}-{self.mode}-s{self.scale:g}"

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def posterior_mean(model, x_t: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    beta = schedule.at("beta", t)
    alpha = schedule.at("alpha", t)
    ab = schedule.at("alpha_bar", t)
    eps_hat = model(x_t, torch.full((x_t.shape[0],), t, dtype=torch.long))
    return (x_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)


def _randn(shape, rng, dtype=torch.float32):
    """Standard normal draw; ``rng`` may be one generator or one per batch row."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise ValueError(f"{len(rng)} generators for a batch of {shape[0]}")
        return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in rng])
    return torch.randn(shape, generator=rng, dtype=dtype)


def _add_noise(mean, t, schedule, rng):
    if t == 1:
        return mean
    return mean + math.sqrt(schedule.at("beta", t)) * _randn(mean.shape, rng, mean.dtype)


def ddpm_step(model, x_t: torch.Tensor, t: int, schedule: NoiseSchedule, rng: torch.Generator):
    """One ancestral step x_t -> x_{t-1} with sigma_t^2 = beta_t (no noise at t = 1)."""
    return _add_noise(posterior_mean(model, x_t, t, schedule), t, schedule, rng)


def guided_mean(model, classifier, x_t, t: int, guide: GuidanceSpec, schedule: NoiseSchedule):
    mean = posterior_mean(model, x_t, t, schedule)
    if guide.scale == 0:
        return mean
    from .classifier import guidance_grad

    try:
        g = guidance_grad(classifier, x_t, t, guide.target, guide.mode)
    except GuidanceError as e:
        raise GuidanceError(f"{e} (t={t}, target={guide.target})") from None
    return mean + guide.sign * guide.scale * schedule.at("beta", t) * g


def guided_step(model, classifier, x_t, t: int, guide: GuidanceSpec, schedule: NoiseSchedule,
                rng: torch.Generator):
    """DDPM step whose mean is shifted by sign * scale * beta_t * grad log p(target | x_t)."""
    return _add_noise(guided_mean(model, classifier, x_t, t, guide, schedule), t, schedule, rng)


def translate(image, guide: GuidanceSpec, t_start: int, model, classifier, schedule: NoiseSchedule,
              rng: torch.Generator):
    """Noise ``image`` (H, W) or (B, H, W) in [0, 1] to ``t_start``, then denoise with guidance.

    The anatomy survives partial noising, so the result keeps the identity of
    the input while moving toward (or away from) the guided class.
    """
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    single = img.ndim == 2
    if single:
        img = img[None]
    if not 0 <= int(t_start) <= schedule.T:
        raise ValueError(f"t_start {t_start} outside [0, {schedule.T}]")
    if t_start == 0:
        out = img.clone()
    else:
        x0 = to_model_domain(img).unsqueeze(1)
        eps = _randn(x0.shape, rng)
        x = forward_sample(x0, int(t_start), eps, schedule)
        for t in range(int(t_start), 0, -1):
            x = guided_step(model, classifier, x, t, guide, schedule, rng)
        out = from_model_domain(x[:, 0])
    out = out.numpy()
    return out[0] if single else out


# ---------------------------------------------------------------- checkpoints

def state_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_denoiser(path, model: UNet, schedule: NoiseSchedule, cfg: DenoiserConfig, curve, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "weights.pt")
    manifest = {
        "schedule": schedule.params(),
        "architecture": {"kind": "unet", "base_width": model.base_width, "levels": 3},
        "train_config": asdict(cfg),
        "seed": cfg.seed,
        "loss_curve": list(curve),
        "weights_hash": state_hash(model),
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_denoiser(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    model = UNet(manifest["architecture"]["base_width"])
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    model.eval()
    return model, make_schedule(**manifest["schedule"]), manifest
