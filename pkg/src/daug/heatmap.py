"""Abnormality heatmaps from guided translations, their on-disk bank, and the
three-channel (image, image, heatmap) input assembly.

Cache layout::

    heatmaps/<guide>/<sample_id>.png
    heatmaps/<guide>/provenance.json
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .diffusion import GuidanceSpec, NoiseSchedule, state_hash, translate
from .errors import StaleCacheError

log = logging.getLogger(__name__)


def make_heatmap(original, translated, smooth_radius: int = 1) -> np.ndarray:
    """|original - translated|, optional box blur, then per-image min-max to [0, 1].

    A zero difference stays all-zero.
    """
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(translated, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    h = np.abs(a - b)
    if smooth_radius > 0:
        h = ndimage.uniform_filter(h, size=2 * int(smooth_radius) + 1, mode="nearest")
    lo, hi = h.min(), h.max()
    if hi - lo <= 0:
        return np.zeros_like(h, dtype=np.float32)
    return ((h - lo) / (hi - lo)).astype(np.float32)


def augment_channels(image, heatmap) -> np.ndarray:
    """Stack to (3, H, W): the image twice, then the heatmap."""
    image = np.asarray(image, dtype=np.float32)
    heatmap = np.asarray(heatmap, dtype=np.float32)
    if image.shape != heatmap.shape:
        raise ValueError(f"shape mismatch {image.shape} vs {heatmap.shape}")
    return np.stack([image, image, heatmap], axis=-3)


def quantize_heatmap(h: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(h, 0, 1) * 255.0) / 255.0).astype(np.float32)


@dataclass
class HeatmapRecord:
    sample_id: str
    target: int
    sign: int
    heatmap: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class HeatmapBank:
    records: dict = field(default_factory=dict)  # (sample_id, guide key) -> HeatmapRecord
    computed: int = 0
    cache_hits: int = 0

    def __len__(self):
        return len(self.records)

    def get(self, sample_id: str, guide: GuidanceSpec | str) -> np.ndarray:
        key = guide if isinstance(guide, str) else guide.key
        return self.records[(sample_id, key)].heatmap

    def stack(self, sample_ids, guide) -> np.ndarray:
        return np.stack([self.get(i, guide) for i in sample_ids])


def _image_hash(img: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(img, dtype=np.float32).tobytes()).hexdigest()[:16]


def sample_seed(seed: int, guide_key: str, sample_id: str) -> int:
    d = hashlib.sha256(f"{seed}|{guide_key}|{sample_id}".encode()).digest()
    return int.from_bytes(d[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _png_bytes(h: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.round(h * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def translate_batch(images: np.ndarray, ids, guide: GuidanceSpec, denoiser, classifier,
                    schedule: NoiseSchedule, t_start: int, seed: int) -> np.ndarray:
    """Translate a batch with one independent stream per sample id."""
    gens = [torch.Generator().manual_seed(sample_seed(seed, guide.key, i)) for i in ids]
    return translate(images, guide, t_start, denoiser, classifier, schedule, gens)


def generate_bank(samples, guides, denoiser, classifier, schedule: NoiseSchedule, cache_dir=None,
                  t_start: int | None = None, smooth_radius: int = 1, seed: int = 0,
                  batch_size: int = 128, bank: HeatmapBank | None = None) -> HeatmapBank:
    """One heatmap per (sample, guide), reusing cache entries with matching provenance.

    A cache directory written by different model weights or settings raises
    ``StaleCacheError`` rather than being silently reused.
    """
    bank = bank if bank is not None else HeatmapBank()
    t_start = schedule.T // 2 if t_start is None else int(t_start)
    d_hash, c_hash = state_hash(denoiser), state_hash(classifier)
    for guide in guides:
        prov = {
            "guide": guide.to_dict(), "t_start": t_start, "smooth_radius": smooth_radius,
            "seed": seed, "schedule": schedule.params(),
            "denoiser_hash": d_hash, "classifier_hash": c_hash,
        }
        entries = {}
        gdir = None
        if cache_dir is not None:
            gdir = Path(cache_dir) / guide.key
            gdir.mkdir(parents=True, exist_ok=True)
            pfile = gdir / "provenance.json"
            if pfile.exists():
                old = json.loads(pfile.read_text())
                if old["settings"] != prov:
                    raise StaleCacheError(
                        f"heatmap cache {gdir} was built with different settings/models; "
                        "delete it or use a different cache directory")
                entries = old["entries"]
        todo = []
        for s in samples:
            h_img = _image_hash(s.image)
            if gdir is not None and entries.get(s.id) == h_img and (gdir / f"{s.id}.png").exists():
                heat = np.asarray(Image.open(gdir / f"{s.id}.png"), dtype=np.float32) / 255.0
                bank.records[(s.id, guide.key)] = HeatmapRecord(s.id, guide.target, guide.sign, heat, prov)
                bank.cache_hits += 1
            else:
                todo.append(s)
        if bank.cache_hits:
            log.info("guide %s: %d cache hits, %d to compute", guide.key, len(samples) - len(todo), len(todo))
        for start in range(0, len(todo), batch_size):
            chunk = todo[start:start + batch_size]
            imgs = np.stack([s.image for s in chunk])
            out = translate_batch(imgs, [s.id for s in chunk], guide, denoiser, classifier, schedule,
                                  t_start, seed)
            for s, tr in zip(chunk, out):
                heat = quantize_heatmap(make_heatmap(s.image, tr, smooth_radius))
                bank.records[(s.id, guide.key)] = HeatmapRecord(s.id, guide.target, guide.sign, heat, prov)
                bank.computed += 1
                if gdir is not None:
                    _atomic_write(gdir / f"{s.id}.png", _png_bytes(heat))
                    entries[s.id] = _image_hash(s.image)
            if gdir is not None:
                _atomic_write(gdir / "provenance.json",
                              json.dumps({"settings": prov, "entries": entries}, indent=1,
                                         sort_keys=True).encode())
    return bank


def load_bank(cache_dir, guide: GuidanceSpec) -> HeatmapBank:
    """Read every cached heatmap of one guide without touching the models."""
    gdir = Path(cache_dir) / guide.key
    meta = json.loads((gdir / "provenance.json").read_text())
    bank = HeatmapBank()
    for sid in sorted(meta["entries"]):
        heat = np.asarray(Image.open(gdir / f"{sid}.png"), dtype=np.float32) / 255.0
        bank.records[(sid, guide.key)] = HeatmapRecord(sid, guide.target, guide.sign, heat, meta["settings"])
    return bank
