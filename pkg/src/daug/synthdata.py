"""Deterministic synthetic chest-radiograph stand-in.

Each sample is a grayscale "chest" (body, two lung fields, mediastinum and
heart) with a per-sample smooth deformation, onto which disease signatures
are painted additively. A disease's mask is exactly the set of pixels its
signature touched, so heatmaps can be scored against ground truth.

Layout on disk::

    images/<id>.png
    masks/<id>/<class>.png      (only non-empty masks are written)
    meta/<id>.json              labels14, labels7, report
    manifest.json               spec echo, splits, format version
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError
from .taxonomy import DISEASE_CLASSES, FINE_CLASSES, TAXONOMY, slug, to_superclass

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

_NF = FINE_CLASSES.index("No Finding")
_IDX = {c: i for i, c in enumerate(FINE_CLASSES)}


def default_prevalence() -> dict[str, float]:
    prev = {c: 0.12 for c in DISEASE_CLASSES}
    prev.update({"Lung Opacity": 0.06, "Pneumothorax": 0.05, "Fracture": 0.05})
    return prev


def default_cooccurrence() -> list[tuple[str, str, float]]:
    # (given, then, P(then | given)); the pleural / airspace pair is the confusable one
    return [
        ("Pleural Effusion", "Consolidation", 0.7),
        ("Pleural Effusion", "Edema", 0.5),
        ("Cardiomegaly", "Enlarged Cardiomediastinum", 0.5),
    ]


@dataclass
class DatasetSpec:
    n_train: int = 1200
    n_val: int = 200
    n_test: int = 300
    image_size: int = 32
    class_prevalence: dict = field(default_factory=default_prevalence)
    cooccurrence: list = field(default_factory=default_cooccurrence)
    negative_mention_prob: float = 0.3
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        for name in ("n_train", "n_val", "n_test"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not 16 <= int(self.image_size) <= 512:
            raise ConfigurationError(f"image_size must be in [16, 512], got {self.image_size}")
        for c, p in self.class_prevalence.items():
            if c not in DISEASE_CLASSES:
                raise ConfigurationError(f"unknown disease class in prevalence: {c!r}")
            if not 0.0 <= float(p) <= 1.0:
                raise ConfigurationError(f"prevalence of {c} outside [0, 1]: {p}")
        for a, b, q in self.cooccurrence:
            if a not in DISEASE_CLASSES or b not in DISEASE_CLASSES or a == b:
                raise ConfigurationError(f"bad co-occurrence pair ({a!r}, {b!r})")
            if not 0.0 <= float(q) <= 1.0:
                raise ConfigurationError(f"co-occurrence probability outside [0, 1]: {q}")
        if not 0.0 <= float(self.negative_mention_prob) <= 1.0:
            raise ConfigurationError("negative_mention_prob outside [0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cooccurrence"] = [list(x) for x in self.cooccurrence]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if "cooccurrence" in d:
            d["cooccurrence"] = [tuple(x) for x in d["cooccurrence"]]
        if "class_prevalence" in d:
            prev = {c: 0.0 for c in DISEASE_CLASSES}
            prev.update(d["class_prevalence"])
            d["class_prevalence"] = prev
        return cls(**d)


@dataclass
class SynthSample:
    id: str
    image: np.ndarray  # (H, W) float32, multiples of 1/255
    masks: np.ndarray  # (14, H, W) bool, row 0 ("No Finding") always empty
    labels14: np.ndarray  # (14,) int64
    report: str

    @property
    def labels7(self) -> np.ndarray:
        return to_superclass(self.labels14)


# ---------------------------------------------------------------- reports

def positive_sentence(name: str) -> str:
    return f"{name} is present."


def negative_sentence(name: str) -> str:
    return f"No {name.lower()}."


HEALTHY_SENTENCE = "No acute findings."


def render_report(labels14, negative_mention_prob: float, rng: np.random.Generator) -> str:
    """Template report: every positive, each negative with some probability.

    Radiology reports tend to leave out findings that are absent, so negatives
    are only mentioned at random.
    """
    labels14 = np.asarray(labels14)
    pos = [FINE_CLASSES[i] for i in range(1, len(FINE_CLASSES)) if labels14[i]]
    # one draw per disease class keeps the stream length fixed
    draws = rng.random(len(FINE_CLASSES) - 1)
    sentences = [positive_sentence(c) for c in pos] if pos else [HEALTHY_SENTENCE]
    for k, c in enumerate(FINE_CLASSES[1:]):
        if not labels14[k + 1] and draws[k] < negative_mention_prob:
            sentences.append(negative_sentence(c))
    return " ".join(sentences)


_POS_RE = re.compile(r"([A-Z][A-Za-z ]+?) is present\.")


def parse_report(report: str) -> np.ndarray:
    """Recover the positive label set from a templated report."""
    labels = np.zeros(len(FINE_CLASSES), dtype=np.int64)
    for name in _POS_RE.findall(report):
        labels[_IDX[name]] = 1
    if not labels.any():
        labels[_NF] = 1
    return labels


# ---------------------------------------------------------------- rendering

def _grid(size):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def _ellipse(u, v, cu, cv, ru, rv):
    return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 < 1.0


class _Anatomy:
    """Per-sample healthy anatomy plus the coordinate frames diseases are drawn in."""

    def __init__(self, size, rng):
        self.size = size
        self.u, self.v = _grid(size)
        self.du, self.dv = rng.uniform(-0.05, 0.05, size=2)
        self.s_lung = rng.uniform(0.94, 1.06)
        self.s_heart = rng.uniform(0.92, 1.05)
        self.gain = rng.uniform(0.92, 1.08)
        self.field = rng.normal(0.0, 1.0, size=6)
        self.noise = rng.normal(0.0, 0.012, size=(size, size))
        self._frame()

    @classmethod
    def nominal(cls, size):
        anat = cls.__new__(cls)
        anat.size = size
        anat.u, anat.v = _grid(size)
        anat.du = anat.dv = 0.0
        anat.s_lung = anat.s_heart = anat.gain = 1.0
        anat.field = np.zeros(6)
        anat.noise = np.zeros((size, size))
        anat._frame()
        return anat

    def _frame(self):
        self.heart = (0.08 + self.du, 0.40 + self.dv, 0.30 * self.s_heart, 0.24 * self.s_heart)
        self.medi = ((np.abs(self.u - self.du) < 0.11) & (self.v > -0.85 + self.dv)
                     & (self.v < 0.30 + self.dv))
        opaque = self.medi | _ellipse(self.u, self.v, *self.heart)
        self.lungs = {}
        for side in (-1, 1):
            cu = side * 0.42 + self.du
            cv = -0.08 + self.dv
            ru, rv = 0.30 * self.s_lung, 0.60 * self.s_lung
            # a > 0 points laterally, b > 0 points down
            a = (self.u - cu) / ru * side
            b = (self.v - cv) / rv
            self.lungs[side] = (a, b, (a ** 2 + b ** 2 < 1.0) & ~opaque)

    def base(self):
        u, v = self.u, self.v
        img = np.full(u.shape, 0.06)
        img[_ellipse(u, v, self.du, 0.05, 0.95, 1.15)] = 0.40
        for side in (-1, 1):
            img[self.lungs[side][2]] = 0.16
        img[self.medi] = 0.58
        img[_ellipse(u, v, *self.heart)] = 0.62
        f = self.field
        smooth = 0.012 * (
            f[0] * np.cos(np.pi * u / 2) + f[1] * np.cos(np.pi * v / 2)
            + f[2] * np.sin(np.pi * u) * np.cos(np.pi * v / 2)
            + f[3] * np.sin(np.pi * v) + f[4] * np.cos(np.pi * (u + v) / 2)
            + f[5] * np.sin(np.pi * u / 2) * np.sin(np.pi * v / 2)
        )
        return img * self.gain + smooth + self.noise


def _disease_regions(anat: _Anatomy, rng: np.random.Generator) -> dict[str, tuple[np.ndarray, float]]:
    """Region and additive amplitude for every disease class.

    All geometry is drawn up front, whether or not the disease is present, so
    the random stream does not depend on labels.
    """
    u, v, du, dv = anat.u, anat.v, anat.du, anat.dv
    sides = rng.choice([-1, 1], size=13)
    p = rng.uniform(0.0, 1.0, size=16)
    out = {}

    off = np.abs(u - du)
    out["Enlarged Cardiomediastinum"] = (
        (off >= 0.11) & (off < 0.20) & (v > -0.80 + dv) & (v < 0.15 + dv), 0.28)

    cu, cv, ru, rv = anat.heart
    f = 1.30 + 0.15 * p[0]
    out["Cardiomegaly"] = (
        _ellipse(u, v, cu, cv + 0.02, ru * f, rv * f) & ~_ellipse(u, v, cu, cv, ru, rv), 0.30)

    a, b, inside = anat.lungs[sides[0]]
    out["Lung Opacity"] = (inside & (a < -0.1) & (b > -0.6) & (b < 0.5), 0.08)

    a, b, inside = anat.lungs[sides[1]]
    a0, b0 = -0.5 + 1.0 * p[1], -0.55 + 0.40 * p[2]
    r = 0.08 + 0.04 * p[3]
    ru_l, rv_l = 0.30 * anat.s_lung, 0.60 * anat.s_lung
    out["Lung Lesion"] = (inside & (((a - a0) * ru_l) ** 2 + ((b - b0) * rv_l) ** 2 < r ** 2), 0.38)

    edema = np.zeros_like(u, dtype=bool)
    for side in (-1, 1):
        a, b, inside = anat.lungs[side]
        edema |= inside & (((a + 0.1) / 0.55) ** 2 + ((b - 0.15) / 0.30) ** 2 < 1.0)
    out["Edema"] = (edema, 0.16)

    a, b, inside = anat.lungs[sides[2]]
    a0, b0 = -0.2 + 0.5 * p[4], 0.10 + 0.20 * p[5]
    out["Consolidation"] = (inside & (((a - a0) / 0.45) ** 2 + ((b - b0) / 0.22) ** 2 < 1.0), 0.26)

    a, b, inside = anat.lungs[sides[3]]
    a0, b0 = -0.3 + 0.6 * p[6], 0.0 + 0.30 * p[7]
    out["Pneumonia"] = (inside & (((a - a0) / 0.35) ** 2 + ((b - b0) / 0.20) ** 2 < 1.0), 0.26)

    a, b, inside = anat.lungs[sides[4]]
    out["Atelectasis"] = (inside & (b < -0.62), -0.12)

    a, b, inside = anat.lungs[sides[5]]
    out["Pneumothorax"] = (inside & (a > 0.55) & (b > -0.6) & (b < -0.1), -0.10)

    effusion = np.zeros_like(u, dtype=bool)
    both = p[8] < 0.3
    for side in ((-1, 1) if both else (sides[6],)):
        a, b, inside = anat.lungs[side]
        effusion |= inside & (b > 0.62 - 0.1 * a)
    out["Pleural Effusion"] = (effusion, 0.40)

    a, b, inside = anat.lungs[sides[7]]
    out["Pleural Other"] = (inside & (a > 0.75) & (b > -0.4) & (b < 0.45), 0.30)

    v0 = -0.6 + 0.9 * p[9]
    out["Fracture"] = (
        (np.abs(u - sides[8] * 0.86) < 0.04) & (v > v0) & (v < v0 + 0.2), 0.35)

    tube = (np.abs(u - (du + 0.04)) < 0.035) & (v < 0.45 + dv)
    box = (np.abs(u - 0.6) < 0.07) & (np.abs(v + 0.82) < 0.07)
    out["Support Devices"] = (tube | box, 0.32)
    return out


def canonical_region(super_index: int, size: int = 32) -> np.ndarray:
    """Where a super-class can appear on the nominal (undeformed) anatomy.

    Only the confusable pair has a region: airspace density (3) covers the
    mid and lower lung fields above the costophrenic angle, pleural (5) the
    lung bases and lateral rim.
    """
    anat = _Anatomy.nominal(size)
    out = np.zeros((size, size), dtype=bool)
    for side in (-1, 1):
        a, b, inside = anat.lungs[side]
        if super_index == 3:
            out |= inside & (b > -0.2) & (b < 0.55)
        elif super_index == 5:
            out |= inside & ((b > 0.52) | ((a > 0.75) & (b > -0.4)))
        else:
            raise ConfigurationError(f"no canonical region for super-class {super_index}")
    return out


def _sample_labels(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    prev = np.array([float(spec.class_prevalence.get(c, 0.0)) for c in DISEASE_CLASSES])
    pos = rng.random(len(DISEASE_CLASSES)) < prev
    boost = rng.random(len(spec.cooccurrence))
    for k, (a, b, q) in enumerate(spec.cooccurrence):
        ia, ib = DISEASE_CLASSES.index(a), DISEASE_CLASSES.index(b)
        if pos[ia] and not pos[ib]:
            # top up so that P(b | a) == q when prevalence(b) < q
            pb = prev[ib]
            extra = max(0.0, (q - pb) / (1.0 - pb)) if pb < 1 else 0.0
            pos[ib] = boost[k] < extra
    labels = np.zeros(len(FINE_CLASSES), dtype=np.int64)
    labels[1:] = pos
    return labels


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render_sample(sample_id: str, labels14: np.ndarray, size: int, rng: np.random.Generator,
                  negative_mention_prob: float = 0.0) -> SynthSample:
    anat = _Anatomy(size, rng)
    regions = _disease_regions(anat, rng)
    img = anat.base()
    labels14 = np.array(labels14, dtype=np.int64)
    masks = np.zeros((len(FINE_CLASSES), size, size), dtype=bool)
    for c in DISEASE_CLASSES:
        i = _IDX[c]
        if not labels14[i]:
            continue
        region, amp = regions[c]
        if not region.any():
            labels14[i] = 0  # signature fell off the grid at this resolution
            continue
        img = img + amp * region
        masks[i] = region
    labels14[_NF] = int(not labels14[1:].any())
    report = render_report(labels14, negative_mention_prob, rng)
    return SynthSample(sample_id, quantize(img), masks, labels14, report)


def generate_split(spec: DatasetSpec, split: str, n: int, start: int = 0) -> list[SynthSample]:
    """Samples ``start .. start+n-1`` of ``split``; each has its own seeded stream."""
    out = []
    sidx = SPLITS.index(split)
    for i in range(start, start + n):
        rng = np.random.default_rng([int(spec.seed), sidx, i])
        labels = _sample_labels(spec, rng)
        out.append(render_sample(f"{split}-{i:05d}", labels, int(spec.image_size), rng,
                                 float(spec.negative_mention_prob)))
    return out


def generate_dataset(spec: DatasetSpec) -> tuple[list[SynthSample], list[SynthSample], list[SynthSample]]:
    spec.validate()
    return (generate_split(spec, "train", spec.n_train),
            generate_split(spec, "val", spec.n_val),
            generate_split(spec, "test", spec.n_test))


def single_disease_samples(disease: str, n: int, size: int = 32, seed: int = 0) -> list[SynthSample]:
    """Probe samples carrying exactly one disease class."""
    labels = np.zeros(len(FINE_CLASSES), dtype=np.int64)
    labels[_IDX[disease]] = 1
    out = []
    for i in range(n):
        rng = np.random.default_rng([int(seed), 7, _IDX[disease], i])
        out.append(render_sample(f"probe-{slug(disease)}-{i:05d}", labels, size, rng))
    return out


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def stack_labels(samples) -> np.ndarray:
    return np.stack([s.labels14 for s in samples])


# ---------------------------------------------------------------- persistence

def _write_png(path: Path, arr_u8: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr_u8, mode="L").save(path, format="PNG")


def save_dataset(root, spec: DatasetSpec, splits: dict[str, list[SynthSample]]):
    root = Path(root)
    for split, samples in splits.items():
        for s in samples:
            _write_png(root / "images" / f"{s.id}.png", np.round(s.image * 255).astype(np.uint8))
            for i in np.flatnonzero(s.masks.reshape(len(FINE_CLASSES), -1).any(axis=1)):
                _write_png(root / "masks" / s.id / f"{slug(FINE_CLASSES[i])}.png",
                           s.masks[i].astype(np.uint8) * 255)
            meta = {"labels14": s.labels14.tolist(), "labels7": s.labels7.tolist(), "report": s.report}
            p = root / "meta" / f"{s.id}.json"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(json.dumps(meta, sort_keys=True))
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "classes": list(FINE_CLASSES),
        "super_classes": list(TAXONOMY.super_classes),
        "splits": {k: [s.id for s in v] for k, v in splits.items()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_sample(root, sample_id: str) -> SynthSample:
    root = Path(root)
    img = np.asarray(Image.open(root / "images" / f"{sample_id}.png"), dtype=np.uint8)
    meta = json.loads((root / "meta" / f"{sample_id}.json").read_text())
    masks = np.zeros((len(FINE_CLASSES),) + img.shape, dtype=bool)
    mdir = root / "masks" / sample_id
    for i, c in enumerate(FINE_CLASSES):
        p = mdir / f"{slug(c)}.png"
        if p.exists():
            masks[i] = np.asarray(Image.open(p)) > 0
    return SynthSample(sample_id, (img / 255.0).astype(np.float32), masks,
                       np.array(meta["labels14"], dtype=np.int64), meta["report"])


def load_dataset(root) -> tuple[DatasetSpec, dict[str, list[SynthSample]]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported dataset format {manifest.get('format_version')}")
    spec = DatasetSpec.from_dict(manifest["spec"])
    splits = {k: [load_sample(root, i) for i in ids] for k, ids in manifest["splits"].items()}
    return spec, splits
