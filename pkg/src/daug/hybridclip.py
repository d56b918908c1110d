"""Dual image/text encoder with the image-text-class hybrid contrastive loss.

The loss mixes symmetric image-report InfoNCE with a per-class binary
cross-entropy between images and class-prompt embeddings. Because the class
prompts go through the same text tower, the trained text tower doubles as a
bias-free linear classification head.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import StalePromptError, TrainingError
from .synthdata import HEALTHY_SENTENCE, negative_sentence, positive_sentence
from .taxonomy import FINE_CLASSES

KAPPA = 10.0
PROMPT_TEMPLATE = "A photo of a Chest X-ray image with {}."


def class_prompts(classes=FINE_CLASSES) -> list[str]:
    return [PROMPT_TEMPLATE.format(c.lower()) for c in classes]


# ---------------------------------------------------------------- text

_TOKEN = re.compile(r"[a-z]+")


def tokenize(sentence: str) -> list[str]:
    return _TOKEN.findall(sentence.lower())


def split_sentences(text: str) -> list[str]:
    return [s for s in (p.strip() for p in text.split(".")) if s]


def build_vocab() -> list[str]:
    """Closed vocabulary of every template the data generator and prompts can emit."""
    words = set()
    for c in FINE_CLASSES:
        for s in (positive_sentence(c), negative_sentence(c), PROMPT_TEMPLATE.format(c.lower())):
            words.update(tokenize(s))
    words.update(tokenize(HEALTHY_SENTENCE))
    return ["<pad>", "<unk>"] + sorted(words)


class TextTokenizer:
    def __init__(self, vocab=None, max_sentences=16, max_tokens=12):
        self.vocab = list(vocab or build_vocab())
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_sentences = max_sentences
        self.max_tokens = max_tokens

    def encode(self, texts) -> torch.Tensor:
        """(B, sentences, tokens) ids, 0-padded."""
        out = torch.zeros((len(texts), self.max_sentences, self.max_tokens), dtype=torch.long)
        for b, text in enumerate(texts):
            sents = split_sentences(text)
            if not sents:
                raise ValueError("cannot embed empty text")
            for s, sent in enumerate(sents[:self.max_sentences]):
                ids = [self.index.get(w, 1) for w in tokenize(sent)][:self.max_tokens]
                out[b, s, :len(ids)] = torch.tensor(ids, dtype=torch.long)
        return out


class TextTower(nn.Module):
    """Sentence-level bag of words: each sentence is embedded on its own, so a
    negation stays bound to the finding it negates."""

    def __init__(self, vocab_size, dim=64, hidden=128):
        super().__init__()
        self.emb = nn.Embedding(vocab_size, hidden, padding_idx=0)
        self.sentence = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.proj = nn.Linear(hidden, dim)

    def forward(self, ids):
        tok_mask = (ids > 0).to(self.emb.weight.dtype)
        n_tok = tok_mask.sum(-1, keepdim=True)
        sent = (self.emb(ids) * tok_mask[..., None]).sum(-2) / n_tok.clamp(min=1)
        sent_mask = (n_tok > 0).to(sent.dtype)
        h = (self.sentence(sent) * sent_mask).sum(-2) / sent_mask.sum(-2).clamp(min=1)
        return self.proj(h)


class ImageTower(nn.Module):
    def __init__(self, dim=64, width=16, image_size=32):
        super().__init__()
        w = width
        # batch norm removes the anatomy shared by every image, which otherwise
        # starts all embeddings at nearly the same point
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), nn.BatchNorm2d(w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.BatchNorm2d(2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.BatchNorm2d(4 * w), nn.SiLU(),
        )
        side = image_size // 8
        self.proj = nn.Linear(4 * w * side * side, dim)

    def forward(self, x):
        return self.proj(self.net(x).flatten(1))


class DualEncoder(nn.Module):
    def __init__(self, dim=64, image_size=32, width=16, init_temperature=0.07):
        super().__init__()
        self.dim = dim
        self.image_size = image_size
        self.width = width
        self.tokenizer = TextTokenizer()
        self.image_tower = ImageTower(dim, width, image_size)
        self.text_tower = TextTower(len(self.tokenizer.vocab), dim)
        self.log_inv_temp = nn.Parameter(torch.tensor(math.log(1.0 / init_temperature)))
        # bumped on every text-tower update; prompt caches compare against it
        self.text_version = 0

    @property
    def temperature(self) -> torch.Tensor:
        return 1.0 / self.log_inv_temp.clamp(max=math.log(100.0)).exp()

    def embed_image(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self.log_inv_temp.dtype)
        return F.normalize(self.image_tower(x), dim=-1)

    def embed_text(self, texts) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        ids = self.tokenizer.encode(texts)
        return F.normalize(self.text_tower(ids), dim=-1)

    def embed_tokens(self, ids) -> torch.Tensor:
        return F.normalize(self.text_tower(ids), dim=-1)


class ClassPromptSet:
    """Cached prompt embeddings that know which text-tower version produced them."""

    def __init__(self, classes=FINE_CLASSES):
        self.classes = tuple(classes)
        self.prompts = class_prompts(self.classes)
        self._emb = None
        self._version = None

    def refresh(self, model: DualEncoder) -> torch.Tensor:
        with torch.no_grad():
            self._emb = model.embed_text(self.prompts)
        self._version = model.text_version
        return self._emb

    def is_stale(self, model: DualEncoder) -> bool:
        return self._emb is None or self._version != model.text_version

    def embeddings(self, model: DualEncoder) -> torch.Tensor:
        if self.is_stale(model):
            raise StalePromptError("class-prompt embeddings predate the current text encoder")
        return self._emb


# ---------------------------------------------------------------- losses

def clip_loss(image_emb: torch.Tensor, text_emb: torch.Tensor, temperature) -> torch.Tensor:
    """Mean of image->text and text->image cross-entropy on cosine / temperature."""
    n = image_emb.shape[0]
    if n < 2 or text_emb.shape[0] != n:
        raise ValueError(f"need matching batches of size >= 2, got {n} and {text_emb.shape[0]}")
    logits = image_emb @ text_emb.T / temperature
    target = torch.arange(n)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def class_logits(image_emb, class_emb, kappa: float = KAPPA):
    return kappa * (image_emb @ class_emb.T)


def class_probabilities(image_emb, class_emb, kappa: float = KAPPA):
    return torch.sigmoid(class_logits(image_emb, class_emb, kappa))


def i2c_loss(image_emb, class_emb, labels14, kappa: float = KAPPA) -> torch.Tensor:
    """Mean BCE between sigmoid(kappa * cos(image, prompt)) and the multi-hot labels.

    Printed as a log of the raw cosine, which is undefined for cos <= 0; the
    sigmoid with a fixed logit scale matches the linear-head reading.
    """
    y = torch.as_tensor(labels14, dtype=image_emb.dtype)
    return F.binary_cross_entropy_with_logits(class_logits(image_emb, class_emb, kappa), y)


def hybrid_loss(image_emb, text_emb, class_emb, labels14, temperature, w: float = 0.7,
                kappa: float = KAPPA) -> torch.Tensor:
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w must lie in [0, 1], got {w}")
    lc = clip_loss(image_emb, text_emb, temperature)
    if w == 1.0:
        return lc
    li = i2c_loss(image_emb, class_emb, labels14, kappa)
    if w == 0.0:
        return li
    return w * lc + (1.0 - w) * li


# ---------------------------------------------------------------- training

@dataclass
class HybridConfig:
    w: float = 0.7
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 1e-4
    dim: int = 64
    width: int = 16
    kappa: float = KAPPA
    seed: int = 0


def train_hybrid(images3: np.ndarray, reports, labels14: np.ndarray, cfg: HybridConfig = HybridConfig()):
    """Minimize the hybrid loss; class prompts are re-encoded at every step.

    ``images3`` is (N, 3, H, W). Returns ``(model, loss_curve)`` with one mean
    loss per epoch.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    model = DualEncoder(cfg.dim, images3.shape[-1], cfg.width)
    x_all = torch.as_tensor(images3, dtype=torch.float32)
    ids_all = model.tokenizer.encode(list(reports))
    y_all = torch.as_tensor(labels14, dtype=torch.float32)
    prompt_ids = model.tokenizer.encode(class_prompts())
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(x_all)
    spe = max(1, n // cfg.batch_size)  # drop the ragged tail: InfoNCE needs full batches
    total = max(1, cfg.epochs * spe)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: 0.5 * (1 + math.cos(math.pi * min(k, total) / total)))
    curve, history = [], []
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        running = 0.0
        for k in range(spe):
            idx = perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            img = model.embed_image(x_all[idx])
            txt = model.embed_tokens(ids_all[idx])
            cls = model.embed_tokens(prompt_ids)
            loss = hybrid_loss(img, txt, cls, y_all[idx], model.temperature, cfg.w, cfg.kappa)
            lv = loss.item()
            history.append(lv)
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite hybrid loss at epoch {epoch} step {k}",
                                    {"recent_losses": history[-10:]})
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            model.text_version += 1
            running += lv
        curve.append(running / spe)
    model.eval()
    return model, curve


# ---------------------------------------------------------------- inference

def build_linear_head(model: DualEncoder, prompts: ClassPromptSet, kappa: float = KAPPA):
    """Bias-free linear classifier whose weight rows are the prompt embeddings."""
    weights = prompts.embeddings(model).double()

    def classify(images3) -> torch.Tensor:
        # float64 keeps sigmoid from collapsing distinct cosines into ties
        with torch.no_grad():
            return class_probabilities(model.embed_image(images3).double(), weights, kappa)

    return classify


@torch.no_grad()
def embed_images(model: DualEncoder, images3: np.ndarray, batch_size: int = 512) -> np.ndarray:
    x = torch.as_tensor(images3, dtype=torch.float32)
    return torch.cat([model.embed_image(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]).numpy()


@torch.no_grad()
def embed_texts(model: DualEncoder, texts, batch_size: int = 512) -> np.ndarray:
    texts = list(texts)
    return torch.cat([model.embed_text(texts[i:i + batch_size])
                      for i in range(0, len(texts), batch_size)]).numpy()


def retrieve(query_embedding, gallery_embeddings, k: int, ids=None) -> list:
    """Top-k gallery ids by cosine similarity; ties go to the smaller id."""
    g = np.asarray(gallery_embeddings, dtype=np.float64)
    if g.ndim != 2 or len(g) == 0:
        raise ValueError("empty gallery")
    if not 1 <= k <= len(g):
        raise ValueError(f"k={k} outside [1, {len(g)}]")
    ids = np.arange(len(g)) if ids is None else np.asarray(ids)
    q = np.asarray(query_embedding, dtype=np.float64)
    sims = (g @ q) / (np.linalg.norm(g, axis=1) * np.linalg.norm(q) + 1e-300)
    order = np.lexsort((ids, -sims))
    return [ids[i].item() if hasattr(ids[i], "item") else ids[i] for i in order[:k]]


def retrieve_many(queries: np.ndarray, gallery: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """Vectorized ``retrieve`` over integer gallery ids 0..n-1 (same tie rule).

    ``exclude_self`` drops gallery item i from query i's list, for
    leave-one-out retrieval when queries and gallery are the same set.
    """
    q = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    sims = q.astype(np.float64) @ g.astype(np.float64).T
    if exclude_self:
        np.fill_diagonal(sims, -np.inf)
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


# ---------------------------------------------------------------- checkpoints

def save_encoder(path, model: DualEncoder, cfg: HybridConfig, curve, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "weights.pt")
    manifest = {
        "w": cfg.w, "kappa": cfg.kappa, "temperature": float(model.temperature.detach()),
        "prompts": class_prompts(), "train_config": asdict(cfg), "seed": cfg.seed,
        "architecture": {"dim": model.dim, "image_size": model.image_size, "width": model.width},
        "vocab": model.tokenizer.vocab, "loss_curve": list(curve),
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_encoder(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    a = manifest["architecture"]
    model = DualEncoder(a["dim"], a["image_size"], a["width"])
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    model.eval()
    return model, manifest
