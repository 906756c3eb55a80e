"""Degradation metrics: perplexity, incremental log-ratio, alignment, collapse labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import io
from .autodiff import Graph
from .data import CATEGORY_NAMES, caption_for
from .model import Adam, Tokenizer, _attention, block_mask, patchify, teacher_forced_logprobs
from .neurons import Scope

LOGPROB_FLOOR = math.log(1e-12)
PAPER_TAU_PPL = 1.0
PAPER_TAU_ALIGN = 22.0

HEALTHY = "healthy"
EXPRESSIVE = "expressive_degradation"
PERCEPTUAL = "perceptual_failure"
COLLAPSE = "complete_collapse"
LABELS = (HEALTHY, EXPRESSIVE, PERCEPTUAL, COLLAPSE)


# -- perplexity -----------------------------------------------------------------


def perplexity_from_logprobs(logprobs) -> float:
    lp = np.maximum(np.asarray(logprobs, dtype=np.float64), LOGPROB_FLOOR)
    if lp.size == 0:
        raise ValueError("reference sequence is empty")
    return float(np.exp(-lp.mean()))


def perplexity(model_view, reference, image, prompt: str) -> float:
    """Teacher-force ``reference.tokens`` through ``model_view`` and return exp(-mean log p).

    Log-probabilities are floored at log(1e-12), so the result is finite.
    """
    tokens = reference.tokens if hasattr(reference, "tokens") else list(reference)
    if not tokens:
        raise ValueError("reference trace is empty")
    return perplexity_from_logprobs(teacher_forced_logprobs(model_view, image, prompt, tokens))


def delta_ppl(curr, prev) -> float:
    """Mean over paired samples of log10(curr / prev)."""
    curr = np.asarray(curr, dtype=np.float64)
    prev = np.asarray(prev, dtype=np.float64)
    if curr.shape != prev.shape:
        raise ValueError(f"perplexity lists differ in length: {curr.shape} vs {prev.shape}")
    if curr.size == 0:
        raise ValueError("empty perplexity lists")
    return float(np.mean(np.log10(curr) - np.log10(prev)))


# -- alignment scorer -----------------------------------------------------------


@dataclass
class ScorerConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 32
    mlp_dim: int = 64
    heads: int = 2
    embed_dim: int = 32
    seed: int = 0


class AlignmentScorer:
    """Two-tower joint embedding: a one-block ViT image tower and a bag-of-tokens text tower.

    Words outside the caption vocabulary share one ``<unk>`` embedding.
    """

    def __init__(self, config: ScorerConfig = None, weights: Optional[dict] = None):
        self.config = config or ScorerConfig()
        self.words = Tokenizer().words + ["<unk>"]
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.weights = self._init() if weights is None else weights

    def _init(self):
        c = self.config
        rng = np.random.default_rng(c.seed)
        n_patches = (c.image_size // c.patch_size) ** 2
        pdim = c.patch_size * c.patch_size * 3

        def mat(i, o):
            return rng.standard_normal((i, o)) / math.sqrt(i)

        return {
            "img.patch.w": mat(pdim, c.dim), "img.patch.b": np.zeros(c.dim),
            "img.pos": 0.1 * rng.standard_normal((n_patches, c.dim)),
            "img.ln1.g": np.ones(c.dim), "img.ln1.b": np.zeros(c.dim),
            "img.attn.wq": mat(c.dim, c.dim), "img.attn.wk": mat(c.dim, c.dim),
            "img.attn.wv": mat(c.dim, c.dim), "img.attn.wo": mat(c.dim, c.dim),
            "img.ln2.g": np.ones(c.dim), "img.ln2.b": np.zeros(c.dim),
            "img.fc1.w": mat(c.dim, c.mlp_dim), "img.fc1.b": np.zeros(c.mlp_dim),
            "img.fc2.w": mat(c.mlp_dim, c.dim), "img.fc2.b": np.zeros(c.dim),
            "img.out.w": mat(c.dim, c.embed_dim), "img.out.b": np.zeros(c.embed_dim),
            "txt.emb": rng.standard_normal((len(self.words), c.dim)),
            "txt.out.w": mat(c.dim, c.embed_dim), "txt.out.b": np.zeros(c.embed_dim),
        }

    def text_ids(self, text) -> list:
        if isinstance(text, str):
            return [self.word_index.get(w, len(self.words) - 1) for w in text.split()]
        return list(text)

    def _image_tower(self, g, p, images):
        c = self.config
        n_p = (c.image_size // c.patch_size) ** 2
        patches = np.concatenate([patchify(_pixels(im), c.patch_size) for im in images])
        h = g.affine(g.tensor(patches), p["img.patch.w"], p["img.patch.b"])
        h = g.add(h, g.embedding(p["img.pos"], np.tile(np.arange(n_p), len(images))))
        allowed = block_mask(len(images), n_p, causal=False)
        h = g.add(h, _attention(g, g.layernorm(h, p["img.ln1.g"], p["img.ln1.b"]), p, "img.attn",
                                c.heads, allowed))
        z = g.layernorm(h, p["img.ln2.g"], p["img.ln2.b"])
        h = g.add(h, g.affine(g.silu(g.affine(z, p["img.fc1.w"], p["img.fc1.b"])), p["img.fc2.w"],
                              p["img.fc2.b"]))
        pooled = g.concat_rows([g.mean_rows(g.embedding(h, np.arange(i * n_p, (i + 1) * n_p)))
                                for i in range(len(images))])
        return g.normalize_rows(g.affine(pooled, p["img.out.w"], p["img.out.b"]))

    def _text_tower(self, g, p, id_lists):
        pooled = g.concat_rows([g.mean_rows(g.embedding(p["txt.emb"], ids)) for ids in id_lists])
        return g.normalize_rows(g.affine(pooled, p["txt.out.w"], p["txt.out.b"]))

    def embed_images(self, images) -> np.ndarray:
        g = Graph(record=False)
        return self._image_tower(g, {k: g.tensor(v) for k, v in self.weights.items()}, images).data

    def embed_text(self, text) -> Optional[np.ndarray]:
        ids = self.text_ids(text)
        if not ids:
            return None
        g = Graph(record=False)
        return self._text_tower(g, {k: g.tensor(v) for k, v in self.weights.items()}, [ids]).data[0]

    def save(self, path) -> str:
        meta = {"kind": "AlignmentScorer", "config": self.config.__dict__}
        return io.write_arrays(path, self.weights, meta)

    @classmethod
    def load(cls, path) -> "AlignmentScorer":
        arrays, meta = io.read_arrays(path)
        if meta.get("kind") != "AlignmentScorer":
            raise io.FormatError(f"{path}: not an AlignmentScorer checkpoint")
        return cls(ScorerConfig(**meta["config"]), arrays)


def _pixels(image):
    arr = np.asarray(image)
    return arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)


def train_scorer(samples, config: ScorerConfig = None, steps: int = 300, lr: float = 3e-3,
                 batch_size: int = 16, n_garbage: int = 16, seed: int = 0):
    """Fit cosine similarities to 1 for matching captions and 0 for other captions
    and for random token bags. Returns ``(scorer, per-step losses)``."""
    scorer = AlignmentScorer(config)
    rng = np.random.default_rng(seed)
    captions = [scorer.text_ids(caption_for(c)) for c in CATEGORY_NAMES]
    content = [i for i, w in enumerate(scorer.words) if not w.startswith("<")]
    opt = Adam(scorer.weights, lr)
    cat_index = {c: i for i, c in enumerate(CATEGORY_NAMES)}
    curve = []
    for _ in range(steps):
        batch = [samples[i] for i in rng.integers(len(samples), size=batch_size)]
        garbage = [rng.choice(content, size=rng.integers(1, 7)).tolist() for _ in range(n_garbage)]
        g = Graph()
        p = {k: g.param(v) for k, v in scorer.weights.items()}
        img = scorer._image_tower(g, p, [s.image for s in batch])
        txt = scorer._text_tower(g, p, captions + garbage)
        sims = g.matmul(img, g.transpose(txt))
        target = np.zeros(sims.shape)
        for r, s in enumerate(batch):
            target[r, cat_index[s.category]] = 1.0
        diff = g.add(sims, g.tensor(-target))
        loss = g.scale(g.sum(g.mul(diff, diff)), 1.0 / diff.data.size)
        g.backward(loss)
        opt.step(scorer.weights, {k: t.grad for k, t in p.items()})
        curve.append(float(loss.data))
    return scorer, curve


def align_score(scorer: AlignmentScorer, image, text) -> Optional[float]:
    """100 x cosine(image embedding, text embedding); ``None`` for empty text."""
    t = scorer.embed_text(text)
    if t is None:
        return None
    v = scorer.embed_images([image])[0]
    return float(100.0 * cosine(v, t))


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def mean_alignment(scores) -> Optional[float]:
    """Mean over defined scores; ``None`` only when every score is undefined."""
    vals = [s for s in scores if s is not None]
    return float(np.mean(vals)) if vals else None


def chance_baseline(scorer: AlignmentScorer, samples, n_pairs: int = 200, seed: int = 0) -> float:
    """Mean score over ``n_pairs`` random image/caption pairings drawn from ``samples``."""
    rng = np.random.default_rng(seed)
    imgs = rng.integers(len(samples), size=n_pairs)
    caps = rng.integers(len(samples), size=n_pairs)
    img_emb = scorer.embed_images([samples[i].image for i in imgs])
    total = 0.0
    for r, j in enumerate(caps):
        total += 100.0 * cosine(img_emb[r], scorer.embed_text(samples[j].caption))
    return total / n_pairs


# -- thresholds and labels ------------------------------------------------------


@dataclass
class Thresholds:
    tau_ppl: float = PAPER_TAU_PPL
    tau_align: Optional[float] = None
    align_degraded: Optional[float] = None

    def __post_init__(self):
        if not (self.tau_ppl >= 0 and math.isfinite(self.tau_ppl)):
            raise ValueError("tau_ppl must be finite and non-negative")

    @property
    def calibrated(self):
        return self.tau_align is not None and self.align_degraded is not None


def calibrate_thresholds(chance: float, original: float, tau_ppl: float = PAPER_TAU_PPL) -> Thresholds:
    """Collapse threshold at chance level; stage-1 boundary one third of the way down."""
    return Thresholds(tau_ppl, chance, original - (original - chance) / 3.0)


@dataclass
class MetricPoint:
    k: int
    mean_ppl: float
    delta_ppl: float
    align_score: Optional[float]
    n_val: int
    label: Optional[str] = None
    ppls: list = field(default_factory=list, repr=False)
    texts: list = field(default_factory=list, repr=False)


def _below(value: Optional[float], bound: float) -> bool:
    # undefined alignment compares as the minimum
    return value is None or value <= bound


def collapse_check(point: MetricPoint, thresholds: Thresholds, scope) -> str:
    if not thresholds.calibrated:
        raise ValueError("thresholds are not calibrated")
    component = scope.component if isinstance(scope, Scope) else scope
    if point.delta_ppl >= thresholds.tau_ppl and _below(point.align_score, thresholds.tau_align):
        return COLLAPSE
    if point.delta_ppl < thresholds.tau_ppl and _below(point.align_score, thresholds.align_degraded):
        return EXPRESSIVE if component == "lm" else PERCEPTUAL
    return HEALTHY
