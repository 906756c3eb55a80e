"""Miniature LLaVA-style vision-language model.

Vision encoder (pre-LN ViT with a SiLU MLP) -> MLP bridge (projector, or the
same MLP addressed as ``qformer``) -> decoder-only language model whose FFN is
``down(silu(gate(x)) * up(x))``. The image enters the language model as a
prefix of projected patch embeddings and is attended causally.

Ablatable sites (``(component, layer, site)``):

* ``("vision_encoder", l, "mlp_out")`` - vision MLP hidden units after SiLU
* ``(bridge, 0, "mlp_out")`` - bridge hidden units after SiLU
* ``("lm", l, "gate_out")`` - gate projection output, before SiLU
* ``("lm", l, "down_out")`` - down projection output (FFN contribution)
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import io
from .autodiff import Graph, NumericalError, log_softmax
from .data import CATEGORIES, PROMPT
from .neurons import MaskSet, NeuronRegistry

BOS, EOS = "<bos>", "<eos>"


class TrainingError(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    vision_layers: int = 2
    vision_dim: int = 32
    vision_mlp_dim: int = 64
    vision_heads: int = 2
    projector_dim: int = 64
    bridge: str = "projector"
    lm_layers: int = 4
    lm_dim: int = 64
    ffn_dim: int = 172
    lm_heads: int = 2
    vocab_size: int = 32
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.ffn_dim <= self.lm_dim:
            raise ValueError("ffn_dim must exceed lm_dim")
        if self.vision_dim % self.vision_heads or self.lm_dim % self.lm_heads:
            raise ValueError("model widths must be divisible by their head counts")
        if self.bridge not in ("projector", "qformer"):
            raise ValueError("bridge must be 'projector' or 'qformer'")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * 3

    def to_dict(self):
        return asdict(self)


class Tokenizer:
    """Word-level table over the prompt and caption vocabulary."""

    def __init__(self, vocab_size: Optional[int] = None):
        words = [BOS, EOS] + PROMPT.split() + ["a"]
        words += [c[1] for c in CATEGORIES] + [c[0] for c in CATEGORIES]
        vocab_size = len(words) if vocab_size is None else vocab_size
        if vocab_size < len(words):
            raise ValueError(f"vocab_size {vocab_size} < {len(words)} table entries")
        self.words = words
        self.vocab_size = vocab_size
        self.index = {w: i for i, w in enumerate(words)}
        self.bos = self.index[BOS]
        self.eos = self.index[EOS]

    def encode(self, text: str) -> list:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as e:
            raise ValueError(f"token {e.args[0]!r} is not in the vocabulary") from None

    def word(self, i: int) -> str:
        return self.words[i] if i < len(self.words) else f"<unused{i}>"

    def decode(self, ids) -> str:
        return " ".join(self.word(int(i)) for i in ids)


def _init_weights(cfg: ModelConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    w = {}

    def mat(name, fan_in, fan_out):
        w[name] = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)

    def ln(prefix, d):
        w[prefix + ".g"] = np.ones(d)
        w[prefix + ".b"] = np.zeros(d)

    vd, d = cfg.vision_dim, cfg.lm_dim
    mat("vis.patch.w", cfg.patch_dim, vd)
    w["vis.patch.b"] = np.zeros(vd)
    w["vis.pos"] = 0.1 * rng.standard_normal((cfg.n_patches, vd))
    for l in range(cfg.vision_layers):
        p = f"vis.{l}"
        ln(p + ".ln1", vd)
        for m in ("wq", "wk", "wv", "wo"):
            mat(f"{p}.attn.{m}", vd, vd)
        ln(p + ".ln2", vd)
        mat(p + ".fc1.w", vd, cfg.vision_mlp_dim)
        w[p + ".fc1.b"] = np.zeros(cfg.vision_mlp_dim)
        mat(p + ".fc2.w", cfg.vision_mlp_dim, vd)
        w[p + ".fc2.b"] = np.zeros(vd)
    ln("vis.lnf", vd)
    mat("proj.fc1.w", vd, cfg.projector_dim)
    w["proj.fc1.b"] = np.zeros(cfg.projector_dim)
    mat("proj.fc2.w", cfg.projector_dim, d)
    w["proj.fc2.b"] = np.zeros(d)
    w["lm.tok"] = 0.1 * rng.standard_normal((cfg.vocab_size, d))
    w["lm.pos"] = 0.1 * rng.standard_normal((cfg.max_seq_len, d))
    for l in range(cfg.lm_layers):
        p = f"lm.{l}"
        ln(p + ".ln1", d)
        for m in ("wq", "wk", "wv", "wo"):
            mat(f"{p}.attn.{m}", d, d)
        ln(p + ".ln2", d)
        mat(p + ".gate", d, cfg.ffn_dim)
        mat(p + ".up", d, cfg.ffn_dim)
        mat(p + ".down", cfg.ffn_dim, d)
    ln("lm.lnf", d)
    mat("lm.head.w", d, cfg.vocab_size)
    w["lm.head.b"] = np.zeros(cfg.vocab_size)
    return w


class ToyLVLM:
    def __init__(self, config: ModelConfig, weights: Optional[dict] = None):
        self.config = config
        self.weights = _init_weights(config) if weights is None else weights
        self.tokenizer = Tokenizer(config.vocab_size)

    def registry(self) -> NeuronRegistry:
        c = self.config
        widths = {(c.bridge, 0, "mlp_out"): c.projector_dim}
        for l in range(c.vision_layers):
            widths[("vision_encoder", l, "mlp_out")] = c.vision_mlp_dim
        for l in range(c.lm_layers):
            widths[("lm", l, "gate_out")] = c.ffn_dim
            widths[("lm", l, "down_out")] = c.lm_dim
        return NeuronRegistry(widths)

    def content_hash(self) -> str:
        h = hashlib.sha256(io.canonical_json(self.config.to_dict()).encode())
        for name in self.weights:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ToyLVLM":
        return ToyLVLM(copy.deepcopy(self.config), {k: v.copy() for k, v in self.weights.items()})

    def save(self, path) -> str:
        meta = {"kind": "ToyLVLM", "config": self.config.to_dict(), "model_hash": self.content_hash()}
        return io.write_arrays(path, self.weights, meta)

    @classmethod
    def load(cls, path) -> "ToyLVLM":
        arrays, meta = io.read_arrays(path)
        if meta.get("kind") != "ToyLVLM":
            raise io.FormatError(f"{path}: not a ToyLVLM checkpoint")
        model = cls(ModelConfig(**meta["config"]), arrays)
        if model.content_hash() != meta["model_hash"]:
            raise io.FormatError(f"{path}: model hash mismatch")
        return model


class MaskedView:
    """A model with a mask applied at every forward pass. Weights are shared, never edited."""

    def __init__(self, model: ToyLVLM, mask: MaskSet):
        self.model = model
        self.mask = mask

    @property
    def config(self):
        return self.model.config

    @property
    def tokenizer(self):
        return self.model.tokenizer


def resolve(model, mask=None):
    """Split a model or masked view into ``(ToyLVLM, MaskSet)``."""
    base_mask = MaskSet()
    while isinstance(model, MaskedView):
        base_mask = base_mask | model.mask
        model = model.model
    if mask is not None:
        base_mask = base_mask | mask
    return model, base_mask


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """``(H, W, 3)`` -> ``(n_patches, patch*patch*3)``, patches in row-major order."""
    h, w, c = pixels.shape
    x = pixels.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(-1, patch * patch * c)


def block_mask(n_blocks: int, size: int, causal: bool) -> np.ndarray:
    block = np.tril(np.ones((size, size), dtype=bool)) if causal else np.ones((size, size), dtype=bool)
    return np.kron(np.eye(n_blocks, dtype=bool), block)


def _attention(g, x, p, prefix, heads, allowed):
    d = x.shape[1]
    dh = d // heads
    q = g.affine(x, p[prefix + ".wq"])
    k = g.affine(x, p[prefix + ".wk"])
    v = g.affine(x, p[prefix + ".wv"])
    outs = []
    for h in range(heads):
        sl = (h * dh, (h + 1) * dh)
        qh, kh, vh = (g.slice_cols(t, *sl) if heads > 1 else t for t in (q, k, v))
        s = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / math.sqrt(dh))
        outs.append(g.matmul(g.softmax(s, allowed), vh))
    o = outs[0] if heads == 1 else g.concat_cols(outs)
    return g.affine(o, p[prefix + ".wo"])


def _site(g, t, key, mask_sites, taps):
    if key in mask_sites:
        t = g.mask_cols(t, mask_sites[key])
    if taps is not None:
        taps[key] = t
    return t


def forward(model, g: Graph, images, token_ids, mask: Optional[MaskSet] = None,
            taps: Optional[dict] = None, params: Optional[dict] = None, image_requires_grad: bool = False):
    """Run a batch of equal-length sequences; return logits ``(B*T, vocab)``.

    Row ``i*T + t`` holds sample ``i`` at sequence position ``t``; the first
    ``n_patches`` positions are the image prefix. ``taps`` (if given) is filled
    with every ablatable site plus residual-stream states keyed
    ``(component, layer, "resid")`` and ``("lm", -1, "prefix")``.
    """
    model, mask = resolve(model, mask)
    cfg = model.config
    mask_sites = mask.by_site()
    if params is None:
        params = {k: g.tensor(v) for k, v in model.weights.items()}
    p = params
    n = len(images)
    if n == 0 or len(token_ids) != n or len({len(t) for t in token_ids}) != 1:
        raise ValueError("need a nonempty batch of equal-length token sequences")
    n_txt = len(token_ids[0])
    n_p = cfg.n_patches
    seq = n_p + n_txt
    if seq > cfg.max_seq_len:
        raise ValueError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")

    patches = np.concatenate([patchify(np.asarray(im, dtype=np.float64), cfg.patch_size) for im in images])
    h = g.affine(g.tensor(patches, requires_grad=image_requires_grad), p["vis.patch.w"], p["vis.patch.b"])
    h = g.add(h, g.embedding(p["vis.pos"], np.tile(np.arange(n_p), n)))
    allowed = block_mask(n, n_p, causal=False)
    for l in range(cfg.vision_layers):
        pre = f"vis.{l}"
        a = _attention(g, g.layernorm(h, p[pre + ".ln1.g"], p[pre + ".ln1.b"]), p, pre + ".attn",
                       cfg.vision_heads, allowed)
        h = g.add(h, a)
        z = g.layernorm(h, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
        m = g.silu(g.affine(z, p[pre + ".fc1.w"], p[pre + ".fc1.b"]))
        m = _site(g, m, ("vision_encoder", l, "mlp_out"), mask_sites, taps)
        h = g.add(h, g.affine(m, p[pre + ".fc2.w"], p[pre + ".fc2.b"]))
        if taps is not None:
            taps[("vision_encoder", l, "resid")] = h
    h = g.layernorm(h, p["vis.lnf.g"], p["vis.lnf.b"])
    m = g.silu(g.affine(h, p["proj.fc1.w"], p["proj.fc1.b"]))
    m = _site(g, m, (cfg.bridge, 0, "mlp_out"), mask_sites, taps)
    img_emb = g.affine(m, p["proj.fc2.w"], p["proj.fc2.b"])

    txt_emb = g.embedding(p["lm.tok"], np.concatenate([np.asarray(t, dtype=np.int64) for t in token_ids]))
    # gather rows into per-sample [image prefix; text] order
    order = np.concatenate([np.concatenate([np.arange(i * n_p, (i + 1) * n_p),
                                            n * n_p + np.arange(i * n_txt, (i + 1) * n_txt)])
                            for i in range(n)])
    x = g.embedding(g.concat_rows([img_emb, txt_emb]), order)
    x = g.add(x, g.embedding(p["lm.pos"], np.tile(np.arange(seq), n)))
    if taps is not None:
        taps[("lm", -1, "prefix")] = x
    allowed = block_mask(n, seq, causal=True)
    for l in range(cfg.lm_layers):
        pre = f"lm.{l}"
        a = _attention(g, g.layernorm(x, p[pre + ".ln1.g"], p[pre + ".ln1.b"]), p, pre + ".attn",
                       cfg.lm_heads, allowed)
        x = g.add(x, a)
        z = g.layernorm(x, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
        gate = _site(g, g.affine(z, p[pre + ".gate"]), ("lm", l, "gate_out"), mask_sites, taps)
        act = g.mul(g.silu(gate), g.affine(z, p[pre + ".up"]))
        down = _site(g, g.affine(act, p[pre + ".down"]), ("lm", l, "down_out"), mask_sites, taps)
        x = g.add(x, down)
        if taps is not None:
            taps[("lm", l, "resid")] = x
    x = g.layernorm(x, p["lm.lnf.g"], p["lm.lnf.b"])
    return g.affine(x, p["lm.head.w"], p["lm.head.b"])


@dataclass
class GenerationTrace:
    tokens: list  # generated ids, including a terminal EOS when produced
    logprobs: list  # log-prob of each chosen token
    step_logprobs: np.ndarray  # (steps, vocab) full log-distributions
    text: str  # decoded tokens, EOS excluded
    eos: int = 1

    @property
    def content_tokens(self):
        return [t for t in self.tokens if t != self.eos]


def prompt_ids(model, prompt: str) -> list:
    tok = model.tokenizer
    return [tok.bos] + tok.encode(prompt)


def generate_greedy(model, image, prompt: str = PROMPT, mask: Optional[MaskSet] = None,
                    max_len: int = 32) -> GenerationTrace:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    base, mask = resolve(model, mask)
    tok = base.tokenizer
    ids = prompt_ids(base, prompt)
    pixels = _as_pixels(image)
    out, lps, dists = [], [], []
    for _ in range(max_len):
        logits = forward(base, Graph(record=False), [pixels], [ids + out], mask=mask).data
        lp = log_softmax(logits[-1:])[0]
        t = int(np.argmax(lp))
        out.append(t)
        lps.append(float(lp[t]))
        dists.append(lp)
        if t == tok.eos:
            break
    text = tok.decode([t for t in out if t != tok.eos])
    return GenerationTrace(out, lps, np.asarray(dists), text, eos=tok.eos)


def teacher_forced_logprobs(model, image, prompt: str, tokens, mask: Optional[MaskSet] = None) -> np.ndarray:
    """Log-probabilities of ``tokens`` fed one after another after ``(image, prompt)``."""
    base, mask = resolve(model, mask)
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("reference sequence is empty")
    ids = prompt_ids(base, prompt)
    logits = forward(base, Graph(record=False), [_as_pixels(image)], [ids + tokens[:-1]], mask=mask).data
    start = base.config.n_patches + len(ids) - 1
    lp = log_softmax(logits[start:start + len(tokens)])
    return lp[np.arange(len(tokens)), tokens]


def _as_pixels(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


# -- training -----------------------------------------------------------------


class Adam:
    def __init__(self, weights: dict, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0

    def step(self, weights: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            weights[k] = weights[k] - lr * mhat / (np.sqrt(vhat) + self.eps)


def caption_batch(model, samples, prompt: str):
    """Teacher-forcing inputs and per-row targets/weights for a caption batch."""
    tok = model.tokenizer
    ids = prompt_ids(model, prompt)
    caps = [tok.encode(s.caption) for s in samples]
    if len({len(c) for c in caps}) != 1:
        raise ValueError("captions in a batch must have equal token length")
    seq = model.config.n_patches + len(ids) + len(caps[0])
    targets = np.zeros(len(samples) * seq, dtype=np.int64)
    weights = np.zeros(len(samples) * seq)
    inputs = []
    for i, cap in enumerate(caps):
        inputs.append(ids + cap)
        tgt = cap + [tok.eos]
        start = i * seq + model.config.n_patches + len(ids) - 1
        targets[start:start + len(tgt)] = tgt
        weights[start:start + len(tgt)] = 1.0
    return inputs, targets, weights


def caption_loss_and_grads(model, samples, prompt: str = PROMPT):
    g = Graph()
    params = {k: g.param(v, name=k) for k, v in model.weights.items()}
    inputs, targets, weights = caption_batch(model, samples, prompt)
    logits = forward(model, g, [s.pixels for s in samples], inputs, params=params)
    loss = g.cross_entropy(logits, targets, weights)
    g.backward(loss)
    return float(loss.data), {k: t.grad for k, t in params.items()}


def train(model: ToyLVLM, samples, epochs: int, lr: float, batch_size: int = 16, seed: int = 0,
          prompt: str = PROMPT, clip: float = 1.0):
    """Adam on teacher-forced caption cross-entropy. Returns ``(trained copy, per-step losses)``."""
    if not samples:
        raise ValueError("training set is empty")
    model = model.copy()
    opt = Adam(model.weights, lr)
    rng = np.random.default_rng(seed)
    total = epochs * math.ceil(len(samples) / batch_size)
    curve, step = [], 0
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for s in range(0, len(samples), batch_size):
            batch = [samples[i] for i in order[s:s + batch_size]]
            try:
                loss, grads = caption_loss_and_grads(model, batch, prompt)
            except NumericalError as e:
                raise TrainingError(step, f"divergence ({e})") from e
            if not math.isfinite(loss):
                raise TrainingError(step, "loss is not finite")
            norm = math.sqrt(sum(float((gr * gr).sum()) for gr in grads.values()))
            if norm > clip:
                grads = {k: gr * (clip / norm) for k, gr in grads.items()}
            # cosine decay to 10% of the base rate
            frac = step / max(total - 1, 1)
            opt.step(model.weights, grads, lr=lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac))))
            curve.append(loss)
            step += 1
    return model, curve


def caption_accuracy(model, samples, prompt: str = PROMPT, max_len: int = 8) -> float:
    hits = sum(generate_greedy(model, s.image, prompt, max_len=max_len).text == s.caption for s in samples)
    return hits / len(samples)
