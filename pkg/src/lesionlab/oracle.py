"""Independent brute-force verifiers for the main pipeline.

Nothing here calls the tape forward pass, the tap mechanism or the scoring
code. The reference forward is a straight-line numpy transcription of the
model that writes out the same floating-point expressions in the same order,
so its hidden states can be compared for exact equality.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .autodiff import OPS, Graph

# -- reference forward --------------------------------------------------------


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _silu(x):
    return x * expit(x)


def _softmax(s, allowed):
    s = np.where(allowed, s, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _attend(x, w, prefix, heads, allowed):
    d = x.shape[1]
    dh = d // heads
    q = x @ w[prefix + ".wq"]
    k = x @ w[prefix + ".wk"]
    v = x @ w[prefix + ".wv"]
    outs = []
    for h in range(heads):
        a, b = h * dh, (h + 1) * dh
        qh = np.ascontiguousarray(q[:, a:b]) if heads > 1 else q
        kh = np.ascontiguousarray(k[:, a:b]) if heads > 1 else k
        vh = np.ascontiguousarray(v[:, a:b]) if heads > 1 else v
        s = (qh @ np.ascontiguousarray(kh.T)) * (1.0 / math.sqrt(dh))
        outs.append(_softmax(s, allowed) @ vh)
    o = outs[0] if heads == 1 else np.concatenate(outs, axis=1)
    return o @ w[prefix + ".wo"]


def _patches(pixels, p):
    h, wd, c = pixels.shape
    out = np.empty(((h // p) * (wd // p), p * p * c))
    i = 0
    for r in range(h // p):
        for col in range(wd // p):
            out[i] = pixels[r * p:(r + 1) * p, col * p:(col + 1) * p, :].reshape(-1)
            i += 1
    return out


Edit = Callable[[tuple, np.ndarray], np.ndarray]


def reference_forward(model, pixels, token_ids, edit: Optional[Edit] = None) -> dict:
    """Run one sample and return every hidden state keyed like the tap dictionary.

    ``edit(key, array)`` may rewrite any site array (``mlp_out``, ``gate_out``,
    ``down_out``) before it flows on; ``edit(("lm", l, "ffn"), delta)`` may
    rewrite the FFN residual update. ``"logits"`` holds the output.
    """
    cfg = model.config
    w = model.weights
    edit = edit or (lambda key, a: a)
    states = {}
    pix = np.asarray(pixels, dtype=np.float64)
    n_p = cfg.n_patches
    h = _patches(pix, cfg.patch_size) @ w["vis.patch.w"] + w["vis.patch.b"]
    h = h + w["vis.pos"][np.arange(n_p)]
    full = np.ones((n_p, n_p), dtype=bool)
    for l in range(cfg.vision_layers):
        pre = f"vis.{l}"
        h = h + _attend(_ln(h, w[pre + ".ln1.g"], w[pre + ".ln1.b"]), w, pre + ".attn", cfg.vision_heads, full)
        z = _ln(h, w[pre + ".ln2.g"], w[pre + ".ln2.b"])
        m = edit(("vision_encoder", l, "mlp_out"), _silu(z @ w[pre + ".fc1.w"] + w[pre + ".fc1.b"]))
        states[("vision_encoder", l, "mlp_out")] = m
        h = h + (m @ w[pre + ".fc2.w"] + w[pre + ".fc2.b"])
        states[("vision_encoder", l, "resid")] = h
    h = _ln(h, w["vis.lnf.g"], w["vis.lnf.b"])
    m = edit((cfg.bridge, 0, "mlp_out"), _silu(h @ w["proj.fc1.w"] + w["proj.fc1.b"]))
    states[(cfg.bridge, 0, "mlp_out")] = m
    img = m @ w["proj.fc2.w"] + w["proj.fc2.b"]

    ids = np.asarray(token_ids, dtype=np.int64)
    seq = n_p + len(ids)
    x = np.concatenate([img, w["lm.tok"][ids]], axis=0)
    x = x + w["lm.pos"][np.arange(seq)]
    states[("lm", -1, "prefix")] = x
    causal = np.tril(np.ones((seq, seq), dtype=bool))
    for l in range(cfg.lm_layers):
        pre = f"lm.{l}"
        x = x + _attend(_ln(x, w[pre + ".ln1.g"], w[pre + ".ln1.b"]), w, pre + ".attn", cfg.lm_heads, causal)
        z = _ln(x, w[pre + ".ln2.g"], w[pre + ".ln2.b"])
        gate = edit(("lm", l, "gate_out"), z @ w[pre + ".gate"])
        states[("lm", l, "gate_out")] = gate
        act = _silu(gate) * (z @ w[pre + ".up"])
        down = edit(("lm", l, "down_out"), act @ w[pre + ".down"])
        states[("lm", l, "down_out")] = down
        x = x + edit(("lm", l, "ffn"), down)
        states[("lm", l, "resid")] = x
    x = _ln(x, w["lm.lnf.g"], w["lm.lnf.b"])
    states["logits"] = x @ w["lm.head.w"] + w["lm.head.b"]
    return states


def zero_channels(spec: dict) -> Edit:
    """Edit hook that zeroes ``spec[key]`` channels at each listed site."""
    def edit(key, a):
        cols = spec.get(key)
        if cols is None or len(cols) == 0:
            return a
        a = a.copy()
        for c in cols:
            a[:, c] = 0.0
        return a
    return edit


def skip_ffn(layer: int) -> Edit:
    """Edit hook that drops the FFN update of one language-model layer."""
    def edit(key, a):
        return np.zeros_like(a) if key == ("lm", layer, "ffn") else a
    return edit


def _pixels(image):
    a = np.asarray(image)
    return a.astype(np.float64) / 255.0 if a.dtype == np.uint8 else a.astype(np.float64)


def _prompt(model, prompt):
    tok = model.tokenizer
    return [tok.bos] + tok.encode(prompt)


def direct_intervention_equiv(model, mask, inputs, edits: Optional[dict] = None) -> bool:
    """True iff tap-based masking and hand-edited hidden states agree exactly.

    ``inputs`` is a list of ``(image, token_ids)``. ``edits`` maps site keys to
    channel lists; by default it is derived from ``mask``.
    """
    from .model import forward  # the path under test

    if edits is None:
        edits = {}
        for nid in mask.ids:
            edits.setdefault((nid.component, nid.layer, nid.site), []).append(nid.channel)
    hook = zero_channels(edits)
    for image, ids in inputs:
        taps: dict = {}
        logits = forward(model, Graph(record=False), [_pixels(image)], [list(ids)], mask=mask, taps=taps)
        ref = reference_forward(model, _pixels(image), ids, hook)
        if not np.array_equal(logits.data, ref["logits"]):
            return False
        for key, arr in ref.items():
            if key == "logits":
                continue
            if not np.array_equal(taps[key].data, arr):
                return False
    return True


# -- perplexity, generation and importance recomputation -----------------------


def standalone_perplexity(logprobs, floor: float = 1e-12) -> float:
    """exp of the mean negative log-probability, accumulated in a plain loop."""
    total = 0.0
    n = 0
    lo = math.log(floor)
    for lp in logprobs:
        total += -max(float(lp), lo)
        n += 1
    return math.exp(total / n)


def _log_softmax_row(row):
    m = max(row)
    s = sum(math.exp(v - m) for v in row)
    return [v - m - math.log(s) for v in row]


def reference_generate(model, image, prompt, edit=None, max_len=8) -> list:
    pix = _pixels(image)
    ids = _prompt(model, prompt)
    out = []
    for _ in range(max_len):
        row = reference_forward(model, pix, ids + out, edit)["logits"][-1]
        t = int(np.argmax(row))
        out.append(t)
        if t == model.tokenizer.eos:
            break
    return out


def reference_logprobs(model, image, prompt, tokens, edit=None) -> list:
    ids = _prompt(model, prompt)
    logits = reference_forward(model, _pixels(image), ids + list(tokens[:-1]), edit)["logits"]
    start = model.config.n_patches + len(ids) - 1
    return [_log_softmax_row(list(logits[start + i]))[t] for i, t in enumerate(tokens)]


def naive_importance(activations, gradients, alpha: float) -> list:
    """Per-neuron mean of ``|g|**alpha * |a|`` by explicit double loop."""
    acts = np.asarray(activations)
    out = []
    for n in range(acts.shape[0]):
        total = 0.0
        for i in range(acts.shape[1]):
            g = 1.0 if alpha == 0 else abs(float(gradients[n][i])) ** alpha
            total += g * abs(float(acts[n][i]))
        out.append(total / acts.shape[1])
    return out


# -- finite-difference gradient checking ---------------------------------------


@dataclass
class GradCheckReport:
    errors: dict  # op kind -> max relative error seen
    tolerance: float
    counts: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return sorted(k for k, e in self.errors.items() if not e < self.tolerance)

    @property
    def ok(self) -> bool:
        return not self.failed


def _rel_err(analytic, numeric, floor):
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic)) if analytic.size else 0.0,
                np.max(np.abs(numeric)) if numeric.size else 0.0, floor)
    return float(diff / scale)


def grad_check(graph: Graph, tolerance: float = 1e-4, h: float = 1e-5, floor: float = 1e-7,
               seed: int = 0) -> GradCheckReport:
    """Check every recorded node's backward rule by central differences.

    For each node the probe is ``sum(r * forward(inputs))`` with a random
    weighting ``r``; its numerical gradient with respect to each input is
    compared with ``backward(r, ...)``. The error per input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``.
    """
    if not graph.record:
        raise ValueError("grad_check needs a recorded graph")
    rng = np.random.default_rng(seed)
    errors: dict = {}
    counts: dict = {}
    for node in graph.nodes:
        if not node.inputs:
            continue
        op = OPS[node.kind]
        arrays = [t.data.copy() for t in node.inputs]
        out = op.forward(*arrays, **node.attrs)
        r = rng.standard_normal(out.shape)
        analytic = op.backward(r, out, tuple(arrays), **node.attrs)
        worst = 0.0
        for j, a in enumerate(arrays):
            num = np.zeros_like(a)
            flat = a.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = float(np.sum(r * op.forward(*arrays, **node.attrs)))
                flat[idx] = orig - h
                fm = float(np.sum(r * op.forward(*arrays, **node.attrs)))
                flat[idx] = orig
                num.reshape(-1)[idx] = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(np.asarray(analytic[j]), num, floor))
        errors[node.kind] = max(errors.get(node.kind, 0.0), worst)
        counts[node.kind] = counts.get(node.kind, 0) + 1
    return GradCheckReport(errors, tolerance, counts)


def random_op_graph(rng) -> Graph:
    """A small random graph that applies every registered op kind at least once."""
    g = Graph()
    n, d, e = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(3, 6))

    def p(*shape):
        return g.param(rng.standard_normal(shape))

    x, w, b = p(n, d), p(d, e), p(e)
    a = g.affine(x, w, b)
    a2 = g.affine(x, w)
    m = g.matmul(a, g.transpose(a2))
    # keep logits moderate: a saturated softmax has gradients below the error floor
    s = g.scale(m, float(rng.uniform(0.1, 0.5)) / (1.0 + float(np.max(np.abs(m.data)))))
    allowed = np.tril(np.ones((n, n), dtype=bool))
    sm = g.softmax(s, allowed)
    h = g.add(g.matmul(sm, a), g.mul(a, a2))
    h = g.silu(h)
    # a spread-out input keeps layernorm away from near-constant rows
    ln = g.layernorm(g.add(h, p(n, e)), p(e), p(e))
    emb = g.embedding(p(n + 1, e), rng.integers(0, n + 1, size=n))
    both = g.concat_rows([ln, emb])
    cols = g.concat_cols([both, g.mask_cols(both, [0])])
    part = g.slice_cols(cols, 1, cols.shape[1])
    nrm = g.normalize_rows(part)
    pooled = g.mean_rows(nrm)
    logits = p(n, e + 1)
    ce = g.cross_entropy(logits, rng.integers(0, e + 1, size=n), rng.uniform(0.5, 1.5, size=n))
    g.add(g.sum(pooled), ce)
    return g


def check_all_ops(n_instances: int = 100, tolerance: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Grad-check ``n_instances`` random graphs; fails if any op kind goes untested."""
    rng = np.random.default_rng(seed)
    errors: dict = {}
    counts: dict = {}
    for i in range(n_instances):
        rep = grad_check(random_op_graph(rng), tolerance, seed=seed + i)
        for k, v in rep.errors.items():
            errors[k] = max(errors.get(k, 0.0), v)
            counts[k] = counts.get(k, 0) + rep.counts[k]
    for kind in OPS:
        errors.setdefault(kind, math.inf)
    return GradCheckReport(errors, tolerance, counts)


# -- exhaustive minimal collapsing subset ---------------------------------------


@dataclass
class OracleBudget:
    max_subset_size: int = 3
    max_scope_size: int = 16
    node_limit: int = 1000

    def __post_init__(self):
        if not 0 <= self.max_subset_size <= 3:
            raise ValueError("max_subset_size must lie in [0, 3]")
        if not 1 <= self.max_scope_size <= 16:
            raise ValueError("max_scope_size must lie in [1, 16]")


class OracleAbort(RuntimeError):
    def __init__(self, message, visited: int, last=None):
        super().__init__(f"{message} (visited {visited} subsets, last {last})")
        self.visited = visited
        self.last = last


@dataclass
class OracleResult:
    subset: Optional[list]  # NeuronIds of the first satisfying subset, None when not found
    visited: int
    mean_delta: Optional[float] = None
    align: Optional[float] = None

    @property
    def found(self) -> bool:
        return self.subset is not None


def _align(scorer, image, tokens, tok):
    words = [tok.word(t) for t in tokens if t != tok.eos]
    if not words:
        return None
    u = scorer.embed_images([image])[0]
    v = scorer.embed_text(" ".join(words))
    return 100.0 * float(u @ v) / (math.sqrt(float(u @ u)) * math.sqrt(float(v @ v)))


def exhaustive_min_subset(model, neurons, valset, thresholds, budget: OracleBudget, scorer,
                          prompt: str, max_len: int = 8) -> OracleResult:
    """Visit subsets of ``neurons`` by size, then lexicographically; return the first that collapses.

    A subset collapses when its mean log10 perplexity ratio against the
    unmasked model reaches ``tau_ppl`` and its mean alignment (undefined
    scores skipped; all undefined counts as the minimum) is at most
    ``tau_align``. Perplexity is scored on the unmasked model's outputs.
    """
    neurons = sorted(neurons)
    if len(neurons) > budget.max_scope_size:
        raise OracleAbort(f"scope of {len(neurons)} exceeds max_scope_size {budget.max_scope_size}", 0)
    if thresholds.tau_align is None:
        raise ValueError("thresholds must be calibrated")
    tok = model.tokenizer
    refs = [reference_generate(model, s.image, prompt, None, max_len) for s in valset]
    base = [standalone_perplexity(reference_logprobs(model, s.image, prompt, r)) for s, r in zip(valset, refs)]
    visited = 0
    for size in range(0, budget.max_subset_size + 1):
        for subset in itertools.combinations(neurons, size):
            if visited >= budget.node_limit:
                raise OracleAbort("node limit reached", visited, subset)
            visited += 1
            spec: dict = {}
            for nid in subset:
                spec.setdefault((nid.component, nid.layer, nid.site), []).append(nid.channel)
            hook = zero_channels(spec)
            deltas, aligns = [], []
            for s, r, b in zip(valset, refs, base):
                ppl = standalone_perplexity(reference_logprobs(model, s.image, prompt, r, hook))
                deltas.append(math.log10(ppl) - math.log10(b))
                gen = reference_generate(model, s.image, prompt, hook, max_len)
                aligns.append(_align(scorer, s.image, gen, tok))
            delta = sum(deltas) / len(deltas)
            defined = [a for a in aligns if a is not None]
            align = sum(defined) / len(defined) if defined else None
            if delta >= thresholds.tau_ppl and (align is None or align <= thresholds.tau_align):
                return OracleResult(list(subset), visited, delta, align)
    return OracleResult(None, visited)
