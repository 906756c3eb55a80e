"""Progressive top-k masking search for the collapse point, plus random-ablation controls."""

from __future__ import annotations

import csv
import io as _io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .data import PROMPT
from .instrument import apply_mask
from .metrics import (COLLAPSE, EXPRESSIVE, PERCEPTUAL, MetricPoint, Thresholds, align_score,
                      calibrate_thresholds, chance_baseline, collapse_check, delta_ppl,
                      mean_alignment, perplexity_from_logprobs)
from .model import generate_greedy, resolve, teacher_forced_logprobs
from .neurons import MaskSet, Scope
from .scoring import ImportanceTable, top_k

PPL_MODES = ("reference_trace", "self_trace")


class SearchInputError(ValueError):
    pass


@dataclass
class SearchConfig:
    scope: Scope
    k_max: int
    delta_k: int = 1
    thresholds: Thresholds = field(default_factory=Thresholds)
    ppl_mode: str = "reference_trace"
    seed: int = 0
    overshoot: int = 0
    prompt: str = PROMPT
    max_len: int = 8  # generation budget per validation sample

    def __post_init__(self):
        if self.delta_k < 1:
            raise SearchInputError("delta_k must be >= 1")
        if self.k_max < 1:
            raise SearchInputError("k_max must be >= 1")
        if self.ppl_mode not in PPL_MODES:
            raise SearchInputError(f"ppl_mode must be one of {PPL_MODES}, got {self.ppl_mode!r}")
        if self.overshoot < 0:
            raise SearchInputError("overshoot must be >= 0")

    def to_dict(self) -> dict:
        t = self.thresholds
        return {
            "scope": self.scope.to_dict(), "k_max": self.k_max, "delta_k": self.delta_k,
            "thresholds": {"tau_ppl": t.tau_ppl, "tau_align": t.tau_align, "align_degraded": t.align_degraded},
            "ppl_mode": self.ppl_mode, "seed": self.seed, "overshoot": self.overshoot,
            "prompt": self.prompt, "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        d["scope"] = Scope.from_dict(d["scope"])
        d["thresholds"] = Thresholds(**d["thresholds"])
        return cls(**d)

    def config_hash(self) -> str:
        return io.sha256_bytes(io.canonical_json(self.to_dict()).encode())


@dataclass
class CollapseReport:
    trajectory: list  # MetricPoint per step, k strictly increasing by delta_k
    k_star: Optional[int]
    final_mask: MaskSet
    stage_boundaries: tuple  # (first stage-1 k or None, k_star or None)
    baseline: MetricPoint
    config_hash: str
    thresholds: Thresholds
    masks: dict = field(default_factory=dict, repr=False)

    @property
    def found(self) -> bool:
        return self.k_star is not None

    def point_at(self, k: int) -> MetricPoint:
        if k == 0:
            return self.baseline
        for p in self.trajectory:
            if p.k == k:
                return p
        raise KeyError(k)

    def to_dict(self) -> dict:
        t = self.thresholds
        return {
            "config_hash": self.config_hash,
            "k_star": self.k_star,
            "stage_boundaries": list(self.stage_boundaries),
            "thresholds": {"tau_ppl": t.tau_ppl, "tau_align": t.tau_align, "align_degraded": t.align_degraded},
            "baseline": _point_dict(self.baseline),
            "trajectory": [_point_dict(p) for p in self.trajectory],
            "final_mask": self.final_mask.to_text().splitlines(),
            "final_mask_sha256": self.final_mask.content_hash(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CollapseReport":
        return cls(
            trajectory=[_point_from(p) for p in d["trajectory"]],
            k_star=d["k_star"],
            final_mask=MaskSet.from_text("\n".join(d["final_mask"])),
            stage_boundaries=tuple(d["stage_boundaries"]),
            baseline=_point_from(d["baseline"]),
            config_hash=d["config_hash"],
            thresholds=Thresholds(**d["thresholds"]),
        )


def _point_dict(p: MetricPoint) -> dict:
    return {"k": p.k, "mean_ppl": p.mean_ppl, "delta_ppl": p.delta_ppl, "align_score": p.align_score,
            "n_val": p.n_val, "label": p.label, "ppls": list(p.ppls), "texts": list(p.texts)}


def _point_from(d: dict) -> MetricPoint:
    return MetricPoint(d["k"], d["mean_ppl"], d["delta_ppl"], d["align_score"], d["n_val"], d["label"],
                       list(d["ppls"]), list(d["texts"]))


class Evaluator:
    """Scores masked variants of one model on a fixed validation set.

    In ``reference_trace`` mode the masked model is teacher-forced on the
    unmasked model's greedy outputs (computed once). In ``self_trace`` mode it
    scores its own greedy output. Alignment always uses the masked model's own
    generations. The chance-level alignment is drawn from ``chance_pool``
    (default: the validation set), which should span several categories.
    """

    def __init__(self, model, valset, scorer, prompt: str = PROMPT, ppl_mode: str = "reference_trace",
                 max_len: int = 8, chance_pool=None):
        if not valset:
            raise SearchInputError("validation set is empty")
        if ppl_mode not in PPL_MODES:
            raise SearchInputError(f"ppl_mode must be one of {PPL_MODES}, got {ppl_mode!r}")
        self.model, self.base_mask = resolve(model)
        self.valset = list(valset)
        self.scorer = scorer
        self.prompt = prompt
        self.ppl_mode = ppl_mode
        self.max_len = max_len
        self.chance_pool = list(chance_pool) if chance_pool else self.valset
        self._refs = None

    @property
    def references(self):
        if self._refs is None:
            self._refs = [generate_greedy(self.model, s.image, self.prompt, mask=self.base_mask,
                                          max_len=self.max_len) for s in self.valset]
        return self._refs

    def evaluate(self, mask: MaskSet, k: int, prev_ppls=None) -> MetricPoint:
        view = apply_mask(self.model, self.base_mask | mask)
        ppls, texts, aligns = [], [], []
        refs = self.references if self.ppl_mode == "reference_trace" else None
        for i, s in enumerate(self.valset):
            gen = generate_greedy(view, s.image, self.prompt, max_len=self.max_len)
            if refs is None:
                lps = teacher_forced_logprobs(view, s.image, self.prompt, gen.tokens)
            else:
                lps = teacher_forced_logprobs(view, s.image, self.prompt, refs[i].tokens)
            ppls.append(perplexity_from_logprobs(lps))
            texts.append(gen.text)
            aligns.append(align_score(self.scorer, s.image, gen.text))
        d = 0.0 if prev_ppls is None else delta_ppl(ppls, prev_ppls)
        return MetricPoint(k, float(np.mean(ppls)), d, mean_alignment(aligns), len(ppls), None, ppls, texts)

    def calibrate(self, thresholds: Thresholds, baseline: MetricPoint, seed: int = 0) -> Thresholds:
        """Fill unset thresholds: chance-level alignment and the stage-1 boundary."""
        if thresholds.calibrated:
            return thresholds
        chance = thresholds.tau_align
        if chance is None:
            chance = chance_baseline(self.scorer, self.chance_pool, seed=seed)
        original = baseline.align_score if baseline.align_score is not None else chance
        if thresholds.align_degraded is not None:
            return Thresholds(thresholds.tau_ppl, chance, thresholds.align_degraded)
        return calibrate_thresholds(chance, original, thresholds.tau_ppl)


def _check_scope(model, table: ImportanceTable, scope: Scope) -> int:
    base, _ = resolve(model)
    in_reg = base.registry().in_scope(scope)
    in_table = {n for n, _ in table.in_scope(scope)}
    missing = [n for n in in_reg if n not in in_table]
    if missing:
        raise SearchInputError(f"importance table lacks {len(missing)} neurons of scope {scope}, e.g. {missing[0]}")
    return len(in_reg)


def progressive_search(model, table: ImportanceTable, valset, config: SearchConfig, scorer,
                       evaluator: Optional[Evaluator] = None) -> CollapseReport:
    """Grow the masked set by ``delta_k`` top-ranked neurons per step until collapse or ``k_max``.

    Each step's perplexity change is measured against the previous step (the
    first step against the unmasked baseline). After collapse, ``overshoot``
    extra steps are recorded.
    """
    if not valset:
        raise SearchInputError("validation set is empty")
    size = _check_scope(model, table, config.scope)
    if config.k_max > size:
        raise SearchInputError(f"k_max={config.k_max} exceeds scope size {size}")
    ev = evaluator or Evaluator(model, valset, scorer, config.prompt, config.ppl_mode, config.max_len)
    baseline = ev.evaluate(MaskSet(), 0)
    thresholds = ev.calibrate(config.thresholds, baseline, config.seed)
    baseline.label = collapse_check(baseline, thresholds, config.scope)

    trajectory, masks = [], {}
    k_star = stage1 = None
    prev = baseline.ppls
    extra = 0
    final = MaskSet()
    for k in range(config.delta_k, config.k_max + 1, config.delta_k):
        mask = top_k(table, k, config.scope)
        point = ev.evaluate(mask, k, prev)
        point.label = collapse_check(point, thresholds, config.scope)
        trajectory.append(point)
        masks[k] = mask
        prev = point.ppls
        if k_star is None:
            final = mask
            if point.label in (EXPRESSIVE, PERCEPTUAL) and stage1 is None:
                stage1 = k
            if point.label == COLLAPSE:
                k_star = k
                if config.overshoot == 0:
                    break
        else:
            extra += 1
            if extra >= config.overshoot:
                break
    return CollapseReport(trajectory, k_star, final, (stage1, k_star), baseline, config.config_hash(),
                          thresholds, masks)


def grid_k_star(model, table: ImportanceTable, valset, config: SearchConfig, scorer,
                evaluator: Optional[Evaluator] = None) -> Optional[int]:
    """Evaluate every grid k independently (no early stop) and return the first collapsing k."""
    ev = evaluator or Evaluator(model, valset, scorer, config.prompt, config.ppl_mode, config.max_len)
    baseline = ev.evaluate(MaskSet(), 0)
    thresholds = ev.calibrate(config.thresholds, baseline, config.seed)
    ks = list(range(config.delta_k, config.k_max + 1, config.delta_k))
    points = {0: baseline}
    for k in ks:
        points[k] = ev.evaluate(top_k(table, k, config.scope), k)
    found = None
    for i, k in enumerate(ks):
        prev = points[ks[i - 1] if i else 0]
        p = points[k]
        p.delta_ppl = delta_ppl(p.ppls, prev.ppls)
        if collapse_check(p, thresholds, config.scope) == COLLAPSE and found is None:
            found = k
    return found


def random_control(model, scope: Scope, k: int, n_trials: int, valset, seed: int, *, table: ImportanceTable,
                   scorer, prompt: str = PROMPT, ppl_mode: str = "reference_trace", max_len: int = 8,
                   thresholds: Optional[Thresholds] = None, evaluator: Optional[Evaluator] = None) -> list:
    """Mask ``n_trials`` uniform k-subsets of ``scope`` that avoid the top-k set.

    Each point's ``delta_ppl`` is measured against the unmasked model. Points
    are labelled when calibrated ``thresholds`` are given.
    """
    if n_trials < 1:
        raise SearchInputError("n_trials must be >= 1")
    base, _ = resolve(model)
    pool_all = base.registry().in_scope(scope)
    if not 0 <= k <= len(pool_all):
        raise SearchInputError(f"k={k} outside [0, {len(pool_all)}] for scope {scope}")
    excluded = top_k(table, k, scope)
    pool = [n for n in pool_all if n not in excluded]
    if len(pool) < k:
        raise SearchInputError(f"only {len(pool)} neurons remain outside the top-{k} set; need {k}")
    ev = evaluator or Evaluator(model, valset, scorer, prompt, ppl_mode, max_len)
    baseline = ev.evaluate(MaskSet(), 0)
    rng = np.random.default_rng(seed)
    points = []
    for _ in range(n_trials):
        picks = np.sort(rng.choice(len(pool), size=k, replace=False)) if k else []
        mask = MaskSet(pool[i] for i in picks)
        p = ev.evaluate(mask, k, baseline.ppls)
        if thresholds is not None and thresholds.calibrated:
            p.label = collapse_check(p, thresholds, scope)
        points.append(p)
    return points


# -- persistence ----------------------------------------------------------------

TRAJECTORY_HEADER = ["k", "mean_ppl", "delta_ppl", "align_score", "label"]


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NaN"
    return repr(float(x))


def trajectory_csv(report: CollapseReport) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for p in [report.baseline] + report.trajectory:
        w.writerow([p.k, _num(p.mean_ppl), _num(p.delta_ppl), _num(p.align_score), p.label or ""])
    return buf.getvalue()


def save_report(report: CollapseReport, run_dir) -> None:
    """Write ``report.json``, ``trajectory.csv`` and ``masks/k<k>.txt`` under ``run_dir``."""
    run_dir = Path(run_dir)
    (run_dir / "masks").mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    (run_dir / "trajectory.csv").write_text(trajectory_csv(report), encoding="utf-8")
    for k, mask in sorted(report.masks.items()):
        mask.save(run_dir / "masks" / f"k{k:05d}.txt")


def load_report(run_dir) -> CollapseReport:
    run_dir = Path(run_dir)
    return CollapseReport.from_dict(json.loads((run_dir / "report.json").read_text(encoding="utf-8")))
