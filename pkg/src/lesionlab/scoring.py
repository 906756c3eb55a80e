"""Consistently-activated-neuron importance scores and top-k selection."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .neurons import MaskSet, NeuronId, Scope

# alpha used for each bridge style: activation-only for the MLP projector path,
# activation x gradient for the Q-Former path
ARCH_ALPHA = {"projector": 0.0, "qformer": 1.0}


class RangeError(ValueError):
    pass


@dataclass
class ImportanceTable:
    entries: list  # (NeuronId, score), score descending, ties by NeuronId
    alpha: float
    dataset_hash: str = ""
    model_hash: str = ""
    _rank: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.entries)

    def in_scope(self, scope: Optional[Scope]) -> list:
        if scope is None:
            return list(self.entries)
        return [e for e in self.entries if scope.contains(e[0])]

    def rank_of(self, nid: NeuronId) -> int:
        if not self._rank:
            self._rank.update({n: i for i, (n, _) in enumerate(self.entries)})
        return self._rank[nid]

    def score_of(self, nid: NeuronId) -> float:
        return self.entries[self.rank_of(nid)][1]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "component", "layer", "site", "channel", "score"])
        for r, (n, s) in enumerate(self.entries):
            w.writerow([r, n.component, n.layer, n.site, n.channel, repr(float(s))])
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str, alpha: float, dataset_hash: str = "", model_hash: str = ""):
        rows = list(csv.DictReader(_io.StringIO(text)))
        entries = [(NeuronId(r["component"], int(r["layer"]), r["site"], int(r["channel"])), float(r["score"]))
                   for r in rows]
        return cls(entries, alpha, dataset_hash, model_hash)

    @classmethod
    def load(cls, path, alpha: float, dataset_hash: str = "", model_hash: str = ""):
        return cls.from_csv(Path(path).read_text(encoding="utf-8"), alpha, dataset_hash, model_hash)


def importance(activations: np.ndarray, gradients: Optional[np.ndarray], alpha: float) -> np.ndarray:
    """Row-wise mean over samples of ``|g|**alpha * |a|``, with ``|g|**0 == 1``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a = np.abs(np.asarray(activations, dtype=np.float64))
    if alpha == 0.0:
        return a.mean(axis=1)
    if gradients is None:
        raise ValueError("gradients are required when alpha > 0")
    gr = np.abs(np.asarray(gradients, dtype=np.float64))
    if gr.shape != a.shape:
        raise ValueError(f"activation shape {a.shape} and gradient shape {gr.shape} differ")
    return (gr ** alpha * a).mean(axis=1)


def score(profiles, alpha: float, dataset_hash: str = "", model_hash: str = "") -> ImportanceTable:
    """Score every profiled neuron and sort descending (ties: NeuronId order)."""
    acts = profiles.activations
    grads = profiles.gradients
    if acts.shape[0] != len(profiles.neurons):
        raise ValueError("profile rows do not match the neuron list")
    if grads is not None and grads.shape != acts.shape:
        raise ValueError(f"sample counts differ: activations {acts.shape}, gradients {grads.shape}")
    scores = importance(acts, grads, alpha)
    entries = sorted(zip(profiles.neurons, scores.tolist()), key=lambda e: (-e[1], e[0]))
    return ImportanceTable(entries, alpha, dataset_hash, model_hash)


def top_k(table: ImportanceTable, k: int, scope: Optional[Scope] = None) -> MaskSet:
    pool = table.in_scope(scope)
    if not 0 <= k <= len(pool):
        raise RangeError(f"k={k} outside [0, {len(pool)}] for scope {scope}")
    return MaskSet(n for n, _ in pool[:k])
