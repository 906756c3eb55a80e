"""Neuron addresses, registries, scopes and mask sets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

COMPONENTS = ("vision_encoder", "projector", "qformer", "lm")
SITES = ("gate_out", "down_out", "mlp_out")
LANGUAGE_COMPONENTS = ("lm",)


class AddressingError(KeyError):
    pass


@dataclass(frozen=True, order=True)
class NeuronId:
    """One ablatable unit. Ordering is lexicographic over the field tuple."""

    component: str
    layer: int
    site: str
    channel: int

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise AddressingError(f"unknown component {self.component!r}")
        if self.site not in SITES:
            raise AddressingError(f"unknown site {self.site!r}")
        if self.layer < 0 or self.channel < 0:
            raise AddressingError(f"negative index in {self}")

    @property
    def site_key(self):
        return (self.component, self.layer, self.site)

    def to_record(self) -> str:
        return f"{self.component},{self.layer},{self.site},{self.channel}"

    @classmethod
    def from_record(cls, line: str) -> "NeuronId":
        comp, layer, site, ch = line.strip().split(",")
        return cls(comp, int(layer), site, int(ch))


@dataclass(frozen=True)
class Scope:
    """Filter over neuron addresses: a component, optionally a site and layers."""

    component: str
    site: Optional[str] = None
    layers: Optional[tuple] = None

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise AddressingError(f"unknown component {self.component!r}")
        if self.site is not None and self.site not in SITES:
            raise AddressingError(f"unknown site {self.site!r}")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(x) for x in self.layers))

    def contains(self, nid: NeuronId) -> bool:
        if nid.component != self.component:
            return False
        if self.site is not None and nid.site != self.site:
            return False
        return self.layers is None or nid.layer in self.layers

    @property
    def is_language(self) -> bool:
        return self.component in LANGUAGE_COMPONENTS

    def to_dict(self):
        return {"component": self.component, "site": self.site,
                "layers": None if self.layers is None else list(self.layers)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["component"], d.get("site"), d.get("layers"))


class NeuronRegistry:
    """Channel counts per ``(component, layer, site)``; enumerates every neuron once."""

    def __init__(self, widths: dict):
        self.widths = {k: int(v) for k, v in sorted(widths.items()) if v > 0}

    def __iter__(self) -> Iterator[NeuronId]:
        for (comp, layer, site), w in self.widths.items():
            for c in range(w):
                yield NeuronId(comp, layer, site, c)

    def __len__(self):
        return sum(self.widths.values())

    def __contains__(self, nid: NeuronId):
        w = self.widths.get(nid.site_key)
        return w is not None and nid.channel < w

    def site_keys(self, scope: Optional[Scope] = None):
        keys = list(self.widths)
        if scope is None:
            return keys
        return [k for k in keys if scope.contains(NeuronId(k[0], k[1], k[2], 0))]

    def in_scope(self, scope: Scope) -> list:
        return [n for n in self if scope.contains(n)]

    def validate(self, ids: Iterable[NeuronId]):
        for nid in ids:
            if nid not in self:
                raise AddressingError(f"{nid} is not registered for this model")


class MaskSet:
    """Duplicate-free set of neuron ids; serialises in sorted order."""

    def __init__(self, ids: Iterable[NeuronId] = ()):
        self.ids = frozenset(ids)

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(sorted(self.ids))

    def __contains__(self, nid):
        return nid in self.ids

    def __eq__(self, other):
        return isinstance(other, MaskSet) and self.ids == other.ids

    def __hash__(self):
        return hash(self.ids)

    def __repr__(self):
        return f"MaskSet({len(self.ids)} ids)"

    def __or__(self, other):
        return MaskSet(self.ids | other.ids)

    def issubset(self, other):
        return self.ids <= other.ids

    def by_site(self) -> dict:
        """``{(component, layer, site): sorted int array of channels}``."""
        out: dict = {}
        for nid in sorted(self.ids):
            out.setdefault(nid.site_key, []).append(nid.channel)
        return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}

    def to_text(self) -> str:
        return "".join(n.to_record() + "\n" for n in sorted(self.ids))

    @classmethod
    def from_text(cls, text: str) -> "MaskSet":
        return cls(NeuronId.from_record(line) for line in text.splitlines() if line.strip())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MaskSet":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))
