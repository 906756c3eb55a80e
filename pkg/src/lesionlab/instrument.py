"""Activation/gradient profiling and mask application."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Graph
from .data import PROMPT
from .model import MaskedView, forward, prompt_ids, resolve
from .neurons import MaskSet, NeuronId

PROBES = ("first_generated_token",)


class ConfigurationError(ValueError):
    pass


def apply_mask(model, mask: MaskSet) -> MaskedView:
    """Return a view of ``model`` that zeroes every masked activation on every forward pass."""
    base, _ = resolve(model)
    base.registry().validate(mask)
    return MaskedView(model, mask)


@dataclass
class ActivationProfile:
    neuron: NeuronId
    values: np.ndarray


@dataclass
class Profiles:
    """Per-neuron, per-sample activations (and optionally ``|dL/da|``) at the probe step.

    ``activations[n, i]`` is neuron ``neurons[n]`` on sample ``sample_ids[i]``.
    """

    neurons: list
    activations: np.ndarray
    gradients: Optional[np.ndarray]
    sample_ids: list
    first_tokens: list

    def __len__(self):
        return len(self.neurons)

    @property
    def n_samples(self):
        return self.activations.shape[1]

    def profile(self, nid: NeuronId) -> ActivationProfile:
        return ActivationProfile(nid, self.activations[self.neurons.index(nid)])

    def as_dict(self) -> dict:
        return {n: ActivationProfile(n, self.activations[i]) for i, n in enumerate(self.neurons)}

    def gradient_dict(self) -> dict:
        if self.gradients is None:
            return {}
        return {n: self.gradients[i] for i, n in enumerate(self.neurons)}


def collect_profiles(model, samples, prompt: str = PROMPT, probe: str = "first_generated_token",
                     gradients: bool = True) -> Profiles:
    """Run prefill + one generation step per sample and read every registered site.

    Language-model sites are read at the position that emits the first
    generated token. Vision-side sites have no such position; they are
    summarised by the mean activation (and mean ``|dL/da|``) over the
    sample's image patches. The gradient loss is the negative log-probability
    of the model's own greedy first token.
    """
    if probe not in PROBES:
        raise ConfigurationError(f"unsupported probe {probe!r}; expected one of {PROBES}")
    if not samples:
        raise ValueError("dataset is empty")
    base, mask = resolve(model)
    cfg = base.config
    registry = base.registry()
    keys = list(registry.widths)
    neurons = list(registry)
    ids = prompt_ids(base, prompt)
    last = cfg.n_patches + len(ids) - 1
    acts = np.zeros((len(neurons), len(samples)))
    grads = np.zeros((len(neurons), len(samples))) if gradients else None
    first_tokens = []

    for i, s in enumerate(samples):
        g = Graph(record=gradients)
        taps: dict = {}
        params = {k: g.tensor(v) for k, v in base.weights.items()}
        # a grad-requiring image input makes every downstream tap differentiable
        pixels = s.pixels
        logits = forward(base, g, [pixels], [ids], mask=mask, taps=taps, params=params,
                         image_requires_grad=gradients)
        row = logits.data[last]
        tok = int(np.argmax(row))
        first_tokens.append(tok)
        if gradients:
            weights = np.zeros(logits.shape[0])
            weights[last] = 1.0
            targets = np.full(logits.shape[0], tok)
            g.backward(g.cross_entropy(logits, targets, weights))
        r = 0
        for key in keys:
            t = taps[key]
            w = t.shape[1]
            if key[0] == "lm":
                acts[r:r + w, i] = t.data[last]
                if gradients:
                    grads[r:r + w, i] = np.abs(t.grad[last])
            else:
                acts[r:r + w, i] = t.data.mean(axis=0)
                if gradients:
                    grads[r:r + w, i] = np.abs(t.grad).mean(axis=0)
            r += w
    return Profiles(neurons, acts, grads, [s.index for s in samples], first_tokens)
