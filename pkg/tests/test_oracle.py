import itertools

import numpy as np
import pytest

from lesionlab.autodiff import Graph
from lesionlab.data import PROMPT, gen_dataset
from lesionlab.metrics import Thresholds
from lesionlab.model import forward, prompt_ids
from lesionlab.neurons import MaskSet, NeuronId, Scope
from lesionlab.oracle import (OracleAbort, OracleBudget, direct_intervention_equiv, exhaustive_min_subset,
                              reference_forward, skip_ffn, standalone_perplexity)


@pytest.fixture(scope="module")
def inputs(untrained_small):
    ids = prompt_ids(untrained_small, PROMPT)
    return [(s.image, ids + [5, 6][: i % 3]) for i, s in enumerate(gen_dataset(1, seed=9)[:4])]


def test_empty_mask(untrained_small, inputs):
    assert direct_intervention_equiv(untrained_small, MaskSet(), inputs)


def test_single_channel_and_mismatch(untrained_small, inputs):
    m = MaskSet([NeuronId("lm", 0, "gate_out", 4)])
    assert direct_intervention_equiv(untrained_small, m, inputs)
    assert not direct_intervention_equiv(untrained_small, m, inputs, edits={("lm", 1, "gate_out"): [4]})


def test_mixed_component_mask(untrained_small, inputs):
    m = MaskSet([NeuronId("vision_encoder", 0, "mlp_out", 1), NeuronId("projector", 0, "mlp_out", 6),
                 NeuronId("lm", 1, "down_out", 2), NeuronId("lm", 1, "gate_out", 0)])
    assert direct_intervention_equiv(untrained_small, m, inputs)


def test_all_gate_channels_equal_skipped_ffn(untrained_small, inputs):
    m = untrained_small
    layer = 1
    mask = MaskSet(n for n in m.registry() if n.site == "gate_out" and n.layer == layer)
    for image, ids in inputs:
        taps = {}
        pix = np.asarray(image, dtype=np.float64) / 255.0
        forward(m, Graph(record=False), [pix], [ids], mask=mask, taps=taps)
        ref = reference_forward(m, pix, ids, skip_ffn(layer))
        for l in range(m.config.lm_layers):
            np.testing.assert_allclose(taps[("lm", l, "resid")].data, ref[("lm", l, "resid")], rtol=0, atol=1e-12)


def test_standalone_perplexity():
    assert standalone_perplexity([0.0, 0.0]) == 1.0
    assert standalone_perplexity([-np.log(4.0)]) == pytest.approx(4.0)
    assert standalone_perplexity([-1e9]) == pytest.approx(1e12)


def _neurons(model, n=4):
    return model.registry().in_scope(Scope("lm", "gate_out", layers=(0,)))[:n]


def test_already_collapsed_gives_empty_set(untrained_small, scorer):
    val = gen_dataset(1, seed=0)[:2]
    res = exhaustive_min_subset(untrained_small, _neurons(untrained_small), val, Thresholds(0.0, 1000.0, 1000.0),
                                OracleBudget(), scorer, PROMPT)
    assert res.found and res.subset == [] and res.visited == 1


def test_unsatisfiable_is_not_found(untrained_small, scorer):
    val = gen_dataset(1, seed=0)[:1]
    res = exhaustive_min_subset(untrained_small, _neurons(untrained_small), val, Thresholds(50.0, 0.0, 0.0),
                                OracleBudget(max_subset_size=2), scorer, PROMPT)
    assert not res.found and res.visited == 1 + 4 + 6


def test_budget_guards(untrained_small, scorer):
    val = gen_dataset(1, seed=0)[:1]
    many = untrained_small.registry().in_scope(Scope("lm", "gate_out"))
    with pytest.raises(OracleAbort):
        exhaustive_min_subset(untrained_small, many, val, Thresholds(50.0, 0.0, 0.0), OracleBudget(), scorer, PROMPT)
    with pytest.raises(OracleAbort) as e:
        exhaustive_min_subset(untrained_small, _neurons(untrained_small), val, Thresholds(50.0, 0.0, 0.0),
                              OracleBudget(node_limit=3), scorer, PROMPT)
    assert e.value.visited == 3
    with pytest.raises(ValueError):
        OracleBudget(max_subset_size=4)
    with pytest.raises(ValueError):
        OracleBudget(max_scope_size=17)


def test_visit_order_is_size_then_lex(untrained_small, scorer, monkeypatch):
    import lesionlab.oracle as oracle

    visited = []
    orig = oracle.zero_channels

    def spy(spec):
        visited.append(sorted((k[1], c) for k, cs in spec.items() for c in cs))
        return orig(spec)

    monkeypatch.setattr(oracle, "zero_channels", spy)
    ns = _neurons(untrained_small, 3)
    exhaustive_min_subset(untrained_small, list(reversed(ns)), gen_dataset(1, seed=0)[:1], Thresholds(50.0, 0.0, 0.0),
                          OracleBudget(max_subset_size=2), scorer, PROMPT)
    want = [sorted((n.layer, n.channel) for n in c) for r in range(3) for c in itertools.combinations(ns, r)]
    assert visited == want
