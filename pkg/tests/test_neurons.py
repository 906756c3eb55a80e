import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionlab.neurons import COMPONENTS, SITES, AddressingError, MaskSet, NeuronId, NeuronRegistry, Scope

neuron_ids = st.builds(NeuronId, st.sampled_from(COMPONENTS), st.integers(0, 40), st.sampled_from(SITES),
                       st.integers(0, 500))


@given(neuron_ids)
def test_record_roundtrip(nid):
    assert NeuronId.from_record(nid.to_record()) == nid


@given(st.lists(neuron_ids, max_size=30))
def test_maskset_text_roundtrip_and_dedup(ids):
    m = MaskSet(ids + ids)
    assert len(m) == len(set(ids))
    back = MaskSet.from_text(m.to_text())
    assert back == m
    assert back.content_hash() == m.content_hash()
    assert m.to_text().splitlines() == [n.to_record() for n in sorted(set(ids))]


def test_order_is_lexicographic_over_fields():
    a = NeuronId("lm", 1, "gate_out", 9)
    b = NeuronId("lm", 1, "gate_out", 10)
    c = NeuronId("lm", 2, "down_out", 0)
    d = NeuronId("vision_encoder", 0, "mlp_out", 0)
    assert sorted([d, c, b, a]) == [a, b, c, d]


def test_invalid_addresses():
    with pytest.raises(AddressingError):
        NeuronId("decoder", 0, "gate_out", 0)
    with pytest.raises(AddressingError):
        NeuronId("lm", 0, "attn_out", 0)
    with pytest.raises(AddressingError):
        NeuronId("lm", -1, "gate_out", 0)


def test_scope_filters():
    s = Scope("lm", "gate_out", layers=(0, 3))
    assert s.contains(NeuronId("lm", 3, "gate_out", 1))
    assert not s.contains(NeuronId("lm", 1, "gate_out", 1))
    assert not s.contains(NeuronId("lm", 0, "down_out", 1))
    assert Scope("lm").contains(NeuronId("lm", 2, "down_out", 0))
    assert Scope.from_dict(s.to_dict()) == s
    assert s.is_language and not Scope("projector").is_language


def test_registry_enumerates_each_neuron_once():
    reg = NeuronRegistry({("lm", 0, "gate_out"): 3, ("lm", 0, "down_out"): 2, ("projector", 0, "mlp_out"): 1})
    ids = list(reg)
    assert len(ids) == len(reg) == 6
    assert ids == sorted(ids)
    assert NeuronId("lm", 0, "gate_out", 2) in reg
    assert NeuronId("lm", 0, "gate_out", 3) not in reg
    with pytest.raises(AddressingError):
        reg.validate([NeuronId("lm", 1, "gate_out", 0)])
    assert len(reg.in_scope(Scope("lm", "gate_out"))) == 3


def test_maskset_by_site_and_union():
    m = MaskSet([NeuronId("lm", 0, "gate_out", 5), NeuronId("lm", 0, "gate_out", 2)])
    m2 = m | MaskSet([NeuronId("lm", 1, "down_out", 0)])
    assert m.issubset(m2) and not m2.issubset(m)
    sites = m2.by_site()
    assert sites[("lm", 0, "gate_out")].tolist() == [2, 5]
    assert sites[("lm", 1, "down_out")].tolist() == [0]
