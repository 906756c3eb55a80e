import pytest

from lesionlab.data import gen_dataset
from lesionlab.instrument import collect_profiles
from lesionlab.metrics import Thresholds
from lesionlab.neurons import MaskSet, Scope
from lesionlab.scoring import score, top_k
from lesionlab.search import (Evaluator, SearchConfig, SearchInputError, grid_k_star, load_report,
                              progressive_search, random_control, save_report, trajectory_csv)

SCOPE = Scope("lm", "gate_out", layers=(0,))


@pytest.fixture(scope="module")
def setup(untrained_small):
    samples = gen_dataset(2, seed=11)
    val = [s for s in samples if s.split == "train"][:4]
    table = score(collect_profiles(untrained_small, samples[:6]), 0.0)
    return untrained_small, table, val


def _cfg(**kw):
    base = dict(scope=SCOPE, k_max=6, delta_k=2, thresholds=Thresholds(1.0, 20.0, 30.0))
    base.update(kw)
    return SearchConfig(**base)


def test_config_validation():
    with pytest.raises(SearchInputError):
        _cfg(delta_k=0)
    with pytest.raises(SearchInputError):
        _cfg(ppl_mode="mixed")
    cfg = _cfg()
    assert SearchConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() == _cfg().config_hash() != _cfg(seed=1).config_hash()


def test_first_step_collapse_gives_delta_k(setup, scorer):
    model, table, val = setup
    rep = progressive_search(model, table, val, _cfg(thresholds=Thresholds(0.0, 1000.0, 1000.0)), scorer)
    assert rep.k_star == 2
    assert len(rep.trajectory) == 1
    assert rep.final_mask == top_k(table, 2, SCOPE)


def test_never_collapsing_exhausts_k_max(setup, scorer):
    model, table, val = setup
    rep = progressive_search(model, table, val, _cfg(thresholds=Thresholds(100.0, -1000.0, -1000.0)), scorer)
    assert rep.k_star is None
    assert [p.k for p in rep.trajectory] == [2, 4, 6]
    assert rep.stage_boundaries == (None, None)


def test_masks_nest_and_reruns_agree(setup, scorer):
    model, table, val = setup
    cfg = _cfg(k_max=12, delta_k=3, thresholds=Thresholds(100.0, 0.0, 0.0))
    a = progressive_search(model, table, val, cfg, scorer)
    b = progressive_search(model, table, val, cfg, scorer)
    assert a.to_dict() == b.to_dict()
    ks = sorted(a.masks)
    for k0, k1 in zip(ks, ks[1:]):
        assert a.masks[k0].issubset(a.masks[k1])
    assert [p.k for p in a.trajectory] == [3, 6, 9, 12]


def test_overshoot_records_extra_steps(setup, scorer):
    model, table, val = setup
    rep = progressive_search(model, table, val, _cfg(k_max=12, delta_k=1, overshoot=3,
                                                      thresholds=Thresholds(0.0, 1000.0, 1000.0)), scorer)
    assert rep.k_star == 1
    assert [p.k for p in rep.trajectory] == [1, 2, 3, 4]
    assert rep.final_mask == top_k(table, 1, SCOPE)


def test_early_stop_equals_grid(setup, scorer):
    model, table, val = setup
    for tau in (0.005, 0.02, 0.05):
        cfg = _cfg(k_max=12, delta_k=1, thresholds=Thresholds(tau, 1000.0, 1000.0))
        assert progressive_search(model, table, val, cfg, scorer).k_star == grid_k_star(model, table, val, cfg, scorer)


def test_input_errors(setup, scorer):
    model, table, val = setup
    with pytest.raises(SearchInputError):
        progressive_search(model, table, [], _cfg(), scorer)
    with pytest.raises(SearchInputError):
        progressive_search(model, table, val, _cfg(k_max=13), scorer)


def test_self_trace_mode(setup, scorer):
    model, table, val = setup
    ev = Evaluator(model, val, scorer, ppl_mode="self_trace")
    p = ev.evaluate(MaskSet(), 0)
    assert all(x >= 1.0 for x in p.ppls)


def test_random_controls(setup, scorer):
    model, table, val = setup
    zero = random_control(model, SCOPE, 0, 2, val, 0, table=table, scorer=scorer)
    assert all(p.delta_ppl == 0.0 for p in zero)
    a = random_control(model, SCOPE, 3, 3, val, 5, table=table, scorer=scorer)
    b = random_control(model, SCOPE, 3, 3, val, 5, table=table, scorer=scorer)
    assert [(p.ppls, p.texts) for p in a] == [(p.ppls, p.texts) for p in b]
    with pytest.raises(SearchInputError):
        random_control(model, SCOPE, 7, 1, val, 0, table=table, scorer=scorer)


def test_random_controls_avoid_top_k(setup, scorer, monkeypatch):
    model, table, val = setup
    seen = []
    orig = Evaluator.evaluate

    def spy(self, mask, k, prev_ppls=None):
        seen.append(mask)
        return orig(self, mask, k, prev_ppls)

    monkeypatch.setattr(Evaluator, "evaluate", spy)
    random_control(model, SCOPE, 4, 5, val[:1], 1, table=table, scorer=scorer)
    top = top_k(table, 4, SCOPE)
    for m in seen[1:]:
        assert len(m) == 4 and not (m.ids & top.ids)
        assert all(SCOPE.contains(n) for n in m)


def test_report_persistence(setup, scorer, tmp_path):
    model, table, val = setup
    rep = progressive_search(model, table, val, _cfg(thresholds=Thresholds(100.0, 0.0, 0.0)), scorer)
    save_report(rep, tmp_path)
    back = load_report(tmp_path)
    assert back.to_dict() == rep.to_dict()
    lines = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "k,mean_ppl,delta_ppl,align_score,label"
    assert len(lines) == 2 + len(rep.trajectory)
    assert sorted(p.name for p in (tmp_path / "masks").iterdir()) == ["k00002.txt", "k00004.txt", "k00006.txt"]
    assert trajectory_csv(back) == trajectory_csv(rep)
