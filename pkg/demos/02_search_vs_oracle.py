"""Progressive masking on a model small enough to brute-force.

A 12-channel FFN is ranked by consistently-activated-neuron importance, then
masked one channel at a time until the joint perplexity/alignment criterion
fires. The exhaustive oracle then tries every subset of up to three channels
and reports the smallest one that collapses the model on its own.

The thresholds are scaled down to what a one-layer toy can reach; see the
decisions ledger for why the published ones cannot fire here.

Run: python3 demos/02_search_vs_oracle.py
"""

from lesionlab.data import PROMPT, gen_dataset, select
from lesionlab.instrument import collect_profiles
from lesionlab.metrics import Thresholds, train_scorer
from lesionlab.model import ModelConfig, ToyLVLM, train
from lesionlab.neurons import Scope
from lesionlab.oracle import OracleBudget, exhaustive_min_subset
from lesionlab.scoring import score
from lesionlab.search import Evaluator, SearchConfig, grid_k_star, progressive_search

samples = gen_dataset(30, seed=0)
tiny = ModelConfig(vision_layers=1, vision_dim=8, vision_mlp_dim=8, projector_dim=8, lm_layers=1, lm_dim=8,
                   ffn_dim=12, lm_heads=2, vision_heads=2)
model, _ = train(ToyLVLM(tiny), select(samples, "train"), epochs=60, lr=3e-3, batch_size=8)
scorer, _ = train_scorer(select(samples, "train"))

scope = Scope("lm", "gate_out")
table = score(collect_profiles(model, select(samples, "rank")), alpha=0.0)
print("importance ranking within the LM gate channels:")
for n, v in table.in_scope(scope):
    print(f"  {n.site}[{n.channel:2d}]  {v:.4f}")

seen, val = set(), []
for s in select(samples, "val"):
    if s.category not in seen:
        seen.add(s.category)
        val.append(s)

thresholds = Thresholds(tau_ppl=0.05, tau_align=40.0, align_degraded=45.0)
cfg = SearchConfig(scope, k_max=12, thresholds=thresholds, overshoot=3)
ev = Evaluator(model, val, scorer)
report = progressive_search(model, table, val, cfg, scorer, evaluator=ev)

print("\n  k   mean PPL   delta   align  label")
for p in [report.baseline] + report.trajectory:
    align = "NaN" if p.align_score is None else f"{p.align_score:5.1f}"
    print(f"{p.k:3d} {p.mean_ppl:10.3f} {p.delta_ppl:7.3f}   {align}  {p.label}")
print(f"\nprogressive k* = {report.k_star}, grid k* = {grid_k_star(model, table, val, cfg, scorer, evaluator=ev)}")

res = exhaustive_min_subset(model, model.registry().in_scope(scope), val, thresholds,
                            OracleBudget(max_subset_size=3), scorer, PROMPT)
if res.found:
    print(f"oracle: smallest collapsing subset has {len(res.subset)} channels "
          f"{[n.channel for n in res.subset]} (visited {res.visited} subsets)")
else:
    print(f"oracle: nothing collapses within the budget (visited {res.visited} subsets)")
