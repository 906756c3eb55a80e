"""Targeted masking against random masking of the same size.

Ranks the fixture model's 688 LM gate channels, masks them in importance
order under the published collapse thresholds, then draws random masks of
the same size from outside the top of the ranking. Whether or not the model
collapses, targeted masks should hurt more than random ones.

Takes about a minute. Run: python3 demos/03_targeted_vs_random.py
"""

import numpy as np

from lesionlab.data import gen_dataset, select
from lesionlab.instrument import collect_profiles
from lesionlab.metrics import delta_ppl, train_scorer
from lesionlab.model import ModelConfig, ToyLVLM, train
from lesionlab.neurons import Scope
from lesionlab.scoring import score
from lesionlab.search import Evaluator, SearchConfig, progressive_search, random_control

samples = gen_dataset(30, seed=0)
model, _ = train(ToyLVLM(ModelConfig()), select(samples, "train"), epochs=24, lr=1e-3, batch_size=8)
scorer, _ = train_scorer(select(samples, "train"))
table = score(collect_profiles(model, select(samples, "rank")), alpha=0.0)

seen, val = set(), []
for s in select(samples, "val"):
    if s.category not in seen:
        seen.add(s.category)
        val.append(s)

scope = Scope("lm", "gate_out")
ev = Evaluator(model, val, scorer, chance_pool=select(samples, "val"))
report = progressive_search(model, table, val, SearchConfig(scope, k_max=96, delta_k=8), scorer, evaluator=ev)
print(f"thresholds: {report.thresholds}")
print(f"baseline PPL {report.baseline.mean_ppl:.3f}, align {report.baseline.align_score:.1f}")
for p in report.trajectory:
    align = "NaN" if p.align_score is None else f"{p.align_score:5.1f}"
    print(f"  k={p.k:3d}  PPL {p.mean_ppl:8.3f}  step delta {p.delta_ppl:6.3f}  align {align}  {p.label}")
print(f"k* = {report.k_star}")

for k in (32, 96):
    targeted = delta_ppl(report.point_at(k).ppls, report.baseline.ppls)
    rand = [p.delta_ppl for p in random_control(model, scope, k, 10, val, seed=0, table=table, scorer=scorer,
                                                 evaluator=ev)]
    print(f"k={k}: targeted delta {targeted:.3f}, random median {np.median(rand):.3f} "
          f"(max {max(rand):.3f})")
