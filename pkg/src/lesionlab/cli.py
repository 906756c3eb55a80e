"""Command-line experiment driver.

Every command reads one JSON experiment config. The canonical hash of that
config names the run root ``<out>/<hash>``; category-specific artifacts live
under ``<out>/<hash>/<category>``. Wall-clock timestamps go only to
``run.log`` so every other artifact is byte-reproducible.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime
import io as _io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .data import CATEGORY_NAMES, PROMPT, gen_dataset, load_dataset, save_dataset, select
from .instrument import Profiles, collect_profiles
from .metrics import AlignmentScorer, ScorerConfig, Thresholds, train_scorer
from .model import ModelConfig, ToyLVLM, train
from .neurons import NeuronId, Scope
from .scoring import ARCH_ALPHA, ImportanceTable, score
from .search import (Evaluator, SearchConfig, load_report, progressive_search, random_control,
                     save_report)

DEFAULTS = {
    "model": {},
    "checkpoint": None,
    "dataset": {"n_per_category": 30, "seed": 0, "image_size": 32, "fractions": [0.5, 0.25, 0.25]},
    "train": {"epochs": 24, "lr": 1e-3, "batch_size": 8, "seed": 0},
    "scorer": {"steps": 300, "lr": 3e-3, "seed": 0},
    "prompt": PROMPT,
    "alpha": None,
    "scope": {"component": "lm", "site": "gate_out", "layers": None},
    "delta_k": 1,
    "k_max": None,
    "overshoot": 0,
    "thresholds": {"tau_ppl": 1.0, "tau_align": None, "align_degraded": None},
    "ppl_mode": "reference_trace",
    "max_len": 8,
    "control": {"n_trials": 20, "seed": 0},
    "categories": list(CATEGORY_NAMES),
    "out": "runs",
}

SUMMARY_HEADER = ["Object", "Neurons", "PPL_orig", "PPL_masked", "PPL_factor", "Align_orig",
                  "Align_masked", "Align_pct_change"]
CONTROL_HEADER = ["trial", "k", "mean_ppl", "delta_ppl", "align_score", "label"]


class DependencyError(RuntimeError):
    pass


class ProvenanceError(RuntimeError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, seed: Optional[int] = None, ppl_mode: Optional[str] = None,
             out: Optional[str] = None) -> "ExperimentConfig":
        user = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = _merge(DEFAULTS, user)
        if seed is not None:
            d["dataset"]["seed"] = d["train"]["seed"] = d["scorer"]["seed"] = d["control"]["seed"] = seed
            d["model"]["seed"] = seed
        if ppl_mode is not None:
            d["ppl_mode"] = {"reference": "reference_trace", "self": "self_trace"}.get(ppl_mode, ppl_mode)
        if out is not None:
            d["out"] = out
        return cls(d)

    def hashed(self) -> dict:
        d = copy.deepcopy(self.data)
        d.pop("out")  # where results go does not change what they are
        return d

    def canonical(self) -> str:
        return io.canonical_json(self.hashed())

    def config_hash(self) -> str:
        return io.sha256_bytes(self.canonical().encode())

    @property
    def root(self) -> Path:
        return Path(self.data["out"]) / self.config_hash()[:16]

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.data["model"])

    def scope(self) -> Scope:
        return Scope.from_dict(self.data["scope"])

    def alpha(self, model: ToyLVLM) -> float:
        a = self.data["alpha"]
        return ARCH_ALPHA[model.config.bridge] if a is None else float(a)

    def thresholds(self) -> Thresholds:
        return Thresholds(**self.data["thresholds"])


# -- helpers --------------------------------------------------------------------


def _log(cfg: ExperimentConfig, message: str):
    cfg.root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    with open(cfg.root / "run.log", "a", encoding="utf-8") as f:
        f.write(f"{stamp} {message}\n")


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_provenance(cfg: ExperimentConfig, path: Path, what: str) -> dict:
    if not path.exists():
        raise DependencyError(f"missing artifact {path} ({what}); run the earlier stage first")
    rec = json.loads(path.read_text(encoding="utf-8"))
    if rec.get("config_hash") != cfg.config_hash():
        raise ProvenanceError(f"{path} was produced by config {rec.get('config_hash')}, "
                              f"not {cfg.config_hash()}")
    return rec


def _check_file(path: Path, digest: str, what: str):
    if not path.exists():
        raise DependencyError(f"missing artifact {path} ({what})")
    if io.sha256_file(path) != digest:
        raise ProvenanceError(f"{path} changed since it was recorded ({what})")


def _categories(cfg: ExperimentConfig, category: str) -> list:
    if category == "all":
        return list(cfg.data["categories"])
    if category not in CATEGORY_NAMES:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORY_NAMES} or 'all'")
    return [category]


def dataset_hash(root: Path) -> str:
    """Hash of the manifest plus every image and caption file it lists."""
    h = io.sha256_bytes((root / "manifest.csv").read_bytes()).encode()
    parts = [h]
    with open(root / "manifest.csv", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            parts.append(io.sha256_file(root / row["image"]).encode())
            parts.append(io.sha256_file(root / row["caption"]).encode())
    return io.sha256_bytes(b"".join(parts))


def _load_data(cfg):
    rec = _read_provenance(cfg, cfg.root / "dataset.json", "cmd_gen output")
    droot = cfg.root / "dataset"
    if not (droot / "manifest.csv").exists():
        raise DependencyError(f"missing artifact {droot / 'manifest.csv'} (cmd_gen output)")
    if dataset_hash(droot) != rec["dataset_hash"]:
        raise ProvenanceError(f"{droot} does not match the recorded dataset hash")
    return load_dataset(droot), rec["dataset_hash"]


def _load_models(cfg):
    rec = _read_provenance(cfg, cfg.root / "train.json", "cmd_train output")
    _check_file(cfg.root / "model.arrays", rec["model_file_sha256"], "cmd_train output")
    _check_file(cfg.root / "scorer.arrays", rec["scorer_file_sha256"], "cmd_train output")
    return ToyLVLM.load(cfg.root / "model.arrays"), AlignmentScorer.load(cfg.root / "scorer.arrays"), rec


# -- commands -------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, category: str = "all") -> int:
    d = cfg.data["dataset"]
    samples = gen_dataset(d["n_per_category"], d["seed"], tuple(d["fractions"]), d["image_size"])
    droot = cfg.root / "dataset"
    save_dataset(samples, droot)
    _write_json(cfg.root / "config.json", cfg.hashed())
    _write_json(cfg.root / "dataset.json", {"config_hash": cfg.config_hash(),
                                            "dataset_hash": dataset_hash(droot), "n_samples": len(samples)})
    return 0


def cmd_train(cfg: ExperimentConfig, category: str = "all") -> int:
    samples, dhash = _load_data(cfg)
    trainset = select(samples, "train")
    t = cfg.data["train"]
    if cfg.data["checkpoint"]:
        model = ToyLVLM.load(cfg.data["checkpoint"])
        curve = []
    else:
        model, curve = train(ToyLVLM(cfg.model_config()), trainset, t["epochs"], t["lr"], t["batch_size"],
                             t["seed"], cfg.data["prompt"])
    s = cfg.data["scorer"]
    scorer, scurve = train_scorer(trainset, ScorerConfig(image_size=model.config.image_size, seed=s["seed"]),
                                  steps=s["steps"], lr=s["lr"], seed=s["seed"])
    model.save(cfg.root / "model.arrays")
    scorer.save(cfg.root / "scorer.arrays")
    lines = ["step,loss\n"] + [f"{i},{v!r}\n" for i, v in enumerate(curve)]
    (cfg.root / "train_curve.csv").write_text("".join(lines), encoding="utf-8")
    _write_json(cfg.root / "train.json", {
        "config_hash": cfg.config_hash(), "dataset_hash": dhash, "model_hash": model.content_hash(),
        "model_file_sha256": io.sha256_file(cfg.root / "model.arrays"),
        "scorer_file_sha256": io.sha256_file(cfg.root / "scorer.arrays"),
        "final_loss": curve[-1] if curve else None, "scorer_final_loss": scurve[-1],
    })
    return 0


def cmd_profile(cfg: ExperimentConfig, category: str = "all") -> int:
    samples, dhash = _load_data(cfg)
    model, _, trec = _load_models(cfg)
    for cat in _categories(cfg, category):
        prof = collect_profiles(model, select(samples, "rank", cat), cfg.data["prompt"])
        run = cfg.root / cat
        run.mkdir(parents=True, exist_ok=True)
        arrays = {"activations": prof.activations, "gradients": prof.gradients,
                  "sample_ids": np.asarray(prof.sample_ids, dtype=np.int64),
                  "first_tokens": np.asarray(prof.first_tokens, dtype=np.int64)}
        meta = {"config_hash": cfg.config_hash(), "model_hash": trec["model_hash"], "dataset_hash": dhash,
                "category": cat, "neurons": [n.to_record() for n in prof.neurons]}
        digest = io.write_arrays(run / "profiles.arrays", arrays, meta)
        _write_json(run / "profile.json", {"config_hash": cfg.config_hash(), "payload_sha256": digest,
                                           "file_sha256": io.sha256_file(run / "profiles.arrays")})
    return 0


def _load_profiles(cfg, cat) -> Profiles:
    run = cfg.root / cat
    rec = _read_provenance(cfg, run / "profile.json", f"cmd_profile output for {cat}")
    _check_file(run / "profiles.arrays", rec["file_sha256"], f"cmd_profile output for {cat}")
    arrays, meta = io.read_arrays(run / "profiles.arrays")
    neurons = [NeuronId.from_record(r) for r in meta["neurons"]]
    return Profiles(neurons, arrays["activations"], arrays["gradients"], arrays["sample_ids"].tolist(),
                    arrays["first_tokens"].tolist())


def cmd_rank(cfg: ExperimentConfig, category: str = "all") -> int:
    _, dhash = _load_data(cfg)
    model, _, trec = _load_models(cfg)
    for cat in _categories(cfg, category):
        table = score(_load_profiles(cfg, cat), cfg.alpha(model), dhash, trec["model_hash"])
        run = cfg.root / cat
        table.save(run / "ranking.csv")
        _write_json(run / "rank.json", {"config_hash": cfg.config_hash(), "alpha": table.alpha,
                                        "file_sha256": io.sha256_file(run / "ranking.csv")})
    return 0


def _load_table(cfg, cat) -> ImportanceTable:
    run = cfg.root / cat
    rec = _read_provenance(cfg, run / "rank.json", f"cmd_rank output for {cat}")
    _check_file(run / "ranking.csv", rec["file_sha256"], f"cmd_rank output for {cat}")
    return ImportanceTable.load(run / "ranking.csv", rec["alpha"])


def _search_config(cfg, model) -> SearchConfig:
    scope = cfg.scope()
    size = len(model.registry().in_scope(scope))
    k_max = cfg.data["k_max"] or size
    return SearchConfig(scope, k_max, cfg.data["delta_k"], cfg.thresholds(), cfg.data["ppl_mode"],
                        cfg.data["control"]["seed"], cfg.data["overshoot"], cfg.data["prompt"],
                        cfg.data["max_len"])


def cmd_search(cfg: ExperimentConfig, category: str = "all") -> int:
    samples, _ = _load_data(cfg)
    model, scorer, _ = _load_models(cfg)
    scfg = _search_config(cfg, model)
    pool = select(samples, "val")
    for cat in _categories(cfg, category):
        table = _load_table(cfg, cat)
        val = select(samples, "val", cat)
        ev = Evaluator(model, val, scorer, scfg.prompt, scfg.ppl_mode, scfg.max_len, chance_pool=pool)
        report = progressive_search(model, table, val, scfg, scorer, evaluator=ev)
        run = cfg.root / cat
        save_report(report, run)
        _write_json(run / "search.json", {"config_hash": cfg.config_hash(), "search_hash": report.config_hash,
                                          "file_sha256": io.sha256_file(run / "report.json"),
                                          "k_star": report.k_star})
        _log(cfg, f"search {cat}: k*={report.k_star}")
    return 0


def _load_search(cfg, cat):
    run = cfg.root / cat
    rec = _read_provenance(cfg, run / "search.json", f"cmd_search output for {cat}")
    _check_file(run / "report.json", rec["file_sha256"], f"cmd_search output for {cat}")
    return load_report(run)


def control_k(report) -> tuple:
    """``(k, source)``: k* when found, else the step with the largest perplexity jump."""
    if report.k_star is not None:
        return report.k_star, "k_star"
    best = max(report.trajectory, key=lambda p: (p.delta_ppl, -p.k))
    return best.k, "max_delta"


def cmd_control(cfg: ExperimentConfig, category: str = "all") -> int:
    samples, _ = _load_data(cfg)
    model, scorer, _ = _load_models(cfg)
    scfg = _search_config(cfg, model)
    c = cfg.data["control"]
    pool = select(samples, "val")
    for cat in _categories(cfg, category):
        report = _load_search(cfg, cat)
        table = _load_table(cfg, cat)
        k, source = control_k(report)
        val = select(samples, "val", cat)
        ev = Evaluator(model, val, scorer, scfg.prompt, scfg.ppl_mode, scfg.max_len, chance_pool=pool)
        points = random_control(model, scfg.scope, k, c["n_trials"], val, c["seed"], table=table, scorer=scorer,
                                thresholds=report.thresholds, evaluator=ev)
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CONTROL_HEADER)
        for i, p in enumerate(points):
            w.writerow([i, p.k, repr(p.mean_ppl), repr(p.delta_ppl),
                        "NaN" if p.align_score is None else repr(p.align_score), p.label or ""])
        run = cfg.root / cat
        (run / "control.csv").write_text(buf.getvalue(), encoding="utf-8")
        _write_json(run / "control.json", {"config_hash": cfg.config_hash(), "k": k, "k_source": source,
                                           "file_sha256": io.sha256_file(run / "control.csv")})
    return 0


# -- summary table ----------------------------------------------------------------


def fmt_value(x: Optional[float]) -> str:
    """Two decimals below 100, otherwise ``<mantissa>e<exponent>`` with a two-decimal mantissa."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NaN"
    if abs(x) < 100:
        return f"{x:.2f}"
    e = int(math.floor(math.log10(abs(x))))
    m = x / 10 ** e
    if abs(round(m, 2)) >= 10:
        m, e = m / 10, e + 1
    return f"{m:.2f}e{e}"


def summary_row(obj: str, neurons, ppl_orig: float, ppl_masked: float, align_orig: Optional[float],
                align_masked: Optional[float], factor: Optional[int] = None) -> list:
    """One row of the summary table. Undefined masked alignment counts as 0 for the percent change."""
    if factor is None:
        factor = int(round(ppl_masked / ppl_orig))
    a_m = 0.0 if align_masked is None else align_masked
    pct = "NaN" if not align_orig else f"{(a_m - align_orig) / align_orig * 100:.0f}%"
    return [obj, "NaN" if neurons is None else str(neurons), fmt_value(ppl_orig), fmt_value(ppl_masked),
            str(factor), fmt_value(align_orig), fmt_value(align_masked), pct]


def summary_csv(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(cfg: ExperimentConfig, category: str = "all") -> int:
    rows = []
    hashes = set()
    for cat in _categories(cfg, category):
        report = _load_search(cfg, cat)
        hashes.add(report.config_hash)
        end = report.point_at(report.k_star) if report.k_star is not None else report.trajectory[-1]
        rows.append(summary_row(cat, report.k_star, report.baseline.mean_ppl, end.mean_ppl,
                                report.baseline.align_score, end.align_score))
    if len(hashes) > 1:
        raise ProvenanceError(f"search reports come from different search configs: {sorted(hashes)}")
    (cfg.root / "summary.csv").write_text(summary_csv(rows), encoding="utf-8")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "profile": cmd_profile, "rank": cmd_rank,
            "search": cmd_search, "control": cmd_control, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lesionlab", description="Neuron-ablation collapse experiments on a toy LVLM.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["all"]:
        p = sub.add_parser(name, help="run every stage in order" if name == "all" else f"run the {name} stage")
        p.add_argument("--config", help="JSON experiment config (defaults are used for missing keys)")
        p.add_argument("--category", default="all", help="category name or 'all'")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--ppl-mode", choices=["reference", "self"], help="perplexity trace mode")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config, args.seed, args.ppl_mode, args.out)
        names = list(COMMANDS) if args.command == "all" else [args.command]
        cfg.root.mkdir(parents=True, exist_ok=True)
        with io.dir_lock(cfg.root):
            for name in names:
                _log(cfg, f"start {name} category={args.category}")
                COMMANDS[name](cfg, args.category)
                _log(cfg, f"done {name}")
    except (DependencyError, ProvenanceError, io.LockError, io.FormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(cfg.root)
    return 0


if __name__ == "__main__":
    sys.exit(main())
