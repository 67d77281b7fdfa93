"""End-to-end stages: generate data, build PKGs, pre-train, fine-tune, evaluate."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import apply_state, load_checkpoint, model_state
from .cohortgen import Cohort, KnowledgeGraph, Vocabulary, default_task_codes, gen_cohort, gen_kg
from .config import ExperimentConfig
from .eval import ate_conclusion, auc, aupr, estimate_dict, fit_plugin, if_pehe, positivity_report, true_pehe
from .model import KGTreatModel
from .pkg import DualPkg, build_dual_pkgs, task_anchors
from .training import evaluate_pretraining, finetune, predict, pretrain


@dataclass
class Dataset:
    vocab: Vocabulary
    kg: KnowledgeGraph
    pretrain: Cohort
    downstream: list[Cohort]


def generate(cfg: ExperimentConfig) -> Dataset:
    """KG, an unlabeled pre-training cohort and labeled downstream cohorts
    with disjoint patient ids."""
    vocab = cfg.vocabulary()
    task = default_task_codes(vocab)
    kg = gen_kg(cfg.kg_config(), vocab, task)
    n_pre, n_down = cfg.data.pretrain_patients, cfg.data.downstream_patients
    pre = gen_cohort(cfg.cohort_config(n_pre, False, 0, seed=cfg.seed * 7919 + 1), kg, vocab, task)
    downs = [
        gen_cohort(cfg.cohort_config(n_down, True, n_pre + i * n_down, seed=cfg.seed * 7919 + 2 + i), kg, vocab, task)
        for i in range(cfg.data.n_downstream)
    ]
    return Dataset(vocab, kg, pre, downs)


def save_dataset(ds: Dataset, out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "kg.tsv", out / "pretrain.jsonl"] + [out / f"downstream_{i}.jsonl" for i in range(len(ds.downstream))]
    ds.kg.save(paths[0])
    ds.pretrain.save(paths[1])
    for p, c in zip(paths[2:], ds.downstream):
        c.save(p)
    return paths


def load_dataset(out: str | Path) -> Dataset:
    out = Path(out)
    kg = KnowledgeGraph.load(out / "kg.tsv")
    pre = Cohort.load(out / "pretrain.jsonl")
    downs = [Cohort.load(p) for p in sorted(out.glob("downstream_*.jsonl"), key=lambda p: int(p.stem.split("_")[1]))]
    return Dataset(pre.vocab, kg, pre, downs)


def summary(ds: Dataset) -> list[dict]:
    """Per-cohort statistics: patients, treated share, outcome rate, codes and visits per patient."""
    rows = []
    for name, c in [("pretrain", ds.pretrain)] + [(f"downstream_{i}", d) for i, d in enumerate(ds.downstream)]:
        n = len(c.records)
        codes = sum(len(r.codes()) for r in c.records)
        visits = sum(len(r.visits) for r in c.records)
        row = {"cohort": name, "patients": n, "codes_per_patient": codes / n, "visits_per_patient": visits / n}
        if c.labeled:
            row["treated"] = float(np.mean([r.treatment for r in c.records]))
            row["outcome_rate"] = float(np.mean([r.outcome for r in c.records]))
        rows.append(row)
    return rows


def covariate_pkgs(records, kg, cfg: ExperimentConfig) -> list[DualPkg]:
    return [build_dual_pkgs(r, None, None, kg, cfg.pkg.k, cfg.pkg.cap) for r in records]


def anchored_pkgs(cohort: Cohort, records, kg, cfg: ExperimentConfig) -> list[DualPkg]:
    t, o = task_anchors(kg, cohort.treatment_code, cohort.outcome_code)
    return [build_dual_pkgs(r, t, o, kg, cfg.pkg.k, cfg.pkg.cap) for r in records]


def new_model(cfg: ExperimentConfig, ds: Dataset) -> KGTreatModel:
    return KGTreatModel(cfg.model_config(ds.vocab.size, ds.kg.n_nodes, ds.kg.n_relations))


def run_pretrain(cfg: ExperimentConfig, ds: Dataset, log_path=None, eval_records: int = 400):
    """Pre-train on the unlabeled cohort's train split; returns (model, history, held-out report)."""
    model = new_model(cfg, ds)
    pcfg = cfg.pretrain_config()
    use_kg = model.cfg.use_kg
    train = ds.pretrain.subset("train")
    held = ds.pretrain.subset("val")[:eval_records]
    duals = covariate_pkgs(train, ds.kg, cfg) if use_kg else None
    held_duals = covariate_pkgs(held, ds.kg, cfg) if use_kg else None
    code_map = ds.kg.code_map if use_kg else None
    history = pretrain(model, train, duals, ds.vocab, code_map, pcfg, log_path)
    report = evaluate_pretraining(model, held, held_duals, ds.vocab, code_map, pcfg)
    return model, history, report


def run_finetune(cfg: ExperimentConfig, ds: Dataset, cohort: Cohort, backbone: dict | None = None, log_path=None):
    """Fresh model, optional backbone load (heads stay fresh), then fine-tuning."""
    model = new_model(cfg, ds)
    if backbone is not None:
        apply_state(model, backbone, groups="backbone")
    use_kg = model.cfg.use_kg
    train, val = cohort.subset("train"), cohort.subset("val")
    td = anchored_pkgs(cohort, train, ds.kg, cfg) if use_kg else None
    vd = anchored_pkgs(cohort, val, ds.kg, cfg) if use_kg else None
    history = finetune(model, train, td, val, vd, ds.vocab, cfg.finetune_config(), log_path)
    return model, history


def evaluate(cfg: ExperimentConfig, ds: Dataset, cohort: Cohort, pred: dict, plugin=None) -> dict:
    """Metrics on the cohort's test split from per-patient predictions."""
    test = cohort.subset("test")
    a = np.array([r.treatment for r in test], dtype=float)
    y = np.array([r.outcome for r in test], dtype=float)
    factual = np.where(a == 1, pred["mu1"], pred["mu0"])
    if plugin is None:
        plugin = fit_plugin(cohort.subset("train"), ds.vocab.size, cfg.eval.plugin_rounds)
    pi_raw = plugin.propensity_raw(test)
    out = {"n_test": len(test)}
    try:
        out["auc"], out["aupr"] = auc(y, factual), aupr(y, factual)
    except ValueError:
        out["auc"] = out["aupr"] = None
    out["if_pehe"] = if_pehe(a, pi_raw, plugin.effect(test), pred["effect"], y, cfg.eval.if_variant)
    out["true_pehe"] = true_pehe(pred["effect"], test, cfg.eval.truth)
    est = ate_conclusion(pred["effect"], cfg.eval.n_bootstrap, cfg.eval.alpha, seed=cfg.seed)
    out.update(estimate_dict(est))
    out["overlap"] = positivity_report(np.clip(pi_raw, *plugin.clip), cfg.eval.positivity_eps)["overlap"]
    return out


def predict_cohort(cfg: ExperimentConfig, ds: Dataset, cohort: Cohort, model: KGTreatModel, split: str = "test") -> dict:
    recs = cohort.subset(split)
    duals = anchored_pkgs(cohort, recs, ds.kg, cfg) if model.cfg.use_kg else None
    return predict(model, recs, duals, ds.vocab)


def run_all(cfg: ExperimentConfig, ds: Dataset, cohort_index: int = 0, backbone: dict | None = None) -> dict:
    """Algorithm end to end for one downstream cohort; returns the metrics dict."""
    cohort = ds.downstream[cohort_index]
    report = {}
    if cfg.pretrain_enabled and backbone is None:
        pre_model, _, report = run_pretrain(cfg, ds)
        backbone = model_state(pre_model)
    if not cfg.pretrain_enabled:
        backbone = None
    model, _ = run_finetune(cfg, ds, cohort, backbone)
    metrics = evaluate(cfg, ds, cohort, predict_cohort(cfg, ds, cohort, model))
    metrics["pretrain"] = report
    return stamp(metrics, cfg)


def stamp(metrics: dict, cfg: ExperimentConfig) -> dict:
    metrics["fingerprint"] = cfg.fingerprint()
    metrics["config"] = cfg.family_fingerprint()
    metrics["label"] = cfg.label()
    metrics["ablation"] = list(cfg.ablation.active)
    metrics["seed"] = cfg.seed
    return metrics


def attention_records(cfg: ExperimentConfig, ds: Dataset, cohort: Cohort, model: KGTreatModel, split: str = "test",
                      batch_size: int = 32) -> list[dict]:
    """Per patient: anchor-pool weights over codes and the weight each PKG node
    sends to the CLS node in the last graph layer, for both focuses."""
    if not model.cfg.use_kg:
        return []
    from . import numerics as nx
    from .model import make_batch

    recs = cohort.subset(split)
    duals = anchored_pkgs(cohort, recs, ds.kg, cfg)
    model.eval()
    model.keep_attention(True)
    rows = []
    try:
        with nx.no_grad():
            for s in range(0, len(recs), batch_size):
                part, dpart = recs[s : s + batch_size], duals[s : s + batch_size]
                b = make_batch(part, dpart, ds.vocab, model.cfg)
                model.forward(b)
                att = model.attention
                for i, r in enumerate(part):
                    n_tok = int(b.seq.mask[i].sum())
                    row = {"pid": r.pid, "tokens": b.seq.tokens[i, :n_tok].tolist()}
                    for side, gb in (("a", b.graph_a), ("y", b.graph_y)):
                        if att[f"pool_{side}"]:
                            row[f"code_weight_{side}"] = att[f"pool_{side}"][-1][i, :n_tok].tolist()
                        if att[f"graph_{side}"]:
                            alpha = att[f"graph_{side}"][-1]
                            cls = gb.cls_flat[i]
                            into = (gb.dst == cls) & (gb.src != cls)
                            row[f"nodes_{side}"] = gb.node_ids[gb.src[into]].tolist()
                            row[f"node_weight_{side}"] = alpha[into].tolist()
                    rows.append(row)
    finally:
        model.keep_attention(False)
    return rows


def dumps_metrics(m: dict) -> str:
    return json.dumps(m, indent=2, sort_keys=True)
