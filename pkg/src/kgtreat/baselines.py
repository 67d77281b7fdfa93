"""Shared-trunk effect baselines without KG input: TARNet, DragonNet, TNet.

All three reuse the sequence encoder and head layout of the main model with
the graph side switched off, and train only on downstream data.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cohortgen import PatientRecord, Vocabulary
from .model import KGTreatModel, ModelBatch, ModelConfig
from .training import FinetuneConfig, finetune, finetune_loss, predict

VARIANTS = ("tarnet", "dragonnet", "tnet")


def trunk_config(cfg: ModelConfig, seed: int | None = None) -> ModelConfig:
    return replace(cfg, use_kg=False, gnn_layers=0, synergy_layers=0, seed=cfg.seed if seed is None else seed)


def tarnet_loss(model: KGTreatModel, batch: ModelBatch):
    """Factual-arm outcome BCE only."""
    lt, lc, l1 = model.logits(model.forward(batch))
    return finetune_loss(lt, lc, l1, batch.treatment, batch.outcome, beta=0.0)[2]


def dragonnet_loss(model: KGTreatModel, batch: ModelBatch, beta: float = 1.0):
    """Factual outcome BCE plus beta times the treatment BCE."""
    lt, lc, l1 = model.logits(model.forward(batch))
    return finetune_loss(lt, lc, l1, batch.treatment, batch.outcome, beta=beta)[2]


@dataclass
class Baseline:
    variant: str
    model: KGTreatModel

    def predict(self, records, vocab: Vocabulary, duals=None) -> dict[str, np.ndarray]:
        # PKGs are deliberately dropped
        return predict(self.model, records, None, vocab)


@dataclass
class TNet:
    control: KGTreatModel
    treated: KGTreatModel
    variant: str = "tnet"

    def predict(self, records, vocab: Vocabulary, duals=None) -> dict[str, np.ndarray]:
        p0 = predict(self.control, records, None, vocab)
        p1 = predict(self.treated, records, None, vocab)
        return {
            "propensity": np.full(len(records), np.nan),
            "mu0": p0["mu0"],
            "mu1": p1["mu1"],
            "effect": p1["mu1"] - p0["mu0"],
        }


def fit_shared(variant, train, val, vocab, cfg: ModelConfig, ft: FinetuneConfig) -> Baseline:
    if variant not in ("tarnet", "dragonnet"):
        raise ValueError(f"unknown shared-trunk variant {variant!r}")
    model = KGTreatModel(trunk_config(cfg))
    beta = 0.0 if variant == "tarnet" else ft.beta
    finetune(model, train, None, val, None, vocab, replace(ft, beta=beta))
    return Baseline(variant, model)


def tnet_fit(train: list[PatientRecord], val, vocab, cfg: ModelConfig, ft: FinetuneConfig) -> TNet:
    """One model per arm, each trained on that arm's records only."""
    models = []
    for arm, name in ((0, "control"), (1, "treated")):
        tr = [r for r in train if r.treatment == arm]
        if not tr:
            raise ValueError(f"TNet needs both arms; the {name} arm is empty")
        va = [r for r in val if r.treatment == arm]
        m = KGTreatModel(trunk_config(cfg, seed=cfg.seed + arm))
        # with one arm present the factual loss touches only that arm's head
        finetune(m, tr, None, va, None, vocab, replace(ft, beta=0.0))
        models.append(m)
    return TNet(*models)


def fit_baseline(variant: str, train, val, vocab, cfg: ModelConfig, ft: FinetuneConfig):
    if variant == "tnet":
        return tnet_fit(train, val, vocab, cfg, ft)
    return fit_shared(variant, train, val, vocab, cfg, ft)
