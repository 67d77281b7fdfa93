"""Experiment configuration: sectioned key-value files, profiles, fingerprints."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .cohortgen import CohortConfig, KGConfig, Vocabulary, fingerprint
from .model import ModelConfig
from .training import FinetuneConfig, PretrainConfig

ABLATIONS = ("wo-dive", "wo-kg", "wo-pretrain", "wo-pretrain-kg")


class ConfigParseError(ValueError):
    pass


@dataclass
class DataSection:
    n_med: int = 90
    n_diag: int = 97
    pretrain_patients: int = 5000
    downstream_patients: int = 2000
    n_downstream: int = 1
    gamma: float = 1.0
    effect: str = "heterogeneous"
    ate: float = -0.05
    effect_het: float = 0.2
    latent_rate: float = 0.4
    child_rate: float = 0.5
    outcome_latent_weight: float = 1.5
    child_background: float = 1.0
    visits_min: int = 3
    visits_max: int = 10
    codes_min: int = 1
    codes_max: int = 4
    train_frac: float = 0.9
    val_frac: float = 0.05
    test_frac: float = 0.05


@dataclass
class KGSection:
    n_nodes: int = 500
    n_relations: int = 10
    density: float = 0.003
    n_confounders: int = 2
    confounder_degree: int = 12


@dataclass
class PkgSection:
    k: int = 2
    cap: int = 200


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    graph_dim: int = 64
    node_feature_width: int = 200
    gnn_layers: int = 2
    synergy_layers: int = 2
    max_len: int = 256
    dropout: float = 0.1
    strict_batchnorm: bool = False


@dataclass
class PretrainSection:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    warmup_frac: float = 0.1
    mask_rate: float = 0.15
    n_negatives: int = 64
    triples_per_pkg: int = 8
    use_mcp: bool = True
    use_lp: bool = True
    lp_form: str = "standard"
    lp_normalize: bool = False


@dataclass
class FinetuneSection:
    epochs: int = 2
    lr: float = 5e-5
    batch_size: int = 32
    beta: float = 1.0
    warmup_frac: float = 0.1
    # recorded for fidelity; only meaningful for claims-data adapters
    baseline_window: int = 360


@dataclass
class EvalSection:
    n_bootstrap: int = 20
    alpha: float = 0.05
    if_variant: str = "printed"
    plugin_rounds: int = 50
    positivity_eps: float = 0.05
    truth: str = "conditional"


@dataclass
class AblationSection:
    variants: str = ""  # comma separated subset of ABLATIONS

    @property
    def active(self) -> tuple[str, ...]:
        return tuple(v.strip() for v in self.variants.split(",") if v.strip())


SECTIONS = {
    "data": DataSection,
    "kg": KGSection,
    "pkg": PkgSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "finetune": FinetuneSection,
    "eval": EvalSection,
    "ablation": AblationSection,
}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    kg: KGSection = field(default_factory=KGSection)
    pkg: PkgSection = field(default_factory=PkgSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    seed: int = 0

    # -- derived objects -------------------------------------------------------
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.data.n_med, self.data.n_diag)

    def kg_config(self) -> KGConfig:
        k = self.kg
        return KGConfig(k.n_nodes, k.n_relations, k.density, k.n_confounders, k.confounder_degree, seed=self.seed)

    def cohort_config(self, n: int, labeled: bool, id_offset: int, seed: int) -> CohortConfig:
        d = self.data
        return CohortConfig(
            n_patients=n,
            visits=(d.visits_min, d.visits_max),
            codes_per_visit=(d.codes_min, d.codes_max),
            gamma=d.gamma,
            effect=d.effect,
            ate=d.ate,
            effect_het=d.effect_het,
            latent_rate=d.latent_rate,
            child_rate=d.child_rate,
            outcome_latent_weight=d.outcome_latent_weight,
            child_background=d.child_background,
            labeled=labeled,
            id_offset=id_offset,
            split=(d.train_frac, d.val_frac, d.test_frac),
            seed=seed,
        )

    def model_config(self, vocab_size: int, n_kg_nodes: int, n_kg_relations: int) -> ModelConfig:
        m = self.model
        use_kg, _, no_dive = resolve_ablation(self.ablation.active)
        return ModelConfig(
            vocab_size=vocab_size,
            n_kg_nodes=n_kg_nodes,
            n_kg_relations=n_kg_relations,
            d_model=m.d_model,
            n_heads=m.n_heads,
            n_layers=m.n_layers,
            d_ff=m.d_ff,
            graph_dim=m.graph_dim,
            node_feature_width=m.node_feature_width,
            gnn_layers=m.gnn_layers if use_kg else 0,
            synergy_layers=0 if (no_dive or not use_kg) else m.synergy_layers,
            max_len=m.max_len,
            dropout=m.dropout,
            use_kg=use_kg,
            strict_batchnorm=m.strict_batchnorm,
            seed=self.seed,
        )

    def pretrain_config(self) -> PretrainConfig:
        use_kg = resolve_ablation(self.ablation.active)[0]
        p = asdict(self.pretrain)
        p["use_lp"] = p["use_lp"] and use_kg
        return PretrainConfig(seed=self.seed, **p)

    def finetune_config(self) -> FinetuneConfig:
        f = asdict(self.finetune)
        f.pop("baseline_window")
        return FinetuneConfig(seed=self.seed, **f)

    @property
    def pretrain_enabled(self) -> bool:
        return resolve_ablation(self.ablation.active)[1]

    def fingerprint(self) -> str:
        return fingerprint(canonical(self))

    def family_fingerprint(self) -> str:
        """Hash of the configuration with the seed left out, shared by repeat runs."""
        return fingerprint({k: v for k, v in canonical(self).items() if k != "seed"})

    def label(self) -> str:
        return "+".join(self.ablation.active) or "full"

    def data_fingerprint(self) -> str:
        """Hash of everything that shapes generated data and PKGs."""
        return fingerprint({"data": asdict(self.data), "kg": asdict(self.kg), "pkg": asdict(self.pkg), "seed": self.seed})

    def backbone_fingerprint(self) -> str:
        """Hash of what a pre-trained checkpoint must agree on to be reused."""
        use_kg = resolve_ablation(self.ablation.active)[0]
        return fingerprint(
            {"data": self.data_fingerprint(), "model": asdict(self.model), "pretrain": asdict(self.pretrain), "kg": use_kg}
        )


def resolve_ablation(active) -> tuple[bool, bool, bool]:
    """``(use_kg, pretrain, no_dive)`` for a set of ablation names.

    Rejects unknown names and combinations that make no sense together.
    """
    s = set(active)
    unknown = s - set(ABLATIONS)
    if unknown:
        raise ConfigParseError(f"unknown ablation(s): {sorted(unknown)}; choose from {ABLATIONS}")
    if "wo-pretrain-kg" in s and len(s) > 1:
        raise ConfigParseError("wo-pretrain-kg already removes pre-training and KGs; use it alone")
    if "wo-kg" in s and "wo-dive" in s:
        raise ConfigParseError("wo-dive has no meaning once KGs are removed")
    if {"wo-kg", "wo-pretrain"} <= s:
        raise ConfigParseError("combine wo-kg and wo-pretrain as wo-pretrain-kg")
    use_kg = not ({"wo-kg", "wo-pretrain-kg"} & s)
    pretrain = not ({"wo-pretrain", "wo-pretrain-kg"} & s)
    return use_kg, pretrain, "wo-dive" in s


# -- profiles -------------------------------------------------------------------
def profile(name: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if name == "desk":
        return cfg
    if name == "smoke":
        return replace(
            cfg,
            data=replace(cfg.data, n_med=40, n_diag=37, pretrain_patients=400, downstream_patients=400),
            kg=replace(cfg.kg, n_nodes=150, density=0.008),
            model=replace(cfg.model, d_model=32, n_heads=2, d_ff=64, graph_dim=32, max_len=64),
            pretrain=replace(cfg.pretrain, steps=60, lr=1e-3, n_negatives=16),
            finetune=replace(cfg.finetune, epochs=2, lr=1e-3),
        )
    if name == "confounder":
        # many rare child codes that only appear through their latent factor:
        # the factor is easy to see as one KG node and hard to see in the codes
        return replace(
            cfg,
            data=replace(
                cfg.data, pretrain_patients=3000, effect_het=0.4, child_rate=0.2, child_background=0.0,
                train_frac=0.7, val_frac=0.1, test_frac=0.2,
            ),
            kg=replace(cfg.kg, confounder_degree=24),
            pretrain=replace(cfg.pretrain, steps=1000),
            finetune=replace(cfg.finetune, epochs=8, lr=5e-5, batch_size=8),
        )
    if name == "paper":
        return replace(
            cfg,
            model=replace(
                cfg.model, d_model=768, n_heads=12, n_layers=12, d_ff=3072, graph_dim=200, gnn_layers=5, synergy_layers=5
            ),
            pretrain=replace(cfg.pretrain, steps=200_000, batch_size=28, lr=1e-4, warmup_frac=0.1),
            finetune=replace(cfg.finetune, epochs=2, lr=5e-5, batch_size=32, beta=1.0),
        )
    raise ConfigParseError(f"unknown profile {name!r}; choose smoke, desk, confounder or paper")


PROFILES = ("smoke", "desk", "confounder", "paper")


# -- text format ----------------------------------------------------------------
def _coerce(kind, raw: str, where: str):
    try:
        if kind in (bool, "bool"):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigParseError(f"{where}: cannot read {raw!r} as {kind}") from None


def canonical(cfg: ExperimentConfig) -> dict:
    return {name: asdict(getattr(cfg, name)) for name in SECTIONS} | {"seed": cfg.seed}


def dumps(cfg: ExperimentConfig) -> str:
    lines = [f"seed = {cfg.seed}", ""]
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for k, v in asdict(getattr(cfg, name)).items():
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse sectioned ``key = value`` text over ``base`` (default: desk).

    A top-level ``profile = name`` line selects the base profile.
    """
    parser = configparser.ConfigParser(default_section="__none__", interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigParseError(str(exc)) from None
    top = dict(parser["__top__"])
    if base is None:
        base = profile(top.pop("profile", "desk"))
    else:
        top.pop("profile", None)
    cfg = replace(base)
    seed = cfg.seed
    if "seed" in top:
        seed = _coerce(int, top.pop("seed"), "seed")
    if top:
        raise ConfigParseError(f"unknown top-level keys: {sorted(top)}")
    updates = {}
    for sec in parser.sections():
        if sec == "__top__":
            continue
        if sec not in SECTIONS:
            raise ConfigParseError(f"unknown section [{sec}]")
        current = getattr(cfg, sec)
        kinds = {f.name: f.type for f in fields(current)}
        vals = {}
        for k, raw in parser[sec].items():
            if k not in kinds:
                raise ConfigParseError(f"unknown key {k!r} in [{sec}]")
            vals[k] = _coerce(kinds[k], raw, f"[{sec}] {k}")
        updates[sec] = replace(current, **vals)
    cfg = replace(cfg, seed=seed, **updates)
    resolve_ablation(cfg.ablation.active)
    return cfg


def load(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return loads(Path(path).read_text(), base)
