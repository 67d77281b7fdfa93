"""Synthetic knowledge graphs and patient cohorts with known potential outcomes.

Confounding enters through latent concept nodes in the KG. Each latent node
has KG edges to a set of covariate codes (its "children") and to the task's
treatment and outcome concepts, but no vocabulary code of its own. A patient
carrying the latent factor emits its children codes more often, and the
factor shifts both the treatment propensity and the outcome risk, so the
only way to recover it from data is through the codes, and the only compact
way to see it is through the graph.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

PAD, CLS, MASK = 0, 1, 2
N_SPECIAL = 3
TYPE_DEMO, TYPE_MED, TYPE_DIAG = 0, 1, 2
EPS_PROPENSITY = 0.05


class ConfigError(ValueError):
    pass


class UnsupportedOperation(RuntimeError):
    pass


def fingerprint(obj) -> str:
    """Stable short hash of a JSON-able (or dataclass) configuration."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- vocabulary --------------------------------------------------------------
@dataclass(frozen=True)
class Vocabulary:
    """Code ids: specials, then demographics (age buckets, gender), meds, diagnoses."""

    n_med: int
    n_diag: int
    n_age: int = 8
    n_gender: int = 2

    def __post_init__(self):
        if min(self.n_med, self.n_diag, self.n_age, self.n_gender) <= 0:
            raise ConfigError("every vocabulary partition must be non-empty")

    @property
    def n_demo(self) -> int:
        return self.n_age + self.n_gender

    @property
    def size(self) -> int:
        return N_SPECIAL + self.n_demo + self.n_med + self.n_diag

    @property
    def demo_ids(self) -> np.ndarray:
        return np.arange(N_SPECIAL, N_SPECIAL + self.n_demo)

    @property
    def med_ids(self) -> np.ndarray:
        start = N_SPECIAL + self.n_demo
        return np.arange(start, start + self.n_med)

    @property
    def diag_ids(self) -> np.ndarray:
        start = N_SPECIAL + self.n_demo + self.n_med
        return np.arange(start, start + self.n_diag)

    @property
    def clinical_ids(self) -> np.ndarray:
        return np.arange(N_SPECIAL + self.n_demo, self.size)

    def age_code(self, bucket: int) -> int:
        return N_SPECIAL + bucket

    def gender_code(self, g: int) -> int:
        return N_SPECIAL + self.n_age + g

    def code_types(self) -> np.ndarray:
        """Type id per code (specials share the demographic row)."""
        t = np.full(self.size, TYPE_DEMO, dtype=np.int64)
        t[self.med_ids] = TYPE_MED
        t[self.diag_ids] = TYPE_DIAG
        return t

    def type_of(self, code: int) -> int:
        return int(self.code_types()[code])


# -- knowledge graph -----------------------------------------------------------
@dataclass
class KGConfig:
    n_nodes: int = 500
    n_relations: int = 10
    density: float = 0.003
    n_confounders: int = 2
    confounder_degree: int = 12
    seed: int = 0


@dataclass
class KnowledgeGraph:
    n_nodes: int
    n_relations: int
    triples: np.ndarray  # (E, 3) head, relation, tail
    code_map: dict[int, int] = field(default_factory=dict)
    latent_nodes: list[int] = field(default_factory=list)
    latent_children: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if self.triples.size:
            ends = self.triples[:, [0, 2]]
            if ends.min() < 0 or ends.max() >= self.n_nodes:
                raise ValueError("triple endpoint outside node range")
            r = self.triples[:, 1]
            if r.min() < 0 or r.max() >= self.n_relations:
                raise ValueError("relation id outside relation range")
        nodes = list(self.code_map.values())
        if len(set(nodes)) != len(nodes):
            raise ValueError("code_map must be injective")
        self._adj: list[np.ndarray] | None = None
        self._edges: dict[tuple[int, int], list[tuple[int, int, int]]] | None = None

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_nodes)

    @property
    def adjacency(self) -> list[np.ndarray]:
        """Undirected neighbour index, sorted per node."""
        if self._adj is None:
            nbrs: list[set[int]] = [set() for _ in range(self.n_nodes)]
            for h, _, t in self.triples:
                if h != t:
                    nbrs[h].add(int(t))
                    nbrs[t].add(int(h))
            self._adj = [np.array(sorted(s), dtype=np.int64) for s in nbrs]
        return self._adj

    def edges_between(self, u: int, v: int) -> list[tuple[int, int, int]]:
        if self._edges is None:
            idx: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
            for h, r, t in self.triples.tolist():
                idx.setdefault((min(h, t), max(h, t)), []).append((h, r, t))
            self._edges = idx
        return self._edges.get((min(u, v), max(u, v)), [])

    def node_of(self, code: int) -> int | None:
        return self.code_map.get(int(code))

    # file format: head<TAB>relation<TAB>tail lines, then "#codemap" section
    def save(self, path: str | Path) -> None:
        lines = [f"#kg\t{self.n_nodes}\t{self.n_relations}"]
        lines += [f"{h}\t{r}\t{t}" for h, r, t in self.triples.tolist()]
        lines.append("#codemap")
        lines += [f"{c}\t{n}" for c, n in sorted(self.code_map.items())]
        if self.latent_nodes:
            lines.append("#latent")
            for k in self.latent_nodes:
                kids = ",".join(map(str, self.latent_children.get(k, [])))
                lines.append(f"{k}\t{kids}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeGraph":
        section = "triples"
        n_nodes = n_rel = None
        triples, code_map, latent, children = [], {}, [], {}
        for raw in Path(path).read_text().splitlines():
            if not raw.strip():
                continue
            if raw.startswith("#"):
                parts = raw.split("\t")
                if parts[0] == "#kg":
                    n_nodes, n_rel = int(parts[1]), int(parts[2])
                else:
                    section = parts[0][1:]
                continue
            parts = raw.split("\t")
            if section == "triples":
                triples.append([int(p) for p in parts])
            elif section == "codemap":
                code_map[int(parts[0])] = int(parts[1])
            elif section == "latent":
                k = int(parts[0])
                latent.append(k)
                children[k] = [int(c) for c in parts[1].split(",")] if len(parts) > 1 and parts[1] else []
        arr = np.array(triples, dtype=np.int64).reshape(-1, 3)
        if n_nodes is None:
            n_nodes = int(max(arr[:, [0, 2]].max(initial=-1), max(code_map.values(), default=-1)) + 1)
            n_rel = int(arr[:, 1].max(initial=-1) + 1)
        return cls(n_nodes, n_rel, arr, code_map, latent, children)


def gen_kg(
    cfg: KGConfig,
    vocab: Vocabulary | None = None,
    task_codes: tuple[int, ...] = (),
) -> KnowledgeGraph:
    """Random multi-relational graph plus latent confounder structure.

    Every ordered pair of distinct nodes carries an edge with probability
    ``density`` under a uniformly drawn relation. Clinical codes of ``vocab``
    are mapped onto a random subset of nodes; latent nodes are picked among
    the unmapped ones and wired to ``confounder_degree`` covariate codes and to
    every code in ``task_codes``.
    """
    if cfg.n_nodes <= 0 or cfg.n_relations <= 0:
        raise ConfigError("node and relation counts must be positive")
    if not 0.0 < cfg.density <= 1.0:
        raise ConfigError(f"density must lie in (0, 1], got {cfg.density}")
    rng = np.random.default_rng([cfg.seed, 0x6B67])
    n = cfg.n_nodes

    hit = rng.random((n, n)) < cfg.density
    np.fill_diagonal(hit, False)
    heads, tails = np.nonzero(hit)
    rels = rng.integers(0, cfg.n_relations, size=heads.size)
    triples = [np.stack([heads, rels, tails], axis=1)]

    code_map: dict[int, int] = {}
    latent: list[int] = []
    children: dict[int, list[int]] = {}
    if vocab is not None:
        codes = vocab.clinical_ids
        n_latent = cfg.n_confounders
        if codes.size + n_latent > n:
            raise ConfigError(
                f"{n} nodes cannot host {codes.size} mapped codes and {n_latent} latent nodes"
            )
        perm = rng.permutation(n)
        code_map = {int(c): int(v) for c, v in zip(codes, perm[: codes.size])}
        latent = sorted(int(v) for v in perm[codes.size : codes.size + n_latent])
        covariates = np.array([c for c in codes if c not in set(task_codes)])
        extra = []
        for k in latent:
            kids = np.sort(rng.choice(covariates, size=min(cfg.confounder_degree, covariates.size), replace=False))
            children[k] = [int(c) for c in kids]
            for c in list(kids) + list(task_codes):
                extra.append((k, int(rng.integers(cfg.n_relations)), code_map[int(c)]))
        if extra:
            triples.append(np.array(extra, dtype=np.int64))

    arr = np.concatenate(triples, axis=0) if triples else np.zeros((0, 3), dtype=np.int64)
    if arr.shape[0] == 0:
        raise ConfigError("KG configuration produced zero edges")
    return KnowledgeGraph(n, cfg.n_relations, arr, code_map, latent, children)


# -- patients ------------------------------------------------------------------
@dataclass
class Visit:
    day: int
    codes: list[int]


@dataclass
class PatientRecord:
    pid: int
    visits: list[Visit]
    age: int
    gender: int
    treatment: int | None = None
    outcome: int | None = None
    po_control: int | None = None
    po_treated: int | None = None
    mu_control: float | None = None
    mu_treated: float | None = None
    propensity: float | None = None
    latent: list[int] | None = None

    @property
    def true_effect(self) -> int | None:
        if self.po_control is None or self.po_treated is None:
            return None
        return self.po_treated - self.po_control

    def codes(self) -> list[int]:
        return [c for v in self.visits for c in v.codes]

    def to_json(self) -> dict:
        out = {
            "id": self.pid,
            "visits": [[v.day, *v.codes] for v in self.visits],
            "demo": [self.age, self.gender],
        }
        if self.treatment is not None:
            out.update(a=self.treatment, y=self.outcome)
        if self.po_control is not None:
            out.update(po0=self.po_control, po1=self.po_treated)
        if self.mu_control is not None:
            out.update(mu0=self.mu_control, mu1=self.mu_treated, pi=self.propensity, u=self.latent)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PatientRecord":
        visits = [Visit(int(v[0]), [int(c) for c in v[1:]]) for v in d["visits"]]
        return cls(
            pid=int(d["id"]),
            visits=visits,
            age=int(d["demo"][0]),
            gender=int(d["demo"][1]),
            treatment=d.get("a"),
            outcome=d.get("y"),
            po_control=d.get("po0"),
            po_treated=d.get("po1"),
            mu_control=d.get("mu0"),
            mu_treated=d.get("mu1"),
            propensity=d.get("pi"),
            latent=d.get("u"),
        )


@dataclass
class CohortConfig:
    n_patients: int = 2000
    visits: tuple[int, int] = (3, 10)
    codes_per_visit: tuple[int, int] = (1, 4)
    gap_p: float = 0.05  # geometric inter-arrival success probability (days)
    gamma: float = 1.0  # confounding strength on the propensity
    effect: str = "heterogeneous"  # zero | constant | heterogeneous
    ate: float = -0.05
    effect_het: float = 0.2
    latent_rate: float = 0.4
    child_rate: float = 0.5
    outcome_latent_weight: float = 1.5
    # background frequency of latent children relative to other codes; 0 means
    # a child code only ever appears through an active latent factor
    child_background: float = 1.0
    labeled: bool = True
    id_offset: int = 0
    split: tuple[float, float, float] = (0.9, 0.05, 0.05)
    seed: int = 0


@dataclass
class Cohort:
    records: list[PatientRecord]
    vocab: Vocabulary
    fingerprint: str
    splits: dict[str, np.ndarray]
    treatment_code: int | None = None
    outcome_code: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, name: str) -> list[PatientRecord]:
        return [self.records[i] for i in self.splits[name]]

    @property
    def labeled(self) -> bool:
        return bool(self.records) and self.records[0].treatment is not None

    def save(self, path: str | Path) -> None:
        split_of = {}
        for name, idx in self.splits.items():
            for i in idx:
                split_of[int(i)] = name
        header = {
            "kind": "cohort",
            "fingerprint": self.fingerprint,
            "vocab": asdict(self.vocab),
            "treatment_code": self.treatment_code,
            "outcome_code": self.outcome_code,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for i, r in enumerate(self.records):
            d = r.to_json()
            d["split"] = split_of.get(i, "train")
            lines.append(json.dumps(d, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Cohort":
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        records, tags = [], []
        for line in lines[1:]:
            if not line.strip():
                continue
            d = json.loads(line)
            tags.append(d.get("split", "train"))
            records.append(PatientRecord.from_json(d))
        tags = np.array(tags)
        splits = {s: np.nonzero(tags == s)[0] for s in ("train", "val", "test")}
        return cls(
            records,
            Vocabulary(**header["vocab"]),
            header["fingerprint"],
            splits,
            header.get("treatment_code"),
            header.get("outcome_code"),
        )


def default_task_codes(vocab: Vocabulary) -> tuple[int, int]:
    """Treatment concept = last medication code, outcome = last diagnosis code."""
    return int(vocab.med_ids[-1]), int(vocab.diag_ids[-1])


def _split_indices(n: int, fractions, rng) -> dict[str, np.ndarray]:
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    perm = rng.permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def effect_function(cfg: CohortConfig, latent0: int) -> float:
    if cfg.effect == "zero":
        return 0.0
    if cfg.effect == "constant":
        return cfg.ate
    if cfg.effect == "heterogeneous":
        return cfg.ate + cfg.effect_het * (latent0 - cfg.latent_rate)
    raise ConfigError(f"unknown effect function {cfg.effect!r}")


def _effect_margin(cfg: CohortConfig) -> float:
    if cfg.effect == "zero":
        return 0.0
    if cfg.effect == "constant":
        return abs(cfg.ate)
    return abs(cfg.ate) + abs(cfg.effect_het) * max(cfg.latent_rate, 1 - cfg.latent_rate)


def gen_cohort(
    cfg: CohortConfig,
    kg: KnowledgeGraph,
    vocab: Vocabulary,
    task_codes: tuple[int, int] | None = None,
) -> Cohort:
    """Draw a cohort whose treatment and outcomes depend on KG-latent factors.

    Structural model per patient (latent factors ``u_k ~ Bernoulli(latent_rate)``):

    * propensity ``pi = clip(sigmoid(gamma * s), 0.05, 0.95)`` with ``s`` a
      sparse linear score of the centred latent factors and age;
    * control risk ``mu0 = m + (1 - 2m) * sigmoid(b + w_u * sum(u) + w_age * age)``
      where the margin ``m`` keeps ``mu1`` inside [0, 1];
    * treated risk ``mu1 = mu0 + tau(u_0)`` (the single treatment x latent
      interaction); population mean of ``tau`` equals ``cfg.ate`` exactly;
    * potential outcomes share one uniform draw: ``Y(a) = [U < mu_a]``.
    """
    if vocab.n_med <= 0 or vocab.n_diag <= 0:
        raise ConfigError("empty vocabulary partitions")
    missing = [int(c) for c in vocab.clinical_ids if int(c) not in kg.code_map]
    if missing:
        raise ConfigError(f"{len(missing)} clinical codes have no KG node (e.g. {missing[0]})")
    if task_codes is None:
        task_codes = default_task_codes(vocab)
    treat_code, out_code = task_codes
    margin = _effect_margin(cfg)
    if margin >= 0.5:
        raise ConfigError("effect magnitude too large for probability-scale outcomes")

    children = [np.array(kg.latent_children[k], dtype=np.int64) for k in kg.latent_nodes]
    n_latent = len(children)
    covariates = np.array([c for c in vocab.clinical_ids if c not in (treat_code, out_code)])
    # Zipf-like background frequencies, fixed by the KG seed so pre-train and
    # downstream cohorts share them.
    base_rng = np.random.default_rng([kg.n_nodes, kg.triples.shape[0], 0xC0DE])
    weights = 1.0 / (1.0 + base_rng.permutation(covariates.size)) ** 0.8
    if children:
        weights = np.where(np.isin(covariates, np.concatenate(children)), weights * cfg.child_background, weights)
    cdf = np.cumsum(weights / weights.sum())
    cdf[-1] = 1.0
    w_treat = np.linspace(1.5, 0.8, max(n_latent, 1))[:n_latent]

    records: list[PatientRecord] = []
    for i in range(cfg.n_patients):
        pid = cfg.id_offset + i
        rng = np.random.default_rng([cfg.seed, pid])
        age = int(min(7, max(0, round(rng.normal(4.5, 1.6)))))
        gender = int(rng.random() < 0.45)
        u = (rng.random(n_latent) < cfg.latent_rate).astype(int)
        active = [children[k] for k in range(n_latent) if u[k]]
        pool = np.concatenate(active) if active else None

        n_visits = int(rng.integers(cfg.visits[0], cfg.visits[1] + 1))
        per_visit = rng.integers(cfg.codes_per_visit[0], cfg.codes_per_visit[1] + 1, size=n_visits)
        days = int(rng.integers(0, 30)) + np.concatenate(
            [[0], np.cumsum(rng.geometric(cfg.gap_p, size=n_visits - 1))]
        )
        total = int(per_visit.sum())
        codes = covariates[np.searchsorted(cdf, rng.random(total), side="right")]
        if pool is not None:
            from_child = rng.random(total) < cfg.child_rate
            codes = np.where(from_child, pool[rng.integers(pool.size, size=total)], codes)
        bounds = np.cumsum(per_visit)[:-1]
        visits = [
            Visit(int(d), [int(c) for c in chunk])
            for d, chunk in zip(days, np.split(codes, bounds))
        ]

        rec = PatientRecord(pid, visits, age, gender)
        if cfg.labeled:
            score = float(np.dot(w_treat, u - cfg.latent_rate)) + 0.25 * (age - 4.5) / 1.6
            pi = float(np.clip(expit(cfg.gamma * score), EPS_PROPENSITY, 1 - EPS_PROPENSITY))
            base = -0.6 + cfg.outcome_latent_weight * (u.sum() - n_latent * cfg.latent_rate)
            base += 0.3 * (age - 4.5) / 1.6 + 0.2 * gender
            mu0 = margin + (1 - 2 * margin) * float(expit(base))
            tau = effect_function(cfg, int(u[0]) if n_latent else 0)
            mu1 = mu0 + tau
            a = int(rng.random() < pi)
            draw = rng.random()
            y0, y1 = int(draw < mu0), int(draw < mu1)
            rec.treatment, rec.outcome = a, (y1 if a else y0)
            rec.po_control, rec.po_treated = y0, y1
            rec.mu_control, rec.mu_treated = mu0, mu1
            rec.propensity = pi
            rec.latent = [int(x) for x in u]
        records.append(rec)

    split_rng = np.random.default_rng([cfg.seed, 0x5917])
    splits = _split_indices(len(records), cfg.split, split_rng)
    fp = fingerprint({"cohort": asdict(cfg), "kg": [kg.n_nodes, kg.n_relations, int(kg.triples.sum())]})
    return Cohort(
        records,
        vocab,
        fp,
        splits,
        treat_code if cfg.labeled else None,
        out_code if cfg.labeled else None,
    )


def true_effects(cohort: Cohort | list[PatientRecord]) -> tuple[np.ndarray, float]:
    """Realised ``Y(1) - Y(0)`` per record and their mean (the sample ATE)."""
    records = cohort.records if isinstance(cohort, Cohort) else cohort
    eff = []
    for r in records:
        if r.true_effect is None:
            raise UnsupportedOperation(
                f"record {r.pid} has no potential outcomes; truth is generator-only"
            )
        eff.append(r.true_effect)
    arr = np.array(eff, dtype=np.float64)
    return arr, float(arr.mean()) if arr.size else 0.0


def conditional_effects(cohort: Cohort | list[PatientRecord]) -> np.ndarray:
    """Per-record ``E[Y(1) - Y(0) | covariates, latent]`` (mu1 - mu0)."""
    records = cohort.records if isinstance(cohort, Cohort) else cohort
    out = []
    for r in records:
        if r.mu_control is None:
            raise UnsupportedOperation(f"record {r.pid} carries no generator truth")
        out.append(r.mu_treated - r.mu_control)
    return np.array(out, dtype=np.float64)
