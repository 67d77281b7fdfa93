import numpy as np
import pytest

from kgtreat.cohortgen import CohortConfig, KGConfig, Vocabulary, default_task_codes, gen_cohort, gen_kg
from kgtreat.model import KGTreatModel, ModelConfig
from kgtreat.pkg import build_dual_pkgs, task_anchors


class TinyWorld:
    """A small KG, labeled cohort and anchored PKGs shared by model tests."""

    def __init__(self, n_patients=24, seed=0):
        self.vocab = Vocabulary(12, 11)
        task = default_task_codes(self.vocab)
        self.kg = gen_kg(KGConfig(n_nodes=60, n_relations=3, density=0.03, confounder_degree=5, seed=seed), self.vocab, task)
        self.cohort = gen_cohort(CohortConfig(n_patients=n_patients, visits=(2, 4), seed=seed), self.kg, self.vocab, task)
        self.records = self.cohort.records
        t, o = task_anchors(self.kg, *task)
        self.duals = [build_dual_pkgs(r, t, o, self.kg) for r in self.records]
        self.shared = [build_dual_pkgs(r, None, None, self.kg) for r in self.records]

    def config(self, **kw):
        base = dict(
            vocab_size=self.vocab.size,
            n_kg_nodes=self.kg.n_nodes,
            n_kg_relations=self.kg.n_relations,
            d_model=8,
            n_heads=2,
            n_layers=2,
            d_ff=16,
            graph_dim=8,
            node_feature_width=6,
            gnn_layers=2,
            synergy_layers=2,
            max_visits=8,
            max_bins=16,
            dropout=0.0,
        )
        base.update(kw)
        return ModelConfig(**base)

    def model(self, **kw):
        return KGTreatModel(self.config(**kw))


@pytest.fixture(scope="session")
def tiny():
    return TinyWorld()


def sampled_gradcheck(f, params: dict, rng, per_tensor=3, h=1e-5):
    """Worst relative error over a few sampled entries of every parameter."""
    for p in params.values():
        p.grad = None
    f().backward()
    worst = 0.0
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            num = (hi - lo) / (2 * h)
            ana = g.reshape(-1)[i]
            gap = abs(num - ana)
            if gap < 1e-9:
                continue
            worst = max(worst, gap / max(abs(num), abs(ana)))
    return worst


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
