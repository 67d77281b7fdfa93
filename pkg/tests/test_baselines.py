import copy
from dataclasses import replace

import numpy as np
import pytest

from conftest import sampled_gradcheck
from kgtreat.baselines import TNet, dragonnet_loss, fit_baseline, tarnet_loss, tnet_fit, trunk_config
from kgtreat.model import KGTreatModel, make_batch
from kgtreat.numerics import functional as F
from kgtreat.training import FinetuneConfig, finetune_loss

FT = FinetuneConfig(epochs=1, lr=1e-2, batch_size=8)


def _trunk(tiny, **kw):
    return KGTreatModel(trunk_config(tiny.config(**kw)))


def test_trunk_has_no_graph_side(tiny):
    m = _trunk(tiny)
    assert m.graph is None and m.synergy == []
    assert not any(k.startswith(("graph.", "synergy.")) for k in m.parameters())


def test_tarnet_is_finetune_loss_without_treatment_term(tiny):
    m = _trunk(tiny)
    b = make_batch(tiny.records[:8], None, tiny.vocab, m.cfg)
    lt, lc, l1 = m.logits(m.forward(b))
    l_o = finetune_loss(lt, lc, l1, b.treatment, b.outcome, beta=0.0)[2].item()
    assert tarnet_loss(m, b).item() == l_o


def test_dragonnet_reduces_to_tarnet(tiny):
    m = _trunk(tiny)
    b = make_batch(tiny.records[:8], None, tiny.vocab, m.cfg)
    assert dragonnet_loss(m, b, beta=0.0).item() == tarnet_loss(m, b).item()


def test_dragonnet_gap_is_treatment_likelihood(tiny):
    m = _trunk(tiny)
    b = make_batch(tiny.records[:8], None, tiny.vocab, m.cfg)
    lt = m.logits(m.forward(b))[0]
    treat_nll = F.bce_with_logits(lt, b.treatment).mean().item()
    gap = dragonnet_loss(m, b, beta=2.5).item() - tarnet_loss(m, b).item()
    assert gap == pytest.approx(2.5 * treat_nll, abs=1e-12)


def test_tarnet_gradcheck(tiny):
    m = _trunk(tiny)
    b = make_batch(tiny.records[:4], None, tiny.vocab, m.cfg)
    assert sampled_gradcheck(lambda: tarnet_loss(m, b), m.parameters(), np.random.default_rng(0)) < 1e-4


@pytest.mark.parametrize("variant", ["tarnet", "dragonnet", "tnet"])
def test_pkg_perturbation_never_reaches_baselines(tiny, variant):
    train, val, test = tiny.records[:16], tiny.records[16:20], tiny.records[20:]
    base = fit_baseline(variant, train, val, tiny.vocab, tiny.config(), FT)
    clean = base.predict(test, tiny.vocab, tiny.duals[20:])
    tainted = copy.deepcopy(tiny.duals[20:])
    for d in tainted:
        for p in (d.treatment_pkg, d.outcome_pkg):
            p.nodes = p.nodes[::-1].copy()
            p.edges = p.edges[:, ::-1].copy()
    dirty = base.predict(test, tiny.vocab, tainted)
    for k in clean:
        np.testing.assert_array_equal(clean[k], dirty[k])


def test_effects_bounded(tiny):
    base = fit_baseline("dragonnet", tiny.records[:16], tiny.records[16:20], tiny.vocab, tiny.config(), FT)
    eff = base.predict(tiny.records, tiny.vocab)["effect"]
    assert np.all(np.abs(eff) <= 1)


def test_identical_heads_zero_effect(tiny):
    base = fit_baseline("tarnet", tiny.records[:16], [], tiny.vocab, tiny.config(), FT)
    for c, t in zip(base.model.heads.control.parameters().values(), base.model.heads.treated.parameters().values()):
        t.data[...] = c.data
    assert np.all(base.predict(tiny.records, tiny.vocab)["effect"] == 0)


def test_tnet_arms_train_separately(tiny):
    tn = tnet_fit(tiny.records[:20], tiny.records[20:], tiny.vocab, tiny.config(), FT)
    assert isinstance(tn, TNet)
    assert tn.control.cfg.seed != tn.treated.cfg.seed
    p = tn.predict(tiny.records, tiny.vocab)
    np.testing.assert_array_equal(p["effect"], p["mu1"] - p["mu0"])


def test_tnet_identical_arm_data_gives_small_effect(tiny):
    # every patient appears once per arm with the same outcome
    recs = [replace(r, treatment=arm) for r in tiny.records for arm in (0, 1)]
    tn = tnet_fit(recs, [], tiny.vocab, tiny.config(), replace(FT, epochs=4))
    assert np.abs(tn.predict(tiny.records, tiny.vocab)["effect"]).mean() < 0.15


def test_tnet_constant_arm_labels(tiny):
    recs = [replace(r, outcome=1 if r.treatment else r.outcome) for r in tiny.records]
    tn = tnet_fit(recs, [], tiny.vocab, tiny.config(), replace(FT, epochs=30, lr=3e-2))
    assert tn.predict(tiny.records, tiny.vocab)["mu1"].min() > 0.9


def test_tnet_needs_both_arms(tiny):
    treated = [r for r in tiny.records if r.treatment == 1]
    with pytest.raises(ValueError, match="control"):
        tnet_fit(treated, [], tiny.vocab, tiny.config(), FT)


def test_unknown_variant(tiny):
    with pytest.raises(ValueError):
        fit_baseline("snet", tiny.records, [], tiny.vocab, tiny.config(), FT)
