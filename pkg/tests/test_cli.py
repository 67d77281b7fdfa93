import json
from dataclasses import replace

import numpy as np
import pytest

from kgtreat.cli import aggregate, conclusions, main
from kgtreat.config import (
    ConfigParseError,
    ExperimentConfig,
    canonical,
    dumps,
    loads,
    profile,
    resolve_ablation,
)

TINY = """profile = smoke
[data]
pretrain_patients = 120
downstream_patients = 160
[kg]
n_nodes = 120
[model]
d_model = 16
d_ff = 32
graph_dim = 16
node_feature_width = 16
[pretrain]
steps = 12
n_negatives = 4
[finetune]
epochs = 1
[eval]
plugin_rounds = 5
"""


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    p.write_text(TINY)
    return p


# -- configuration --------------------------------------------------------------------
@pytest.mark.parametrize("name", ["smoke", "desk", "confounder", "paper"])
def test_round_trip_text(name):
    cfg = replace(profile(name), seed=4)
    assert loads(dumps(cfg)) == cfg
    assert loads(f"profile = {name}\n") == profile(name)


def test_confounder_profile_hides_children():
    cfg = profile("confounder")
    cc = cfg.cohort_config(10, True, 0, 0)
    assert cc.child_background == 0.0 and cc.split == (0.7, 0.1, 0.2)


def test_fingerprint_stable_and_sensitive():
    a, b = profile("desk"), profile("desk")
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != replace(a, seed=1).fingerprint()
    assert a.family_fingerprint() == replace(a, seed=1).family_fingerprint()
    c = replace(a, model=replace(a.model, d_model=32))
    assert a.family_fingerprint() != c.family_fingerprint()


def test_canonical_has_every_section():
    assert set(canonical(ExperimentConfig())) == {
        "data", "kg", "pkg", "model", "pretrain", "finetune", "eval", "ablation", "seed"
    }


def test_parse_errors():
    with pytest.raises(ConfigParseError, match="unknown section"):
        loads("[nope]\nx = 1\n")
    with pytest.raises(ConfigParseError, match="unknown key"):
        loads("[model]\nwidth = 3\n")
    with pytest.raises(ConfigParseError, match="cannot read"):
        loads("[model]\nd_model = wide\n")
    with pytest.raises(ConfigParseError, match="unknown profile"):
        loads("profile = huge\n")


def test_full_size_profile_dimensions():
    p = profile("paper")
    assert (p.model.d_model, p.model.n_layers, p.model.gnn_layers, p.model.synergy_layers) == (768, 12, 5, 5)
    assert (p.pretrain.steps, p.pretrain.batch_size, p.pretrain.lr) == (200_000, 28, 1e-4)
    assert (p.finetune.epochs, p.finetune.lr, p.finetune.batch_size, p.finetune.beta) == (2, 5e-5, 32, 1.0)


@pytest.mark.parametrize(
    "active, expected",
    [
        ((), (True, True, False)),
        (("wo-dive",), (True, True, True)),
        (("wo-kg",), (False, True, False)),
        (("wo-pretrain",), (True, False, False)),
        (("wo-pretrain-kg",), (False, False, False)),
        (("wo-dive", "wo-pretrain"), (True, False, True)),
    ],
)
def test_ablation_resolution(active, expected):
    assert resolve_ablation(active) == expected


@pytest.mark.parametrize("bad", [("wo-kg", "wo-dive"), ("wo-kg", "wo-pretrain"), ("wo-pretrain-kg", "wo-dive"), ("x",)])
def test_invalid_ablations(bad):
    with pytest.raises(ConfigParseError):
        resolve_ablation(bad)


def test_wo_dive_forces_no_synergy():
    cfg = replace(profile("desk"), ablation=replace(profile("desk").ablation, variants="wo-dive"))
    mc = cfg.model_config(100, 50, 3)
    assert mc.synergy_layers == 0 and mc.use_kg and mc.gnn_layers == cfg.model.gnn_layers


def test_wo_kg_drops_link_prediction():
    cfg = replace(profile("desk"), ablation=replace(profile("desk").ablation, variants="wo-kg"))
    assert not cfg.pretrain_config().use_lp and not cfg.model_config(100, 50, 3).use_kg


# -- commands -------------------------------------------------------------------------
def test_gen_is_byte_identical_and_refuses(cfg_file, tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["gen", "--config", str(cfg_file), "--seed", "1", "--out", str(tmp_path / d)]) == 0
    for name in ("kg.tsv", "pretrain.jsonl", "downstream_0.jsonl"):
        assert (tmp_path / "a/data-seed1" / name).read_bytes() == (tmp_path / "b/data-seed1" / name).read_bytes()
    assert main(["gen", "--config", str(cfg_file), "--seed", "1", "--out", str(tmp_path / "a")]) == 2
    assert "--overwrite" in capsys.readouterr().err
    assert main(["gen", "--config", str(cfg_file), "--seed", "1", "--out", str(tmp_path / "a"), "--overwrite"]) == 0


def test_gen_summary_recount(cfg_file, tmp_path, capsys):
    main(["gen", "--config", str(cfg_file), "--out", str(tmp_path)])
    out = capsys.readouterr().out.splitlines()
    header = out[0].split()
    row = dict(zip(header, out[2].split()))
    recs = [json.loads(line) for line in (tmp_path / "data-seed0/downstream_0.jsonl").read_text().splitlines()[1:]]
    n_codes = sum(len(v) - 1 for r in recs for v in r["visits"])
    assert row["cohort"] == "downstream_0" and int(row["patients"]) == len(recs) == 160
    assert float(row["codes_per_patient"]) == pytest.approx(n_codes / len(recs), abs=1e-4)
    splits = [r["split"] for r in recs]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (144, 8, 8)


def _metrics(path):
    return json.loads(path.read_text())


def test_run_all_writes_complete_metrics(cfg_file, tmp_path):
    out = tmp_path / "r"
    assert main(["run", "--config", str(cfg_file), "--out", str(out), "--dump-attention"]) == 0
    rd = out / "full-seed0"
    m = _metrics(rd / "metrics.json")
    for key in ("auc", "aupr", "if_pehe", "true_pehe", "ate", "ci", "p_value", "conclusion", "overlap"):
        assert key in m and m[key] is not None
    assert m["ci"][0] <= m["ate"] <= m["ci"][1]
    assert (rd / "metrics.csv").exists() and (rd / "pretrain.kgt").exists()
    steps = [json.loads(line) for line in (rd / "pretrain_log.jsonl").read_text().splitlines()]
    assert len(steps) == 12 and {"step", "L_MCP", "L_LP", "lr", "wall_ms"} <= set(steps[0])
    ft = json.loads((rd / "finetune_log.jsonl").read_text().splitlines()[0])
    assert {"step", "L_T", "L_O", "lr", "wall_ms"} <= set(ft)
    att = [json.loads(line) for line in (rd / "attention.jsonl").read_text().splitlines()]
    assert len(att) == m["n_test"]
    row = att[0]
    assert len(row["code_weight_a"]) == len(row["tokens"]) and row["code_weight_a"][0] == 0.0
    assert sum(row["code_weight_a"]) == pytest.approx(1.0)
    assert len(row["nodes_y"]) == len(row["node_weight_y"])


def test_staged_run_matches_all(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--config", str(cfg_file), "--out", str(a)])
    for stage in ("pretrain", "finetune", "evaluate"):
        assert main(["run", "--config", str(cfg_file), "--out", str(b), "--stage", stage]) == 0
    ma, mb = _metrics(a / "full-seed0/metrics.json"), _metrics(b / "full-seed0/metrics.json")
    assert ma == mb


def test_missing_checkpoint_names_path(cfg_file, tmp_path, capsys):
    out = tmp_path / "m"
    main(["gen", "--config", str(cfg_file), "--out", str(out)])
    assert main(["run", "--config", str(cfg_file), "--out", str(out), "--stage", "finetune"]) == 2
    assert "full-seed0/pretrain.kgt" in capsys.readouterr().err
    assert main(["run", "--config", str(cfg_file), "--out", str(out), "--stage", "evaluate"]) == 2
    assert "finetune.kgt" in capsys.readouterr().err


def test_missing_data_is_actionable(cfg_file, tmp_path, capsys):
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path), "--stage", "finetune"]) == 2
    assert "kgtreat gen" in capsys.readouterr().err


def test_wo_pretrain_skips_pretraining(cfg_file, tmp_path, capsys):
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path), "--ablate", "wo-pretrain"]) == 0
    assert "skipping" in capsys.readouterr().out
    rd = tmp_path / "wo-pretrain-seed0"
    assert not (rd / "pretrain.kgt").exists()
    assert _metrics(rd / "metrics.json")["pretrain"] == {}


def test_invalid_ablation_rejected_at_parse(cfg_file, tmp_path, capsys):
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path), "--ablate", "wo-kg,wo-dive"]) == 2
    assert "wo-dive" in capsys.readouterr().err


def test_checkpoint_from_other_config_needs_force(cfg_file, tmp_path, capsys):
    out = tmp_path / "f"
    main(["run", "--config", str(cfg_file), "--out", str(out), "--stage", "pretrain"])
    other = tmp_path / "other.ini"
    other.write_text(TINY.replace("steps = 12", "steps = 13"))
    assert main(["run", "--config", str(other), "--out", str(out), "--stage", "finetune"]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["run", "--config", str(other), "--out", str(out), "--stage", "finetune", "--force"]) == 0


# -- report -----------------------------------------------------------------------------
def _fake(seed, auc, config="c1", label="full", conclusion="target-better"):
    return {"seed": seed, "auc": auc, "aupr": 0.5, "if_pehe": 0.1, "true_pehe": 0.02, "ate": -0.01,
            "ci": [-0.02, 0.0], "p_value": 0.01, "overlap": 1.0, "config": config, "label": label,
            "conclusion": conclusion}


def test_single_file_has_zero_spread():
    row = aggregate([_fake(0, 0.7)])[0]
    assert row["auc_mean"] == 0.7 and row["auc_std"] == 0.0 and row["runs"] == 1


def test_spread_matches_recomputation():
    vals = np.random.default_rng(0).random(20)
    row = aggregate([_fake(i, float(v)) for i, v in enumerate(vals)])[0]
    mean = sum(vals) / 20
    std = (sum((v - mean) ** 2 for v in vals) / 20) ** 0.5
    assert row["auc_mean"] == pytest.approx(mean, abs=1e-12)
    assert row["auc_std"] == pytest.approx(std, abs=1e-12)


def test_mixed_configs_refused(tmp_path, capsys):
    for i, c in enumerate(("c1", "c2")):
        (tmp_path / f"m{i}.json").write_text(json.dumps(_fake(i, 0.6, config=c)))
    assert main(["report", str(tmp_path / "*.json")]) == 2
    assert "--mixed-ok" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "*.json"), "--mixed-ok", "--out", str(tmp_path / "rep")]) == 0
    assert len((tmp_path / "rep/report.csv").read_text().splitlines()) == 3


def test_conclusion_table_shape():
    rows = conclusions([_fake(0, 0.6), _fake(1, 0.6, conclusion="no-significant-difference")], "target-better")
    assert [r["match"] for r in rows] == ["yes", "no"]
    assert list(rows[0]) == ["label", "seed", "ate", "ci_low", "ci_high", "p_value", "conclusion", "reference", "match"]
