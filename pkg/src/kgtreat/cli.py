"""Command-line experiment runner: ``gen``, ``run --stage <s>`` and ``report``."""
from __future__ import annotations

import os

# BLAS reads these once, at first numpy import
if os.environ.get("KGTREAT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["KGTREAT_THREADS"])

import argparse
import csv
import glob
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, apply_state, load_checkpoint, model_state, save_checkpoint
from .config import ABLATIONS, PROFILES, ConfigParseError, ExperimentConfig, dumps, load, profile, resolve_ablation
from .eval import METRIC_FIELDS, write_metrics
from .pipeline import (
    attention_records,
    evaluate,
    generate,
    load_dataset,
    new_model,
    predict_cohort,
    run_finetune,
    run_pretrain,
    save_dataset,
    stamp,
    summary,
)

STAGES = ("pretrain", "finetune", "evaluate", "all")
NUMERIC = ("auc", "aupr", "if_pehe", "true_pehe", "ate", "p_value", "overlap")


class CliError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value file (defaults to the desk profile)")
    common.add_argument("--profile", choices=PROFILES, help="base profile when no config file is given")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--ablate", action="append", default=[], metavar="NAME",
                        help=f"one of {', '.join(ABLATIONS)}; repeat or comma-separate to combine")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("--force", action="store_true", help="load checkpoints made under another config")
    common.add_argument("--lp-normalize", action="store_true", help="average link-prediction negatives")
    common.add_argument("--strict-batchnorm", action="store_true", help="batch normalisation in graph layers")
    common.add_argument("--if-variant", choices=("printed", "literature"))
    common.add_argument("--cohort", type=int, default=0, help="downstream cohort index")

    p = argparse.ArgumentParser(prog="kgtreat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write KG and cohorts")
    run = sub.add_parser("run", parents=[common], help="pre-train, fine-tune and/or evaluate")
    run.add_argument("--stage", choices=STAGES, default="all")
    run.add_argument("--dump-attention", action="store_true", help="export attention weights for the test split")
    rep = sub.add_parser("report", help="aggregate metrics files across seeds")
    rep.add_argument("metrics", nargs="+", help="metrics JSON files or glob patterns")
    rep.add_argument("--out", help="directory for report.csv and conclusions.csv")
    rep.add_argument("--mixed-ok", action="store_true", help="allow files from different configurations")
    rep.add_argument("--expect", choices=("no-significant-difference", "target-better", "compared-better"),
                     help="reference (trial) conclusion to match against")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load(args.config, profile(args.profile) if args.profile else None) if args.config else profile(args.profile or "desk")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    names = [n.strip() for a in args.ablate for n in a.split(",") if n.strip()]
    if names:
        merged = list(dict.fromkeys(list(cfg.ablation.active) + names))
        resolve_ablation(merged)
        cfg = replace(cfg, ablation=replace(cfg.ablation, variants=",".join(merged)))
    if args.lp_normalize:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, lp_normalize=True))
    if args.strict_batchnorm:
        cfg = replace(cfg, model=replace(cfg.model, strict_batchnorm=True))
    if args.if_variant:
        cfg = replace(cfg, eval=replace(cfg.eval, if_variant=args.if_variant))
    return cfg


# -- layout -----------------------------------------------------------------------------
def data_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) / f"data-seed{cfg.seed}"


def run_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) / f"{cfg.label()}-seed{cfg.seed}"


def _refuse_existing(paths, args) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not args.overwrite:
        raise CliError(f"refusing to overwrite {', '.join(existing)}; pass --overwrite")


def _print_table(rows: list[dict], out=None) -> None:
    if not rows:
        return
    out = out or sys.stdout
    cols = list(dict.fromkeys(k for r in rows for k in r))
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)), file=out)
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)), file=out)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


# -- gen --------------------------------------------------------------------------------
def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    out = data_dir(args, cfg)
    names = ["kg.tsv", "pretrain.jsonl", "manifest.json"] + [f"downstream_{i}.jsonl" for i in range(cfg.data.n_downstream)]
    _refuse_existing([out / n for n in names], args)
    if args.overwrite:
        for old in out.glob("downstream_*.jsonl"):
            old.unlink()
    ds = generate(cfg)
    _write_data(cfg, ds, out)
    _print_table(summary(ds))
    return 0


def _write_data(cfg: ExperimentConfig, ds, out: Path) -> None:
    save_dataset(ds, out)
    manifest = {"data_fingerprint": cfg.data_fingerprint(), "seed": cfg.seed}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.ini").write_text(dumps(cfg))


def _dataset_for(args, cfg: ExperimentConfig, create: bool):
    out = data_dir(args, cfg)
    manifest = out / "manifest.json"
    if not manifest.exists():
        if not create:
            raise CliError(f"no generated data at {out}; run `kgtreat gen --out {args.out} --seed {cfg.seed}` first")
        ds = generate(cfg)
        _write_data(cfg, ds, out)
        return ds
    recorded = json.loads(manifest.read_text())["data_fingerprint"]
    if recorded != cfg.data_fingerprint() and not args.force:
        raise CliError(f"data in {out} was generated under a different data/kg/seed configuration; "
                       "regenerate with `gen --overwrite` or pass --force")
    return load_dataset(out)


# -- run --------------------------------------------------------------------------------
def cmd_run(args) -> int:
    cfg = resolve_config(args)
    stages = ("pretrain", "finetune", "evaluate") if args.stage == "all" else (args.stage,)
    ds = _dataset_for(args, cfg, create=args.stage in ("all", "pretrain"))
    if not 0 <= args.cohort < len(ds.downstream):
        raise CliError(f"cohort index {args.cohort} out of range; {len(ds.downstream)} downstream cohort(s)")
    cohort = ds.downstream[args.cohort]
    rd = run_dir(args, cfg)
    rd.mkdir(parents=True, exist_ok=True)
    (rd / "config.ini").write_text(dumps(cfg))
    pre_ckpt, ft_ckpt = rd / "pretrain.kgt", rd / "finetune.kgt"

    if "pretrain" in stages:
        if not cfg.pretrain_enabled:
            print("pre-training disabled by ablation; skipping")
        else:
            _refuse_existing([pre_ckpt], args)
            model, history, report = run_pretrain(cfg, ds, rd / "pretrain_log.jsonl")
            first, last = history[0]["total"], history[-1]["total"]
            report["loss_first"], report["loss_last"] = first, last
            save_checkpoint(model_state(model), pre_ckpt, cfg.backbone_fingerprint(), {"stage": "pretrain"})
            (rd / "pretrain_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            print(f"pre-trained {len(history)} steps: loss {first:.3f} -> {last:.3f}; wrote {pre_ckpt}")

    if "finetune" in stages:
        _refuse_existing([ft_ckpt], args)
        backbone = None
        if cfg.pretrain_enabled:
            if not pre_ckpt.exists():
                raise CliError(f"fine-tuning needs the pre-trained checkpoint {pre_ckpt}; run `--stage pretrain` first")
            backbone, _ = load_checkpoint(pre_ckpt, cfg.backbone_fingerprint(), args.force)
        model, history = run_finetune(cfg, ds, cohort, backbone, rd / "finetune_log.jsonl")
        save_checkpoint(model_state(model), ft_ckpt, cfg.fingerprint(), {"stage": "finetune", "cohort": args.cohort})
        print(f"fine-tuned; selected epoch {history[-1]['selected_epoch']}; wrote {ft_ckpt}")

    if "evaluate" in stages:
        if not ft_ckpt.exists():
            raise CliError(f"evaluation needs the fine-tuned checkpoint {ft_ckpt}; run `--stage finetune` first")
        state, _ = load_checkpoint(ft_ckpt, cfg.fingerprint(), args.force)
        model = new_model(cfg, ds)
        apply_state(model, state)
        metrics = evaluate(cfg, ds, cohort, predict_cohort(cfg, ds, cohort, model))
        report_path = rd / "pretrain_report.json"
        metrics["pretrain"] = json.loads(report_path.read_text()) if report_path.exists() else {}
        stamp(metrics, cfg)
        write_metrics(rd / "metrics.json", metrics)
        if args.dump_attention:
            rows = attention_records(cfg, ds, cohort, model)
            with open(rd / "attention.jsonl", "w") as fh:
                for row in rows:
                    fh.write(json.dumps(row) + "\n")
        _print_table([{k: metrics.get(k) for k in METRIC_FIELDS}])
    return 0


# -- report -----------------------------------------------------------------------------
def _expand(patterns) -> list[Path]:
    paths = []
    for pat in patterns:
        hits = sorted(glob.glob(pat, recursive=True))
        paths.extend(Path(h) for h in (hits or ([pat] if Path(pat).exists() else [])))
    return list(dict.fromkeys(paths))


def aggregate(metrics: list[dict], mixed_ok: bool = False) -> list[dict]:
    """Mean and population standard deviation of each metric per configuration."""
    groups: dict[str, list[dict]] = {}
    for m in metrics:
        groups.setdefault(m.get("config", "?"), []).append(m)
    if len(groups) > 1 and not mixed_ok:
        raise CliError(f"metrics come from {len(groups)} different configurations; pass --mixed-ok to tabulate them")
    rows = []
    for key, ms in groups.items():
        row = {"label": ms[0].get("label", "?"), "config": key, "runs": len(ms),
               "seeds": " ".join(str(m.get("seed")) for m in ms)}
        for f in NUMERIC:
            vals = np.array([m[f] for m in ms if m.get(f) is not None], dtype=float)
            row[f"{f}_mean"] = float(vals.mean()) if vals.size else None
            row[f"{f}_std"] = float(vals.std()) if vals.size else None
        rows.append(row)
    return rows


def conclusions(metrics: list[dict], expect: str | None = None) -> list[dict]:
    """One row per run in the shape of a trial-emulation table."""
    rows = []
    for m in metrics:
        ci = m.get("ci") or [None, None]
        row = {"label": m.get("label"), "seed": m.get("seed"), "ate": m.get("ate"),
               "ci_low": ci[0], "ci_high": ci[1], "p_value": m.get("p_value"), "conclusion": m.get("conclusion")}
        if expect is not None:
            row["reference"] = expect
            row["match"] = "yes" if m.get("conclusion") == expect else "no"
        rows.append(row)
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    cols = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def cmd_report(args) -> int:
    paths = _expand(args.metrics)
    if not paths:
        raise CliError("no metrics files matched")
    metrics = [json.loads(p.read_text()) for p in paths]
    agg = aggregate(metrics, args.mixed_ok)
    table = conclusions(metrics, args.expect)
    _print_table(agg)
    print()
    _print_table(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "report.csv", agg)
        _write_csv(out / "conclusions.csv", table)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"gen": cmd_gen, "run": cmd_run, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except (CliError, ConfigParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
