"""Pre-training (masked codes + link prediction), fine-tuning and effect inference."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import numerics as nx
from .cohortgen import MASK, N_SPECIAL, PAD, PatientRecord, Vocabulary
from .encoders import GraphBatch
from .model import HEAD_PREFIX, KGTreatModel, ModelBatch, make_batch
from .numerics import functional as F
from .pkg import DualPkg

MCP_PREFIX = "mcp_head."


class TrainingError(RuntimeError):
    pass


# -- masked code prediction ------------------------------------------------------
def mask_tokens(tokens, rate: float, rng, vocab_size: int | None = None):
    """BERT-style corruption of non-special tokens.

    Each maskable token is selected with probability ``rate``; a selected
    token becomes MASK (80%), a random code (10%) or stays put (10%).
    Returns ``(corrupted, positions, targets)`` where ``positions`` indexes
    ``tokens`` (a tuple of index arrays, as from ``np.nonzero``).
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must lie in [0, 1], got {rate}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    tokens = np.asarray(tokens, dtype=np.int64)
    maskable = tokens >= N_SPECIAL
    chosen = maskable & (rng.random(tokens.shape) < rate)
    positions = np.nonzero(chosen)
    targets = tokens[positions]
    out = tokens.copy()
    k = targets.size
    roll = rng.random(k)
    hi = vocab_size if vocab_size is not None else int(tokens.max()) + 1
    random_codes = rng.integers(N_SPECIAL, max(hi, N_SPECIAL + 1), size=k)
    new = np.where(roll < 0.8, MASK, np.where(roll < 0.9, random_codes, targets))
    out[positions] = new
    return out, positions, targets


def mcp_loss(logits, targets):
    """Summed and per-token negative log-likelihood of the masked codes."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        zero = nx.Tensor(0.0)
        return zero, 0.0
    total = F.cross_entropy(logits, targets).sum()
    return total, total.item() / targets.size


# -- link prediction ---------------------------------------------------------------
def distmult_score(v_h, r, v_t):
    """Trilinear score sum_i h_i r_i t_i over the last axis."""
    v_h, r, v_t = (x if isinstance(x, nx.Tensor) else nx.Tensor(x) for x in (v_h, r, v_t))
    if not (v_h.shape[-1] == r.shape[-1] == v_t.shape[-1]):
        raise nx.ShapeError(f"distmult widths differ: {v_h.shape}, {r.shape}, {v_t.shape}")
    # head and tail multiply first so swapping them is exact in floating point
    return (v_h * v_t * r).sum(axis=-1)


def lp_loss(pos_scores, neg_scores, form: str = "printed", normalize: bool = False):
    """Link-prediction loss over S positives with K negatives each.

    ``printed``: sum_s [-logsig(d_s) + sum_k logsig(d'_sk)].
    ``standard``: sum_s [-logsig(d_s) - sum_k logsig(-d'_sk)], bounded below by 0.
    ``normalize`` averages over the K negatives instead of summing.
    """
    pos = pos_scores if isinstance(pos_scores, nx.Tensor) else nx.Tensor(pos_scores)
    neg = neg_scores if isinstance(neg_scores, nx.Tensor) else nx.Tensor(neg_scores)
    if pos.size == 0:
        return nx.Tensor(0.0)
    if neg.shape[0] != pos.shape[0]:
        raise nx.ShapeError(f"negatives {neg.shape} do not pair with positives {pos.shape}")
    if form == "printed":
        neg_term = F.logsigmoid(neg)
    elif form == "standard":
        neg_term = -F.logsigmoid(-neg)
    else:
        raise ValueError(f"unknown link-prediction loss form {form!r}")
    k = neg.shape[1] if neg.ndim > 1 else 1
    neg_sum = neg_term.sum() * (1.0 / k) if normalize else neg_term.sum()
    return -F.logsigmoid(pos).sum() + neg_sum


@dataclass
class TripleSample:
    head: np.ndarray  # (S,) flat node index
    rel: np.ndarray  # (S,)
    tail: np.ndarray
    neg_head: np.ndarray  # (S, K)
    neg_tail: np.ndarray

    @property
    def n_positive(self) -> int:
        return int(self.head.size)


def sample_triples(gb: GraphBatch, per_graph: int, n_negatives: int, rng) -> TripleSample:
    """Positives from each PKG's KG edges; each negative swaps the head or the
    tail (never both) for a uniformly drawn non-CLS node of the same PKG."""
    heads, rels, tails, nh, nt = [], [], [], [], []
    for g_i, edges in enumerate(gb.kg_edges):
        if edges.shape[0] == 0:
            continue
        off = int(gb.offsets[g_i])
        n_real = int(gb.pad_mask[g_i].sum()) - 1  # CLS is last
        take = edges if edges.shape[0] <= per_graph else edges[rng.choice(edges.shape[0], per_graph, replace=False)]
        s = take.shape[0]
        h = take[:, 0] + off
        t = take[:, 2] + off
        repl = rng.integers(0, n_real, size=(s, n_negatives)) + off
        swap_head = rng.random((s, n_negatives)) < 0.5
        heads.append(h)
        rels.append(take[:, 1])
        tails.append(t)
        nh.append(np.where(swap_head, repl, h[:, None]))
        nt.append(np.where(swap_head, t[:, None], repl))
    if not heads:
        e = np.zeros(0, dtype=np.int64)
        return TripleSample(e, e, e, e.reshape(0, n_negatives), e.reshape(0, n_negatives))
    return TripleSample(
        np.concatenate(heads), np.concatenate(rels), np.concatenate(tails), np.concatenate(nh), np.concatenate(nt)
    )


def triple_scores(v: nx.Tensor, rel_table: nx.Tensor, sample: TripleSample):
    """DistMult scores of positives (S,) and negatives (S, K)."""
    r = F.take_rows(rel_table, sample.rel)
    pos = distmult_score(F.take_rows(v, sample.head), r, F.take_rows(v, sample.tail))
    S, K = sample.neg_head.shape
    d = v.shape[1]
    nh = F.take_rows(v, sample.neg_head.reshape(-1)).reshape(S, K, d)
    ntl = F.take_rows(v, sample.neg_tail.reshape(-1)).reshape(S, K, d)
    neg = distmult_score(nh, r.reshape(S, 1, d), ntl)
    return pos, neg


# -- pre-training -----------------------------------------------------------------
@dataclass
class PretrainConfig:
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
    hide_masked_nodes: bool = True
    seed: int = 0


def hidden_seed_nodes(tokens: np.ndarray, positions, code_map: dict[int, int]) -> list[set[int]]:
    """Per row, KG nodes whose every code occurrence was selected for masking."""
    chosen = np.zeros(tokens.shape, dtype=bool)
    chosen[positions] = True
    out = []
    for b in range(tokens.shape[0]):
        seen, kept = set(), set()
        for tok, c in zip(tokens[b].tolist(), chosen[b].tolist()):
            node = code_map.get(tok)
            if node is None:
                continue
            seen.add(node)
            if not c:
                kept.add(node)
        out.append(seen - kept)
    return out


def build_pretrain_batch(
    model: KGTreatModel,
    records: list[PatientRecord],
    duals: list[DualPkg] | None,
    vocab: Vocabulary,
    kg_code_map: dict[int, int] | None,
    cfg: PretrainConfig,
    rng: np.random.Generator,
):
    mcfg = model.cfg
    plain = make_batch(records, None, vocab, mcfg)
    tokens = plain.seq.tokens
    if cfg.use_mcp:
        masked, positions, targets = mask_tokens(tokens, cfg.mask_rate, rng, vocab.size)
        masked[~plain.seq.mask] = PAD
    else:
        masked, positions, targets = tokens, (np.zeros(0, int), np.zeros(0, int)), np.zeros(0, int)
    hidden = None
    if mcfg.use_kg and cfg.use_mcp and cfg.hide_masked_nodes and kg_code_map is not None:
        hidden = hidden_seed_nodes(tokens, positions, kg_code_map)
    batch = make_batch(records, duals if mcfg.use_kg else None, vocab, mcfg, hidden)
    batch.seq = batch.seq.with_tokens(masked)
    return batch, positions, targets


def pretrain_losses(model: KGTreatModel, batch: ModelBatch, positions, targets, cfg: PretrainConfig, rng):
    fwd = model.forward(batch)
    B, T, d = fwd.h.shape
    zero = nx.Tensor(0.0)
    l_mcp, l_lp = zero, zero
    report = {"mcp_tokens": int(np.size(targets)), "lp_positives": 0}
    if cfg.use_mcp and np.size(targets):
        flat = positions[0] * T + positions[1]
        logits = model.mcp_head(F.take_rows(fwd.h.reshape(B * T, d), flat))
        l_mcp, per_tok = mcp_loss(logits, targets)
        report["mcp_per_token"] = per_tok
        report["mcp_correct"] = int((logits.data.argmax(axis=1) == targets).sum())
    if cfg.use_lp and model.cfg.use_kg:
        sample = sample_triples(batch.graph_a, cfg.triples_per_pkg, cfg.n_negatives, rng)
        if sample.n_positive:
            pos, neg = triple_scores(fwd.v_a, model.graph.relations.weight, sample)
            l_lp = lp_loss(pos, neg, cfg.lp_form, cfg.lp_normalize)
            report["lp_positives"] = sample.n_positive
    total = l_mcp + l_lp
    report.update(mcp=l_mcp.item(), lp=l_lp.item(), total=total.item())
    return total, report


def pretrain_step(model, batch, positions, targets, optimizer: nx.Adam, cfg: PretrainConfig, rng, lr: float, batch_id=None):
    model.train()
    optimizer.zero_grad()
    total, report = pretrain_losses(model, batch, positions, targets, cfg, rng)
    if not np.isfinite(total.item()):
        raise TrainingError(f"non-finite pre-training loss at batch {batch_id}")
    nx.backward(total, optimizer.params.values())
    optimizer.step(lr)
    report["lr"] = lr
    return report


def pretrain_parameters(model: KGTreatModel) -> dict:
    return {k: v for k, v in model.parameters().items() if not k.startswith(HEAD_PREFIX)}


class JsonlLog:
    def __init__(self, path: str | Path | None):
        self.fh = open(path, "w") if path else None

    def write(self, row: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(row, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def pretrain(
    model: KGTreatModel,
    records: list[PatientRecord],
    duals: list[DualPkg] | None,
    vocab: Vocabulary,
    code_map: dict[int, int] | None,
    cfg: PretrainConfig,
    log_path=None,
) -> list[dict]:
    rng = np.random.default_rng([cfg.seed, 0x9E7])
    model.set_rng(np.random.default_rng([cfg.seed, 0xD207]))
    opt = nx.Adam(pretrain_parameters(model), lr=cfg.lr)
    warm = int(cfg.warmup_frac * cfg.steps)
    log = JsonlLog(log_path)
    history = []
    order = np.zeros(0, dtype=np.int64)
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > order.size:
            order = rng.permutation(len(records))
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        t0 = time.perf_counter()
        recs = [records[i] for i in idx]
        ds = [duals[i] for i in idx] if duals is not None else None
        batch, pos, tgt = build_pretrain_batch(model, recs, ds, vocab, code_map, cfg, rng)
        lr = nx.warmup_linear(step, cfg.steps, warm, cfg.lr)
        rep = pretrain_step(model, batch, pos, tgt, opt, cfg, rng, lr, batch_id=step)
        rep["step"] = step
        history.append(rep)
        log.write(
            {"step": step, "L_MCP": rep["mcp"], "L_LP": rep["lp"], "lr": lr,
             "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
        )
    log.close()
    model.eval()
    return history


def evaluate_pretraining(
    model: KGTreatModel,
    records: list[PatientRecord],
    duals: list[DualPkg] | None,
    vocab: Vocabulary,
    code_map: dict[int, int] | None,
    cfg: PretrainConfig,
    batch_size: int = 32,
    seed: int = 12345,
) -> dict:
    """Held-out masked-code top-1 accuracy and positive-vs-corrupted triple AUC."""
    from .eval import auc

    rng = np.random.default_rng(seed)
    model.eval()
    correct = tokens = 0
    pos_all, neg_all = [], []
    eval_cfg = replace(cfg, n_negatives=1, triples_per_pkg=10**9)
    with nx.no_grad():
        for s in range(0, len(records), batch_size):
            recs = records[s : s + batch_size]
            ds = duals[s : s + batch_size] if duals is not None else None
            batch, positions, targets = build_pretrain_batch(model, recs, ds, vocab, code_map, eval_cfg, rng)
            fwd = model.forward(batch)
            B, T, d = fwd.h.shape
            if np.size(targets):
                flat = positions[0] * T + positions[1]
                logits = model.mcp_head(F.take_rows(fwd.h.reshape(B * T, d), flat))
                correct += int((logits.data.argmax(axis=1) == targets).sum())
                tokens += int(targets.size)
            if model.cfg.use_kg and eval_cfg.use_lp:
                sample = sample_triples(batch.graph_a, eval_cfg.triples_per_pkg, 1, rng)
                if sample.n_positive:
                    pos, neg = triple_scores(fwd.v_a, model.graph.relations.weight, sample)
                    pos_all.append(pos.data)
                    neg_all.append(neg.data.reshape(-1))
    out = {"mcp_accuracy": correct / max(tokens, 1), "mcp_tokens": tokens, "chance": 1.0 / vocab.size}
    if pos_all:
        p, n = np.concatenate(pos_all), np.concatenate(neg_all)
        out["triple_auc"] = auc(np.concatenate([np.ones(p.size), np.zeros(n.size)]), np.concatenate([p, n]))
    return out


# -- fine-tuning --------------------------------------------------------------------
@dataclass
class FinetuneConfig:
    epochs: int = 2
    lr: float = 5e-5
    batch_size: int = 32
    beta: float = 1.0
    warmup_frac: float = 0.1
    seed: int = 0


def finetune_loss(logit_t, logit_c, logit_1, a, y, beta: float = 1.0):
    """(L_T, L_O, L_TEE); L_O scores only the head of the factual arm."""
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    for name, lab in (("treatment", a), ("outcome", y)):
        if np.any((lab != 0.0) & (lab != 1.0)):
            raise ValueError(f"{name} labels must be 0 or 1")
    l_t = F.bce_with_logits(logit_t, a).mean()
    factual = logit_c * (1.0 - a) + logit_1 * a
    l_o = F.bce_with_logits(factual, y).mean()
    return l_t, l_o, l_o + l_t * beta


def finetune_parameters(model: KGTreatModel) -> dict:
    return {k: v for k, v in model.parameters().items() if not k.startswith(MCP_PREFIX)}


def batches(n: int, size: int, rng=None):
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, size):
        yield idx[s : s + size]


def validation_loss(model, records, duals, vocab, beta: float, batch_size: int = 64) -> float:
    model.eval()
    total = 0.0
    with nx.no_grad():
        for idx in batches(len(records), batch_size):
            recs = [records[i] for i in idx]
            b = make_batch(recs, [duals[i] for i in idx] if duals is not None else None, vocab, model.cfg)
            lt, lc, l1 = model.logits(model.forward(b))
            total += finetune_loss(lt, lc, l1, b.treatment, b.outcome, beta)[2].item() * len(idx)
    return total / max(len(records), 1)


def snapshot(model) -> dict[str, np.ndarray]:
    snap = {k: p.data.copy() for k, p in model.parameters().items()}
    snap.update({f"buffer:{k}": np.array(v, copy=True) for k, v in model.named_buffers()})
    return snap


def restore(model, snap: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    for k, v in snap.items():
        if k.startswith("buffer:"):
            model.set_buffer(k[len("buffer:"):], v)
        else:
            params[k].data[...] = v


def finetune(
    model: KGTreatModel,
    train: list[PatientRecord],
    train_duals: list[DualPkg] | None,
    val: list[PatientRecord],
    val_duals: list[DualPkg] | None,
    vocab: Vocabulary,
    cfg: FinetuneConfig,
    log_path=None,
) -> list[dict]:
    """Minimise L_TEE; keep the epoch with the lowest validation L_TEE."""
    rng = np.random.default_rng([cfg.seed, 0xF17E])
    model.set_rng(np.random.default_rng([cfg.seed, 0xD207]))
    opt = nx.Adam(finetune_parameters(model), lr=cfg.lr)
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warm = int(cfg.warmup_frac * total_steps)
    log = JsonlLog(log_path)
    best = (np.inf, snapshot(model), -1)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        for idx in batches(len(train), cfg.batch_size, rng):
            t0 = time.perf_counter()
            recs = [train[i] for i in idx]
            b = make_batch(recs, [train_duals[i] for i in idx] if train_duals is not None else None, vocab, model.cfg)
            opt.zero_grad()
            lt, lc, l1 = model.logits(model.forward(b))
            l_t, l_o, l_tee = finetune_loss(lt, lc, l1, b.treatment, b.outcome, cfg.beta)
            if not np.isfinite(l_tee.item()):
                raise TrainingError(f"non-finite fine-tuning loss at batch {step}")
            nx.backward(l_tee, opt.params.values())
            lr = nx.warmup_linear(step, total_steps, warm, cfg.lr)
            opt.step(lr)
            log.write(
                {"step": step, "L_T": l_t.item(), "L_O": l_o.item(), "lr": lr,
                 "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            )
            step += 1
        v = validation_loss(model, val, val_duals, vocab, cfg.beta) if val else np.nan
        history.append({"epoch": epoch, "val_loss": v})
        if not val or v < best[0]:
            best = (v, snapshot(model), epoch)
    log.close()
    restore(model, best[1])
    model.eval()
    history.append({"selected_epoch": best[2]})
    return history


def predict(model: KGTreatModel, records, duals, vocab, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Propensity, both potential-outcome probabilities and the effect per patient."""
    if not model.head_parameters():
        raise TrainingError("model has no effect heads")
    model.eval()
    out = {"propensity": [], "mu0": [], "mu1": []}
    with nx.no_grad():
        for idx in batches(len(records), batch_size):
            recs = [records[i] for i in idx]
            b = make_batch(recs, [duals[i] for i in idx] if duals is not None else None, vocab, model.cfg)
            lt, lc, l1 = model.logits(model.forward(b))
            out["propensity"].append(expit(lt.data))
            out["mu0"].append(expit(lc.data))
            out["mu1"].append(expit(l1.data))
    res = {k: np.concatenate(v) if v else np.zeros(0) for k, v in out.items()}
    res["effect"] = res["mu1"] - res["mu0"]
    return res


def estimate_effects(model: KGTreatModel, records, duals, vocab) -> np.ndarray:
    """Per-patient effect: treated-head probability minus control-head probability."""
    return predict(model, records, duals, vocab)["effect"]
