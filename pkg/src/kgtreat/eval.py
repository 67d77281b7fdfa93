"""Factual and counterfactual metrics, plug-in learners and the trial-style
ATE conclusion."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from .cohortgen import N_SPECIAL, Cohort, PatientRecord, conditional_effects, true_effects

NO_DIFFERENCE = "no-significant-difference"
TARGET_BETTER = "target-better"
COMPARED_BETTER = "compared-better"


class MetricError(ValueError):
    pass


# -- factual metrics ---------------------------------------------------------------
def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if np.any((y != 0) & (y != 1)):
        raise MetricError("labels must be 0 or 1")
    if y.size == 0 or y.min() == y.max():
        raise MetricError("AUC/AUPR undefined with a single class")
    return y


def auc(labels, scores) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly,
    ties counting one half."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    ranks = stats.rankdata(s)
    n1 = y.sum()
    n0 = y.size - n1
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def aupr(labels, scores) -> float:
    """Average precision: sum over distinct thresholds of recall gain x precision."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], y.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def binary_metrics(scores, labels) -> tuple[float, float]:
    return auc(labels, scores), aupr(labels, scores)


# -- plug-in learners -----------------------------------------------------------------
@dataclass
class StumpBooster:
    """Logistic-loss boosting of depth-1 trees on small non-negative integer features.

    Splits are ``x <= t`` with Newton leaf values ``-G / (H + lam)``.
    """

    rounds: int = 50
    learning_rate: float = 0.3
    lam: float = 1.0
    max_bin: int = 15
    base: float = 0.0
    stumps: list = field(default_factory=list)

    def _binned(self, X):
        return np.clip(np.asarray(X, dtype=np.int64), 0, self.max_bin)

    def fit(self, X, y) -> "StumpBooster":
        Xb = self._binned(X)
        y = np.asarray(y, dtype=np.float64)
        p0 = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        self.base = float(logit(p0))
        self.stumps = []
        f = np.full(y.size, self.base)
        onehots = [(Xb == v).astype(np.float64) for v in range(self.max_bin + 1)]
        for _ in range(self.rounds):
            p = expit(f)
            g, h = p - y, p * (1 - p)
            G = np.stack([oh.T @ g for oh in onehots])  # (bins, features)
            H = np.stack([oh.T @ h for oh in onehots])
            GL, HL = np.cumsum(G, axis=0)[:-1], np.cumsum(H, axis=0)[:-1]
            GT, HT = g.sum(), h.sum()
            GR, HR = GT - GL, HT - HL
            gain = GL**2 / (HL + self.lam) + GR**2 / (HR + self.lam) - GT**2 / (HT + self.lam)
            gain = np.where((HL > 0) & (HR > 0), gain, -np.inf)
            t, j = np.unravel_index(int(np.argmax(gain)), gain.shape)
            if not np.isfinite(gain[t, j]):
                break
            left = -GL[t, j] / (HL[t, j] + self.lam) * self.learning_rate
            right = -GR[t, j] / (HR[t, j] + self.lam) * self.learning_rate
            self.stumps.append((int(j), int(t), float(left), float(right)))
            f += np.where(Xb[:, j] <= t, left, right)
        return self

    def decision(self, X) -> np.ndarray:
        Xb = self._binned(X)
        f = np.full(Xb.shape[0], self.base)
        for j, t, left, right in self.stumps:
            f += np.where(Xb[:, j] <= t, left, right)
        return f

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision(X))


def bag_of_codes(records: list[PatientRecord], vocab_size: int) -> np.ndarray:
    """Code counts over the clinical vocabulary plus age and gender columns."""
    X = np.zeros((len(records), vocab_size - N_SPECIAL + 2), dtype=np.int64)
    for i, r in enumerate(records):
        for c in r.codes():
            X[i, int(c) - N_SPECIAL] += 1
        X[i, -2] = r.age
        X[i, -1] = r.gender
    return X


@dataclass
class PluginEstimators:
    mu0: StumpBooster
    mu1: StumpBooster
    propensity: StumpBooster
    vocab_size: int
    clip: tuple[float, float] = (0.01, 0.99)

    def features(self, records):
        return bag_of_codes(records, self.vocab_size)

    def effect(self, records) -> np.ndarray:
        X = self.features(records)
        return self.mu1.predict_proba(X) - self.mu0.predict_proba(X)

    def propensity_raw(self, records) -> np.ndarray:
        return self.propensity.predict_proba(self.features(records))

    def pi(self, records) -> np.ndarray:
        return np.clip(self.propensity_raw(records), *self.clip)


def fit_plugin(records: list[PatientRecord], vocab_size: int, rounds: int = 50) -> PluginEstimators:
    a = np.array([r.treatment for r in records], dtype=float)
    y = np.array([r.outcome for r in records], dtype=float)
    for arm, name in ((0, "control"), (1, "treated")):
        if not np.any(a == arm):
            raise MetricError(f"plug-in fit needs both arms; the {name} arm is empty")
    X = bag_of_codes(records, vocab_size)
    mu0 = StumpBooster(rounds).fit(X[a == 0], y[a == 0])
    mu1 = StumpBooster(rounds).fit(X[a == 1], y[a == 1])
    prop = StumpBooster(rounds).fit(X, a)
    return PluginEstimators(mu0, mu1, prop, vocab_size)


# -- counterfactual metrics -----------------------------------------------------------
def influence_term(a, pi, t_tilde, t_hat, y=None, variant: str = "printed") -> np.ndarray:
    """Per-point correction l(x) with W = a - pi, C = pi(1 - pi), B = 2a(a - pi)/C.

    ``printed``: (1-B) T~^2 + (T~ - T^) - W (T~ - T^)^2 + T^^2.
    ``literature``: the cross term carries the factual outcome, B y (T~ - T^).
    """
    a, pi, tt, th = (np.asarray(v, dtype=np.float64) for v in (a, pi, t_tilde, t_hat))
    C = pi * (1 - pi)
    W = a - pi
    B = 2 * a * (a - pi) / C
    diff = tt - th
    if variant == "printed":
        cross = diff
    elif variant == "literature":
        if y is None:
            raise MetricError("the literature variant needs factual outcomes")
        cross = B * np.asarray(y, dtype=np.float64) * diff
    else:
        raise MetricError(f"unknown IF-PEHE variant {variant!r}")
    return (1 - B) * tt**2 + cross - W * diff**2 + th**2


def if_pehe(a, pi, t_tilde, t_hat, y=None, variant: str = "printed", clip=(0.01, 0.99)) -> float:
    """Mean over points of (T^ - T~)^2 + l(x)."""
    pi = np.asarray(pi, dtype=np.float64)
    if np.any((pi <= 0) | (pi >= 1)):
        warnings.warn("propensity estimates at 0 or 1 before clipping; positivity is violated", stacklevel=2)
    pi = np.clip(pi, *clip)
    th = np.asarray(t_hat, dtype=np.float64)
    tt = np.asarray(t_tilde, dtype=np.float64)
    return float(np.mean((th - tt) ** 2 + influence_term(a, pi, tt, th, y, variant)))


def true_pehe(effect_hat, truth, kind: str = "conditional") -> float:
    """Mean squared error against generator truth (exactly rounded sum).

    ``truth`` is an array or a cohort / record list; for the latter ``kind``
    picks the conditional effect mu1 - mu0 or the realised Y(1) - Y(0).
    """
    if isinstance(truth, (Cohort, list)):
        truth = conditional_effects(truth) if kind == "conditional" else true_effects(truth)[0]
    e = np.asarray(effect_hat, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if e.shape != t.shape:
        raise MetricError(f"effect shape {e.shape} vs truth {t.shape}")
    # correctly rounded sum, so the value does not depend on summation order
    return math.fsum(((e - t) ** 2).tolist()) / e.size


# -- trial-style conclusion -----------------------------------------------------------
@dataclass
class EffectEstimate:
    ate: float
    ci_low: float
    ci_high: float
    p_value: float
    t_stat: float
    conclusion: str
    degenerate: bool = False
    n: int = 0

    def text(self, target: str = "A.", compared: str = "W.") -> str:
        if self.conclusion == TARGET_BETTER:
            return f"{target} is more effective than {compared}"
        if self.conclusion == COMPARED_BETTER:
            return f"{compared} is more effective than {target}"
        return "No significant difference"


def conclude(ate: float, p_value: float, alpha: float = 0.05, risk_outcome: bool = True) -> str:
    if p_value >= alpha or ate == 0:
        return NO_DIFFERENCE
    lower_is_better = risk_outcome
    return TARGET_BETTER if (ate < 0) == lower_is_better else COMPARED_BETTER


def ate_conclusion(
    effects,
    n_bootstrap: int = 20,
    alpha: float = 0.05,
    seed: int = 0,
    risk_outcome: bool = True,
) -> EffectEstimate:
    """ATE, percentile bootstrap CI and one-sample two-sided t-test against 0."""
    d = np.asarray(effects, dtype=np.float64)
    if d.size < 2:
        raise MetricError("need at least two effect estimates")
    ate = float(d.mean())
    rng = np.random.default_rng(seed)
    boots = np.array([d[rng.integers(0, d.size, d.size)].mean() for _ in range(n_bootstrap)])
    lo, hi = np.percentile(boots, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    # the percentile interval of a few resamples can miss the point estimate
    lo, hi = min(float(lo), ate), max(float(hi), ate)
    degenerate = bool(np.all(d == d[0]))
    if degenerate:
        t_stat = 0.0 if ate == 0 else float(np.sign(ate) * np.inf)
        p = 1.0 if ate == 0 else 0.0
    else:
        res = stats.ttest_1samp(d, 0.0)
        t_stat, p = float(res.statistic), float(res.pvalue)
    return EffectEstimate(ate, lo, hi, p, t_stat, conclude(ate, p, alpha, risk_outcome), degenerate, int(d.size))


def positivity_report(pi, eps: float = 0.05) -> dict:
    """Share of propensities inside [eps, 1 - eps]; warns below 0.95."""
    pi = np.asarray(pi, dtype=np.float64)
    inside = (pi >= eps) & (pi <= 1 - eps)
    frac = float(inside.mean()) if pi.size else 1.0
    low = frac < 0.95
    if low:
        warnings.warn(f"only {frac:.3f} of patients have propensity in [{eps}, {1 - eps}]", stacklevel=2)
    return {"overlap": frac, "eps": eps, "n": int(pi.size), "warning": low}


# -- metrics files --------------------------------------------------------------------
METRIC_FIELDS = ("auc", "aupr", "if_pehe", "true_pehe", "ate", "ci", "p_value", "conclusion", "overlap")


def write_metrics(path: str | Path, metrics: dict) -> None:
    path = Path(path)
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    flat = {k: (";".join(map(str, v)) if isinstance(v, (list, tuple)) else v) for k, v in metrics.items()
            if not isinstance(v, dict)}
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=sorted(flat))
        w.writeheader()
        w.writerow(flat)


def estimate_dict(est: EffectEstimate) -> dict:
    d = asdict(est)
    d["ci"] = [d.pop("ci_low"), d.pop("ci_high")]
    return d
