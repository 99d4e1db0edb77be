"""Membership-inference attacks, the shadow split plan and ROC metrics.

Every attack is a pure function of recorded model outputs and returns an
:class:`AttackScores` where a higher score means "more likely a member".
Attacks that need per-sample shadow statistics skip samples lacking them and
report the skipped ids instead of guessing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from ._seeding import mix_seed

__all__ = [
    "PROB_CLAMP",
    "ATTACKS",
    "ShadowSplitPlan",
    "AttackScores",
    "RocCurve",
    "OutputTable",
    "FoldResult",
    "CVResult",
    "make_shadow_plan",
    "clamp_probs",
    "logit",
    "modified_entropy",
    "yeom_score",
    "shokri_attack",
    "song_mittal_thresholds",
    "song_mittal_score",
    "watson_score",
    "lira_score",
    "rmia_score",
    "roc_metrics",
    "run_attack",
    "cross_validate",
]

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ShadowSplitPlan:
    """``membership[i, m]`` is True when sample i is in model m's training set."""

    membership: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        mem = np.asarray(self.membership, dtype=bool)
        if mem.ndim != 2 or mem.shape[1] % 2:
            raise ValueError("membership must be n_samples x even n_models")
        if not (mem.sum(axis=1) == mem.shape[1] // 2).all():
            raise ValueError("every sample must be IN exactly half of the models")
        mem.setflags(write=False)
        object.__setattr__(self, "membership", mem)

    @property
    def n_samples(self) -> int:
        return self.membership.shape[0]

    @property
    def n_models(self) -> int:
        return self.membership.shape[1]

    def train_indices(self, model: int) -> np.ndarray:
        return np.flatnonzero(self.membership[:, model])

    def shadows(self, target: int) -> list[int]:
        return [m for m in range(self.n_models) if m != target]


def make_shadow_plan(n_samples: int, n_models: int = 16, seed: int = 0) -> ShadowSplitPlan:
    """Random balanced plan: each sample joins a uniformly chosen half of the models."""
    if n_models < 2 or n_models % 2:
        raise ValueError(f"n_models must be even and >= 2 (got {n_models})")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(mix_seed(seed, "shadow-plan"))
    keys = rng.random((n_samples, n_models))
    order = np.argsort(keys, axis=1, kind="stable")
    mem = np.zeros((n_samples, n_models), dtype=bool)
    np.put_along_axis(mem, order[:, : n_models // 2], True, axis=1)
    return ShadowSplitPlan(mem, seed)


@dataclass
class AttackScores:
    scores: np.ndarray
    is_member: np.ndarray
    ids: np.ndarray
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    notes: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_member = np.asarray(self.is_member, dtype=bool)
        self.ids = np.asarray(self.ids, dtype=int)
        self.skipped = np.asarray(self.skipped, dtype=int)
        if not (self.scores.shape == self.is_member.shape == self.ids.shape):
            raise ValueError("scores, is_member and ids must align")
        if not np.isfinite(self.scores).all():
            raise ValueError("attack scores must be finite")

    @property
    def n_scored(self) -> int:
        return int(self.scores.size)

    @property
    def n_skipped(self) -> int:
        return int(self.skipped.size)


def _ids(n: int, ids) -> np.ndarray:
    return np.arange(n) if ids is None else np.asarray(ids, dtype=int)


def clamp_probs(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def logit(p) -> np.ndarray:
    """log(p / (1 - p)) with probabilities clamped away from 0 and 1."""
    p = clamp_probs(p)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------- Yeom


def yeom_score(losses, is_member, tau: float | None = None, train_losses=None, ids=None) -> AttackScores:
    """score = tau - loss; tau defaults to the target's mean training loss."""
    losses = np.asarray(losses, dtype=np.float64)
    is_member = np.asarray(is_member, dtype=bool)
    if tau is None:
        ref = losses[is_member] if train_losses is None else np.asarray(train_losses, dtype=np.float64)
        tau = float(ref.mean())
    return AttackScores(tau - losses, is_member, _ids(losses.size, ids), notes={"tau": tau})


# ---------------------------------------------------------------- Shokri


def _fit_lr(X: np.ndarray, y: np.ndarray, seed: int) -> LogisticRegression | float:
    if y.min() == y.max():
        return float(y[0])
    model = LogisticRegression(C=1.0, max_iter=1000, random_state=seed)
    model.fit(X, y)
    return model


def _predict_lr(model, X: np.ndarray) -> np.ndarray:
    if isinstance(model, float):
        return np.full(X.shape[0], model)
    return model.predict_proba(X)[:, 1]


def shokri_attack(
    shadow_probs,
    shadow_labels,
    shadow_member,
    target_probs,
    target_labels,
    target_member,
    min_per_class: int = 10,
    seed: int = 0,
    ids=None,
) -> AttackScores:
    """Per-class logistic-regression attack models on sorted confidence vectors.

    Classes with fewer than ``min_per_class`` shadow examples use a global
    attack model; they are listed under ``notes["fallback_classes"]``.
    """
    Xs = -np.sort(-np.asarray(shadow_probs, dtype=np.float64), axis=1)
    ys = np.asarray(shadow_member, dtype=bool).astype(int)
    ls = np.asarray(shadow_labels, dtype=int)
    Xt = -np.sort(-np.asarray(target_probs, dtype=np.float64), axis=1)
    lt = np.asarray(target_labels, dtype=int)
    missing = sorted(set(lt.tolist()) - set(ls.tolist()))
    if missing and len(ls) == 0:
        raise ValueError("no shadow data")
    global_model = None
    fallback = []
    scores = np.empty(len(lt))
    for c in sorted(set(lt.tolist())):
        rows = lt == c
        srows = ls == c
        if srows.sum() >= min_per_class:
            model = _fit_lr(Xs[srows], ys[srows], seed)
        else:
            fallback.append(int(c))
            if global_model is None:
                global_model = _fit_lr(Xs, ys, seed)
            model = global_model
        scores[rows] = _predict_lr(model, Xt[rows])
    return AttackScores(scores, target_member, _ids(len(lt), ids), notes={"fallback_classes": fallback})


# ---------------------------------------------------------------- Song & Mittal


def modified_entropy(probs, labels) -> np.ndarray:
    """Mentr(p, y) = -(1 - p_y) log p_y - sum_{i != y} p_i log(1 - p_i)."""
    p = clamp_probs(probs)
    y = np.asarray(labels, dtype=int)
    rows = np.arange(p.shape[0])
    py = p[rows, y]
    terms = -p * np.log1p(-p)
    terms[rows, y] = 0.0
    return -(1.0 - py) * np.log(py) + terms.sum(axis=1)


def _best_threshold(values: np.ndarray, member: np.ndarray) -> float:
    """Threshold t maximizing balanced accuracy of "member iff value < t"."""
    n_in = member.sum()
    n_out = member.size - n_in
    if n_in == 0 or n_out == 0:
        return float(np.median(values)) if values.size else 0.0
    u = np.unique(values)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])
    order = np.argsort(values, kind="stable")
    v_sorted = values[order]
    m_sorted = member[order]
    cum_in = np.concatenate([[0], np.cumsum(m_sorted)])
    cum_out = np.concatenate([[0], np.cumsum(~m_sorted)])
    k = np.searchsorted(v_sorted, cands, side="left")
    # balanced accuracy scaled by 2 * n_in * n_out, in exact integers so ties resolve to the first maximum
    bal = cum_in[k].astype(np.int64) * n_out + (n_out - cum_out[k]).astype(np.int64) * n_in
    return float(cands[int(np.argmax(bal))])


def song_mittal_thresholds(shadow_probs, shadow_labels, shadow_member, n_classes: int | None = None) -> np.ndarray:
    """Per-class Mentr thresholds maximizing balanced accuracy on shadow data."""
    m = modified_entropy(shadow_probs, shadow_labels)
    y = np.asarray(shadow_labels, dtype=int)
    mem = np.asarray(shadow_member, dtype=bool)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    glob = _best_threshold(m, mem)
    out = np.full(n_classes, glob)
    for c in range(n_classes):
        rows = y == c
        if mem[rows].any() and (~mem[rows]).any():
            out[c] = _best_threshold(m[rows], mem[rows])
    return out


def song_mittal_score(probs, labels, is_member, thresholds, ids=None) -> AttackScores:
    """score = threshold[y] - Mentr(p, y)."""
    y = np.asarray(labels, dtype=int)
    m = modified_entropy(probs, y)
    return AttackScores(np.asarray(thresholds)[y] - m, is_member, _ids(y.size, ids))


# ---------------------------------------------------------------- Watson


def watson_score(target_conf, shadow_confs, shadow_in, is_member, ids=None) -> AttackScores:
    """Difficulty calibration: logit(target p_y) minus the mean OUT-shadow logit."""
    t = logit(target_conf)
    s = logit(shadow_confs)
    out = ~np.asarray(shadow_in, dtype=bool)
    n_out = out.sum(axis=1)
    keep = n_out >= 1
    idx = _ids(t.size, ids)
    ref = np.where(out, s, 0.0).sum(axis=1)[keep] / n_out[keep]
    return AttackScores(t[keep] - ref, np.asarray(is_member, dtype=bool)[keep], idx[keep], skipped=idx[~keep])


# ---------------------------------------------------------------- LiRA


def _gauss_logpdf(x, mu, var):
    return -0.5 * (math.log(2.0 * math.pi) + np.log(var)) - (x - mu) ** 2 / (2.0 * var)


def lira_score(
    target_obs,
    shadow_obs,
    shadow_in,
    is_member,
    global_variance: bool = False,
    var_floor: float = 1e-6,
    ids=None,
) -> AttackScores:
    """Per-sample Gaussian likelihood ratio on logit confidences.

    ``target_obs`` (n,) and ``shadow_obs`` (n, m) are already transformed by
    :func:`logit`. Samples with fewer than 2 IN or 2 OUT observations are
    skipped. Variances use ddof=0 and are floored at ``var_floor``; the global
    variant pools each side's variance over all scored samples.
    """
    x = np.asarray(target_obs, dtype=np.float64)
    s = np.asarray(shadow_obs, dtype=np.float64)
    inn = np.asarray(shadow_in, dtype=bool)
    out = ~inn
    n_in, n_out = inn.sum(axis=1), out.sum(axis=1)
    keep = (n_in >= 2) & (n_out >= 2)
    idx = _ids(x.size, ids)
    x, s, inn, out, n_in, n_out = x[keep], s[keep], inn[keep], out[keep], n_in[keep], n_out[keep]
    mu_in = np.where(inn, s, 0.0).sum(axis=1) / n_in
    mu_out = np.where(out, s, 0.0).sum(axis=1) / n_out
    var_in = np.where(inn, (s - mu_in[:, None]) ** 2, 0.0).sum(axis=1) / n_in
    var_out = np.where(out, (s - mu_out[:, None]) ** 2, 0.0).sum(axis=1) / n_out
    if global_variance and x.size:
        var_in = np.full_like(var_in, var_in.mean())
        var_out = np.full_like(var_out, var_out.mean())
    var_in = np.maximum(var_in, var_floor)
    var_out = np.maximum(var_out, var_floor)
    score = _gauss_logpdf(x, mu_in, var_in) - _gauss_logpdf(x, mu_out, var_out)
    return AttackScores(score, np.asarray(is_member, dtype=bool)[keep], idx[keep], skipped=idx[~keep])


# ---------------------------------------------------------------- RMIA


def rmia_score(target_p, ref_p, pop_target_p, pop_ref_p, is_member, gamma: float = 1.0, ids=None) -> AttackScores:
    """Fraction of population points z with ratio_x / ratio_z >= gamma.

    ratio = p_target / mean over reference models of p_ref, where p is the
    probability of the true label; reference means are clamped at 1e-12.
    """
    ref = np.atleast_2d(np.asarray(ref_p, dtype=np.float64).T).T
    pref = np.atleast_2d(np.asarray(pop_ref_p, dtype=np.float64).T).T
    if ref.shape[1] < 1:
        raise ValueError("at least one reference model is required")
    rx = np.asarray(target_p, dtype=np.float64) / np.maximum(ref.mean(axis=1), PROB_CLAMP)
    rz = np.asarray(pop_target_p, dtype=np.float64) / np.maximum(pref.mean(axis=1), PROB_CLAMP)
    if math.isinf(gamma):
        score = np.zeros(rx.size)
    else:
        score = np.empty(rx.size)
        for lo in range(0, rx.size, 1024):
            score[lo : lo + 1024] = np.mean(rx[lo : lo + 1024, None] / rz[None, :] >= gamma, axis=1)
    return AttackScores(score, is_member, _ids(rx.size, ids), notes={"gamma": gamma})


# ---------------------------------------------------------------- ROC


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    tpr_at: dict
    accuracy: float

    def to_csv(self) -> str:
        lines = ["fpr,tpr"]
        lines += [f"{a:.17g},{b:.17g}" for a, b in zip(self.fpr, self.tpr)]
        return "\n".join(lines) + "\n"


def roc_metrics(scores: AttackScores, fpr_targets: Sequence[float] = (0.001, 0.01)) -> RocCurve:
    """Threshold sweep over unique scores (member iff score >= threshold)."""
    s = scores.scores
    m = scores.is_member
    n_pos = int(m.sum())
    n_neg = int(m.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one member and one non-member")
    order = np.argsort(-s, kind="stable")
    s_sorted, m_sorted = s[order], m[order]
    tp = np.cumsum(m_sorted)
    fp = np.cumsum(~m_sorted)
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tpr = np.r_[0.0, tp[last_of_group] / n_pos]
    fpr = np.r_[0.0, fp[last_of_group] / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    tpr_at = {float(t): float(tpr[fpr <= t].max()) for t in fpr_targets}
    accuracy = float(np.max((tpr + 1.0 - fpr) / 2.0))
    return RocCurve(fpr, tpr, auc, tpr_at, accuracy)


# ---------------------------------------------------------------- cross-validation


@dataclass
class OutputTable:
    """Recorded outputs of every model on the attack pool and the population.

    ``probs`` is (n_samples, n_models, n_classes); ``pop_probs`` likewise for
    the population split. ``present[m]`` is False when model m is missing.
    """

    labels: np.ndarray
    probs: np.ndarray
    pop_labels: np.ndarray
    pop_probs: np.ndarray
    present: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=int)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.pop_labels = np.asarray(self.pop_labels, dtype=int)
        self.pop_probs = np.asarray(self.pop_probs, dtype=np.float64)
        if self.present is None:
            self.present = np.ones(self.probs.shape[1], dtype=bool)

    @property
    def n_models(self) -> int:
        return self.probs.shape[1]

    def _py(self, probs, labels):
        return np.take_along_axis(probs, labels[:, None, None], axis=2)[:, :, 0]

    @property
    def conf(self) -> np.ndarray:
        """p_y, shape (n_samples, n_models)."""
        return self._py(self.probs, self.labels)

    @property
    def pop_conf(self) -> np.ndarray:
        return self._py(self.pop_probs, self.pop_labels)

    @property
    def losses(self) -> np.ndarray:
        return -np.log(clamp_probs(self.conf))

    @property
    def logit_conf(self) -> np.ndarray:
        return logit(self.conf)


ATTACKS = ("yeom", "shokri", "song_mittal", "watson", "lira", "rmia")


def run_attack(
    name: str, table: OutputTable, plan: ShadowSplitPlan, target: int, options: dict | None = None
) -> AttackScores:
    """Score every pool sample against model ``target`` using the others as shadows."""
    opts = dict(options or {})
    mem = plan.membership
    member = mem[:, target]
    sh = plan.shadows(target)
    if name == "yeom":
        return yeom_score(table.losses[:, target], member, tau=opts.get("tau"))
    if name == "shokri":
        n = table.labels.size
        sp = table.probs[:, sh, :].transpose(1, 0, 2).reshape(len(sh) * n, -1)
        sl = np.tile(table.labels, len(sh))
        sm = mem[:, sh].T.reshape(-1)
        return shokri_attack(
            sp, sl, sm, table.probs[:, target, :], table.labels, member,
            min_per_class=opts.get("min_per_class", 10), seed=opts.get("seed", 0),
        )
    if name == "song_mittal":
        n = table.labels.size
        sp = table.probs[:, sh, :].transpose(1, 0, 2).reshape(len(sh) * n, -1)
        thr = song_mittal_thresholds(sp, np.tile(table.labels, len(sh)), mem[:, sh].T.reshape(-1), table.probs.shape[2])
        return song_mittal_score(table.probs[:, target, :], table.labels, member, thr)
    if name == "watson":
        return watson_score(table.conf[:, target], table.conf[:, sh], mem[:, sh], member)
    if name == "lira":
        lc = table.logit_conf
        return lira_score(
            lc[:, target], lc[:, sh], mem[:, sh], member,
            global_variance=opts.get("global_variance", False), var_floor=opts.get("var_floor", 1e-6),
        )
    if name == "rmia":
        return rmia_score(
            table.conf[:, target], table.conf[:, sh], table.pop_conf[:, target], table.pop_conf[:, sh],
            member, gamma=opts.get("gamma", 1.0),
        )
    raise ValueError(f"unknown attack {name!r}; choose from {ATTACKS}")


@dataclass
class FoldResult:
    attack: str
    fold: int
    auc: float
    tpr_at: dict
    accuracy: float
    n_scored: int
    n_skipped: int
    roc: RocCurve | None = None

    def to_dict(self) -> dict:
        return {
            "attack": self.attack,
            "fold": self.fold,
            "auc": self.auc,
            "tpr_at": {repr(k): v for k, v in self.tpr_at.items()},
            "accuracy": self.accuracy,
            "n_scored": self.n_scored,
            "n_skipped": self.n_skipped,
        }


@dataclass
class CVResult:
    attack: str
    folds: list[FoldResult]

    def _stat(self, get: Callable[[FoldResult], float]) -> tuple[float, float]:
        v = np.array([get(f) for f in self.folds])
        return float(v.mean()), float(v.std())

    @property
    def auc(self) -> tuple[float, float]:
        return self._stat(lambda f: f.auc)

    @property
    def accuracy(self) -> tuple[float, float]:
        return self._stat(lambda f: f.accuracy)

    def tpr_at(self, fpr: float) -> tuple[float, float]:
        return self._stat(lambda f: f.tpr_at[fpr])

    def summary(self) -> dict:
        targets = list(self.folds[0].tpr_at) if self.folds else []
        return {
            "attack": self.attack,
            "n_folds": len(self.folds),
            "auc": list(self.auc),
            "accuracy": list(self.accuracy),
            "tpr_at": {repr(t): list(self.tpr_at(t)) for t in targets},
        }


def cross_validate(
    plan: ShadowSplitPlan,
    table: OutputTable,
    attack: str,
    options: dict | None = None,
    fpr_targets: Sequence[float] = (0.001, 0.01),
    folds: Sequence[int] | None = None,
) -> CVResult:
    """Each model plays target once; the remaining models are its shadows."""
    if table.n_models != plan.n_models:
        raise ValueError(f"table has {table.n_models} models, plan has {plan.n_models}")
    missing = [int(i) for i in np.flatnonzero(~np.asarray(table.present, dtype=bool))]
    if missing:
        raise ValueError(f"missing model outputs for indices {missing}")
    results = []
    for t in range(plan.n_models) if folds is None else folds:
        sc = run_attack(attack, table, plan, t, options)
        roc = roc_metrics(sc, fpr_targets)
        results.append(FoldResult(attack, t, roc.auc, roc.tpr_at, roc.accuracy, sc.n_scored, sc.n_skipped, roc))
    return CVResult(attack, results)
