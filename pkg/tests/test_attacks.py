import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from nsdelab import attacks as atk
from nsdelab.attacks import AttackScores, OutputTable, ShadowSplitPlan


# ---------------------------------------------------------------- brute-force oracles


def bf_logit(p):
    p = min(max(p, 1e-12), 1 - 1e-12)
    return math.log(p) - math.log1p(-p)


def bf_mentr(probs, y):
    total = 0.0
    for i, p in enumerate(probs):
        p = min(max(p, 1e-12), 1 - 1e-12)
        if i == y:
            total += -(1 - p) * math.log(p)
        else:
            total += -p * math.log1p(-p)
    return total


def bf_lira(x, shadows, ins, floor=1e-6):
    out = []
    for xi, row, inrow in zip(x, shadows, ins):
        a = [v for v, f in zip(row, inrow) if f]
        b = [v for v, f in zip(row, inrow) if not f]
        ma, mb = sum(a) / len(a), sum(b) / len(b)
        va = max(sum((v - ma) ** 2 for v in a) / len(a), floor)
        vb = max(sum((v - mb) ** 2 for v in b) / len(b), floor)

        def lp(v, m, s2):
            return -0.5 * math.log(2 * math.pi * s2) - (v - m) ** 2 / (2 * s2)

        out.append(lp(xi, ma, va) - lp(xi, mb, vb))
    return out


def bf_rmia(tx, refx, tz, refz, gamma):
    out = []
    for a, ra in zip(tx, refx):
        rx = a / max(sum(ra) / len(ra), 1e-12)
        cnt = 0
        for b, rb in zip(tz, refz):
            rz = b / max(sum(rb) / len(rb), 1e-12)
            cnt += rx / rz >= gamma
        out.append(cnt / len(tz))
    return out


def instance(seed, n=12, m=8, c=3):
    rng = np.random.default_rng(seed)
    plan = atk.make_shadow_plan(n, m, seed)
    labels = rng.integers(0, c, n)
    logits = rng.normal(size=(n, m, c)) + 1.5 * plan.membership[:, :, None] * np.eye(c)[labels][:, None, :]
    probs = np.exp(logits) / np.exp(logits).sum(axis=2, keepdims=True)
    pop = rng.normal(size=(9, m, c))
    pop = np.exp(pop) / np.exp(pop).sum(axis=2, keepdims=True)
    return plan, OutputTable(labels, probs, rng.integers(0, c, 9), pop)


# ---------------------------------------------------------------- plan


def test_plan_is_balanced_and_seeded():
    plan = atk.make_shadow_plan(100, 16, seed=3)
    assert (plan.membership.sum(axis=1) == 8).all()
    assert np.array_equal(plan.membership, atk.make_shadow_plan(100, 16, seed=3).membership)
    assert not np.array_equal(plan.membership, atk.make_shadow_plan(100, 16, seed=4).membership)
    assert plan.shadows(2) == [m for m in range(16) if m != 2]
    assert np.array_equal(plan.train_indices(0), np.flatnonzero(plan.membership[:, 0]))


def test_plan_validation():
    with pytest.raises(ValueError):
        atk.make_shadow_plan(10, 3)
    with pytest.raises(ValueError):
        ShadowSplitPlan(np.array([[True, True], [False, True]]), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.sampled_from([2, 4, 8, 16]), st.integers(0, 2**32))
def test_plan_balance_property(n, m, seed):
    plan = atk.make_shadow_plan(n, m, seed)
    assert (plan.membership.sum(axis=1) == m // 2).all()


# ---------------------------------------------------------------- scores vs oracles


@pytest.mark.parametrize("seed", range(4))
def test_yeom_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    losses = rng.exponential(size=15)
    mem = rng.random(15) < 0.5
    mem[0], mem[1] = True, False
    tau = sum(l for l, f in zip(losses, mem) if f) / mem.sum()
    got = atk.yeom_score(losses, mem).scores
    np.testing.assert_allclose(got, [tau - l for l in losses], rtol=0, atol=1e-10)
    assert atk.yeom_score(losses, mem, tau=0.5).scores[3] == 0.5 - losses[3]


@pytest.mark.parametrize("seed", range(4))
def test_mentr_and_song_mittal_match_bruteforce(seed):
    plan, table = instance(seed)
    for i in range(table.labels.size):
        assert atk.modified_entropy(table.probs[i : i + 1, 0], table.labels[i : i + 1])[0] == pytest.approx(
            bf_mentr(table.probs[i, 0], table.labels[i]), abs=1e-10
        )
    sc = atk.run_attack("song_mittal", table, plan, 0)
    # brute-force per-class threshold search over shadow Mentr values
    sh = plan.shadows(0)
    vals, ys, mems = [], [], []
    for m in sh:
        for i in range(table.labels.size):
            vals.append(bf_mentr(table.probs[i, m], table.labels[i]))
            ys.append(table.labels[i])
            mems.append(bool(plan.membership[i, m]))

    def best(v, mm):
        u = sorted(set(v))
        cands = [u[0] - 1] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [u[-1] + 1]
        nin, nout = sum(mm), len(mm) - sum(mm)
        bestc, bestv = None, -1
        for c in cands:
            tp = sum(1 for a, f in zip(v, mm) if f and a < c)
            tn = sum(1 for a, f in zip(v, mm) if not f and a >= c)
            bal = Fraction(tp, nin) + Fraction(tn, nout)
            if bal > bestv:
                bestc, bestv = c, bal
        return bestc

    thr = {}
    glob = best(vals, mems)
    for c in range(3):
        rows = [k for k, y in enumerate(ys) if y == c]
        sub = [mems[k] for k in rows]
        thr[c] = best([vals[k] for k in rows], sub) if any(sub) and not all(sub) else glob
    want = [thr[table.labels[i]] - bf_mentr(table.probs[i, 0], table.labels[i]) for i in range(table.labels.size)]
    np.testing.assert_allclose(sc.scores, want, rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_watson_matches_bruteforce(seed):
    plan, table = instance(seed)
    sc = atk.run_attack("watson", table, plan, 1)
    sh = plan.shadows(1)
    want = []
    for i in range(table.labels.size):
        outs = [bf_logit(table.conf[i, m]) for m in sh if not plan.membership[i, m]]
        want.append(bf_logit(table.conf[i, 1]) - sum(outs) / len(outs))
    np.testing.assert_allclose(sc.scores, want, rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_lira_matches_bruteforce(seed):
    plan, table = instance(seed, n=20)
    sc = atk.run_attack("lira", table, plan, 2)
    sh = plan.shadows(2)
    lc = [[bf_logit(table.conf[i, m]) for m in sh] for i in range(20)]
    ins = [[bool(plan.membership[i, m]) for m in sh] for i in range(20)]
    want = bf_lira([bf_logit(table.conf[i, 2]) for i in range(20)], lc, ins)
    keep = sc.ids
    np.testing.assert_allclose(sc.scores, [want[i] for i in keep], rtol=0, atol=1e-10)
    assert sc.n_scored + sc.n_skipped == 20


def test_lira_skips_samples_without_enough_shadows():
    x = np.zeros(3)
    s = np.zeros((3, 4))
    ins = np.array([[1, 1, 0, 0], [1, 0, 0, 0], [1, 1, 1, 0]], dtype=bool)
    sc = atk.lira_score(x, s, ins, [True, False, True])
    assert list(sc.ids) == [0] and sorted(sc.skipped) == [1, 2]


def test_lira_global_variance_pools():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(6, 8))
    ins = np.tile([True, False], (6, 4))
    a = atk.lira_score(rng.normal(size=6), s, ins, np.ones(6, bool), global_variance=True)
    var_in = np.mean([np.var(r[i]) for r, i in zip(s, ins)])
    assert a.scores.shape == (6,)
    assert np.isfinite(var_in)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("gamma", [1.0, 2.0])
def test_rmia_matches_bruteforce(seed, gamma):
    plan, table = instance(seed)
    sc = atk.run_attack("rmia", table, plan, 3, {"gamma": gamma})
    sh = plan.shadows(3)
    want = bf_rmia(
        table.conf[:, 3], [[table.conf[i, m] for m in sh] for i in range(table.labels.size)],
        table.pop_conf[:, 3], [[table.pop_conf[j, m] for m in sh] for j in range(9)], gamma,
    )
    np.testing.assert_allclose(sc.scores, want, rtol=0, atol=1e-10)


def test_rmia_infinite_gamma_scores_zero():
    sc = atk.rmia_score([0.5], [[0.5]], [0.5], [[0.5]], [True], gamma=math.inf)
    assert sc.scores[0] == 0.0


def test_shokri_runs_and_flags_fallback():
    rng = np.random.default_rng(0)
    sp = rng.dirichlet(np.ones(3), size=60)
    sl = np.r_[np.zeros(30, int), np.ones(25, int), 2 * np.ones(5, int)]
    sm = rng.random(60) < 0.5
    tp = rng.dirichlet(np.ones(3), size=9)
    tl = np.array([0, 1, 2] * 3)
    sc = atk.shokri_attack(sp, sl, sm, tp, tl, np.ones(9, bool), min_per_class=10)
    assert sc.notes["fallback_classes"] == [2]
    assert ((sc.scores >= 0) & (sc.scores <= 1)).all()


def test_scores_must_be_finite():
    with pytest.raises(ValueError):
        AttackScores([np.nan], [True], [0])


# ---------------------------------------------------------------- ROC


def test_roc_separable_and_reversed():
    s = np.r_[np.ones(50), np.zeros(50)]
    m = np.r_[np.ones(50, bool), np.zeros(50, bool)]
    roc = atk.roc_metrics(AttackScores(s + np.arange(100) * 1e-3, m, np.arange(100)))
    assert roc.auc == 1.0 and roc.accuracy == 1.0
    assert roc.tpr_at[0.01] == 1.0
    rev = atk.roc_metrics(AttackScores(-s, m, np.arange(100)))
    assert rev.auc == 0.0


def test_roc_ties_give_diagonal():
    roc = atk.roc_metrics(AttackScores(np.zeros(10), np.arange(10) < 5, np.arange(10)))
    assert roc.auc == 0.5
    assert list(roc.fpr) == [0.0, 1.0] and list(roc.tpr) == [0.0, 1.0]
    assert roc.tpr_at[0.01] == 0.0


def test_roc_conservative_tpr_at_fpr():
    # FPR steps are 1/4; at target 0.3 the best admissible point has FPR 0.25
    s = np.array([8, 7, 6, 5, 4, 3, 2, 1.0])
    m = np.array([1, 0, 1, 1, 0, 1, 0, 0], bool)
    roc = atk.roc_metrics(AttackScores(s, m, np.arange(8)), (0.3, 0.0))
    assert roc.tpr_at[0.3] == 0.75
    assert roc.tpr_at[0.0] == 0.25
    fr = roc_auc_score(m, s)
    assert roc.auc == pytest.approx(fr, abs=1e-15)


def test_roc_needs_both_classes():
    with pytest.raises(ValueError):
        atk.roc_metrics(AttackScores([1.0, 2.0], [True, True], [0, 1]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_mann_whitney_fraction(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    m = np.array([p[1] for p in pairs])
    if m.all() or not m.any():
        return
    pos = [a for a, f in zip(s, m) if f]
    neg = [a for a, f in zip(s, m) if not f]
    want = Fraction(0)
    for a in pos:
        for b in neg:
            want += 1 if a > b else Fraction(1, 2) if a == b else 0
    want /= len(pos) * len(neg)
    roc = atk.roc_metrics(AttackScores(s, m, np.arange(len(s))))
    assert roc.auc == pytest.approx(float(want), abs=1e-12)
    flipped = atk.roc_metrics(AttackScores(-s, m, np.arange(len(s))))
    assert roc.auc + flipped.auc == pytest.approx(1.0, abs=1e-12)
    monotone = atk.roc_metrics(AttackScores(np.exp(s / 3), m, np.arange(len(s))))
    assert monotone.auc == pytest.approx(roc.auc, abs=1e-12)
    assert 0.5 <= roc.accuracy <= 1.0
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)


def test_roc_csv():
    roc = atk.roc_metrics(AttackScores([1.0, 0.0], [True, False], [0, 1]))
    assert roc.to_csv().splitlines()[0] == "fpr,tpr"


# ---------------------------------------------------------------- cross-validation


@pytest.mark.parametrize("name", atk.ATTACKS)
def test_cross_validate_every_attack(name):
    plan, table = instance(0, n=40, m=8)
    cv = atk.cross_validate(plan, table, name, {"min_per_class": 2})
    assert len(cv.folds) == 8
    mean, std = cv.auc
    assert 0.0 <= mean <= 1.0 and std >= 0.0
    summ = cv.summary()
    assert summ["n_folds"] == 8 and "0.01" in summ["tpr_at"]


def test_membership_signal_is_detected():
    plan, table = instance(1, n=200, m=16)
    assert atk.cross_validate(plan, table, "lira").auc[0] > 0.7


def test_cross_validate_rejects_missing_models():
    plan, table = instance(0)
    table.present = np.array([True] * 7 + [False])
    with pytest.raises(ValueError, match="7"):
        atk.cross_validate(plan, table, "yeom")


def test_unknown_attack():
    plan, table = instance(0)
    with pytest.raises(ValueError):
        atk.run_attack("nope", table, plan, 0)
