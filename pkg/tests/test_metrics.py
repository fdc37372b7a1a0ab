import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_stages
from hypnokit.errors import UsageError
from hypnokit.metrics import (
    LIGHT_SLEEP_NAMES,
    agreement,
    cohen_kappa,
    confusion_matrix,
    dataset_summary,
    period_alignment,
    remap_light_sleep,
    sleep_metrics,
    stage_runs,
    summarize,
    to_json,
)
from hypnokit.psg_io import Hypnogram, Stage

W, N1, N2, N3, R, U = 0, 1, 2, 3, 4, 5


def oracle(ref, pred, k=5):
    """Brute-force loops over epochs; nothing shared with the library."""
    cm = [[0] * k for _ in range(k)]
    for a, b in zip(ref, pred):
        if a == U or b == U:
            continue
        cm[int(a)][int(b)] += 1
    n = sum(map(sum, cm))
    po = sum(cm[i][i] for i in range(k)) / n
    pe = sum(sum(cm[i]) * sum(cm[j][i] for j in range(k)) for i in range(k)) / (n * n)
    kappa = 1.0 if pe == 1 else (po - pe) / (1 - pe)
    f1 = []
    for s in range(k):
        tp = cm[s][s]
        fp = sum(cm[j][s] for j in range(k)) - tp
        fn = sum(cm[s]) - tp
        f1.append(None if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return cm, po, kappa, f1


def test_identical_hypnograms():
    h = [0, 1, 2, 3, 4, 2, 2]
    rep = agreement(h, h)
    assert rep.cohen_kappa == 1.0 and rep.accuracy == 1.0
    assert rep.f1 == [1.0] * 5 and rep.macro_f1 == 1.0


def test_hand_case_kappa_minus_one():
    rep = agreement([W, W, N2, N2], [N2, N2, W, W])
    assert rep.cohen_kappa == -1.0 and rep.accuracy == 0.0


def test_constant_and_equal_sides():
    assert agreement([N2] * 5, [N2] * 5).cohen_kappa == 1.0


def test_no_usable_epochs():
    with pytest.raises(UsageError):
        agreement([U, U], [W, N1])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 400))
def test_agreement_matches_oracle(seed, n):
    rng = np.random.default_rng(seed)
    ref, pred = random_stages(rng, n, 0.1), random_stages(rng, n, 0.1)
    ref[0] = pred[0] = rng.integers(0, 5)  # at least one usable epoch
    rep = agreement(ref, pred)
    cm, po, kappa, f1 = oracle(ref, pred)
    assert rep.confusion.tolist() == cm
    assert abs(rep.accuracy - po) <= 1e-12
    assert abs(rep.cohen_kappa - kappa) <= 1e-12
    for a, b in zip(rep.f1, f1):
        assert (a is None and b is None) or abs(a - b) <= 1e-12
    present = [v for v in f1 if v is not None]
    assert abs(rep.macro_f1 - sum(present) / len(present)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kappa_symmetric_and_unknown_insertion_invariant(seed):
    rng = np.random.default_rng(seed)
    ref, pred = random_stages(rng, 200), random_stages(rng, 200)
    assert math.isclose(cohen_kappa(ref, pred), cohen_kappa(pred, ref), abs_tol=1e-14)
    pos = np.sort(rng.choice(250, 50, replace=False))
    ref2, pred2 = np.insert(ref, pos - np.arange(50), U), np.insert(pred, pos - np.arange(50), U)
    a, b = agreement(ref, pred), agreement(ref2, pred2)
    assert np.array_equal(a.confusion, b.confusion) and a.cohen_kappa == b.cohen_kappa and a.f1 == b.f1


def test_confusion_total_equals_epochs_used():
    rep = agreement([0, 1, 5, 2], [0, 5, 3, 2])
    assert rep.confusion.sum() == rep.epochs_used == 2
    assert confusion_matrix([0, 1], [1, 1])[0, 1] == 1


def test_light_sleep_remap():
    assert remap_light_sleep(agreement([N1], [N2])).accuracy == 1.0
    assert remap_light_sleep(Hypnogram(np.array([0, 1, 2, 3, 4, 5]))).tolist() == [0, 1, 1, 2, 3, 5]
    w = agreement([W, W], [W, W])
    assert remap_light_sleep(w).cohen_kappa == w.cohen_kappa == 1.0
    assert remap_light_sleep(w).stage_names == LIGHT_SLEEP_NAMES


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_light_sleep_kappa_not_lower_when_only_n1_n2_confused(seed):
    rng = np.random.default_rng(seed)
    ref = random_stages(rng, 300)
    pred = ref.copy()
    light = np.flatnonzero((ref == N1) | (ref == N2))
    flip = light[rng.random(light.size) < 0.4]
    pred[flip] = 3 - pred[flip]  # N1 <-> N2
    five = agreement(ref, pred)
    assert remap_light_sleep(five).cohen_kappa >= five.cohen_kappa - 1e-12


def test_sleep_metrics_hand_case():
    m = sleep_metrics(Hypnogram(np.array([W, W, N1, N2, N2, R, W, N2])))
    assert (m.TST, m.SOL, m.WASO, m.REMLAT, m.STAGEC) == (2.5, 1.0, 0.5, 2.5, 5)
    assert m.SEFF == 62.5
    assert math.isclose(m.PN1 + m.PN2 + m.PN3 + m.PREM, 100.0, abs_tol=1e-9)


def test_sleep_metrics_degenerate_nights():
    wake = sleep_metrics(Hypnogram(np.zeros(20)))
    assert wake.TST == 0 and wake.SEFF == 0 and wake.WASO is None and wake.SOL is None and wake.PN2 is None
    n2 = sleep_metrics(Hypnogram(np.full(960, N2)))
    assert (n2.TST, n2.SEFF, n2.PN2, n2.STAGEC) == (480.0, 100.0, 100.0, 0)


def test_stagec_ignores_unknown_neighbours():
    assert sleep_metrics(Hypnogram(np.array([W, U, N2, N2, R]))).STAGEC == 1


# ---------------------------------------------------------------- period alignment

def runs_oracle(h, s, min_len):
    out, i = [], 0
    while i < len(h):
        if h[i] == s:
            j = i
            while j < len(h) and h[j] == s:
                j += 1
            if j - i >= min_len:
                out.append((i, j))
            i = j
        else:
            i += 1
    return out


def alignment_oracle(ref, pred, s, min_len=6):
    hr, pr = runs_oracle(ref, s, min_len), runs_oracle(pred, s, min_len)

    def meets(a, b):
        return a[0] < b[1] and b[0] < a[1]

    pairs = []
    for h in hr:
        ps = [p for p in pr if meets(h, p)]
        if len(ps) == 1 and len([g for g in hr if meets(g, ps[0])]) == 1:
            pairs.append((h, ps[0]))
    return pairs


def test_alignment_hand_cases():
    h = np.full(40, N2)
    h[10:20] = R
    p = np.full(40, N2)
    p[9:22] = R
    al = period_alignment(h, p)
    assert al.pairs == [((10, 20), (9, 22))]
    assert (al.start_offsets, al.length_offsets) == ([-1], [3])
    same = period_alignment(h, h)
    assert (same.start_offsets, same.length_offsets) == ([0], [0])


def test_alignment_excludes_split_counterparts():
    h = np.full(40, N2)
    h[5:30] = R
    p = h.copy()
    p[15] = N2  # the reference run now meets two predicted runs
    assert period_alignment(h, p).pairs == []


def test_runs_are_longer_than_five_epochs():
    h = np.array([R] * 5 + [W] + [R] * 6)
    assert stage_runs(h, R) == [(6, 12)]


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([Stage.R, Stage.N2]))
def test_alignment_matches_oracle(seed, stage):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 400))

    def blocky():
        out = []
        while len(out) < n:
            out += [int(rng.choice([0, 2, 4, 4, 2, 5]))] * int(rng.integers(1, 25))
        return np.array(out[:n])

    ref, pred = blocky(), blocky()
    al = period_alignment(ref, pred, stage)
    assert al.pairs == alignment_oracle(list(ref), list(pred), int(stage))
    assert al.start_offsets == [p[0] - h[0] for h, p in al.pairs]


# ---------------------------------------------------------------- summaries

def test_summarize_quantiles():
    s = summarize(range(1, 101))
    assert (s["median"], s["q1"], s["q3"]) == (50.5, 25.75, 75.25)
    one = summarize([0.7])
    assert one["mean"] == one["median"] == 0.7 and one["sd"] == 0.0


def _close(a, b):
    # pooled sums depend on order only through float rounding
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k]) for k in a)
    if isinstance(a, list):
        return len(a) == len(b) and all(map(_close, a, b))
    if isinstance(a, float):
        return math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-15)
    return a == b


def test_dataset_summary_groups_and_order_invariance():
    rng = np.random.default_rng(0)
    reps = [agreement(random_stages(rng, 50), random_stages(rng, 50)) for _ in range(6)]
    groups = ["a", "b", "a", "b", "b", "a"]
    s = dataset_summary(reps, groups)
    assert set(s) == {"a", "b", "all"} and s["all"]["nights"] == 6
    perm = [5, 3, 1, 0, 4, 2]
    t = dataset_summary([reps[i] for i in perm], [groups[i] for i in perm])
    assert _close(json.loads(to_json(s)), json.loads(to_json(t)))
    with pytest.raises(UsageError):
        dataset_summary([])
