"""Agreement statistics, sleep-architecture metrics and period alignment.

Hypnograms are integer arrays over ``Stage`` values (or :class:`Hypnogram`
objects). Unknown epochs never enter agreement counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import UsageError
from .psg_io import N_STAGES, STAGE_NAMES, Hypnogram, Stage

UNKNOWN = int(Stage.UNKNOWN)
LIGHT_SLEEP_NAMES = ("W", "Light", "Deep", "R")
# W, N1, N2, N3, R -> W, Light, Light, Deep, R
_LIGHT_MAP = np.array([0, 1, 1, 2, 3, UNKNOWN], dtype=np.int8)

METADATA = {
    "unknown_excluded": True,
    "seff_denominator": "all epochs in window, Unknown included",
    "remlat_origin": "start of analysed window",
    "stagec_ignores_unknown": True,
    "f1_aggregation": "per-night mean and pooled confusion both reported",
}


def _stages(h) -> np.ndarray:
    if isinstance(h, Hypnogram):
        return h.stages.astype(np.int64)
    return np.asarray(h, dtype=np.int64)


# --------------------------------------------------------------------------
# agreement


@dataclass
class AgreementReport:
    confusion: np.ndarray  # reference rows, prediction columns
    accuracy: float
    cohen_kappa: float
    f1: list[float | None]
    macro_f1: float
    epochs_used: int
    stage_names: tuple[str, ...] = STAGE_NAMES

    def to_dict(self) -> dict:
        return {
            "epochs_used": self.epochs_used,
            "accuracy": self.accuracy,
            "kappa": self.cohen_kappa,
            "macro_f1": self.macro_f1,
            "f1": {n: v for n, v in zip(self.stage_names, self.f1)},
            "confusion": self.confusion.tolist(),
            "stages": list(self.stage_names),
        }

    def confusion_csv(self) -> str:
        lines = ["reference," + ",".join(self.stage_names)]
        for name, row in zip(self.stage_names, self.confusion):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def confusion_matrix(reference, prediction, n_classes: int = N_STAGES) -> np.ndarray:
    ref = _stages(reference)
    pred = _stages(prediction)
    if ref.shape != pred.shape:
        raise UsageError(f"hypnogram lengths differ: {ref.size} vs {pred.size}")
    keep = (ref != UNKNOWN) & (pred != UNKNOWN)
    idx = ref[keep] * n_classes + pred[keep]
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def report_from_confusion(cm: np.ndarray, stage_names: Sequence[str] = STAGE_NAMES) -> AgreementReport:
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise UsageError("no epochs left after excluding Unknown")
    diag = np.diag(cm).astype(np.float64)
    p_o = diag.sum() / n
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    p_e = float((rows * cols).sum()) / (float(n) * n)
    if p_e == 1.0:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    f1: list[float | None] = []
    for s in range(cm.shape[0]):
        tp = diag[s]
        denom = 2 * tp + (cols[s] - tp) + (rows[s] - tp)
        f1.append(None if denom == 0 else float(2 * tp / denom))
    present = [v for v in f1 if v is not None]
    macro = float(np.mean(present)) if present else float("nan")
    return AgreementReport(cm, float(p_o), float(kappa), f1, macro, n, tuple(stage_names))


def agreement(reference, prediction) -> AgreementReport:
    """Per-night agreement; epochs Unknown on either side are skipped."""
    return report_from_confusion(confusion_matrix(reference, prediction))


def cohen_kappa(reference, prediction) -> float:
    return agreement(reference, prediction).cohen_kappa


def remap_light_sleep(obj):
    """Merge N1 and N2 into Light sleep (N3 becomes Deep).

    Accepts a hypnogram (returns 4-stage labels, Unknown kept as 5) or an
    :class:`AgreementReport` (returns the report recomputed on 4 stages).
    """
    if isinstance(obj, AgreementReport):
        if obj.confusion.shape != (N_STAGES, N_STAGES):
            raise UsageError("remap_light_sleep needs a 5-stage report")
        merge = _LIGHT_MAP[:N_STAGES]
        cm = np.zeros((4, 4), dtype=np.int64)
        np.add.at(cm, (merge[:, None], merge[None, :]), obj.confusion)
        return report_from_confusion(cm, LIGHT_SLEEP_NAMES)
    return _LIGHT_MAP[_stages(obj)]


def light_sleep_agreement(reference, prediction) -> AgreementReport:
    return remap_light_sleep(agreement(reference, prediction))


# --------------------------------------------------------------------------
# sleep architecture


@dataclass
class SleepMetrics:
    TST: float
    SEFF: float
    SOL: float | None
    REMLAT: float | None
    PN1: float | None
    PN2: float | None
    PN3: float | None
    PREM: float | None
    WASO: float | None
    STAGEC: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sleep_metrics(hypnogram, epoch_len_sec: float | None = None) -> SleepMetrics:
    """Architecture metrics over the analysed window; times in minutes."""
    if epoch_len_sec is None:
        epoch_len_sec = hypnogram.epoch_len_sec if isinstance(hypnogram, Hypnogram) else 30.0
    st = _stages(hypnogram)
    if st.size == 0:
        raise UsageError("empty hypnogram")
    ep_min = epoch_len_sec / 60.0
    counts = np.bincount(st, minlength=UNKNOWN + 1)
    n_sleep = int(counts[1:5].sum())
    tst = n_sleep * ep_min
    seff = 100.0 * n_sleep / st.size
    sleep_idx = np.flatnonzero((st >= 1) & (st <= 4))
    rem_idx = np.flatnonzero(st == int(Stage.R))
    if n_sleep:
        first = int(sleep_idx[0])
        sol = first * ep_min
        waso = int((st[first:] == int(Stage.W)).sum()) * ep_min
        pn = [100.0 * counts[s] / n_sleep for s in (1, 2, 3, 4)]
    else:
        sol = waso = None
        pn = [None] * 4
    remlat = float(rem_idx[0]) * ep_min if rem_idx.size else None
    a, b = st[:-1], st[1:]
    stagec = int(((a != b) & (a != UNKNOWN) & (b != UNKNOWN)).sum())
    return SleepMetrics(tst, seff, sol, remlat, *pn, waso, stagec)


# --------------------------------------------------------------------------
# period alignment


def stage_runs(hypnogram, stage: int, min_len: int = 6) -> list[tuple[int, int]]:
    """Maximal half-open runs ``[start, stop)`` of ``stage`` lasting ``min_len`` epochs or more."""
    st = _stages(hypnogram)
    hit = np.concatenate([[False], st == int(stage), [False]])
    edges = np.flatnonzero(hit[1:] != hit[:-1])
    starts, stops = edges[0::2], edges[1::2]
    return [(int(a), int(b)) for a, b in zip(starts, stops) if b - a >= min_len]


@dataclass
class PeriodAlignment:
    stage: str
    pairs: list[tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=list)
    start_offsets: list[int] = field(default_factory=list)
    length_offsets: list[int] = field(default_factory=list)

    @property
    def mean_start_offset(self) -> float | None:
        return float(np.mean(self.start_offsets)) if self.start_offsets else None

    @property
    def mean_length_offset(self) -> float | None:
        return float(np.mean(self.length_offsets)) if self.length_offsets else None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "pairs": [[list(h), list(p)] for h, p in self.pairs],
            "start_offsets": self.start_offsets,
            "length_offsets": self.length_offsets,
            "mean_start_offset": self.mean_start_offset,
            "mean_length_offset": self.mean_length_offset,
        }


def period_alignment(reference, prediction, stage=Stage.R, min_len: int = 6) -> PeriodAlignment:
    """Pair runs that have exactly one overlapping counterpart on each side."""
    ref, pred = _stages(reference), _stages(prediction)
    if ref.shape != pred.shape:
        raise UsageError(f"hypnogram lengths differ: {ref.size} vs {pred.size}")
    h_runs = stage_runs(ref, stage, min_len)
    p_runs = stage_runs(pred, stage, min_len)
    out = PeriodAlignment(STAGE_NAMES[int(stage)])
    # runs on each side are sorted and disjoint, so a two-pointer sweep
    # finds every overlapping pair
    overlaps: list[tuple[int, int]] = []
    j0 = 0
    for i, (hs, he) in enumerate(h_runs):
        while j0 < len(p_runs) and p_runs[j0][1] <= hs:
            j0 += 1
        j = j0
        while j < len(p_runs) and p_runs[j][0] < he:
            overlaps.append((i, j))
            j += 1
    h_deg = np.bincount([i for i, _ in overlaps], minlength=len(h_runs))
    p_deg = np.bincount([j for _, j in overlaps], minlength=len(p_runs))
    for i, j in overlaps:
        if h_deg[i] == 1 and p_deg[j] == 1:
            h, p = h_runs[i], p_runs[j]
            out.pairs.append((h, p))
            out.start_offsets.append(p[0] - h[0])
            out.length_offsets.append((p[1] - p[0]) - (h[1] - h[0]))
    return out


# --------------------------------------------------------------------------
# summaries


def summarize(values: Iterable[float]) -> dict:
    """Mean, SD (n-1), median and linear-interpolation IQR."""
    x = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if x.size == 0:
        return {"n": 0, "mean": None, "sd": None, "median": None, "q1": None, "q3": None}
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return {
        "n": int(x.size),
        "mean": float(x.mean()),
        "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
    }


def dataset_summary(
    reports: Sequence[AgreementReport], groups: Sequence[str] | None = None
) -> dict[str, dict]:
    """Per-group per-night summaries plus pooled (summed-confusion) agreement.

    ``groups`` tags each report (cohort or clinical subgroup); reports are
    also always summarised together under ``"all"``.
    """
    if not reports:
        raise UsageError("dataset_summary needs at least one report")
    if groups is None:
        groups = ["all"] * len(reports)
    if len(groups) != len(reports):
        raise UsageError("groups must tag every report")
    buckets: dict[str, list[AgreementReport]] = {"all": list(reports)}
    for tag, rep in zip(groups, reports):
        if tag != "all":
            buckets.setdefault(tag, []).append(rep)
    out = {}
    for tag in sorted(buckets):
        reps = buckets[tag]
        names = reps[0].stage_names
        pooled = report_from_confusion(sum(r.confusion for r in reps), names)
        out[tag] = {
            "nights": len(reps),
            "kappa": summarize(r.cohen_kappa for r in reps),
            "accuracy": summarize(r.accuracy for r in reps),
            "macro_f1": summarize(r.macro_f1 for r in reps),
            "f1": {n: summarize(r.f1[s] for r in reps) for s, n in enumerate(names)},
            "pooled": pooled.to_dict(),
        }
    return out


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
