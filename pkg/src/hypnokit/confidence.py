"""Hypnodensity analytics: argmax staging, mean confidence, arousal split,
confidence-thresholded REM selection and export helpers.
"""

from __future__ import annotations

import csv
import html
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UsageError
from .psg_io import N_STAGES, STAGE_NAMES, Hypnogram, Stage

REM = int(Stage.R)
UNKNOWN = int(Stage.UNKNOWN)
RETAIN_LEVELS = (10, 30, 50)


class Hypnodensity:
    """Per-epoch stage probabilities, ``E x 5`` in W, N1, N2, N3, R order.

    ``stages`` optionally carries a final staging that differs from the
    row argmax (an ensemble's majority vote).
    """

    def __init__(self, probs, stages=None, epoch_len_sec: float = 30.0, tol: float = 1e-6):
        p = np.array(probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != N_STAGES or p.shape[0] < 1:
            raise UsageError(f"hypnodensity must be E x {N_STAGES}, got {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < -tol or p.max() > 1 + tol:
            raise UsageError("hypnodensity entries must lie in [0, 1]")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > tol:
            raise UsageError("hypnodensity rows must sum to 1")
        p.flags.writeable = False
        self.probs = p
        self.epoch_len_sec = epoch_len_sec
        if stages is not None:
            stages = np.asarray(stages, dtype=np.int8)
            if stages.shape != (p.shape[0],):
                raise UsageError("stages must have one entry per epoch")
        self.stages = stages

    def __len__(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest stage index
        return self.probs.argmax(axis=1).astype(np.int8)

    def final_stages(self) -> np.ndarray:
        return self.argmax() if self.stages is None else self.stages

    def hypnogram(self) -> Hypnogram:
        return Hypnogram(self.final_stages(), self.epoch_len_sec)


def staging(density: Hypnodensity) -> Hypnogram:
    """Row argmax, ties to the lowest stage index."""
    return Hypnogram(density.argmax(), density.epoch_len_sec)


@dataclass
class ConfidenceSummary:
    overall: float
    per_stage: dict[str, float | None]
    counts: dict[str, int]

    def to_dict(self) -> dict:
        return {"overall": self.overall, "per_stage": self.per_stage, "counts": self.counts}


def mean_confidence(density: Hypnodensity) -> ConfidenceSummary:
    """Mean row maximum overall and per predicted stage (absent stages are None)."""
    rowmax = density.probs.max(axis=1)
    pred = density.argmax()
    per_stage: dict[str, float | None] = {}
    counts: dict[str, int] = {}
    for s, name in enumerate(STAGE_NAMES):
        sel = pred == s
        counts[name] = int(sel.sum())
        per_stage[name] = float(rowmax[sel].mean()) if counts[name] else None
    return ConfidenceSummary(float(rowmax.mean()), per_stage, counts)


def affected_epochs(n_epochs: int, arousals, epoch_len_sec: float = 30.0) -> np.ndarray:
    """Epoch ``i`` is affected when ``[i*len, (i+1)*len)`` meets any arousal interval."""
    hit = np.zeros(n_epochs, dtype=bool)
    for start, dur in arousals:
        first = int(np.floor(start / epoch_len_sec))
        if dur > 0:
            # last epoch whose start lies strictly before the arousal end
            last = int(np.ceil((start + dur) / epoch_len_sec)) - 1
        else:
            last = first
        lo, hi = max(first, 0), min(last, n_epochs - 1)
        if lo <= hi:
            hit[lo : hi + 1] = True
    return hit


def arousal_confidence_split(
    density: Hypnodensity, stages, arousals, epoch_len_sec: float = 30.0, min_epochs: int = 3
) -> dict[str, dict]:
    """Mean confidence of arousal-affected vs unaffected epochs, per stage.

    A stage is reported only when both groups hold at least ``min_epochs``.
    """
    st = stages.stages if isinstance(stages, Hypnogram) else np.asarray(stages)
    n = min(len(density), st.size)
    rowmax = density.probs.max(axis=1)[:n]
    st = st[:n]
    hit = affected_epochs(n, arousals or (), epoch_len_sec)
    out = {}
    for s, name in enumerate(STAGE_NAMES):
        a = (st == s) & hit
        u = (st == s) & ~hit
        if a.sum() >= min_epochs and u.sum() >= min_epochs:
            out[name] = {
                "affected_mean": float(rowmax[a].mean()),
                "unaffected_mean": float(rowmax[u].mean()),
                "n_affected": int(a.sum()),
                "n_unaffected": int(u.sum()),
            }
    return out


# --------------------------------------------------------------------------
# REM thresholding


@dataclass
class RemSelection:
    threshold: float
    accepted: np.ndarray
    tp: int | None = None
    fp: int | None = None
    fn: int | None = None
    tn: int | None = None
    epoch_len_sec: float = 30.0

    @property
    def precision(self) -> float | None:
        if self.tp is None or self.tp + self.fp == 0:
            return None
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float | None:
        if self.tp is None or self.tp + self.fn == 0:
            return None
        return self.tp / (self.tp + self.fn)

    @property
    def retained_minutes(self) -> float:
        return self.accepted.size * self.epoch_len_sec / 60.0

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "accepted": self.accepted.tolist(),
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "retained_minutes": self.retained_minutes,
        }


def rem_accept_mask(density: Hypnodensity, threshold: float) -> np.ndarray:
    p_rem = density.probs[:, REM]
    return (1.0 - p_rem < p_rem) & (p_rem > threshold)


def rem_threshold_select(density: Hypnodensity, threshold: float, reference=None) -> RemSelection:
    """Accept epochs where REM beats non-REM and its probability exceeds ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise UsageError("threshold must lie in [0, 1]")
    mask = rem_accept_mask(density, threshold)
    sel = RemSelection(float(threshold), np.flatnonzero(mask), epoch_len_sec=density.epoch_len_sec)
    if reference is not None:
        sel.tp, sel.fp, sel.fn, sel.tn = _rem_counts(mask, reference)
    return sel


def _rem_counts(mask: np.ndarray, reference) -> tuple[int, int, int, int]:
    ref = reference.stages if isinstance(reference, Hypnogram) else np.asarray(reference)
    n = min(mask.size, ref.size)
    mask, ref = mask[:n], ref[:n]
    scored = ref != UNKNOWN
    pos = ref == REM
    tp = int((mask & pos).sum())
    fp = int((mask & ~pos & scored).sum())
    fn = int((~mask & pos).sum())
    tn = int((~mask & ~pos & scored).sum())
    return tp, fp, fn, tn


SWEEP_COLUMNS = (
    "threshold", "precision", "recall",
    "pct_subjects_ge_10_epochs", "pct_subjects_ge_30_epochs", "pct_subjects_ge_50_epochs",
    "tp", "fp", "fn", "tn",
)


def rem_threshold_sweep(
    densities: Sequence[Hypnodensity], references: Sequence, thresholds: Sequence[float]
) -> list[dict]:
    """Epoch-pooled precision/recall and per-subject retention at each threshold.

    Each density/reference pair is one subject.
    """
    if len(densities) != len(references) or not densities:
        raise UsageError("need one reference per density and at least one subject")
    rows = []
    for t in thresholds:
        counts = np.zeros(4, dtype=np.int64)
        kept = []
        for d, ref in zip(densities, references):
            mask = rem_accept_mask(d, t)
            counts += _rem_counts(mask, ref)
            kept.append(int(mask.sum()))
        tp, fp, fn, tn = (int(c) for c in counts)
        kept = np.asarray(kept)
        row = {
            "threshold": float(t),
            "precision": tp / (tp + fp) if tp + fp else None,
            "recall": tp / (tp + fn) if tp + fn else None,
        }
        for level in RETAIN_LEVELS:
            row[f"pct_subjects_ge_{level}_epochs"] = 100.0 * float((kept >= level).mean())
        row.update(tp=tp, fp=fp, fn=fn, tn=tn)
        rows.append(row)
    return rows


def parse_sweep(spec: str) -> np.ndarray:
    """``start:stop:step`` inclusive of ``stop`` (e.g. ``0:1:0.01``)."""
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise UsageError(f"sweep must be start:stop:step, got {spec!r}") from exc
    if step <= 0 or stop < start:
        raise UsageError(f"invalid sweep {spec!r}")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(n), 12)


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in SWEEP_COLUMNS])
    return buf.getvalue()


# --------------------------------------------------------------------------
# confidence vs agreement


@dataclass
class LineFit:
    slope: float
    intercept: float
    r2: float
    n: int


def confidence_kappa_regression(confidence, kappa) -> LineFit:
    """Ordinary least squares of per-night kappa on per-night confidence."""
    x = np.asarray(confidence, dtype=np.float64)
    y = np.asarray(kappa, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise UsageError("confidence and kappa must be equal-length vectors")
    if x.size < 3:
        raise UsageError("need at least three nights")
    if np.ptp(x) == 0.0:
        raise UsageError("confidence has zero variance")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    yc = y - y.mean()
    slope = float(xc @ yc) / sxx
    intercept = float(y.mean() - slope * x.mean())
    syy = float(yc @ yc)
    resid = y - (intercept + slope * x)
    r2 = 0.0 if syy == 0.0 else 1.0 - float(resid @ resid) / syy
    return LineFit(slope, intercept, float(min(max(r2, 0.0), 1.0)), int(x.size))


# --------------------------------------------------------------------------
# export


def density_csv(density: Hypnodensity) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch",) + STAGE_NAMES)
    for i, row in enumerate(density.probs):
        w.writerow([i] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_density_csv(path, epoch_len_sec: float = 30.0) -> Hypnodensity:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or [c.strip() for c in rows[0][1:]] != list(STAGE_NAMES):
        raise UsageError(f"{path}: expected header epoch,{','.join(STAGE_NAMES)}")
    probs = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return Hypnodensity(probs.reshape(-1, N_STAGES), epoch_len_sec=epoch_len_sec)


def summary_json(density: Hypnodensity, extra: dict | None = None) -> str:
    doc = {"epochs": len(density), "confidence": mean_confidence(density).to_dict()}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)


STAGE_COLORS = ("#f2c14e", "#8ecae6", "#219ebc", "#023047", "#e76f51")


def density_svg(density: Hypnodensity, width: int = 900, height: int = 220, title: str = "") -> str:
    """Stacked-area plot, W at the bottom and R at the top."""
    n = len(density)
    margin = 30
    pw, ph = width - 2 * margin, height - 2 * margin
    xs = margin + pw * np.arange(n + 1) / n
    cum = np.vstack([np.zeros(n), np.cumsum(density.probs, axis=1).T])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{margin}" y="{margin - 10}" font-size="12">{html.escape(title)}</text>')

    def y(v):
        return margin + ph * (1.0 - v)

    for s, name in enumerate(STAGE_NAMES):
        lo, hi = cum[s], cum[s + 1]
        top = " ".join(f"{xs[i]:.2f},{y(hi[i]):.2f} {xs[i + 1]:.2f},{y(hi[i]):.2f}" for i in range(n))
        bottom = " ".join(f"{xs[i + 1]:.2f},{y(lo[i]):.2f} {xs[i]:.2f},{y(lo[i]):.2f}"
                          for i in reversed(range(n)))
        parts.append(f'<polygon class="stage-{name}" fill="{STAGE_COLORS[s]}" stroke="none" '
                     f'points="{top} {bottom}"/>')
    for s, name in enumerate(STAGE_NAMES):
        lx = margin + s * 60
        parts.append(f'<rect x="{lx}" y="{height - margin + 8}" width="10" height="10" fill="{STAGE_COLORS[s]}"/>')
        parts.append(f'<text x="{lx + 14}" y="{height - margin + 17}" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
