"""Seeded synthetic PSG: Markov hypnograms, spectrally templated signals,
arousal events, rater noise and cohort covariates.

Subject ``i`` of a corpus draws from ``numpy.random.default_rng([seed, i])``
so subjects can be generated independently and in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .errors import UsageError
from .psg_io import (
    N_STAGES,
    STAGE_NAMES,
    Channel,
    ChannelRole,
    Hypnogram,
    Recording,
    Stage,
    save_record,
)

UV = 1e-6

DEFAULT_TRANSITIONS = (
    (0.920, 0.065, 0.015, 0.000, 0.000),
    (0.040, 0.760, 0.170, 0.000, 0.030),
    (0.006, 0.012, 0.944, 0.022, 0.016),
    (0.004, 0.003, 0.038, 0.955, 0.000),
    (0.012, 0.018, 0.015, 0.000, 0.955),
)

# per stage: (low Hz, high Hz, RMS microvolts)
DEFAULT_EEG_TEMPLATES = {
    "W": ((1.0, 4.0, 5.0), (8.0, 12.0, 22.0), (15.0, 30.0, 6.0)),
    "N1": ((1.0, 3.5, 6.0), (4.0, 7.0, 22.0), (8.0, 12.0, 4.0)),
    "N2": ((0.5, 2.0, 14.0), (4.0, 7.0, 12.0)),
    "N3": ((0.5, 2.0, 60.0), (4.0, 7.0, 6.0)),
    "R": ((2.0, 7.0, 9.0), (8.0, 12.0, 3.0), (15.0, 30.0, 3.0)),
}
DEFAULT_EMG_RMS = {"W": 20.0, "N1": 10.0, "N2": 8.0, "N3": 8.0, "R": 2.0}

DEFAULT_RATER_CONFUSION = (
    (0.90, 0.07, 0.02, 0.00, 0.01),
    (0.10, 0.70, 0.15, 0.00, 0.05),
    (0.01, 0.06, 0.85, 0.06, 0.02),
    (0.00, 0.00, 0.15, 0.85, 0.00),
    (0.02, 0.05, 0.03, 0.00, 0.90),
)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_subjects: int = 25
    night_len_hours: float = 8.0
    sample_rate_hz: float = 128.0
    epoch_len_sec: float = 30.0
    n_eeg: int = 2
    n_eog: int = 2
    n_emg: int = 1
    transitions: tuple = DEFAULT_TRANSITIONS
    eeg_templates: dict = field(default_factory=lambda: dict(DEFAULT_EEG_TEMPLATES))
    emg_rms: dict = field(default_factory=lambda: dict(DEFAULT_EMG_RMS))
    eog_leak: float = 0.4
    spindles_per_min: float = 5.0
    spindle_uv: float = 35.0
    saccades_per_min: float = 8.0
    saccade_uv: float = 90.0
    blinks_per_min: float = 10.0
    blink_uv: float = 110.0
    arousals_per_hour: float = 4.0
    arousal_uv: float = 18.0
    rater_confusion: tuple = DEFAULT_RATER_CONFUSION
    physical_uv: float = 1000.0

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=np.float64)
        if t.shape != (N_STAGES, N_STAGES) or np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1)) > 1e-9:
            raise UsageError("transitions must be a row-stochastic 5x5 matrix")
        c = np.asarray(self.rater_confusion, dtype=np.float64)
        if c.shape != (N_STAGES, N_STAGES) or np.any(c < 0) or np.max(np.abs(c.sum(axis=1) - 1)) > 1e-9:
            raise UsageError("rater_confusion must be a row-stochastic 5x5 matrix")
        for name in STAGE_NAMES:
            if name not in self.eeg_templates or name not in self.emg_rms:
                raise UsageError(f"missing spectral template for stage {name}")
            for lo, hi, rms in self.eeg_templates[name]:
                if not (0 <= lo < hi) or rms < 0:
                    raise UsageError(f"bad band ({lo}, {hi}, {rms}) for stage {name}")
        if self.n_subjects < 1 or self.night_len_hours <= 0 or self.sample_rate_hz <= 0:
            raise UsageError("n_subjects, night_len_hours and sample_rate_hz must be positive")
        if self.n_eeg < 0 or self.n_eog < 0 or self.n_emg < 0:
            raise UsageError("channel counts must be nonnegative")

    @property
    def n_epochs(self) -> int:
        return int(round(self.night_len_hours * 3600 / self.epoch_len_sec))

    @property
    def epoch_samples(self) -> int:
        return int(round(self.epoch_len_sec * self.sample_rate_hz))


def subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


# --------------------------------------------------------------------------
# hypnograms and raters


def gen_hypnogram(config: SynthConfig, rng: np.random.Generator, n_epochs: int | None = None) -> Hypnogram:
    """Markov chain over stages at epoch resolution, starting awake."""
    n = config.n_epochs if n_epochs is None else n_epochs
    cum = np.cumsum(np.asarray(config.transitions, dtype=np.float64), axis=1)
    cum[:, -1] = 1.0
    u = rng.random(n)
    out = np.empty(n, dtype=np.int8)
    s = int(Stage.W)
    out[0] = s
    for i in range(1, n):
        s = int(np.searchsorted(cum[s], u[i], side="right"))
        out[i] = s
    return Hypnogram(out, config.epoch_len_sec)


def noisy_rescore(hypnogram: Hypnogram, confusion, rng: np.random.Generator) -> Hypnogram:
    """Redraw each epoch from its stage's confusion row; Unknown is kept."""
    c = np.asarray(confusion, dtype=np.float64)
    if c.shape != (N_STAGES, N_STAGES) or np.max(np.abs(c.sum(axis=1) - 1)) > 1e-9:
        raise UsageError("confusion must be a row-stochastic 5x5 matrix")
    cum = np.cumsum(c, axis=1)
    cum[:, -1] = 1.0
    st = hypnogram.stages.astype(np.int64)
    u = rng.random(st.size)
    out = st.copy()
    scored = st != int(Stage.UNKNOWN)
    rows = cum[st[scored]]
    out[scored] = (u[scored, None] >= rows).sum(axis=1)
    return Hypnogram(out, hypnogram.epoch_len_sec)


# --------------------------------------------------------------------------
# signals


def band_noise(n: int, fs: float, bands, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with flat power in each ``(lo, hi, rms)`` band."""
    if n == 0:
        return np.zeros(0)
    spec = sfft.rfft(rng.standard_normal(n))
    freqs = sfft.rfftfreq(n, 1.0 / fs)
    gain = np.zeros(freqs.size)
    total = freqs.size
    for lo, hi, rms in bands:
        sel = (freqs >= lo) & (freqs < hi)
        k = int(sel.sum())
        if k:
            # a unit-variance white signal puts about k/total of its power in the band
            gain[sel] = rms * np.sqrt(total / k)
    return sfft.irfft(spec * gain, n)


def _mosaic(stages: np.ndarray, es: int, fs: float, bands_for, rng) -> np.ndarray:
    """Stage-wise noise: each stage's epochs are cut from one stream with that stage's spectrum."""
    n_ep = stages.size
    out = np.zeros((n_ep, es))
    for s in range(N_STAGES):
        idx = np.flatnonzero(stages == s)
        if idx.size:
            out[idx] = band_noise(idx.size * es, fs, bands_for(s), rng).reshape(idx.size, es)
    return out.ravel()


def _poisson_times(rng, epochs: np.ndarray, rate_per_epoch: float, epoch_sec: float) -> np.ndarray:
    """Event onsets (seconds) in the given epochs."""
    counts = rng.poisson(rate_per_epoch, size=epochs.size)
    starts = np.repeat(epochs, counts) * epoch_sec
    return np.sort(starts + rng.random(starts.size) * epoch_sec)


def _add_event(sig: np.ndarray, onset: int, shape: np.ndarray) -> None:
    stop = min(sig.size, onset + shape.size)
    if onset < stop:
        sig[onset:stop] += shape[: stop - onset]


def _spindle(fs, rng, amp):
    dur = rng.uniform(0.5, 1.5)
    t = np.arange(int(dur * fs)) / fs
    return amp * np.hanning(t.size) * np.sin(2 * np.pi * rng.uniform(12.0, 14.0) * t + rng.uniform(0, 2 * np.pi))


def _saccade(fs, rng, amp):
    t = np.arange(int(1.2 * fs)) / fs
    rise = 1.0 / (1.0 + np.exp(-(t - 0.05) / 0.01))
    return amp * rng.choice([-1.0, 1.0]) * rise * np.exp(-t / 0.4)


def _blink(fs, rng, amp):
    t = np.arange(int(0.4 * fs)) / fs
    return amp * rng.uniform(0.7, 1.3) * np.sin(np.pi * t / 0.4) ** 2


def render_night(hypnogram: Hypnogram, config: SynthConfig, rng: np.random.Generator,
                 record_id: str = "synth") -> Recording:
    """Signals (volts) for a hypnogram, with arousal annotations."""
    fs = config.sample_rate_hz
    es = config.epoch_samples
    ep = config.epoch_len_sec
    st = hypnogram.stages.astype(np.int64)
    n = st.size * es
    gain = rng.uniform(0.8, 1.25)
    eeg_bands = {s: [(lo, hi, rms * gain) for lo, hi, rms in config.eeg_templates[name]]
                 for s, name in enumerate(STAGE_NAMES)}
    eog_bands = {s: [(lo, hi, rms * config.eog_leak) for lo, hi, rms in b] for s, b in eeg_bands.items()}

    eeg = [_mosaic(st, es, fs, eeg_bands.get, rng) for _ in range(config.n_eeg)]
    eog = [_mosaic(st, es, fs, eog_bands.get, rng) for _ in range(config.n_eog)]
    emg_top = min(60.0, fs / 2)
    emg_bands = {s: [(20.0, emg_top, config.emg_rms[name])] for s, name in enumerate(STAGE_NAMES)}
    emg = [_mosaic(st, es, fs, emg_bands.get, rng) for _ in range(config.n_emg)]

    epochs_of = {s: np.flatnonzero(st == s) for s in range(N_STAGES)}
    per_epoch = ep / 60.0
    for t in _poisson_times(rng, epochs_of[int(Stage.N2)], config.spindles_per_min * per_epoch, ep):
        shape = _spindle(fs, rng, config.spindle_uv * gain)
        for k, sig in enumerate(eeg):
            _add_event(sig, int(t * fs), shape * (1.0 - 0.15 * k))
        for sig in eog:
            _add_event(sig, int(t * fs), shape * config.eog_leak)
    for t in _poisson_times(rng, epochs_of[int(Stage.R)], config.saccades_per_min * per_epoch, ep):
        shape = _saccade(fs, rng, config.saccade_uv)
        for k, sig in enumerate(eog):
            _add_event(sig, int(t * fs), shape if k % 2 == 0 else -shape)
    for t in _poisson_times(rng, epochs_of[int(Stage.W)], config.blinks_per_min * per_epoch, ep):
        shape = _blink(fs, rng, config.blink_uv)
        for sig in eog:
            _add_event(sig, int(t * fs), shape)

    arousals = []
    sleep_epochs = np.flatnonzero((st >= 1) & (st <= 4))
    hours = st.size * ep / 3600.0
    n_arousal = rng.poisson(config.arousals_per_hour * hours) if sleep_epochs.size else 0
    for _ in range(n_arousal):
        start = (sleep_epochs[rng.integers(sleep_epochs.size)] + rng.random()) * ep
        dur = rng.uniform(3.0, 10.0)
        i0 = int(start * fs)
        m = int(dur * fs)
        burst = band_noise(m, fs, [(8.0, 12.0, config.arousal_uv * gain)], rng) * np.hanning(m)
        for sig in eeg:
            _add_event(sig, i0, burst)
        for sig in emg:
            _add_event(sig, i0, band_noise(m, fs, [(20.0, emg_top, 15.0)], rng) * np.hanning(m))
        arousals.append((round(start, 3), round(dur, 3)))
    arousals.sort()

    limit = config.physical_uv
    phys = (-limit * UV, limit * UV)

    def chan(label, role, x):
        return Channel(label, role, fs, np.clip(x, -limit, limit) * UV, physical_range=phys, unit="uV")

    eeg_labels = ["EEG C3-M2", "EEG C4-M1", "EEG F3-M2", "EEG F4-M1", "EEG O1-M2", "EEG O2-M1"]
    eog_labels = ["EOG E1-M2", "EOG E2-M2", "EOG E3-M2", "EOG E4-M2"]
    channels = [chan(eeg_labels[i % len(eeg_labels)] + ("" if i < len(eeg_labels) else f" {i}"),
                     ChannelRole.EEG, x) for i, x in enumerate(eeg)]
    channels += [chan(eog_labels[i % len(eog_labels)] + ("" if i < len(eog_labels) else f" {i}"),
                      ChannelRole.EOG, x) for i, x in enumerate(eog)]
    channels += [chan("EMG Chin" + ("" if i == 0 else f" {i}"), ChannelRole.EMG, x) for i, x in enumerate(emg)]
    duration = n / fs
    return Recording(record_id, tuple(channels), lights_off_sec=0.0, lights_on_sec=duration,
                     hypnogram=hypnogram, arousals=tuple(arousals), meta={"subject": record_id})


def gen_signals(hypnogram: Hypnogram, config: SynthConfig, rng: np.random.Generator,
                record_id: str = "synth") -> Recording:
    return render_night(hypnogram, config, rng, record_id)


def gen_subject(config: SynthConfig, index: int) -> Recording:
    rng = subject_rng(config.seed, index)
    hyp = gen_hypnogram(config, rng)
    return render_night(hyp, config, rng, record_id=f"sub{index:03d}")


def gen_corpus(config: SynthConfig, out_dir) -> list[Path]:
    """Write every subject as EDF plus side-cars; returns the EDF paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(config.n_subjects):
        rec = gen_subject(config, i)
        path = out / f"{rec.id}.edf"
        save_record(rec, path)
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# covariates for the mixed model


COVARIATE_COLUMNS = ("record", "cohort", "age", "sex", "bmi", "pd", "ahi", "rbd",
                     "pn1", "stagec", "confidence", "kappa")


def gen_covariates(n_records: int = 120, n_cohorts: int = 2, seed: int = 0,
                   cohort_sd: float = 0.03, noise_sd: float = 0.05) -> list[dict]:
    """Per-night covariates with kappa from a known random-intercept generator.

    kappa is linear in the covariates with the coefficients of
    ``COVARIATE_TRUTH`` (confidence in percent points), plus a per-cohort
    offset and Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, cohort_sd, size=n_cohorts)
    rows = []
    for i in range(n_records):
        cohort = i % n_cohorts
        age = rng.uniform(45, 80)
        sex = int(rng.random() < 0.6)
        bmi = rng.normal(26, 3.5)
        pd = int(rng.random() < 0.5)
        ahi = max(0.0, rng.gamma(2.0, 6.0))
        rbd = int(rng.random() < (0.5 if pd else 0.2))
        pn1 = float(np.clip(rng.normal(14, 6), 1, 50))
        stagec = int(max(20, rng.normal(160, 40)))
        confidence = float(np.clip(rng.normal(0.82, 0.05), 0.5, 0.99))
        x = {"age": age, "sex": sex, "bmi": bmi, "pd": pd, "ahi": ahi, "rbd": rbd,
             "pn1": pn1, "stagec": stagec, "confidence_pct": 100 * confidence}
        kappa = COVARIATE_TRUTH["intercept"] + sum(COVARIATE_TRUTH[k] * x[k] for k in COVARIATE_TRUTH
                                                    if k != "intercept")
        kappa += offsets[cohort] + rng.normal(0.0, noise_sd)
        rows.append({"record": f"r{i:04d}", "cohort": f"c{cohort}", "age": age, "sex": "M" if sex else "F",
                     "bmi": bmi, "pd": pd, "ahi": ahi, "rbd": rbd, "pn1": pn1, "stagec": stagec,
                     "confidence": confidence, "kappa": float(kappa)})
    return rows


COVARIATE_TRUTH = {
    "intercept": -0.35,
    "age": -0.002,
    "sex": 0.0,
    "bmi": 0.0,
    "pd": -0.03,
    "ahi": -0.001,
    "rbd": 0.0,
    "pn1": -0.004,
    "stagec": -0.0004,
    "confidence_pct": 0.012,
}
