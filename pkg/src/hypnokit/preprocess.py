"""Signal conditioning, flatline detection and record rejection.

Pipeline order is fixed: resample to 128 Hz, clip and robust-scale, then a
zero-phase 0.1 Hz high-pass. Flatline checks run on the resampled signal in
volts, before scaling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

from .errors import UsageError
from .psg_io import SLEEP_STAGES, Channel, ChannelRole, Hypnogram, Recording, Stage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate_hz: float = 128.0
    highpass_cutoff_hz: float = 0.1
    clip_quantile: float = 0.005
    flatline_p2p_volts: float = 1e-8
    flatline_window_sec: float = 30.0
    epoch_flatline_frac: float = 0.5
    allchan_flatline_frac: float = 0.10
    min_sleep_hours: float = 3.0
    max_unscored_frac: float = 0.20

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not value > 0:
                raise UsageError(f"PreprocessConfig.{f.name} must be strictly positive, got {value!r}")
        for name in ("clip_quantile", "epoch_flatline_frac", "allchan_flatline_frac", "max_unscored_frac"):
            if not 0 < getattr(self, name) < 1:
                raise UsageError(f"PreprocessConfig.{name} must lie in (0, 1)")
        if self.clip_quantile >= 0.5:
            raise UsageError("clip_quantile must be below 0.5")


REJECT_SHORT_SLEEP = "ShortSleep"
REJECT_UNSCORED = "TooUnscored"
REJECT_FLATLINE = "AllChannelFlatline"


@dataclass
class RejectionReport:
    record_id: str
    reasons: list[str] = field(default_factory=list)
    measured: dict = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return not self.reasons

    @property
    def decision(self) -> str:
        return "accepted" if self.accepted else "rejected"

    def to_json(self) -> str:
        payload = {"record_id": self.record_id, "decision": self.decision}
        payload.update(asdict(self))
        return json.dumps(payload, sort_keys=True)


# --------------------------------------------------------------------------
# per-channel operations


def resample(channel: Channel, target_rate_hz: float) -> Channel:
    """Polyphase windowed-sinc resampling (Kaiser, beta 8).

    Output length is ``round(n * target / source)``.
    """
    source = channel.sample_rate
    if not source > 0 or not target_rate_hz > 0:
        raise UsageError("sample rates must be positive")
    if source == target_rate_hz:
        return channel
    x = channel.samples
    n_out = int(round(x.size * target_rate_hz / source))
    if x.size == 0:
        y = np.zeros(0)
    else:
        ratio = Fraction(target_rate_hz).limit_denominator(1_000_000) / Fraction(source).limit_denominator(1_000_000)
        y = sps.resample_poly(x, ratio.numerator, ratio.denominator, window=("kaiser", 8.0))
        if y.size >= n_out:
            y = y[:n_out]
        else:
            y = np.concatenate([y, np.zeros(n_out - y.size)])
    return Channel(
        label=channel.label,
        role=channel.role,
        sample_rate=float(target_rate_hz),
        samples=y,
        physical_range=channel.physical_range,
        unit=channel.unit,
        digital_range=channel.digital_range,
    )


def clip_and_scale(channel: Channel, clip_quantile: float = 0.005) -> Channel:
    """Clip to the ``[q, 1-q]`` empirical quantiles, then median/IQR scaling."""
    x = channel.samples
    if x.size == 0:
        raise UsageError(f"channel {channel.label!r} is empty")
    lo, hi = np.quantile(x, [clip_quantile, 1.0 - clip_quantile])
    clipped = np.clip(x, lo, hi)
    q1, med, q3 = np.quantile(clipped, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    if not iqr > 0:
        scaled = np.zeros_like(clipped)
    else:
        scaled = (clipped - med) / iqr
    return Channel(channel.label, channel.role, channel.sample_rate, scaled, unit="")


def highpass(channel: Channel, cutoff_hz: float = 0.1) -> Channel:
    """Zero-phase (forward-backward) second-order Butterworth high-pass."""
    fs = channel.sample_rate
    if not fs > 2 * cutoff_hz:
        raise UsageError(f"sample rate {fs} Hz too low for a {cutoff_hz} Hz cutoff")
    x = channel.samples
    if x.size == 0:
        return channel
    sos = sps.butter(2, cutoff_hz, btype="highpass", fs=fs, output="sos")
    padlen = min(x.size - 1, int(round(3 * fs / cutoff_hz)))
    y = sps.sosfiltfilt(sos, x, padlen=max(padlen, 0)) if x.size > 1 else np.zeros_like(x)
    return Channel(channel.label, channel.role, fs, y, unit=channel.unit)


# --------------------------------------------------------------------------
# flatline detection


def _window_samples(rate: float, window_sec: float) -> int:
    n = rate * window_sec
    if abs(n - round(n)) > 1e-9:
        raise UsageError(f"{window_sec} s is not a whole number of samples at {rate} Hz")
    return int(round(n))


def flatline_mask(recording: Recording, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Non-overlapping window flags, shape ``(n_windows, n_channels)``.

    Window ``w`` of channel ``c`` is flagged when its peak-to-peak amplitude
    is below ``config.flatline_p2p_volts``. Trailing partial windows are not
    evaluated.
    """
    rates = {c.sample_rate for c in recording.channels}
    if len(rates) != 1:
        raise UsageError("flatline_mask requires channels resampled to a common rate")
    win = _window_samples(rates.pop(), config.flatline_window_sec)
    n_win = recording.channels[0].samples.size // win
    mask = np.zeros((n_win, len(recording.channels)), dtype=bool)
    for j, ch in enumerate(recording.channels):
        blocks = ch.samples[: n_win * win].reshape(n_win, win)
        mask[:, j] = np.ptp(blocks, axis=1) < config.flatline_p2p_volts
    return mask


def flat_seconds(channel: Channel, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Per-second flatline indicator from 30 s windows sliding in 1 s hops.

    A second is flat when it lies inside at least one window whose
    peak-to-peak amplitude is below threshold.
    """
    per_sec = _window_samples(channel.sample_rate, 1.0)
    n_sec = channel.samples.size // per_sec
    win = int(round(config.flatline_window_sec))
    out = np.zeros(n_sec, dtype=bool)
    if n_sec < win:
        return out
    blocks = channel.samples[: n_sec * per_sec].reshape(n_sec, per_sec)
    hi, lo = blocks.max(axis=1), blocks.min(axis=1)
    # window starting at second s covers seconds [s, s + win)
    win_hi = sliding_window_view(hi, win).max(axis=1)
    win_lo = sliding_window_view(lo, win).min(axis=1)
    flat_start = (win_hi - win_lo) < config.flatline_p2p_volts
    cover = np.convolve(flat_start.astype(np.int32), np.ones(win, dtype=np.int32))[:n_sec]
    out[:] = cover > 0
    return out


def epoch_flat_fraction(flat: np.ndarray, epoch_len_sec: float, n_epochs: int) -> np.ndarray:
    per = int(round(epoch_len_sec))
    frac = np.zeros(n_epochs)
    usable = min(n_epochs, flat.size // per)
    if usable:
        frac[:usable] = flat[: usable * per].reshape(usable, per).mean(axis=1)
    return frac


# --------------------------------------------------------------------------
# record rules


def analysis_epochs(recording: Recording, n_epochs: int, epoch_len_sec: float) -> slice:
    """Epoch range covered by the lights-off window (whole record if absent)."""
    first = 0
    stop = n_epochs
    if recording.lights_off_sec is not None:
        first = min(n_epochs, int(np.floor(recording.lights_off_sec / epoch_len_sec + 1e-9)))
    if recording.lights_on_sec is not None:
        stop = min(n_epochs, int(np.ceil(recording.lights_on_sec / epoch_len_sec - 1e-9)))
    return slice(first, max(first, stop))


def apply_quality_rules(
    recording: Recording,
    config: PreprocessConfig = PreprocessConfig(),
    pair: tuple[int, int] | None = None,
) -> tuple[Hypnogram, RejectionReport]:
    """Mask flat epochs and decide whether the record is usable.

    ``recording`` must hold signals in volts (flatline thresholds are
    absolute). ``pair`` selects the (EEG, EOG) channel indices whose
    flatline share decides epoch masking; by default an epoch is masked
    only if every EEG/EOG pair exceeds the limit.

    Returns the masked hypnogram trimmed to the lights-off window and the
    rejection report.
    """
    hyp = recording.hypnogram
    if hyp is None:
        raise UsageError(f"recording {recording.id!r} has no hypnogram")
    ep = hyp.epoch_len_sec
    window = analysis_epochs(recording, len(hyp), ep)
    stages = hyp.stages[window].copy()
    report = RejectionReport(recording.id)

    n = stages.size
    sleep_epochs = int(np.isin(stages, [int(s) for s in SLEEP_STAGES]).sum())
    sleep_hours = sleep_epochs * ep / 3600.0
    unknown_frac = float((stages == int(Stage.UNKNOWN)).mean()) if n else 1.0

    eeg = recording.channels_with_role(ChannelRole.EEG)
    eog = recording.channels_with_role(ChannelRole.EOG)
    flat = {i: flat_seconds(recording.channels[i], config) for i in eeg + eog}
    allchan_frac = 0.0
    if flat:
        total_sec = recording.duration_sec
        all_flat = np.logical_and.reduce([flat[i] for i in eeg + eog])
        allchan_frac = float(all_flat.sum() / total_sec) if total_sec > 0 else 0.0

    report.measured = {
        "sleep_hours": sleep_hours,
        "unknown_frac": unknown_frac,
        "allchan_flat_frac": allchan_frac,
        "epochs": int(n),
        "first_epoch": int(window.start),
    }
    if sleep_hours < config.min_sleep_hours:
        report.reasons.append(REJECT_SHORT_SLEEP)
    if unknown_frac > config.max_unscored_frac:
        report.reasons.append(REJECT_UNSCORED)
    if allchan_frac > config.allchan_flatline_frac:
        report.reasons.append(REJECT_FLATLINE)

    # epoch masking, evaluated after the Unknown fraction above
    if flat:
        pairs = [pair] if pair is not None else [(e, o) for e in eeg for o in eog]
        masked = np.ones(len(hyp), dtype=bool) if pairs else np.zeros(len(hyp), dtype=bool)
        for e, o in pairs:
            pair_flat = flat[e] | flat[o]
            masked &= epoch_flat_fraction(pair_flat, ep, len(hyp)) > config.epoch_flatline_frac
        stages[masked[window]] = int(Stage.UNKNOWN)
        report.measured["masked_epochs"] = int(masked[window].sum())
    return Hypnogram(stages, ep) if stages.size else Hypnogram([int(Stage.UNKNOWN)], ep), report


def trim_to_window(recording: Recording, window: slice, epoch_len_sec: float) -> Recording:
    """Cut signals to an epoch range; lights times are dropped afterwards."""
    chans = []
    for c in recording.channels:
        start = int(round(window.start * epoch_len_sec * c.sample_rate))
        stop = int(round(window.stop * epoch_len_sec * c.sample_rate))
        stop = min(stop, c.samples.size)
        chans.append(Channel(c.label, c.role, c.sample_rate, c.samples[start:stop],
                             physical_range=c.physical_range, unit=c.unit, digital_range=c.digital_range))
    arousals = None
    if recording.arousals is not None:
        t0 = window.start * epoch_len_sec
        t1 = window.stop * epoch_len_sec
        arousals = [(max(s, t0) - t0, min(s + d, t1) - max(s, t0)) for s, d in recording.arousals
                    if s + d > t0 and s < t1]
    return recording.replace(channels=tuple(chans), arousals=arousals, lights_off_sec=None,
                             lights_on_sec=None, hypnogram=None)


def condition_channel(channel: Channel, config: PreprocessConfig = PreprocessConfig()) -> Channel:
    """clip/scale then high-pass (input already at the target rate)."""
    return highpass(clip_and_scale(channel, config.clip_quantile), config.highpass_cutoff_hz)


def preprocess_recording(
    recording: Recording, config: PreprocessConfig = PreprocessConfig(), with_rules: bool = True
) -> tuple[Recording, RejectionReport | None]:
    """Full per-record pipeline.

    Returns the conditioned recording (trimmed to the lights window, with
    the masked hypnogram attached) and the rejection report. Records
    without a hypnogram are conditioned but not judged.
    """
    resampled = recording.replace(
        channels=tuple(resample(c, config.target_rate_hz) for c in recording.channels)
    )
    report = None
    ep = recording.hypnogram.epoch_len_sec if recording.hypnogram is not None else 30.0
    n_epochs = int(resampled.duration_sec // ep) if recording.hypnogram is None else len(recording.hypnogram)
    window = analysis_epochs(resampled, n_epochs, ep)
    masked = None
    if with_rules and recording.hypnogram is not None:
        masked, report = apply_quality_rules(resampled, config)
    conditioned = resampled.replace(
        channels=tuple(
            condition_channel(c, config) if c.role in (ChannelRole.EEG, ChannelRole.EOG) else c
            for c in resampled.channels
        )
    )
    out = trim_to_window(conditioned, window, ep)
    if masked is None and recording.hypnogram is not None:
        masked = Hypnogram(recording.hypnogram.stages[window], ep)
    if masked is not None:
        n_sig_epochs = int(np.ceil(out.duration_sec / ep - 1e-9))
        stages = masked.stages[: max(n_sig_epochs, 1)]
        out = out.replace(hypnogram=Hypnogram(stages, ep))
    return out, report


# --------------------------------------------------------------------------
# preprocessed-record storage (NPZ: one float32 array per channel + JSON meta)


def save_preprocessed(recording: Recording, path) -> None:
    meta = {
        "id": recording.id,
        "channels": [{"label": c.label, "role": c.role.value, "sample_rate": c.sample_rate}
                     for c in recording.channels],
        "epoch_len_sec": recording.hypnogram.epoch_len_sec if recording.hypnogram is not None else None,
        "arousals": [list(a) for a in recording.arousals] if recording.arousals is not None else None,
        "meta": recording.meta,
    }
    arrays = {f"ch{i}": c.samples.astype(np.float32) for i, c in enumerate(recording.channels)}
    if recording.hypnogram is not None:
        arrays["hypnogram"] = recording.hypnogram.stages
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_preprocessed(path) -> Recording:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        chans = tuple(
            Channel(c["label"], ChannelRole(c["role"]), c["sample_rate"], z[f"ch{i}"].astype(np.float64), unit="")
            for i, c in enumerate(meta["channels"])
        )
        hyp = Hypnogram(z["hypnogram"], meta["epoch_len_sec"]) if "hypnogram" in z.files else None
    return Recording(meta["id"], chans, hypnogram=hyp, arousals=meta["arousals"], meta=meta.get("meta") or {})
