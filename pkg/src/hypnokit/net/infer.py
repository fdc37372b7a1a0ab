"""Whole-night inference: channel-pair summation and ensemble voting."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..confidence import Hypnodensity
from ..errors import UsageError
from ..psg_io import ChannelRole, Recording
from .model import USleep, forward


def channel_pairs(recording: Recording) -> list[tuple[int, int]]:
    """EEG x EOG index pairs in a canonical order (by label, then index).

    The order depends only on the channel set, not on how channels are
    listed, so the floating-point summation is reproducible.
    """
    eeg = recording.channels_with_role(ChannelRole.EEG)
    eog = recording.channels_with_role(ChannelRole.EOG)
    if not eeg or not eog:
        raise UsageError(f"recording {recording.id!r} needs at least one EEG and one EOG channel")

    def key(i):
        c = recording.channels[i]
        # duplicate labels fall back to comparing leading samples
        return (c.label, c.samples.size, c.samples[:64].tobytes())
    eeg.sort(key=key)
    eog.sort(key=key)
    return [(e, o) for e in eeg for o in eog]


def pair_signal(recording: Recording, pair: tuple[int, int], dtype=np.float32) -> np.ndarray:
    e, o = pair
    return np.stack([recording.channels[e].samples, recording.channels[o].samples]).astype(dtype)


def summed_probs(model: USleep, recording: Recording, max_pairs: int | None = None) -> np.ndarray:
    """Sum of epoch probabilities ``(E, S)`` over channel pairs, in float64."""
    pairs = channel_pairs(recording)
    if max_pairs is not None:
        pairs = pairs[:max_pairs]
    total = None
    for pair in pairs:
        _, probs = forward(model, pair_signal(recording, pair, model.dtype))
        total = probs.astype(np.float64) if total is None else total + probs
    return total


def _normalise(p: np.ndarray) -> np.ndarray:
    return p / p.sum(axis=1, keepdims=True)


def combine_votes(member_probs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Majority vote over member argmaxes.

    Ties go to the tied stage with the highest mean probability, then to the
    lowest stage index. Returns ``(stages, mean_probs)``.
    """
    normed = [_normalise(p) for p in member_probs]
    mean = np.mean(normed, axis=0)
    votes = np.zeros_like(mean, dtype=np.int64)
    rows = np.arange(mean.shape[0])
    for p in normed:
        votes[rows, p.argmax(axis=1)] += 1
    top = votes.max(axis=1, keepdims=True)
    # among the most-voted stages pick the highest mean probability;
    # argmax breaks any remaining tie towards the lowest index
    contender = np.where(votes == top, mean, -np.inf)
    return contender.argmax(axis=1).astype(np.int8), mean


def infer_record(
    model_or_ensemble: USleep | Sequence[USleep],
    recording: Recording,
    max_pairs: int | None = None,
) -> Hypnodensity:
    """Hypnodensity of a preprocessed recording.

    Single models report their normalised pair-summed probabilities; an
    ensemble reports the member mean and carries the majority-vote staging.
    """
    members = [model_or_ensemble] if isinstance(model_or_ensemble, USleep) else list(model_or_ensemble)
    if not members:
        raise UsageError("empty ensemble")
    ep = recording.hypnogram.epoch_len_sec if recording.hypnogram is not None else 30.0
    probs = [summed_probs(m, recording, max_pairs) for m in members]
    if len(members) == 1:
        return Hypnodensity(_normalise(probs[0]), epoch_len_sec=ep)
    stages, mean = combine_votes(probs)
    return Hypnodensity(_normalise(mean), stages=stages, epoch_len_sec=ep)
