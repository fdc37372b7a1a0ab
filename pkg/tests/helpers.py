"""Shared builders for the test-suite (independent of the library code)."""

import numpy as np


def field(text, width):
    raw = str(text).encode("latin-1")
    assert len(raw) <= width, (text, width)
    return raw.ljust(width, b" ")


def edf_bytes(signals, n_records, record_duration="1", reserved=""):
    """Hand-assembled 16-bit EDF file.

    ``signals`` is a list of dicts with keys label, dim, pmin, pmax, dmin, dmax,
    spr and data (int array of length n_records * spr).
    """
    ns = len(signals)
    out = bytearray()
    out += field("0", 8) + field("X X X X", 80) + field("Startdate X X X test", 80)
    out += field("01.01.00", 8) + field("00.00.00", 8) + field(256 + 256 * ns, 8)
    out += field(reserved, 44) + field(n_records, 8) + field(record_duration, 8) + field(ns, 4)
    for key, width in (("label", 16), ("transducer", 80), ("dim", 8), ("pmin", 8), ("pmax", 8),
                       ("dmin", 8), ("dmax", 8), ("prefilter", 80), ("spr", 8), ("reserved", 32)):
        for s in signals:
            out += field(s.get(key, ""), width)
    blocks = [np.asarray(s["data"], dtype="<i2").reshape(n_records, int(s["spr"])) for s in signals]
    if ns:
        out += np.concatenate(blocks, axis=1).astype("<i2").tobytes()
    return bytes(out)


LABELS = ["EEG C3-M2", "EEG C4-M1", "EOG E1-M2", "EOG E2-M2", "EMG Chin", "ECG", "Fpz-Cz", "ROC"]


def random_edf(rng):
    """A random file inside the supported subset plus its decoded expectation."""
    ns = int(rng.integers(1, 6))
    n_records = int(rng.integers(1, 6))
    signals = []
    for i in range(ns):
        dmin = int(rng.integers(-32768, 0))
        dmax = int(rng.integers(dmin + 1, 32768))
        pmin = int(rng.integers(-5000, 0))
        pmax = int(rng.integers(1, 5000))
        spr = int(rng.choice([1, 8, 100, 128, 256]))
        signals.append({
            "label": LABELS[int(rng.integers(len(LABELS)))] if i else "EEG Fpz-Cz",
            "dim": str(rng.choice(["uV", "mV", "V", "degC"])),
            "pmin": pmin, "pmax": pmax, "dmin": dmin, "dmax": dmax, "spr": spr,
            "transducer": "AgAgCl electrode" if rng.random() < 0.5 else "",
            "prefilter": "HP:0.1Hz" if rng.random() < 0.5 else "",
            "data": rng.integers(dmin, dmax + 1, size=n_records * spr),
        })
    return edf_bytes(signals, n_records), signals


def random_stages(rng, n, p_unknown=0.0):
    s = rng.integers(0, 5, size=n)
    if p_unknown:
        s[rng.random(n) < p_unknown] = 5
    return s.astype(np.int8)


def quality_record(rid, n_epochs, n_sleep, n_unknown=0, flat_sec=0, flat_roles=("EEG", "EOG"),
                   epoch_len=30.0, seed=0):
    """Recording at 1 Hz with a chosen stage mix and a leading flat stretch.

    Sleep epochs come first, then Unknown, then wake; ``flat_sec`` seconds at
    the start of each channel in ``flat_roles`` are exactly zero.
    """
    from hypnokit.psg_io import Channel, ChannelRole, Hypnogram, Recording

    rng = np.random.default_rng(seed)
    stages = np.zeros(n_epochs, dtype=np.int8)
    stages[:n_sleep] = 2
    stages[n_sleep:n_sleep + n_unknown] = 5
    n = int(n_epochs * epoch_len)
    chans = []
    for label, role in (("EEG C3-M2", "EEG"), ("EOG E1-M2", "EOG")):
        x = 2e-5 * rng.standard_normal(n)
        if role in flat_roles:
            x[:flat_sec] = 0.0
        chans.append(Channel(label, ChannelRole[role], 1.0, x))
    return Recording(rid, tuple(chans), hypnogram=Hypnogram(stages, epoch_len))


# (record, expected reasons); boundaries sit just either side of each rule
def truth_table():
    return [
        (quality_record("sleep_2.99h", 400, 299, epoch_len=36.0), {"ShortSleep"}),
        (quality_record("sleep_3.01h", 400, 301, epoch_len=36.0), set()),
        (quality_record("unknown_19.9", 1000, 700, n_unknown=199), set()),
        (quality_record("unknown_20.1", 1000, 700, n_unknown=201), {"TooUnscored"}),
        (quality_record("flat_9.9", 1000, 700, flat_sec=2970), set()),
        (quality_record("flat_10.1", 1000, 700, flat_sec=3030), {"AllChannelFlatline"}),
        (quality_record("clean", 1000, 900), set()),
        (quality_record("eeg_only_flat", 1000, 700, flat_sec=5000, flat_roles=("EEG",)), set()),
        (quality_record("short_and_unscored", 1000, 300, n_unknown=300), {"ShortSleep", "TooUnscored"}),
    ]
