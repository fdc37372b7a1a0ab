import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import edf_bytes, random_edf
from hypnokit.errors import ParseError, RangeError
from hypnokit.psg_io import (
    Channel,
    ChannelRole,
    Hypnogram,
    Recording,
    Stage,
    classify_channel,
    load_record,
    read_arousals,
    read_edf,
    read_hypnogram,
    save_record,
    write_arousals,
    write_edf,
    write_hypnogram,
)

VOLTS = {"uV": 1e-6, "mV": 1e-3, "V": 1.0, "degC": 1.0}


def _one_signal(data, spr, n_records, pmin=-100, pmax=100, dmin=-2048, dmax=2047, dim="uV"):
    return edf_bytes([{"label": "EEG C3", "dim": dim, "pmin": pmin, "pmax": pmax, "dmin": dmin,
                       "dmax": dmax, "spr": spr, "data": data}], n_records)


def test_header_arithmetic(tmp_path):
    p = tmp_path / "a.edf"
    p.write_bytes(_one_signal(np.zeros(512, int), 256, 2))
    rec = read_edf(p)
    (ch,) = rec.channels
    assert ch.samples.size == 512
    assert ch.sample_rate == 256
    assert rec.duration_sec == 2.0


def test_digital_endpoints_decode_exactly(tmp_path):
    p = tmp_path / "a.edf"
    p.write_bytes(_one_signal(np.array([-2048, 2047, 0, 0]), 4, 1))
    s = read_edf(p).channels[0].samples
    assert s[0] == -100e-6
    assert s[1] == 100e-6


def test_decoding_matches_affine_oracle(tmp_path):
    rng = np.random.default_rng(3)
    for k in range(20):
        raw, sigs = random_edf(rng)
        p = tmp_path / f"r{k}.edf"
        p.write_bytes(raw)
        rec = read_edf(p)
        for ch, s in zip(rec.channels, sigs):
            d = np.asarray(s["data"], float)
            expect = (s["pmin"] + (d - s["dmin"]) * (s["pmax"] - s["pmin"]) / (s["dmax"] - s["dmin"]))
            expect = expect * VOLTS[s["dim"]]
            np.testing.assert_allclose(ch.samples, expect, rtol=1e-12, atol=1e-15 * abs(s["pmax"]))
            assert ch.sample_rate == s["spr"]


def test_read_write_is_byte_identical(tmp_path):
    rng = np.random.default_rng(11)
    for k in range(25):
        raw, _ = random_edf(rng)
        p, q = tmp_path / f"in{k}.edf", tmp_path / f"out{k}.edf"
        p.write_bytes(raw)
        write_edf(read_edf(p), q)
        assert q.read_bytes() == raw


def test_zero_width_physical_range(tmp_path):
    p = tmp_path / "z.edf"
    p.write_bytes(_one_signal(np.zeros(4, int), 4, 1, pmin=5, pmax=5))
    with pytest.raises(ParseError) as exc:
        read_edf(p)
    assert exc.value.offset is not None


def test_truncated_records_name_the_record(tmp_path):
    raw = _one_signal(np.zeros(12, int), 4, 3)
    p = tmp_path / "t.edf"
    p.write_bytes(raw[:-3])
    with pytest.raises(ParseError) as exc:
        read_edf(p)
    assert exc.value.record == 2


def test_malformed_header_reports_offset(tmp_path):
    raw = bytearray(_one_signal(np.zeros(4, int), 4, 1))
    raw[236:244] = b"abc     "  # record count field
    p = tmp_path / "m.edf"
    p.write_bytes(bytes(raw))
    with pytest.raises(ParseError) as exc:
        read_edf(p)
    assert exc.value.offset == 236


def test_write_rejects_out_of_range_samples(tmp_path):
    ch = Channel("EEG", ChannelRole.EEG, 4.0, np.array([0.0, 0.0, 2e-4, 0.0]), (-1e-4, 1e-4))
    with pytest.raises(RangeError) as exc:
        write_edf(Recording("r", (ch,)), tmp_path / "x.edf")
    assert "EEG" in str(exc.value) and "2" in str(exc.value)


def test_write_requires_a_signal(tmp_path):
    with pytest.raises(ParseError):
        write_edf(Recording("r", ()), tmp_path / "x.edf")


def test_physical_max_round_trip(tmp_path):
    ch = Channel("EEG", ChannelRole.EEG, 2.0, np.array([1e-4, -1e-4]), (-1e-4, 1e-4))
    p = tmp_path / "x.edf"
    write_edf(Recording("r", (ch,)), p)
    back = read_edf(p).channels[0]
    assert back.samples[0] == 1e-4
    assert back.samples[1] == -1e-4


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-32768, 32767), min_size=1, max_size=4), st.integers(1, 3), st.integers(1, 4))
def test_recording_round_trip_property(tmp_path_factory, codes, n_records, ns):
    spr = len(codes)
    chans = []
    for i in range(ns):
        d = np.resize(np.asarray(codes) + 0, n_records * spr)
        frac = (d + 32768) / 65535
        x = -1e-3 * (1 - frac) + 1e-3 * frac
        chans.append(Channel(f"EEG {i}", ChannelRole.EEG, float(spr), x, (-1e-3, 1e-3), unit="V"))
    rec = Recording("r", tuple(chans))
    p = tmp_path_factory.mktemp("rt") / "r.edf"
    write_edf(rec, p)
    back = read_edf(p)
    assert back == rec


def test_hypnogram_rk_collapse(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("epoch_index,stage_code\n" + "".join(
        f"{i},{c}\n" for i, c in enumerate(["W", "S1", "S2", "S3", "S4", "REM", "MT", "??"])))
    h = read_hypnogram(p)
    assert list(h.stages) == [0, 1, 2, 3, 3, 4, 5, 5]


def test_hypnogram_gap_is_unknown(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("# comment\n" + "".join(f"{i},N2\n" for i in range(10) if i != 5))
    h = read_hypnogram(p)
    assert len(h) == 10 and h.stages[5] == Stage.UNKNOWN


@pytest.mark.parametrize("body", ["0,W\n0,N1\n", "0,W\n-1,N1\n"])
def test_hypnogram_index_errors(tmp_path, body):
    p = tmp_path / "h.csv"
    p.write_text(body)
    with pytest.raises(ParseError):
        read_hypnogram(p)


def test_hypnogram_write_read(tmp_path):
    h = Hypnogram(np.array([0, 1, 2, 3, 4, 5, 2]))
    p = tmp_path / "h.csv"
    write_hypnogram(h, p)
    assert read_hypnogram(p) == h


def test_arousals(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("")
    assert read_arousals(p) == []
    p.write_text("start_sec,duration_sec\n10,5\n3,2\n4,10\n")
    assert read_arousals(p) == [(3.0, 2.0), (4.0, 10.0), (10.0, 5.0)]
    p.write_text("-1,5\n")
    with pytest.raises(ParseError):
        read_arousals(p)
    p.write_text("1,-5\n")
    with pytest.raises(ParseError):
        read_arousals(p)
    write_arousals([(0.5, 1.25)], p)
    assert read_arousals(p) == [(0.5, 1.25)]


@pytest.mark.parametrize("label,role", [
    ("EEG Fpz-Cz", ChannelRole.EEG), ("C3-M2", ChannelRole.EEG), ("E1-M2", ChannelRole.EOG),
    ("loc", ChannelRole.EOG), ("EMG Chin", ChannelRole.EMG), ("ECG II", ChannelRole.OTHER),
])
def test_channel_roles(label, role):
    assert classify_channel(label) is role


def test_custom_role_table():
    table = ((ChannelRole.EOG, "^HEOG"), (ChannelRole.EEG, "."))
    assert classify_channel("heog", table) is ChannelRole.EOG
    assert classify_channel("anything", table) is ChannelRole.EEG


def test_record_side_cars(tmp_path):
    x = np.linspace(-1e-4, 1e-4, 120)
    ch = Channel("EEG C3", ChannelRole.EEG, 1.0, x, (-1e-4, 1e-4), unit="V")
    rec = Recording("night", (ch,), hypnogram=Hypnogram(np.array([0, 2, 4, 5])),
                    arousals=((3.0, 1.0),))
    save_record(rec, tmp_path / "night.edf")
    back = load_record(tmp_path / "night.edf")
    assert back.hypnogram == rec.hypnogram
    assert back.arousals == rec.arousals
    np.testing.assert_allclose(back.channels[0].samples, x, atol=2e-4 / 65535)


def test_recording_invariants():
    ch = Channel("EEG", ChannelRole.EEG, 1.0, np.zeros(60))
    with pytest.raises(ValueError):
        Recording("r", (ch,), lights_off_sec=10, lights_on_sec=5)
    with pytest.raises(ValueError):
        Recording("r", (ch,), hypnogram=Hypnogram(np.zeros(4)))
    short = Channel("EOG", ChannelRole.EOG, 1.0, np.zeros(30))
    with pytest.raises(ValueError):
        Recording("r", (ch, short))
