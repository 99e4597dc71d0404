"""Recording container: byte-level format oracle, validation, synthesis."""

from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from eegmatch.errors import FormatError, ValidationError
from eegmatch.recordings import (BAND_EDGES_HZ, MAGIC, SCHEMA_VERSION,
                                 RecordingSet, SynthConfig, Trial,
                                 generate_synthetic, load_recording,
                                 save_recording, trial_from_csv)


def _one_trial(label="neutral", fs=200.0, n_channels=4, n_samples=800,
               subject=1, session=1, trial=1, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return Trial(subject_id=subject, session_id=session, trial_id=trial,
                 label=label, fs=fs,
                 data=rng.standard_normal((n_channels, n_samples)))


def test_roundtrip_bit_exact(tmp_path, tiny_rec):
    path = tmp_path / "rec.eegc"
    save_recording(tiny_rec, path)
    loaded = load_recording(path)
    assert loaded == tiny_rec
    for a, b in zip(loaded.trials, tiny_rec.trials):
        assert a.data.tobytes() == b.data.tobytes()


def test_container_layout_byte_oracle(tmp_path):
    """Parse the container by hand and check every section against the spec:
    magic, u32 version, u64 header length, JSON header, f32 payloads."""
    rec = RecordingSet(trials=[_one_trial()], label_set=("neutral",), meta="m")
    path = tmp_path / "rec.eegc"
    save_recording(rec, path)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC == b"EEGC"
    (version,) = struct.unpack("<I", raw[4:8])
    assert version == SCHEMA_VERSION
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header["label_set"] == ["neutral"]
    assert header["meta"] == "m"
    (entry,) = header["trials"]
    assert entry["subject_id"] == 1 and entry["label"] == "neutral"
    assert entry["channels"] == 4 and entry["samples"] == 800
    assert entry["fs"] == 200.0
    payload = raw[16 + hlen:]
    assert len(payload) == 4 * 800 * 4  # channels x samples x sizeof(f32)
    mat = np.frombuffer(payload, dtype="<f4").reshape(4, 800)
    np.testing.assert_array_equal(mat, rec.trials[0].data)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.eegc"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        load_recording(path)


def test_unsupported_version_rejected(tmp_path):
    rec = RecordingSet(trials=[_one_trial()], label_set=("neutral",))
    path = tmp_path / "rec.eegc"
    save_recording(rec, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="schema|version"):
        load_recording(path)


def test_truncated_payload_rejected(tmp_path):
    rec = RecordingSet(trials=[_one_trial()], label_set=("neutral",))
    path = tmp_path / "rec.eegc"
    save_recording(rec, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(FormatError, match="truncat"):
        load_recording(path)


def test_duplicate_trial_key_rejected():
    rec = RecordingSet(trials=[_one_trial(), _one_trial()],
                       label_set=("neutral",))
    with pytest.raises(ValidationError, match="duplicate"):
        rec.validate()


def test_unknown_label_rejected():
    rec = RecordingSet(trials=[_one_trial(label="bliss")],
                       label_set=("neutral",))
    with pytest.raises(ValidationError, match="unknown label"):
        rec.validate()


def test_nyquist_guard():
    """fs must be at least twice the configured band ceiling."""
    trial = _one_trial(fs=100.0)  # Nyquist 50 Hz < 75 Hz gamma2 ceiling
    rec = RecordingSet(trials=[trial], label_set=("neutral",))
    with pytest.raises(ValidationError, match="Nyquist"):
        rec.validate(band_ceiling_hz=BAND_EDGES_HZ[-1][2])
    rec.validate(band_ceiling_hz=45.0)  # same data is fine for lower bands


def test_nonfinite_samples_rejected():
    data = np.zeros((2, 100), dtype=np.float32)
    data[1, 50] = np.nan
    trial = Trial(subject_id=1, session_id=1, trial_id=1, label="neutral",
                  data=data, fs=200.0)
    rec = RecordingSet(trials=[trial], label_set=("neutral",))
    with pytest.raises(ValidationError, match="non-finite"):
        rec.validate()


def test_synthetic_determinism(tiny_synth_cfg, tmp_path):
    a = generate_synthetic(tiny_synth_cfg)
    b = generate_synthetic(tiny_synth_cfg)
    assert a == b
    pa, pb = tmp_path / "a.eegc", tmp_path / "b.eegc"
    save_recording(a, pa)
    save_recording(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_synthetic_band_separability(tiny_rec, tiny_synth_cfg):
    """FFT oracle: each label's mean power concentrates in its signature band
    relative to the other labels' power in that band (boost factor 4)."""
    fs = tiny_synth_cfg.fs
    by_label = {}
    for t in tiny_rec.trials:
        spec = np.abs(np.fft.rfft(t.data, axis=1)) ** 2
        by_label.setdefault(t.label, []).append(spec.mean(axis=0))
    freqs = np.fft.rfftfreq(tiny_rec.trials[0].n_samples, d=1.0 / fs)
    for label, (band_idx, _) in tiny_synth_cfg.band_signature.items():
        _, lo, hi = BAND_EDGES_HZ[band_idx]
        mask = (freqs >= lo) & (freqs < hi)
        own = np.mean([s[mask].sum() for s in by_label[label]])
        others = np.mean([s[mask].sum()
                          for other, specs in by_label.items() if other != label
                          for s in specs])
        assert own > 2.0 * others, (
            f"label {label}: in-band power {own:.1f} not separated from {others:.1f}")


def test_csv_trial_import(tmp_path):
    rows = ["c1,c2,c3"]
    rng = np.random.Generator(np.random.PCG64(7))
    mat = rng.standard_normal((5, 3)).astype(np.float32)
    rows += [",".join(repr(float(v)) for v in row) for row in mat]
    path = tmp_path / "trial.csv"
    path.write_text("\n".join(rows) + "\n")
    trial, names = trial_from_csv(path, subject_id=1, session_id=1, trial_id=2,
                                  label="neutral", fs=200.0)
    assert names == ["c1", "c2", "c3"]
    assert trial.data.shape == (3, 5)  # channels x samples
    np.testing.assert_allclose(trial.data, mat.T, rtol=0, atol=0)


def test_synth_config_validation():
    with pytest.raises(ValidationError, match="band_signature"):
        SynthConfig(band_signature={"neutral": (1, 4.0)}).validate()
    with pytest.raises(ValidationError, match="boost"):
        SynthConfig(band_signature={"negative": (1, 0.5), "neutral": (2, 4.0),
                                    "positive": (3, 4.0)}).validate()
    with pytest.raises(ValidationError, match="integer sample count"):
        SynthConfig(trial_seconds=1.0015).validate()


def test_synth_config_dict_roundtrip(tiny_synth_cfg):
    again = SynthConfig.from_dict(tiny_synth_cfg.to_dict())
    assert again == tiny_synth_cfg
    with pytest.raises(ValidationError, match="unknown fields"):
        SynthConfig.from_dict({"n_subjcts": 2})
