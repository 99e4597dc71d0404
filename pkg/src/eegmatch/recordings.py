"""Raw EEG containers: an on-disk format, validation, and a synthetic generator.

The container is a small custom binary: magic ``EEGC``, a u32 schema version,
a u64 JSON-header length, the JSON header, then raw little-endian float32
trial payloads in header order. Sample data is held as float32 in memory so
that save/load round-trips are bit exact.

Channel order is positional: row ``i`` of ``Trial.data`` is the channel on
line ``i`` of the electrode layout file used downstream.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"EEGC"
SCHEMA_VERSION = 1

# Frequency bands shared with the featurizer defaults: (name, low Hz, high Hz).
# The synthetic generator places each label's sinusoid inside one of these.
BAND_EDGES_HZ = (
    ("delta", 1.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 14.0),
    ("beta", 14.0, 31.0),
    ("gamma1", 31.0, 51.0),
    ("gamma2", 51.0, 75.0),
)

DEFAULT_LABELS = ("negative", "neutral", "positive")
DEFAULT_CHANNELS = 62
DEFAULT_FS = 200.0


@dataclass(eq=False)
class Trial:
    """One EEG trial: a channels x samples matrix plus identifying metadata."""

    subject_id: int
    session_id: int
    trial_id: int
    label: str
    data: np.ndarray  # (channels, samples) float32, microvolts
    fs: float

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValidationError(f"trial {self.key()}: data must be 2-D (channels x samples)")
        self.data.flags.writeable = False

    def key(self) -> tuple[int, int, int]:
        return (self.subject_id, self.session_id, self.trial_id)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trial):
            return NotImplemented
        return (
            self.key() == other.key()
            and self.label == other.label
            and self.fs == other.fs
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class RecordingSet:
    """An ordered collection of trials plus the label vocabulary."""

    trials: list[Trial]
    label_set: tuple[str, ...]
    meta: str = ""

    def __post_init__(self):
        self.trials = list(self.trials)
        self.label_set = tuple(self.label_set)

    def validate(self, band_ceiling_hz: float = BAND_EDGES_HZ[-1][2],
                 expected_channels: int | None = None) -> None:
        """Raise ValidationError on the first invariant violation, naming the trial."""
        seen: set[tuple[int, int, int]] = set()
        for t in self.trials:
            key = t.key()
            if min(key) < 1:
                raise ValidationError(f"trial {key}: ids must be positive integers")
            if key in seen:
                raise ValidationError(f"trial {key}: duplicate (subject, session, trial) triple")
            seen.add(key)
            if t.label not in self.label_set:
                raise ValidationError(f"trial {key}: unknown label {t.label!r}")
            if t.fs < 2.0 * band_ceiling_hz:
                raise ValidationError(
                    f"trial {key}: sampling rate below Nyquist for configured bands "
                    f"(fs={t.fs}, band ceiling {band_ceiling_hz} Hz)"
                )
            if expected_channels is not None and t.n_channels != expected_channels:
                raise ValidationError(
                    f"trial {key}: expected {expected_channels} channels, got {t.n_channels}"
                )
            if not np.isfinite(t.data).all():
                raise ValidationError(f"trial {key}: non-finite sample value")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RecordingSet):
            return NotImplemented
        return (
            self.label_set == other.label_set
            and self.meta == other.meta
            and len(self.trials) == len(other.trials)
            and all(a == b for a, b in zip(self.trials, other.trials))
        )

    def subjects(self) -> list[int]:
        return sorted({t.subject_id for t in self.trials})

    def sessions(self) -> list[int]:
        return sorted({t.session_id for t in self.trials})


def save_recording(rec: RecordingSet, path) -> None:
    """Write the container format; byte-deterministic for equal inputs."""
    rec.validate()
    header = {
        "schema": SCHEMA_VERSION,
        "label_set": list(rec.label_set),
        "meta": rec.meta,
        "trials": [
            {
                "subject_id": t.subject_id,
                "session_id": t.session_id,
                "trial_id": t.trial_id,
                "label": t.label,
                "fs": t.fs,
                "channels": t.n_channels,
                "samples": t.n_samples,
            }
            for t in rec.trials
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", SCHEMA_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for t in rec.trials:
            f.write(t.data.astype("<f4", copy=False).tobytes(order="C"))


def load_recording(path, band_ceiling_hz: float = BAND_EDGES_HZ[-1][2]) -> RecordingSet:
    """Read and validate a container file."""
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != MAGIC:
        raise FormatError(f"{path}: not an EEG container (bad magic {magic!r})")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, path, "version"))
    if version != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema version {version}")
    (hlen,) = struct.unpack("<Q", _read_exact(buf, 8, path, "header length"))
    try:
        header = json.loads(_read_exact(buf, hlen, path, "JSON header"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON header: {e}") from None
    for k in ("label_set", "meta", "trials"):
        if k not in header:
            raise FormatError(f"{path}: malformed header, missing field {k!r}")

    trials = []
    for row in header["trials"]:
        key = (row.get("subject_id"), row.get("session_id"), row.get("trial_id"))
        n = row["channels"] * row["samples"]
        payload = buf.read(n * 4)
        if len(payload) != n * 4:
            raise FormatError(f"{path}: truncated payload for trial {key}")
        data = np.frombuffer(payload, dtype="<f4").reshape(row["channels"], row["samples"])
        trials.append(
            Trial(
                subject_id=row["subject_id"],
                session_id=row["session_id"],
                trial_id=row["trial_id"],
                label=row["label"],
                data=data,
                fs=row["fs"],
            )
        )
    if buf.read(1):
        raise FormatError(f"{path}: trailing bytes after last trial payload")
    rec = RecordingSet(trials=trials, label_set=tuple(header["label_set"]), meta=header["meta"])
    rec.validate(band_ceiling_hz=band_ceiling_hz)
    return rec


def _read_exact(buf, n: int, path, what: str) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise FormatError(f"{path}: truncated file while reading {what}")
    return b


def trial_from_csv(path, *, subject_id: int, session_id: int, trial_id: int,
                   label: str, fs: float) -> tuple[Trial, list[str]]:
    """Import one trial from the CSV interchange format.

    One file per trial: a header row of channel names, then one row per time
    sample with a column per channel. Column order must match the electrode
    layout file used downstream. Returns the trial and the channel names.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            names = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV") from None
        rows = [row for row in reader if row]
    if not rows:
        raise FormatError(f"{path}: CSV has a header but no samples")
    try:
        mat = np.array(rows, dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"{path}: non-numeric sample value: {e}") from None
    if mat.shape[1] != len(names):
        raise FormatError(f"{path}: row width does not match header width")
    trial = Trial(subject_id=subject_id, session_id=session_id, trial_id=trial_id,
                  label=label, data=mat.T.astype(np.float32), fs=fs)
    return trial, [n.strip() for n in names]


@dataclass(frozen=True)
class SynthConfig:
    """Configuration for the class-conditional synthetic EEG generator."""

    n_subjects: int = 2
    n_sessions: int = 1
    trials_per_class: int = 2
    label_set: tuple[str, ...] = DEFAULT_LABELS
    fs: float = DEFAULT_FS
    trial_seconds: float = 6.0
    # label -> (band index into BAND_EDGES_HZ, power boost factor > 1)
    band_signature: dict = field(
        default_factory=lambda: {"negative": (1, 4.0), "neutral": (2, 4.0), "positive": (3, 4.0)}
    )
    subject_jitter: float = 0.1
    noise_floor: float = 1.0
    seed: int = 0
    n_channels: int = DEFAULT_CHANNELS

    def validate(self) -> None:
        if self.n_subjects < 1 or self.n_sessions < 1 or self.trials_per_class < 1:
            raise ValidationError("synth config: counts must be positive")
        n = self.trial_seconds * self.fs
        if abs(n - round(n)) > 1e-9:
            raise ValidationError("synth config: trial_seconds x fs must be an integer sample count")
        if set(self.band_signature) != set(self.label_set):
            raise ValidationError("synth config: band_signature must cover exactly the label set")
        for label, (band_idx, boost) in self.band_signature.items():
            if not 0 <= band_idx < len(BAND_EDGES_HZ):
                raise ValidationError(f"synth config: band index {band_idx} out of range for {label!r}")
            if not boost > 1.0:
                raise ValidationError(f"synth config: power boost must exceed 1.0 (got {boost} for {label!r})")
        if self.noise_floor <= 0:
            raise ValidationError("synth config: noise_floor must be positive")
        if not 0 <= self.subject_jitter < 1:
            raise ValidationError("synth config: subject_jitter must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "n_sessions": self.n_sessions,
            "trials_per_class": self.trials_per_class,
            "label_set": list(self.label_set),
            "fs": self.fs,
            "trial_seconds": self.trial_seconds,
            "band_signature": {
                label: [int(band), float(boost)]
                for label, (band, boost) in sorted(self.band_signature.items())
            },
            "subject_jitter": self.subject_jitter,
            "noise_floor": self.noise_floor,
            "seed": self.seed,
            "n_channels": self.n_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        known = {f.name for f in fields(SynthConfig)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"synth config: unknown fields {unknown}")
        kwargs = dict(d)
        if "label_set" in kwargs:
            kwargs["label_set"] = tuple(kwargs["label_set"])
        if "band_signature" in kwargs:
            sig = kwargs["band_signature"]
            if not isinstance(sig, dict):
                raise ValidationError("synth config: band_signature must be an object")
            kwargs["band_signature"] = {
                label: (int(pair[0]), float(pair[1])) for label, pair in sig.items()
            }
        cfg = SynthConfig(**kwargs)
        cfg.validate()
        return cfg


def generate_synthetic(cfg: SynthConfig) -> RecordingSet:
    """Generate a class-conditional synthetic RecordingSet.

    Each trial is white noise plus one sinusoid placed inside the label's
    signature band. The sinusoid amplitude is set so that the label's mean
    band power is roughly ``(1 + boost)`` times the white-noise power in that
    band, scaled per subject by a seeded jitter factor. Identical configs
    (including seed) produce identical output.
    """
    cfg.validate()
    n_samples = int(round(cfg.trial_seconds * cfg.fs))
    t = np.arange(n_samples) / cfg.fs
    trials = []
    for subject in range(1, cfg.n_subjects + 1):
        jit_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, 1, subject])))
        jitter = 1.0 + cfg.subject_jitter * jit_rng.uniform(-1.0, 1.0)
        for session in range(1, cfg.n_sessions + 1):
            for label_idx, label in enumerate(cfg.label_set):
                band_idx, boost = cfg.band_signature[label]
                _, low, high = BAND_EDGES_HZ[band_idx]
                bw = high - low
                # White-noise power falling inside the band (one-sided PSD).
                noise_band_power = cfg.noise_floor**2 * bw / (cfg.fs / 2.0)
                amp = jitter * np.sqrt(2.0 * boost * noise_band_power)
                for k in range(cfg.trials_per_class):
                    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
                        [cfg.seed, 2, subject, session, label_idx, k])))
                    f0 = rng.uniform(low + 0.1 * bw, high - 0.1 * bw)
                    phase = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.n_channels, 1))
                    noise = rng.normal(0.0, cfg.noise_floor, size=(cfg.n_channels, n_samples))
                    data = noise + amp * np.sin(2.0 * np.pi * f0 * t[None, :] + phase)
                    trials.append(Trial(
                        subject_id=subject,
                        session_id=session,
                        trial_id=label_idx * cfg.trials_per_class + k + 1,
                        label=label,
                        data=data.astype(np.float32),
                        fs=cfg.fs,
                    ))
    rec = RecordingSet(trials=trials, label_set=cfg.label_set,
                       meta=f"synthetic seed={cfg.seed}")
    rec.validate()
    return rec
