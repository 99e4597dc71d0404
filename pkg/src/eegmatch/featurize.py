"""Spectral featurization of raw EEG into 4-D (time, band, height, width) tensors.

Pipeline per trial: cut into non-overlapping windows, band-pass each window
into the configured frequency bands, compute differential entropy and
log band power per channel and band, scatter the per-channel values onto a
2-D electrode grid, and bilinearly upsample the grid. Blocks of consecutive
windows form the temporal axis.

Everything here is a pure function of its inputs, so featurization can be
parallelized per trial without changing results.
"""

from __future__ import annotations

import importlib.resources
import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import FormatError, ValidationError
from .recordings import BAND_EDGES_HZ, RecordingSet

FEATURE_MAGIC = b"EEGF"
FEATURE_SCHEMA_VERSION = 1

LOG_2PIE = math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class BandSet:
    """Ordered frequency bands as (name, low Hz, high Hz)."""

    bands: tuple[tuple[str, float, float], ...] = BAND_EDGES_HZ

    def __post_init__(self):
        prev_low = 0.0
        for name, low, high in self.bands:
            if not 0.0 < low < high:
                raise ValidationError(f"band {name!r}: need 0 < low < high, got [{low}, {high}]")
            if low < prev_low:
                raise ValidationError("bands must be ordered by low edge")
            prev_low = low

    def __len__(self) -> int:
        return len(self.bands)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(b[0] for b in self.bands)

    @property
    def ceiling_hz(self) -> float:
        return max(b[2] for b in self.bands)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class ElectrodeLayout:
    """Placement of named channels on a grid; order defines data channel order."""

    grid_rows: int
    grid_cols: int
    placements: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        seen_cells = set()
        seen_names = set()
        for name, r, c in self.placements:
            if not (0 <= r < self.grid_rows and 0 <= c < self.grid_cols):
                raise ValidationError(f"channel {name!r}: placement ({r}, {c}) outside grid")
            if (r, c) in seen_cells:
                raise ValidationError(f"channel {name!r}: duplicate placement at ({r}, {c})")
            if name in seen_names:
                raise ValidationError(f"duplicate channel name {name!r}")
            seen_cells.add((r, c))
            seen_names.add(name)

    @property
    def n_channels(self) -> int:
        return len(self.placements)

    def row_col_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        rows = np.array([p[1] for p in self.placements], dtype=np.intp)
        cols = np.array([p[2] for p in self.placements], dtype=np.intp)
        return rows, cols


def load_layout(path_or_text, grid_rows: int = 9, grid_cols: int = 9) -> ElectrodeLayout:
    """Parse a layout file: one line per channel, "NAME row col", '#' comments."""
    if isinstance(path_or_text, str) and "\n" in path_or_text:
        text = path_or_text
    else:
        with open(path_or_text) as f:
            text = f.read()
    placements = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"layout line {lineno}: expected 'NAME row col', got {line!r}")
        try:
            placements.append((parts[0], int(parts[1]), int(parts[2])))
        except ValueError:
            raise FormatError(f"layout line {lineno}: non-integer grid position") from None
    return ElectrodeLayout(grid_rows=grid_rows, grid_cols=grid_cols, placements=tuple(placements))


def default_layout() -> ElectrodeLayout:
    text = importlib.resources.files("eegmatch.data").joinpath("layout_62_10_20.txt").read_text()
    return load_layout(text)


@dataclass(frozen=True)
class FeaturizeConfig:
    band_set: BandSet = field(default_factory=BandSet)
    layout: ElectrodeLayout = field(default_factory=default_layout)
    window_seconds: float = 1.0
    frames_per_sample: int = 5
    out_h: int = 32
    out_w: int = 32
    psd_estimator: str = "welch"  # or "periodogram"
    welch_seg_seconds: float = 0.5
    de_floor: float = 1e-12

    def __post_init__(self):
        if self.psd_estimator not in ("welch", "periodogram"):
            raise ValidationError(f"unknown psd_estimator {self.psd_estimator!r}")
        if self.frames_per_sample < 1:
            raise ValidationError("frames_per_sample must be >= 1")
        if self.out_h < self.layout.grid_rows or self.out_w < self.layout.grid_cols:
            raise ValidationError("upsampled size must be >= grid size")

    def window_samples(self, fs: float) -> int:
        n = self.window_seconds * fs
        if abs(n - round(n)) > 1e-9:
            raise ValidationError("window_seconds x fs must be an integer sample count")
        return int(round(n))

    def to_dict(self) -> dict:
        return {
            "bands": [list(b) for b in self.band_set.bands],
            "grid": [self.layout.grid_rows, self.layout.grid_cols],
            "placements": [list(p) for p in self.layout.placements],
            "window_seconds": self.window_seconds,
            "frames_per_sample": self.frames_per_sample,
            "out_h": self.out_h,
            "out_w": self.out_w,
            "psd_estimator": self.psd_estimator,
            "welch_seg_seconds": self.welch_seg_seconds,
            "de_floor": self.de_floor,
        }

    @staticmethod
    def from_dict(d: dict) -> "FeaturizeConfig":
        """Build from a (possibly partial) dict; unknown keys are an error."""
        known = {"bands", "grid", "placements", "window_seconds",
                 "frames_per_sample", "out_h", "out_w", "psd_estimator",
                 "welch_seg_seconds", "de_floor"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(
                f"unknown featurize config fields: {sorted(unknown)}")
        base = FeaturizeConfig()
        band_set = base.band_set if "bands" not in d else BandSet(
            tuple((str(n), float(lo), float(hi)) for n, lo, hi in d["bands"]))
        if "grid" in d or "placements" in d:
            if not ("grid" in d and "placements" in d):
                raise ValidationError(
                    "featurize config must give 'grid' and 'placements' together")
            layout = ElectrodeLayout(
                grid_rows=int(d["grid"][0]), grid_cols=int(d["grid"][1]),
                placements=tuple((str(n), int(r), int(c)) for n, r, c in d["placements"]),
            )
        else:
            layout = base.layout
        return FeaturizeConfig(
            band_set=band_set,
            layout=layout,
            window_seconds=float(d.get("window_seconds", base.window_seconds)),
            frames_per_sample=int(d.get("frames_per_sample", base.frames_per_sample)),
            out_h=int(d.get("out_h", base.out_h)),
            out_w=int(d.get("out_w", base.out_w)),
            psd_estimator=str(d.get("psd_estimator", base.psd_estimator)),
            welch_seg_seconds=float(d.get("welch_seg_seconds", base.welch_seg_seconds)),
            de_floor=float(d.get("de_floor", base.de_floor)),
        )


@dataclass(eq=False)
class Sample4D:
    """One model input: paired DE/PSD tensors of shape (T, F, H, W) plus metadata."""

    de: np.ndarray
    psd: np.ndarray
    label: str
    subject_id: int
    session_id: int
    trial_id: int = 0
    block: int = 0

    def __post_init__(self):
        if self.de.shape != self.psd.shape or self.de.ndim != 4:
            raise ValidationError("Sample4D tensors must be 4-D and share a shape")
        if not (np.isfinite(self.de).all() and np.isfinite(self.psd).all()):
            raise ValidationError("Sample4D tensors must be finite")


def bandpass(series: np.ndarray, band: tuple[float, float], fs: float) -> np.ndarray:
    """Zero-phase 4th-order Butterworth band-pass along the last axis."""
    low, high = band
    if not 0.0 < low < high < fs / 2.0:
        raise ValidationError(f"band edges [{low}, {high}] out of range for fs={fs}")
    sos = sps.butter(4, [low, high], btype="bandpass", fs=fs, output="sos")
    # sosfiltfilt padding requirement (scipy's default padlen formula)
    padlen = 3 * (2 * len(sos) + 1 - min((sos[:, 2] == 0).sum(), (sos[:, 5] == 0).sum()))
    x = np.asarray(series, dtype=np.float64)
    if x.shape[-1] <= padlen:
        raise ValidationError(f"series too short for zero-phase filtering (need > {padlen} samples)")
    return sps.sosfiltfilt(sos, x, axis=-1)


def differential_entropy(window: np.ndarray, floor: float = 1e-12) -> float:
    """DE in nats from the unbiased sample variance, floored before the log."""
    w = np.asarray(window, dtype=np.float64)
    if w.shape[-1] < 2:
        raise ValidationError("differential entropy needs at least 2 samples")
    var = w.var(axis=-1, ddof=1)
    out = 0.5 * (LOG_2PIE + np.log(np.maximum(var, floor)))
    return float(out) if np.isscalar(var) or out.ndim == 0 else out


def band_power_psd(window: np.ndarray, band: tuple[float, float], fs: float,
                   estimator: str = "welch", seg_seconds: float = 0.5):
    """Integrate a PSD estimate over [low, high); returns power (signal units squared).

    The upper edge is included only when it equals the Nyquist frequency, so
    that contiguous bands partition (0, fs/2] without double counting.
    """
    low, high = band
    if not (0.0 <= low < high <= fs / 2.0):
        raise ValidationError(f"band [{low}, {high}] outside [0, {fs / 2.0}]")
    x = np.asarray(window, dtype=np.float64)
    if estimator == "welch":
        nperseg = int(round(seg_seconds * fs))
        if x.shape[-1] < nperseg:
            raise ValidationError(
                f"window shorter than the Welch segment ({x.shape[-1]} < {nperseg} samples)")
        freqs, pxx = sps.welch(x, fs=fs, window="hann", nperseg=nperseg,
                               noverlap=nperseg // 2, detrend="constant",
                               scaling="density", axis=-1)
    elif estimator == "periodogram":
        freqs, pxx = sps.periodogram(x, fs=fs, detrend="constant",
                                     scaling="density", axis=-1)
    else:
        raise ValidationError(f"unknown estimator {estimator!r}")
    df = freqs[1] - freqs[0]
    mask = (freqs >= low) & (freqs < high)
    if high >= fs / 2.0:
        mask |= freqs == high
    power = pxx[..., mask].sum(axis=-1) * df
    return float(power) if power.ndim == 0 else power


def feature_frame(trial_window: np.ndarray, cfg: FeaturizeConfig,
                  fs: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-band DE and log band power for one window; both (F, channels)."""
    x = np.atleast_2d(np.asarray(trial_window, dtype=np.float64))
    n_bands = len(cfg.band_set)
    de_map = np.empty((n_bands, x.shape[0]))
    psd_map = np.empty((n_bands, x.shape[0]))
    for f, (_, low, high) in enumerate(cfg.band_set.bands):
        xb = bandpass(x, (low, high), fs)
        var = xb.var(axis=-1, ddof=1)
        de_map[f] = 0.5 * (LOG_2PIE + np.log(np.maximum(var, cfg.de_floor)))
        power = band_power_psd(xb, (low, high), fs, estimator=cfg.psd_estimator,
                               seg_seconds=cfg.welch_seg_seconds)
        psd_map[f] = np.log(np.maximum(power, cfg.de_floor))
    return de_map, psd_map


def map_to_grid(values: np.ndarray, layout: ElectrodeLayout) -> np.ndarray:
    """Scatter per-channel scalars onto the layout grid; unplaced cells are 0."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != layout.n_channels:
        raise ValidationError(
            f"got {values.shape[-1]} values for {layout.n_channels} placements")
    rows, cols = layout.row_col_arrays()
    grid = np.zeros(values.shape[:-1] + (layout.grid_rows, layout.grid_cols))
    grid[..., rows, cols] = values
    return grid


def upsample_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear interpolation; supports leading batch axes."""
    grid = np.asarray(grid, dtype=np.float64)
    h0, w0 = grid.shape[-2], grid.shape[-1]
    if out_h < h0 or out_w < w0:
        raise ValidationError("output size must be >= input size")

    def axis_coords(n_in: int, n_out: int):
        if n_out == 1 or n_in == 1:
            src = np.zeros(n_out)
        else:
            src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = src - i0
        return i0, i1, w

    y0, y1, wy = axis_coords(h0, out_h)
    x0, x1, wx = axis_coords(w0, out_w)
    rows = grid[..., y0, :] * (1.0 - wy)[:, None] + grid[..., y1, :] * wy[:, None]
    out = rows[..., :, x0] * (1.0 - wx) + rows[..., :, x1] * wx
    return out


@dataclass(frozen=True)
class BandStats:
    """Per-band normalization statistics for DE and PSD tensors."""

    de_mean: np.ndarray
    de_std: np.ndarray
    psd_mean: np.ndarray
    psd_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)]
                for k in ("de_mean", "de_std", "psd_mean", "psd_std")}


def compute_band_stats(samples: list[Sample4D]) -> BandStats:
    """Mean/std per band over a sample population (use training data only)."""
    if not samples:
        raise ValidationError("cannot compute statistics from an empty sample set")
    de = np.stack([s.de for s in samples])  # (N, T, F, H, W)
    psd = np.stack([s.psd for s in samples])
    axes = (0, 1, 3, 4)
    return BandStats(
        de_mean=de.mean(axis=axes), de_std=de.std(axis=axes),
        psd_mean=psd.mean(axis=axes), psd_std=psd.std(axis=axes),
    )


def normalize_samples(samples: list[Sample4D], stats: BandStats) -> list[Sample4D]:
    """Apply per-band z-normalization; returns new samples."""
    de_std = np.maximum(stats.de_std, 1e-12)[None, :, None, None]
    psd_std = np.maximum(stats.psd_std, 1e-12)[None, :, None, None]
    de_mean = stats.de_mean[None, :, None, None]
    psd_mean = stats.psd_mean[None, :, None, None]
    return [
        Sample4D(
            de=(s.de - de_mean) / de_std,
            psd=(s.psd - psd_mean) / psd_std,
            label=s.label, subject_id=s.subject_id, session_id=s.session_id,
            trial_id=s.trial_id, block=s.block,
        )
        for s in samples
    ]


def assemble_samples(rec: RecordingSet, cfg: FeaturizeConfig) -> list[Sample4D]:
    """Featurize every trial into unnormalized Sample4D blocks."""
    out = []
    for trial in rec.trials:
        if trial.n_channels != cfg.layout.n_channels:
            raise ValidationError(
                f"trial {trial.key()}: {trial.n_channels} channels but layout "
                f"places {cfg.layout.n_channels}")
        win = cfg.window_samples(trial.fs)
        n_windows = trial.n_samples // win
        n_blocks = n_windows // cfg.frames_per_sample
        if n_blocks == 0:
            raise ValidationError(
                f"trial {trial.key()}: trial shorter than one temporal block "
                f"({n_windows} windows < {cfg.frames_per_sample})")
        for b in range(n_blocks):
            de_frames, psd_frames = [], []
            for t in range(cfg.frames_per_sample):
                start = (b * cfg.frames_per_sample + t) * win
                de_map, psd_map = feature_frame(trial.data[:, start:start + win], cfg, trial.fs)
                de_frames.append(upsample_bilinear(map_to_grid(de_map, cfg.layout),
                                                   cfg.out_h, cfg.out_w))
                psd_frames.append(upsample_bilinear(map_to_grid(psd_map, cfg.layout),
                                                    cfg.out_h, cfg.out_w))
            out.append(Sample4D(
                de=np.stack(de_frames), psd=np.stack(psd_frames),
                label=trial.label, subject_id=trial.subject_id,
                session_id=trial.session_id, trial_id=trial.trial_id, block=b,
            ))
    return out


def build_samples(rec: RecordingSet, cfg: FeaturizeConfig,
                  stats: BandStats | None = None) -> list[Sample4D]:
    """Assemble and z-normalize samples.

    When ``stats`` is omitted the normalization statistics are computed from
    the assembled population itself; pass training-population statistics to
    avoid leakage in split experiments.
    """
    samples = assemble_samples(rec, cfg)
    if stats is None:
        stats = compute_band_stats(samples)
    return normalize_samples(samples, stats)


def save_features(samples: list[Sample4D], cfg: FeaturizeConfig, label_set, path) -> None:
    """Write a feature cache: EEGF magic, version, JSON header, f64 payloads."""
    header = {
        "schema": FEATURE_SCHEMA_VERSION,
        "featurize": cfg.to_dict(),
        "label_set": list(label_set),
        "samples": [
            {
                "subject_id": s.subject_id, "session_id": s.session_id,
                "trial_id": s.trial_id, "block": s.block, "label": s.label,
                "shape": list(s.de.shape),
            }
            for s in samples
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", FEATURE_SCHEMA_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for s in samples:
            f.write(s.de.astype("<f8", copy=False).tobytes(order="C"))
            f.write(s.psd.astype("<f8", copy=False).tobytes(order="C"))


def load_features(path) -> tuple[list[Sample4D], FeaturizeConfig, tuple[str, ...]]:
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature cache (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != FEATURE_SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported feature schema {version}")
    (hlen,) = struct.unpack("<Q", buf.read(8))
    try:
        header = json.loads(buf.read(hlen))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON header: {e}") from None
    cfg = FeaturizeConfig.from_dict(header["featurize"])
    samples = []
    for row in header["samples"]:
        shape = tuple(row["shape"])
        n = int(np.prod(shape))
        de = np.frombuffer(buf.read(n * 8), dtype="<f8")
        psd = np.frombuffer(buf.read(n * 8), dtype="<f8")
        if de.size != n or psd.size != n:
            raise FormatError(f"{path}: truncated tensor payload for sample {row}")
        samples.append(Sample4D(
            de=de.reshape(shape).copy(), psd=psd.reshape(shape).copy(),
            label=row["label"], subject_id=row["subject_id"],
            session_id=row["session_id"], trial_id=row["trial_id"], block=row["block"],
        ))
    return samples, cfg, tuple(header["label_set"])
