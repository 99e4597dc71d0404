"""Featurization oracles: analytic DE, Parseval PSD, filter and bilinear checks."""

from __future__ import annotations

import numpy as np
import pytest

from eegmatch.errors import ValidationError
from eegmatch.featurize import (BandSet, ElectrodeLayout, FeaturizeConfig,
                                assemble_samples, band_power_psd, bandpass,
                                compute_band_stats, default_layout,
                                differential_entropy, feature_frame,
                                load_layout, map_to_grid, normalize_samples,
                                upsample_bilinear)

LOG_2PIE = np.log(2.0 * np.pi * np.e)


# -- differential entropy -----------------------------------------------------------

def test_de_analytic_oracle(rng):
    """DE of N(0, sigma^2) samples matches 0.5*ln(2*pi*e*sigma^2) +/- 0.02."""
    for sigma in (0.5, 1.0, 2.0):
        x = rng.normal(0.0, sigma, size=100_000)
        expected = 0.5 * (LOG_2PIE + np.log(sigma ** 2))
        assert abs(differential_entropy(x) - expected) <= 0.02


def test_de_scale_equivariance(rng):
    """DE(k*x) = DE(x) + ln(k): the log-variance identity, exact."""
    x = rng.standard_normal(4096)
    for k in (2.0, 7.5, 100.0):
        assert differential_entropy(k * x) == pytest.approx(
            differential_entropy(x) + np.log(k), abs=1e-9)


def test_de_variance_floor():
    """A constant window has zero variance; the floor keeps DE finite."""
    de = differential_entropy(np.full(256, 3.25), floor=1e-12)
    assert de == pytest.approx(0.5 * (LOG_2PIE + np.log(1e-12)), abs=1e-12)
    assert np.isfinite(de)


def test_de_needs_two_samples():
    with pytest.raises(ValidationError, match="2 samples"):
        differential_entropy(np.array([1.0]))


# -- band power ---------------------------------------------------------------------

def test_psd_parseval_partition(rng):
    """Band powers over a full partition of (0, Nyquist] sum to the variance."""
    fs = 200.0
    x = rng.standard_normal(int(8 * fs))
    bands = [(0.0, 25.0), (25.0, 50.0), (50.0, 75.0), (75.0, 100.0)]
    total = sum(band_power_psd(x, band, fs) for band in bands)
    var = x.var()
    assert abs(total - var) / var <= 0.05


def test_psd_unit_sine(rng):
    """A unit-amplitude in-band sine carries power 1/2 +/- 10%."""
    fs = 200.0
    t = np.arange(int(8 * fs)) / fs
    x = np.sin(2 * np.pi * 10.0 * t)
    for estimator in ("welch", "periodogram"):
        power = band_power_psd(x, (8.0, 14.0), fs, estimator=estimator)
        assert abs(power - 0.5) <= 0.05


def test_psd_band_edges_partition_exactly(rng):
    """[low, high) masking means adjacent bands never double count a bin."""
    fs = 200.0
    x = rng.standard_normal(int(4 * fs))
    joint = band_power_psd(x, (5.0, 25.0), fs)
    split = band_power_psd(x, (5.0, 15.0), fs) + band_power_psd(x, (15.0, 25.0), fs)
    assert joint == pytest.approx(split, rel=1e-12)


def test_psd_band_validation():
    with pytest.raises(ValidationError, match="outside"):
        band_power_psd(np.zeros(400), (50.0, 150.0), 200.0)
    with pytest.raises(ValidationError, match="Welch segment"):
        band_power_psd(np.zeros(50), (8.0, 14.0), 200.0)  # 50 < 100-sample segment


# -- band-pass filter ---------------------------------------------------------------

def test_bandpass_fft_oracle(rng):
    """FFT power check: passband preserved, far stopband strongly attenuated."""
    fs = 200.0
    x = rng.standard_normal(int(16 * fs))
    y = bandpass(x, (8.0, 14.0), fs)
    freqs = np.fft.rfftfreq(x.size, d=1 / fs)
    px = np.abs(np.fft.rfft(x)) ** 2
    py = np.abs(np.fft.rfft(y)) ** 2
    passband = (freqs >= 10.0) & (freqs <= 12.0)   # comfortably inside
    stopband = (freqs >= 40.0) | (freqs <= 2.0)    # far outside
    assert py[passband].sum() / px[passband].sum() > 0.8
    assert py[stopband].sum() / px[stopband].sum() < 1e-3


def test_bandpass_zero_phase():
    """Forward-backward filtering preserves even symmetry (no phase shift)."""
    fs = 200.0
    n = 1601
    t = (np.arange(n) - n // 2) / fs
    x = np.exp(-t ** 2 / 0.5) * np.cos(2 * np.pi * 10.0 * t)  # even function
    y = bandpass(x, (8.0, 14.0), fs)
    assert np.abs(y - y[::-1]).max() < 1e-8


def test_bandpass_multichannel_rows(rng):
    x = rng.standard_normal((3, 2000))
    y = bandpass(x, (8.0, 14.0), 200.0)
    assert y.shape == x.shape
    np.testing.assert_allclose(y[1], bandpass(x[1], (8.0, 14.0), 200.0),
                               rtol=0, atol=1e-12)


# -- grid mapping and bilinear upsampling -------------------------------------------

def _toy_layout():
    return ElectrodeLayout(grid_rows=3, grid_cols=3, placements=(
        ("A", 0, 0), ("B", 1, 2), ("C", 2, 1)))


def test_map_to_grid_scatter():
    grid = map_to_grid(np.array([1.5, -2.0, 7.0]), _toy_layout())
    expected = np.zeros((3, 3))
    expected[0, 0], expected[1, 2], expected[2, 1] = 1.5, -2.0, 7.0
    np.testing.assert_array_equal(grid, expected)


def test_map_to_grid_batched(rng):
    vals = rng.standard_normal((4, 3))
    grid = map_to_grid(vals, _toy_layout())
    assert grid.shape == (4, 3, 3)
    np.testing.assert_array_equal(grid[2], map_to_grid(vals[2], _toy_layout()))


def test_map_to_grid_count_mismatch():
    with pytest.raises(ValidationError, match="placements"):
        map_to_grid(np.zeros(5), _toy_layout())


def test_bilinear_exact_on_linear_functions():
    """Align-corners bilinear reproduces affine maps exactly (closed form)."""
    h0, w0, h1, w1 = 9, 9, 32, 32
    r = np.arange(h0)[:, None]
    c = np.arange(w0)[None, :]
    grid = 2.0 + 3.0 * r - 5.0 * c
    out = upsample_bilinear(grid, h1, w1)
    r_src = np.arange(h1)[:, None] * (h0 - 1) / (h1 - 1)
    c_src = np.arange(w1)[None, :] * (w0 - 1) / (w1 - 1)
    np.testing.assert_allclose(out, 2.0 + 3.0 * r_src - 5.0 * c_src,
                               rtol=0, atol=1e-12)


def test_bilinear_identity_and_corners(rng):
    grid = rng.standard_normal((9, 9))
    np.testing.assert_array_equal(upsample_bilinear(grid, 9, 9), grid)
    up = upsample_bilinear(grid, 21, 17)
    assert up[0, 0] == grid[0, 0] and up[-1, -1] == grid[-1, -1]
    assert up[0, -1] == grid[0, -1] and up[-1, 0] == grid[-1, 0]


def test_bilinear_rejects_downsampling():
    with pytest.raises(ValidationError, match=">="):
        upsample_bilinear(np.zeros((9, 9)), 5, 9)


# -- frame assembly and normalization -----------------------------------------------

def test_feature_frame_shapes(rng):
    cfg = FeaturizeConfig(out_h=16, out_w=16, frames_per_sample=2)
    x = rng.standard_normal((62, 200))
    de_map, psd_map = feature_frame(x, cfg, fs=200.0)
    assert de_map.shape == (6, 62) and psd_map.shape == (6, 62)
    assert np.isfinite(de_map).all() and np.isfinite(psd_map).all()


def test_assemble_samples_structure(tiny_rec, tiny_featurize_cfg):
    samples = assemble_samples(tiny_rec, tiny_featurize_cfg)
    cfg = tiny_featurize_cfg
    # 4-second trials, 1-second windows, 2 frames per block -> 2 blocks/trial
    assert len(samples) == 2 * len(tiny_rec.trials)
    for s in samples:
        assert s.de.shape == (2, 6, 16, 16)
        assert s.psd.shape == (2, 6, 16, 16)
        assert 0 <= s.block < 2
        assert s.label in tiny_rec.label_set
    keys = {(s.subject_id, s.session_id, s.trial_id, s.block) for s in samples}
    assert len(keys) == len(samples)  # blocks are distinct


def test_assemble_rejects_short_trials(tiny_rec):
    cfg = FeaturizeConfig(out_h=16, out_w=16, frames_per_sample=50)
    with pytest.raises(ValidationError, match="shorter than one temporal block"):
        assemble_samples(tiny_rec, cfg)


def test_znorm_population_moments(tiny_samples):
    stats = compute_band_stats(tiny_samples)
    normed = normalize_samples(tiny_samples, stats)
    de = np.stack([s.de for s in normed])
    psd = np.stack([s.psd for s in normed])
    axes = (0, 1, 3, 4)
    np.testing.assert_allclose(de.mean(axis=axes), 0.0, atol=1e-9)
    np.testing.assert_allclose(de.std(axis=axes), 1.0, atol=1e-9)
    np.testing.assert_allclose(psd.mean(axis=axes), 0.0, atol=1e-9)
    np.testing.assert_allclose(psd.std(axis=axes), 1.0, atol=1e-9)


def test_de_frame_shift_equivariance(rng):
    """Scaling the raw window by k shifts every per-channel DE by exactly
    ln(k) (the filter is linear, so filtered variance scales by k^2)."""
    cfg = FeaturizeConfig(out_h=16, out_w=16, frames_per_sample=2)
    x = rng.standard_normal((62, 200))
    de_1, _ = feature_frame(x, cfg, fs=200.0)
    de_k, _ = feature_frame(3.0 * x, cfg, fs=200.0)
    np.testing.assert_allclose(de_k, de_1 + np.log(3.0), atol=1e-9)


# -- config and layout --------------------------------------------------------------

def test_default_layout_62_channels():
    layout = default_layout()
    assert layout.n_channels == 62
    assert layout.grid_rows == 9 and layout.grid_cols == 9
    rows, cols = layout.row_col_arrays()
    assert len({(r, c) for r, c in zip(rows, cols)}) == 62


def test_layout_validation():
    with pytest.raises(ValidationError, match="outside grid"):
        ElectrodeLayout(grid_rows=2, grid_cols=2, placements=(("A", 2, 0),))
    with pytest.raises(ValidationError, match="duplicate placement"):
        ElectrodeLayout(grid_rows=2, grid_cols=2,
                        placements=(("A", 0, 0), ("B", 0, 0)))


def test_layout_parse_errors():
    with pytest.raises(Exception, match="expected 'NAME row col'"):
        load_layout("A 0\n")
    with pytest.raises(Exception, match="non-integer"):
        load_layout("A zero 0\n")


def test_featurize_config_from_dict_partial():
    cfg = FeaturizeConfig.from_dict({"out_h": 16, "out_w": 16})
    assert cfg.out_h == 16 and cfg.frames_per_sample == 5
    with pytest.raises(ValidationError, match="unknown"):
        FeaturizeConfig.from_dict({"out_hh": 16})
    with pytest.raises(ValidationError, match="grid"):
        FeaturizeConfig.from_dict({"grid": [9, 9]})  # placements required too


def test_band_set_defaults():
    bands = BandSet()
    assert len(bands) == 6
    assert bands.names == ("delta", "theta", "alpha", "beta", "gamma1", "gamma2")
    assert bands.ceiling_hz == 75.0
    lows = [b[1] for b in bands.bands]
    highs = [b[2] for b in bands.bands]
    assert all(h == l for h, l in zip(highs[:-1], lows[1:]))  # contiguous
