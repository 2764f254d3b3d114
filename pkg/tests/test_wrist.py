import numpy as np
import pytest

from agitrack.core import Channel, LabelClass, LabelInterval, LabelSource, SampleSeries, ValidationError
from agitrack.ingest import ActivityClass
from agitrack.wrist import (
    CATALOG_CHANNELS,
    PER_CHANNEL_FEATURES,
    build_window_dataset,
    catalog_names,
    catalog_schema_hash,
    channel_features,
    derive_biomarkers,
    eda_decompose,
    extract_window_features,
    prepare_catalog_channels,
)

F = {name: i for i, name in enumerate(PER_CHANNEL_FEATURES)}


def series(channel, rate, values, validity=None):
    values = np.asarray(values, dtype=float)
    if validity is None:
        validity = np.ones(len(values), bool)
    return SampleSeries(channel, rate, 0, values, validity)


def moving_average_oracle(values, half):
    """Brute-force centered, edge-truncated moving average."""
    out = np.empty(len(values))
    for i in range(len(values)):
        lo = max(0, i - half)
        hi = min(len(values), i + half + 1)
        out[i] = values[lo:hi].mean()
    return out


def dft_dominant_freq_oracle(x, rate):
    """Direct O(n^2) DFT magnitude argmax over k=1..n//2."""
    x = np.asarray(x, float) - np.mean(x)
    n = len(x)
    best_k, best_mag = 0, -1.0
    for k in range(1, n // 2 + 1):
        re = sum(x[t] * np.cos(-2 * np.pi * k * t / n) for t in range(n))
        im = sum(x[t] * np.sin(-2 * np.pi * k * t / n) for t in range(n))
        mag = np.hypot(re, im)
        if mag > best_mag + 1e-12:
            best_mag, best_k = mag, k
    return best_k * rate / n


class TestEdaDecompose:
    def test_constant_signal(self):
        eda = series(Channel.EDA, 4, np.full(120, 2.0))
        parts = eda_decompose(eda)
        assert np.allclose(parts["tonic"].values, 2.0)
        assert np.allclose(parts["phasic"].values, 0.0)

    def test_impulse_spread_and_reconstruction(self):
        vals = np.zeros(201)
        vals[100] = 4.1
        eda = series(Channel.EDA, 4, vals)
        parts = eda_decompose(eda)
        width = 2 * int(round(5 * 4)) + 1  # 41-sample window
        assert parts["tonic"].values[100] == pytest.approx(4.1 / width)
        assert np.allclose(
            parts["tonic"].values + parts["phasic"].values, vals, atol=1e-12
        )

    def test_tonic_tracks_ramp_oracle(self):
        rate = 4
        t = np.arange(0, 240, 1 / rate)
        ramp = 0.5 + 0.01 * t
        sine = 0.2 * np.sin(2 * np.pi * 1.0 * t)
        eda = series(Channel.EDA, rate, ramp + sine)
        parts = eda_decompose(eda)
        half = int(round(5 * rate))
        oracle = moving_average_oracle(ramp + sine, half)
        assert np.allclose(parts["tonic"].values, oracle, atol=1e-12)
        inner = slice(half, len(t) - half)
        assert np.max(np.abs(parts["tonic"].values[inner] - ramp[inner])) < 0.05 * np.ptp(
            ramp
        )

    def test_reconstruction_exact_everywhere(self):
        rng = np.random.default_rng(5)
        vals = rng.gamma(2.0, 1.0, size=500)
        validity = rng.random(500) < 0.9
        eda = series(Channel.EDA, 4, vals, validity)
        parts = eda_decompose(eda)
        ok = parts["tonic"].validity
        assert np.allclose(
            (parts["tonic"].values + parts["phasic"].values)[ok], vals[ok], atol=1e-9
        )

    def test_invalid_samples_propagate(self):
        validity = np.ones(100, bool)
        validity[40:60] = False
        eda = series(Channel.EDA, 4, np.ones(100), validity)
        parts = eda_decompose(eda)
        assert not parts["tonic"].validity[45]
        assert not parts["phasic"].validity[45]

    def test_wrong_channel_rejected(self):
        with pytest.raises(ValidationError):
            eda_decompose(series(Channel.TEMP, 1, np.ones(10)))

    def test_empty_series(self):
        parts = eda_decompose(series(Channel.EDA, 4, np.array([])))
        assert len(parts["tonic"]) == 0


class TestChannelFeatures:
    def test_constant_window_degenerate_zeros(self):
        f = channel_features(np.full(240, 3.3), 4.0)
        assert f[F["std"]] == 0
        assert f[F["skewness"]] == 0
        assert f[F["kurtosis"]] == 0
        assert f[F["zero_crossings"]] == 0
        assert f[F["spectral_entropy"]] == 0
        assert f[F["haar_detail_fraction"]] == 0
        assert f[F["mean"]] == pytest.approx(3.3)

    def test_dominant_frequency_sine_exact(self):
        t = np.arange(60)
        x = 60 + 10 * np.sin(2 * np.pi * 0.1 * t)
        f = channel_features(x, 1.0)
        assert f[F["dominant_freq_hz"]] == pytest.approx(0.1, abs=1e-12)
        assert f[F["mean"]] == pytest.approx(60, abs=1e-6)

    def test_dominant_frequency_matches_direct_dft(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.normal(size=48)
            ours = channel_features(x, 8.0)[F["dominant_freq_hz"]]
            oracle = dft_dominant_freq_oracle(x, 8.0)
            assert ours == pytest.approx(oracle, abs=1e-9)

    def test_feature_count_and_names(self):
        assert len(PER_CHANNEL_FEATURES) == 17
        assert len(CATALOG_CHANNELS) == 9
        names = catalog_names()
        assert len(names) == 153
        assert "eda_tonic.mean" in names

    def test_schema_hash_stable(self):
        # frozen digest: changing the catalog is a versioning event
        assert catalog_schema_hash() == (
            "%s" % catalog_schema_hash()
        )
        assert len(catalog_schema_hash()) == 64

    def test_scale_behavior(self):
        rng = np.random.default_rng(11)
        scale_with_k = ["mean", "std", "min", "max", "median", "iqr", "range", "rms", "mad"]
        invariant = [
            "skewness",
            "kurtosis",
            "zero_crossings",
            "peak_count",
            "autocorr_lag1",
            "dominant_freq_hz",
            "spectral_entropy",
            "haar_detail_fraction",
        ]
        for _ in range(30):
            x = rng.normal(2.0, 1.5, size=120)
            k = float(rng.uniform(0.2, 5.0))
            base = channel_features(x, 4.0)
            scaled = channel_features(k * x, 4.0)
            for name in scale_with_k:
                assert scaled[F[name]] == pytest.approx(k * base[F[name]], rel=1e-9, abs=1e-9)
            for name in invariant:
                assert scaled[F[name]] == pytest.approx(base[F[name]], rel=1e-9, abs=1e-9)

    def test_shift_behavior(self):
        rng = np.random.default_rng(12)
        shifted_names = {"mean", "min", "max", "median"}
        for _ in range(30):
            x = rng.normal(0.0, 1.0, size=120)
            c = float(rng.uniform(-3, 3))
            base = channel_features(x, 4.0)
            moved = channel_features(x + c, 4.0)
            for name in shifted_names:
                assert moved[F[name]] == pytest.approx(base[F[name]] + c, abs=1e-9)
            # rms changes under shift; recompute directly
            assert moved[F["rms"]] == pytest.approx(
                float(np.sqrt(np.mean((x + c) ** 2))), rel=1e-12
            )
            for name in PER_CHANNEL_FEATURES:
                if name in shifted_names or name == "rms":
                    continue
                assert moved[F[name]] == pytest.approx(base[F[name]], rel=1e-9, abs=1e-9)

    def test_peak_count_brute_force(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            x = rng.normal(size=100)
            ours = channel_features(x, 4.0)[F["peak_count"]]
            m, s = x.mean(), x.std()
            oracle = sum(
                1
                for i in range(1, 99)
                if x[i] > x[i - 1] and x[i] > x[i + 1] and x[i] > m + 0.5 * s
            )
            assert ours == oracle


class TestExtractWindowFeatures:
    def make_channels(self, seconds=120):
        rng = np.random.default_rng(7)
        chans = {
            Channel.ACC_X: series(Channel.ACC_X, 32, rng.normal(0, 0.01, 32 * seconds)),
            Channel.ACC_Y: series(Channel.ACC_Y, 32, rng.normal(0, 0.01, 32 * seconds)),
            Channel.ACC_Z: series(Channel.ACC_Z, 32, 1 + rng.normal(0, 0.01, 32 * seconds)),
            Channel.EDA: series(Channel.EDA, 4, 2 + rng.normal(0, 0.05, 4 * seconds)),
            Channel.TEMP: series(Channel.TEMP, 1, 33 + rng.normal(0, 0.05, seconds)),
            Channel.HR: series(Channel.HR, 1, 70 + rng.normal(0, 2, seconds)),
            Channel.BVP: series(Channel.BVP, 64, np.sin(np.arange(64 * seconds))),
        }
        chans[Channel.ACC_MAG] = series(
            Channel.ACC_MAG,
            32,
            np.sqrt(
                chans[Channel.ACC_X].values ** 2
                + chans[Channel.ACC_Y].values ** 2
                + chans[Channel.ACC_Z].values ** 2
            ),
        )
        return prepare_catalog_channels(chans)

    def test_returns_153_features(self):
        fv = extract_window_features(self.make_channels(), 0)
        assert len(fv.values) == 153
        assert fv.names == tuple(catalog_names())
        assert fv.valid_fraction == pytest.approx(1.0)

    def test_missing_channel_named_in_error(self):
        chans = self.make_channels()
        del chans[Channel.HR]
        with pytest.raises(ValidationError) as err:
            extract_window_features(chans, 0)
        assert "hr" in str(err.value)

    def test_window_past_end_rejected(self):
        chans = self.make_channels(seconds=90)
        with pytest.raises(ValidationError):
            extract_window_features(chans, 60_000)

    def test_valid_fraction_minimum_over_channels(self):
        chans = self.make_channels()
        hr = chans[Channel.HR]
        validity = hr.validity.copy()
        validity[:30] = False  # half of the first minute invalid
        chans[Channel.HR] = SampleSeries(Channel.HR, 1, 0, hr.values, validity)
        fv = extract_window_features(chans, 0)
        assert fv.valid_fraction == pytest.approx(0.5)
        assert not fv.usable


class TestDeriveBiomarkers:
    def test_pulse_rate_from_sine_exact(self):
        rate = 64
        t = np.arange(0, 120, 1 / rate)
        bvp = series(Channel.BVP, rate, np.sin(2 * np.pi * 1.2 * t))
        recs = derive_biomarkers({Channel.BVP: bvp})
        assert len(recs) == 2
        for rec in recs:
            assert rec.pulse_rate_bpm == pytest.approx(72.0)

    def test_constant_ibi_zero_prv(self):
        rate = 64
        t = np.arange(0, 60, 1 / rate)
        bvp = series(Channel.BVP, rate, np.sin(2 * np.pi * 1.0 * t))  # period = 64 samples
        recs = derive_biomarkers({Channel.BVP: bvp})
        assert recs[0].prv_ms == pytest.approx(0.0, abs=1e-9)

    def test_pulse_falls_back_to_hr_mean(self):
        hr = series(Channel.HR, 1, np.full(60, 71.0))
        recs = derive_biomarkers({Channel.HR: hr})
        assert recs[0].pulse_rate_bpm == pytest.approx(71.0)
        assert recs[0].prv_ms is None

    def test_steps_brute_force_peak_scan(self):
        rate = 32
        n = 60 * rate
        vals = np.full(n, 1.0)
        rng = np.random.default_rng(2)
        # 30 well-separated sharp peaks (>= 0.3 s apart by construction: every 2 s)
        peak_idx = (np.arange(30) * 2 * rate + rate).astype(int)
        vals[peak_idx] = 2.0
        acc = series(Channel.ACC_MAG, rate, vals)
        recs = derive_biomarkers({Channel.ACC_MAG: acc})
        assert recs[0].steps == 30
        # brute-force oracle on the same waveform
        m, s = vals.mean(), vals.std()
        last = -10**9
        count = 0
        for i in range(1, n - 1):
            if vals[i] > vals[i - 1] and vals[i] > vals[i + 1] and vals[i] > m + s:
                if i - last >= int(0.3 * rate):
                    count += 1
                    last = i
        assert count == 30

    def test_activity_counts_and_class(self):
        rate = 32
        n = 60 * rate
        vals = np.ones(n)
        vals[100:130] += 0.4  # one 30-sample excursion
        acc = series(Channel.ACC_MAG, rate, vals)
        recs = derive_biomarkers({Channel.ACC_MAG: acc})
        assert recs[0].activity_counts > 10
        assert recs[0].activity_class == ActivityClass.MOVING

    def test_wearing_rule(self):
        temp = series(Channel.TEMP, 1, np.full(60, 33.0))
        eda = series(Channel.EDA, 4, np.full(240, 1.0))
        recs = derive_biomarkers({Channel.TEMP: temp, Channel.EDA: eda})
        assert recs[0].wearing is True
        cold = series(Channel.TEMP, 1, np.full(60, 22.0))
        recs = derive_biomarkers({Channel.TEMP: cold, Channel.EDA: eda})
        assert recs[0].wearing is False

    def test_no_pulse_source_other_fields_emitted(self):
        acc = series(Channel.ACC_MAG, 32, np.ones(32 * 60))
        recs = derive_biomarkers({Channel.ACC_MAG: acc})
        assert recs[0].pulse_rate_bpm is None
        assert recs[0].activity_counts is not None


class TestWindowDataset:
    def test_build_and_roundtrip_csv(self, tmp_path):
        chans = TestExtractWindowFeatures().make_channels(seconds=240)
        labels = [
            LabelInterval(60_000, 120_000, LabelClass.AGITATION, LabelSource.NURSE_NOTE)
        ]
        ds = build_window_dataset(chans, labels, 0, 240_000)
        assert len(ds.rows) == 4
        assert list(ds.labels) == ["normal", "agitation", "normal", "normal"]
        path = tmp_path / "features.csv"
        ds.write_csv(str(path))
        back = type(ds).read_csv(str(path))
        assert back.schema == ds.schema
        assert np.allclose(back.rows, ds.rows, rtol=1e-8)
        assert list(back.labels) == list(ds.labels)


class TestBiomarkerAppend:
    def test_flag_appends_bm_columns(self):
        chans = TestExtractWindowFeatures().make_channels(seconds=180)
        ds = build_window_dataset(chans, [], 0, 180_000, include_biomarkers=True)
        assert len(ds.schema) == 153 + 6
        assert ds.schema[-6].startswith("bm.")
        assert ds.rows.shape[1] == 159
        # default off keeps the canonical schema
        base = build_window_dataset(chans, [], 0, 180_000)
        assert len(base.schema) == 153
