import math

import numpy as np
import pytest

from platepool.synthetic import (Dataset, DatasetConfig, OracleConfig,
                                 PlateGeometry, deflection_field,
                                 generate_dataset, load_dataset, save_dataset,
                                 strain_oracle)


class TestDeflectionField:
    def test_center_equals_amplitude(self):
        geom = PlateGeometry(a=3200.0, b=800.0, t=15.0)
        assert deflection_field(1600.0, 400.0, geom, 5.0) == pytest.approx(5.0, abs=1e-12)

    def test_clamped_edges(self):
        geom = PlateGeometry()
        assert deflection_field(0.0, 123.0, geom, 5.0) == pytest.approx(0.0, abs=1e-12)
        assert deflection_field(500.0, geom.b, geom, 5.0) == pytest.approx(0.0, abs=1e-10)

    def test_quarter_point(self):
        geom = PlateGeometry()
        expected = 4.0 * math.sqrt(2.0) / 2.0
        assert deflection_field(geom.a / 4.0, geom.b / 2.0, geom, 4.0) == pytest.approx(expected, abs=1e-7)

    def test_out_of_range_rejected(self):
        geom = PlateGeometry()
        with pytest.raises(ValueError):
            deflection_field(-1.0, 10.0, geom, 1.0)
        with pytest.raises(ValueError):
            deflection_field(10.0, geom.b + 1.0, geom, 1.0)
        with pytest.raises(ValueError):
            deflection_field(10.0, 10.0, geom, -1.0)

    def test_geometry_invariants(self):
        with pytest.raises(ValueError):
            PlateGeometry(a=100.0, b=200.0, t=10.0)
        with pytest.raises(ValueError):
            PlateGeometry(a=100.0, b=50.0, t=0.0)


class TestStrainOracle:
    def test_zero_deflection_gives_baseline(self):
        cfg = OracleConfig(eps0=-50.0, kappa1=25.0, kappa2=1.5)
        assert strain_oracle(0.0, cfg) == pytest.approx(-50.0, abs=1e-12)

    def test_default_polynomial_at_four(self):
        # -50 + 25*4 + 1.5*16 = 74
        assert strain_oracle(4.0, OracleConfig()) == pytest.approx(74.0, abs=1e-12)

    def test_monotone_for_positive_coefficients(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            cfg = OracleConfig(eps0=rng.normal(scale=40.0),
                               kappa1=rng.uniform(1.0, 50.0),
                               kappa2=rng.uniform(0.0, 5.0))
            assert strain_oracle(8.0, cfg) > strain_oracle(4.0, cfg)

    def test_negative_amplitude_rejected(self):
        with pytest.raises(ValueError):
            strain_oracle(-0.1, OracleConfig())


class TestGenerateDataset:
    def test_default_observation_count(self, default_dataset):
        assert default_dataset.total_obs == 102
        assert default_dataset.obs_counts == (20, 20, 20, 20, 20, 2)
        assert default_dataset.n_plates == 6

    def test_determinism(self):
        a = generate_dataset(DatasetConfig(), seed=7)
        b = generate_dataset(DatasetConfig(), seed=7)
        for k in range(a.n_plates):
            assert np.array_equal(a.amplitudes[k], b.amplitudes[k])
            assert np.array_equal(a.strains[k], b.strains[k])
        assert a.ground_truth == b.ground_truth

    def test_different_seeds_differ(self):
        a = generate_dataset(DatasetConfig(), seed=7)
        b = generate_dataset(DatasetConfig(), seed=8)
        assert not np.allclose(a.amplitudes[0], b.amplitudes[0])

    def test_noise_free_linear_case_is_affine(self):
        cfg = DatasetConfig(
            noise_std=1e-12,
            oracle=OracleConfig(eps0=-50.0, kappa1=25.0, kappa2=0.0),
        )
        ds = generate_dataset(cfg, seed=3)
        w = np.concatenate(ds.amplitudes)
        e = np.concatenate(ds.strains)
        design = np.column_stack([np.ones_like(w), w])
        coef, *_ = np.linalg.lstsq(design, e, rcond=None)
        resid = e - design @ coef
        assert np.max(np.abs(resid)) < 1e-9

    def test_all_amplitudes_non_negative(self):
        # stress the truncation with a low mean relative to its spread
        cfg = DatasetConfig(mu_mu=0.8, sigma_mu=0.5, mu_sigma=0.6, sigma_sigma=0.3)
        ds = generate_dataset(cfg, seed=21)
        assert all(np.all(a >= 0.0) for a in ds.amplitudes)
        assert all(s > 0.0 for s in ds.ground_truth.plate_stds)
        assert all(m > 0.0 for m in ds.ground_truth.plate_means)

    def test_per_plate_mean_statistical_sanity(self):
        cfg = DatasetConfig(n_plates=3, obs_counts=(10_000, 10_000, 10_000))
        ds = generate_dataset(cfg, seed=17)
        for k in range(3):
            mu_k = ds.ground_truth.plate_means[k]
            sigma_k = ds.ground_truth.plate_stds[k]
            bound = 3.0 * sigma_k / math.sqrt(10_000)
            assert abs(ds.amplitudes[k].mean() - mu_k) < bound

    def test_small_config(self):
        ds = generate_dataset(DatasetConfig(n_plates=1, obs_counts=(5,)), seed=1)
        assert ds.total_obs == 5

    def test_config_errors(self):
        with pytest.raises(ValueError):
            DatasetConfig(n_plates=0, obs_counts=())
        with pytest.raises(ValueError):
            DatasetConfig(n_plates=2, obs_counts=(5, 0))
        with pytest.raises(ValueError):
            DatasetConfig(obs_counts=(20,) * 5)  # length mismatch


class TestDatasetIO:
    def test_round_trip(self, tmp_path, default_dataset):
        csv_path = tmp_path / "dataset.csv"
        meta_path = tmp_path / "dataset_meta.json"
        save_dataset(default_dataset, csv_path, meta_path, DatasetConfig())
        loaded = load_dataset(csv_path, meta_path)
        assert loaded.obs_counts == default_dataset.obs_counts
        for k in range(default_dataset.n_plates):
            np.testing.assert_allclose(loaded.amplitudes[k], default_dataset.amplitudes[k], rtol=1e-8)
            np.testing.assert_allclose(loaded.strains[k], default_dataset.strains[k], rtol=1e-8)
        assert loaded.ground_truth.plate_means == pytest.approx(default_dataset.ground_truth.plate_means)

    def test_rewrite_is_byte_identical(self, tmp_path, default_dataset):
        p1, m1 = tmp_path / "a.csv", tmp_path / "a.json"
        p2, m2 = tmp_path / "b.csv", tmp_path / "b.json"
        save_dataset(default_dataset, p1, m1, DatasetConfig())
        save_dataset(load_dataset(p1, m1), p2, m2, DatasetConfig())
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_and_row_count(self, tmp_path, default_dataset):
        csv_path = tmp_path / "d.csv"
        save_dataset(default_dataset, csv_path, tmp_path / "m.json")
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "plate_index,obs_index,amplitude_mm,strain_microeps"
        assert len(lines) == 1 + 102

    def test_ground_truth_not_needed_by_inference(self, default_dataset, surrogates):
        # the model layer accepts bare strain arrays: no Dataset attributes
        # beyond the observations are ever touched
        from platepool.model import build_hierarchical_spec, log_posterior

        strains_only = [np.array(s) for s in default_dataset.strains]
        spec_a = build_hierarchical_spec(strains_only, surrogates)
        spec_b = build_hierarchical_spec(default_dataset, surrogates)
        theta = np.zeros(spec_a.dim)
        assert log_posterior(theta, spec_a).logp == pytest.approx(
            log_posterior(theta, spec_b).logp, rel=1e-15
        )
