import hashlib
import json

import numpy as np
import pytest

from voxmix import cli, kem, metrics
from voxmix.volume import Volume3D, load_labels, load_volume, store_volume

DIMS = ("24", "24", "24")


def file_digests(directory):
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(directory.iterdir())
        if p.is_file()
    }


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("phantom")
    assert cli.main(["phantom", "--out-dir", str(d), "--dims", *DIMS, "--seed", "5"]) == 0
    return d


@pytest.fixture(scope="module")
def fit_dir(tmp_path_factory, phantom_dir):
    d = tmp_path_factory.mktemp("fit")
    code = cli.main([
        "fit", "--input", str(phantom_dir), "--out-dir", str(d),
        "--r", "0.9", "--seed", "5", "--max-iter", "5", "--filter-size", "3",
        "--truth-dir", str(phantom_dir),
    ])
    assert code == 0
    return d


class TestPhantomCommand:
    def test_emits_volume_labels_and_truth_manifest(self, phantom_dir):
        names = {p.name for p in phantom_dir.iterdir()}
        expected = {"volume", "labels", "geometry"} | {
            f"truth_{field}_{m}" for field in ("pi", "mu", "sigma") for m in (1, 2, 3)
        }
        for stem in expected:
            assert f"{stem}.json" in names
            assert f"{stem}.raw" in names
        manifest = json.loads((phantom_dir / "phantom.json").read_text())
        assert manifest["dims"] == [24, 24, 24]
        assert manifest["seed"] == 5
        assert manifest["M"] == 3

    def test_fixed_seed_reproduces_bytes(self, tmp_path, phantom_dir):
        again = tmp_path / "again"
        assert cli.main(
            ["phantom", "--out-dir", str(again), "--dims", *DIMS, "--seed", "5"]
        ) == 0
        assert file_digests(again) == file_digests(phantom_dir)

    def test_seed_changes_volume(self, tmp_path, phantom_dir):
        other = tmp_path / "other"
        assert cli.main(
            ["phantom", "--out-dir", str(other), "--dims", *DIMS, "--seed", "6"]
        ) == 0
        a = (other / "volume.raw").read_bytes()
        b = (phantom_dir / "volume.raw").read_bytes()
        assert a != b

    def test_invalid_dims_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["phantom", "--out-dir", str(tmp_path), "--dims", "0", "8", "8"])
        assert exc.value.code == 2


class TestFitCommand:
    def test_emits_fields_labels_posteriors(self, fit_dir):
        names = {p.name for p in fit_dir.iterdir()}
        for field in ("pi", "mu", "sigma", "posterior"):
            for m in (1, 2, 3):
                assert f"{field}_{m}.kvol".replace(".kvol", ".raw") in names
        assert "labels.raw" in names
        assert "fit.json" in names

    def test_emitted_priors_sum_to_one(self, fit_dir):
        total = sum(load_volume(fit_dir / f"pi_{m}.kvol").data for m in (1, 2, 3))
        np.testing.assert_allclose(total, 1.0, atol=1e-6)

    def test_emitted_posteriors_sum_to_one(self, fit_dir):
        total = sum(load_volume(fit_dir / f"posterior_{m}.kvol").data for m in (1, 2, 3))
        np.testing.assert_allclose(total, 1.0, atol=1e-6)

    def test_fit_json_records_run(self, fit_dir):
        info = json.loads((fit_dir / "fit.json").read_text())
        assert info["M"] == 3
        assert info["iterations"] == 5
        assert info["s"] % 2 == 1
        n_sampled = round(0.9 * 24**3)
        assert info["h"] == pytest.approx(info["Ch"] * n_sampled ** (-1 / 7), rel=1e-9)

    def test_truth_dir_adds_report_row(self, fit_dir):
        rows = metrics.read_reports(fit_dir / "results.csv")
        assert len(rows) == 1
        assert rows[0].method == "kem"
        assert rows[0].Ch is not None
        assert 0.0 <= rows[0].accuracy <= 1.0

    def test_refit_reproduces_field_bytes(self, tmp_path, phantom_dir, fit_dir):
        again = tmp_path / "again"
        code = cli.main([
            "fit", "--input", str(phantom_dir), "--out-dir", str(again),
            "--r", "0.9", "--seed", "5", "--max-iter", "5", "--filter-size", "3",
        ])
        assert code == 0
        for name in ("pi_1.raw", "mu_2.raw", "sigma_3.raw", "labels.raw"):
            assert (again / name).read_bytes() == (fit_dir / name).read_bytes()

    def test_missing_input_is_runtime_error(self, tmp_path):
        code = cli.main([
            "fit", "--input", str(tmp_path / "nope.kvol"), "--out-dir", str(tmp_path)
        ])
        assert code == 1


class TestBandwidthCommand:
    def run(self, phantom_dir, tmp_path, method):
        d = tmp_path / method
        code = cli.main([
            "bandwidth", "--input", str(phantom_dir), "--out-dir", str(d),
            "--method", method, "--r", "0.5", "--seed", "5", "--max-iter", "2",
        ])
        assert code == 0
        return json.loads((d / "bandwidth.json").read_text())

    def test_reg_emits_five_pilots(self, phantom_dir, tmp_path):
        sel = self.run(phantom_dir, tmp_path, "reg")
        assert sel["method"] == "REG"
        assert len(sel["pilots"]) == 5
        assert [p["s"] for p in sel["pilots"]] == [3, 5, 7, 9, 11]

    def test_cv_emits_twenty_five_pilots(self, phantom_dir, tmp_path):
        sel = self.run(phantom_dir, tmp_path, "cv")
        assert sel["method"] == "CV"
        assert len(sel["pilots"]) == 25

    def test_selected_triplet_is_consistent(self, phantom_dir, tmp_path):
        sel = self.run(phantom_dir, tmp_path, "cv")
        chosen = sel["selected"]
        assert chosen["s"] % 2 == 1
        assert chosen["h"] == pytest.approx(chosen["Ch"] * sel["N"] ** (-1 / 7), rel=1e-9)
        spes = [p["spe"] for p in sel["pilots"]]
        winners = [p for p, s in zip(sel["pilots"], spes) if s == min(spes)]
        assert any(p["Ch"] == chosen["Ch"] for p in winners)


class TestEvaluateCommand:
    @pytest.fixture(scope="class")
    def results(self, tmp_path_factory, phantom_dir):
        d = tmp_path_factory.mktemp("evaluate")
        code = cli.main([
            "evaluate", "--input", str(phantom_dir), "--out-dir", str(d),
            "--r", "0.5", "--seed", "5", "--max-iter", "2",
        ])
        assert code == 0
        return d / "results.csv"

    def test_four_rows_per_run(self, results):
        rows = metrics.read_reports(results)
        assert [r.method for r in rows] == ["kem-cv", "kem-reg", "kmeans", "gmm"]

    def test_kem_rows_carry_bandwidth_constant(self, results):
        rows = {r.method: r for r in metrics.read_reports(results)}
        assert rows["kem-cv"].Ch is not None
        assert rows["kem-reg"].Ch is not None
        assert rows["kmeans"].Ch is None
        assert rows["gmm"].Ch is None

    def test_blank_column_in_raw_csv(self, results):
        lines = results.read_text().splitlines()
        kmeans_line = next(line for line in lines if line.startswith("kmeans"))
        assert kmeans_line.split(",")[2] == ""

    def test_input_must_be_directory(self, tmp_path, phantom_dir):
        code = cli.main([
            "evaluate", "--input", str(phantom_dir / "volume.kvol"),
            "--out-dir", str(tmp_path),
        ])
        assert code == 1


class TestExportPosteriorCommand:
    def test_round_trip_matches_in_memory(self, tmp_path, phantom_dir, fit_dir):
        out = tmp_path / "post"
        code = cli.main([
            "export-posterior", "--input", str(phantom_dir), "--out-dir", str(out),
            "--fields-dir", str(fit_dir), "--class-index", "2",
        ])
        assert code == 0
        v = load_volume(phantom_dir / "volume.kvol")
        theta = cli._load_fitted_theta(fit_dir, v.dims)
        expected = kem.posterior_volume(v, theta, 2)
        reloaded = load_volume(out / "posterior_2.kvol")
        np.testing.assert_allclose(reloaded.data, expected.data, atol=1e-6)

    def test_denormalizes_to_original_range(self, tmp_path, phantom_dir, fit_dir):
        lo, hi = -1000.0, 400.0
        v = load_volume(phantom_dir / "volume.kvol")
        store_volume(
            Volume3D(v.dims, v.data, value_range=(lo, hi)), tmp_path / "scan.kvol"
        )
        out = tmp_path / "post"
        code = cli.main([
            "export-posterior", "--input", str(tmp_path / "scan.kvol"),
            "--out-dir", str(out), "--fields-dir", str(fit_dir), "--class-index", "1",
        ])
        assert code == 0
        exported = load_volume(out / "posterior_1.kvol")
        assert exported.value_range == (lo, hi)
        assert exported.data.min() >= lo - 1e-3
        assert exported.data.max() <= hi + 1e-3

    def test_class_index_out_of_range(self, tmp_path, phantom_dir, fit_dir):
        code = cli.main([
            "export-posterior", "--input", str(phantom_dir), "--out-dir", str(tmp_path),
            "--fields-dir", str(fit_dir), "--class-index", "9",
        ])
        assert code == 1


class TestBaselineCommand:
    def test_emits_parameter_json_and_labels(self, tmp_path, phantom_dir):
        out = tmp_path / "bl"
        code = cli.main([
            "baseline", "--input", str(phantom_dir), "--out-dir", str(out), "--seed", "5"
        ])
        assert code == 0
        km = json.loads((out / "kmeans.json").read_text())
        gm = json.loads((out / "gmm.json").read_text())
        for payload in (km, gm):
            assert payload["M"] == 3
            assert len(payload["mu"]) == 3
            assert payload["mu"] == sorted(payload["mu"])
        assert load_labels(out / "kmeans_labels.kvol").labels.min() >= 1
        assert load_labels(out / "gmm_labels.kvol").labels.max() <= 3


class TestConfigFile:
    def test_file_underlies_flags(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"seed": 7, "dims": [12, 12, 12]}))
        out = tmp_path / "out"
        code = cli.main(
            ["--config", str(cfg), "phantom", "--out-dir", str(out), "--seed", "9"]
        )
        assert code == 0
        manifest = json.loads((out / "phantom.json").read_text())
        assert manifest["seed"] == 9
        assert manifest["dims"] == [12, 12, 12]

    def test_unknown_key_is_usage_error(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"bandwith": 0.1}))
        with pytest.raises(SystemExit) as exc:
            cli.main(["--config", str(cfg), "phantom", "--out-dir", str(tmp_path)])
        assert exc.value.code == 2

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2
