import csv
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from meshatlas.cli import CliError, displacement_colors, interpolation_grid, main, manifest_name
from meshatlas.config import OUT_ENV, ExperimentConfig, config_from_dict, load_config
from meshatlas.mesh import load_mesh

TINY = {
    "data": {"cases": 16, "levels": 2, "base_subdivisions": 0},
    "arch": {"width": 8, "latent_channels": 2, "res_blocks": 1, "fc_hidden": [16, 8], "fc_latent": 4},
    "train": {"max_epochs": 25, "patience": 25, "batch_size": 8},
    "pca_k": 5,
}


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def mean_mae(path):
    with open(path) as f:
        return float(np.mean([float(r["mae_mm"]) for r in csv.DictReader(f)]))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    common = ["--config", cfg, "--out", root / "out", "--seed", 7]
    run("gen-data", *common)
    run("train", *common, "--model", "proposed")
    run("train", *common, "--model", "pca")
    return root / "out", common


class TestPipeline:
    def test_gen_data(self, workspace):
        out, _ = workspace
        assert len(list((out / "cohort" / "cases").glob("*.off"))) == 16
        assert load_mesh(out / "hierarchy" / "level_0.off").n_vertices == 12
        assert load_mesh(out / "hierarchy" / "level_1.off").n_vertices == 42

    def test_train_outputs(self, workspace):
        ck = workspace[0] / "checkpoints"
        assert (ck / "proposed.ckpt").exists() and (ck / "pca.ckpt").exists()
        lines = (ck / "proposed_loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_kl,train_recon,val_recon"
        assert len(lines) == 26

    def test_retrain_is_bitwise_identical(self, workspace):
        out, common = workspace
        ck = out / "checkpoints"
        before = (ck / "proposed_loss.csv").read_bytes(), (ck / "proposed.ckpt").read_bytes()
        run("train", *common, "--model", "proposed")
        assert ((ck / "proposed_loss.csv").read_bytes(), (ck / "proposed.ckpt").read_bytes()) == before

    @pytest.mark.parametrize("model", ["proposed", "pca"])
    def test_eval(self, workspace, model):
        out, common = workspace
        run("eval", *common, "--model", model)
        reports = out / "reports"
        for split in ("train", "validation", "test"):
            rows = list(csv.DictReader(open(reports / f"eval_{model}_{split}.csv")))
            assert rows and all(float(r["md_mm"]) <= float(r["hd_mm"]) for r in rows)
        table = (reports / f"table_{model}.csv").read_text().splitlines()
        assert table[1].startswith(model + ",")

    def test_trained_beats_untrained(self, workspace, tmp_path):
        out, common = workspace
        run("eval", *common, "--model", "proposed", "--no-surface")
        trained = mean_mae(out / "reports" / "eval_proposed_test.csv")
        # point a second root at the same cohort, train for zero epochs
        cfg = dict(TINY, paths={"root": str(tmp_path), "cohort": str(out / "cohort"), "hierarchy": str(out / "hierarchy")})
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
        run("train", "--config", tmp_path / "c.yaml", "--seed", 7, "--model", "proposed", "--epochs", 0)
        run("eval", "--config", tmp_path / "c.yaml", "--seed", 7, "--model", "proposed", "--no-surface")
        untrained = mean_mae(tmp_path / "reports" / "eval_proposed_test.csv")
        assert untrained > trained

    def test_reconstruct(self, workspace):
        out, common = workspace
        run("reconstruct", *common, "--model", "proposed", "--case", "case000", "--case", "case001")
        d = out / "reports" / "reconstruct" / "proposed"
        assert sorted(p.name for p in d.iterdir() if p.suffix != ".yaml") == ["case000.off", "case000_error.ply", "case001.off", "case001_error.ply"]
        text = (d / "case000_error.ply").read_text()
        assert "property uchar red" in text

    @pytest.mark.parametrize("flags,count", [(["--alpha-only"], 5), (["--beta-only"], 5), ([], 25)])
    def test_interpolate(self, workspace, flags, count):
        out, common = workspace
        run("interpolate", *common, "--model", "proposed", "--case-a", "case000", "--case-b", "case001", "--steps", 4, *flags)
        d = out / "reports" / "interpolate" / "proposed_case000_case001"
        rows = list(csv.DictReader(open(d / "grid.csv")))
        assert len(rows) == count
        assert all((d / r["off"]).exists() and (d / r["ply"]).exists() for r in rows)

    def test_latent_scatter(self, workspace):
        out, common = workspace
        run("latent-scatter", *common, "--model", "proposed")
        lines = (out / "reports" / "latent_scatter_proposed.csv").read_text().splitlines()
        assert lines[0] == "case_id,split,level_0,level_1"
        assert len(lines) == 17

    def test_manifest(self, workspace):
        out, _ = workspace
        m = yaml.safe_load((out / "checkpoints" / "manifest_train_proposed.yaml").read_text())
        assert m["command"] == "train" and m["seed"] == 7
        assert set(m["versions"]) >= {"meshatlas", "numpy", "python"}
        assert m["config"]["arch"]["width"] == 8
        assert any(o.endswith("proposed.ckpt") for o in m["outputs"])

    def test_manifest_replays(self, workspace):
        out, _ = workspace
        manifest = out / "checkpoints" / "manifest_train_proposed.yaml"
        before = (out / "checkpoints" / "proposed.ckpt").read_bytes()
        run("train", "--config", manifest)
        assert (out / "checkpoints" / "proposed.ckpt").read_bytes() == before


class TestErrors:
    def expect_failure(self, capsys, *argv):
        assert main([str(a) for a in argv]) == 1
        err = capsys.readouterr().err
        assert err.count("\n") == 1 and err.startswith(f"meshatlas {argv[0]}: error:")
        return err

    def test_missing_cohort(self, tmp_path, capsys):
        err = self.expect_failure(capsys, "train", "--out", tmp_path)
        assert "run gen-data first" in err

    def test_missing_checkpoint(self, workspace, capsys):
        out, common = workspace
        err = self.expect_failure(capsys, "eval", *common, "--model", "gcn")
        assert "no checkpoint" in err

    def test_checkpoint_model_mismatch(self, workspace, capsys):
        out, common = workspace
        ck = out / "checkpoints"
        (ck / "pooling.ckpt").write_bytes((ck / "proposed.ckpt").read_bytes())
        try:
            err = self.expect_failure(capsys, "eval", *common, "--model", "pooling")
        finally:
            (ck / "pooling.ckpt").unlink()
        assert "does not hold a pooling model" in err

    def test_missing_config(self, tmp_path, capsys):
        self.expect_failure(capsys, "gen-data", "--config", tmp_path / "nope.yaml")

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.yaml").write_text("train:\n  epochs: 3\n")
        err = self.expect_failure(capsys, "gen-data", "--config", tmp_path / "c.yaml")
        assert "unknown keys ['epochs']" in err

    def test_unknown_case(self, workspace, capsys):
        out, common = workspace
        self.expect_failure(capsys, "interpolate", *common, "--model", "proposed", "--case-a", "zzz")

    def test_pca_interpolation_needs_ten_modes(self, workspace, capsys):
        out, common = workspace
        err = self.expect_failure(capsys, "interpolate", *common, "--model", "pca", "--steps", 2)
        assert "ValueError" in err

    def test_scatter_needs_neural_model(self, workspace, capsys):
        out, common = workspace
        self.expect_failure(capsys, "latent-scatter", *common, "--model", "pca")

    def test_bad_model_choice(self):
        with pytest.raises(SystemExit):
            main(["train", "--model", "transformer"])


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.data.cases, cfg.data.levels, cfg.data.base_subdivisions) == (124, 3, 1)
        assert cfg.train.max_epochs == 1000 and cfg.train.patience == 50

    def test_round_trip(self, tmp_path):
        cfg = config_from_dict(TINY)
        (tmp_path / "c.yaml").write_text(cfg.dump())
        assert load_config(tmp_path / "c.yaml").to_dict() == cfg.to_dict()

    def test_nested_unknown_key(self):
        with pytest.raises(ValueError, match=r"data\.deform: unknown keys"):
            config_from_dict({"data": {"deform": {"wobble": 1}}})

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            config_from_dict({"model": "transformer"})

    def test_env_out_root(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUT_ENV, str(tmp_path))
        assert ExperimentConfig().paths.resolve("cohort") == tmp_path / "cohort"

    def test_env_used_by_cli(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUT_ENV, str(tmp_path))
        run("build-hierarchy", "--levels", 2, "--base-subdivisions", 0)
        assert (tmp_path / "hierarchy" / "level_1.off").exists()
        assert (tmp_path / "hierarchy" / "manifest_build-hierarchy.yaml").exists()

    def test_default_hierarchy_sizes(self, tmp_path):
        run("build-hierarchy", "--out", tmp_path)
        sizes = [load_mesh(tmp_path / "hierarchy" / f"level_{i}.off").n_vertices for i in range(3)]
        assert sizes == [42, 162, 642]

    @pytest.mark.parametrize(
        "command,model,name",
        [("gen-data", "proposed", "manifest_gen-data.yaml"), ("eval", "pca", "manifest_eval_pca.yaml")],
    )
    def test_manifest_name(self, command, model, name):
        assert manifest_name(command, ExperimentConfig(model=model)) == name


class TestHelpers:
    def test_grid_orders(self):
        assert interpolation_grid(2, alpha_only=True) == [(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)]
        assert interpolation_grid(2, beta_only=True) == [(0.0, 0.0), (0.0, 0.5), (0.0, 1.0)]
        full = interpolation_grid(2)
        assert len(full) == 9 and full[1] == (0.5, 0.0) and full[3] == (0.0, 0.5)

    def test_grid_needs_steps(self):
        with pytest.raises(CliError):
            interpolation_grid(0)

    def test_displacement_colors(self):
        ref = np.zeros((2, 3))
        shape = np.array([[1.0, 0.0, -2.0], [-1.0, 0.0, 2.0]])
        (c,) = displacement_colors([shape], ref)
        # d_max = 2, channel = clamp(1/2 + d/4) * 255
        np.testing.assert_array_equal(c, [[191, 128, 0], [64, 128, 255]])

    def test_displacement_ignores_translation(self):
        ref = np.random.default_rng(0).normal(size=(5, 3))
        shape = ref + 0.1 * np.random.default_rng(1).normal(size=(5, 3))
        a = displacement_colors([shape], ref)[0]
        b = displacement_colors([shape + [10.0, -3.0, 2.0]], ref)[0]
        np.testing.assert_array_equal(a, b)


def test_module_entry_point(tmp_path):
    env = dict(os.environ, **{OUT_ENV: str(tmp_path)})
    r = subprocess.run(
        [sys.executable, "-m", "meshatlas", "build-hierarchy", "--levels", "2", "--base-subdivisions", "0", "--deterministic"],
        capture_output=True, text=True, env=env,
    )
    assert r.returncode == 0, r.stderr
    m = yaml.safe_load((tmp_path / "hierarchy" / "manifest_build-hierarchy.yaml").read_text())
    assert m["threads"]["OMP_NUM_THREADS"] == "1"
