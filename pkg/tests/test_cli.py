"""CLI contract: subcommand wiring and the exit-code mapping."""

import os

import pytest

from dualkd.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from dualkd.config import ExperimentConfig, save_config
from dualkd.data import DatasetSpec, DefectParams
from dualkd.errors import NumericError
from dualkd.nets import ViTConfig

NET = dict(image_size=16, patch_size=4, embed_dim=8, depth=10, num_heads=2,
           mlp_ratio=2.0, residual_scale=0.2)


@pytest.fixture
def cfg_file(tmp_path):
    cfg = ExperimentConfig(
        teacher=ViTConfig(**NET, seed=0),
        encoder=ViTConfig(**NET, seed=1),
        decoder=ViTConfig(**{**NET, "depth": 8}, has_class_token=False,
                          seed=2),
        dataset=DatasetSpec(kind="structural", num_classes=2,
                            normal_class_ids=(0, 1), samples_per_class=6,
                            test_normals_per_class=3,
                            test_anomalies_per_class=3, image_size=16,
                            defect=DefectParams(size_range=(3, 6)), seed=5),
        iterations=2, batch_size=4, checkpoint_every=500,
        out_dir=str(tmp_path / "run"))
    path = tmp_path / "exp.cfg"
    save_config(cfg, str(path))
    return str(path)


class TestHappyPaths:
    def test_train_then_eval_then_report(self, tmp_path, cfg_file, capsys):
        assert main(["train", "--config", cfg_file]) == EXIT_OK
        assert "iteration 2" in capsys.readouterr().out
        assert main(["eval", "--config", cfg_file]) == EXIT_OK
        out = capsys.readouterr().out
        assert "mean auroc:" in out
        eval_dir = str(tmp_path / "run" / "eval")
        assert os.path.exists(os.path.join(eval_dir, "report.json"))
        assert main(["report", "--dir", eval_dir,
                     "--formats", "histogram"]) == EXIT_OK
        assert os.path.exists(os.path.join(eval_dir, "hist_all.png"))

    def test_synth_writes_folder_dataset(self, tmp_path, cfg_file, capsys):
        assert main(["synth", "--config", cfg_file]) == EXIT_OK
        root = tmp_path / "run" / "dataset"
        assert (root / "manifest.csv").exists()
        assert "wrote" in capsys.readouterr().out

    def test_out_flag_overrides_config(self, tmp_path, cfg_file):
        override = tmp_path / "elsewhere"
        assert main(["train", "--config", cfg_file,
                     "--out", str(override)]) == EXIT_OK
        assert (override / "all" / "losses.csv").exists()

    def test_eval_variant_and_fusion_flags(self, tmp_path, cfg_file):
        assert main(["train", "--config", cfg_file]) == EXIT_OK
        assert main(["eval", "--config", cfg_file, "--variant", "mean_prefix",
                     "--fusion", "plain_sum"]) == EXIT_OK

    def test_fewshot_sweep(self, tmp_path, cfg_file, capsys):
        assert main(["fewshot", "--config", cfg_file,
                     "--shots", "1,2"]) == EXIT_OK
        assert "shots 2" in capsys.readouterr().out
        assert (tmp_path / "run" / "fewshot.csv").exists()


class TestExitCodes:
    def test_usage_error_is_one_not_two(self):
        assert main(["eval"]) == EXIT_USAGE            # missing --config
        assert main(["bogus"]) == EXIT_USAGE           # unknown subcommand
        assert main([]) == EXIT_USAGE                  # no subcommand

    def test_missing_config_file(self):
        assert main(["train", "--config", "/no/such.cfg"]) == EXIT_USAGE

    def test_eval_before_train_is_usage_error(self, cfg_file):
        assert main(["eval", "--config", cfg_file]) == EXIT_USAGE

    def test_bad_shots_value(self, cfg_file):
        assert main(["fewshot", "--config", cfg_file,
                     "--shots", "x"]) == EXIT_USAGE

    def test_report_without_artifacts(self, tmp_path):
        assert main(["report", "--dir", str(tmp_path)]) == EXIT_USAGE

    def test_unknown_report_format(self, tmp_path, cfg_file):
        main(["train", "--config", cfg_file])
        main(["eval", "--config", cfg_file])
        assert main(["report", "--dir", str(tmp_path / "run" / "eval"),
                     "--formats", "pdf"]) == EXIT_USAGE

    def test_data_error_is_two(self, tmp_path):
        # folder dataset with an empty root fails during loading
        empty = tmp_path / "empty"
        empty.mkdir()
        cfg = ExperimentConfig(
            dataset=DatasetSpec(kind="folder", root=str(empty)),
            iterations=1, out_dir=str(tmp_path / "run"))
        path = tmp_path / "folder.cfg"
        save_config(cfg, str(path))
        assert main(["train", "--config", str(path)]) == EXIT_DATA

    def test_numeric_error_is_three(self, cfg_file, monkeypatch):
        import dualkd.cli as cli_mod

        def explode(cfg, resume=False):
            raise NumericError("loss diverged at iteration 1")

        monkeypatch.setattr(cli_mod, "train", explode)
        assert main(["train", "--config", cfg_file]) == EXIT_NUMERIC

    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
