import csv
import json

import pytest
import yaml

from jointscan.cli import main
from jointscan.config import (
    ExperimentConfig,
    build_config,
    derive_seed,
    load_config,
    resolved_config_yaml,
)
from jointscan.errors import ConfigurationError


class TestConfig:
    def test_defaults_validate(self):
        config = load_config()
        config.validate()
        assert config.model.encoder_spec().feature_dim == 64  # small-cnn width
        assert config.crop.model_input_px == 64
        assert config.data.n_folds == 5

    def test_yaml_file(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(
            yaml.safe_dump(
                {
                    "run_id": "full",
                    "model": {"backbone": "resnet18"},
                    "crop": {"patch_size_px": 64, "model_input_px": 224},
                    "finetune": {"train": {"epochs": 3}},
                }
            )
        )
        config = load_config(path)
        assert config.run_id == "full"
        assert config.model.encoder_spec().feature_dim == 512
        assert config.crop.model_input_px == 224
        assert config.finetune.train.epochs == 3
        # untouched sections keep their defaults
        assert config.finetune.train.learning_rate == 1e-4
        assert config.eval.threshold == 0.5

    def test_set_overrides(self):
        config = load_config(
            overrides=[
                "seed=42",
                "finetune.train.epochs=7",
                "pretrain.distill.n_prototypes=32",
                "synth.image_size=[64, 64]",
                "eval.variants=[ours, no_focal]",
            ]
        )
        assert config.seed == 42
        assert config.finetune.train.epochs == 7
        assert config.pretrain.distill.n_prototypes == 32
        assert config.synth.image_size == (64, 64)
        assert config.eval.variants == ("ours", "no_focal")

    def test_override_beats_file(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("seed: 1\n")
        config = load_config(path, overrides=["seed=2"])
        assert config.seed == 2

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown"):
            load_config(overrides=["mystery.key=1"])
        with pytest.raises(ConfigurationError, match="unknown"):
            load_config(overrides=["model.hidden_size=99"])
        with pytest.raises(ConfigurationError, match="unknown"):
            build_config({"typo_section": {}})

    def test_malformed_override_rejected(self):
        with pytest.raises(ConfigurationError):
            load_config(overrides=["no_equals_sign"])
        with pytest.raises(ConfigurationError):
            load_config(overrides=["a..b=1"])

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigurationError):
            load_config(overrides=["data.n_folds=1"])
        with pytest.raises(ConfigurationError):
            load_config(overrides=["eval.threshold=1.5"])
        with pytest.raises(ConfigurationError):
            load_config(overrides=["model.backbone=vgg"])

    def test_resolved_yaml_round_trips(self):
        config = load_config(overrides=["seed=3", "model.ffn_dim=32"])
        text = resolved_config_yaml(config)
        rebuilt = build_config(yaml.safe_load(text))
        assert rebuilt == config

    def test_derive_seed_separates_stages(self):
        seeds = {stage: derive_seed(0, stage) for stage in ("synth", "folds", "pretrain", "finetune", "eval")}
        assert len(set(seeds.values())) == len(seeds)
        assert derive_seed(0, "folds") == seeds["folds"]
        assert derive_seed(1, "folds") != seeds["folds"]
        with pytest.raises(ConfigurationError):
            derive_seed(0, "unknown_stage")

    def test_defaults_are_frozen(self):
        config = ExperimentConfig()
        with pytest.raises(AttributeError):
            config.seed = 5  # type: ignore[misc]


TINY_OVERRIDES = [
    "--set", "synth.n_patients=6",
    "--set", "synth.images_per_patient=1",
    "--set", "synth.image_size=[64, 64]",
    "--set", "synth.prevalence=0.3",
    "--set", "synth.marker_radius_px=3",
    "--set", "data.n_folds=2",
    "--set", "crop.patch_size_px=16",
    "--set", "crop.model_input_px=16",
    "--set", "model.feature_dim=16",
    "--set", "model.ffn_dim=16",
    "--set", "pretrain.distill.epochs=1",
    "--set", "pretrain.distill.batch_size=6",
    "--set", "pretrain.distill.n_prototypes=16",
    "--set", "pretrain.distill.n_local_crops=2",
    "--set", "pretrain.distill.global_crop_px=32",
    "--set", "pretrain.distill.local_crop_px=16",
    "--set", "pretrain.distill.warmup_steps=2",
    "--set", "finetune.train.epochs=1",
    "--set", "finetune.train.batch_size=3",
]


def run_cli(args, run_root):
    return main(args + ["--run-root", str(run_root), "--run-id", "t"] + TINY_OVERRIDES)


@pytest.fixture(scope="module")
def chain_root(tmp_path_factory):
    """Run the no-flag pipeline once; the tests inspect its artifacts."""
    root = tmp_path_factory.mktemp("runs")
    assert run_cli(["synth"], root) == 0
    assert run_cli(["pretrain"], root) == 0
    assert run_cli(["finetune", "--fold", "0"], root) == 0
    assert run_cli(["evaluate", "--fold", "0"], root) == 0
    assert run_cli(["crossval", "--variant", "no_pretrain"], root) == 0
    assert run_cli(["ablate"], root) == 0
    return root / "t"


class TestCliChain:
    def test_synth_artifacts(self, chain_root):
        dataset = chain_root / "synth" / "dataset"
        assert (dataset / "manifest.jsonl").is_file()
        assert (dataset / "ledger.jsonl").is_file()
        assert len(list(dataset.glob("images/*.png"))) == 6
        hashes = json.loads((chain_root / "synth" / "hashes.json").read_text())
        assert "manifest.jsonl" in {k.split("/")[-1] for k in hashes["outputs"]}

    def test_pretrain_artifacts(self, chain_root):
        stage = chain_root / "pretrain"
        assert (stage / "encoder.pt").is_file()
        records = [json.loads(line) for line in (stage / "runlog.jsonl").read_text().splitlines()]
        assert {"epoch", "loss", "collapse_stat", "collapsed"} <= set(records[0])

    def test_finetune_and_evaluate_artifacts(self, chain_root):
        assert (chain_root / "finetune" / "model_fold0.pt").is_file()
        rows = list(csv.reader(open(chain_root / "evaluate" / "fold_0.csv", newline="")))
        assert rows[0][0] == "fold" and rows[1][0] == "0"

    def test_crossval_artifacts(self, chain_root):
        stage = chain_root / "crossval"
        rows = list(csv.reader(open(stage / "aggregate.csv", newline="")))
        assert rows[0] == ["variant", "recall", "precision", "f1", "gmean"]
        assert rows[1][0] == "w/o DINO pre-training"
        assert (stage / "folds_no_pretrain.csv").is_file()
        assert (stage / "fold_no_pretrain_1.csv").is_file()
        for metric in ("recall", "precision", "f1", "gmean"):
            assert (stage / f"bar_{metric}.png").is_file()
        summary = json.loads((stage / "summary.json").read_text())
        assert len(summary["reports"][0]["per_fold"]) == 2

    def test_ablate_covers_all_variants(self, chain_root):
        rows = list(csv.reader(open(chain_root / "ablate" / "ablation.csv", newline="")))
        assert [r[0] for r in rows[1:]] == [
            "Ours",
            "w/o DINO pre-training",
            "w/o Focal Loss",
            "w/o Global/Local Encoder",
        ]

    def test_stage_metadata_written_everywhere(self, chain_root):
        for stage in ("synth", "pretrain", "finetune", "evaluate", "crossval", "ablate"):
            assert (chain_root / stage / "resolved_config.yaml").is_file(), stage
            assert (chain_root / stage / "hashes.json").is_file(), stage

    def test_crossval_repeats_byte_identically(self, chain_root, tmp_path):
        second = tmp_path / "again"
        assert run_cli(["synth"], second) == 0
        assert run_cli(["crossval", "--variant", "no_pretrain"], second) == 0
        original = (chain_root / "crossval" / "aggregate.csv").read_bytes()
        repeat = (second / "t" / "crossval" / "aggregate.csv").read_bytes()
        assert original == repeat


class TestCliErrors:
    def test_missing_manifest_is_one_error_line(self, tmp_path, capsys):
        code = main(["crossval", "--run-root", str(tmp_path), "--run-id", "x"])
        captured = capsys.readouterr()
        assert code == 1
        assert captured.err.startswith("error: command=crossval kind=ConfigurationError")
        assert len(captured.err.strip().splitlines()) == 1

    def test_bad_override_reports_config_error(self, tmp_path, capsys):
        code = main(["synth", "--run-root", str(tmp_path), "--set", "data.n_folds=0"])
        assert code == 1
        assert "kind=ConfigurationError" in capsys.readouterr().err

    def test_unknown_variant_flag_rejected_by_argparse(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["crossval", "--run-root", str(tmp_path), "--variant", "bogus"])
