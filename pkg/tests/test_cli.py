"""Command-line surface: happy path per subcommand plus exit codes."""

from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from topdownseg.cli import EXIT_CONFIG, EXIT_MISSING, main
from topdownseg.datasets import load_manifest, read_mask, write_mask
from topdownseg.training import METRICS_HEADER

ENCODER_YAML = (
    "encoder:\n"
    "  image_size: 16\n"
    "  patch_size: 4\n"
    "  depth: 2\n"
    "  embed_dim: 8\n"
    "  attn_dim: 8\n"
    "  heads: 2\n"
)


def _invoke(*args):
    return CliRunner().invoke(main, list(args))


def _write_config(tmp_path, manifest, out, **extra):
    lines = [
        f"manifest: {manifest}",
        f"out: {out}",
        "k: 2",
        "betas: [0.5, 0.4]",
        "rounds: 1",
        "epochs: 1",
        "batch_size: 4",
    ]
    lines += [f"{key}: {value}" for key, value in extra.items()]
    path = tmp_path / "run.yaml"
    path.write_text("\n".join(lines) + "\n" + ENCODER_YAML, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset plus a config, generated through the CLI itself."""
    tmp = tmp_path_factory.mktemp("cli")
    data = tmp / "data"
    result = _invoke("synth", "--out", str(data), "--count", "8",
                     "--side", "24", "--k", "2", "--seed", "1")
    assert result.exit_code == 0, result.output
    manifest = data / "manifest.tsv"
    assert result.output.strip() == str(manifest)
    config = _write_config(tmp, manifest, tmp / "run")
    return tmp, config


class TestSynth:
    def test_dataset_is_loadable(self, workspace):
        tmp, _ = workspace
        manifest = load_manifest(tmp / "data" / "manifest.tsv")
        assert len(manifest) == 8
        assert manifest.protocol == "things_only"
        assert manifest.k == 2

    def test_bad_arguments_exit_config(self, tmp_path):
        result = _invoke("synth", "--out", str(tmp_path / "d"), "--k", "9")
        assert result.exit_code == EXIT_CONFIG


class TestStages:
    def test_full_chain(self, workspace):
        tmp, config = workspace
        run = tmp / "run"

        result = _invoke("mine", "--config", str(config))
        assert result.exit_code == 0, result.output
        assert result.output.strip() == str(run / "crops.tfgu")

        result = _invoke("cluster", "--config", str(config))
        assert result.exit_code == 0, result.output
        assert result.output.strip() == str(run / "concepts.tfgu")

        result = _invoke("pseudo", "--config", str(config))
        assert result.exit_code == 0, result.output
        assert result.output.strip() == str(run / "bank")

        result = _invoke("train", "--config", str(config))
        assert result.exit_code == 0, result.output
        lines = result.output.splitlines()
        assert lines[0] == METRICS_HEADER
        assert lines[1].startswith("initial\t")
        assert lines[-1] == str(run / "decoder.tfgu")

        result = _invoke("eval", "--config", str(config))
        assert result.exit_code == 0, result.output
        assert result.output.startswith("miou\t")
        assert (run / "metrics.txt").exists()

        result = _invoke("viz", "--config", str(config), "--limit", "1")
        assert result.exit_code == 0, result.output
        written = [Path(line) for line in result.output.splitlines()]
        assert len(written) == 5
        assert all(p.exists() for p in written)

    def test_eval_pred_dir_against_ground_truth(self, workspace, tmp_path):
        tmp, config = workspace
        manifest = load_manifest(tmp / "data" / "manifest.tsv")
        preds = tmp_path / "preds"
        preds.mkdir()
        for entry in manifest.split_entries("val"):
            gt = read_mask(manifest.resolve(entry.mask_path))
            write_mask(gt, preds / (Path(entry.image_path).stem + ".png"))
        result = _invoke("eval", "--config", str(config),
                         "--out", str(tmp_path / "out"),
                         "--pred-dir", str(preds))
        assert result.exit_code == 0, result.output
        assert result.output.startswith("miou\t1.000000\n")

    def test_out_override_redirects_artifacts(self, workspace, tmp_path):
        _, config = workspace
        result = _invoke("mine", "--config", str(config),
                         "--out", str(tmp_path / "elsewhere"))
        assert result.exit_code == 0, result.output
        assert (tmp_path / "elsewhere" / "crops.tfgu").exists()


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        result = _invoke("mine", "--config", str(tmp_path / "nope.yaml"))
        assert result.exit_code == EXIT_CONFIG
        assert "not found" in result.output

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("manifest: m\nout: o\nk: 2\nturbo: yes\n", "utf-8")
        result = _invoke("mine", "--config", str(path))
        assert result.exit_code == EXIT_CONFIG
        assert "turbo" in result.output

    def test_missing_artifact(self, workspace, tmp_path):
        tmp, _ = workspace
        config = _write_config(tmp_path, tmp / "data" / "manifest.tsv",
                               tmp_path / "fresh")
        result = _invoke("cluster", "--config", str(config))
        assert result.exit_code == EXIT_MISSING
        assert "mine" in result.output

    def test_missing_dataset(self, tmp_path):
        config = _write_config(tmp_path, tmp_path / "gone.tsv", tmp_path / "out")
        result = _invoke("mine", "--config", str(config))
        assert result.exit_code == EXIT_MISSING
        assert "manifest not found" in result.output

    def test_viz_unknown_id(self, workspace):
        _, config = workspace
        result = _invoke("viz", "--config", str(config), "--image", "ghost.png")
        assert result.exit_code == EXIT_CONFIG
        assert "not in the label bank" in result.output
