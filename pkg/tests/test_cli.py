"""The command-line front end: subcommands, exit codes, reproducibility.

Commands run in-process through ``main`` so exit codes come back as
return values; argparse usage errors surface as ``SystemExit`` with
code 2. A small dataset and a short training run are built once per
module and shared.
"""

import hashlib
from pathlib import Path

import pytest

from viewmorph.cli import main
from viewmorph.reporting import read_reports

SMOKE_CONFIG = """\
n_identities=6
image_size=32
base_channels=4
id_features=8
noise_features=8
n_viewpoints=5
variant=full
link_radius=2
attention_scaled=1
dtype=float32
steps=6
batch_size=4
lr=0.0002
attr_weight=5.0
beta1=0.5
beta2=0.999
adam_eps=1e-08
seed=0
checkpoint_every=3
deterministic=1
"""


def tree_digest(root: Path) -> dict:
    return {
        p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main([
        "gen-data", "--identities", "8", "--per-cell", "4",
        "--out", str(root / "data"), "--image-size", "32",
    ]) == 0
    (root / "smoke_config.txt").write_text(SMOKE_CONFIG)
    assert main([
        "train", "--data", str(root / "data" / "manifest.csv"),
        "--config", str(root / "smoke_config.txt"), "--out", str(root / "run"),
    ]) == 0
    return root


@pytest.fixture(scope="module")
def manifest(workspace):
    return str(workspace / "data" / "manifest.csv")


@pytest.fixture(scope="module")
def checkpoint(workspace):
    return str(workspace / "run" / "checkpoint.bin")


class TestGenData:
    def test_file_count_and_manifest(self, tmp_path):
        out = tmp_path / "data"
        assert main([
            "gen-data", "--identities", "10", "--per-cell", "4",
            "--out", str(out), "--image-size", "16",
        ]) == 0
        assert (out / "manifest.csv").exists()
        assert len(list((out / "images").glob("*.png"))) == 200

    def test_missing_out_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--identities", "3", "--per-cell", "2"])
        assert exc.value.code == 2

    def test_rerun_same_seed_identical_bytes(self, tmp_path):
        args = ["gen-data", "--identities", "3", "--per-cell", "2", "--image-size", "16"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_bad_identity_count_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--identities", "0", "--per-cell", "2", "--out", "x"])
        assert exc.value.code == 2


class TestTrain:
    def test_outputs_present(self, workspace):
        run = workspace / "run"
        for name in ("checkpoint.bin", "metrics.tsv", "loss.png", "config.txt"):
            assert (run / name).exists(), name
        steps = [int(line.split("\t")[0]) for line in
                 (run / "metrics.tsv").read_text().splitlines()]
        assert steps == list(range(1, 7))

    def test_saved_config_round_trips(self, workspace):
        from viewmorph.training import TrainConfig

        config = TrainConfig.from_text((workspace / "run" / "config.txt").read_text())
        assert config.steps == 6
        assert config.network.image_size == 32

    def test_ablation_override(self, workspace, manifest, tmp_path):
        assert main([
            "train", "--data", manifest,
            "--config", str(workspace / "smoke_config.txt"),
            "--ablation", "vanilla", "--steps", "2", "--out", str(tmp_path / "r"),
        ]) == 0
        assert "variant=vanilla" in (tmp_path / "r" / "config.txt").read_text()

    def test_resume_appends_metrics(self, workspace, manifest, checkpoint, tmp_path):
        longer = SMOKE_CONFIG.replace("steps=6", "steps=8")
        cfg = tmp_path / "longer.txt"
        cfg.write_text(longer)
        out = tmp_path / "resumed"
        assert main([
            "train", "--data", manifest, "--config", str(cfg),
            "--resume", checkpoint, "--out", str(out),
        ]) == 0
        steps = [int(line.split("\t")[0]) for line in
                 (out / "metrics.tsv").read_text().splitlines()]
        assert steps == [7, 8]

    def test_unknown_config_key_is_config_error(self, manifest, tmp_path, capsys):
        cfg = tmp_path / "bad.txt"
        cfg.write_text(SMOKE_CONFIG + "mystery=1\n")
        assert main(["train", "--data", manifest, "--config", str(cfg),
                     "--out", str(tmp_path / "r")]) == 2
        assert "unknown key 'mystery'" in capsys.readouterr().err

    def test_missing_manifest_is_runtime_error(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "absent.csv"),
                     "--out", str(tmp_path / "r")]) == 1

    def test_bad_ablation_is_usage_error(self, manifest):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", manifest, "--ablation", "nonsense"])
        assert exc.value.code == 2


class TestGenerate:
    def test_contact_sheet_layout(self, manifest, checkpoint, tmp_path):
        from PIL import Image

        out = tmp_path / "gen"
        assert main([
            "generate", "--checkpoint", checkpoint, "--data", manifest,
            "--count", "3", "--out", str(out),
        ]) == 0
        with Image.open(out / "contact_sheet.png") as im:
            width, height = im.size
        pad = 2
        assert height == 3 * 32 + pad * 4          # three input rows
        assert width == 6 * 32 + pad * 7           # input plus five viewpoints

    def test_count_exceeding_split_is_config_error(self, manifest, checkpoint, tmp_path, capsys):
        assert main([
            "generate", "--checkpoint", checkpoint, "--data", manifest,
            "--count", "999", "--out", str(tmp_path / "g"),
        ]) == 2

    def test_missing_checkpoint_is_runtime_error(self, manifest, tmp_path, capsys):
        assert main([
            "generate", "--checkpoint", str(tmp_path / "absent.bin"),
            "--data", manifest, "--out", str(tmp_path / "g"),
        ]) == 1


class TestEvalIdpres:
    def test_report_files_and_fields(self, manifest, checkpoint, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main([
            "eval-idpres", "--checkpoint", checkpoint, "--data", manifest,
            "--nc", "1", "--k", "3", "--extractor-steps", "20", "--out", str(out),
        ]) == 0
        for name in ("report.tsv", "summary.txt", "accuracy.png", "config.txt"):
            assert (out / name).exists(), name
        report, = read_reports(out / "report.tsv")
        assert report.protocol == "idpres"
        assert report.n_classes == 1
        assert 0.0 <= report.top1 <= report.top5 <= 1.0
        stdout = capsys.readouterr().out
        assert "top-1 accuracy" in stdout and "top-5 accuracy" in stdout

    def test_rerun_identical_report_bytes(self, manifest, checkpoint, tmp_path):
        args = ["eval-idpres", "--checkpoint", checkpoint, "--data", manifest,
                "--nc", "1", "--extractor-steps", "20", "--seed", "3"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_too_many_classes_is_config_error(self, manifest, checkpoint, tmp_path):
        assert main([
            "eval-idpres", "--checkpoint", checkpoint, "--data", manifest,
            "--nc", "999", "--extractor-steps", "20", "--out", str(tmp_path / "e"),
        ]) == 2


class TestEvalFewshot:
    def test_both_reports_share_the_split(self, manifest, checkpoint, tmp_path):
        out = tmp_path / "few"
        assert main([
            "eval-fewshot", "--checkpoint", checkpoint, "--data", manifest,
            "--nc", "2", "--shots", "5", "--classifier-steps", "20",
            "--fakes-per-image", "5", "--out", str(out),
        ]) == 0
        baseline, augmented = read_reports(out / "report.tsv")
        assert baseline.protocol == "fewshot-baseline"
        assert augmented.protocol == "fewshot-augmented"
        assert baseline.per_class_counts == augmented.per_class_counts
        assert baseline.seed == augmented.seed


class TestGradcheck:
    def test_passes_and_prints_table(self, capsys):
        assert main(["gradcheck", "--instances", "1"]) == 0
        out = capsys.readouterr().out
        assert "21 checks, 21 passed" in out
        assert "conv2d" in out and "generator" in out

    def test_verbose_env_accepted(self, monkeypatch, capsys):
        monkeypatch.setenv("VIEWMORPH_VERBOSE", "2")
        assert main(["gradcheck", "--instances", "1"]) == 0


class TestEntryPoints:
    def test_module_invocation(self, tmp_path):
        import subprocess
        import sys

        proc = subprocess.run(
            [sys.executable, "-m", "viewmorph", "gen-data", "--identities", "2",
             "--per-cell", "1", "--out", str(tmp_path / "d"), "--image-size", "16"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "manifest:" in proc.stdout

    def test_no_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
