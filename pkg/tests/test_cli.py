import os

import numpy as np
import pytest

from retinassl.checkpoint import load_checkpoint
from retinassl.cli import main
from retinassl.data import generate_synthetic_dataset, write_synthetic_dataset


def run(args):
    return main(args)


def tree_bytes(directory):
    """Map of relative path -> file bytes, for whole-directory comparisons."""
    out = {}
    for root, _, files in os.walk(directory):
        for name in files:
            if name.endswith(".lock"):
                continue
            path = os.path.join(root, name)
            rel = os.path.relpath(path, directory)
            with open(path, "rb") as fh:
                out[rel] = fh.read()
    return out


TINY_CFG = "\n".join([
    "vit.image_size = 16",
    "vit.patch_size = 8",
    "vit.depth = 1",
    "vit.embed_dim = 8",
    "vit.n_heads = 2",
    "head.hidden_dim = 16",
    "head.bottleneck_dim = 8",
    "head.output_dim = 24",
    "crop.global_out_size = 16",
    "crop.local_out_size = 8",
    "crop.n_local = 2",
    "distill.batch_size = 2",
    "distill.total_epochs = 10",
    "distill.warmup_epochs = 1",
    "probe.epochs = 3",
]) + "\n"


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


@pytest.fixture
def synth_dir(tmp_path, tiny_config):
    out = tmp_path / "data"
    assert run(["make-synth", "--out", str(out), "--per-class", "3",
                "--size", "16", "--config", tiny_config]) == 0
    return str(out)


class TestMakeSynth:
    def test_counts(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert run(["make-synth", "--out", str(out), "--per-class", "10",
                    "--size", "16"]) == 0
        pngs = [f for f in os.listdir(out) if f.endswith(".png")]
        assert len(pngs) == 50
        manifest = (out / "manifest.csv").read_text().strip().split("\n")
        assert len(manifest) == 51  # header + 50 rows
        assert "50 images" in capsys.readouterr().out

    def test_byte_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run(["make-synth", "--out", str(d), "--per-class", "2",
                        "--size", "16", "--seed", "7"]) == 0
        assert tree_bytes(a) == tree_bytes(b)

    def test_per_class_zero(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert run(["make-synth", "--out", str(out), "--per-class", "0",
                    "--size", "16"]) == 0
        assert (out / "manifest.csv").read_text().strip() == "image,level"


class TestUsageErrors:
    def test_no_subcommand(self):
        assert run([]) == 1

    def test_unknown_flag(self):
        assert run(["make-synth", "--out", "x", "--bogus"]) == 1

    def test_missing_required(self):
        assert run(["train", "--out", "x"]) == 1


class TestTrain:
    def test_log_line_count(self, tmp_path, tiny_config, synth_dir):
        out = tmp_path / "run"
        assert run(["train", "--manifest", f"{synth_dir}/manifest.csv",
                    "--images", synth_dir, "--out", str(out),
                    "--config", tiny_config, "--steps", "5"]) == 0
        lines = (out / "metrics.log").read_text().strip().split("\n")
        assert len(lines) == 6  # header + 5 steps
        assert lines[0].startswith("step\t")
        assert os.path.exists(out / "final.ckpt")

    def test_corrupted_labels_still_train(self, tmp_path, tiny_config, synth_dir):
        # SSL is label-blind: garbage in the level column must not matter
        manifest = tmp_path / "bad.csv"
        rows = open(f"{synth_dir}/manifest.csv").read().strip().split("\n")
        manifest.write_text(rows[0] + "\n"
                            + "\n".join(r.split(",")[0] + ",banana"
                                        for r in rows[1:]) + "\n")
        out = tmp_path / "run"
        assert run(["train", "--manifest", str(manifest), "--images", synth_dir,
                    "--out", str(out), "--config", tiny_config,
                    "--steps", "2"]) == 0

    def test_resume_twin_run(self, tmp_path, tiny_config, synth_dir):
        full = tmp_path / "full"
        assert run(["train", "--manifest", f"{synth_dir}/manifest.csv",
                    "--images", synth_dir, "--out", str(full),
                    "--config", tiny_config, "--steps", "10", "--seed", "5"]) == 0

        part = tmp_path / "part"
        assert run(["train", "--manifest", f"{synth_dir}/manifest.csv",
                    "--images", synth_dir, "--out", str(part),
                    "--config", tiny_config, "--steps", "6", "--seed", "5"]) == 0
        rest = tmp_path / "rest"
        assert run(["train", "--manifest", f"{synth_dir}/manifest.csv",
                    "--images", synth_dir, "--out", str(rest),
                    "--config", tiny_config, "--steps", "4",
                    "--resume", str(part / "final.ckpt")]) == 0

        full_lines = (full / "metrics.log").read_text().strip().split("\n")[1:]
        part_lines = (part / "metrics.log").read_text().strip().split("\n")[1:]
        rest_lines = (rest / "metrics.log").read_text().strip().split("\n")[1:]
        assert part_lines + rest_lines == full_lines

    def test_byte_reproducible(self, tmp_path, tiny_config, synth_dir):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run(["train", "--manifest", f"{synth_dir}/manifest.csv",
                        "--images", synth_dir, "--out", str(d),
                        "--config", tiny_config, "--steps", "3",
                        "--seed", "11"]) == 0
        assert tree_bytes(a) == tree_bytes(b)

    def test_config_error_exit_2(self, tmp_path, synth_dir):
        bad = tmp_path / "bad.cfg"
        bad.write_text("distill.tau_t = -1\n")
        assert run(["train", "--manifest", f"{synth_dir}/manifest.csv",
                    "--images", synth_dir, "--out", str(tmp_path / "o"),
                    "--config", str(bad), "--steps", "1"]) == 2

    def test_missing_manifest_exit_2(self, tmp_path, tiny_config):
        assert run(["train", "--manifest", "/nonexistent.csv",
                    "--images", str(tmp_path), "--out", str(tmp_path / "o"),
                    "--config", tiny_config, "--steps", "1"]) == 2

    def test_env_var_config(self, tmp_path, tiny_config, synth_dir, monkeypatch):
        monkeypatch.setenv("RETINASSL_CONFIG", tiny_config)
        out = tmp_path / "run"
        assert run(["train", "--manifest", f"{synth_dir}/manifest.csv",
                    "--images", synth_dir, "--out", str(out),
                    "--steps", "1"]) == 0

    def test_output_lock(self, tmp_path, tiny_config, synth_dir):
        out = tmp_path / "run"
        os.makedirs(out)
        (out / ".retinassl.lock").touch()
        assert run(["train", "--manifest", f"{synth_dir}/manifest.csv",
                    "--images", synth_dir, "--out", str(out),
                    "--config", tiny_config, "--steps", "1"]) == 2


@pytest.fixture
def trained(tmp_path, tiny_config, synth_dir):
    out = tmp_path / "run"
    assert run(["train", "--manifest", f"{synth_dir}/manifest.csv",
                "--images", synth_dir, "--out", str(out),
                "--config", tiny_config, "--steps", "3"]) == 0
    return str(out / "final.ckpt")


class TestProbeKnn:
    def _eval_args(self, cmd, trained, synth_dir, out, tiny_config, extra=()):
        return [cmd, "--checkpoint", trained,
                "--train-manifest", f"{synth_dir}/manifest.csv",
                "--train-images", synth_dir,
                "--test-manifest", f"{synth_dir}/manifest.csv",
                "--test-images", synth_dir,
                "--out", str(out), "--config", tiny_config, *extra]

    def test_probe_writes_reports(self, tmp_path, tiny_config, synth_dir,
                                  trained, capsys):
        out = tmp_path / "probe"
        assert run(self._eval_args("probe", trained, synth_dir, out,
                                   tiny_config)) == 0
        assert os.path.exists(out / "report.txt")
        assert os.path.exists(out / "confusion.csv")
        assert "probe accuracy" in capsys.readouterr().out

    def test_knn_writes_reports(self, tmp_path, tiny_config, synth_dir,
                                trained, capsys):
        out = tmp_path / "knn"
        assert run(self._eval_args("knn", trained, synth_dir, out, tiny_config,
                                   ["--k", "3"])) == 0
        assert os.path.exists(out / "report.txt")
        assert "knn (k=3)" in capsys.readouterr().out

    def test_knn_k_too_large(self, tmp_path, tiny_config, synth_dir, trained):
        out = tmp_path / "knn"
        assert run(self._eval_args("knn", trained, synth_dir, out, tiny_config,
                                   ["--k", "999"])) == 2

    def test_reports_byte_reproducible(self, tmp_path, tiny_config, synth_dir,
                                       trained):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(self._eval_args("probe", trained, synth_dir, out,
                                       tiny_config, ["--seed", "3"])) == 0
        assert tree_bytes(a) == tree_bytes(b)

    def test_bad_checkpoint_exit_2(self, tmp_path, tiny_config, synth_dir):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        out = tmp_path / "o"
        assert run(self._eval_args("probe", str(bad), synth_dir, out,
                                   tiny_config)) == 2


class TestAttnMap:
    def test_file_count_and_range(self, tmp_path, tiny_config, synth_dir, trained):
        image = next(os.path.join(synth_dir, f) for f in sorted(os.listdir(synth_dir))
                     if f.endswith(".png"))
        out = tmp_path / "maps"
        assert run(["attn-map", "--checkpoint", trained, "--image", image,
                    "--out", str(out), "--config", tiny_config]) == 0
        files = sorted(os.listdir(out))
        pngs = [f for f in files if f.endswith(".png")]
        # tiny config: 2 heads x 1 CLS token + montage
        assert len(pngs) == 3
        assert any("montage" in f for f in pngs)
        from retinassl.imagecodec import decode_image
        for f in pngs:
            img = decode_image(out / f)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_wrong_size_exit_2(self, tmp_path, tiny_config, trained):
        from retinassl.imagecodec import encode_image
        image = tmp_path / "big.png"
        encode_image(image, np.zeros((3, 20, 20)))
        assert run(["attn-map", "--checkpoint", trained, "--image", str(image),
                    "--out", str(tmp_path / "maps"),
                    "--config", tiny_config]) == 2

    def test_byte_reproducible(self, tmp_path, tiny_config, synth_dir, trained):
        image = next(os.path.join(synth_dir, f) for f in sorted(os.listdir(synth_dir))
                     if f.endswith(".png"))
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["attn-map", "--checkpoint", trained, "--image", image,
                        "--out", str(out), "--config", tiny_config]) == 0
        assert tree_bytes(a) == tree_bytes(b)
