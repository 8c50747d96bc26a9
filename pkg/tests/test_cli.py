import re
import subprocess
import sys

import numpy as np
import pytest

from arnet import cli
from arnet.data import SynthConfig, load_map, synthesize


def invoke(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


def run_dirs(root):
    return sorted(p for p in root.iterdir() if p.is_dir())


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A one-step desk checkpoint on the shared synthetic set."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    synthesize(SynthConfig(count=2, size=64, delta=0.3, seed=2), data)
    code = cli.main(["train", "--data", str(data), "--desk", "--epochs", "1", "--runs-dir", str(root / "runs")])
    assert code == 0
    (run,) = run_dirs(root / "runs")
    return data, run


class TestUsage:
    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 1

    def test_bad_flag_value(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--out", "x", "--count", "many"])
        assert exc.value.code == 1

    def test_invalid_synth_config(self, tmp_path, capsys):
        code, out = invoke(["synth", "--out", tmp_path, "--size", 50], capsys)
        assert code == 1 and "multiple of 32" in out.err

    def test_train_requires_data(self, capsys):
        code, out = invoke(["train"], capsys)
        assert code == 1 and "--data" in out.err

    def test_train_missing_dataset(self, tmp_path, capsys):
        code, out = invoke(["train", "--data", tmp_path / "nope", "--runs-dir", tmp_path], capsys)
        assert code == 2 and "missing directory" in out.err

    def test_verbose_after_subcommand(self, tmp_path):
        assert cli.main(["synth", "-v", "--out", str(tmp_path), "--count", "1"]) == 0

    def test_console_script_entry(self):
        out = subprocess.run([sys.executable, "-m", "arnet.cli", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.startswith("arnet ")


class TestConfig:
    def test_precedence(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("# desk run\nepochs = 3\nlr = 1e-3\nno-mse = true\nbatch = 4\n")
        args = cli.build_parser().parse_args(["train", "--config", str(cfgfile), "--epochs", "5", "--desk"])
        cfg = cli.resolve(args, cli.TRAIN_DEFAULTS)
        assert cfg["epochs"] == 5          # flag beats file
        assert cfg["lr"] == 1e-3           # file beats default
        assert cfg["no_mse"] is True
        assert cfg["batch"] == 2 and cfg["size"] == 64  # --desk
        assert cfg["decay_epochs"] == 100  # default
        args = cli.build_parser().parse_args(["train", "--config", str(cfgfile), "--batch", "3"])
        cfg = cli.resolve(args, cli.TRAIN_DEFAULTS)
        assert (cfg["batch"], cfg["size"], cfg["epochs"]) == (3, 416, 3)

    def test_full_scale_defaults(self):
        cfg = cli.resolve(cli.build_parser().parse_args(["train"]), cli.TRAIN_DEFAULTS)
        assert (cfg["size"], cfg["lr"], cfg["batch"], cfg["epochs"], cfg["decay_epochs"]) == (416, 5e-5, 8, 150, 100)

    @pytest.mark.parametrize("text,msg", [("epochs 3\n", "expected 'key = value'"), ("colour = red\n", "unknown key"),
                                          ("epochs = lots\n", "bad value")])
    def test_bad_config(self, tmp_path, capsys, text, msg):
        (tmp_path / "c.cfg").write_text(text)
        code, out = invoke(["train", "--config", tmp_path / "c.cfg"], capsys)
        assert code == 1 and msg in out.err


class TestTrainInfer:
    def test_run_dir_and_manifest(self, trained):
        _, run = trained
        assert re.fullmatch(r"\d{8}T\d{6}Z?-[0-9a-f]{12}(\.\d+)?", run.name)
        manifest = (run / "manifest.txt").read_text()
        for key in ("command = train", "code_version", "seed = 0", "size = 64", "batch = 2", "no_ciim = False",
                    "hga_mode = elementwise"):
            assert key in manifest
        assert (run / "checkpoint.arnk").exists() and (run / "loss.csv").exists()

    def test_zero_epochs(self, trained, tmp_path, capsys):
        data, _ = trained
        code, out = invoke(["train", "--data", data, "--desk", "--epochs", 0, "--runs-dir", tmp_path], capsys)
        assert code == 0 and "initialization" in out.out

    def test_no_ciim_variant(self, trained, tmp_path):
        data, _ = trained
        assert cli.main(["train", "--data", str(data), "--desk", "--max-steps", "1", "--no-ciim",
                         "--runs-dir", str(tmp_path)]) == 0
        (run,) = run_dirs(tmp_path)
        assert "no_ciim = True" in (run / "manifest.txt").read_text()

    def test_deterministic_loss_curve(self, trained, tmp_path):
        data, run = trained
        assert cli.main(["train", "--data", str(data), "--desk", "--epochs", "1", "--runs-dir", str(tmp_path)]) == 0
        (again,) = run_dirs(tmp_path)
        assert (again / "loss.csv").read_bytes() == (run / "loss.csv").read_bytes()
        assert again.name.split("-")[1] == run.name.split("-")[1]

    def test_infer_deterministic_and_priors(self, trained, tmp_path):
        data, run = trained
        ck = str(run / "checkpoint.arnk")
        img = data / "image" / "synth_0000.ppm"
        assert cli.main(["infer", "--checkpoint", ck, str(img), "--out", str(tmp_path / "a"), "--dump-priors"]) == 0
        assert cli.main(["infer", "--checkpoint", ck, str(img), "--out", str(tmp_path / "b")]) == 0
        a = tmp_path / "a"
        assert (a / "synth_0000.pgm").read_bytes() == (tmp_path / "b" / "synth_0000.pgm").read_bytes()
        written = sorted(p.relative_to(a).as_posix() for p in a.rglob("*.pgm"))
        assert written == ["priors/synth_0000_boundary.pgm", "priors/synth_0000_region.pgm", "synth_0000.pgm"]
        assert load_map(a / "synth_0000.pgm").shape == (64, 64)

    def test_infer_resizes_back(self, trained, tmp_path):
        from arnet.data import save_image
        _, run = trained
        save_image(tmp_path / "odd.ppm", np.random.default_rng(0).random((3, 40, 50)))
        assert cli.main(["infer", "--checkpoint", str(run / "checkpoint.arnk"), str(tmp_path / "odd.ppm"),
                         "--out", str(tmp_path / "o")]) == 0
        assert load_map(tmp_path / "o" / "odd.pgm").shape == (40, 50)

    def test_infer_partial_failure(self, trained, tmp_path, capsys):
        data, run = trained
        (tmp_path / "broken.ppm").write_bytes(b"P6\n4 4\n255\n")
        code, out = invoke(["infer", "--checkpoint", run / "checkpoint.arnk", data / "image" / "synth_0001.ppm",
                         tmp_path / "broken.ppm", "--out", tmp_path / "o"], capsys)
        assert code == 2 and "broken.ppm" in out.err
        assert (tmp_path / "o" / "synth_0001.pgm").exists()

    def test_infer_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "c.arnk").write_bytes(b"nope")
        code, _ = invoke(["infer", "--checkpoint", tmp_path / "c.arnk", tmp_path, "--out", tmp_path / "o"], capsys)
        assert code == 2


class TestEvalSynth:
    def test_self_eval(self, trained, tmp_path, capsys):
        data, _ = trained
        code, out = invoke(["eval", data / "mask", data / "mask", "--runs-dir", tmp_path], capsys)
        assert code == 0
        lines = out.out.splitlines()
        assert lines[0].startswith("# dataset=mask images=2 e_variant=mean")
        assert lines[2].split()[1:5] == ["1.0000", "1.0000", "1.0000", "0.0000"]
        (run_dir,) = run_dirs(tmp_path)
        assert (run_dir / "metrics.csv").exists() and (run_dir / "table.txt").read_text().strip() == out.out.split(
            "\nper-image CSV")[0].strip()

    def test_csv_matches_table(self, trained, tmp_path, capsys):
        data, run = trained
        cli.main(["infer", "--checkpoint", str(run / "checkpoint.arnk"), str(data / "image"),
                  "--out", str(tmp_path / "pred")])
        capsys.readouterr()
        code, out = invoke(["eval", tmp_path / "pred", data / "mask", "--csv", tmp_path / "m.csv", "--e-variant", "max"],
                        capsys)
        assert code == 0 and "e_variant=max" in out.out
        rows = (tmp_path / "m.csv").read_text().splitlines()
        vals = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
        table = [float(v) for v in out.out.splitlines()[2].split()[1:]]
        np.testing.assert_allclose(table, vals.mean(axis=0), atol=5e-5)

    def test_eval_no_pairs(self, tmp_path, capsys):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        code, out = invoke(["eval", tmp_path / "a", tmp_path / "b", "--csv", tmp_path / "m.csv"], capsys)
        assert code == 2 and "no prediction/ground-truth pairs" in out.err

    def test_eval_partial(self, trained, tmp_path, capsys):
        data, _ = trained
        import shutil
        shutil.copytree(data / "mask", tmp_path / "pred")
        (tmp_path / "pred" / "stray.pgm").write_bytes((data / "mask" / "synth_0000.pgm").read_bytes())
        code, out = invoke(["eval", tmp_path / "pred", data / "mask", "--csv", tmp_path / "m.csv"], capsys)
        assert code == 2 and "stray" in out.err and "images=2" in out.out

    def test_synth(self, tmp_path, capsys):
        code, out = invoke(["synth", "--out", tmp_path / "s", "--count", 3, "--delta", 0.5, "--shape", "blob",
                         "--seed", 4], capsys)
        assert code == 0 and "wrote 3 samples" in out.out
        assert len(list((tmp_path / "s" / "mask").glob("*.pgm"))) == 3


class TestSelfcheck:
    def test_quick_passes(self, capsys):
        code, out = invoke(["selfcheck", "--quick"], capsys)
        assert code == 0
        assert re.search(r"\[gradients\] (\d+)/\1 passed", out.out)
        assert "selfcheck PASSED" in out.out

    def test_injected_fault(self, capsys):
        code, out = invoke(["selfcheck", "--quick", "--inject-fault", "sobel"], capsys)
        assert code == 3
        assert "FAIL sobel invariants" in out.out and "vertical-step" in out.out
        assert "selfcheck FAILED" in out.out


@pytest.mark.slow
def test_full_contrast_overfit_then_infer(tmp_path):
    """Desk overfit protocol on delta=1 data, then CLI inference: every image reaches IoU > 0.9."""
    from arnet.metrics import dice_iou

    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data), "--count", "8", "--delta", "1.0", "--seed", "7"]) == 0
    assert cli.main(["train", "--data", str(data), "--desk", "--epochs", "125", "--decay-epochs", "1000000",
                     "--runs-dir", str(tmp_path / "runs")]) == 0
    (run,) = run_dirs(tmp_path / "runs")
    assert cli.main(["infer", "--checkpoint", str(run / "checkpoint.arnk"), str(data / "image"),
                     "--out", str(tmp_path / "pred")]) == 0
    for gt in sorted((data / "mask").glob("*.pgm")):
        iou = dice_iou(load_map(tmp_path / "pred" / gt.name), load_map(gt))[1]
        assert iou > 0.9, (gt.stem, iou)
