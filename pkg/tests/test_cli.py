"""Command-line tool: subcommands, config precedence, exit codes, stderr format."""

import json

import numpy as np
import pytest
import torch

from flowscape.cli import main
from flowscape.flow_io import read_flo, read_image, write_flo
from flowscape.synth import MotionModel, PlaidTexture, Rect, Region, SceneSpec

# model-size flags shared by all training invocations; epochs/lr vary per test
TINY_TRAIN = [
    "--batch", "2", "--stride", "1", "--c", "8",
    "--enc-widths", "8,16", "--base-width", "8", "--quiet",
]


def static_sky_spec(seed=0):
    """32x32 scene whose top half stands still and bottom half drifts."""
    return SceneSpec(
        height=32,
        width=32,
        frame_count=3,
        seed=seed,
        regions=[
            Region("sky", Rect(0, 0, 32, 16),
                   PlaidTexture(freq_x=0.06, freq_y=0.05, phase_x=0.4),
                   MotionModel(u=0.0, v=0.0)),
            Region("water", Rect(0, 16, 32, 32),
                   PlaidTexture(freq_x=0.07, freq_y=0.09, phase_y=1.2),
                   MotionModel(u=2.0, v=0.0)),
        ],
    )


@pytest.fixture(scope="module")
def static_clip(tmp_path_factory):
    """One synthesized clip whose sky band never moves (eval needs it)."""
    root = tmp_path_factory.mktemp("eval")
    spec_path = root / "scene.json"
    spec_path.write_text(json.dumps(static_sky_spec().to_dict()))
    assert main(["synth", "--out", str(root), "--spec", str(spec_path)]) == 0
    return root / "clip_000000"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthesized dataset plus a tiny trained checkpoint, shared per module."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--random", "2",
                 "--size", "32", "--frames", "3", "--seed", "5"]) == 0
    ckpt = root / "model.npz"
    assert main(["train", "--data", str(data), "--out", str(ckpt),
                 "--epochs", "2", "--lr", "1e-3", *TINY_TRAIN]) == 0
    return {"root": root, "data": data, "ckpt": ckpt,
            "clip": data / "clip_000000"}


class TestUsageAndHelp:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "synth" in capsys.readouterr().out

    def test_train_help_lists_every_config_key(self, capsys):
        assert main(["train", "--help"]) == 0
        text = " ".join(capsys.readouterr().out.split())
        for flag in ("--alpha", "--beta", "--sigma", "--c", "--latent-dim",
                     "--lr", "--epochs", "--batch", "--seed", "--stride"):
            assert flag in text, flag
        # defaults are advertised
        assert "default: 0.5)" in text      # alpha
        assert "default: 500)" in text      # epochs
        assert "default: 32.0)" in text     # c

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["synth", "--out", "x", "--bogus"]) == 2
        capsys.readouterr()


class TestSynth:
    def test_random_clips_layout(self, workspace):
        data = workspace["data"]
        clips = sorted(p.name for p in data.iterdir())
        assert clips == ["clip_000000", "clip_000001"]
        clip = workspace["clip"]
        assert sorted(p.name for p in (clip / "frames").iterdir()) == [
            f"frame_{t:06d}.png" for t in range(4)
        ]
        assert len(list((clip / "flows").glob("flow_*.flo"))) == 3
        assert len(list((clip / "masks").glob("mask_*.png"))) == 4
        manifest = json.loads((clip / "manifest.json").read_text())
        assert manifest["frame_count"] == 3

    def test_prints_clip_dirs(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "o"), "--size", "16",
                     "--frames", "1", "--seed", "3"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out == [str(tmp_path / "o" / "clip_000000")]

    def test_same_seed_is_bitwise_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--size", "16",
                         "--frames", "2", "--seed", "9"]) == 0
        capsys.readouterr()
        flo_a = (tmp_path / "a" / "clip_000000" / "flows" / "flow_000000.flo").read_bytes()
        flo_b = (tmp_path / "b" / "clip_000000" / "flows" / "flow_000000.flo").read_bytes()
        assert flo_a == flo_b
        png_a = (tmp_path / "a" / "clip_000000" / "frames" / "frame_000001.png").read_bytes()
        png_b = (tmp_path / "b" / "clip_000000" / "frames" / "frame_000001.png").read_bytes()
        assert png_a == png_b

    def test_spec_file_single_object(self, tmp_path, capsys):
        spec_path = tmp_path / "scene.json"
        spec_path.write_text(json.dumps(static_sky_spec().to_dict()))
        assert main(["synth", "--out", str(tmp_path / "o"),
                     "--spec", str(spec_path)]) == 0
        capsys.readouterr()
        clip = tmp_path / "o" / "clip_000000"
        manifest = json.loads((clip / "manifest.json").read_text())
        assert manifest["size"] == [32, 32]
        assert manifest["frame_count"] == 3
        # the static region really is static on disk
        first = read_image(clip / "frames" / "frame_000000.png")
        last = read_image(clip / "frames" / "frame_000003.png")
        assert np.array_equal(first[:16], last[:16])
        assert not np.array_equal(first[16:], last[16:])

    def test_spec_file_list_makes_one_clip_each(self, tmp_path, capsys):
        spec_path = tmp_path / "scenes.json"
        spec_path.write_text(json.dumps([
            static_sky_spec(seed=0).to_dict(),
            static_sky_spec(seed=1).to_dict(),
        ]))
        assert main(["synth", "--out", str(tmp_path / "o"),
                     "--spec", str(spec_path)]) == 0
        capsys.readouterr()
        assert (tmp_path / "o" / "clip_000001" / "manifest.json").exists()

    def test_missing_spec_file_exits_3(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "o"),
                     "--spec", str(tmp_path / "nope.json")]) == 3
        assert capsys.readouterr().err.startswith("error: data:")

    def test_bad_json_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["synth", "--out", str(tmp_path / "o"), "--spec", str(bad)]) == 2
        assert capsys.readouterr().err.startswith("error: format:")

    def test_random_zero_exits_2(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "o"), "--random", "0"]) == 2
        assert "error: format:" in capsys.readouterr().err


class TestTrain:
    def test_writes_checkpoint_and_loss_log(self, workspace, capsys):
        ckpt = workspace["ckpt"]
        assert ckpt.exists()
        log = ckpt.with_suffix(".loss.csv")
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "epoch,loss_total,loss_frame,loss_flow,loss_tv"
        assert len(lines) == 3  # header + one row per epoch

    def test_same_seed_twice_gives_identical_checkpoints(self, workspace, tmp_path, capsys):
        outs = []
        for name in ("r1.npz", "r2.npz"):
            out = tmp_path / name
            assert main(["train", "--data", str(workspace["data"]),
                         "--out", str(out), "--seed", "7",
                         "--epochs", "2", "--lr", "1e-3", *TINY_TRAIN]) == 0
            outs.append(out)
        capsys.readouterr()
        with np.load(outs[0]) as a, np.load(outs[1]) as b:
            assert sorted(a.files) == sorted(b.files)
            for key in a.files:
                assert np.array_equal(a[key], b[key]), key
        assert outs[0].with_suffix(".loss.csv").read_bytes() == \
            outs[1].with_suffix(".loss.csv").read_bytes()

    def test_determinism_runs_use_fixed_seed(self, workspace, tmp_path, capsys):
        # a different seed genuinely changes the model, so the equality
        # above is not vacuous
        out = tmp_path / "r3.npz"
        assert main(["train", "--data", str(workspace["data"]),
                     "--out", str(out), "--seed", "8",
                     "--epochs", "2", "--lr", "1e-3", *TINY_TRAIN]) == 0
        capsys.readouterr()
        with np.load(out) as a, np.load(workspace["ckpt"]) as b:
            changed = any(
                a[k].shape != b[k].shape or not np.array_equal(a[k], b[k])
                for k in a.files if k != "meta_json"
            )
        assert changed

    def test_flag_overrides_config_file(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 3\nlr = 1e-3\n")
        out = tmp_path / "m.npz"
        assert main(["train", "--data", str(workspace["data"]), "--out", str(out),
                     "--config", str(cfg), "--epochs", "1", *TINY_TRAIN]) == 0
        capsys.readouterr()
        lines = out.with_suffix(".loss.csv").read_text().strip().splitlines()
        assert len(lines) == 2  # the flag's single epoch wins over the file's 3

    def test_config_file_alone_applies(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 1\nlr = 1e-3\n")
        out = tmp_path / "m.npz"
        assert main(["train", "--data", str(workspace["data"]), "--out", str(out),
                     "--config", str(cfg), *TINY_TRAIN]) == 0
        capsys.readouterr()
        lines = out.with_suffix(".loss.csv").read_text().strip().splitlines()
        assert len(lines) == 2

    def test_missing_config_file_exits_2(self, workspace, tmp_path, capsys):
        assert main(["train", "--data", str(workspace["data"]),
                     "--out", str(tmp_path / "m.npz"),
                     "--config", str(tmp_path / "nope.cfg"), *TINY_TRAIN]) == 2
        assert capsys.readouterr().err.startswith("error: format:")

    def test_missing_data_dir_exits_3(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "void"),
                     "--out", str(tmp_path / "m.npz"), *TINY_TRAIN]) == 3
        assert capsys.readouterr().err.startswith("error: data:")

    def test_divergence_exits_4(self, workspace, tmp_path, capsys):
        assert main(["train", "--data", str(workspace["data"]),
                     "--out", str(tmp_path / "m.npz"),
                     "--epochs", "2", "--lr", "1e30", *TINY_TRAIN]) == 4
        err = capsys.readouterr().err
        assert err.startswith("error: numeric:")
        assert "non-finite" in err


class TestAnimate:
    def test_end_to_end_layout_and_manifest(self, workspace, tmp_path, capsys):
        clip = workspace["clip"]
        out = tmp_path / "anim"
        assert main([
            "animate",
            "--checkpoint", str(workspace["ckpt"]),
            "--image", str(clip / "frames" / "frame_000000.png"),
            "--masks", str(clip / "masks" / "mask_000000.png"),
            "--ref", str(clip),
            "--steps", "2",
            "--out", str(out),
            "--viz",
        ]) == 0
        capsys.readouterr()
        assert sorted(p.name for p in (out / "frames").iterdir()) == [
            f"frame_{t:06d}.png" for t in range(3)
        ]
        assert sorted(p.name for p in (out / "flows").iterdir()) == [
            "accum_000000.flo", "accum_000001.flo",
            "step_000000.flo", "step_000001.flo",
        ]
        assert len(list((out / "viz").glob("flow_*.png"))) == 2
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["frame_count"] == 2  # steps; frames on disk = steps + 1
        assert manifest["steps"] == 2
        assert manifest["feed"] == "generated"
        assert manifest["accumulate"] == "compose"
        assert manifest["references"]["num_references"] == 1
        assert len(manifest["checkpoint_sha256"]) == 64
        # frame 0 is the input still
        first = read_image(out / "frames" / "frame_000000.png")
        original = read_image(clip / "frames" / "frame_000000.png")
        assert np.array_equal(first, original)

    def test_assign_and_speed_flags_reach_manifest(self, workspace, tmp_path, capsys):
        clip = workspace["clip"]
        out = tmp_path / "anim"
        assert main([
            "animate",
            "--checkpoint", str(workspace["ckpt"]),
            "--image", str(clip / "frames" / "frame_000000.png"),
            "--masks", str(clip / "masks" / "mask_000000.png"),
            "--ref", str(clip), "--ref", str(workspace["data"] / "clip_000001"),
            "--assign", "water=2", "--speed", "water=2.5", "--speed-all", "0.5",
            "--steps", "1",
            "--out", str(out),
        ]) == 0
        capsys.readouterr()
        refs = json.loads((out / "manifest.json").read_text())["references"]
        assert refs["num_references"] == 2
        assert refs["assignment"]["water"] == 2
        assert refs["assignment"]["sky"] == 1  # default reference
        assert refs["speeds"]["water"] == 2.5  # explicit beats --speed-all
        assert refs["speeds"]["sky"] == 0.5

    def test_missing_checkpoint_exits_3(self, workspace, tmp_path, capsys):
        clip = workspace["clip"]
        assert main([
            "animate", "--checkpoint", str(tmp_path / "nope.npz"),
            "--image", str(clip / "frames" / "frame_000000.png"),
            "--masks", str(clip / "masks" / "mask_000000.png"),
            "--ref", str(clip), "--out", str(tmp_path / "o"),
        ]) == 3
        assert capsys.readouterr().err.startswith("error: data:")

    def test_missing_image_exits_3(self, workspace, tmp_path, capsys):
        clip = workspace["clip"]
        assert main([
            "animate", "--checkpoint", str(workspace["ckpt"]),
            "--image", str(tmp_path / "nope.png"),
            "--masks", str(clip / "masks" / "mask_000000.png"),
            "--ref", str(clip), "--out", str(tmp_path / "o"),
        ]) == 3
        assert capsys.readouterr().err.startswith("error: data:")

    def test_malformed_assign_exits_2(self, workspace, tmp_path, capsys):
        clip = workspace["clip"]
        assert main([
            "animate", "--checkpoint", str(workspace["ckpt"]),
            "--image", str(clip / "frames" / "frame_000000.png"),
            "--masks", str(clip / "masks" / "mask_000000.png"),
            "--ref", str(clip), "--assign", "water", "--out", str(tmp_path / "o"),
        ]) == 2
        capsys.readouterr()

    def test_out_of_range_assignment_exits_2(self, workspace, tmp_path, capsys):
        clip = workspace["clip"]
        assert main([
            "animate", "--checkpoint", str(workspace["ckpt"]),
            "--image", str(clip / "frames" / "frame_000000.png"),
            "--masks", str(clip / "masks" / "mask_000000.png"),
            "--ref", str(clip), "--assign", "water=5", "--out", str(tmp_path / "o"),
        ]) == 2
        assert capsys.readouterr().err.startswith("error: usage:")


class TestEval:
    def test_self_comparison_hits_caps(self, static_clip, capsys):
        assert main(["eval", str(static_clip), str(static_clip)]) == 0
        out = capsys.readouterr().out
        assert "masked_psnr=99.00" in out
        assert "masked_ssim=1.0000" in out
        assert "epe=0.0000" in out
        csv_path = static_clip / "metrics.csv"
        assert csv_path.exists()
        body = [ln for ln in csv_path.read_text().splitlines()
                if ln and not ln.startswith("#")]
        assert body[0].startswith("clip,")
        assert len(body) == 2

    def test_explicit_out_path(self, static_clip, tmp_path, capsys):
        out_csv = tmp_path / "m.csv"
        assert main(["eval", str(static_clip), str(static_clip),
                     "--out", str(out_csv)]) == 0
        capsys.readouterr()
        assert out_csv.exists()

    def test_missing_dir_exits_3(self, static_clip, tmp_path, capsys):
        assert main(["eval", str(tmp_path / "void"), str(static_clip)]) == 3
        assert capsys.readouterr().err.startswith("error: data:")

    def test_fully_dynamic_scene_exits_3(self, workspace, capsys):
        # both regions of the random scenes move, so there is no static
        # region to score and the tool must fail cleanly
        clip = workspace["clip"]
        assert main(["eval", str(clip), str(clip)]) == 3
        assert capsys.readouterr().err.startswith("error: data:")


class TestFlowviz:
    def test_renders_png(self, tmp_path, capsys):
        flow = torch.zeros(2, 8, 8)
        flow[0, :, 4:] = 2.0
        flo = tmp_path / "f.flo"
        write_flo(flo, flow)
        out = tmp_path / "f.png"
        assert main(["flowviz", str(flo), str(out)]) == 0
        capsys.readouterr()
        img = read_image(out)
        assert img.shape == (8, 8, 3)
        # zero flow renders white, moving pixels do not
        assert (img[:, :4] == 255).all()
        assert not (img[:, 4:] == 255).all()

    def test_missing_flo_exits_3(self, tmp_path, capsys):
        assert main(["flowviz", str(tmp_path / "nope.flo"),
                     str(tmp_path / "o.png")]) == 3
        assert capsys.readouterr().err.startswith("error: data:")

    def test_nonpositive_max_mag_exits_2(self, tmp_path, capsys):
        flo = tmp_path / "f.flo"
        write_flo(flo, torch.zeros(2, 4, 4))
        assert main(["flowviz", str(flo), str(tmp_path / "o.png"),
                     "--max-mag", "-1"]) == 2
        assert capsys.readouterr().err.startswith("error: format:")


class TestErrorReporting:
    def test_failure_is_exactly_one_stderr_line(self, tmp_path, capsys):
        assert main(["flowviz", str(tmp_path / "nope.flo"),
                     str(tmp_path / "o.png")]) == 3
        captured = capsys.readouterr()
        assert captured.err.count("\n") == 1
        assert captured.err.startswith("error: data: ")
