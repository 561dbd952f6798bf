"""Training protocol, loop behavior, and checkpoints."""

import pytest
import torch

from flowscape.encoder import EncoderConfig, MotionEncoder
from flowscape.errors import DataError, NumericError
from flowscape.flow_ops import flip_horizontal, warp_backward
from flowscape.generator import FlowGenerator, GeneratorConfig, build_latent_map
from flowscape.losses import LossConfig, loss_flow, loss_frame, loss_total, loss_tv
from flowscape.synth import make_scene, random_scene_spec
from flowscape.training import (
    TrainConfig,
    build_training_sample,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history_csv,
)

SMALL_ENC = EncoderConfig(widths=(8, 16))
SMALL_GEN = GeneratorConfig(flow_divisor=8.0, depth=2, base_width=8)


def small_clips(n=4, size=32, frame_count=3, base_seed=100):
    return [make_scene(random_scene_spec(base_seed + i, size=size, frame_count=frame_count))
            for i in range(n)]


class TestBuildTrainingSample:
    def test_default_protocol_mirrors_encoder_side_only(self):
        clip = small_clips(1)[0]
        sample = build_training_sample(clip, 1)
        # supervision stays bit-equal to the originals
        assert torch.equal(sample.target_flow, clip.flows[1])
        assert torch.equal(sample.target_frame, clip.frames[2])
        assert torch.equal(sample.gen_image, clip.frames[1])
        assert torch.equal(sample.gen_masks, clip.masks[1])
        # encoder sees the mirrored flow/masks at half resolution, values kept
        from flowscape.encoder import prepare_encoder_inputs

        exp_flow, exp_masks = prepare_encoder_inputs(
            flip_horizontal(clip.flows[1]), flip_horizontal(clip.masks[1])
        )
        assert torch.equal(sample.encoder_flow, exp_flow)
        assert torch.equal(sample.encoder_masks, exp_masks)

    def test_mirroring_preserves_flow_values(self):
        clip = small_clips(1)[0]
        sample = build_training_sample(clip, 0)
        orig_values = set(clip.flows[0].flatten().tolist())
        mirrored_values = set(sample.encoder_flow.flatten().tolist())
        # average pooling cannot invent values outside the original range,
        # and mirroring must not negate anything
        assert min(mirrored_values) >= min(orig_values)
        assert max(mirrored_values) <= max(orig_values)

    def test_flip_targets_protocol_mirrors_generator_side(self):
        clip = small_clips(1)[0]
        sample = build_training_sample(clip, 0, protocol="flip-targets")
        assert torch.equal(sample.gen_image, flip_horizontal(clip.frames[0]))
        assert torch.equal(sample.target_flow, flip_horizontal(clip.flows[0]))
        assert torch.equal(sample.target_frame, flip_horizontal(clip.frames[1]))
        from flowscape.encoder import prepare_encoder_inputs

        exp_flow, _ = prepare_encoder_inputs(clip.flows[0], clip.masks[0])
        assert torch.equal(sample.encoder_flow, exp_flow)

    def test_none_protocol_flips_nothing(self):
        clip = small_clips(1)[0]
        sample = build_training_sample(clip, 0, protocol="none")
        from flowscape.encoder import prepare_encoder_inputs

        exp_flow, exp_masks = prepare_encoder_inputs(clip.flows[0], clip.masks[0])
        assert torch.equal(sample.encoder_flow, exp_flow)
        assert torch.equal(sample.encoder_masks, exp_masks)

    def test_bad_t_index_rejected(self):
        clip = small_clips(1)[0]
        with pytest.raises(ValueError):
            build_training_sample(clip, clip.num_steps)
        with pytest.raises(ValueError):
            build_training_sample(clip, -1)

    def test_unknown_protocol_rejected(self):
        clip = small_clips(1)[0]
        with pytest.raises(ValueError):
            build_training_sample(clip, 0, protocol="mirror-everything")


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == pytest.approx(1e-4)
        assert cfg.epochs == 500
        assert cfg.stride == 4

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(protocol="sideways")


class TestTrainLoop:
    def test_loss_decreases_on_toy_data(self):
        clips = small_clips(4)
        result = train(
            clips,
            TrainConfig(lr=1e-3, epochs=30, batch=4, seed=0),
            LossConfig(),
            SMALL_ENC,
            SMALL_GEN,
        )
        assert len(result.history) == 30
        assert result.history[-1]["loss_total"] < result.history[0]["loss_total"]
        assert result.final_loss == result.history[-1]["loss_total"]

    def test_same_seed_reproduces_curve_and_weights(self):
        clips = small_clips(3)
        kwargs = dict(
            train_config=TrainConfig(lr=1e-3, epochs=5, batch=4, seed=7),
            loss_config=LossConfig(),
            encoder_config=SMALL_ENC,
            generator_config=SMALL_GEN,
        )
        a = train(clips, **kwargs)
        b = train(clips, **kwargs)
        assert a.history == b.history
        for pa, pb in zip(a.encoder.parameters(), b.encoder.parameters()):
            assert torch.equal(pa, pb)
        for pa, pb in zip(a.generator.parameters(), b.generator.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_diverges(self):
        clips = small_clips(3)
        a = train(clips, TrainConfig(lr=1e-3, epochs=3, batch=4, seed=0),
                  LossConfig(), SMALL_ENC, SMALL_GEN)
        b = train(clips, TrainConfig(lr=1e-3, epochs=3, batch=4, seed=1),
                  LossConfig(), SMALL_ENC, SMALL_GEN)
        assert a.history != b.history

    def test_zero_weights_reduce_to_frame_loss(self):
        clips = small_clips(2)
        result = train(
            clips,
            TrainConfig(lr=1e-3, epochs=2, batch=2, seed=0),
            LossConfig(alpha=0.0, beta=0.0),
            SMALL_ENC,
            SMALL_GEN,
        )
        for row in result.history:
            assert row["loss_total"] == pytest.approx(row["loss_frame"], rel=1e-6)

    def test_empty_dataset_is_data_error(self):
        with pytest.raises(DataError):
            train([], TrainConfig(epochs=1), LossConfig(), SMALL_ENC, SMALL_GEN)

    def test_mixed_sizes_are_data_error(self):
        clips = small_clips(1, size=32) + small_clips(1, size=64)
        with pytest.raises(DataError, match="size"):
            train(clips, TrainConfig(epochs=1), LossConfig(), SMALL_ENC, SMALL_GEN)

    def test_divergence_dumps_diagnostics_and_raises(self, tmp_path):
        clips = small_clips(2)
        with pytest.raises(NumericError, match="non-finite"):
            train(
                clips,
                TrainConfig(lr=1e30, epochs=50, batch=2, seed=0),
                LossConfig(),
                SMALL_ENC,
                SMALL_GEN,
                dump_dir=tmp_path,
            )
        dumps = list(tmp_path.glob("diagnostic_*.npz"))
        assert len(dumps) == 1
        import numpy as np

        data = np.load(dumps[0])
        assert "flows_hat" in data and "latents" in data and "target_flow" in data

    def test_history_csv(self, tmp_path):
        clips = small_clips(2)
        log = tmp_path / "loss.csv"
        result = train(clips, TrainConfig(lr=1e-3, epochs=3, batch=2, seed=0),
                       LossConfig(), SMALL_ENC, SMALL_GEN, log_path=log)
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "epoch,loss_total,loss_frame,loss_flow,loss_tv"
        assert len(lines) == 1 + len(result.history)


class TestCheckpoints:
    def test_round_trip_is_bitwise(self, tmp_path):
        clips = small_clips(2)
        result = train(clips, TrainConfig(lr=1e-3, epochs=2, batch=2, seed=3),
                       LossConfig(), SMALL_ENC, SMALL_GEN)
        path = save_checkpoint(tmp_path / "model.npz", result.encoder, result.generator,
                               LossConfig(), TrainConfig(lr=1e-3, epochs=2, batch=2, seed=3))
        encoder, generator, meta = load_checkpoint(path)
        for (name, pa), pb in zip(
            result.encoder.state_dict().items(), encoder.state_dict().values()
        ):
            assert torch.equal(pa, pb), name
        for (name, pa), pb in zip(
            result.generator.state_dict().items(), generator.state_dict().values()
        ):
            assert torch.equal(pa, pb), name
        assert meta["train_config"]["seed"] == 3
        assert meta["encoder_config"]["widths"] == list(SMALL_ENC.widths)

    def test_reloaded_model_generates_identically(self, tmp_path):
        clips = small_clips(2)
        result = train(clips, TrainConfig(lr=1e-3, epochs=2, batch=2, seed=0),
                       LossConfig(), SMALL_ENC, SMALL_GEN)
        path = save_checkpoint(tmp_path / "model.npz", result.encoder, result.generator)
        encoder, generator, _ = load_checkpoint(path)
        clip = clips[0]
        from flowscape.encoder import prepare_encoder_inputs

        with torch.no_grad():
            ef, em = prepare_encoder_inputs(clip.flows[0], clip.masks[0])
            la = result.encoder.encode(ef, em)
            lb = encoder.encode(ef, em)
            assert torch.equal(la.values, lb.values)
            fa = result.generator.generate_flow(build_latent_map(la, clip.masks[0]), clip.frames[0])
            fb = generator.generate_flow(build_latent_map(lb, clip.masks[0]), clip.frames[0])
            assert torch.equal(fa, fb)

    def test_missing_checkpoint_is_data_error(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent.npz")

    def test_garbage_checkpoint_is_data_error(self, tmp_path):
        path = tmp_path / "garbage.npz"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_checkpoint_without_configs_is_data_error(self, tmp_path):
        import numpy as np

        path = tmp_path / "half.npz"
        np.savez(path, some_array=np.zeros(3))
        with pytest.raises(DataError, match="config"):
            load_checkpoint(path)


class TestEndToEndGradient:
    def test_full_objective_gradient_matches_finite_differences(self):
        # d(total loss)/d(input flow) through encoder, latent map,
        # generator, warp, and all three loss terms
        torch.manual_seed(0)
        encoder = MotionEncoder(EncoderConfig(widths=(4, 4)), seed=0).double()
        generator = FlowGenerator(
            GeneratorConfig(flow_divisor=8.0, depth=2, base_width=4), seed=1
        ).double()
        cfg = LossConfig()
        g = torch.Generator().manual_seed(1)
        size = 16
        masks = torch.zeros(2, size, size, dtype=torch.float64)
        masks[0, :, : size // 2] = 1.0
        masks[1, :, size // 2 :] = 1.0
        image = (torch.rand(3, size, size, generator=g, dtype=torch.float64) * 1.6 - 0.8)
        target_frame = (torch.rand(3, size, size, generator=g, dtype=torch.float64) * 1.6 - 0.8)
        target_flow = torch.randn(2, size, size, generator=g, dtype=torch.float64)
        enc_masks = masks[:, ::2, ::2]

        def objective(flow_half):
            values, _ = encoder.encode_rows(
                flow_half.unsqueeze(0).expand(2, -1, -1, -1), enc_masks.unsqueeze(1)
            )
            lmap = torch.einsum("nd,nhw->dhw", values, masks)
            flow_hat = generator.generate_flow(lmap, image)
            frame_hat = warp_backward(image, flow_hat)
            return loss_total(
                loss_frame(frame_hat, target_frame),
                loss_flow(flow_hat, target_flow),
                loss_tv(flow_hat, frame_hat, cfg.sigma),
                cfg,
            )

        flow_half = torch.randn(2, size // 2, size // 2, generator=g,
                                dtype=torch.float64, requires_grad=True)
        objective(flow_half).backward()
        analytic = flow_half.grad.clone()
        eps = 1e-5
        checked = 0
        for _ in range(15):
            c = int(torch.randint(0, 2, (), generator=g))
            y = int(torch.randint(0, size // 2, (), generator=g))
            x = int(torch.randint(0, size // 2, (), generator=g))
            with torch.no_grad():
                probe = flow_half.detach().clone()
                probe[c, y, x] += eps
                up = float(objective(probe))
                probe[c, y, x] -= 2 * eps
                down = float(objective(probe))
            numeric = (up - down) / (2 * eps)
            ref = float(analytic[c, y, x])
            denom = max(abs(numeric), abs(ref), 1e-8)
            assert abs(numeric - ref) / denom < 1e-3
            checked += 1
        assert checked == 15
