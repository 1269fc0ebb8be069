import numpy as np
import pytest
import torch

from icdiffusion.diffusion import make_schedule, training_loss
from icdiffusion.network import (
    BASE_PHASE,
    PROMPT_PHASE,
    CheckpointVersionError,
    CorruptCheckpointError,
    DiffusionModel,
    ModelConfig,
    PhaseError,
    TextEncoder,
    init_control_from_base,
    load_model,
    lock_encoder,
    locked_parameter_names,
    read_checkpoint,
    save_model,
)
from icdiffusion.vocab import UnknownTokenError

TINY = ModelConfig(
    resolution=8,
    base_channels=6,
    channel_mult=(1,),
    num_res_blocks=1,
    attn_resolutions=(4,),
    heads=1,
    temb_dim=12,
    d_text=6,
    text_layers=1,
    text_heads=1,
)

SMALL = ModelConfig(
    resolution=16,
    base_channels=8,
    channel_mult=(1, 2),
    num_res_blocks=1,
    attn_resolutions=(8, 4),
    heads=2,
    temb_dim=16,
    d_text=8,
    text_layers=1,
    text_heads=2,
)


def make_model(cfg=SMALL, phase=BASE_PHASE, seed=0):
    torch.manual_seed(seed)
    return DiffusionModel(cfg, phase=phase)


def make_prompt_model(cfg=SMALL, seed=0):
    base = make_model(cfg, seed=seed)
    torch.manual_seed(seed + 1)
    return init_control_from_base(base)


class TestTextEncoder:
    def test_dropped_text_is_exact_zero(self):
        torch.manual_seed(0)
        enc = TextEncoder(d_text=8, layers=1, heads=1)
        emb, mask = enc([None])
        assert torch.all(emb == 0.0)
        assert mask.shape == (1, 1) and mask.all()

    def test_dropped_text_in_mixed_batch_is_exact_zero(self):
        torch.manual_seed(0)
        enc = TextEncoder(d_text=8, layers=1, heads=1)
        emb, mask = enc([None, "a red circle"])
        assert torch.all(emb[0] == 0.0)
        assert not torch.all(emb[1] == 0.0)

    def test_same_caption_same_embedding(self):
        torch.manual_seed(1)
        enc = TextEncoder(d_text=8, layers=1, heads=1)
        a, _ = enc(["a red circle"])
        b, _ = enc(["a red circle"])
        assert torch.equal(a, b)

    def test_unknown_token_rejected(self):
        torch.manual_seed(0)
        enc = TextEncoder(d_text=8, layers=1, heads=1)
        with pytest.raises(UnknownTokenError):
            enc(["a purple rhombus"])

    def test_captions_diverge_after_training_step(self):
        torch.manual_seed(2)
        enc = TextEncoder(d_text=8, layers=1, heads=1)
        opt = torch.optim.Adam(enc.parameters(), lr=1e-3)
        emb_a, _ = enc(["a red circle"])
        emb_b, _ = enc(["a blue circle"])
        loss = ((emb_a - 1.0) ** 2).mean() + ((emb_b + 1.0) ** 2).mean()
        loss.backward()
        opt.step()
        a, _ = enc(["a red circle"])
        b, _ = enc(["a blue circle"])
        assert (a - b).norm().item() > 0


class TestUnetForward:
    def test_zero_init_identity(self):
        # keystone: a fresh control branch must leave the base model untouched
        model = make_prompt_model()
        x = torch.randn(2, 3, 16, 16)
        src, tgt, q = (torch.randn(2, 3, 16, 16) for _ in range(3))
        with torch.no_grad():
            without = model.predict_eps(x, 5, ["a red circle", None])
            with_ctrl = model.predict_eps(x, 5, ["a red circle", None], (src, tgt, q))
        assert (without - with_ctrl).abs().max().item() == 0.0

    def test_output_shape_matches_input(self):
        model = make_model()
        for batch in (1, 3):
            x = torch.randn(batch, 3, 16, 16)
            out = model.predict_eps(x, 2, ["a red circle"] * batch)
            assert out.shape == x.shape

    def test_forward_deterministic_single_threaded(self):
        torch.set_num_threads(1)
        model = make_model()
        x = torch.randn(2, 3, 16, 16)
        with torch.no_grad():
            a = model.predict_eps(x, 3, ["a red circle", "a blue square"])
            b = model.predict_eps(x, 3, ["a red circle", "a blue square"])
        assert torch.equal(a, b)

    def test_per_item_timesteps(self):
        model = make_model()
        x = torch.randn(2, 3, 16, 16)
        out = model.predict_eps(x, torch.tensor([1, 7]), ["a red circle", None])
        assert out.shape == x.shape

    def test_base_model_rejects_control(self):
        model = make_model()
        with pytest.raises(PhaseError):
            model.unet_forward(torch.randn(1, 3, 16, 16), 1, *model.text_encoder([None]), control=torch.zeros(1, 8, 8, 8))

    def test_resolution_divisibility_enforced(self):
        with pytest.raises(ValueError):
            DiffusionModel(ModelConfig(resolution=20, channel_mult=(1, 2, 4)))


class TestEncodePromptImages:
    def test_shape_arithmetic(self):
        # 32x32 inputs, base 64: pair path sees 6x32x32, output is 64x16x16
        torch.manual_seed(0)
        cfg = ModelConfig(resolution=32, base_channels=64, channel_mult=(1, 2), attn_resolutions=(16,), heads=4)
        model = DiffusionModel(cfg, phase=PROMPT_PHASE)
        src, tgt, q = (torch.randn(2, 3, 32, 32) for _ in range(3))
        feats = model.encode_prompt_images(src, tgt, q)
        assert feats.shape == (2, 64, 16, 16)

    def test_resolution_mismatch_rejected(self):
        model = make_prompt_model()
        src = torch.randn(1, 3, 16, 16)
        bad = torch.randn(1, 3, 8, 8)
        with pytest.raises(ValueError):
            model.encode_prompt_images(src, bad, src)

    def test_zero_weights_give_input_independent_output(self):
        model = make_prompt_model()
        for p in model.control.pair_encoder.parameters():
            torch.nn.init.zeros_(p)
        for p in model.control.query_encoder.parameters():
            torch.nn.init.zeros_(p)
        with torch.no_grad():
            a = model.encode_prompt_images(*(torch.randn(1, 3, 16, 16) for _ in range(3)))
            b = model.encode_prompt_images(*(torch.randn(1, 3, 16, 16) for _ in range(3)))
        assert torch.equal(a, b)  # bias terms only

    def test_swapping_example_pair_changes_features(self):
        model = make_prompt_model()
        src, tgt, q = (torch.randn(1, 3, 16, 16) for _ in range(3))
        with torch.no_grad():
            ab = model.encode_prompt_images(src, tgt, q)
            ba = model.encode_prompt_images(tgt, src, q)
        assert (ab - ba).norm().item() > 0

    def test_query_only_model_ignores_examples(self):
        torch.manual_seed(3)
        cfg = ModelConfig(
            resolution=16, base_channels=8, channel_mult=(1, 2), num_res_blocks=1,
            attn_resolutions=(8,), heads=2, temb_dim=16, d_text=8, text_layers=1,
            text_heads=2, use_pair_encoder=False,
        )
        model = DiffusionModel(cfg, phase=PROMPT_PHASE)
        q = torch.randn(1, 3, 16, 16)
        with torch.no_grad():
            feats = model.encode_prompt_images(None, None, q)
        assert feats.shape == (1, 8, 8, 8)


class TestGradientCorrectness:
    def test_backprop_matches_central_differences(self):
        # double precision, tiny (<10k param) config, h = 1e-4
        torch.manual_seed(7)
        model = DiffusionModel(TINY).double()
        n_params = sum(p.numel() for p in model.parameters())
        assert n_params <= 10_000
        rng = np.random.default_rng(0)
        x0 = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 8, 8)))
        eps = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)))
        texts = ["a red circle", "a blue square"]

        def loss_value():
            return training_loss(model.predict_eps(x0, torch.tensor([2, 5]), texts), eps)

        model.zero_grad()
        loss_value().backward()
        named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
        flat = [(n, p, i) for n, p in named for i in range(0, p.numel(), max(1, p.numel() // 2))]
        picks = rng.choice(len(flat), size=64, replace=False)
        h = 1e-4
        checked = 0
        for k in picks:
            name, p, i = flat[k]
            bp = p.grad.view(-1)[i].item()
            if abs(bp) < 1e-8:
                continue
            with torch.no_grad():
                orig = p.view(-1)[i].item()
                p.view(-1)[i] = orig + h
                lp = loss_value().item()
                p.view(-1)[i] = orig - h
                lm = loss_value().item()
                p.view(-1)[i] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - bp) / max(abs(fd), abs(bp))
            assert rel < 1e-3, f"{name}[{i}]: bp={bp} fd={fd} rel={rel}"
            checked += 1
        assert checked >= 32

    def test_control_branch_gradients(self):
        torch.manual_seed(8)
        model = make_prompt_model(TINY, seed=8).double()
        lock_encoder(model)
        rng = np.random.default_rng(1)
        x0 = torch.from_numpy(rng.uniform(-1, 1, (1, 3, 8, 8)))
        eps = torch.from_numpy(rng.standard_normal((1, 3, 8, 8)))
        images = tuple(torch.from_numpy(rng.uniform(-1, 1, (1, 3, 8, 8))) for _ in range(3))

        def loss_value():
            return training_loss(model.predict_eps(x0, 3, ["a red circle"], images), eps)

        model.zero_grad()
        loss_value().backward()
        h = 1e-4
        checked = 0
        for name, p in model.named_parameters():
            if not name.startswith("control.") or p.grad is None:
                continue
            bp = p.grad.view(-1)[0].item()
            if abs(bp) < 1e-8:
                continue
            with torch.no_grad():
                orig = p.view(-1)[0].item()
                p.view(-1)[0] = orig + h
                lp = loss_value().item()
                p.view(-1)[0] = orig - h
                lm = loss_value().item()
                p.view(-1)[0] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - bp) / max(abs(fd), abs(bp)) < 1e-3, name
            checked += 1
            if checked >= 8:
                break
        assert checked >= 4


class TestControlInit:
    def test_weights_copied_from_base(self):
        base = make_model()
        torch.manual_seed(11)
        model = init_control_from_base(base)
        base_state = base.base.state_dict()
        for name, tensor in model.control.encoder.state_dict().items():
            assert torch.equal(tensor, base_state[name]), name

    def test_connectors_all_zero(self):
        model = make_prompt_model()
        for conv in list(model.control.zero_convs) + [model.control.zero_conv_mid]:
            for p in conv.parameters():
                assert torch.all(p == 0.0)

    def test_promoting_prompt_model_rejected(self):
        model = make_prompt_model()
        with pytest.raises(PhaseError):
            init_control_from_base(model)

    def test_base_path_identical_after_promotion(self):
        base = make_model()
        torch.manual_seed(12)
        model = init_control_from_base(base)
        x = torch.randn(2, 3, 16, 16)
        with torch.no_grad():
            a = base.predict_eps(x, 4, ["a red circle", None])
            b = model.predict_eps(x, 4, ["a red circle", None])
        assert torch.equal(a, b)


class TestLockEncoder:
    def test_locked_weights_frozen_through_training(self):
        model = make_prompt_model(TINY, seed=20)
        lock_encoder(model)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        locked = set(locked_parameter_names(model))
        assert locked, "some parameters must be locked"
        opt = torch.optim.Adam(model.trainable_parameters(), lr=1e-3)
        rng = np.random.default_rng(2)
        for _ in range(100):
            x0 = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 8, 8))).float()
            eps = torch.from_numpy(rng.standard_normal((2, 3, 8, 8))).float()
            images = tuple(torch.from_numpy(rng.uniform(-1, 1, (2, 3, 8, 8))).float() for _ in range(3))
            loss = training_loss(model.predict_eps(x0, 3, ["a red circle", None], images), eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
        after = dict(model.named_parameters())
        for name in locked:
            assert torch.equal(before[name], after[name]), name
        decoder_delta = max(
            (after[n] - before[n]).abs().max().item() for n in after if n.startswith("up_levels.")
        )
        assert decoder_delta > 0

    def test_optimizer_sees_no_locked_parameters(self):
        model = make_prompt_model(TINY, seed=21)
        lock_encoder(model)
        opt = torch.optim.Adam(model.trainable_parameters(), lr=1e-3)
        opt_params = {id(p) for group in opt.param_groups for p in group["params"]}
        for name, p in model.named_parameters():
            if not p.requires_grad:
                assert id(p) not in opt_params, name

    def test_lock_requires_prompt_phase(self):
        with pytest.raises(PhaseError):
            lock_encoder(make_model())

    def test_locked_set_is_exactly_stem_and_levels(self):
        model = make_prompt_model(TINY, seed=22)
        lock_encoder(model)
        for name in locked_parameter_names(model):
            assert name.startswith(("base.stem.", "base.levels."))
        for name, p in model.named_parameters():
            if name.startswith(("base.middle.", "base.time_mlp.", "up_levels.", "control.", "text_encoder.")):
                assert p.requires_grad, name


class TestCheckpoint:
    def test_round_trip_preserves_weights(self, tmp_path):
        model = make_model(seed=30)
        sched = make_schedule(50, 1e-4, 0.02)
        path = str(tmp_path / "m.ckpt")
        save_model(path, model, sched, step=12, corpus_fingerprint="abc")
        loaded, sched2, ckpt = load_model(path)
        assert ckpt.step == 12 and ckpt.corpus_fingerprint == "abc"
        assert sched2.T == 50
        for (n1, p1), (n2, p2) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_save_load_save_byte_identical(self, tmp_path):
        model = make_prompt_model(seed=31)
        sched = make_schedule(20, 1e-3, 0.1)
        p1 = str(tmp_path / "a.ckpt")
        p2 = str(tmp_path / "b.ckpt")
        save_model(p1, model, sched, step=5, corpus_fingerprint="xyz")
        loaded, sched2, ckpt = load_model(p1)
        save_model(p2, loaded, sched2, step=ckpt.step, corpus_fingerprint=ckpt.corpus_fingerprint, opt_step=ckpt.opt_step)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            assert f1.read() == f2.read()

    def test_truncated_file_detected(self, tmp_path):
        model = make_model(seed=32)
        sched = make_schedule(10, 1e-3, 0.1)
        path = str(tmp_path / "m.ckpt")
        save_model(path, model, sched, step=1)
        with open(path, "rb") as fh:
            raw = fh.read()
        bad = str(tmp_path / "bad.ckpt")
        with open(bad, "wb") as fh:
            fh.write(raw[: len(raw) // 2])
        with pytest.raises(CorruptCheckpointError):
            read_checkpoint(bad)

    def test_garbage_file_detected(self, tmp_path):
        bad = str(tmp_path / "junk.ckpt")
        with open(bad, "wb") as fh:
            fh.write(b"not a checkpoint at all")
        with pytest.raises(CorruptCheckpointError):
            read_checkpoint(bad)

    def test_version_mismatch_detected(self, tmp_path):
        import json
        import struct

        model = make_model(seed=33)
        sched = make_schedule(10, 1e-3, 0.1)
        path = str(tmp_path / "m.ckpt")
        save_model(path, model, sched, step=1)
        with open(path, "rb") as fh:
            raw = fh.read()
        (hlen,) = struct.unpack("<Q", raw[4:12])
        header = json.loads(raw[12 : 12 + hlen])
        header["format_version"] = 999
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        bad = str(tmp_path / "v.ckpt")
        with open(bad, "wb") as fh:
            fh.write(raw[:4] + struct.pack("<Q", len(hb)) + hb + raw[12 + hlen :])
        with pytest.raises(CheckpointVersionError):
            read_checkpoint(bad)

    def test_phase_guard(self, tmp_path):
        model = make_model(seed=34)
        sched = make_schedule(10, 1e-3, 0.1)
        path = str(tmp_path / "base.ckpt")
        save_model(path, model, sched, step=1)
        with pytest.raises(PhaseError):
            load_model(path, expect_phase=PROMPT_PHASE)
