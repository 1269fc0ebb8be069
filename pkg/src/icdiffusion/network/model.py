"""Full denoiser model: base text-to-image phase and prompted control phase."""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .text import TextEncoder
from .unet import (
    DecoderLevel,
    ModelConfig,
    StackedConvEncoder,
    UNetEncoder,
    Upsample,
    zero_module,
    _norm,
)

BASE_PHASE = "base"
PROMPT_PHASE = "prompt"


class PhaseError(RuntimeError):
    pass


class ControlBranch(nn.Module):
    """Encoder/middle copy fed by prompt features, tapped through zero convs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = UNetEncoder(cfg)
        cin_pair = 6  # example source and target concatenated on channels
        self.pair_encoder = StackedConvEncoder(cin_pair, cfg.base_channels) if cfg.use_pair_encoder else None
        self.query_encoder = StackedConvEncoder(3, cfg.base_channels)
        skip_channels = _skip_channels(cfg)
        self.zero_convs = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c in skip_channels)
        mid_ch = cfg.base_channels * cfg.channel_mult[-1]
        self.zero_conv_mid = zero_module(nn.Conv2d(mid_ch, mid_ch, 1))

    def prompt_features(
        self,
        example_src: torch.Tensor | None,
        example_tgt: torch.Tensor | None,
        query: torch.Tensor,
    ) -> torch.Tensor:
        """Sum of the example-pair encoding and the query encoding.

        The pair path consumes the 6-channel concatenation [src; tgt]; both
        paths downsample once to the first-level resolution and are summed
        elementwise. Without a pair encoder (query-only baseline) the query
        encoding is returned alone.
        """
        feats = self.query_encoder(query)
        if self.pair_encoder is not None:
            if example_src is None or example_tgt is None:
                raise ValueError("this model requires an example pair in the prompt")
            if example_src.shape != query.shape or example_tgt.shape != query.shape:
                raise ValueError("prompt images must share one resolution")
            feats = feats + self.pair_encoder(torch.cat([example_src, example_tgt], dim=1))
        return feats

    def forward(self, x, t, text, mask, prompt_map):
        temb = self.encoder.time_mlp(t, x.dtype)
        skips: list[torch.Tensor] = []
        h = self.encoder.stem(x) + prompt_map
        skips.append(h)
        for level in self.encoder.levels:
            h = level(h, temb, text, mask, skips)
        h = self.encoder.middle(h, temb, text, mask)
        residuals = [conv(s) for conv, s in zip(self.zero_convs, skips)]
        return residuals, self.zero_conv_mid(h)


def _skip_channels(cfg: ModelConfig) -> list[int]:
    chans = [cfg.base_channels * m for m in cfg.channel_mult]
    out = [cfg.base_channels]
    for i, c in enumerate(chans):
        out.extend([c] * cfg.num_res_blocks)
        if i < len(chans) - 1:
            out.append(c)
    return out


class DiffusionModel(nn.Module):
    """Text-conditioned denoiser; in prompt phase also carries a control branch."""

    def __init__(self, config: ModelConfig, phase: str = BASE_PHASE):
        super().__init__()
        config.validate()
        if phase not in (BASE_PHASE, PROMPT_PHASE):
            raise PhaseError(f"unknown phase {phase!r}")
        self.config = config
        self.phase = phase
        self.text_encoder = TextEncoder(config.d_text, config.text_layers, config.text_heads)
        self.base = UNetEncoder(config)
        chans = [config.base_channels * m for m in config.channel_mult]
        skip_channels = _skip_channels(config)
        self.up_levels = nn.ModuleList()
        ch = chans[-1]
        idx = len(skip_channels)
        for i in reversed(range(len(chans))):
            take = config.num_res_blocks + 1
            level_skips = [skip_channels[idx - k - 1] for k in range(take)]
            idx -= take
            self.up_levels.append(
                DecoderLevel(level_skips, ch, chans[i], config.level_resolutions[i], config, first_level=(i == 0))
            )
            ch = chans[i]
        self.final_up = Upsample(chans[0])
        self.out_norm = _norm(chans[0])
        self.out_conv = nn.Conv2d(chans[0], 3, 3, padding=1)
        self.control = ControlBranch(config) if phase == PROMPT_PHASE else None

    def _as_t_tensor(self, t, batch: int) -> torch.Tensor:
        if isinstance(t, int):
            return torch.full((batch,), t, dtype=torch.long)
        t = torch.as_tensor(t)
        return t.expand(batch) if t.ndim == 0 else t

    def unet_forward(
        self,
        x_t: torch.Tensor,
        t,
        text_emb: torch.Tensor,
        text_mask: torch.Tensor,
        control: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Predict eps from x_t at step(s) t.

        `control`, when present, is the prompt feature map; the control
        branch consumes it and its zero-conv outputs are added to the base
        middle output and decoder skip connections.
        """
        tt = self._as_t_tensor(t, x_t.shape[0])
        temb = self.base.time_mlp(tt, x_t.dtype)
        skips: list[torch.Tensor] = []
        h = self.base.stem(x_t)
        skips.append(h)
        for level in self.base.levels:
            h = level(h, temb, text_emb, text_mask, skips)
        h = self.base.middle(h, temb, text_emb, text_mask)
        if control is not None:
            if self.control is None:
                raise PhaseError("base-phase model cannot take a control input")
            residuals, mid_res = self.control(x_t, tt, text_emb, text_mask, control)
            h = h + mid_res
            skips = [s + r for s, r in zip(skips, residuals)]
        for level in self.up_levels:
            h = level(h, temb, text_emb, text_mask, skips)
        h = self.final_up(h)
        return self.out_conv(F.silu(self.out_norm(h)))

    def encode_prompt_images(self, example_src, example_tgt, query) -> torch.Tensor:
        if self.control is None:
            raise PhaseError("base-phase model has no prompt-image encoders")
        return self.control.prompt_features(example_src, example_tgt, query)

    def predict_eps(self, x_t: torch.Tensor, t, texts: list[str | None], prompt_images=None) -> torch.Tensor:
        """Full conditional forward: encode text, encode prompt images, denoise.

        `prompt_images` is (example_src, example_tgt, query) as (B, 3, H, W)
        tensors (example entries may be None for query-only models).
        """
        text_emb, mask = self.text_encoder(texts)
        control = None
        if prompt_images is not None:
            control = self.encode_prompt_images(*prompt_images)
        return self.unet_forward(x_t, t, text_emb, mask, control)

    def predictor(self):
        """Adapter for the sampler: maps prompt objects to tensor inputs.

        Prompt objects need `.text_guidance`, `.query`, `.example_source`,
        `.example_target` (arrays or None); a bare list groups a batch.
        """

        def _stack(values):
            if any(v is None for v in values):
                return None
            ts = [torch.as_tensor(np.asarray(v), dtype=torch.float32) for v in values]
            return torch.stack(ts)

        def predict(x_t, t, prompt):
            prompts = prompt if isinstance(prompt, (list, tuple)) else [prompt]
            texts = [p.text_guidance for p in prompts]
            images = None
            if self.phase == PROMPT_PHASE:
                src = _stack([p.example_source for p in prompts])
                tgt = _stack([p.example_target for p in prompts])
                query = _stack([p.query for p in prompts])
                if query is None:
                    raise ValueError("prompt-phase sampling requires a query image")
                images = (
                    src.to(x_t.dtype) if src is not None else None,
                    tgt.to(x_t.dtype) if tgt is not None else None,
                    query.to(x_t.dtype),
                )
            with torch.no_grad():
                return self.predict_eps(x_t, t, texts, images)

        return predict

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def init_control_from_base(base_model: DiffusionModel, config_override: ModelConfig | None = None) -> DiffusionModel:
    """Promote a base-phase model: clone it and graft a control branch.

    The control encoder/middle (and its time embedding) start as exact copies
    of the base encoder; all connectors are zero, so the promoted model's
    predictions initially coincide with the base model's for any prompt.
    Pair/query encoders are freshly initialized. `config_override` may change
    control-branch flags (e.g. disable the pair encoder for the query-only
    baseline) but must keep the trunk architecture identical.
    """
    if base_model.phase != BASE_PHASE:
        raise PhaseError(f"expected a base-phase model, got {base_model.phase!r}")
    config = config_override or base_model.config
    model = DiffusionModel(config, phase=PROMPT_PHASE)
    model.text_encoder.load_state_dict(base_model.text_encoder.state_dict())
    model.base.load_state_dict(base_model.base.state_dict())
    for dst, src in zip(model.up_levels, base_model.up_levels):
        dst.load_state_dict(src.state_dict())
    model.final_up.load_state_dict(base_model.final_up.state_dict())
    model.out_norm.load_state_dict(base_model.out_norm.state_dict())
    model.out_conv.load_state_dict(base_model.out_conv.state_dict())
    model.control.encoder.load_state_dict(base_model.base.state_dict())
    return model


def lock_encoder(model: DiffusionModel) -> DiffusionModel:
    """Freeze the base encoder blocks (stem + down levels, attention included).

    The decoder, middle block, trunk time embedding, text encoder, and the
    whole control branch stay trainable.
    """
    if model.phase != PROMPT_PHASE:
        raise PhaseError("lock_encoder applies to prompt-phase models")
    for p in model.base.stem.parameters():
        p.requires_grad_(False)
    for p in model.base.levels.parameters():
        p.requires_grad_(False)
    if not model.config.train_text_encoder:
        for p in model.text_encoder.parameters():
            p.requires_grad_(False)
    return model


def locked_parameter_names(model: DiffusionModel) -> list[str]:
    return [n for n, p in model.named_parameters() if not p.requires_grad]
