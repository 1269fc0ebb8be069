"""Checkpoint archive: one JSON header plus raw float32 weight blobs.

File layout:
    magic "ICDF" | uint64 little-endian header length | header JSON (utf-8)
    | concatenated little-endian float32 blobs

The header carries {format_version, phase, step, corpus_fingerprint, config,
schedule, opt_step, index} where index maps blob name -> {offset, shape}
(offsets relative to the blob section). Blob names are written in sorted
order, so save -> load -> save is byte-identical. Optimizer moments live
under "opt/", EMA shadows under "ema/", model weights under "model/".
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from ..diffusion import NoiseSchedule, make_schedule
from .model import BASE_PHASE, PROMPT_PHASE, DiffusionModel, PhaseError
from .unet import ModelConfig

MAGIC = b"ICDF"
FORMAT_VERSION = 1


class CorruptCheckpointError(RuntimeError):
    pass


class CheckpointVersionError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    phase: str
    step: int
    corpus_fingerprint: str
    config: ModelConfig
    schedule: NoiseSchedule
    tensors: dict[str, np.ndarray]
    opt_step: int = 0

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k[len("model/") :]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def opt_tensors(self) -> dict[str, np.ndarray]:
        return {k[len("opt/") :]: v for k, v in self.tensors.items() if k.startswith("opt/")}

    def ema_tensors(self) -> dict[str, np.ndarray]:
        return {k[len("ema/") :]: v for k, v in self.tensors.items() if k.startswith("ema/")}


def _config_to_dict(config: ModelConfig) -> dict:
    return {
        "resolution": config.resolution,
        "base_channels": config.base_channels,
        "channel_mult": list(config.channel_mult),
        "num_res_blocks": config.num_res_blocks,
        "attn_resolutions": list(config.attn_resolutions),
        "heads": config.heads,
        "temb_dim": config.temb_dim,
        "d_text": config.d_text,
        "text_layers": config.text_layers,
        "text_heads": config.text_heads,
        "train_text_encoder": config.train_text_encoder,
        "use_pair_encoder": config.use_pair_encoder,
    }


def _config_from_dict(obj: dict) -> ModelConfig:
    return ModelConfig(
        resolution=obj["resolution"],
        base_channels=obj["base_channels"],
        channel_mult=tuple(obj["channel_mult"]),
        num_res_blocks=obj["num_res_blocks"],
        attn_resolutions=tuple(obj["attn_resolutions"]),
        heads=obj["heads"],
        temb_dim=obj["temb_dim"],
        d_text=obj["d_text"],
        text_layers=obj["text_layers"],
        text_heads=obj["text_heads"],
        train_text_encoder=obj["train_text_encoder"],
        use_pair_encoder=obj["use_pair_encoder"],
    )


def write_checkpoint(
    path: str,
    tensors: dict[str, np.ndarray],
    phase: str,
    step: int,
    corpus_fingerprint: str,
    config: ModelConfig,
    schedule: NoiseSchedule,
    opt_step: int = 0,
) -> None:
    """Serialize tensors atomically (write temp file, rename into place)."""
    names = sorted(tensors)
    blobs = []
    index = {}
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blobs.append(arr.tobytes())
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        offset += len(blobs[-1])
    header = {
        "format_version": FORMAT_VERSION,
        "phase": phase,
        "step": step,
        "corpus_fingerprint": corpus_fingerprint,
        "config": _config_to_dict(config),
        "schedule": {"T": schedule.T, "beta_start": schedule.beta_start, "beta_end": schedule.beta_end},
        "opt_step": opt_step,
        "index": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic, not a checkpoint file")
    if len(raw) < 12:
        raise CorruptCheckpointError(f"{path}: truncated before header")
    (header_len,) = struct.unpack("<Q", raw[4:12])
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    index = header["index"]
    expected = header_end + sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in index.values())
    if len(raw) != expected:
        raise CorruptCheckpointError(f"{path}: size {len(raw)} != expected {expected} (corrupt index or truncation)")
    tensors = {}
    for name, entry in index.items():
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = header_end + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
        tensors[name] = arr.copy()
    return Checkpoint(
        phase=header["phase"],
        step=header["step"],
        corpus_fingerprint=header["corpus_fingerprint"],
        config=_config_from_dict(header["config"]),
        schedule=make_schedule(**header["schedule"]),
        tensors=tensors,
        opt_step=header.get("opt_step", 0),
    )


def model_state_tensors(model: DiffusionModel) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in model.state_dict().items():
        if tensor.dtype != torch.float32:
            raise ValueError(f"non-float32 state entry {name}: {tensor.dtype}")
        out[f"model/{name}"] = tensor.detach().cpu().numpy()
    return out


def save_model(
    path: str,
    model: DiffusionModel,
    schedule: NoiseSchedule,
    step: int,
    corpus_fingerprint: str = "",
    opt_tensors: dict[str, np.ndarray] | None = None,
    opt_step: int = 0,
    ema_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    tensors = model_state_tensors(model)
    for name, arr in (opt_tensors or {}).items():
        tensors[f"opt/{name}"] = arr
    for name, arr in (ema_tensors or {}).items():
        tensors[f"ema/{name}"] = arr
    write_checkpoint(path, tensors, model.phase, step, corpus_fingerprint, model.config, schedule, opt_step)


def load_model(path: str, expect_phase: str | None = None) -> tuple[DiffusionModel, NoiseSchedule, Checkpoint]:
    """Rebuild the model from a checkpoint; optionally enforce its phase.

    A base-phase checkpoint cannot be loaded as a prompt-phase model: the
    control branch must be created by the explicit promotion step.
    """
    ckpt = read_checkpoint(path)
    if expect_phase is not None and ckpt.phase != expect_phase:
        raise PhaseError(
            f"{path} holds a {ckpt.phase!r}-phase checkpoint, expected {expect_phase!r}"
            + (" (run the control-branch init step first)" if expect_phase == PROMPT_PHASE else "")
        )
    if ckpt.phase not in (BASE_PHASE, PROMPT_PHASE):
        raise PhaseError(f"unknown checkpoint phase {ckpt.phase!r}")
    model = DiffusionModel(ckpt.config, phase=ckpt.phase)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.model_tensors().items()}
    model.load_state_dict(state, strict=True)
    return model, ckpt.schedule, ckpt
