"""U-Net style encoder-decoder for pericardium segmentation.

Input is a 2-channel square plane (thresholded CT + constant slice depth),
output a single-channel sigmoid probability map of the same size. The
default configuration (4 encoder levels, base width 28, batch norm, zero
padding, transposed-conv upsampling) instantiates 5,946,697 parameters,
inside the +-10% band around the 5.8M budget.

Checkpoints are a single binary container: magic + format version + an
embedded JSON metadata header (config, epoch, val_loss, seed, tensor table)
followed by the named parameter tensors as raw little-endian bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigError

CHECKPOINT_MAGIC = b"EATSEGCK"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class SegModelConfig:
    in_channels: int = 2
    out_channels: int = 1
    depth: int = 4  # encoder levels
    base_width: int = 28
    norm: str = "batch"  # {batch, none}
    input_size: int = 128
    target_param_count: int = 5_800_000
    param_tolerance: float = 0.10

    def validate(self):
        if self.in_channels != 2:
            raise ConfigError(
                f"in_channels must be 2 (CT channel + depth channel), got {self.in_channels}"
            )
        if self.out_channels != 1:
            raise ConfigError(f"out_channels must be 1, got {self.out_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.norm not in ("batch", "none"):
            raise ConfigError(f"norm must be 'batch' or 'none', got {self.norm!r}")
        if self.input_size % (2 ** self.depth) != 0:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2^depth = {2 ** self.depth}"
            )


def _double_conv(in_ch: int, out_ch: int, norm: str) -> nn.Sequential:
    def block(i, o):
        layers = [nn.Conv2d(i, o, kernel_size=3, padding=1)]
        if norm == "batch":
            layers.append(nn.BatchNorm2d(o))
        layers.append(nn.ReLU(inplace=True))
        return layers

    return nn.Sequential(*block(in_ch, out_ch), *block(out_ch, out_ch))


class PericardiumUNet(nn.Module):
    """Symmetric encoder-decoder with skip connections at every level."""

    def __init__(self, cfg: SegModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg

        widths = [cfg.base_width * (2 ** i) for i in range(cfg.depth)]
        self.encoders = nn.ModuleList()
        in_ch = cfg.in_channels
        for w in widths:
            self.encoders.append(_double_conv(in_ch, w, cfg.norm))
            in_ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(widths[-1], widths[-1] * 2, cfg.norm)

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        up_in = widths[-1] * 2
        for w in reversed(widths):
            self.upsamplers.append(nn.ConvTranspose2d(up_in, w, kernel_size=2, stride=2))
            self.decoders.append(_double_conv(w * 2, w, cfg.norm))
            up_in = w
        self.head = nn.Conv2d(widths[0], cfg.out_channels, kernel_size=1)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
            raise ValueError(
                f"expected batch of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(batch.shape)}"
            )
        if not torch.isfinite(batch).all():
            raise ValueError("batch contains non-finite values")

        skips = []
        x = batch
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for upsample, decoder, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = upsample(x)
            x = decoder(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.head(x))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: SegModelConfig, seed: int) -> PericardiumUNet:
    """Instantiate the network with deterministic initialization.

    Raises ConfigError (naming the achieved count) when the instantiated
    parameter count falls outside the tolerance band around the target.
    """
    cfg.validate()
    torch.manual_seed(seed)
    model = PericardiumUNet(cfg)
    count = parameter_count(model)
    low = cfg.target_param_count * (1 - cfg.param_tolerance)
    high = cfg.target_param_count * (1 + cfg.param_tolerance)
    if not low <= count <= high:
        raise ConfigError(
            f"parameter count {count} outside [{low:.0f}, {high:.0f}] "
            f"(target {cfg.target_param_count} +-{cfg.param_tolerance:.0%}); "
            f"adjust base_width/depth"
        )
    return model


@dataclass
class Checkpoint:
    model: PericardiumUNet
    config: SegModelConfig
    epoch: int
    val_loss: float
    seed: int
    format_version: int


def save_checkpoint(
    model: PericardiumUNet,
    path: str | Path,
    epoch: int,
    val_loss: float,
    seed: int,
):
    """Serialize the model to the versioned binary checkpoint container."""
    state = model.state_dict()
    tensor_table = []
    payload = io.BytesIO()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        tensor_table.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
        })
        payload.write(arr.tobytes())

    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.cfg),
        "epoch": int(epoch),
        "val_loss": float(val_loss),
        "seed": int(seed),
        "tensors": tensor_table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload.getvalue())


def load_checkpoint(
    path: str | Path,
    expected_config: SegModelConfig | None = None,
) -> Checkpoint:
    """Read a checkpoint container and rebuild the model.

    With expected_config given, every config field is compared against the
    stored one and the first mismatch raises ConfigError naming the field.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", blob, offset)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} "
            f"(this build reads version {CHECKPOINT_FORMAT_VERSION})"
        )
    offset += 8
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    offset += header_len

    cfg = SegModelConfig(**header["config"])
    if expected_config is not None:
        for field_name, expected_value in asdict(expected_config).items():
            stored = getattr(cfg, field_name)
            if stored != expected_value:
                raise ConfigError(
                    f"checkpoint config mismatch on field {field_name!r}: "
                    f"checkpoint has {stored!r}, expected {expected_value!r}"
                )

    state: dict[str, torch.Tensor] = {}
    for spec in header["tensors"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"truncated checkpoint: tensor {spec['name']!r} needs {nbytes} bytes"
            )
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes

    model = PericardiumUNet(cfg)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint tensors do not match the model: {exc}") from exc
    model.eval()
    return Checkpoint(
        model=model,
        config=cfg,
        epoch=int(header["epoch"]),
        val_loss=float(header["val_loss"]),
        seed=int(header["seed"]),
        format_version=version,
    )
