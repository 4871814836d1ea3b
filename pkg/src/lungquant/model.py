"""3D residual U-net used for both lung and lesion segmentation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .preprocess import DEFAULT_INPUT_DIMS, HuWindow
from .volume_io import CtVolume
from .errors import GeometryError


@dataclass
class UNetConfig:
    depth: int = 6
    convs_per_block: int = 3
    base_channels: int = 32
    in_channels: int = 1
    out_classes: int = 2
    input_dims: tuple[int, int, int] = DEFAULT_INPUT_DIMS
    kernel_size: int = 3

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.convs_per_block < 2:
            raise ValueError("convs_per_block must be >= 2 (one is replaced by the upsampling layer)")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_classes < 2:
            raise ValueError("channel counts must be positive and out_classes >= 2")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError(f"input_dims must be 3 positive ints, got {self.input_dims}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")

    @classmethod
    def toy(cls, input_dims=(32, 32, 16), depth=3, base_channels=8):
        return cls(depth=depth, base_channels=base_channels, input_dims=input_dims)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def padded_dims(self, dims=None) -> tuple[int, int, int]:
        """Smallest dims >= ``dims`` divisible by 2**(depth-1) that leave at
        least 2 voxels per axis at the bottom level (instance norm needs >1)."""
        dims = self.input_dims if dims is None else dims
        step = 2 ** (self.depth - 1)
        return tuple(max(-(-d // step), 2) * step for d in dims)

    def to_dict(self):
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d


def _conv_norm_relu(cin, cout, k):
    return [nn.Conv3d(cin, cout, k, padding=k // 2), nn.InstanceNorm3d(cout, affine=True), nn.ReLU(inplace=True)]


class ResidualBlock(nn.Module):
    """``n_convs`` x (conv, instance norm, ReLU) with the input added back."""

    def __init__(self, channels, n_convs, k=3):
        super().__init__()
        layers = []
        for _ in range(n_convs):
            layers += _conv_norm_relu(channels, channels, k)
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.body(x)


class UpBlock(nn.Module):
    """Transpose-conv upsampling followed by ``n_convs - 1`` convolutions on
    the skip-concatenated tensor; the upsampled tensor is the residual."""

    def __init__(self, cin, cout, n_convs, k=3):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, kernel_size=2, stride=2)
        layers = _conv_norm_relu(2 * cout, cout, k)
        for _ in range(n_convs - 2):
            layers += _conv_norm_relu(cout, cout, k)
        self.body = nn.Sequential(*layers)

    def forward(self, x, skip):
        up = self.up(x)
        return up + self.body(torch.cat([up, skip], dim=1))


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        k, n = config.kernel_size, config.convs_per_block
        c = config.channels
        self.stem = nn.Sequential(*_conv_norm_relu(config.in_channels, c(0), k))
        self.down = nn.ModuleList(
            nn.Conv3d(c(i - 1), c(i), kernel_size=2, stride=2) for i in range(1, config.depth)
        )
        self.encoder = nn.ModuleList(ResidualBlock(c(i), n, k) for i in range(config.depth))
        self.decoder = nn.ModuleList(UpBlock(c(i + 1), c(i), n, k) for i in range(config.depth - 1))
        self.head = nn.Conv3d(c(0), config.out_classes, kernel_size=1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        """Logits of shape (N, classes, X, Y, Z); softmax is left to callers."""
        dims = tuple(x.shape[2:])
        padded = self.config.padded_dims(dims)
        before = [(p - d) // 2 for p, d in zip(padded, dims)]
        pad = []
        for b, p, d in reversed(list(zip(before, padded, dims))):
            pad += [b, p - d - b]
        x = F.pad(x, pad)

        x = self.encoder[0](self.stem(x))
        skips = [x]
        for down, block in zip(self.down, self.encoder[1:]):
            x = block(down(x))
            skips.append(x)
        for level in reversed(range(self.config.depth - 1)):
            x = self.decoder[level](x, skips[level])
        x = self.head(x)
        return x[(slice(None), slice(None)) + tuple(slice(b, b + d) for b, d in zip(before, dims))]


UNetModel = UNet


def build_unet(config: UNetConfig, seed: int | None = None) -> UNet:
    if seed is not None:
        torch.manual_seed(seed)
    return UNet(config)


def _as_array(vol) -> np.ndarray:
    return vol.voxels if isinstance(vol, CtVolume) else np.asarray(vol, dtype=np.float32)


def forward(model: UNet, vol) -> np.ndarray:
    """Per-voxel class probabilities, shape (classes, X, Y, Z).

    ``vol`` must already be windowed to [0, 1] and sized to ``config.input_dims``.
    """
    arr = _as_array(vol)
    if tuple(arr.shape) != tuple(model.config.input_dims):
        raise GeometryError(f"input dims {arr.shape} != model input dims {model.config.input_dims}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
        p = torch.softmax(model(x), dim=1)[0].numpy()
    model.train(was_training)
    return p


def predict_mask(model: UNet, vol) -> np.ndarray:
    """Argmax foreground mask (uint8) on the model grid."""
    return (np.argmax(forward(model, vol), axis=0) == 1).astype(np.uint8)


@dataclass
class CheckpointInfo:
    config: UNetConfig
    window: HuWindow
    extra: dict = field(default_factory=dict)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(model: UNet, path, window: HuWindow, extra: dict | None = None) -> Path:
    """Write ``path`` (torch state dict) and a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {"config": model.config.to_dict(), "window": window.to_list(), "extra": extra or {}}
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path) -> tuple[UNet, CheckpointInfo]:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    config = UNetConfig(**meta["config"])
    model = UNet(config)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model, CheckpointInfo(config, HuWindow(*meta["window"]), meta.get("extra", {}))
