"""Feature extractors for the perceptual distance.

An extractor maps images (N, 3, H, W) in [0, 1] to a list of per-layer
activations (N, C_l, H_l, W_l) and carries one non-negative weight per
channel of each layer (``channel_weights``).
"""

from __future__ import annotations

import os
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

CACHE_ENV = "MULTIREF_CACHE_DIR"
LPIPS_LAYER_CHANNELS = (64, 192, 384, 256, 256)


class WeightsUnavailableError(RuntimeError):
    pass


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "multiref"))


class FeatureExtractor(nn.Module):
    name = "base"
    channel_weights: list[torch.Tensor]

    def extract(self, images: torch.Tensor, batch_size: int = 64) -> list[torch.Tensor]:
        """Per-layer float64 activations for a stack of images."""
        outs: list[list[torch.Tensor]] = []
        with torch.no_grad():
            for chunk in images.split(batch_size):
                outs.append([f.double() for f in self(chunk)])
        return [torch.cat(layer) for layer in zip(*outs)]


class IdentityExtractor(FeatureExtractor):
    """Raw pixels as a single layer with unit channel weights."""

    name = "identity"

    def __init__(self, channels: int = 3):
        super().__init__()
        self.channel_weights = [torch.ones(channels, dtype=torch.float64)]

    def forward(self, images):
        return [images]


class RandomConvExtractor(FeatureExtractor):
    """Small frozen random conv stack; deterministic given ``seed``."""

    name = "random"

    def __init__(self, seed: int = 0, widths=(8, 16)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_c = 3
        for w in widths:
            conv = nn.Conv2d(in_c, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / (3 * in_c) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            in_c = w
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.channel_weights = [torch.ones(w, dtype=torch.float64) for w in widths]

    def forward(self, images):
        feats, out = [], images * 2 - 1
        for conv in self.layers:
            out = F.relu(conv(out))
            feats.append(out)
        return feats


def _load_lpips_linear_weights() -> list[torch.Tensor]:
    candidates = []
    try:  # the lpips distribution ships its linear heads
        import lpips  # noqa: F401

        candidates.append(Path(lpips.__file__).parent / "weights" / "v0.1" / "alex.pth")
    except ImportError:
        pass
    candidates.append(cache_dir() / "lpips_alex_v0.1.pth")
    for path in candidates:
        if path.exists():
            state = torch.load(path, map_location="cpu", weights_only=True)
            return [state[f"lin{i}.model.1.weight"].flatten().double() for i in range(5)]
    raise WeightsUnavailableError(
        "LPIPS linear weights not found; install the 'lpips' package or place lpips_alex_v0.1.pth in "
        f"${CACHE_ENV} ({cache_dir()})"
    )


class AlexNetExtractor(FeatureExtractor):
    """AlexNet relu1..relu5 activations with the learned LPIPS channel weights.

    Backbone weights come from ``$MULTIREF_CACHE_DIR/alexnet.pth`` (a
    torchvision ``alexnet`` state dict) or the torchvision hub cache.
    ``pretrained=False`` keeps random backbone weights and unit channel weights.
    """

    name = "alexnet"
    # LPIPS input scaling, applied to images mapped to [-1, 1]
    shift = (-0.030, -0.088, -0.188)
    scale = (0.458, 0.448, 0.450)

    def __init__(self, pretrained: bool = True):
        super().__init__()
        from torchvision.models import alexnet

        net = alexnet(weights=None)
        if pretrained:
            net.load_state_dict(self._backbone_state())
        feats = net.features
        cuts = [(0, 2), (2, 5), (5, 8), (8, 10), (10, 12)]
        self.slices = nn.ModuleList(nn.Sequential(*[feats[i] for i in range(a, b)]) for a, b in cuts)
        for p in self.parameters():
            p.requires_grad_(False)
        self.register_buffer("_shift", torch.tensor(self.shift).view(1, 3, 1, 1))
        self.register_buffer("_scale", torch.tensor(self.scale).view(1, 3, 1, 1))
        if pretrained:
            self.channel_weights = _load_lpips_linear_weights()
        else:
            self.channel_weights = [torch.ones(c, dtype=torch.float64) for c in LPIPS_LAYER_CHANNELS]
        self.eval()

    @staticmethod
    def _backbone_state():
        local = cache_dir() / "alexnet.pth"
        if local.exists():
            return torch.load(local, map_location="cpu", weights_only=True)
        from torchvision.models import AlexNet_Weights

        try:
            return AlexNet_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
        except Exception as exc:
            raise WeightsUnavailableError(
                f"AlexNet weights unavailable ({exc}); place a torchvision alexnet state dict at {local}"
            ) from exc

    def forward(self, images):
        out = ((images * 2 - 1) - self._shift) / self._scale
        feats = []
        for s in self.slices:
            out = s(out)
            feats.append(out)
        return feats


def build_extractor(name: str) -> FeatureExtractor:
    if name == "identity":
        return IdentityExtractor()
    if name == "random":
        return RandomConvExtractor()
    if name == "alexnet":
        return AlexNetExtractor()
    raise ValueError(f"unknown extractor {name!r}")
