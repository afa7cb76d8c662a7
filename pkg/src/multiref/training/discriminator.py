"""Multi-scale patch discriminator used in the second training stage."""

import torch.nn.functional as F
from torch import nn
from torch.nn.utils import spectral_norm

from ..config import ModelConfig
from ..model.blocks import AntiAliasInterpolation2d


class DiscBlock(nn.Module):
    def __init__(self, in_features, out_features, norm=False, pool=False):
        super().__init__()
        self.conv = spectral_norm(nn.Conv2d(in_features, out_features, kernel_size=4))
        self.norm = nn.InstanceNorm2d(out_features, affine=True) if norm else None
        self.pool = pool

    def forward(self, x):
        out = self.conv(x)
        if self.norm is not None:
            out = self.norm(out)
        out = F.leaky_relu(out, 0.2)
        return F.avg_pool2d(out, 2) if self.pool else out


class Discriminator(nn.Module):
    def __init__(self, num_channels=3, block_expansion=16, num_blocks=3, max_features=128):
        super().__init__()
        blocks = []
        for i in range(num_blocks):
            in_f = num_channels if i == 0 else min(max_features, block_expansion * 2**i)
            out_f = min(max_features, block_expansion * 2 ** (i + 1))
            blocks.append(DiscBlock(in_f, out_f, norm=i != 0, pool=i != num_blocks - 1))
        self.blocks = nn.ModuleList(blocks)
        self.head = spectral_norm(nn.Conv2d(out_f, 1, kernel_size=1))

    def forward(self, x):
        feats = []
        out = x
        for block in self.blocks:
            out = block(out)
            feats.append(out)
        return feats, self.head(out)


class MultiScaleDiscriminator(nn.Module):
    """Returns (per-scale intermediate feature lists, per-scale prediction maps)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.scales = tuple(cfg.disc_scales)
        self.discs = nn.ModuleList(
            Discriminator(cfg.num_channels, cfg.disc_block_expansion, cfg.disc_num_blocks, cfg.disc_max_features)
            for _ in self.scales
        )
        self.downs = nn.ModuleList(AntiAliasInterpolation2d(cfg.num_channels, s) for s in self.scales)

    def forward(self, x):
        feats, preds = [], []
        for down, disc in zip(self.downs, self.discs):
            f, p = disc(down(x))
            feats.append(f)
            preds.append(p)
        return feats, preds
