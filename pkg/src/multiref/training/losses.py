"""Reconstruction, equivariance and adversarial objectives."""

from __future__ import annotations

import os

import torch
import torch.nn.functional as F
from torch import nn

from ..config import LossWeights, TrainConfig
from ..model.blocks import AntiAliasInterpolation2d, make_coordinate_grid
from ..model.keypoints import KeypointSet


class TrainingDivergedError(FloatingPointError):
    pass


class ImagePyramid(nn.Module):
    def __init__(self, scales, num_channels=3):
        super().__init__()
        self.scales = tuple(scales)
        self.downs = nn.ModuleDict(
            {str(s).replace(".", "-"): AntiAliasInterpolation2d(num_channels, s) for s in self.scales}
        )

    def forward(self, x):
        return {s: self.downs[str(s).replace(".", "-")](x) for s in self.scales}


class Vgg19Features(nn.Module):
    """VGG19 relu1_1 .. relu5_1 with ImageNet normalization.

    Pretrained weights are read from the torchvision cache (``TORCH_HOME``);
    ``pretrained=False`` keeps random weights.
    """

    def __init__(self, pretrained: bool = True):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1 if pretrained else None).features
        cuts = [2, 7, 12, 21, 30]
        self.slices = nn.ModuleList(features[a:b] for a, b in zip([0] + cuts[:-1], cuts))
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        out = (x - self.mean) / self.std
        feats = []
        for s in self.slices:
            out = s(out)
            feats.append(out)
        return feats


class PerceptualPyramidLoss(nn.Module):
    """Sum over pyramid scales of mean absolute feature differences.

    With ``backbone="pixel"`` the features at each scale are the pixels
    themselves; ``"vgg19"`` uses five VGG19 stages with equal weights.
    """

    def __init__(self, scales=(1.0, 0.5, 0.25, 0.125), backbone: str = "pixel", pretrained: bool = True):
        super().__init__()
        self.pyramid = ImagePyramid(scales)
        self.backbone = backbone
        self.vgg = Vgg19Features(pretrained) if backbone == "vgg19" else None

    def forward(self, prediction, target):
        pp, pt = self.pyramid(prediction), self.pyramid(target.detach())
        total = prediction.new_zeros(())
        for s in self.pyramid.scales:
            if self.vgg is None:
                total = total + (pp[s] - pt[s]).abs().mean()
            else:
                for fp, ft in zip(self.vgg(pp[s]), self.vgg(pt[s])):
                    total = total + (fp - ft.detach()).abs().mean()
        return total


class RandomTransform:
    """Random affine + thin-plate-spline deformation used for the equivariance constraint."""

    def __init__(self, batch: int, sigma_affine: float, sigma_tps: float, points_tps: int, generator=None,
                 dtype=torch.float32):
        noise = torch.randn(batch, 2, 3, generator=generator, dtype=dtype) * sigma_affine
        self.theta = noise + torch.eye(2, 3, dtype=dtype).view(1, 2, 3)
        self.control_points = make_coordinate_grid(points_tps, points_tps, dtype=dtype).view(1, -1, 2)
        self.control_params = torch.randn(batch, 1, points_tps**2, generator=generator, dtype=dtype) * sigma_tps

    def warp_coordinates(self, coords: torch.Tensor) -> torch.Tensor:
        """Map (B, N, 2) coordinates through the transform."""
        theta = self.theta.to(coords.dtype)
        out = (theta[:, None, :, :2] @ coords.unsqueeze(-1)).squeeze(-1) + theta[:, None, :, 2]
        dist = (coords.unsqueeze(2) - self.control_points.to(coords.dtype).unsqueeze(1)).abs().sum(-1)
        rbf = dist**2 * torch.log(dist + 1e-6)
        return out + (rbf * self.control_params.to(coords.dtype)).sum(-1, keepdim=True)

    def jacobian(self, coords: torch.Tensor) -> torch.Tensor:
        """d warp / d coords at (B, N, 2) points, shape (B, N, 2, 2)."""
        with torch.enable_grad():
            c = coords.detach().requires_grad_(True) if not coords.requires_grad else coords
            new = self.warp_coordinates(c)
            gx = torch.autograd.grad(new[..., 0].sum(), c, create_graph=True)[0]
            gy = torch.autograd.grad(new[..., 1].sum(), c, create_graph=True)[0]
        return torch.stack([gx, gy], dim=-2)

    def transform_frame(self, frame: torch.Tensor) -> torch.Tensor:
        b, _, h, w = frame.shape
        grid = make_coordinate_grid(h, w, frame.dtype, frame.device).view(1, h * w, 2).expand(b, -1, -1)
        warped = self.warp_coordinates(grid).view(b, h, w, 2)
        return F.grid_sample(frame, warped, padding_mode="reflection", align_corners=True)


def equivariance_losses(kp_detector, driving: torch.Tensor, kp_driving: KeypointSet, cfg: TrainConfig,
                        generator=None) -> dict[str, torch.Tensor]:
    transform = RandomTransform(
        driving.shape[0], cfg.equivariance_sigma_affine, cfg.equivariance_sigma_tps,
        cfg.equivariance_points_tps, generator=generator, dtype=driving.dtype,
    )
    transformed = transform.transform_frame(driving)
    kp_t = kp_detector(transformed)
    out = {"equivariance_value": (kp_driving.value - transform.warp_coordinates(kp_t.value)).abs().mean()}
    if kp_t.jacobian is not None and kp_driving.jacobian is not None:
        jac_t = transform.jacobian(kp_t.value) @ kp_t.jacobian
        value = torch.inverse(kp_driving.jacobian) @ jac_t
        eye = torch.eye(2, dtype=value.dtype).view(1, 1, 2, 2)
        out["equivariance_jacobian"] = (eye - value).abs().mean()
    return out


def generator_gan_loss(fake_predictions) -> torch.Tensor:
    return sum(((1 - p) ** 2).mean() for p in fake_predictions)


def discriminator_gan_loss(real_predictions, fake_predictions) -> torch.Tensor:
    return sum(((1 - r) ** 2 + f**2).mean() for r, f in zip(real_predictions, fake_predictions))


def feature_matching_loss(real_features, fake_features) -> torch.Tensor:
    total = 0.0
    for rf, ff in zip(real_features, fake_features):
        for a, b in zip(rf, ff):
            total = total + (a.detach() - b).abs().mean()
    return total


def weighted_total(terms: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    total = None
    for name, value in terms.items():
        w = getattr(weights, name)
        total = w * value if total is None else total + w * value
    return total


def check_finite(terms: dict[str, torch.Tensor], context: str = "") -> None:
    bad = {k: float(v) for k, v in terms.items() if not torch.isfinite(v).all()}
    if bad:
        raise TrainingDivergedError(f"non-finite loss terms {context}: {bad}")


def compute_losses(prediction, driving, internals, kp_detector, cfg: TrainConfig, perceptual: nn.Module,
                   discriminator=None, generator=None) -> dict[str, torch.Tensor]:
    """Unweighted loss terms plus their weighted ``total``.

    Stage 1 (no discriminator): perceptual reconstruction and equivariance.
    Stage 2 adds the least-squares adversarial and feature-matching terms.
    """
    terms = {"perceptual": perceptual(prediction, driving)}
    terms.update(equivariance_losses(kp_detector, driving, internals["kp_driving"], cfg, generator))
    if discriminator is not None:
        fake_feats, fake_preds = discriminator(prediction)
        real_feats, _ = discriminator(driving)
        terms["generator_gan"] = generator_gan_loss(fake_preds)
        terms["feature_matching"] = feature_matching_loss(real_feats, fake_feats)
    check_finite(terms, "(generator)")
    terms["total"] = weighted_total(terms, cfg.loss_weights)
    return terms
