import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multiref.config import ConfigError
from multiref.fusion import (
    FusionContractError,
    FusionUnit,
    compute_mask_logits,
    fuse,
    mask_visualization_grid,
    normalize_masks,
    stack_warped,
    visualize_masks,
)
from multiref.model.motion import WarpedFeature


def _unit(mode="patch", channels=4, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return FusionUnit(channels, mode, kernel_size=3).to(dtype)


def _warped(k, c=4, h=5, w=6, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(2, k, c, h, w, generator=g, dtype=dtype)


def _loop_fuse(feats, masks):
    # per-element oracle in float64 numpy
    f, m = feats.detach().double().numpy(), masks.detach().double().numpy()
    b, k, c, h, w = f.shape
    out = np.zeros((b, c, h, w))
    for bi in range(b):
        for ci in range(c):
            for y in range(h):
                for x in range(w):
                    mc = 0 if m.shape[2] == 1 else ci
                    out[bi, ci, y, x] = sum(m[bi, j, mc, y, x] * f[bi, j, ci, y, x] for j in range(k))
    return out


def test_identical_features_give_identical_logits():
    one = _warped(1)
    logits = compute_mask_logits(one.expand(-1, 3, -1, -1, -1), _unit())
    assert torch.equal(logits[:, 0], logits[:, 1]) and torch.equal(logits[:, 1], logits[:, 2])


@pytest.mark.parametrize("mode,m", [("patch", 1), ("element", 4)])
def test_logit_channel_count(mode, m):
    assert compute_mask_logits(_warped(3), _unit(mode)).shape == (2, 3, m, 5, 6)


@pytest.mark.parametrize("mode", ["patch", "element"])
def test_swapping_inputs_swaps_logits(mode):
    unit, x = _unit(mode), _warped(3, seed=4)
    logits = compute_mask_logits(x, unit)
    swapped = compute_mask_logits(x[:, [1, 0, 2]], unit)
    assert torch.equal(swapped[:, 0], logits[:, 1]) and torch.equal(swapped[:, 1], logits[:, 0])
    assert torch.equal(swapped[:, 2], logits[:, 2])


def test_logits_depend_only_on_own_reference():
    unit, x = _unit("element"), _warped(3, seed=1)
    y = x.clone()
    y[:, 2] += 1.0
    a, b = compute_mask_logits(x, unit), compute_mask_logits(y, unit)
    assert torch.equal(a[:, :2], b[:, :2])
    assert not torch.equal(a[:, 2], b[:, 2])


def test_heterogeneous_shapes_rejected():
    with pytest.raises(ValueError):
        stack_warped([WarpedFeature(torch.zeros(1, 4, 5, 5)), WarpedFeature(torch.zeros(1, 4, 5, 6))])
    with pytest.raises(ValueError):
        stack_warped([])


def test_unknown_mode_rejected():
    with pytest.raises(ConfigError):
        FusionUnit(4, "channel")


def test_normalize_singleton_is_one():
    masks = normalize_masks(torch.randn(2, 1, 1, 4, 4) * 50)
    assert torch.equal(masks, torch.ones_like(masks))


def test_normalize_equal_logits():
    masks = normalize_masks(torch.full((1, 4, 3, 2, 2), 3.7))
    torch.testing.assert_close(masks, torch.full_like(masks, 0.25), atol=1e-7, rtol=0)


def test_normalize_hand_value():
    logits = torch.tensor([0.0, math.log(3.0)], dtype=torch.float64).view(1, 2, 1, 1, 1)
    torch.testing.assert_close(normalize_masks(logits).flatten(), torch.tensor([0.25, 0.75], dtype=torch.float64))


def test_normalize_large_logits_are_stable():
    logits = torch.tensor([1000.0, 1000.0 + math.log(3.0)]).view(1, 2, 1, 1, 1)
    masks = normalize_masks(logits)
    assert torch.isfinite(masks).all()
    torch.testing.assert_close(masks.flatten(), torch.tensor([0.25, 0.75]))


def test_fuse_single_reference_is_exact():
    x = _warped(1)
    assert torch.equal(fuse(x, torch.ones(2, 1, 1, 5, 6)), x[:, 0])
    unit = _unit()
    assert torch.equal(unit(x), x[:, 0])


def test_fuse_identical_features_any_masks():
    f = _warped(1, seed=2)
    masks = normalize_masks(torch.randn(2, 3, 4, 5, 6))
    out = fuse(f.expand(-1, 3, -1, -1, -1), masks)
    torch.testing.assert_close(out, f[:, 0], atol=1e-6, rtol=0)


@pytest.mark.parametrize("mode", ["patch", "element"])
def test_fuse_matches_loop_oracle(mode):
    x = _warped(3, seed=9)
    masks = normalize_masks(compute_mask_logits(x, _unit(mode)))
    np.testing.assert_allclose(fuse(x, masks).detach().double().numpy(), _loop_fuse(x, masks), atol=1e-6, rtol=0)


def test_fuse_rejects_unnormalized():
    x = _warped(2)
    masks = torch.full((2, 2, 1, 5, 6), 0.5)
    masks[0, 0, 0, 0, 0] = 0.6
    with pytest.raises(FusionContractError):
        fuse(x, masks)
    fuse(x, masks, validate=False)


def test_fuse_tolerates_rounding_within_contract():
    x = _warped(2)
    masks = torch.full((2, 2, 1, 5, 6), 0.5)
    masks[0, 0, 0, 0, 0] += 5e-5
    fuse(x, masks)


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        fuse(_warped(2), torch.full((2, 2, 3, 5, 6), 0.5))


def test_patch_equals_element_for_channel_constant_logits():
    x = _warped(3, seed=5)
    patch_logits = torch.randn(2, 3, 1, 5, 6)
    p = fuse(x, normalize_masks(patch_logits))
    e = fuse(x, normalize_masks(patch_logits.expand(-1, -1, 4, -1, -1)))
    torch.testing.assert_close(p, e, atol=1e-6, rtol=0)


def test_element_strictly_more_general_than_patch():
    # two references, two channels: element mode picks channel 0 from ref 0 and channel 1 from ref 1
    f = torch.zeros(1, 2, 2, 1, 1)
    f[0, 0] = torch.tensor([1.0, 0.0]).view(2, 1, 1)
    f[0, 1] = torch.tensor([0.0, 1.0]).view(2, 1, 1)
    logits = torch.tensor([[20.0, -20.0], [-20.0, 20.0]]).view(1, 2, 2, 1, 1)
    element = fuse(f, normalize_masks(logits))
    # a single weight per reference (channel means of the element logits) cannot reach (1, 1)
    patch = fuse(f, normalize_masks(logits.mean(dim=2, keepdim=True)))
    torch.testing.assert_close(element.flatten(), torch.tensor([1.0, 1.0]), atol=1e-6, rtol=0)
    assert (element - patch).abs().max() > 0.4
    # any patch weights (w, 1 - w) yield (w, 1 - w), whose L1 distance to (1, 1) is always 1
    for w in torch.linspace(0, 1, 11):
        patch_w = torch.stack([w, 1 - w]).view(1, 2, 1, 1, 1)
        assert (fuse(f, patch_w, validate=False).flatten() - 1).abs().sum() >= 1 - 1e-6


finite = st.floats(-30, 30, allow_nan=False, width=32)


@settings(max_examples=100, deadline=None)
@given(
    k=st.integers(1, 4),
    mode=st.sampled_from(["patch", "element"]),
    seed=st.integers(0, 2**16),
    scale=st.sampled_from([0.1, 1.0, 10.0]),
)
def test_fusion_invariants_property(k, mode, seed, scale):
    unit = _unit(mode, channels=3, seed=seed % 7)
    x = _warped(k, c=3, h=4, w=4, seed=seed) * scale
    fused, masks = unit(x, return_masks=True)
    assert torch.isfinite(masks).all()
    assert (masks > 0).all() or k == 1
    assert (masks.sum(dim=1) - 1).abs().max() <= 1e-6
    assert (fused >= x.min(dim=1).values - 1e-6 * scale).all()
    assert (fused <= x.max(dim=1).values + 1e-6 * scale).all()
    perm = torch.randperm(k, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(unit(x[:, perm]), fused)


@settings(max_examples=50, deadline=None)
@given(logits=st.lists(finite, min_size=1, max_size=6))
def test_softmax_normalization_property(logits):
    t = torch.tensor(logits).view(1, len(logits), 1, 1, 1)
    s = normalize_masks(t)
    assert abs(s.sum().item() - 1) <= 1e-6
    assert (s >= 0).all() and (s <= 1).all()


@pytest.mark.parametrize("mode", ["patch", "element"])
def test_gradient_wrt_logits_matches_finite_differences(mode):
    m = 1 if mode == "patch" else 2
    x = torch.randn(1, 3, 2, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    logits = torch.randn(1, 3, m, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    probe = torch.randn(1, 2, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(3))

    def objective(l):
        return (fuse(x, normalize_masks(l)) * probe).sum()

    l = logits.clone().requires_grad_(True)
    objective(l).backward()
    eps = 1e-6
    numeric = torch.zeros_like(logits)
    flat = logits.flatten()
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += eps
        dn[i] -= eps
        numeric.view(-1)[i] = (objective(up.view_as(logits)) - objective(dn.view_as(logits))) / (2 * eps)
    torch.testing.assert_close(l.grad, numeric, rtol=1e-3, atol=1e-8)
    assert torch.autograd.gradcheck(lambda t: fuse(x, normalize_masks(t)), (logits.clone().requires_grad_(True),))


def _linear_decoder(feat):
    return feat[:, :3].clamp(0, 1)


def test_visualization_grid_layout(tmp_path):
    feats = torch.rand(1, 3, 3, 4, 4)
    masks = normalize_masks(torch.randn(1, 3, 1, 4, 4))
    drv, refs = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 3, 4, 4)
    path = tmp_path / "grid.png"
    grid = visualize_masks(feats, masks, _linear_decoder, path, drv, refs, export_masks=tmp_path / "m.npy")
    # header row plus two rows, driving column plus K columns
    assert grid.shape == (3 * 4, 4 * 4, 3) and grid.dtype == np.uint8
    import imageio.v3 as iio

    assert np.array_equal(iio.imread(path), grid)
    assert np.array_equal(np.load(tmp_path / "m.npy"), masks.numpy())
    assert mask_visualization_grid(feats, masks, _linear_decoder).shape == (2 * 4, 4 * 4, 3)


def test_visualization_uniform_masks_dim_decodings():
    feats = torch.full((1, 3, 3, 2, 2), 0.6)
    masks = torch.full((1, 3, 1, 2, 2), 1 / 3)
    grid = mask_visualization_grid(feats, masks, _linear_decoder).astype(int)
    decoded, masked = grid[:2, 2:], grid[2:, 2:]
    assert (decoded == 153).all()
    assert (masked == 51).all()


def test_visualization_one_hot_masks_tile_decodings():
    # three refs, each owning one column band of a 2x3 feature map
    feats = torch.rand(1, 3, 3, 2, 3)
    masks = torch.zeros(1, 3, 1, 2, 3)
    for k in range(3):
        masks[0, k, 0, :, k] = 1
    grid = mask_visualization_grid(feats, masks, _linear_decoder)
    h, w = 2, 3
    tiled = sum(grid[h:, (k + 1) * w:(k + 2) * w].astype(int) for k in range(3))
    full = np.round(feats[0, :, :3].clamp(0, 1).numpy().transpose(0, 2, 3, 1) * 255).astype(int)
    for k in range(3):
        np.testing.assert_array_equal(tiled[:, k], full[k, :, k])
    assert sum(grid[h:, (k + 1) * w:(k + 2) * w].astype(int).sum() > 0 for k in range(3)) == 3
    np.testing.assert_array_equal(
        fuse(feats, masks)[0].numpy(), sum(masks[0, k] * feats[0, k] for k in range(3)).numpy()
    )
