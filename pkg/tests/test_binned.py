import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multiref.data.dataset import VideoDataset, VideoSequence, tensor_to_frames
from multiref.data.tracks import AngleTrack
from multiref.evaluation.binned import (
    BinReport,
    BinRow,
    BinSpec,
    annotate_results,
    assign_bins,
    binned_score,
    lpips_between,
    nearest_angle_frames,
    pairwise_evaluation,
    representative_feature,
    transfer_pairs,
)
from multiref.evaluation.extractors import (
    AlexNetExtractor,
    IdentityExtractor,
    RandomConvExtractor,
    WeightsUnavailableError,
    build_extractor,
)


def _yaw_track(values):
    values = np.asarray(values, dtype=np.float64)
    return AngleTrack(np.stack([values, np.zeros_like(values), np.zeros_like(values)], axis=1))


def _imgs(n, seed=0, res=4):
    return torch.rand(n, 3, res, res, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _oracle_normalized_l2(a, b):
    # identity extractor: channel-normalize each pixel vector, squared L2 over channels, spatial mean
    a, b = a.numpy(), b.numpy()
    c, h, w = a.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            va, vb = a[:, y, x], b[:, y, x]
            na = va / (np.sqrt((va**2).sum()) + 1e-10)
            nb = vb / (np.sqrt((vb**2).sum()) + 1e-10)
            total += ((na - nb) ** 2).sum()
    return total / (h * w)


# annotation


def test_annotate_copies_track():
    track = _yaw_track([-3.0, 0.5, 10.0])
    out = annotate_results(track, _imgs(3))
    assert out == track and out.angles is not track.angles
    assert len(annotate_results(_yaw_track([]), _imgs(0))) == 0
    with pytest.raises(ValueError):
        annotate_results(track, _imgs(2))


def test_annotate_follows_index_map():
    track = _yaw_track([10.0, 20.0, 30.0, 40.0])
    out = annotate_results(track, _imgs(4), index_map=[2, 0, 3, 1])
    np.testing.assert_array_equal(out.axis("yaw"), [30.0, 10.0, 40.0, 20.0])


# bins


def test_bin_spec_defaults_and_validation():
    spec = BinSpec()
    assert spec.num_bins == 60 and spec.edges(0) == (-60.0, -58.0) and spec.edges(59) == (58.0, 60.0)
    for bad in (dict(width=0), dict(width=7), dict(axis="tilt"), dict(lo=10, hi=10)):
        with pytest.raises(ValueError):
            BinSpec(**bad)


def test_bin_example_minus_57():
    a = assign_bins(_yaw_track([-57.0]), BinSpec())
    (b,) = [i for i, f in enumerate(a.bins) if f]
    assert BinSpec().edges(b) == (-58.0, -56.0)


def test_bin_boundaries_half_open():
    spec = BinSpec()
    a = assign_bins(_yaw_track([-60.0, 60.0, -58.0, -58.0000001, 59.999, -60.5, 0.0]), spec)
    bo = a.bin_of()
    assert bo[0] == 0 and bo[2] == 1 and bo[3] == 0 and bo[4] == 59 and bo[6] == 30
    assert a.unassigned == [1, 5]


def test_bin_edges_with_rounding():
    # 0.1 steps accumulate error; each edge angle must land in the bin it starts
    spec = BinSpec("yaw", -1.0, 1.0, 0.1)
    angles = [-1.0 + 0.1 * i for i in range(20)]
    bo = assign_bins(_yaw_track(angles), spec).bin_of()
    for i, a in enumerate(angles):
        lo, hi = spec.edges(bo[i])
        assert bo[i] == i or lo <= a < hi


def test_bins_match_loop_oracle():
    rng = np.random.default_rng(0)
    angles = rng.uniform(-80, 80, 1000)
    angles[:10] = np.arange(-60, -40, 2)  # exact edges
    spec = BinSpec()
    a = assign_bins(_yaw_track(angles), spec)
    seen = [f for b in a.bins for f in b]
    assert len(seen) == len(set(seen))
    expected_out = 0
    for f, ang in enumerate(angles):
        owner = None
        for i in range(spec.num_bins):
            lo, hi = spec.edges(i)
            if lo <= ang < hi:
                assert owner is None
                owner = i
        if owner is None:
            expected_out += 1
            assert f in a.unassigned
        else:
            assert f in a.bins[owner]
    assert len(a.unassigned) == expected_out


def test_assign_bins_other_axis():
    track = AngleTrack(np.array([[0.0, 5.0, -7.0], [50.0, -1.0, 3.0]]))
    a = assign_bins(track, BinSpec("roll"))
    assert a.bin_of() == {0: 26, 1: 31}


# representative features


def test_representative_single_and_identical():
    ex = RandomConvExtractor(seed=1)
    one = _imgs(1, 3, res=8).float()
    feats = ex.extract(one)
    rep = representative_feature(one, ex)
    assert all(torch.equal(r, f[0]) for r, f in zip(rep, feats))
    rep3 = representative_feature(one.expand(3, -1, -1, -1), ex)
    # batch size may change float32 conv summation order
    assert all(torch.allclose(r, f[0], atol=1e-6, rtol=0) for r, f in zip(rep3, feats))


def test_representative_matches_loop_average():
    ex = RandomConvExtractor(seed=2)
    imgs = _imgs(3, 4, res=8).float()
    feats = [f.numpy() for f in ex.extract(imgs)]
    rep = representative_feature(imgs, ex)
    for layer, r in zip(feats, rep):
        oracle = np.zeros(layer.shape[1:])
        for idx in np.ndindex(oracle.shape):
            oracle[idx] = sum(layer[n][idx] for n in range(3)) / 3
        np.testing.assert_allclose(r.numpy(), oracle, atol=1e-6, rtol=0)


def test_representative_empty_raises():
    with pytest.raises(ValueError):
        representative_feature(_imgs(0), IdentityExtractor())


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 1000), split=st.integers(1, 7))
def test_representative_partition_linearity(n, seed, split):
    split = min(split, n - 1)
    ex = IdentityExtractor()
    imgs = _imgs(n, seed)
    whole = representative_feature(imgs, ex)[0]
    a, b = representative_feature(imgs[:split], ex)[0], representative_feature(imgs[split:], ex)[0]
    torch.testing.assert_close(whole, (split * a + (n - split) * b) / n, atol=1e-12, rtol=0)


# LPIPS aggregation


def test_lpips_zero_symmetric_and_oracle():
    a, b = _imgs(1, 5)[0], _imgs(1, 6)[0]
    w = [torch.ones(3, dtype=torch.float64)]
    assert lpips_between([a], [a], w) == 0.0
    assert lpips_between([a], [b], w) == lpips_between([b], [a], w)
    assert lpips_between([a], [b], w) == pytest.approx(_oracle_normalized_l2(a, b), abs=1e-6)


def test_lpips_channel_weights_and_layers():
    a, b = _imgs(1, 7)[0], _imgs(1, 8)[0]
    w2 = [torch.full((3,), 2.0, dtype=torch.float64)]
    one = lpips_between([a], [b], [torch.ones(3, dtype=torch.float64)])
    assert lpips_between([a], [b], w2) == pytest.approx(2 * one, rel=1e-12)
    assert lpips_between([a, a], [b, b], w2 * 2) == pytest.approx(4 * one, rel=1e-12)
    with pytest.raises(ValueError):
        lpips_between([a], [b, b], w2)
    with pytest.raises(ValueError):
        lpips_between([a], [b[:2]], w2)


def test_lpips_is_scale_invariant_per_channel_vector():
    a, b = _imgs(1, 9)[0], _imgs(1, 10)[0]
    w = [torch.ones(3, dtype=torch.float64)]
    assert lpips_between([3 * a], [b], w) == pytest.approx(lpips_between([a], [b], w), rel=1e-9)


# binned score


def test_binned_identical_sets_zero():
    frames = _imgs(8, 11)
    track = _yaw_track(np.linspace(-10, 10, 8))
    rep = binned_score(frames, track, frames, track, BinSpec(), IdentityExtractor())
    assert rep.aggregate == 0.0 and all(r.distance == 0.0 for r in rep.scored)


def test_binned_fig3_scenario():
    # 3 true images and 2 result images share bin [-58, -56)
    true, res = _imgs(3, 12), _imgs(2, 13)
    rep = binned_score(true, _yaw_track([-57.0, -56.5, -57.9]), res, _yaw_track([-56.1, -58.0]), BinSpec(),
                       IdentityExtractor())
    assert len(rep.scored) == 1
    row = rep.scored[0]
    assert (row.lo, row.hi, row.n_true, row.n_result) == (-58.0, -56.0, 3, 2)
    expected = _oracle_normalized_l2(true.mean(0), res.mean(0))
    assert row.distance == pytest.approx(expected, abs=1e-9)
    assert rep.aggregate == row.distance


def test_binned_two_bin_micro_oracle():
    true, res = _imgs(4, 14), _imgs(3, 15)
    t_track, r_track = _yaw_track([0.5, 1.5, 2.5, 40.0]), _yaw_track([0.1, 1.9, 3.9])
    rep = binned_score(true, t_track, res, r_track, BinSpec(), IdentityExtractor())
    d0 = _oracle_normalized_l2(true[:2].mean(0), res[:2].mean(0))  # bin [0, 2)
    d1 = _oracle_normalized_l2(true[2], res[2])  # bin [2, 4)
    assert [r.index for r in rep.scored] == [30, 31]
    assert rep.aggregate == pytest.approx((d0 + d1) / 2, abs=1e-9)
    assert 50 in rep.ignored  # true-only bin at 40 degrees


def test_binned_uses_precomputed_features():
    true, res = _imgs(2, 16), _imgs(2, 17)
    track = _yaw_track([0.0, 1.0])
    ex = IdentityExtractor()
    fake_t, fake_r = [torch.ones(2, 3, 4, 4, dtype=torch.float64)], [torch.ones(2, 3, 4, 4, dtype=torch.float64)]
    rep = binned_score(true, track, res, track, BinSpec(), ex, fake_t, fake_r)
    assert rep.aggregate == 0.0


def test_binned_symmetric_when_tracks_equal():
    a, b = _imgs(6, 18), _imgs(6, 19)
    track = _yaw_track([-5, -4.5, -1, 0, 0.5, 22])
    ex = RandomConvExtractor(seed=3)
    ab = binned_score(a.float(), track, b.float(), track, BinSpec(), ex).aggregate
    ba = binned_score(b.float(), track, a.float(), track, BinSpec(), ex).aggregate
    assert ab == pytest.approx(ba, abs=1e-12)


def test_binned_no_overlap():
    rep = binned_score(_imgs(2), _yaw_track([-50, -49]), _imgs(2), _yaw_track([30, 31]), BinSpec(),
                       IdentityExtractor())
    assert rep.no_overlap and rep.aggregate is None
    assert "no-overlap" in rep.to_text() and rep.to_dict()["status"] == "no-overlap"


def test_coverage_monotone_when_adding_images():
    rng = np.random.default_rng(4)
    true_angles = rng.uniform(-60, 60, 30)
    res_angles = rng.uniform(-60, 60, 30)
    true, res = _imgs(30, 20), _imgs(30, 21)
    prev = -1
    for n in range(1, 31):
        rep = binned_score(true, _yaw_track(true_angles), res[:n], _yaw_track(res_angles[:n]), BinSpec(),
                           IdentityExtractor())
        assert len(rep.scored) >= prev
        prev = len(rep.scored)


def test_report_aggregate_recomputable(tmp_path):
    rows = [BinRow(0, -60, -58, 1, 1, 0.5), BinRow(1, -58, -56, 0, 1, None), BinRow(2, -56, -54, 2, 2, 0.1)]
    rep = BinReport(BinSpec(), rows, "identity")
    assert rep.aggregate == pytest.approx(0.3) and rep.ignored == [1]
    rep.write(tmp_path / "r.json")
    rep.write(tmp_path / "r.txt")
    assert "aggregate (2 bins): 0.300000" in (tmp_path / "r.txt").read_text()


def test_length_mismatch_raises():
    with pytest.raises(ValueError):
        binned_score(_imgs(2), _yaw_track([0]), _imgs(1), _yaw_track([0]), BinSpec(), IdentityExtractor())


# extractors


def test_alexnet_structure_without_weights():
    ex = AlexNetExtractor(pretrained=False)
    feats = ex.extract(torch.rand(2, 3, 64, 64))
    assert [f.shape[1] for f in feats] == [64, 192, 384, 256, 256]
    assert [w.numel() for w in ex.channel_weights] == [64, 192, 384, 256, 256]


def test_lpips_linear_weights_from_package():
    pytest.importorskip("lpips")
    from multiref.evaluation.extractors import _load_lpips_linear_weights

    weights = _load_lpips_linear_weights()
    assert [w.numel() for w in weights] == [64, 192, 384, 256, 256]
    assert all((w >= 0).all() for w in weights)


def test_pretrained_alexnet_missing_weights_is_explicit(tmp_path, monkeypatch):
    monkeypatch.setenv("MULTIREF_CACHE_DIR", str(tmp_path))
    try:
        AlexNetExtractor(pretrained=True)
    except WeightsUnavailableError as exc:
        assert str(tmp_path) in str(exc) or "LPIPS" in str(exc)
    else:  # weights reachable in this environment
        pass


def test_build_extractor():
    assert isinstance(build_extractor("identity"), IdentityExtractor)
    assert isinstance(build_extractor("random"), RandomConvExtractor)
    with pytest.raises(ValueError):
        build_extractor("vgg")


# pairwise protocol


def test_transfer_pairs_nine_patterns():
    # five subjects, four with two illuminations, one with a single illumination
    patterns = [(f"s{s}_l{l}", f"s{s}", f"l{l}") for s in range(4) for l in range(2)] + [("s4_l0", "s4", "l0")]
    pairs = transfer_pairs(patterns)
    assert len(pairs) == 9 * 8 == 72
    assert all(i != j for i, j in pairs)


def test_transfer_pairs_exclusion_rule():
    # duplicate (subject, illumination) labels are excluded even across distinct pattern entries
    patterns = [("a", "s0", "l0"), ("b", "s0", "l1"), ("c", "s1", "l0"), ("d", "s0", "l0")]
    pairs = transfer_pairs(patterns)
    manual = [(i, j) for i in range(4) for j in range(4)
              if (patterns[i][1], patterns[i][2]) != (patterns[j][1], patterns[j][2])]
    assert pairs == manual and (0, 3) not in pairs and (0, 1) in pairs


def _pattern_dataset(n_patterns, frames=5, res=4):
    seqs = []
    for p in range(n_patterns):
        for ax_i, axis in enumerate(("yaw", "pitch")):
            angles = np.zeros((frames, 3))
            angles[:, ax_i] = np.linspace(-40, 40, frames)
            imgs = _imgs(frames, seed=10 * p + ax_i, res=res).float()
            seqs.append(VideoSequence(name=axis, frames_uint8=tensor_to_frames(imgs), subject=f"s{p}",
                                      illumination="l0", axis=axis, track=AngleTrack(angles),
                                      pattern=f"s{p}_l0"))
    return VideoDataset(seqs)


def _copy_driving(model, refs, driving):
    return driving.clone()


def _first_reference(model, refs, driving):
    return refs[0].unsqueeze(0).expand(len(driving), -1, -1, -1).clone()


def test_pairwise_matches_manual_enumeration():
    ds = _pattern_dataset(3)
    result = pairwise_evaluation(ds, None, "frontal", axes=("yaw", "pitch"), generate=_first_reference)
    ex = IdentityExtractor()
    for ax in ("yaw", "pitch"):
        m = result.matrices[ax]
        assert np.isnan(np.diag(m)).all()
        for i, drv in enumerate(result.patterns):
            for j, ref in enumerate(result.patterns):
                if i == j:
                    continue
                ref_yaw = ds.find(ref, "yaw")
                ref_img = ref_yaw.frame(nearest_angle_frames(ref_yaw, [0.0])[0])
                drv_seq, true_seq = ds.find(drv, ax), ds.find(ref, ax)
                fake = ref_img.unsqueeze(0).expand(len(drv_seq), -1, -1, -1)
                expected = binned_score(true_seq.tensor(), true_seq.track, fake, drv_seq.track, BinSpec(ax),
                                        ex).aggregate
                assert m[i, j] == pytest.approx(expected, abs=1e-12)
        assert result.mean(ax) == pytest.approx(np.nanmean(m), abs=1e-12)
    assert result.mean("yaw", "pool") is not None
    with pytest.raises(ValueError):
        result.mean("yaw", "median")


def test_pairwise_copy_model_scores_transfer_gap():
    ds = _pattern_dataset(2)
    result = pairwise_evaluation(ds, None, "frontal", axes=("yaw",), generate=_copy_driving)
    assert len(result.reports) == 2
    assert result.to_dict()["summary"]["yaw"] > 0


def test_pairwise_single_pattern_errors():
    with pytest.raises(ValueError):
        pairwise_evaluation(_pattern_dataset(1), None, "frontal", generate=_copy_driving)


def test_nearest_angle_logs_deviation(caplog):
    seq = _pattern_dataset(1)[0]  # yaw in {-40, -20, 0, 20, 40}
    with caplog.at_level(logging.WARNING):
        picks = nearest_angle_frames(seq, [0.0, -30.0, 30.0])
    assert picks[0] == 2 and picks[1] in (0, 1) and picks[2] in (3, 4)
    assert "yaw=-30" in caplog.text
