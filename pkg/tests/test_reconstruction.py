import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanes3d.errors import (
    EmptyDepth,
    InsufficientData,
    InvalidParams,
    NonPositiveDepth,
    NoValidPixels,
    OutOfBounds,
    ShapeMismatch,
)
from lanes3d.geometry import backproject
from lanes3d.metric import MatchConfig, unilateral_cd
from lanes3d.reconstruction import (
    LiftConfig,
    LossConfig,
    OffsetMaps,
    RowAnchors,
    apply_offsets,
    complete_depth,
    decode_depth,
    encode_depth,
    fit_row_anchors,
    lift_to_lanes,
    reg_loss,
    seg_loss,
    total_loss,
)
from lanes3d.synthetic import (
    SceneParams,
    TerrainParams,
    default_intrinsics,
    ground_depth_map,
    make_scene,
    oracle_offsets,
    render_frame,
)

K = default_intrinsics()


def test_apply_offsets_examples():
    off = OffsetMaps.zeros((300, 400))
    pts, flag = apply_offsets([(100, 200), (5, 7)], off)
    assert np.array_equal(pts, [[100, 200], [5, 7]]) and not flag.any()
    half = OffsetMaps(np.full((300, 400), 0.5), np.zeros((300, 400)), np.zeros((300, 400)))
    pts, _ = apply_offsets([(100, 200)], half)
    assert np.array_equal(pts, [[100.5, 200]])
    with pytest.raises(OutOfBounds):
        apply_offsets([(-1, 0)], off)


def test_apply_offsets_clamps_and_flags():
    off = OffsetMaps(np.full((10, 10), 3.0), np.full((10, 10), -3.0), np.zeros((10, 10)))
    pts, flag = apply_offsets([(8, 1), (2, 5)], off)
    assert np.array_equal(pts, [[9, 0], [5, 2]])
    assert flag.tolist() == [True, False]


def test_offset_maps_validation():
    with pytest.raises(ShapeMismatch):
        OffsetMaps(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(InvalidParams):
        OffsetMaps(np.full((2, 2), np.nan), np.zeros((2, 2)), np.zeros((2, 2)))


def test_decode_examples():
    a = RowAnchors([20.0, 1.0], [5.0, 5.0])
    assert decode_depth(0, 0.4, a) == 22.0
    assert decode_depth(0, 0.0, a) == 20.0
    with pytest.raises(NonPositiveDepth):
        decode_depth(1, -1.0, a)
    with pytest.raises(OutOfBounds):
        decode_depth(2, 0.0, a)
    with pytest.raises(InvalidParams):
        RowAnchors([1.0], [0.0])


@settings(max_examples=300, deadline=None)
@given(z=st.floats(1e-3, 1e3), alpha=st.floats(-100, 100), beta=st.floats(1e-2, 1e2))
def test_encode_decode_round_trip(z, alpha, beta):
    a = RowAnchors([alpha], [beta])
    assert decode_depth(0, encode_depth(0, z, a), a) == pytest.approx(z, abs=1e-12 * max(1.0, abs(alpha), z))


def test_fit_anchors_examples():
    a = fit_row_anchors([np.full((4, 3), 10.0)])
    assert np.all(a.alpha == 10.0) and np.all(a.beta == 0.1)
    b = fit_row_anchors([np.full((3, 2), 10.0), np.full((3, 2), 20.0)])
    assert np.all(b.alpha == 15.0) and np.allclose(b.beta, 5.0)
    with pytest.raises(InsufficientData):
        fit_row_anchors([np.pad(np.full((1, 4), 5.0), ((0, 3), (0, 0)))])


def test_fit_anchors_interpolates_missing_rows():
    d = np.zeros((5, 2))
    d[0] = 10.0
    d[4] = 30.0
    a = fit_row_anchors([d])
    assert np.allclose(a.alpha, [10, 15, 20, 25, 30])


def test_fit_anchors_flat_ground():
    maps = []
    for seed in range(6):
        scene = make_scene(seed, SceneParams(terrain=TerrainParams(kind="flat"), beam_count=2))
        maps.append(scene.depth)
    a = fit_row_anchors(maps)
    rows = np.flatnonzero(np.any(np.stack(maps) > 0, axis=(0, 2)))
    analytic = 1.6 * K.fy / (rows - K.cy)
    assert np.max(np.abs(a.alpha[rows] / analytic - 1.0)) < 0.02


def test_complete_depth_examples():
    dense = np.random.default_rng(0).uniform(1, 50, (20, 30))
    assert np.array_equal(complete_depth(dense), dense)
    one = np.zeros((15, 17))
    one[3, 4] = 10.0
    assert np.all(complete_depth(one) == 10.0)
    with pytest.raises(EmptyDepth):
        complete_depth(np.zeros((4, 4)))


def test_complete_depth_properties():
    rng = np.random.default_rng(1)
    sparse = np.where(rng.random((60, 80)) < 0.05, rng.uniform(2, 40, (60, 80)), 0.0)
    out = complete_depth(sparse)
    valid = sparse > 0
    assert np.all(out > 0)
    assert np.array_equal(out[valid], sparse[valid])
    assert out.min() >= sparse[valid].min() and out.max() <= sparse[valid].max()
    assert np.array_equal(complete_depth(out), out)


def test_complete_depth_checkerboard():
    truth = ground_depth_map(K, (720, 1280))
    v, u = np.indices(truth.shape)
    sparse = np.where((u + v) % 2 == 0, truth, 0.0)
    out = complete_depth(sparse)
    near = (truth > 0) & (truth <= 15.0)
    assert np.max(np.abs(out[near] - truth[near])) < 0.2


def test_lift_empty_mask():
    shape = (40, 50)
    assert lift_to_lanes(np.zeros(shape, bool), OffsetMaps.zeros(shape), RowAnchors(np.full(40, 10.0), np.ones(40)), K) == []


def test_lift_vertical_column_constant_depth():
    h, w = 200, 300
    mask = np.zeros((h, w), bool)
    mask[50:150, 120] = True
    lanes = lift_to_lanes(mask, OffsetMaps.zeros((h, w)), RowAnchors(np.full(h, 12.0), np.ones(h)), K)
    assert len(lanes) == 1
    assert np.ptp(lanes[0].points[:, 0]) < 1e-6


def test_lift_zero_offsets_matches_backprojection():
    h, w = 720, 1280
    v = np.arange(420, 700)
    u = (640 + 0.4 * (v - 420)).round().astype(int)
    mask = np.zeros((h, w), bool)
    mask[v, u] = True
    depth = ground_depth_map(K, (h, w))[:, 0]
    anchors = RowAnchors(np.where(depth > 0, depth, 1.0), np.ones(h))
    lanes = lift_to_lanes(mask, OffsetMaps.zeros((h, w)), anchors, K, LiftConfig(smooth=False))
    assert len(lanes) == 1
    direct = backproject(u.astype(float), v.astype(float), depth[v], K)[::-1]
    got = lanes[0].points
    assert got.shape == direct.shape
    assert np.max(np.abs(got - direct)) < 1e-6


@pytest.mark.parametrize("seed", [0, 3, 8])
def test_lift_with_oracle_offsets(seed):
    scene = make_scene(seed, SceneParams(beam_count=2))
    frame = render_frame(scene.lanes, K)
    anchors = fit_row_anchors([frame.depth])
    du, dv, dz = oracle_offsets(frame, anchors)
    lanes = lift_to_lanes(frame.mask, OffsetMaps(du, dv, dz), anchors, K)
    assert len(lanes) == len(scene.lanes)
    cfg = MatchConfig()
    for gt in scene.lanes:
        assert min(unilateral_cd(p, gt, cfg) for p in lanes) < 0.05


def test_seg_loss_closed_forms():
    gt = np.random.default_rng(0).random((8, 9)) < 0.3
    assert seg_loss(np.full(gt.shape, 0.5), gt) == pytest.approx(math.log(2), abs=1e-9)
    assert seg_loss(gt.astype(float), gt) < 1e-6
    assert seg_loss(np.array([[0.9]]), np.array([[True]])) == pytest.approx(-math.log(0.9), abs=1e-12)
    with pytest.raises(ShapeMismatch):
        seg_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_seg_loss_nonnegative():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.random((5, 5))
        assert seg_loss(p, rng.random((5, 5)) < 0.5) >= 0


def _one_pixel(delta, channel):
    maps = [np.zeros((1, 1)) for _ in range(3)]
    maps[channel][0, 0] = delta
    return OffsetMaps(*maps)


def test_reg_loss_closed_forms():
    zero = OffsetMaps.zeros((1, 1))
    valid = np.ones((1, 1), bool)
    assert reg_loss(zero, zero, valid) == 0.0
    assert abs(reg_loss(_one_pixel(0.5, 0), zero, valid) - 0.125 / 3) < 1e-12
    assert abs(reg_loss(_one_pixel(2.0, 2), zero, valid) - 1.5 / 3) < 1e-12
    with pytest.raises(NoValidPixels):
        reg_loss(zero, zero, np.zeros((1, 1), bool))


def test_reg_loss_symmetric_and_monotone():
    zero = OffsetMaps.zeros((1, 1))
    valid = np.ones((1, 1), bool)
    prev = -1.0
    for d in np.linspace(0, 4, 81):
        for c in range(3):
            assert reg_loss(_one_pixel(d, c), zero, valid) == reg_loss(_one_pixel(-d, c), zero, valid)
        cur = reg_loss(_one_pixel(d, 1), zero, valid)
        assert cur >= prev
        prev = cur


def test_reg_loss_only_counts_valid():
    a = OffsetMaps(np.array([[0.5, 100.0]]), np.zeros((1, 2)), np.zeros((1, 2)))
    assert reg_loss(a, OffsetMaps.zeros((1, 2)), np.array([[True, False]])) == pytest.approx(0.125 / 3)


def test_total_loss():
    assert total_loss(0.7, 0.3) == 1.0
    assert total_loss(0.7, 0.3, LossConfig(0.0)) == 0.7
    assert total_loss(1.0, 2.0, LossConfig(0.5)) == 2.0
    with pytest.raises(InvalidParams):
        LossConfig(-1.0)
    base = total_loss(0.3, 0.0, LossConfig(1.0))
    for lam in (0.0, 0.25, 1.0, 3.0):
        assert total_loss(0.3, 0.8, LossConfig(lam)) - base == lam * 0.8
