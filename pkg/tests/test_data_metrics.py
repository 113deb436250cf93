import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jcatdepth.checks import check_loss
from jcatdepth.data import (Box, Plane, SceneSpec, Sphere, gen_scene, lidar_scan,
                            sample_random_sparse, stack_samples, subsample_lidar_lines)
from jcatdepth.io import (append_metrics_csv, read_float_map, read_metrics_csv, read_pgm16,
                          write_float_map, write_pgm16)
from jcatdepth.metrics import CSV_FIELDS, EmptyMaskError, baseline_fill, compute_metrics, loss_l1_l2
from jcatdepth.model import RgbdSample
from jcatdepth.tensor import ShapeError, Tensor

import oracles


# -- scenes ------------------------------------------------------------------------
def test_same_seed_is_bit_identical():
    a, b = gen_scene(SceneSpec(seed=4)), gen_scene(SceneSpec(seed=4))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.gt, b.gt)
    assert not np.array_equal(a.gt, gen_scene(SceneSpec(seed=5)).gt)


def test_fronto_parallel_plane_is_constant():
    s = gen_scene(SceneSpec(primitives=[Plane((0, 0, 1), 2.0)], height=32, width=48))
    assert s.gt.shape == (1, 1, 32, 48) and np.all(s.gt == 2.0)
    assert s.image.shape == (1, 3, 32, 48) and not s.sparse.any()


def test_sphere_in_front_of_plane_is_closer():
    prims = [Plane((0, 0, 1), 5.0), Sphere((0, 0, 3.0), 1.0)]
    d = gen_scene(SceneSpec(primitives=prims, height=32, width=32)).gt[0, 0]
    assert d[16, 16] < 5.0 and abs(d[16, 16] - 2.0) < 0.01
    assert d[0, 0] == 5.0


def test_box_face_depth():
    prims = [Plane((0, 0, 1), 8.0), Box((-0.5, -0.5, 3.0), (0.5, 0.5, 4.0))]
    d = gen_scene(SceneSpec(primitives=prims, height=32, width=32)).gt[0, 0]
    assert d[16, 16] == pytest.approx(3.0)


def test_empty_scene_falls_back_to_mid_plane():
    s = gen_scene(SceneSpec(primitives=[], depth_range=(1.0, 9.0)))
    assert np.all(s.gt == 5.0)


@pytest.mark.parametrize("seed", range(20))
def test_scene_invariants(seed):
    s = gen_scene(SceneSpec(seed=seed))
    d = s.gt[0, 0]
    assert np.all(d > 0) and np.all((s.image >= 0) & (s.image <= 1))
    assert d.min() >= 1.0 and d.max() <= 10.0
    gr, gc = np.abs(np.diff(d, axis=0)), np.abs(np.diff(d, axis=1))
    edge = np.zeros_like(d, dtype=bool)
    edge[:-1] |= gr > 0.5
    edge[:, :-1] |= gc > 0.5
    assert edge.mean() >= 0.01


def test_stack_samples():
    s = stack_samples([gen_scene(SceneSpec(seed=i, height=32, width=32)) for i in range(3)])
    assert s.image.shape == (3, 3, 32, 32) and s.gt.shape == (3, 1, 32, 32)


# -- random sparsity ------------------------------------------------------------------
def test_sparse_all_points_is_identity_and_zero_is_empty():
    d = gen_scene(SceneSpec(seed=1, height=16, width=16)).gt[0, 0]
    assert np.array_equal(sample_random_sparse(d, d.size, seed=0), d)
    assert not sample_random_sparse(d, 0, seed=0).any()


def test_sparse_500_on_304x228():
    d = np.random.default_rng(0).uniform(1, 5, size=(228, 304))
    s = sample_random_sparse(d, 500, seed=3)
    assert np.count_nonzero(s) == 500
    assert np.array_equal(s[s > 0], d[s > 0])


def test_sparse_respects_invalid_pixels_and_errors():
    d = np.zeros((10, 10))
    d[2:5, 2:5] = 3.0
    s = sample_random_sparse(d, 9, seed=0)
    assert np.array_equal(s, d)
    with pytest.raises(ValueError):
        sample_random_sparse(d, 10, seed=0)
    with pytest.raises(ValueError):
        sample_random_sparse(d, -1, seed=0)


def test_sparse_sampling_is_roughly_uniform():
    d = np.ones((8, 8))
    hits = sum((sample_random_sparse(d, 8, seed=i) > 0).astype(int) for i in range(2000))
    # each pixel is kept with probability 1/8: 250 expected, sd ~14.8
    assert np.all(np.abs(hits - 250) < 75)


# -- LiDAR lines -----------------------------------------------------------------
@pytest.fixture(scope="module")
def plane_scan():
    d = gen_scene(SceneSpec(primitives=[Plane((0, 0, 1), 4.0)], height=64, width=64)).gt[0, 0]
    return d, lidar_scan(d, 64)


def test_full_line_count_is_identity(plane_scan):
    _, scan = plane_scan
    sub = subsample_lidar_lines(scan, 64)
    assert np.array_equal(sub.depth, scan.depth) and np.array_equal(sub.band, scan.band)


def test_single_line_keeps_band_zero(plane_scan):
    _, scan = plane_scan
    sub = subsample_lidar_lines(scan, 1)
    assert sub.count > 0 and set(np.unique(sub.band[sub.band >= 0])) == {0}


def test_64_to_16_counts_a_quarter(plane_scan):
    _, scan = plane_scan
    sub = subsample_lidar_lines(scan, 16)
    per_band = np.array([(scan.band == l).sum() for l in range(64)])
    assert sub.count == per_band[::4].sum()
    assert abs(sub.count - scan.count / 4) <= per_band.max()


def test_scan_reads_ground_truth(plane_scan):
    d, scan = plane_scan
    hit = scan.band >= 0
    assert np.array_equal(scan.depth[hit], d[hit]) and not scan.depth[~hit].any()


def test_lines_must_divide(plane_scan):
    _, scan = plane_scan
    for bad in (0, 3, 48, 128):
        with pytest.raises(ValueError):
            subsample_lidar_lines(scan, bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4, 8, 16, 32, 64]))
def test_subsample_is_subset(seed, lines):
    d = gen_scene(SceneSpec(seed=seed, height=32, width=32)).gt[0, 0]
    scan = lidar_scan(d, 64)
    sub = subsample_lidar_lines(scan, lines)
    kept = sub.depth > 0
    assert np.all(scan.depth[kept] == sub.depth[kept])
    assert np.all(scan.band[kept] % (64 // lines) == 0)


# -- loss ---------------------------------------------------------------------------
def test_loss_examples():
    gt = np.array([[[[1.0, 2.0]]]])
    assert loss_l1_l2(Tensor(gt.copy()), gt).item() == 0.0
    one = np.array([[[[3.0, 0.0]]]])
    assert loss_l1_l2(Tensor(np.array([[[[5.0, 7.0]]]])), one).item() == 6.0
    assert loss_l1_l2(Tensor(np.array([[[[2.0, 0.0]]]])), np.array([[[[1.0, 1.0]]]])).item() == 2.0


def test_loss_errors():
    with pytest.raises(EmptyMaskError):
        loss_l1_l2(Tensor(np.ones((1, 1, 2, 2))), np.zeros((1, 1, 2, 2)))
    with pytest.raises(ShapeError):
        loss_l1_l2(Tensor(np.ones((1, 1, 2, 2))), np.ones((1, 1, 2, 3)))


def test_loss_gradient_is_sign_plus_twice_residual():
    pred = Tensor(np.array([[[[1.5, 0.2, 4.0]]]]), requires_grad=True)
    gt = np.array([[[[1.0, 1.0, 0.0]]]])
    loss_l1_l2(pred, gt).backward()
    np.testing.assert_allclose(pred.grad[0, 0, 0], [(1 + 1.0) / 2, (-1 - 1.6) / 2, 0.0])


def test_loss_gradcheck():
    assert check_loss(seed=0).passed


# -- metrics --------------------------------------------------------------------------
def test_metrics_closed_form():
    m = compute_metrics(np.array([1.0, 3.0]), np.array([1.0, 1.0]))
    assert m.rmse_mm == pytest.approx(math.sqrt(2000.0 ** 2 / 2))
    assert round(m.rmse_mm, 1) == 1414.2
    assert m.mae_mm == pytest.approx(1000.0) and m.rel == pytest.approx(1.0)
    # 1/km: |1000/3 - 1000/1| = 666.67 on one pixel of two
    assert m.imae_ikm == pytest.approx((1000 - 1000 / 3) / 2)
    assert m.irmse_ikm == pytest.approx(math.sqrt((1000 - 1000 / 3) ** 2 / 2))
    assert m.valid_count == 2


def test_perfect_prediction_is_all_zero():
    gt = np.random.default_rng(0).uniform(1, 5, size=(4, 4))
    m = compute_metrics(gt.copy(), gt)
    assert (m.rmse_mm, m.mae_mm, m.irmse_ikm, m.imae_ikm, m.rel) == (0, 0, 0, 0, 0)


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 10, size=(2, 1, 9, 11))
    gt[rng.uniform(size=gt.shape) < 0.3] = 0
    pred = gt + rng.normal(size=gt.shape) * 0.5
    pred[rng.uniform(size=gt.shape) < 0.05] = 0.0
    got = compute_metrics(pred, gt).to_dict()
    want = oracles.metrics_oracle(pred, gt)
    for k, v in want.items():
        assert got[k] == pytest.approx(v, rel=1e-9, abs=1e-9), k


def test_inverse_metrics_skip_nonpositive_predictions():
    m = compute_metrics(np.array([0.0, -1.0, 2.0]), np.array([1.0, 1.0, 1.0]))
    assert m.inverse_skipped == 2 and m.imae_ikm == pytest.approx(500.0)


def test_metrics_ignore_invalid_pixels():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 5, size=(6, 6))
    gt[::2] = 0
    pred = rng.uniform(1, 5, size=(6, 6))
    a = compute_metrics(pred, gt)
    pred[gt == 0] = rng.uniform(-100, 100, size=int((gt == 0).sum()))
    assert compute_metrics(pred, gt) == a


def test_metrics_nonnegative_and_errors():
    rng = np.random.default_rng(2)
    m = compute_metrics(rng.uniform(0, 5, size=20), rng.uniform(1, 5, size=20))
    assert all(v >= 0 for v in m.to_row())
    with pytest.raises(EmptyMaskError):
        compute_metrics(np.ones(3), np.zeros(3))
    with pytest.raises(ShapeError):
        compute_metrics(np.ones(3), np.ones(4))


# -- baseline -------------------------------------------------------------------------
def test_baseline_dense_is_identity_and_single_point_is_constant():
    d = np.random.default_rng(0).uniform(1, 5, size=(5, 6))
    assert np.array_equal(baseline_fill(d), d)
    s = np.zeros((5, 6))
    s[3, 1] = 2.5
    assert np.all(baseline_fill(s) == 2.5)


def test_baseline_tie_break():
    s = np.zeros((3, 3))
    s[0, 1], s[2, 1] = 1.0, 2.0   # centre row is equidistant: smaller row wins
    assert baseline_fill(s)[1].tolist() == [1.0, 1.0, 1.0]
    s = np.zeros((3, 3))
    s[1, 0], s[1, 2] = 1.0, 2.0   # centre column: smaller column wins
    assert baseline_fill(s)[:, 1].tolist() == [1.0, 1.0, 1.0]


@pytest.mark.parametrize("seed", range(20))
def test_baseline_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    s = np.zeros((7, 9))
    k = 2 if seed < 10 else rng.integers(3, 8)
    idx = rng.choice(s.size, size=k, replace=False)
    s.reshape(-1)[idx] = rng.uniform(1, 5, size=k)
    assert np.array_equal(baseline_fill(s), oracles.nearest_fill_oracle(s))


def test_baseline_accepts_samples_and_batches():
    rng = np.random.default_rng(3)
    sp = np.where(rng.uniform(size=(2, 1, 6, 6)) < 0.2, 3.0, 0.0)
    sp[:, :, 0, 0] = 1.0
    sample = RgbdSample(image=np.zeros((2, 3, 6, 6)), sparse=sp)
    out = baseline_fill(sample)
    assert out.shape == sp.shape
    assert np.array_equal(out[1, 0], baseline_fill(sp[1, 0]))
    with pytest.raises(EmptyMaskError):
        baseline_fill(np.zeros((4, 4)))


# -- file formats ---------------------------------------------------------------------
def test_pgm_roundtrip(tmp_path):
    d = np.random.default_rng(0).uniform(0, 60, size=(7, 5))
    p = tmp_path / "d.pgm"
    write_pgm16(p, d)
    assert p.read_bytes().startswith(b"P5\n5 7\n65535\n")
    np.testing.assert_allclose(read_pgm16(p), np.rint(d * 1000) / 1000, atol=1e-12)
    write_pgm16(p, d, kitti=True)
    np.testing.assert_allclose(read_pgm16(p, kitti=True), np.rint(d * 256) / 256, atol=1e-12)
    with pytest.raises(ValueError):
        write_pgm16(p, np.zeros((1, 2, 2)))


def test_pgm_saturates(tmp_path):
    p = tmp_path / "x.pgm"
    write_pgm16(p, np.array([[-1.0, 100.0]]))
    assert read_pgm16(p).tolist() == [[0.0, 65.535]]


def test_float_map_roundtrip(tmp_path):
    d = np.random.default_rng(1).uniform(0, 10, size=(4, 6))
    p = tmp_path / "d.txt"
    write_float_map(p, d)
    np.testing.assert_allclose(read_float_map(p), d, rtol=1e-8)
    p.write_text("Pf-text\n3 3\n1 2 3\n")
    with pytest.raises(ValueError):
        read_float_map(p)


def test_metrics_csv_header_and_rows(tmp_path):
    p = tmp_path / "m.csv"
    m = compute_metrics(np.array([1.0, 3.0]), np.array([1.0, 1.0]))
    append_metrics_csv(p, m)
    append_metrics_csv(p, m)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(CSV_FIELDS) == "rmse_mm,mae_mm,irmse_ikm,imae_ikm,rel,valid_count"
    rows = read_metrics_csv(p)
    assert len(rows) == 2 and rows[0]["valid_count"] == 2
    assert rows[1]["rmse_mm"] == pytest.approx(m.rmse_mm)
