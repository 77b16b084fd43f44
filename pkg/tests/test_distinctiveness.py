import numpy as np
import pytest

from distinct3d.geometry import Mesh, PointCloud
from distinct3d.encoder import FeatureMatrix
from distinct3d.distinctiveness import (DistinctivenessField, extract,
                                        project_to_mesh, threshold_regions)


def refined(values):
    return FeatureMatrix(values=np.asarray(values, dtype=np.float32),
                         stage="refined")


def test_row_maxima_min_max():
    fr = refined([[3.0, 1.0], [1.0, 0.5], [2.0, 0.0]])
    d = extract(fr)
    assert np.allclose(d.values, [1.0, 0.0, 0.5])
    assert not d.degenerate


def test_constant_rows_degenerate():
    fr = refined(np.full((5, 4), 2.5))
    d = extract(fr)
    assert d.degenerate
    assert np.all(d.values == 0.0)


def test_output_in_unit_interval():
    rng = np.random.default_rng(3)
    fr = refined(rng.normal(size=(40, 8)))
    d = extract(fr)
    assert d.values.min() == 0.0
    assert d.values.max() == 1.0
    assert np.all((d.values >= 0.0) & (d.values <= 1.0))


def test_channel_permutation_invariance():
    rng = np.random.default_rng(4)
    vals = rng.normal(size=(20, 6)).astype(np.float32)
    perm = rng.permutation(6)
    a = extract(refined(vals))
    b = extract(refined(vals[:, perm]))
    assert np.array_equal(a.values, b.values)


def test_monotone_rescale_preserves_argmax():
    rng = np.random.default_rng(5)
    vals = rng.normal(size=(30, 5)).astype(np.float64)
    a = extract(refined(vals))
    b = extract(refined(np.exp(vals)))
    # exp is strictly increasing so the top point cannot move
    assert np.argmax(a.values) == np.argmax(b.values)


def test_rejects_raw_stage():
    f = FeatureMatrix(values=np.ones((4, 3), dtype=np.float32), stage="raw")
    with pytest.raises(ValueError):
        extract(f)


def test_alternative_reductions():
    vals = np.array([[1.0, 5.0, 2.0, 0.0],
                     [2.0, 2.0, 2.0, 2.0],
                     [0.0, 0.0, 0.0, 9.0]])
    fr = refined(vals)
    raw_mean = vals.mean(axis=1)
    d = extract(fr, reduce="mean")
    ref = (raw_mean - raw_mean.min()) / (raw_mean.max() - raw_mean.min())
    assert np.allclose(d.values, ref)
    raw_l2 = np.linalg.norm(vals, axis=1)
    d = extract(fr, reduce="l2")
    ref = (raw_l2 - raw_l2.min()) / (raw_l2.max() - raw_l2.min())
    assert np.allclose(d.values, ref, atol=1e-7)
    raw_t3 = np.sort(vals, axis=1)[:, 1:].mean(axis=1)
    d = extract(fr, reduce="top3")
    ref = (raw_t3 - raw_t3.min()) / (raw_t3.max() - raw_t3.min())
    assert np.allclose(d.values, ref, atol=1e-7)


def test_unknown_reduction_rejected():
    with pytest.raises(ValueError):
        extract(refined(np.ones((3, 2))), reduce="median")


def test_field_validation():
    with pytest.raises(ValueError):
        DistinctivenessField(values=np.array([0.2, 0.9]))
    with pytest.raises(ValueError):
        DistinctivenessField(values=np.array([0.0, 0.5]), degenerate=True)
    DistinctivenessField(values=np.array([0.0, 1.0, 0.25]))


def square_mesh():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                      [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    faces = np.array([[0, 1, 2], [1, 3, 2]])
    return Mesh(vertices=verts, faces=faces)


def test_projection_concentrates_on_coincident_point():
    mesh = square_mesh()
    pts = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0],
                    [0.0, 100.0, 0.0], [50.0, 50.0, 0.0]])
    d = DistinctivenessField(values=np.array([1.0, 0.0, 0.0, 0.5]))
    out = project_to_mesh(mesh, PointCloud(pts), d)
    assert out[0] == pytest.approx(1.0, abs=1e-3)


def test_projection_weighting_at_distance_ratio():
    mesh = Mesh(vertices=np.array([[0.01, 0.0, 0.0]]),
                faces=np.zeros((0, 3), dtype=np.int64))
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    d = np.array([1.0, 0.0, 0.5])
    fld = DistinctivenessField(values=d)
    dist = np.abs(pts[:, 0] - 0.01)
    w = 1.0 / dist
    expect = float(np.dot(w, d) / w.sum())
    # single vertex: min-max collapses, so recompute pre-normalization by hand
    out = project_to_mesh(mesh, PointCloud(pts), fld)
    assert out[0] == 0.0  # single-vertex field min-maxes to zero
    assert expect > 0.9  # the near point dominates at distance ratio 100


def test_projection_uniform_field_degenerates():
    mesh = square_mesh()
    rng = np.random.default_rng(6)
    pts = rng.uniform(0, 1, size=(20, 3))
    vals = np.zeros(20)
    fld = DistinctivenessField(values=vals, degenerate=True)
    out = project_to_mesh(mesh, PointCloud(pts), fld)
    assert np.all(out == 0.0)


def test_projection_length_and_range():
    mesh = square_mesh()
    rng = np.random.default_rng(7)
    pts = rng.uniform(0, 1, size=(50, 3))
    raw = rng.uniform(size=50)
    raw[0], raw[1] = 0.0, 1.0
    fld = DistinctivenessField(values=raw)
    out = project_to_mesh(mesh, PointCloud(pts), fld)
    assert len(out) == 4
    assert out.min() == 0.0 and out.max() == 1.0


def test_threshold_strictness():
    pc = PointCloud(np.zeros((3, 3)))
    d = DistinctivenessField(values=np.array([1.0, 0.0, 0.5]))
    assert list(threshold_regions(pc, d, 0.4)) == [0, 2]
    # strict inequality: the minimum never survives even at zero threshold
    assert list(threshold_regions(pc, d, 0.0)) == [0, 2]
    assert list(threshold_regions(pc, d, 0.999)) == [0]


def test_threshold_validation():
    pc = PointCloud(np.zeros((2, 3)))
    d = DistinctivenessField(values=np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        threshold_regions(pc, d, 1.0)
    with pytest.raises(ValueError):
        threshold_regions(pc, d, -0.1)
