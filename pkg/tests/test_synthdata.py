import numpy as np
import pytest

from distinct3d.geometry import normalize_unit_sphere
from distinct3d.seeds import derive_rng
from distinct3d.synthdata import (
    Dataset,
    ShapeFamilySpec,
    build_dataset,
    build_preset_dataset,
    generate_family,
    quad_pod_spec,
    resample_view,
    tail_pod_spec,
    twin_pod_spec,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        ShapeFamilySpec(family_name="bad", pod_count=-1, pod_placement=())
    with pytest.raises(ValueError):
        ShapeFamilySpec(family_name="bad", pod_count=2,
                        pod_placement=((0, 0, 0),))
    with pytest.raises(ValueError):
        ShapeFamilySpec(family_name="far", pod_count=1,
                        pod_placement=((9.0, 0, 0),))


def test_podless_family_mask_all_false():
    spec = ShapeFamilySpec(family_name="plain", pod_count=0, pod_placement=())
    recs = generate_family(spec, 2, derive_rng(1, "plain"), n_master=400)
    assert len(recs) == 2
    for r in recs:
        assert not r.substructure_mask.any()


def test_pod_fraction_ratio_quad_vs_twin():
    quad = generate_family(quad_pod_spec(), 6, derive_rng(2, "q"),
                           n_master=2000)
    twin = generate_family(twin_pod_spec(), 6, derive_rng(2, "t"),
                           n_master=2000)
    fq = np.mean([r.substructure_mask.mean() for r in quad])
    ft = np.mean([r.substructure_mask.mean() for r in twin])
    assert fq / ft == pytest.approx(2.0, rel=0.2)


def test_generation_deterministic():
    spec = twin_pod_spec()
    a = generate_family(spec, 3, derive_rng(5, "d"), n_master=300)
    b = generate_family(spec, 3, derive_rng(5, "d"), n_master=300)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.mesh.vertices, rb.mesh.vertices)
        np.testing.assert_array_equal(ra.master_cloud.points,
                                      rb.master_cloud.points)
        np.testing.assert_array_equal(ra.substructure_mask,
                                      rb.substructure_mask)


def test_pod_points_separable_from_body():
    for spec in (twin_pod_spec(), quad_pod_spec(), tail_pod_spec()):
        recs = generate_family(spec, 2, derive_rng(7, spec.family_name),
                               n_master=1500)
        for r in recs:
            pod = r.master_cloud.points[r.substructure_mask]
            body = r.master_cloud.points[~r.substructure_mask]
            assert len(pod) > 0 and len(body) > 0
            d = np.linalg.norm(pod[:, None, :] - body[None, :, :], axis=2)
            assert d.min() > 1e-3


def test_master_clouds_normalized():
    ds = build_dataset([(twin_pod_spec(), 2), (quad_pod_spec(), 2)],
                       N=64, seed=3)
    for r in ds.records:
        pts = r.master_cloud.points
        assert pts.shape == (256, 3)
        np.testing.assert_allclose(pts.mean(axis=0), 0.0, atol=1e-9)
        assert np.linalg.norm(pts, axis=1).max() == pytest.approx(1.0,
                                                                  abs=1e-9)
        # normalization is already applied, so re-normalizing is a no-op
        again = normalize_unit_sphere(r.master_cloud)
        np.testing.assert_allclose(again.points, pts, atol=1e-9)


def test_build_dataset_counts_and_digest():
    ds = build_dataset([(twin_pod_spec(), 3), (quad_pod_spec(), 3)],
                       N=32, seed=11)
    assert len(ds.records) == 6
    assert ds.N == 32
    ds2 = build_dataset([(twin_pod_spec(), 3), (quad_pod_spec(), 3)],
                        N=32, seed=11)
    assert ds.digest() == ds2.digest()
    ds3 = build_dataset([(twin_pod_spec(), 3), (quad_pod_spec(), 3)],
                        N=32, seed=12)
    assert ds.digest() != ds3.digest()


def test_build_dataset_shuffles_families_together():
    ds = build_dataset([(twin_pod_spec(), 5), (quad_pod_spec(), 5)],
                       N=16, seed=2)
    fams = [r.family_name for r in ds.records]
    # shuffled: not all of one family first
    assert fams[:5] != ["twin-pod"] * 5 or fams[5:] != ["quad-pod"] * 5


def test_build_dataset_too_small():
    with pytest.raises(ValueError):
        build_dataset([(twin_pod_spec(), 1)], N=16, seed=0)
    with pytest.raises(ValueError):
        Dataset(records=[], N=16)


def test_resample_view_permutation_when_full_and_unjittered():
    ds = build_dataset([(twin_pod_spec(), 1), (quad_pod_spec(), 1)],
                       N=32, seed=9)
    rec = ds.records[0]
    view = resample_view(rec, rec.master_cloud.n, derive_rng(1, "v"),
                         jitter_sigma=0.0)
    got = np.asarray(sorted(map(tuple, view.points)))
    want = np.asarray(sorted(map(tuple, rec.master_cloud.points)))
    np.testing.assert_array_equal(got, want)


def test_resample_view_deterministic_and_distinct():
    ds = build_dataset([(twin_pod_spec(), 1), (quad_pod_spec(), 1)],
                       N=64, seed=9)
    rec = ds.records[0]
    a = resample_view(rec, 64, derive_rng(4, "a"))
    a2 = resample_view(rec, 64, derive_rng(4, "a"))
    b = resample_view(rec, 64, derive_rng(4, "b"))
    np.testing.assert_array_equal(a.points, a2.points)
    assert not np.array_equal(a.points, b.points)
    with pytest.raises(ValueError):
        resample_view(rec, rec.master_cloud.n + 1, derive_rng(0, "x"))


def test_resample_view_hausdorff_bound():
    ds = build_dataset([(twin_pod_spec(), 1), (quad_pod_spec(), 1)],
                       N=128, seed=21)
    rec = ds.records[0]
    master = rec.master_cloud.points
    d = np.linalg.norm(master[:, None, :] - master[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    spacing = d.min(axis=1).max()
    a = resample_view(rec, 128, derive_rng(6, "h1")).points
    b = resample_view(rec, 128, derive_rng(6, "h2")).points
    cross = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    hausdorff = max(cross.min(axis=1).max(), cross.min(axis=0).max())
    assert hausdorff <= 2.0 * (spacing + 0.05)


def test_preset_names():
    ds = build_preset_dataset("twin-vs-quad", 2, N=32, seed=1)
    fams = {r.family_name for r in ds.records}
    assert fams == {"twin-pod", "quad-pod"}
    ds = build_preset_dataset("quad-vs-tail", 2, N=32, seed=1)
    assert {r.family_name for r in ds.records} == {"quad-pod", "tail-pod"}
    with pytest.raises(ValueError):
        build_preset_dataset("nope", 2, N=32, seed=1)
