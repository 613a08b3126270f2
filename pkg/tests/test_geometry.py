import numpy as np
import pytest

from wavecell.geometry import (Box, ElementClass, ImmersedGeometry,
                               cardan_rotation_matrix, octree_partition)


def test_cardan_zero_angles_is_identity():
    T = cardan_rotation_matrix((0.0, 0.0, 0.0))
    assert np.allclose(T, np.eye(3), atol=1e-15)


def test_cardan_x_quarter_turn():
    # Intrinsic X-Y-Z: a 90 degree roll about x takes +y to +z.
    T = cardan_rotation_matrix((90.0, 0.0, 0.0))
    assert np.allclose(T @ np.array([0.0, 1.0, 0.0]), [0.0, 0.0, 1.0],
                       atol=1e-14)


@pytest.mark.parametrize("angles", [(10.0, 10.0, 10.0), (33.0, -7.0, 120.0),
                                    (-90.0, 45.0, 0.5)])
def test_cardan_orthogonal_right_handed(angles):
    T = cardan_rotation_matrix(angles)
    assert np.allclose(T.T @ T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(T) - 1.0) < 1e-12


def test_cardan_composition_order():
    # T = Rz(psi) Ry(theta) Rx(phi), checked against the explicit product.
    phi, th, ps = np.radians([10.0, 20.0, 30.0])
    Rx = np.array([[1, 0, 0],
                   [0, np.cos(phi), -np.sin(phi)],
                   [0, np.sin(phi), np.cos(phi)]])
    Ry = np.array([[np.cos(th), 0, np.sin(th)],
                   [0, 1, 0],
                   [-np.sin(th), 0, np.cos(th)]])
    Rz = np.array([[np.cos(ps), -np.sin(ps), 0],
                   [np.sin(ps), np.cos(ps), 0],
                   [0, 0, 1]])
    T = cardan_rotation_matrix((10.0, 20.0, 30.0))
    assert np.allclose(T, Rz @ Ry @ Rx, atol=1e-14)


def test_geometry_invariants(benchmark_geometry):
    g = benchmark_geometry
    assert g.l_p < g.l_e
    T = g.rotation
    assert np.allclose(T.T @ T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(T) - 1.0) < 1e-12


def test_transform_round_trip(benchmark_geometry):
    g = benchmark_geometry
    rng = np.random.default_rng(0)
    x = rng.uniform(0.0, 0.5, size=(1000, 3))
    back = g.to_global(g.to_local(x))
    assert np.max(np.abs(back - x)) < 1e-12
    # isometry
    d_local = np.linalg.norm(g.to_local(x), axis=1)
    d_global = np.linalg.norm(x - g.center, axis=1)
    assert np.allclose(d_local, d_global, atol=1e-12)


def test_to_local_center_and_identity():
    g = ImmersedGeometry.from_angles(0.3, 0.5, (0.0, 0.0, 0.0))
    assert np.allclose(g.to_local(g.center), [0.0, 0.0, 0.0], atol=1e-15)
    x = np.array([0.1, 0.2, 0.3])
    assert np.allclose(g.to_local(x), x - g.center, atol=1e-15)


def test_classify_point_closed_cube(benchmark_geometry):
    g = benchmark_geometry
    r = g.l_p / 2.0
    assert g.classify_point(g.center) == ElementClass.INSIDE
    # |x'_1| = l_p is well outside
    assert g.classify_point(g.to_global([2.0 * r, 0.0, 0.0])) == ElementClass.OUTSIDE
    # a face point belongs to the closed cube
    assert g.classify_point(g.to_global([r, 0.0, 0.0])) == ElementClass.INSIDE
    assert g.classify_point(g.to_global([r, r, r])) == ElementClass.INSIDE


def test_classify_box_cases(benchmark_geometry):
    g = benchmark_geometry
    tiny = Box(g.center - 1e-3, g.center + 1e-3)
    assert g.classify_box(tiny) == ElementClass.INSIDE
    far = Box(np.array([0.49, 0.49, 0.49]), np.array([0.5, 0.5, 0.5]))
    assert g.classify_box(far) == ElementClass.OUTSIDE
    face_pt = g.to_global([g.l_p / 2.0, 0.0, 0.0])
    straddle = Box(face_pt - 0.01, face_pt + 0.01)
    assert g.classify_box(straddle) == ElementClass.CUT


def test_classify_box_agrees_with_point_on_degenerate_boxes(benchmark_geometry):
    g = benchmark_geometry
    rng = np.random.default_rng(1)
    for _ in range(200):
        x = rng.uniform(0.0, 0.5, size=3)
        eps = 1e-9
        b = Box(x - eps, x + eps)
        klass = g.classify_box(b)
        if klass == ElementClass.CUT:
            continue  # the point sits within eps of the boundary
        assert klass == g.classify_point(x)


def test_sat_against_dense_sampling(benchmark_geometry):
    # Exact box classification versus 10^3 point samples per box.  A
    # verdict of Inside/Outside must be confirmed by every sample; mixed
    # samples force a Cut verdict.  (All-in or all-out samples cannot
    # rule out Cut, since sampling misses thin slivers.)
    g = benchmark_geometry
    rng = np.random.default_rng(2)
    t = np.linspace(0.0, 1.0, 10)
    TX, TY, TZ = np.meshgrid(t, t, t, indexing="ij")
    unit = np.stack([TX, TY, TZ], axis=-1).reshape(-1, 3)
    n_mixed = 0
    for _ in range(100):
        lo = rng.uniform(0.0, 0.45, size=3)
        hi = lo + rng.uniform(0.01, 0.1, size=3)
        klass = g.classify_box(Box(lo, hi))
        inside = g.contains(lo + unit * (hi - lo))
        if klass == ElementClass.INSIDE:
            assert inside.all()
        elif klass == ElementClass.OUTSIDE:
            assert not inside.any()
        if inside.any() and not inside.all():
            n_mixed += 1
            assert klass == ElementClass.CUT
    assert n_mixed > 0  # the draw actually exercised cut boxes


def test_octree_inside_box_single_leaf(benchmark_geometry):
    g = benchmark_geometry
    b = Box(g.center - 5e-3, g.center + 5e-3)
    leaves = octree_partition(g, b, max_depth=3)
    assert len(leaves) == 1
    assert ElementClass(int(leaves.cls[0])) == ElementClass.INSIDE
    assert np.allclose(leaves.lo[0], b.lo) and np.allclose(leaves.hi[0], b.hi)


def test_octree_cut_box_depths(benchmark_geometry):
    g = benchmark_geometry
    face_pt = g.to_global([g.l_p / 2.0, 0.0, 0.0])
    b = Box(face_pt - 0.02, face_pt + 0.02)
    assert len(octree_partition(g, b, max_depth=0)) == 1
    leaves = octree_partition(g, b, max_depth=1)
    assert len(leaves) == 8


@pytest.mark.parametrize("depth", [0, 1, 2, 4])
def test_octree_leaves_tile_parent(benchmark_geometry, depth):
    g = benchmark_geometry
    face_pt = g.to_global([g.l_p / 2.0, 0.0, 0.0])
    b = Box(face_pt - 0.02, face_pt + 0.02)
    leaves = octree_partition(g, b, max_depth=depth)
    vols = np.prod(leaves.hi - leaves.lo, axis=1)
    assert abs(vols.sum() - b.volume) <= 1e-12 * b.volume
    # only cut leaves may remain subdivided; inside/outside leaves are
    # never smaller than their first uncut ancestor
    assert (vols > 0.0).all()


def test_volume_fraction_on_plane_cut():
    g = ImmersedGeometry.from_angles(0.3, 0.5, (0.0, 0.0, 0.0))
    # cube face at x = 0.40; box covers 40% inside
    b = Box(np.array([0.36, 0.2, 0.2]), np.array([0.46, 0.3, 0.3]))
    assert abs(g.volume_fraction(b) - 0.4) < 1e-12
