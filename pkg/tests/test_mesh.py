import numpy as np
import pytest

from hdgwave.mesh import (
    GeometricMap,
    build_structured_box,
    classify_skeleton,
    element_volumes,
    embed_face_points,
    face_areas,
    face_geometry,
    orient_face_points,
)


def test_face_counts_2x2x1(box221):
    assert box221.n_elements == 4
    assert len(box221.interior_faces) == 4
    assert len(box221.boundary_faces) == 16


def test_face_counts_single_cell(box111):
    assert box111.n_elements == 1
    assert len(box111.interior_faces) == 0
    assert len(box111.boundary_faces) == 6


def test_maxwell_cavity_mesh_size():
    m = build_structured_box([1.0, 1.0, 1.0], [8, 8, 8])
    assert m.n_elements == 512
    assert np.allclose(m.cell_sizes, 1.0 / 8.0)


@pytest.mark.parametrize("bad", [
    dict(extents=[1, 1, 1], cells=[0, 1, 1]),
    dict(extents=[1, -1, 1], cells=[1, 1, 1]),
    dict(extents=[0, 1, 1], cells=[1, 1, 1]),
    dict(extents=[1, 1], cells=[2, 2, 2]),
])
def test_invalid_arguments(bad):
    with pytest.raises(ValueError):
        build_structured_box(bad["extents"], bad["cells"])


def test_boundary_counting_tally(box221):
    # every interior face referenced twice over element boundaries, boundary once
    counts = np.zeros(box221.n_faces, dtype=int)
    for e in range(box221.n_elements):
        for f in box221.elem_faces[e]:
            counts[f] += 1
    assert np.all(counts[box221.interior_faces] == 2)
    assert np.all(counts[box221.boundary_faces] == 1)


@pytest.mark.parametrize("rule,expected", [
    ("none", 0), ("all", 20), ("interior", 4),
])
def test_classify_skeleton(box221, rule, expected):
    assert classify_skeleton(box221, rule).sum() == expected


def test_classify_skeleton_bad_rule(box221):
    with pytest.raises(ValueError):
        classify_skeleton(box221, "some")


def test_plus_x_normal(box111):
    f = [f for f in box111.boundary_faces if box111.boundary_tag[int(f)] == "xmax"][0]
    pts = np.array([[0.3, -0.7], [0.0, 0.0], [-0.2, 0.9]])
    _, normals, _ = face_geometry(box111, int(f), pts)
    assert np.allclose(normals, [1.0, 0.0, 0.0], atol=1e-14)


def test_surface_jacobian_affine():
    m = build_structured_box([1.0, 1.0, 1.0], [4, 4, 4])
    areas = face_areas(m)
    # each face is (1/4)^2 scaled from the [-1,1]^2 reference of measure 4
    assert np.allclose(areas, 0.25**2, atol=1e-12)


def test_interior_face_normal_antisymmetry(box221):
    gm = GeometricMap(box221)
    pts = np.array([[0.11, -0.3], [0.5, 0.5]])
    for f in box221.interior_faces:
        _, n_left, _ = face_geometry(box221, int(f), pts)
        e_r, lf_r = box221.face_elems[f, 1], box221.face_local[f, 1]
        ref = embed_face_points(3, int(lf_r),
                                orient_face_points(3, int(box221.face_orient[f]), pts))
        jac, det, inv = gm.jacobian(ref, np.array([e_r]))
        from hdgwave.mesh import reference_outward_normal
        nref = reference_outward_normal(3, int(lf_r))
        nvec = det[0][..., None] * np.einsum("pji,j->pi", inv[0], nref)
        n_right = nvec / np.linalg.norm(nvec, axis=-1, keepdims=True)
        assert np.abs(n_left + n_right).max() < 1e-14


@pytest.mark.parametrize("cells,extents", [
    ([2, 2, 1], [1.0, 1.0, 1.0]),
    ([3, 2, 2], [2.0, 1.0, 0.5]),
    ([4, 4], [1.0, 3.0]),
])
def test_volume_and_area_sums(cells, extents):
    m = build_structured_box(extents, cells)
    vol = np.prod(extents)
    assert abs(element_volumes(m).sum() - vol) < 1e-10 * max(1.0, vol)
    d = len(extents)
    if d == 3:
        surf = 2 * (extents[0] * extents[1] + extents[1] * extents[2]
                    + extents[0] * extents[2])
    else:
        surf = 2 * (extents[0] + extents[1])
    assert abs(face_areas(m)[m.boundary_faces].sum() - surf) < 1e-10 * surf


def test_orientation_consistency():
    # shared quadrature points must map to identical physical coordinates
    m = build_structured_box([1.0, 2.0, 0.5], [2, 3, 2])
    gm = GeometricMap(m)
    pts = np.array([[0.2, -0.6], [-0.9, 0.4], [0.0, 0.0]])
    for f in m.interior_faces:
        e_l, lf_l = m.face_elems[f, 0], m.face_local[f, 0]
        x_left = gm.physical(embed_face_points(3, int(lf_l), pts), np.array([e_l]))[0]
        e_r, lf_r = m.face_elems[f, 1], m.face_local[f, 1]
        mapped = orient_face_points(3, int(m.face_orient[f]), pts)
        x_right = gm.physical(embed_face_points(3, int(lf_r), mapped),
                              np.array([e_r]))[0]
        assert np.abs(x_left - x_right).max() < 1e-12


def test_geometric_degree_volume():
    m = build_structured_box([1.0, 1.0], [3, 3], p=2)
    assert m.geom_nodes.shape[1] == 9
    assert abs(element_volumes(m).sum() - 1.0) < 1e-10


def test_boundary_tags_complete(box221):
    tags = set(box221.boundary_tag[int(f)] for f in box221.boundary_faces)
    assert tags == {"xmin", "xmax", "ymin", "ymax", "zmin", "zmax"}
