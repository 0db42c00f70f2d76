"""Structured box meshes with a classified face skeleton.

Elements are tensor-product quadrilaterals (d=2) or hexahedra (d=3) with a
geometric map of degree p (p=1 gives affine cells on box domains). Every face
carries a left element; interior faces also carry a right element together
with an orientation code that aligns the right element's view of the face
with the canonical (left) parametrization.

Conventions:
  * reference element is [-1, 1]^d, lattice numbering with axis 0 fastest
  * local face id = 2*axis + side, side 0 at coord -1, side 1 at coord +1
  * face reference coordinates are the non-fixed axes in increasing order
  * canonical face parametrization is the left element's embedding
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._poly import Lagrange1D, lattice, lattice_eval, lattice_grad, lobatto_points

BOUNDARY_TAGS = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


@dataclass(frozen=True)
class ReferenceElement:
    """Reference hexahedron/quadrilateral with a degree-p geometric lattice."""

    shape: str
    dimension: int
    degree: int

    def __post_init__(self):
        if self.shape not in ("hexahedron", "quadrilateral"):
            raise ValueError(f"unsupported element shape {self.shape!r}")
        want = {"hexahedron": 3, "quadrilateral": 2}[self.shape]
        if self.dimension != want:
            raise ValueError(f"{self.shape} requires dimension {want}")
        if self.degree < 1:
            raise ValueError("geometric degree must be >= 1")

    @property
    def n_geom_nodes(self) -> int:
        return (self.degree + 1) ** self.dimension

    def geom_nodes(self) -> np.ndarray:
        """Lattice of geometric nodes in [-1,1]^d, axis 0 fastest."""
        return lattice(lobatto_points(self.degree + 1), self.dimension)


def local_face_axis_side(lf: int) -> tuple[int, int]:
    return lf // 2, lf % 2


def face_axes(d: int, axis: int) -> tuple[int, ...]:
    """Reference axes spanning a face orthogonal to `axis`, increasing order."""
    return tuple(a for a in range(d) if a != axis)


def embed_face_points(d: int, lf: int, fpts: np.ndarray) -> np.ndarray:
    """Map face reference coords (n, d-1) to element reference coords (n, d)."""
    axis, side = local_face_axis_side(lf)
    fpts = np.atleast_2d(fpts)
    out = np.empty((fpts.shape[0], d))
    out[:, axis] = -1.0 if side == 0 else 1.0
    for i, a in enumerate(face_axes(d, axis)):
        out[:, a] = fpts[:, i]
    return out


def reference_outward_normal(d: int, lf: int) -> np.ndarray:
    axis, side = local_face_axis_side(lf)
    n = np.zeros(d)
    n[axis] = -1.0 if side == 0 else 1.0
    return n


def orient_face_points(d: int, code: int, fpts: np.ndarray) -> np.ndarray:
    """Apply an orientation symmetry to face reference coordinates.

    d-1 == 1: code in {0,1}, bit 0 flips the coordinate.
    d-1 == 2: code in {0..7}; bit 0 swaps the axes, bits 1/2 flip them.
    Code 0 is the identity.
    """
    fpts = np.atleast_2d(fpts)
    if d - 1 == 1:
        return -fpts if code & 1 else fpts.copy()
    out = fpts[:, ::-1].copy() if code & 1 else fpts.copy()
    if code & 2:
        out[:, 0] *= -1.0
    if code & 4:
        out[:, 1] *= -1.0
    return out


def n_orientations(d: int) -> int:
    return 2 if d - 1 == 1 else 8


_FACE_CORNERS_1D = np.array([[-1.0], [1.0]])
_FACE_CORNERS_2D = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]])


def _face_corners(d: int) -> np.ndarray:
    return _FACE_CORNERS_1D if d - 1 == 1 else _FACE_CORNERS_2D


def _match_orientation(d: int, canonical_ids, right_ids) -> int:
    """Orientation code mapping the right view's corners onto the canonical ones."""
    fc = _face_corners(d)
    for code in range(n_orientations(d)):
        mapped = orient_face_points(d, code, fc)
        perm = [int(np.argmin(np.abs(fc - m).sum(axis=1))) for m in mapped]
        if all(right_ids[perm[i]] == canonical_ids[i] for i in range(len(fc))):
            return code
    raise RuntimeError("non-conforming face: no orientation matches")


@dataclass
class Mesh:
    """Conforming tensor-product mesh of a box domain."""

    dimension: int
    degree: int
    vertices: np.ndarray          # (nv, d)
    elements: np.ndarray          # (ne, 2^d) corner vertex ids, lattice order
    geom_nodes: np.ndarray        # (ne, (p+1)^d, d) geometric node positions
    face_elems: np.ndarray        # (nf, 2), right = -1 on boundary
    face_local: np.ndarray        # (nf, 2) local face ids, -1 when absent
    face_orient: np.ndarray       # (nf,) orientation code of the right view
    elem_faces: np.ndarray        # (ne, 2d) face id per local face
    boundary_tag: dict[int, str] = field(default_factory=dict)
    cell_sizes: np.ndarray | None = None   # per-axis spacing on uniform grids
    uniform: bool = False                  # all elements congruent

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_faces(self) -> int:
        return self.face_elems.shape[0]

    @property
    def reference(self) -> ReferenceElement:
        shape = "hexahedron" if self.dimension == 3 else "quadrilateral"
        return ReferenceElement(shape, self.dimension, self.degree)

    @property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_elems[:, 1] >= 0)

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_elems[:, 1] < 0)

    @property
    def n_local_faces(self) -> int:
        return 2 * self.dimension

    def face_is_interior(self, f: int) -> bool:
        return bool(self.face_elems[f, 1] >= 0)


def build_structured_box(extents, cells, p: int = 1) -> Mesh:
    """Mesh the box (0, L1) x ... x (0, Ld) with a uniform tensor grid.

    `extents` are the box side lengths, `cells` the element counts per axis.
    """
    extents = np.asarray(extents, dtype=float)
    cells = np.asarray(cells, dtype=int)
    d = len(extents)
    if d not in (2, 3):
        raise ValueError("only 2D and 3D boxes are supported")
    if len(cells) != d:
        raise ValueError("extents and cells must have matching length")
    if np.any(cells < 1):
        raise ValueError(f"cell counts must be >= 1, got {cells.tolist()}")
    if np.any(extents <= 0):
        raise ValueError(f"extents must be > 0, got {extents.tolist()}")
    if p < 1:
        raise ValueError("geometric degree must be >= 1")

    nv_ax = cells + 1
    axes1d = [np.linspace(0.0, extents[a], nv_ax[a]) for a in range(d)]
    nv = int(np.prod(nv_ax))
    vids = np.arange(nv)
    vidx = []
    rem = vids
    for a in range(d):
        vidx.append(rem % nv_ax[a])
        rem = rem // nv_ax[a]
    vertices = np.stack([axes1d[a][vidx[a]] for a in range(d)], axis=1)

    def vertex_id(idx_per_axis):
        out = np.zeros_like(idx_per_axis[0])
        mult = 1
        for a in range(d):
            out = out + mult * idx_per_axis[a]
            mult *= nv_ax[a]
        return out

    ne = int(np.prod(cells))
    eids = np.arange(ne)
    eidx = []
    rem = eids
    for a in range(d):
        eidx.append(rem % cells[a])
        rem = rem // cells[a]

    corners = lattice(np.array([0, 1]), d).astype(int)   # (2^d, d)
    elements = np.empty((ne, 2**d), dtype=int)
    for c, off in enumerate(corners):
        elements[:, c] = vertex_id([eidx[a] + off[a] for a in range(d)])

    # geometric nodes: image of the reference lattice under the multilinear
    # corner map; exact for axis-aligned box cells at any p
    ref = ReferenceElement("hexahedron" if d == 3 else "quadrilateral", d, p)
    lat = ref.geom_nodes()
    corner_vals = lattice_eval(Lagrange1D(np.array([-1.0, 1.0])), lat)
    geom_nodes = np.einsum("gc,ecx->egx", corner_vals, vertices[elements])

    # local corner index of each face-corner position, precomputed per lf
    corner_lat = lattice(np.array([-1.0, 1.0]), d)
    fc = _face_corners(d)
    face_corner_loc = {}
    for lf in range(2 * d):
        pts = embed_face_points(d, lf, fc)
        face_corner_loc[lf] = [
            int(np.argmin(np.abs(corner_lat - ptrow).sum(axis=1))) for ptrow in pts
        ]

    face_of: dict[tuple, int] = {}
    face_elems, face_local, face_orient, canon_ids = [], [], [], []
    elem_faces = np.full((ne, 2 * d), -1, dtype=int)
    for e in range(ne):
        for lf in range(2 * d):
            ids = tuple(elements[e, loc] for loc in face_corner_loc[lf])
            key = tuple(sorted(ids))
            f = face_of.get(key)
            if f is None:
                f = len(face_elems)
                face_of[key] = f
                face_elems.append([e, -1])
                face_local.append([lf, -1])
                face_orient.append(0)
                canon_ids.append(np.array(ids))
            else:
                if face_elems[f][1] != -1:
                    raise RuntimeError("face referenced by more than two elements")
                face_elems[f][1] = e
                face_local[f][1] = lf
                face_orient[f] = _match_orientation(d, canon_ids[f], np.array(ids))
            elem_faces[e, lf] = f

    mesh = Mesh(
        dimension=d,
        degree=p,
        vertices=vertices,
        elements=elements,
        geom_nodes=geom_nodes,
        face_elems=np.array(face_elems, dtype=int),
        face_local=np.array(face_local, dtype=int),
        face_orient=np.array(face_orient, dtype=int),
        elem_faces=elem_faces,
        cell_sizes=extents / cells,
        uniform=True,
    )

    # tag boundary faces by the box side they lie on
    centers = np.array(
        [face_center(mesh, f) for f in mesh.boundary_faces], dtype=float
    ).reshape(-1, d)
    for f, c in zip(mesh.boundary_faces, centers):
        for a in range(d):
            if abs(c[a]) < 1e-12 * max(1.0, extents[a]):
                mesh.boundary_tag[int(f)] = BOUNDARY_TAGS[2 * a]
                break
            if abs(c[a] - extents[a]) < 1e-12 * max(1.0, extents[a]):
                mesh.boundary_tag[int(f)] = BOUNDARY_TAGS[2 * a + 1]
                break
        else:
            raise RuntimeError(f"boundary face {f} not on any box side")
    return mesh


def classify_skeleton(mesh: Mesh, rule: str) -> np.ndarray:
    """Per-face membership flags for the continuous part of the skeleton.

    rule 'none' keeps every face discontinuous (HDG), 'all' makes the whole
    skeleton continuous (EDG), 'interior' only the interior faces (IEDG).
    """
    flags = np.zeros(mesh.n_faces, dtype=bool)
    if rule == "none":
        pass
    elif rule == "all":
        flags[:] = True
    elif rule == "interior":
        flags[mesh.interior_faces] = True
    else:
        raise ValueError(f"unknown skeleton rule {rule!r}")
    return flags


class GeometricMap:
    """Batched evaluator of the element geometric maps of a mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self._basis = Lagrange1D(lobatto_points(mesh.degree + 1))

    def physical(self, ref_pts: np.ndarray, elems=None) -> np.ndarray:
        """Physical coordinates at reference points: (ne, npts, d)."""
        nodes = self.mesh.geom_nodes if elems is None else self.mesh.geom_nodes[elems]
        vals = lattice_eval(self._basis, ref_pts)
        return np.einsum("pg,egx->epx", vals, nodes)

    def jacobian(self, ref_pts: np.ndarray, elems=None):
        """Jacobian J[e,p,i,j] = dx_i/dxi_j, its determinant, and inverse."""
        nodes = self.mesh.geom_nodes if elems is None else self.mesh.geom_nodes[elems]
        grads = lattice_grad(self._basis, ref_pts)
        jac = np.einsum("pgj,egx->epxj", grads, nodes)
        det = np.linalg.det(jac)
        if np.any(det <= 0):
            bad = np.argwhere(det <= 0)
            raise RuntimeError(f"non-positive Jacobian determinant at {bad[0]}")
        inv = np.linalg.inv(jac)
        return jac, det, inv

    def face_quadrature_geometry(self, face_qpts: np.ndarray):
        """Left-view geometry of every face at the given face reference points.

        Returns physical points (nf, nq, d), outward unit normals from the
        left element (nf, nq, d), and surface Jacobians (nf, nq).
        """
        mesh = self.mesh
        d = mesh.dimension
        nq = np.atleast_2d(face_qpts).shape[0]
        phys = np.empty((mesh.n_faces, nq, d))
        normals = np.empty((mesh.n_faces, nq, d))
        sjac = np.empty((mesh.n_faces, nq))
        for lf in range(2 * d):
            sel = np.flatnonzero(mesh.face_local[:, 0] == lf)
            if len(sel) == 0:
                continue
            elems = mesh.face_elems[sel, 0]
            ref = embed_face_points(d, lf, face_qpts)
            phys[sel] = self.physical(ref, elems)
            jac, det, inv = self.jacobian(ref, elems)
            nref = reference_outward_normal(d, lf)
            # Nanson's relation: n dS = det(J) J^{-T} N dS_ref
            nvec = det[..., None] * np.einsum("epji,j->epi", inv, nref)
            mag = np.linalg.norm(nvec, axis=-1)
            normals[sel] = nvec / mag[..., None]
            sjac[sel] = mag
        return phys, normals, sjac


def face_geometry(mesh: Mesh, face: int, face_qpts: np.ndarray):
    """Physical points, left-outward normals, and surface Jacobians of a face."""
    if not (0 <= face < mesh.n_faces):
        raise IndexError(f"face index {face} out of range")
    gm = GeometricMap(mesh)
    d = mesh.dimension
    e, lf = mesh.face_elems[face, 0], mesh.face_local[face, 0]
    ref = embed_face_points(d, lf, face_qpts)
    phys = gm.physical(ref, np.array([e]))[0]
    jac, det, inv = gm.jacobian(ref, np.array([e]))
    nref = reference_outward_normal(d, lf)
    nvec = det[0][..., None] * np.einsum("pji,j->pi", inv[0], nref)
    mag = np.linalg.norm(nvec, axis=-1)
    return phys, nvec / mag[..., None], mag


def face_center(mesh: Mesh, face: int) -> np.ndarray:
    center = np.zeros((1, mesh.dimension - 1))
    pts, _, _ = face_geometry(mesh, face, center)
    return pts[0]


def element_volumes(mesh: Mesh, n_quad: int = 2) -> np.ndarray:
    """Element volumes by Gauss quadrature of det(J)."""
    from ._poly import gauss_points

    x, w = gauss_points(n_quad)
    pts = lattice(x, mesh.dimension)
    wts = lattice(w, mesh.dimension).prod(axis=1)
    gm = GeometricMap(mesh)
    _, det, _ = gm.jacobian(pts)
    return det @ wts


def face_areas(mesh: Mesh, n_quad: int = 2) -> np.ndarray:
    """Face measures by Gauss quadrature of the surface Jacobian."""
    from ._poly import gauss_points

    x, w = gauss_points(n_quad)
    pts = lattice(x, mesh.dimension - 1)
    wts = lattice(w, mesh.dimension - 1).prod(axis=1)
    gm = GeometricMap(mesh)
    _, _, sjac = gm.face_quadrature_geometry(pts)
    return sjac @ wts
