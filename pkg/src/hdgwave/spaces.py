"""Polynomial approximation spaces on elements and the mesh skeleton.

Element spaces are tensor-product nodal Lagrange bases on Gauss-Lobatto
points with Gauss-Legendre quadrature. Trace spaces live on the skeleton and
come in four flavours distinguished by their global DOF identification:

  * 'hdg'        face-by-face, fully discontinuous
  * 'edg'        continuous across all face boundaries (node merging)
  * 'iedg'       continuous on interior faces only
  * 'tangential' face-by-face vector traces with zero normal component

Continuity for 'edg'/'iedg' is imposed topologically by merging face nodes
that share a physical location, so it never introduces constraint equations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._poly import Lagrange1D, gauss_points, lattice, lattice_eval, lattice_grad, lobatto_points
from .mesh import (
    GeometricMap,
    Mesh,
    embed_face_points,
    face_geometry,
    orient_face_points,
)

VARIANTS = ("hdg", "edg", "iedg", "tangential")


@dataclass
class ElementBasis:
    """Nodal tensor-product basis of degree k with Gauss quadrature."""

    dimension: int
    degree: int
    nodes1d: np.ndarray
    nodes: np.ndarray       # (n_nodes, d) reference coordinates
    qpts: np.ndarray        # (n_quad, d)
    qwts: np.ndarray        # (n_quad,)
    _lag: Lagrange1D = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_quad(self) -> int:
        return self.qpts.shape[0]

    def eval(self, pts) -> np.ndarray:
        """Basis values, shape (npts, n_nodes)."""
        return lattice_eval(self._lag, np.atleast_2d(pts))

    def grad(self, pts) -> np.ndarray:
        """Reference-space basis gradients, shape (npts, n_nodes, d)."""
        return lattice_grad(self._lag, np.atleast_2d(pts))

    @property
    def phi(self) -> np.ndarray:
        return self.eval(self.qpts)

    @property
    def dphi(self) -> np.ndarray:
        return self.grad(self.qpts)


def make_element_basis(d: int, k: int, n_quad: int | None = None) -> ElementBasis:
    """Degree-k nodal basis on [-1,1]^d.

    Quadrature uses `n_quad` Gauss points per axis, default k+2 (exact through
    degree 2k+3), clamped to [k+1, 2(k+1)].
    """
    if k < 0:
        raise ValueError(f"polynomial degree must be >= 0, got {k}")
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if n_quad is None:
        n_quad = k + 2
    n_quad = int(np.clip(n_quad, k + 1, 2 * (k + 1)))
    nodes1d = lobatto_points(k + 1)
    x, w = gauss_points(n_quad)
    return ElementBasis(
        dimension=d,
        degree=k,
        nodes1d=nodes1d,
        nodes=lattice(nodes1d, d),
        qpts=lattice(x, d),
        qwts=lattice(w, d).prod(axis=1),
        _lag=Lagrange1D(nodes1d),
    )


def _tangent_frame(normal: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal frame (t1, t2) spanning the plane normal to n."""
    a = int(np.argmin(np.abs(normal)))
    t1 = np.zeros(3)
    t1[a] = 1.0
    t1 -= normal * normal[a]
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    return np.stack([t1, t2])


@dataclass
class TraceSpace:
    """Skeleton approximation space with a global DOF identification map."""

    variant: str
    mesh: Mesh
    degree: int
    m: int                      # components of the represented field
    m_hat: int                  # stored DOFs per face node
    face_basis: ElementBasis
    face_dofs: np.ndarray       # (nf, n_face_nodes * m_hat) global dof ids
    n_dofs: int
    block_size: int             # uniform block size of the global system
    n_blocks: int
    face_blocks: np.ndarray     # (nf, n_face_nodes or 1) block id owning each node
    in_edg: np.ndarray          # per-face continuous-skeleton membership
    frames: np.ndarray | None = None   # (nf, 2, 3) tangent frames, tangential only

    @property
    def n_face_nodes(self) -> int:
        return self.face_basis.n_nodes

    def dofs_per_face(self) -> int:
        return self.n_face_nodes * self.m_hat

    def component_matrix(self, f: int) -> np.ndarray:
        """Map stored node DOFs to field components: (m, m_hat)."""
        if self.variant == "tangential":
            return self.frames[f].T          # columns t1, t2
        return np.eye(self.m)

    def reconstruct(self, f: int, coeffs: np.ndarray, face_pts: np.ndarray) -> np.ndarray:
        """Evaluate the trace field of face f at face reference points: (npts, m)."""
        psi = self.face_basis.eval(face_pts)                  # (npts, nfn)
        c = np.asarray(coeffs).reshape(self.n_face_nodes, self.m_hat)
        vals = psi @ c                                        # (npts, m_hat)
        return vals @ self.component_matrix(f).T

    def global_vector(self) -> np.ndarray:
        return np.zeros(self.n_dofs)


def _face_node_positions(mesh: Mesh, face_basis: ElementBasis) -> np.ndarray:
    """Physical positions of the canonical face node lattice: (nf, nfn, d)."""
    gm = GeometricMap(mesh)
    d = mesh.dimension
    nfn = face_basis.n_nodes
    out = np.empty((mesh.n_faces, nfn, d))
    for lf in range(2 * d):
        sel = np.flatnonzero(mesh.face_local[:, 0] == lf)
        if len(sel) == 0:
            continue
        ref = embed_face_points(d, lf, face_basis.nodes)
        out[sel] = gm.physical(ref, mesh.face_elems[sel, 0])
    return out


def make_trace_space(
    mesh: Mesh, k: int, m: int, variant: str, n_quad: int | None = None
) -> TraceSpace:
    """Build the skeleton space for one of the hybridized DG variants."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown trace variant {variant!r}")
    if variant == "tangential":
        if m != mesh.dimension or mesh.dimension != 3:
            raise ValueError("tangential traces require m == d == 3")
    if variant in ("edg", "iedg") and k < 1:
        raise ValueError(f"{variant} requires k >= 1")

    face_basis = make_element_basis(mesh.dimension - 1, k, n_quad)
    nfn = face_basis.n_nodes
    nf = mesh.n_faces
    m_hat = 2 if variant == "tangential" else m

    from .mesh import classify_skeleton

    rule = {"hdg": "none", "tangential": "none", "edg": "all", "iedg": "interior"}[variant]
    in_edg = classify_skeleton(mesh, rule)

    if variant in ("hdg", "tangential"):
        # independent face blocks, one block per face
        face_dofs = np.arange(nf * nfn * m_hat).reshape(nf, nfn * m_hat)
        node_ids = None
        block_size = nfn * m_hat
        n_blocks = nf
        face_blocks = np.arange(nf, dtype=int).reshape(nf, 1)
    else:
        # merge coincident face nodes on the continuous part of the skeleton
        pos = _face_node_positions(mesh, face_basis)
        scale = max(1.0, float(np.abs(mesh.vertices).max()))
        node_ids = np.empty((nf, nfn), dtype=int)
        seen: dict[tuple, int] = {}
        nxt = 0
        for f in range(nf):
            if in_edg[f]:
                for c in range(nfn):
                    key = tuple(np.round(pos[f, c] / scale, 10))
                    gid = seen.get(key)
                    if gid is None:
                        gid = nxt
                        seen[key] = gid
                        nxt += 1
                    node_ids[f, c] = gid
        for f in range(nf):
            if not in_edg[f]:
                node_ids[f] = np.arange(nxt, nxt + nfn)
                nxt += nfn
        n_nodes_global = nxt
        face_dofs = (node_ids[:, :, None] * m_hat + np.arange(m_hat)).reshape(nf, -1)
        block_size = m_hat
        n_blocks = n_nodes_global
        face_blocks = node_ids

    frames = None
    if variant == "tangential":
        center = np.zeros((1, mesh.dimension - 1))
        frames = np.empty((nf, 2, 3))
        for f in range(nf):
            _, nrm, _ = face_geometry(mesh, f, center)
            n = nrm[0]
            # fix the frame by the face plane, not the (side-dependent)
            # normal direction, so coplanar faces share one frame
            if n[int(np.argmax(np.abs(n)))] < 0:
                n = -n
            frames[f] = _tangent_frame(n)

    return TraceSpace(
        variant=variant,
        mesh=mesh,
        degree=k,
        m=m,
        m_hat=m_hat,
        face_basis=face_basis,
        face_dofs=face_dofs,
        n_dofs=int(face_dofs.max()) + 1 if nf else 0,
        block_size=block_size,
        n_blocks=n_blocks,
        face_blocks=face_blocks,
        in_edg=in_edg,
        frames=frames,
    )


class DiscreteGeometry:
    """Precomputed geometry and basis tables used by assembly and norms.

    Volume tables are batched over elements; face tables are batched over
    faces grouped by (local face id, orientation) so both sides of every
    interior face can be evaluated at the canonical face quadrature points.
    """

    def __init__(self, mesh: Mesh, basis: ElementBasis, face_basis: ElementBasis):
        if face_basis.dimension != mesh.dimension - 1:
            raise ValueError("face basis dimension mismatch")
        self.mesh = mesh
        self.basis = basis
        self.face_basis = face_basis
        gm = GeometricMap(mesh)

        jac, det, inv = gm.jacobian(basis.qpts)
        self.xq = gm.physical(basis.qpts)              # (ne, nq, d)
        self.wdet = det * basis.qwts[None, :]          # (ne, nq)
        self.invjac = inv                              # (ne, nq, d, d)
        # physical basis gradients: dphi_phys[e,q,n,i] = dphi[q,n,j] invjac[e,q,j,i]
        # stored lazily per unique geometry when the mesh is uniform
        self._dphi = basis.dphi
        self._phi = basis.phi

        fq = face_basis.qpts
        self.face_qwts = face_basis.qwts
        self.xf, self.normals, sjac = gm.face_quadrature_geometry(fq)
        self.wsjac = sjac * face_basis.qwts[None, :]   # (nf, nq_f)
        self.psi = face_basis.eval(fq)                 # (nq_f, nfn)

        # element-basis traces on faces, per (local face, orientation) class
        self._face_trace: dict[tuple[int, int], np.ndarray] = {}
        d = mesh.dimension
        for lf in range(2 * d):
            self._face_trace[(lf, 0)] = basis.eval(embed_face_points(d, lf, fq))
        for f in mesh.interior_faces:
            lf, code = int(mesh.face_local[f, 1]), int(mesh.face_orient[f])
            if (lf, code) not in self._face_trace:
                pts = embed_face_points(d, lf, orient_face_points(d, code, fq))
                self._face_trace[(lf, code)] = basis.eval(pts)

    def phi_on_face(self, lf: int, code: int = 0) -> np.ndarray:
        """Element basis values at canonical face quad points, one side's view."""
        return self._face_trace[(lf, code)]

    def dphi_phys(self, elems=None) -> np.ndarray:
        """Physical gradients of the element basis at volume quad points."""
        inv = self.invjac if elems is None else self.invjac[elems]
        return np.einsum("qnj,eqji->eqni", self._dphi, inv)

    @property
    def phi(self) -> np.ndarray:
        return self._phi


class InnerProducts:
    """Element and face inner products of fields sampled at quadrature points.

    Scalars are (ne, nq), vectors (ne, nq, m), matrices (ne, nq, m, d); the
    matrix product contracts tr(A^T B). Face variants run over all element
    boundaries, so interior faces contribute once per side.
    """

    def __init__(self, geom: DiscreteGeometry):
        self.geom = geom

    def element(self, a: np.ndarray, b: np.ndarray) -> float:
        a, b = np.asarray(a), np.asarray(b)
        prod = a * b
        while prod.ndim > 2:
            prod = prod.sum(axis=-1)
        return float((prod * self.geom.wdet).sum())

    def face(self, a: np.ndarray, b: np.ndarray) -> float:
        """a, b sampled on every (face, side): shape (nf, 2, nq_f, ...)."""
        a, b = np.asarray(a), np.asarray(b)
        prod = a * b
        while prod.ndim > 3:
            prod = prod.sum(axis=-1)
        mesh = self.geom.mesh
        sides = np.ones((mesh.n_faces, 2))
        sides[mesh.boundary_faces, 1] = 0.0
        return float((prod * sides[:, :, None] * self.geom.wsjac[:, None, :]).sum())


def interpolate(func, basis: ElementBasis, mesh: Mesh, mode: str = "l2",
                geom: DiscreteGeometry | None = None) -> np.ndarray:
    """Project an analytic field onto the broken space: (ne, n_nodes, m).

    `func` maps points (..., d) to values (..., m); mode 'nodal' interpolates
    at the Lagrange nodes, 'l2' performs an elementwise L2 projection.
    """
    if mode == "nodal":
        gm = GeometricMap(mesh)
        xn = gm.physical(basis.nodes)
        vals = np.asarray(func(xn))
        return vals if vals.ndim == 3 else vals[..., None]
    if mode != "l2":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if geom is None:
        geom = DiscreteGeometry(mesh, basis, make_element_basis(mesh.dimension - 1, basis.degree))
    fvals = np.asarray(func(geom.xq))
    if fvals.ndim == 2:
        fvals = fvals[..., None]
    rhs = np.einsum("eq,qn,eqm->enm", geom.wdet, basis.phi, fvals)
    mass = np.einsum("eq,qa,qb->eab", geom.wdet, basis.phi, basis.phi)
    return np.linalg.solve(mass, rhs)


def l2_error(
    dofs: np.ndarray, exact, mesh: Mesh, basis: ElementBasis,
    geom: DiscreteGeometry | None = None,
) -> float:
    """Broken L2 norm of (u_h - u) for nodal DOFs shaped (ne, n_nodes, m)."""
    if geom is None:
        geom = DiscreteGeometry(mesh, basis, make_element_basis(mesh.dimension - 1, basis.degree))
    uh = np.einsum("qn,enm->eqm", basis.phi, dofs)
    ue = np.asarray(exact(geom.xq))
    if ue.ndim == 2:
        ue = ue[..., None]
    diff = ((uh - ue) ** 2).sum(axis=-1)
    return float(np.sqrt((diff * geom.wdet).sum()))
