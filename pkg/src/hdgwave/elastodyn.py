"""Elastodynamics physics models in velocity / deformation-gradient form.

Linear model:   dF/dt - grad v = 0,   rho dv/dt - div sigma(F) = f,
with the affine stress sigma(F) = mu (F + F^T) + (lambda (tr F - d) - 2 mu) I.

Nonlinear model (Saint Venant-Kirchhoff): the first Piola-Kirchhoff stress
P = F S(F), S = lambda tr(E) I + 2 mu E, E = (F^T F - I)/2, enters through a
mixed unknown P_h that is eliminated element-locally in the production path
(P_h is the elementwise L2 projection of F S(F), reconstructed through the
inverse mass matrix whenever it is needed).

Both models use the numerical flux  sigma_hat n = sigma n - S_stab (v - v_hat)
with an impedance-scaled stabilization matrix; trace rows enforce flux
continuity on interior faces, traction data on Neumann faces, and the trace
value itself on Dirichlet faces.

Assembly assumes congruent elements (uniform structured meshes), which makes
the element blocks A and B identical across the mesh.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .hdg_core import AssemblyContext
from .mesh import Mesh, build_structured_box
from .spaces import interpolate, make_element_basis, make_trace_space


@dataclass(frozen=True)
class ElasticMaterial:
    """Isotropic material: Lame parameters and reference density."""

    lam: float
    mu: float
    rho: float

    def __post_init__(self):
        if self.mu <= 0 or self.rho <= 0:
            raise ValueError("mu and rho must be positive")
        if self.lam + 2 * self.mu / 3 < 0:
            raise ValueError("bulk modulus must be nonnegative")

    @property
    def c_p(self) -> float:
        return float(np.sqrt((self.lam + 2 * self.mu) / self.rho))

    @property
    def c_s(self) -> float:
        return float(np.sqrt(self.mu / self.rho))


@dataclass(frozen=True)
class StabilizationSpec:
    """Impedance-scaled stabilization S = alpha * rho * c * I."""

    mode: str = "shear"      # 'shear' -> c_s, 'pressure' -> c_p
    alpha: float = 1.0

    def matrix(self, material: ElasticMaterial, d: int) -> np.ndarray:
        if self.mode not in ("shear", "pressure"):
            raise ValueError(f"unknown stabilization mode {self.mode!r}")
        if self.alpha < 1.0:
            raise ValueError("amplification factor must be >= 1")
        c = material.c_s if self.mode == "shear" else material.c_p
        return self.alpha * material.rho * c * np.eye(d)


def cauchy_stress(F: np.ndarray, material: ElasticMaterial) -> np.ndarray:
    """Linear-model stress, affine in the deformation gradient."""
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    trF = np.trace(F, axis1=-2, axis2=-1)
    eye = np.eye(d)
    return (material.mu * (F + np.swapaxes(F, -1, -2))
            + (material.lam * (trF - d) - 2 * material.mu)[..., None, None] * eye)


def svk_stress(F: np.ndarray, material: ElasticMaterial):
    """Second and first Piola-Kirchhoff stresses of the SVK model."""
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    C = np.swapaxes(F, -1, -2) @ F
    E = 0.5 * (C - np.eye(d))
    trE = np.trace(E, axis1=-2, axis2=-1)
    S = material.lam * trE[..., None, None] * np.eye(d) + 2 * material.mu * E
    return S, F @ S


def svk_energy_density(F: np.ndarray, material: ElasticMaterial) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    E = 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(d))
    trE = np.trace(E, axis1=-2, axis2=-1)
    return 0.5 * material.lam * trE**2 + material.mu * np.einsum("...ij,...ij->...", E, E)


def linear_energy_density(F: np.ndarray, material: ElasticMaterial) -> np.ndarray:
    """Quadratic potential whose F-derivative is the affine stress."""
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    G = F - np.eye(d)
    trG = np.trace(G, axis1=-2, axis2=-1)
    return (0.5 * material.mu * (np.einsum("...ij,...ij->...", G, G)
                                 + np.einsum("...ij,...ji->...", G, G))
            + 0.5 * material.lam * trG**2)


def svk_stress_derivative(F: np.ndarray, material: ElasticMaterial) -> np.ndarray:
    """dP_ij/dF_kl of the SVK model, shape (..., d, d, d, d)."""
    F = np.asarray(F, dtype=float)
    d = F.shape[-1]
    lam, mu = material.lam, material.mu
    S, _ = svk_stress(F, material)
    B = F @ np.swapaxes(F, -1, -2)
    eye = np.eye(d)
    out = np.einsum("ik,...lj->...ijkl", eye, S)
    out = out + lam * np.einsum("...ij,...kl->...ijkl", F, F)
    out = out + mu * np.einsum("...il,...kj->...ijkl", F, F)
    out = out + mu * np.einsum("jl,...ik->...ijkl", eye, B)
    return out


def elastic_moduli(material: ElasticMaterial, d: int) -> np.ndarray:
    """dsigma_ij/dF_kl of the linear model (constant tensor)."""
    lam, mu = material.lam, material.mu
    eye = np.eye(d)
    return (mu * (np.einsum("ik,jl->ijkl", eye, eye) + np.einsum("il,jk->ijkl", eye, eye))
            + lam * np.einsum("ij,kl->ijkl", eye, eye))


# ---------------------------------------------------------------------------
# boundary conditions

@dataclass
class BoundaryCondition:
    kind: str                   # 'dirichlet' or 'neumann'
    data: object = None         # dirichlet: vD(x,t)->(...,d); neumann: tN(x,t,n)

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary condition kind {self.kind!r}")


def _face_kinds(mesh: Mesh, bcs: dict) -> tuple[np.ndarray, np.ndarray]:
    dirichlet = np.zeros(mesh.n_faces, dtype=bool)
    neumann = np.zeros(mesh.n_faces, dtype=bool)
    for f in mesh.boundary_faces:
        tag = mesh.boundary_tag.get(int(f))
        if tag is None or tag not in bcs:
            raise ValueError(f"boundary face {f} (tag {tag!r}) has no boundary condition")
        if bcs[tag].kind == "dirichlet":
            dirichlet[f] = True
        else:
            neumann[f] = True
    return dirichlet, neumann


# ---------------------------------------------------------------------------
# shared assembly pieces for both elasticity models

class _ElastoBase:
    """Constant tables shared by the linear and SVK models.

    Local DOF layout per element: the F block (node-major, components (i,j)
    row-major), then the v block (node-major, component minor).
    """

    is_linear = False

    def __init__(self, mesh: Mesh, k: int, material: ElasticMaterial,
                 stab: StabilizationSpec, bcs: dict,
                 forcing=None, variant: str = "hdg", n_quad: int | None = None):
        d = mesh.dimension
        self.mesh = mesh
        self.material = material
        self.stab = stab
        self.S = stab.matrix(material, d)
        self.bcs = bcs
        self.forcing = forcing
        basis = make_element_basis(d, k, n_quad)
        trace = make_trace_space(mesh, k, d, variant, n_quad)
        self.ctx = AssemblyContext(mesh, basis, trace)
        if not self.ctx.shared:
            raise NotImplementedError("assembly requires a congruent-cell mesh")
        self.d = d
        self.nn = basis.n_nodes
        self.ncF = d * d
        self.n_loc = self.nn * (self.ncF + d)
        self.off_v = self.nn * self.ncF
        self.dirichlet, self.neumann = _face_kinds(mesh, bcs)
        self._bc_groups = self._group_boundary_faces()
        self._mass = self._build_mass()
        self._constant_blocks()

    def _group_boundary_faces(self):
        """Boundary faces bucketed by (tag, local face) for batched rhs data."""
        groups: dict[tuple, list] = {}
        for f in self.mesh.boundary_faces:
            tag = self.mesh.boundary_tag[int(f)]
            lf = int(self.mesh.face_local[f, 0])
            groups.setdefault((tag, lf), []).append(int(f))
        out = []
        for (tag, lf), faces in sorted(groups.items()):
            faces = np.array(faces, dtype=int)
            elems = self.mesh.face_elems[faces, 0]
            out.append((self.bcs[tag], lf, faces, elems))
        return out

    @property
    def fsl(self) -> slice:
        return slice(0, self.off_v)

    @property
    def vsl(self) -> slice:
        return slice(self.off_v, self.n_loc)

    def _build_mass(self) -> np.ndarray:
        d, nn = self.d, self.nn
        ms = self.ctx.elem_mass[0]
        M = np.zeros((1, self.n_loc, self.n_loc))
        M[0, self.fsl, self.fsl] = np.einsum(
            "ab,IJ->aIbJ", ms, np.eye(self.ncF)).reshape(self.off_v, self.off_v)
        M[0, self.vsl, self.vsl] = self.material.rho * np.einsum(
            "ab,ij->aibj", ms, np.eye(d)).reshape(nn * d, nn * d)
        return M

    def mass_blocks(self) -> np.ndarray:
        return self._mass

    def _constant_blocks(self):
        """State-independent Jacobian pieces: the F equation, stabilization
        couplings, Dirichlet trace rows, and the whole B block."""
        ctx, d, nn = self.ctx, self.d, self.nn
        mesh = self.mesh
        ne = ctx.n_elements
        dpf = ctx.trace.dofs_per_face()
        ntr = ctx.layout.ntr_elem
        psi = ctx.geom.psi
        Sm = self.S
        eye = np.eye(d)

        A0 = np.zeros((1, self.n_loc, self.n_loc))
        # F equation: +(v, div G): entry dmat[b,a,j] on rows (a,(i,j)), cols (b,i)
        K1 = np.einsum("baj,ik->aijbk", ctx.elem_dmat[0], eye)
        A0[0, self.fsl, self.vsl] = K1.reshape(self.off_v, nn * d)

        B0 = np.zeros((1, self.n_loc, ntr))
        for lf in range(mesh.n_local_faces):
            w, nrm, phs = ctx.rep_face[lf]
            col = slice(lf * dpf, (lf + 1) * dpf)
            # F equation: -<v_hat, G n>
            mixn = np.einsum("q,qa,qc,qj->acj", w, phs, psi, nrm)
            B0[0, self.fsl, col] = -np.einsum(
                "acj,ik->aijck", mixn, eye).reshape(self.off_v, dpf)
            # v equation: +<S (v - v_hat), w>
            mix = np.einsum("q,qa,qc->ac", w, phs, psi)
            B0[0, self.vsl, col] = -np.einsum(
                "ac,ik->aick", mix, Sm).reshape(nn * d, dpf)
            fm = np.einsum("q,qa,qb->ab", w, phs, phs)
            A0[0, self.vsl, self.vsl] += np.einsum(
                "ab,ik->aibk", fm, Sm).reshape(nn * d, nn * d)
        self._A0_const = A0
        self._B0 = B0

        # trace rows: stabilization coupling and trace mass (flux rows), or
        # the plain trace mass (Dirichlet rows); stress couplings are added
        # by the concrete model
        C0 = np.zeros((ne, ntr, self.n_loc))
        D0 = np.zeros((ne, ntr, ntr))
        for cls in ctx.side_classes:
            keep = ~self.dirichlet[cls.faces]
            faces = cls.faces[keep]
            elems = cls.elems[keep]
            if len(faces) == 0:
                continue
            w = ctx.geom.wsjac[faces]
            rows = slice(cls.lf * dpf, (cls.lf + 1) * dpf)
            mix = np.einsum("fq,qc,qa->fca", w, psi, cls.phi)
            C0[elems, rows, self.vsl] += -np.einsum(
                "fca,ik->fciak", mix, Sm).reshape(len(faces), dpf, nn * d)
            D0[elems, rows, rows] += np.einsum(
                "fce,ik->fciek", ctx.ftrmass[faces], Sm).reshape(len(faces), dpf, dpf)
        for f in np.flatnonzero(self.dirichlet):
            e, lf = mesh.face_elems[f, 0], mesh.face_local[f, 0]
            rows = slice(lf * dpf, (lf + 1) * dpf)
            D0[e, rows, rows] += np.einsum(
                "ce,ik->ciek", ctx.ftrmass[f], eye).reshape(dpf, dpf)
        self._C0_const = C0
        self._D0 = D0

    # --- rhs data ------------------------------------------------------------
    def _rhs(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """bh, bg in the convention f = A u + B v - bh, g = C u + D v - bg.

        The constant part of the affine stress cancels between the volume and
        face terms of the v equation (exactly, by the divergence theorem on
        affine cells) and between the two sides of interior faces; it only
        survives in Neumann rows, where it is folded into the traction data.
        """
        ctx, d = self.ctx, self.d
        mesh = self.mesh
        ne = ctx.n_elements
        dpf = ctx.trace.dofs_per_face()
        bh = np.zeros((ne, self.n_loc))
        bg = np.zeros((ne, ctx.layout.ntr_elem))
        if self.forcing is not None:
            fv = np.asarray(self.forcing(ctx.geom.xq, t))
            load = np.einsum("eq,qa,eqi->eai", ctx.geom.wdet, ctx.basis.phi, fv)
            bh[:, self.vsl] = load.reshape(ne, self.nn * d)
        sigma0 = (-(self.material.lam * d + 2 * self.material.mu) * np.eye(d)
                  if self.is_linear else np.zeros((d, d)))
        for bc, lf, faces, elems in self._bc_groups:
            rows = slice(lf * dpf, (lf + 1) * dpf)
            x = ctx.geom.xf[faces]
            w = ctx.geom.wsjac[faces]
            if bc.kind == "neumann":
                nrm = ctx.geom.normals[faces]
                vals = np.asarray(bc.data(x, t, nrm)) - nrm @ sigma0.T
            else:
                vals = np.asarray(bc.data(x, t))
            bg[elems, rows] += np.einsum(
                "fq,qc,fqi->fci", w, ctx.geom.psi, vals).reshape(len(faces), dpf)
        return bh, bg

    # --- state helpers ---------------------------------------------------------
    def split_state(self, u: np.ndarray):
        ne, nn = self.ctx.n_elements, self.nn
        uK = u.reshape(ne, self.n_loc)
        F = uK[:, self.fsl].reshape(ne, nn, self.d, self.d)
        v = uK[:, self.vsl].reshape(ne, nn, self.d)
        return F, v

    def pack_state(self, F: np.ndarray, v: np.ndarray) -> np.ndarray:
        ne = self.ctx.n_elements
        out = np.empty((ne, self.n_loc))
        out[:, self.fsl] = F.reshape(ne, -1)
        out[:, self.vsl] = v.reshape(ne, -1)
        return out.reshape(-1)

    def initial_dofs(self) -> np.ndarray:
        d, ne, nn = self.d, self.ctx.n_elements, self.nn
        ident = lambda x: np.broadcast_to(
            np.eye(d).reshape(1, 1, d * d), x.shape[:2] + (d * d,))
        F0 = interpolate(ident, self.ctx.basis, self.mesh, geom=self.ctx.geom)
        v0 = (interpolate(self._v0, self.ctx.basis, self.mesh, geom=self.ctx.geom)
              if self._v0 is not None else np.zeros((ne, nn, d)))
        return self.pack_state(F0.reshape(ne, nn, d, d), v0)

    def _base_residual(self, uK, vK):
        """Constant-coefficient part of (f, g) before rhs subtraction."""
        f_el = np.einsum("ab,eb->ea", self._A0_const[0], uK)
        f_el += np.einsum("ab,eb->ea", self._B0[0], vK)
        g_el = np.einsum("eab,eb->ea", self._C0_const, uK)
        g_el += np.einsum("eab,eb->ea", self._D0, vK)
        return f_el, g_el


class LinearElastodynamics(_ElastoBase):
    """Affine-stress elastodynamics; the whole Jacobian is constant."""

    is_linear = True

    def __init__(self, mesh, k, material, stab, bcs, forcing=None, v0=None,
                 variant="hdg", n_quad=None):
        self._v0 = v0
        super().__init__(mesh, k, material, stab, bcs, forcing, variant, n_quad)
        self._stress_blocks()

    def _stress_blocks(self):
        """sigma(F) couplings in the v equation and the trace rows."""
        ctx, d, nn = self.ctx, self.d, self.nn
        Cten = elastic_moduli(self.material, d)
        dpf = ctx.trace.dofs_per_face()
        psi = ctx.geom.psi

        A0 = self._A0_const
        blk = np.einsum("ijkl,baj->aibkl", Cten, ctx.elem_dmat[0])
        A0[0, self.vsl, self.fsl] += blk.reshape(nn * d, self.off_v)
        for lf in range(self.mesh.n_local_faces):
            w, nrm, phs = ctx.rep_face[lf]
            face = np.einsum("q,qa,qb,ijkl,qj->aibkl", w, phs, phs, Cten, nrm,
                             optimize=True)
            A0[0, self.vsl, self.fsl] -= face.reshape(nn * d, self.off_v)

        C0 = self._C0_const
        for cls in ctx.side_classes:
            keep = ~self.dirichlet[cls.faces]
            faces = cls.faces[keep]
            elems = cls.elems[keep]
            if len(faces) == 0:
                continue
            w = ctx.geom.wsjac[faces]
            nrm = cls.sign * ctx.geom.normals[faces]
            rows = slice(cls.lf * dpf, (cls.lf + 1) * dpf)
            blk = np.einsum("fq,qc,qb,ijkl,fqj->fcibkl", w, psi, cls.phi, Cten, nrm,
                            optimize=True)
            C0[elems, rows, self.fsl] += blk.reshape(len(faces), dpf, self.off_v)

    def blocks(self, u, v, t):
        f_el, g_el = self.residual(u, v, t)
        return self._A0_const, self._B0, self._C0_const, self._D0, f_el, g_el

    def residual(self, u, v, t):
        ne = self.ctx.n_elements
        uK = u.reshape(ne, self.n_loc)
        vK = self.ctx.layout.gather(v)
        f_el, g_el = self._base_residual(uK, vK)
        bh, bg = self._rhs(t)
        return f_el - bh, g_el - bg


class SvkElastodynamics(_ElastoBase):
    """Saint Venant-Kirchhoff elastodynamics with local stress elimination."""

    is_linear = False

    def __init__(self, mesh, k, material, stab, bcs, forcing=None, v0=None,
                 variant="hdg", n_quad=None):
        self._v0 = v0
        super().__init__(mesh, k, material, stab, bcs, forcing, variant, n_quad)
        self._svk_tables()

    def _svk_tables(self):
        """Constant maps taking nodal P to the v equation and trace rows."""
        ctx, nn, d = self.ctx, self.nn, self.d
        psi = ctx.geom.psi
        self._mass_lu = sla.lu_factor(ctx.elem_mass[0])
        # v equation: R_v[a,i] += sum_{b,j} LP[a,b,j] P[b,i,j]
        LP = np.einsum("baj->abj", ctx.elem_dmat[0]).copy()
        for lf in range(self.mesh.n_local_faces):
            w, nrm, phs = ctx.rep_face[lf]
            LP -= np.einsum("q,qa,qb,qj->abj", w, phs, phs, nrm)
        self._LP = LP
        self._LP2 = LP.reshape(nn, nn * d)            # (a, bj) matmul form
        # trace rows: rows[c,i] += sum int psi_c Phi_b n_j P[b,i,j] per side
        self._LPtr = []
        for cls in ctx.side_classes:
            keep = ~self.dirichlet[cls.faces]
            faces = cls.faces[keep]
            elems = cls.elems[keep]
            if len(faces) == 0:
                continue
            w = ctx.geom.wsjac[faces]
            nrm = cls.sign * ctx.geom.normals[faces]
            tab = np.einsum("fq,qc,qb,fqj->fcbj", w, psi, cls.phi, nrm, optimize=True)
            nfn = tab.shape[1]
            self._LPtr.append((faces, elems, cls.lf, tab,
                               np.ascontiguousarray(tab.reshape(len(faces), nfn, nn * d))))
        # pairwise basis products for the stress-projection Jacobian
        phi = ctx.basis.phi
        self._phi2 = np.ascontiguousarray(
            (phi[:, :, None] * phi[:, None, :]).reshape(ctx.basis.n_quad, nn * nn))

    def _p_nodal(self, F_dofs: np.ndarray) -> np.ndarray:
        """Projected nodal stress P[e,b,i,j] = M^-1 int (F S(F)) phi_b."""
        ctx, d = self.ctx, self.d
        ne, nn = ctx.n_elements, self.nn
        phi = ctx.basis.phi
        Fq = np.einsum("qb,ebij->eqij", phi, F_dofs)
        _, Pq = svk_stress(Fq, self.material)
        N = np.einsum("eq,qb,eqij->ebij", ctx.geom.wdet, phi, Pq, optimize=True)
        # one shared mass factorization; solve all elements/components at once
        flat = N.reshape(ne, nn, d * d).transpose(1, 0, 2).reshape(nn, -1)
        sol = sla.lu_solve(self._mass_lu, flat)
        return sol.reshape(nn, ne, d, d).transpose(1, 0, 2, 3)

    def residual(self, u, v, t):
        ctx, d, nn = self.ctx, self.d, self.nn
        ne = ctx.n_elements
        uK = u.reshape(ne, self.n_loc)
        vK = ctx.layout.gather(v)
        F, _ = self.split_state(u)
        f_el, g_el = self._base_residual(uK, vK)
        dpf = ctx.trace.dofs_per_face()

        P = self._p_nodal(F)
        # P rearranged to (e, i, (b,j)) so every contraction is one matmul
        Pm = np.ascontiguousarray(P.transpose(0, 2, 1, 3)).reshape(ne, d, nn * d)
        rv = np.matmul(Pm, self._LP2.T).transpose(0, 2, 1)       # (e, a, i)
        f_el[:, self.vsl] += rv.reshape(ne, nn * d)
        for faces, elems, lf, tab, tab2 in self._LPtr:
            rows = slice(lf * dpf, (lf + 1) * dpf)
            add = np.matmul(Pm[elems], tab2.transpose(0, 2, 1)).transpose(0, 2, 1)
            g_el[elems, rows] += add.reshape(len(faces), dpf)
        bh, bg = self._rhs(t)
        return f_el - bh, g_el - bg

    def blocks(self, u, v, t):
        ctx, d, nn = self.ctx, self.d, self.nn
        ne = ctx.n_elements
        F, _ = self.split_state(u)
        f_el, g_el = self.residual(u, v, t)
        dpf = ctx.trace.dofs_per_face()
        ncol = self.off_v

        phi = ctx.basis.phi
        Fq = np.einsum("qb,ebij->eqij", phi, F)
        dP = svk_stress_derivative(Fq, self.material)
        # dN[e,(a,b),(IJ,KL)] = sum_q w_q phi_qa phi_qb dP[q,IJ,KL] as one GEMM
        WdP = ctx.geom.wdet[:, :, None] * dP.reshape(ne, -1, d**4)
        dN2 = np.matmul(self._phi2.T, WdP)                   # (ne, nn*nn, 81)
        dN = np.ascontiguousarray(
            dN2.reshape(ne, nn, nn, d * d, d * d).transpose(0, 1, 3, 2, 4)
        ).reshape(ne, nn, d, d, ncol)
        # dPn = M^-1 dN: sensitivity of the nodal stress to the F DOFs
        flat = dN.reshape(ne, nn, -1).transpose(1, 0, 2).reshape(nn, -1)
        dPn = sla.lu_solve(self._mass_lu, flat).reshape(
            nn, ne, d, d, ncol).transpose(1, 0, 2, 3, 4)
        dPnT = np.ascontiguousarray(
            dPn.transpose(0, 2, 1, 3, 4)).reshape(ne, d, nn * d, ncol)

        A0 = np.broadcast_to(self._A0_const[0], (ne, self.n_loc, self.n_loc)).copy()
        AvF = np.matmul(self._LP2[None, None], dPnT)          # (ne, d, nn, ncol)
        A0[:, self.vsl, self.fsl] += np.ascontiguousarray(
            AvF.transpose(0, 2, 1, 3)).reshape(ne, nn * d, ncol)

        C0 = self._C0_const.copy()
        for faces, elems, lf, tab, tab2 in self._LPtr:
            rows = slice(lf * dpf, (lf + 1) * dpf)
            add = np.matmul(tab2[:, None], dPnT[elems])       # (f, d, nfn, ncol)
            add = np.ascontiguousarray(add.transpose(0, 2, 1, 3))
            C0[elems, rows, self.fsl] += add.reshape(len(faces), dpf, ncol)
        return A0, self._B0, C0, self._D0, f_el, g_el

    def stress_dofs(self, u: np.ndarray) -> np.ndarray:
        """Nodal first Piola-Kirchhoff DOFs recovered from the state."""
        F, _ = self.split_state(u)
        return self._p_nodal(F)

    def residual_groups(self, u: np.ndarray, v_hat: np.ndarray, t: float,
                        P_dofs: np.ndarray | None = None):
        """The four weak-form residual groups with the mixed stress explicit.

        Returns (gradient equation, momentum equation, stress projection
        equation, trace equation) contributions. The production path keeps
        the stress eliminated; this surface evaluates the un-eliminated
        system, mainly for verification. With `P_dofs` omitted the recovered
        projection is used and the third group vanishes identically.
        """
        ctx, d, nn = self.ctx, self.d, self.nn
        ne = ctx.n_elements
        F, _ = self.split_state(u)
        P = self._p_nodal(F) if P_dofs is None else np.asarray(P_dofs)
        # stress projection residual: M P - int (F S(F)) phi
        phi = ctx.basis.phi
        Fq = np.einsum("qb,ebij->eqij", phi, F)
        _, Pq = svk_stress(Fq, self.material)
        N = np.einsum("eq,qb,eqij->ebij", ctx.geom.wdet, phi, Pq, optimize=True)
        r_proj = np.einsum("ab,ebij->eaij", ctx.elem_mass[0], P) - N

        # evaluate the remaining groups at the given P by perturbing the
        # eliminated residual: it is linear in P through the constant maps
        uK = u.reshape(ne, self.n_loc)
        vK = ctx.layout.gather(v_hat)
        f_el, g_el = self._base_residual(uK, vK)
        dpf = ctx.trace.dofs_per_face()
        Pm = np.ascontiguousarray(P.transpose(0, 2, 1, 3)).reshape(ne, d, nn * d)
        rv = np.matmul(Pm, self._LP2.T).transpose(0, 2, 1)
        f_el[:, self.vsl] += rv.reshape(ne, nn * d)
        for faces, elems, lf, tab, tab2 in self._LPtr:
            rows = slice(lf * dpf, (lf + 1) * dpf)
            add = np.matmul(Pm[elems], tab2.transpose(0, 2, 1)).transpose(0, 2, 1)
            g_el[elems, rows] += add.reshape(len(faces), dpf)
        bh, bg = self._rhs(t)
        f_el -= bh
        g_el -= bg
        r_grad = f_el[:, self.fsl].reshape(ne, nn, d, d)
        r_mom = f_el[:, self.vsl].reshape(ne, nn, d)
        return r_grad, r_mom, r_proj, g_el


# ---------------------------------------------------------------------------
# energy monitor

def discrete_energy(model, u: np.ndarray, v_hat: np.ndarray | None = None) -> dict:
    """Kinetic + potential energy and, optionally, the face jump dissipation
    <S (v - v_hat), (v - v_hat)> over all element boundaries."""
    ctx = model.ctx
    F, vel = model.split_state(u)
    phi = ctx.basis.phi
    Fq = np.einsum("qb,ebij->eqij", phi, F)
    vq = np.einsum("qb,ebi->eqi", phi, vel)
    density = (linear_energy_density if model.is_linear else svk_energy_density)
    pot = density(Fq, model.material)
    kin = 0.5 * model.material.rho * (vq**2).sum(axis=-1)
    kinetic = float((kin * ctx.geom.wdet).sum())
    potential = float((pot * ctx.geom.wdet).sum())
    out = {"kinetic": kinetic, "potential": potential, "total": kinetic + potential}

    if v_hat is not None:
        S = model.S
        dpf = ctx.trace.dofs_per_face()
        nfn = ctx.trace.n_face_nodes
        vhat_el = ctx.layout.gather(v_hat)
        jump = 0.0
        for cls in ctx.side_classes:
            faces, elems = cls.faces, cls.elems
            vft = np.einsum("qb,ebi->eqi", cls.phi, vel[elems])
            coeff = vhat_el[elems][:, cls.lf * dpf:(cls.lf + 1) * dpf]
            vhq = np.einsum("qc,fci->fqi", ctx.geom.psi,
                            coeff.reshape(len(faces), nfn, model.d))
            diff = vft - vhq
            jump += float(np.einsum(
                "fq,fqi,ik,fqk->", ctx.geom.wsjac[faces], diff, S, diff))
        out["jump_dissipation"] = jump
    return out


# ---------------------------------------------------------------------------
# manufactured vibrating-plate verification case

@dataclass
class PlateCase:
    mesh: Mesh
    material: ElasticMaterial
    stab: StabilizationSpec
    bcs: dict
    forcing: object
    exact_v: object
    exact_F: object
    exact_P: object
    h: float
    thickness: float
    nonlinear: bool


_PLATE_CACHE: dict = {}


def _plate_symbolics(material: ElasticMaterial, nonlinear: bool, amplitude: float = 0.4):
    """Exact plate fields and forcing, derived symbolically once per material.

    The deformation keeps in-plane positions fixed and moves the thickness
    coordinate by amplitude*sin(pi t) sin(pi X) sin(pi Y)."""
    key = (material.lam, material.mu, material.rho, nonlinear, amplitude)
    if key in _PLATE_CACHE:
        return _PLATE_CACHE[key]
    import sympy as sym

    X, Y, Z, t = sym.symbols("X Y Z t")
    g = amplitude * sym.sin(sym.pi * t) * sym.sin(sym.pi * X) * sym.sin(sym.pi * Y)
    phi = sym.Matrix([X, Y, Z + g])
    coords = (X, Y, Z)
    F = phi.jacobian(coords)
    vel = phi.diff(t)
    lam, mu, rho = material.lam, material.mu, material.rho
    if nonlinear:
        E = (F.T * F - sym.eye(3)) / 2
        S = lam * E.trace() * sym.eye(3) + 2 * mu * E
        P = F * S
    else:
        P = mu * (F + F.T) + (lam * (F.trace() - 3) - 2 * mu) * sym.eye(3)
    divP = sym.Matrix([sum(P[i, j].diff(coords[j]) for j in range(3)) for i in range(3)])
    f = rho * vel.diff(t) - divP

    def scalar_fn(expr):
        fn = sym.lambdify((X, Y, Z, t), expr, "numpy")
        return lambda x, tt: np.broadcast_to(
            np.asarray(fn(x[..., 0], x[..., 1], x[..., 2], tt), dtype=float),
            x.shape[:-1]).copy()

    def vector_fn(mat):
        entries = [scalar_fn(mat[i]) for i in range(3)]
        return lambda x, tt: np.stack([e(x, tt) for e in entries], axis=-1)

    def matrix_fn(mat):
        entries = [[scalar_fn(mat[i, j]) for j in range(3)] for i in range(3)]
        return lambda x, tt: np.stack(
            [np.stack([entries[i][j](x, tt) for j in range(3)], axis=-1)
             for i in range(3)], axis=-2)

    funcs = {"forcing": vector_fn(f), "v": vector_fn(vel),
             "F": matrix_fn(F), "P": matrix_fn(P)}
    _PLATE_CACHE[key] = funcs
    return funcs


def plate_manufactured_case(
    k: int, refinement: float, nonlinear: bool = False,
    material: ElasticMaterial | None = None, alpha: float = 2.0,
    thickness: float = 0.01,
) -> PlateCase:
    """Clamped vibrating plate with a known deformation mapping.

    `refinement` is the in-plane element size h; the mesh has one element
    through the thickness. Body force and top/bottom tractions are computed
    from the exact solution; the four sides are clamped (v_D = 0).
    """
    material = material or ElasticMaterial(lam=1.5, mu=1.0, rho=1.0)
    n = int(round(1.0 / refinement))
    if abs(n * refinement - 1.0) > 1e-9:
        raise ValueError(f"refinement {refinement} must divide the unit plate")
    mesh = build_structured_box([1.0, 1.0, thickness], [n, n, 1])
    funcs = _plate_symbolics(material, nonlinear)
    stab = StabilizationSpec(mode="shear", alpha=alpha)

    def traction(x, t, nrm):
        return np.einsum("...ij,...j->...i", funcs["P"](x, t), nrm)

    def zero_v(x, t):
        return np.zeros(x.shape[:-1] + (3,))

    bcs = {
        "xmin": BoundaryCondition("dirichlet", zero_v),
        "xmax": BoundaryCondition("dirichlet", zero_v),
        "ymin": BoundaryCondition("dirichlet", zero_v),
        "ymax": BoundaryCondition("dirichlet", zero_v),
        "zmin": BoundaryCondition("neumann", traction),
        "zmax": BoundaryCondition("neumann", traction),
    }
    return PlateCase(
        mesh=mesh, material=material, stab=stab, bcs=bcs,
        forcing=funcs["forcing"], exact_v=funcs["v"], exact_F=funcs["F"],
        exact_P=funcs["P"], h=refinement, thickness=thickness, nonlinear=nonlinear,
    )


def make_plate_model(case: PlateCase, k: int, n_quad=None):
    cls = SvkElastodynamics if case.nonlinear else LinearElastodynamics
    return cls(
        case.mesh, k, case.material, case.stab, case.bcs,
        forcing=case.forcing, v0=lambda x: case.exact_v(x, 0.0), n_quad=n_quad,
    )
