"""Element-local assembly, static condensation, and the Newton driver.

Per element the linearized stage equations form the saddle system

    [A_K  B_K] [du_K]   [h_K]
    [C_K  D_K] [dv_K] = -[g_K]

with A block-diagonal over elements. Condensation eliminates du element by
element, leaving the sparse trace system K dv = -r with K = D - C A^{-1} B
and r = g - C A^{-1} h, solved by preconditioned GMRES; du is then recovered
locally. On meshes with congruent elements the A and B blocks are shared.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import krylov as kryl
from .dae_time import DaeSystem, StageStats, StepFailure, extrapolate
from .mesh import Mesh
from .spaces import DiscreteGeometry, ElementBasis, TraceSpace


# ---------------------------------------------------------------------------
# trace scatter layout

@dataclass
class TraceLayout:
    """Scatter maps from element-local trace DOFs to the global trace system."""

    trace: TraceSpace
    elem_dofs: np.ndarray        # (ne, ntrK) global dof ids, grouped by local face
    n_dofs: int
    block_size: int
    n_blocks: int
    face_block_mode: bool        # True when each face is one contiguous block
    _plan: tuple = None          # cached (sort order, segment starts, indptr, cols)

    @property
    def ntr_elem(self) -> int:
        return self.elem_dofs.shape[1]

    def scatter_vector(self, contribs: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_dofs)
        np.add.at(out, self.elem_dofs, contribs)
        return out

    def gather(self, vec: np.ndarray) -> np.ndarray:
        return vec[self.elem_dofs]

    def scatter_matrix(self, contribs: np.ndarray) -> kryl.BlockCsrMatrix:
        """Assemble per-element trace matrices into the global block system.

        The sparsity never changes between assemblies, so the duplicate-sum
        plan (sort order and segment boundaries) is computed once and reused.
        """
        ne, ntr, _ = contribs.shape
        if self.face_block_mode:
            nlf = self.trace.mesh.n_local_faces
            dpf = self.trace.dofs_per_face()
            blocks = contribs.reshape(ne, nlf, dpf, nlf, dpf).transpose(0, 1, 3, 2, 4)
            blocks = np.ascontiguousarray(blocks).reshape(-1, dpf, dpf)
            if self._plan is None:
                ef = self.trace.mesh.elem_faces
                rows = np.broadcast_to(ef[:, :, None], (ne, nlf, nlf)).reshape(-1)
                cols = np.broadcast_to(ef[:, None, :], (ne, nlf, nlf)).reshape(-1)
                order = np.lexsort((cols, rows))
                r, c = rows[order], cols[order]
                new = np.ones(len(r), dtype=bool)
                new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
                starts = np.flatnonzero(new)
                indptr = np.zeros(self.n_blocks + 1, dtype=np.int64)
                np.add.at(indptr, r[starts] + 1, 1)
                np.cumsum(indptr, out=indptr)
                self._plan = (order, starts, indptr, c[starts])
            order, starts, indptr, ucols = self._plan
            summed = np.add.reduceat(blocks[order], starts, axis=0)
            return kryl.BlockCsrMatrix(self.n_blocks, dpf, indptr, ucols, summed)
        rows = np.repeat(self.elem_dofs, ntr, axis=1).ravel()
        cols = np.tile(self.elem_dofs, (1, ntr)).ravel()
        mat = sp.coo_matrix(
            (contribs.ravel(), (rows, cols)), shape=(self.n_dofs, self.n_dofs)
        ).tocsr()
        mat.sort_indices()
        bs = self.block_size
        bsr = mat.tobsr(blocksize=(bs, bs))
        bsr.sort_indices()
        return kryl.BlockCsrMatrix(self.n_blocks, bs, bsr.indptr, bsr.indices, bsr.data)


def make_trace_layout(mesh: Mesh, trace: TraceSpace) -> TraceLayout:
    dpf = trace.dofs_per_face()
    elem_dofs = trace.face_dofs[mesh.elem_faces].reshape(mesh.n_elements, -1)
    face_block = trace.variant in ("hdg", "tangential")
    return TraceLayout(
        trace=trace,
        elem_dofs=elem_dofs,
        n_dofs=trace.n_dofs,
        block_size=trace.block_size,
        n_blocks=trace.n_blocks,
        face_block_mode=face_block,
    )


# ---------------------------------------------------------------------------
# geometry-aware assembly context shared by the physics models

@dataclass
class FaceSideClass:
    """All (element, local face) pairs sharing basis tables on one face side."""

    side: int                 # 0: left view, 1: right view
    lf: int                   # the element's local face id
    sign: float               # outward normal = sign * canonical normal
    faces: np.ndarray
    elems: np.ndarray
    phi: np.ndarray           # (nqf, nn) element basis at canonical face points


class AssemblyContext:
    """Precomputed element/face tables for one (mesh, basis, trace) triple."""

    def __init__(self, mesh: Mesh, basis: ElementBasis, trace: TraceSpace):
        self.mesh = mesh
        self.basis = basis
        self.trace = trace
        self.geom = DiscreteGeometry(mesh, basis, trace.face_basis)
        self.layout = make_trace_layout(mesh, trace)
        self.shared = bool(mesh.uniform)

        geom = self.geom
        nn = basis.n_nodes
        d = mesh.dimension
        rep = slice(0, 1) if self.shared else slice(None)
        wdet = geom.wdet[rep]
        dphi = geom.dphi_phys(np.arange(mesh.n_elements)[rep])
        phi = basis.phi
        # mass[e,a,b] = int phi_a phi_b ; dmat[e,a,b,i] = int phi_a d_i phi_b
        self.elem_mass = np.einsum("eq,qa,qb->eab", wdet, phi, phi, optimize=True)
        self.elem_dmat = np.einsum("eq,qa,eqbi->eabi", wdet, phi, dphi, optimize=True)
        self.n_rep = self.elem_mass.shape[0]

        # per-face trace mass int psi_c psi_d (canonical parametrization)
        psi = geom.psi
        self.ftrmass = np.einsum("fq,qc,qd->fcd", geom.wsjac, psi, psi, optimize=True)

        self.side_classes: list[FaceSideClass] = []
        for lf in range(mesh.n_local_faces):
            sel = np.flatnonzero(mesh.face_local[:, 0] == lf)
            if len(sel):
                self.side_classes.append(FaceSideClass(
                    side=0, lf=lf, sign=1.0, faces=sel,
                    elems=mesh.face_elems[sel, 0], phi=geom.phi_on_face(lf, 0),
                ))
        right = mesh.interior_faces
        combos = {}
        for f in right:
            key = (int(mesh.face_local[f, 1]), int(mesh.face_orient[f]))
            combos.setdefault(key, []).append(int(f))
        for (lf, code), faces in sorted(combos.items()):
            faces = np.array(faces, dtype=int)
            self.side_classes.append(FaceSideClass(
                side=1, lf=lf, sign=-1.0, faces=faces,
                elems=mesh.face_elems[faces, 1], phi=geom.phi_on_face(lf, code),
            ))

        if self.shared:
            # representative per-local-face tables for shared A/B assembly:
            # on a congruent mesh every element sees local face lf with the
            # same surface weights and outward normal
            self.rep_face = {}
            for lf in range(mesh.n_local_faces):
                f0 = int(mesh.elem_faces[0, lf])
                sgn = 1.0 if mesh.face_elems[f0, 0] == 0 and mesh.face_local[f0, 0] == lf else -1.0
                w = geom.wsjac[f0]
                nrm = sgn * geom.normals[f0]
                self.rep_face[lf] = (w, nrm, geom.phi_on_face(lf, 0))

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    def expand(self, arr: np.ndarray) -> np.ndarray:
        """Broadcast a shared per-element table to all elements."""
        if arr.shape[0] == self.n_elements:
            return arr
        return np.broadcast_to(arr, (self.n_elements,) + arr.shape[1:])


# ---------------------------------------------------------------------------
# local blocks and condensation

@dataclass
class LocalBlocks:
    """Per-element Jacobian blocks and residuals of the stage equations."""

    A: np.ndarray               # (nea, nloc, nloc); nea == 1 when shared
    B: np.ndarray               # (neb, nloc, ntr)
    C: np.ndarray               # (ne, ntr, nloc)
    D: np.ndarray               # (ne, ntr, ntr)
    h: np.ndarray               # (ne, nloc)
    g: np.ndarray               # (ne, ntr)
    layout: TraceLayout

    @property
    def shared_A(self) -> bool:
        return self.A.shape[0] == 1 and self.h.shape[0] > 1

    @property
    def n_elements(self) -> int:
        return self.h.shape[0]

    def residual_norm(self) -> float:
        g = self.layout.scatter_vector(self.g)
        return float(np.sqrt((self.h**2).sum() + (g**2).sum()))


@dataclass
class CondensedSystem:
    """Trace-only Schur system with retained local factorizations."""

    K: kryl.BlockCsrMatrix
    r: np.ndarray               # r = g - C A^{-1} h (solve K dv = -r)
    A_lu: list
    AinvB: np.ndarray
    Ainvh: np.ndarray
    layout: TraceLayout
    shared_A: bool


def condense(blocks: LocalBlocks, layout: TraceLayout | None = None) -> CondensedSystem:
    """Eliminate the element-local unknowns.

    With a shared A one LU factorization is retained and reused; otherwise
    all elements are solved in one batched call and the applied inverse
    products (A^-1 B, A^-1 h) are retained for the local recovery.
    """
    layout = layout or blocks.layout
    ne = blocks.n_elements
    shared = blocks.shared_A
    try:
        if shared:
            A_lu = [sla.lu_factor(blocks.A[0])]
            AinvB = sla.lu_solve(A_lu[0], blocks.B[0])[None]
            Ainvh = sla.lu_solve(A_lu[0], blocks.h.T).T
        else:
            A_lu = None
            B = blocks.B if blocks.B.shape[0] == ne else np.broadcast_to(
                blocks.B[0], (ne,) + blocks.B.shape[1:])
            rhs = np.concatenate([B, blocks.h[:, :, None]], axis=2)
            sol = np.linalg.solve(blocks.A, rhs)
            AinvB, Ainvh = sol[:, :, :-1], sol[:, :, -1]
    except (sla.LinAlgError, np.linalg.LinAlgError, ValueError) as exc:
        raise RuntimeError(f"singular element block: {exc}") from exc

    schur = np.matmul(blocks.C, AinvB[0] if AinvB.shape[0] == 1 else AinvB)
    K = layout.scatter_matrix(blocks.D - schur)
    r = layout.scatter_vector(
        blocks.g - np.matmul(blocks.C, Ainvh[:, :, None])[:, :, 0])
    return CondensedSystem(K=K, r=r, A_lu=A_lu, AinvB=AinvB, Ainvh=Ainvh,
                           layout=layout, shared_A=shared)


def recover_local(cs: CondensedSystem, delta_v: np.ndarray) -> np.ndarray:
    """Element-local updates du = -A^{-1}(h + B dv), shape (ne, nloc)."""
    dv_elem = cs.layout.gather(delta_v)
    if cs.AinvB.shape[0] == 1:
        corr = np.einsum("it,et->ei", cs.AinvB[0], dv_elem)
    else:
        corr = np.einsum("eit,et->ei", cs.AinvB, dv_elem)
    return -(cs.Ainvh + corr)


def monolithic_dense(blocks: LocalBlocks):
    """Dense (A B; C D) system over all unknowns; testing/verification aid."""
    layout = blocks.layout
    ne = blocks.n_elements
    nloc = blocks.h.shape[1]
    nu, nv = ne * nloc, layout.n_dofs
    A = np.zeros((nu, nu))
    B = np.zeros((nu, nv))
    C = np.zeros((nv, nu))
    D = np.zeros((nv, nv))
    g = np.zeros(nv)
    for e in range(ne):
        rows = np.arange(e * nloc, (e + 1) * nloc)
        dofs = layout.elem_dofs[e]
        A[np.ix_(rows, rows)] = blocks.A[0 if blocks.A.shape[0] == 1 else e]
        # np.add.at accumulates correctly when merged trace DOFs repeat
        np.add.at(B, (rows[:, None], dofs[None, :]),
                  blocks.B[0 if blocks.B.shape[0] == 1 else e])
        np.add.at(C, (dofs[:, None], rows[None, :]), blocks.C[e])
        np.add.at(D, (dofs[:, None], dofs[None, :]), blocks.D[e])
        np.add.at(g, dofs, blocks.g[e])
    h = blocks.h.reshape(-1)
    return A, B, C, D, h, g


# ---------------------------------------------------------------------------
# Newton driver

@dataclass
class NewtonOptions:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    max_iter: int = 20


@dataclass
class KrylovOptions:
    restart: int = 200
    tol: float = 1e-8
    maxit: int = 2000
    n_subdomains: int = 1
    overlap: int = 1
    subdomain_solver: str = "bilu0"
    use_mdf: bool = True
    track_orthogonality: bool = True


class HdgDaeSystem(DaeSystem):
    """DAE facade over a hybridized DG spatial discretization.

    The physics model supplies residuals and Jacobian blocks; linear models
    additionally allow caching of the condensed operator per leading
    coefficient, so repeated stages reuse one factorization.
    """

    def __init__(self, model, newton: NewtonOptions | None = None,
                 krylov_opts: KrylovOptions | None = None):
        self.model = model
        self.ctx: AssemblyContext = model.ctx
        self.newton = newton or NewtonOptions()
        self.krylov = krylov_opts or KrylovOptions()
        self._linear_cache: dict[float, tuple] = {}
        self._ras_plans: dict[tuple, kryl.RasPlan] = {}   # keyed by sparsity
        self.last_stats: list[StageStats] = []

    # --- DaeSystem contract -------------------------------------------------
    @property
    def n_u(self) -> int:
        return self.ctx.n_elements * self.model.n_loc

    @property
    def n_v(self) -> int:
        return self.ctx.layout.n_dofs

    def mass_action(self, u: np.ndarray) -> np.ndarray:
        uK = u.reshape(self.ctx.n_elements, self.model.n_loc)
        M = self.model.mass_blocks()
        if M.shape[0] == 1:
            return np.einsum("ab,eb->ea", M[0], uK).reshape(-1)
        return np.einsum("eab,eb->ea", M, uK).reshape(-1)

    def initial_state(self) -> np.ndarray:
        return self.model.initial_dofs().reshape(-1)

    def f(self, u, v, t):
        h, _ = self.model.residual(u, v, t)
        return h.reshape(-1)

    def g(self, u, v, t):
        _, ge = self.model.residual(u, v, t)
        return self.ctx.layout.scatter_vector(ge)

    # --- assembly entry points ----------------------------------------------
    def assemble_local(self, u, v, t, lam: float, rhist) -> LocalBlocks:
        """Stage-equation blocks at a state: A = lam*M + df/du etc."""
        A0, B0, C0, D0, f_el, g_el = self.model.blocks(u, v, t)
        M = self.model.mass_blocks()
        if A0.shape[0] == 1 and M.shape[0] == 1:
            A = (A0 + lam * M)
        else:
            A = self.ctx.expand(A0) + lam * self.ctx.expand(M)
        h = f_el + lam * self.mass_action(u).reshape(f_el.shape) \
            + np.asarray(rhist).reshape(f_el.shape)
        return LocalBlocks(A=A, B=B0, C=C0, D=D0, h=h, g=g_el, layout=self.ctx.layout)

    def _stage_residual(self, u, v, t, lam, rhist):
        f_el, g_el = self.model.residual(u, v, t)
        h = f_el + lam * self.mass_action(u).reshape(f_el.shape) \
            + np.asarray(rhist).reshape(f_el.shape)
        g = self.ctx.layout.scatter_vector(g_el)
        return h, g

    def _build_precond(self, K: kryl.BlockCsrMatrix):
        """RAS preconditioner; partition and MDF orderings are computed once
        (the trace sparsity never changes), factorizations refresh per call."""
        ko = self.krylov
        n_sub = min(ko.n_subdomains, K.nbr)
        key = (K.nbr, K.nnz_blocks, n_sub, ko.overlap)
        plan = self._ras_plans.get(key)
        if plan is None:
            plan = kryl.plan_ras(
                K, n_sub, ko.overlap, ko.use_mdf and ko.subdomain_solver == "bilu0")
            self._ras_plans[key] = plan
        return kryl.factor_ras(K, plan, ko.subdomain_solver)

    def _condensed_operator(self, u, v, t, lam, rhist):
        """Condensed system + preconditioner, cached for linear models."""
        if self.model.is_linear and lam in self._linear_cache:
            cs0, precond = self._linear_cache[lam]
            h, _ = self._stage_residual(u, v, t, lam, rhist)
            # refresh the state-dependent parts only
            blocks_g = self.model.residual(u, v, t)[1]
            if cs0.shared_A:
                Ainvh = sla.lu_solve(cs0.A_lu[0], h.T).T
            else:
                Ainvh = np.stack([sla.lu_solve(cs0.A_lu[e], h[e]) for e in range(len(h))])
            C = self._linear_C
            r = self.ctx.layout.scatter_vector(
                blocks_g - np.matmul(C, Ainvh[:, :, None])[:, :, 0])
            cs = CondensedSystem(K=cs0.K, r=r, A_lu=cs0.A_lu, AinvB=cs0.AinvB,
                                 Ainvh=Ainvh, layout=cs0.layout, shared_A=cs0.shared_A)
            return cs, precond
        blocks = self.assemble_local(u, v, t, lam, rhist)
        cs = condense(blocks)
        precond = self._build_precond(cs.K)
        if self.model.is_linear:
            self._linear_C = blocks.C
            self._linear_cache[lam] = (cs, precond)
        return cs, precond

    # --- stage solves ---------------------------------------------------------
    def solve_stage(self, lam, t, rhist, u_guess, v_guess):
        u = np.array(u_guess, dtype=float)
        v = (np.zeros(self.n_v) if v_guess is None else np.array(v_guess, dtype=float))
        stats = StageStats()
        res0 = None
        for it in range(self.newton.max_iter + 1):
            h, g = self._stage_residual(u, v, t, lam, rhist)
            res = float(np.sqrt((h**2).sum() + (g**2).sum()))
            stats.residual_history.append(res)
            if res0 is None:
                res0 = res
            if res < self.newton.abs_tol or res < self.newton.rel_tol * res0:
                stats.newton_iters = it
                self.last_stats.append(stats)
                return u, v, stats
            if it == self.newton.max_iter:
                break
            cs, precond = self._condensed_operator(u, v, t, lam, rhist)
            result = kryl.gmres(
                cs.K, -cs.r, precond=precond, restart=self.krylov.restart,
                tol=self.krylov.tol, maxit=self.krylov.maxit,
                track_orthogonality=self.krylov.track_orthogonality,
            )
            stats.gmres_iters += result.iterations
            stats.orth_loss = max(stats.orth_loss, result.orth_loss)
            dv = result.x
            du = recover_local(cs, dv)
            u = u + du.reshape(-1)
            v = v + dv
        raise StepFailure(
            f"Newton stagnated after {self.newton.max_iter} iterations "
            f"(residual {stats.residual_history[-1]:.3e})",
            stats.residual_history,
        )

    def solve_algebraic(self, u, t, v_guess):
        """Solve the trace equations g(u, v, t) = 0 at fixed u."""
        v = (np.zeros(self.n_v) if v_guess is None else np.array(v_guess, dtype=float))
        for _ in range(self.newton.max_iter):
            _, _, _, D0, _, g_el = self.model.blocks(u, v, t)
            g = self.ctx.layout.scatter_vector(g_el)
            if np.linalg.norm(g) < max(self.newton.abs_tol, 1e-12):
                return v
            K = self.ctx.layout.scatter_matrix(D0)
            precond = self._build_precond(K)
            result = kryl.gmres(K, -g, precond=precond, restart=self.krylov.restart,
                                tol=min(self.krylov.tol, 1e-10), maxit=self.krylov.maxit)
            v = v + result.x
        raise StepFailure("trace-equation solve failed to converge")


def newton_solve(system: "HdgDaeSystem", lam: float, t: float, rhist,
                 u_guess, v_guess=None):
    """Newton iteration on one implicit stage of an HDG system.

    Each iteration assembles the local blocks, condenses, solves the trace
    system with preconditioned GMRES, recovers the element-local update, and
    applies it; terminates on the combined residual norm ||(h, g)||_2.
    """
    return system.solve_stage(lam, t, rhist, u_guess, v_guess)


def predict_initial_guess(history, order: int, times=None, t_target=None):
    """Polynomial extrapolation of previous converged states.

    `history` is ordered oldest to newest; with no explicit times, uniform
    unit spacing is assumed and the prediction targets one step past the end.
    """
    states = list(history)
    if not states:
        raise ValueError("empty history")
    q = min(order, len(states) - 1)
    states = states[len(states) - (q + 1):]
    if times is None:
        times = np.arange(len(states), dtype=float)
        t_target = float(len(states))
    else:
        times = np.asarray(times, dtype=float)[-(q + 1):]
        if t_target is None:
            raise ValueError("t_target required with explicit times")
    return extrapolate(times, states, t_target)
