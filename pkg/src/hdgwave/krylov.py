"""Restarted GMRES with ICGS orthogonalization and a one-process RAS
preconditioner built on BILU(0) subdomain factorizations under MDF ordering.

The global trace matrix is stored in block CSR form with a uniform block
size; subdomains are contiguous chunks of the block-row adjacency graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class BlockCsrMatrix:
    """Sparse matrix of uniform dense blocks in CSR layout."""

    def __init__(self, n_block_rows: int, bs: int, indptr, indices, blocks):
        self.nbr = int(n_block_rows)
        self.bs = int(bs)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.blocks = np.asarray(blocks, dtype=float)
        self._bsr = None

    @classmethod
    def from_block_coo(cls, n_block_rows: int, bs: int, rows, cols, blocks):
        """Assemble from block triplets, summing duplicates."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        blocks = np.asarray(blocks, dtype=float)
        order = np.lexsort((cols, rows))
        rows, cols, blocks = rows[order], cols[order], blocks[order]
        new = np.ones(len(rows), dtype=bool)
        new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(new)
        summed = np.add.reduceat(blocks, starts, axis=0)
        urows, ucols = rows[starts], cols[starts]
        indptr = np.zeros(n_block_rows + 1, dtype=np.int64)
        np.add.at(indptr, urows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(n_block_rows, bs, indptr, ucols, summed)

    @property
    def n(self) -> int:
        return self.nbr * self.bs

    @property
    def nnz_blocks(self) -> int:
        return len(self.indices)

    def to_bsr(self) -> sp.bsr_matrix:
        if self._bsr is None:
            self._bsr = sp.bsr_matrix(
                (self.blocks, self.indices, self.indptr), shape=(self.n, self.n)
            )
        return self._bsr

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_bsr() @ x

    __matmul__ = matvec

    def to_dense(self) -> np.ndarray:
        return self.to_bsr().toarray()

    def diag_block(self, i: int) -> np.ndarray:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        pos = np.searchsorted(self.indices[lo:hi], i)
        if pos < hi - lo and self.indices[lo + pos] == i:
            return self.blocks[lo + pos]
        return np.zeros((self.bs, self.bs))

    def block_at(self, i: int, j: int) -> np.ndarray | None:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        pos = np.searchsorted(self.indices[lo:hi], j)
        if pos < hi - lo and self.indices[lo + pos] == j:
            return self.blocks[lo + pos]
        return None

    def row_indices(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def extract(self, subset: np.ndarray) -> "BlockCsrMatrix":
        """Principal block submatrix on a sorted subset of block rows."""
        subset = np.asarray(subset, dtype=np.int64)
        lookup = -np.ones(self.nbr, dtype=np.int64)
        lookup[subset] = np.arange(len(subset))
        indptr = [0]
        indices, blocks = [], []
        for new_i, i in enumerate(subset):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            cols = self.indices[lo:hi]
            keep = lookup[cols] >= 0
            indices.append(lookup[cols[keep]])
            blocks.append(self.blocks[lo:hi][keep])
            indptr.append(indptr[-1] + int(keep.sum()))
        return BlockCsrMatrix(
            len(subset), self.bs, np.array(indptr),
            np.concatenate(indices) if indices else np.empty(0, dtype=np.int64),
            np.concatenate(blocks) if blocks else np.empty((0, self.bs, self.bs)),
        )

    def adjacency(self) -> list[np.ndarray]:
        """Structurally symmetric neighbor lists, diagonal excluded."""
        nbrs = [set() for _ in range(self.nbr)]
        for i in range(self.nbr):
            for j in self.row_indices(i):
                if j != i:
                    nbrs[i].add(int(j))
                    nbrs[int(j)].add(i)
        return [np.array(sorted(s), dtype=np.int64) for s in nbrs]


def icgs_orthogonalize(V: np.ndarray, w: np.ndarray):
    """Two-pass classical Gram-Schmidt of w against the orthonormal columns V.

    Returns (orthogonal component, projection coefficients, its norm). A norm
    of ~0 signals a happy breakdown (w was already in span(V)).
    """
    w = w.copy()
    if V.shape[1] == 0:
        return w, np.empty(0), float(np.linalg.norm(w))
    h = V.T @ w
    w -= V @ h
    h2 = V.T @ w
    w -= V @ h2
    h += h2
    return w, h, float(np.linalg.norm(w))


@dataclass
class GmresResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residuals: list[float] = field(default_factory=list)
    breakdown: bool = False
    orth_loss: float = 0.0


def gmres(
    K, b: np.ndarray, precond=None, restart: int = 200, tol: float = 1e-8,
    maxit: int = 2000, x0: np.ndarray | None = None, track_orthogonality: bool = True,
) -> GmresResult:
    """Left-preconditioned restarted GMRES(m) with ICGS orthogonalization.

    Convergence is declared on the preconditioned relative residual. A tiny
    Hessenberg subdiagonal (< 1e-300) is treated as a lucky breakdown.
    """
    matvec = K.matvec if hasattr(K, "matvec") else (lambda v: K @ v)
    psolve = (lambda v: v) if precond is None else (
        precond.apply if hasattr(precond, "apply") else precond
    )
    n = len(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bt = psolve(b)
    ref = float(np.linalg.norm(bt))
    if ref == 0.0:
        return GmresResult(x=np.zeros(n), converged=True, iterations=0, residuals=[0.0])

    total_it = 0
    residuals: list[float] = []
    orth_loss = 0.0
    converged = False
    breakdown = False

    while total_it < maxit and not converged:
        r = psolve(b - matvec(x))
        beta = float(np.linalg.norm(r))
        if beta / ref <= tol:
            converged = True
            residuals.append(beta)
            break
        m = min(restart, maxit - total_it)
        V = np.zeros((n, m + 1))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[:, 0] = r / beta

        j = 0
        for j in range(m):
            w = psolve(matvec(V[:, j]))
            w, h, hnorm = icgs_orthogonalize(V[:, : j + 1], w)
            H[: j + 1, j] = h
            H[j + 1, j] = hnorm
            total_it += 1
            lucky = hnorm < 1e-300
            if not lucky:
                V[:, j + 1] = w / hnorm
            # apply accumulated Givens rotations, then a new one
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = (1.0, 0.0) if denom == 0 else (H[j, j] / denom, H[j + 1, j] / denom)
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            res = abs(g[j + 1])
            residuals.append(res)
            if lucky:
                breakdown = True
                converged = res / ref <= tol or res < 1e-300
                break
            if res / ref <= tol:
                converged = True
                break
            if total_it >= maxit:
                break

        nk = j + 1
        y = sla.solve_triangular(H[:nk, :nk], g[:nk], lower=False, check_finite=False)
        x = x + V[:, :nk] @ y
        if track_orthogonality and nk > 1:
            gram = V[:, :nk].T @ V[:, :nk]
            orth_loss = max(orth_loss, float(np.abs(gram - np.eye(nk)).max()))
        if breakdown:
            break

    return GmresResult(
        x=x, converged=converged, iterations=total_it,
        residuals=residuals, breakdown=breakdown, orth_loss=orth_loss,
    )


def mdf_order(Ki: BlockCsrMatrix) -> np.ndarray:
    """Minimum discarded fill elimination order for a block sparse matrix.

    Greedy: repeatedly eliminate the node whose elimination would discard the
    least fill, measured by the Frobenius norm of fill blocks falling outside
    the sparsity pattern; ties break to the lowest node index. Block values
    are taken from the unfactored matrix.
    """
    n = Ki.nbr
    nbrs = Ki.adjacency()
    in_pattern = [set(map(int, Ki.row_indices(i))) for i in range(n)]
    dinv = []
    for p in range(n):
        D = Ki.diag_block(p)
        try:
            dinv.append(np.linalg.inv(D))
        except np.linalg.LinAlgError:
            dinv.append(np.linalg.pinv(D))

    remaining = np.ones(n, dtype=bool)
    alive_nbrs = [set(map(int, a)) for a in nbrs]

    def weight(p: int) -> float:
        live = sorted(alive_nbrs[p])
        if len(live) < 2:
            return 0.0
        lefts, rights, have_l, have_r = [], [], [], []
        for i in live:
            Kip = Ki.block_at(i, p)
            have_l.append(Kip is not None)
            lefts.append(Kip @ dinv[p] if Kip is not None else None)
            Kpj = Ki.block_at(p, i)
            have_r.append(Kpj is not None)
            rights.append(Kpj)
        total = 0.0
        for a, i in enumerate(live):
            if not have_l[a]:
                continue
            cols = [b for b, j in enumerate(live)
                    if j != i and have_r[b] and j not in in_pattern[i]]
            if not cols:
                continue
            fill = lefts[a] @ np.stack([rights[b] for b in cols], axis=0)
            total += float(np.sqrt((fill**2).sum(axis=(1, 2))).sum())
        return total

    weights = np.array([weight(p) for p in range(n)])
    perm = np.empty(n, dtype=np.int64)
    for step in range(n):
        weights_masked = np.where(remaining, weights, np.inf)
        p = int(np.argmin(weights_masked))
        perm[step] = p
        remaining[p] = False
        for q in list(alive_nbrs[p]):
            alive_nbrs[q].discard(p)
        for q in alive_nbrs[p]:
            weights[q] = weight(q)
    return perm


@dataclass
class Bilu0Factors:
    """In-place block ILU(0) factors on a permuted block CSR pattern."""

    perm: np.ndarray
    matrix: BlockCsrMatrix        # holds combined L (unit diag) and U blocks
    diag_inv: np.ndarray          # inverted diagonal blocks of U
    _solve_plan: tuple = None     # cached row structure for fast application

    @property
    def bs(self) -> int:
        return self.matrix.bs

    def solve_plan(self):
        """Per-row lower/upper column and block lists."""
        if self._solve_plan is None:
            A = self.matrix
            lower_cols, lower_blk, upper_cols, upper_blk = [], [], [], []
            for i in range(A.nbr):
                lo, hi = A.indptr[i], A.indptr[i + 1]
                cols = A.indices[lo:hi]
                blks = A.blocks[lo:hi]
                lower_cols.append(cols[cols < i])
                lower_blk.append(blks[cols < i])
                upper_cols.append(cols[cols > i])
                upper_blk.append(blks[cols > i])
            self._solve_plan = (lower_cols, lower_blk, upper_cols, upper_blk)
        return self._solve_plan


def bilu0_factor(Ki: BlockCsrMatrix, perm: np.ndarray | None = None) -> Bilu0Factors:
    """Block incomplete LU with zero fill-in on the (permuted) pattern."""
    n = Ki.nbr
    if perm is None:
        perm = np.arange(n, dtype=np.int64)
    if np.array_equal(perm, np.arange(n)):
        A = BlockCsrMatrix(
            Ki.nbr, Ki.bs, Ki.indptr.copy(), Ki.indices.copy(), Ki.blocks.copy()
        )
    else:
        A = _permute(Ki, perm)
    blocks = A.blocks
    pos_of = [
        {int(j): int(A.indptr[i] + t) for t, j in enumerate(A.row_indices(i))}
        for i in range(n)
    ]
    diag_inv = np.empty((n, A.bs, A.bs))
    for i in range(n):
        row_cols = A.row_indices(i)
        for k in row_cols[row_cols < i]:
            k = int(k)
            Lik = blocks[pos_of[i][k]] @ diag_inv[k]
            blocks[pos_of[i][k]] = Lik
            krow = A.row_indices(k)
            for j in krow[krow > k]:
                j = int(j)
                pij = pos_of[i].get(j)
                if pij is not None:
                    blocks[pij] -= Lik @ blocks[pos_of[k][j]]
        pii = pos_of[i].get(i)
        if pii is None:
            raise RuntimeError(f"missing diagonal block at row {i}")
        try:
            diag_inv[i] = np.linalg.inv(blocks[pii])
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"singular diagonal block at permuted row {i}") from exc
        if not np.all(np.isfinite(diag_inv[i])):
            raise RuntimeError(f"singular diagonal block at permuted row {i}")
    return Bilu0Factors(perm=np.asarray(perm, dtype=np.int64), matrix=A, diag_inv=diag_inv)


def _permute(Ki: BlockCsrMatrix, perm: np.ndarray) -> BlockCsrMatrix:
    """Symmetric permutation K[perm][:, perm] keeping rows sorted."""
    n = Ki.nbr
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    rows, cols, blocks = [], [], []
    for i in range(n):
        cs = Ki.row_indices(i)
        rows.append(np.full(len(cs), inv[i]))
        cols.append(inv[cs])
        blocks.append(Ki.blocks[Ki.indptr[i]:Ki.indptr[i + 1]])
    return BlockCsrMatrix.from_block_coo(
        n, Ki.bs, np.concatenate(rows), np.concatenate(cols), np.concatenate(blocks)
    )


def bilu0_apply(factors: Bilu0Factors, x: np.ndarray) -> np.ndarray:
    """Solve (LU) z = x with the incomplete factors (includes permutation)."""
    A, perm = factors.matrix, factors.perm
    n, bs = A.nbr, A.bs
    lower_cols, lower_blk, upper_cols, upper_blk = factors.solve_plan()
    dinv = factors.diag_inv
    xb = x.reshape(n, bs)[perm]
    y = np.empty_like(xb)
    for i in range(n):
        cols = lower_cols[i]
        if len(cols):
            y[i] = xb[i] - np.einsum("cab,cb->a", lower_blk[i], y[cols])
        else:
            y[i] = xb[i]
    z = np.empty_like(xb)
    for i in range(n - 1, -1, -1):
        cols = upper_cols[i]
        acc = y[i]
        if len(cols):
            acc = acc - np.einsum("cab,cb->a", upper_blk[i], z[cols])
        z[i] = dinv[i] @ acc
    out = np.empty_like(xb)
    out[perm] = z
    return out.reshape(-1)


@dataclass
class RasPreconditioner:
    """Restricted additive Schwarz over block-row subdomains.

    The owned index sets partition the block rows; delta-level overlap only
    widens the restriction side, so each global entry is written exactly once
    on application (deterministic without atomics).
    """

    n_subdomains: int
    overlap: int
    block_size: int
    owned: list[np.ndarray]
    overlapped: list[np.ndarray]
    solvers: list
    kind: str

    def apply(self, x: np.ndarray) -> np.ndarray:
        bs = self.block_size
        y = np.zeros_like(x)
        for owned, over, solve in zip(self.owned, self.overlapped, self.solvers):
            xi = x.reshape(-1, bs)[over].reshape(-1)
            zi = solve(xi).reshape(-1, bs)
            local = np.searchsorted(over, owned)
            y.reshape(-1, bs)[owned] = zi[local]
        return y


def partition_blocks(adj: list[np.ndarray], n_parts: int) -> list[np.ndarray]:
    """Greedy BFS split of the block graph into contiguous, balanced parts."""
    from collections import deque

    n = len(adj)
    if not 1 <= n_parts <= n:
        raise ValueError(f"cannot split {n} nodes into {n_parts} subdomains")
    target = int(np.ceil(n / n_parts))
    assigned = np.full(n, -1, dtype=np.int64)
    parts: list[list[int]] = []
    for pid in range(n_parts):
        n_left = int((assigned == -1).sum())
        rem_parts = n_parts - pid
        if n_left < rem_parts:
            raise ValueError(f"subdomain {pid} is empty; reduce the subdomain count")
        # leave at least one node for every later part; the last takes the rest
        cap = n_left if pid == n_parts - 1 else min(target, n_left - (rem_parts - 1))
        part: list[int] = []
        queue: deque = deque()
        while len(part) < cap:
            if not queue:
                queue.append(int(np.flatnonzero(assigned == -1)[0]))
            u = queue.popleft()
            if assigned[u] != -1:
                continue
            assigned[u] = pid
            part.append(u)
            for w in adj[u]:
                if assigned[w] == -1:
                    queue.append(int(w))
        parts.append(part)
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


@dataclass
class RasPlan:
    """Reusable structural part of a RAS setup: partition, overlap index
    sets, and per-subdomain elimination orderings."""

    n_subdomains: int
    overlap: int
    owned: list[np.ndarray]
    overlapped: list[np.ndarray]
    perms: list[np.ndarray | None]


def plan_ras(K: BlockCsrMatrix, n_subdomains: int, overlap: int = 1,
             use_mdf: bool = True) -> RasPlan:
    """Partition the block graph and fix subdomain elimination orderings."""
    if n_subdomains < 1:
        raise ValueError("need at least one subdomain")
    if overlap < 0:
        raise ValueError("overlap level must be >= 0")
    adj = K.adjacency()
    owned = partition_blocks(adj, n_subdomains)
    overlapped, perms = [], []
    for part in owned:
        over = set(map(int, part))
        frontier = set(over)
        for _ in range(overlap):
            new = set()
            for u in frontier:
                new.update(map(int, adj[u]))
            new -= over
            over |= new
            frontier = new
        over_arr = np.array(sorted(over), dtype=np.int64)
        overlapped.append(over_arr)
        perms.append(mdf_order(K.extract(over_arr)) if use_mdf else None)
    return RasPlan(n_subdomains=n_subdomains, overlap=overlap, owned=owned,
                   overlapped=overlapped, perms=perms)


def factor_ras(K: BlockCsrMatrix, plan: RasPlan,
               subdomain_solver: str = "bilu0") -> RasPreconditioner:
    """Subdomain factorizations for the current matrix values."""
    solvers = []
    for over_arr, perm in zip(plan.overlapped, plan.perms):
        Ki = K.extract(over_arr)
        if subdomain_solver == "bilu0":
            fac = bilu0_factor(Ki, perm if perm is not None else np.arange(Ki.nbr))
            solvers.append(lambda x, fac=fac: bilu0_apply(fac, x))
        elif subdomain_solver == "lu":
            lu = spla.splu(Ki.to_bsr().tocsc())
            solvers.append(lambda x, lu=lu: lu.solve(x))
        else:
            raise ValueError(f"unknown subdomain solver {subdomain_solver!r}")
    return RasPreconditioner(
        n_subdomains=plan.n_subdomains, overlap=plan.overlap, block_size=K.bs,
        owned=plan.owned, overlapped=plan.overlapped, solvers=solvers,
        kind=subdomain_solver,
    )


def build_ras(
    K: BlockCsrMatrix, n_subdomains: int, overlap: int = 1,
    subdomain_solver: str = "bilu0", use_mdf: bool = True,
) -> RasPreconditioner:
    """RAS preconditioner with BILU(0)+MDF (or exact LU) subdomain solves."""
    plan = plan_ras(K, n_subdomains, overlap, use_mdf and subdomain_solver == "bilu0")
    return factor_ras(K, plan, subdomain_solver)
