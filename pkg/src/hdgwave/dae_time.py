"""Time integrators for index-1 DAE systems M du/dt + f(u,v,t) = 0,
g(u,v,t) = 0: backward difference formulas (s <= 3) and diagonally implicit
Runge-Kutta schemes driven stage by stage.

Every implicit solve is phrased as a BDF-shaped stage

    lam * M u + f(u, v, t) + r_hist = 0,     g(u, v, t) = 0,

with leading coefficient lam = a_s/(dt*b_s) for BDF and d_ii/dt for DIRK
stages, so one nonlinear stage solver serves both families.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class StageStats:
    newton_iters: int = 0
    gmres_iters: int = 0
    residual_history: list = field(default_factory=list)
    orth_loss: float = 0.0


class StepFailure(RuntimeError):
    """A nonlinear stage solve failed to converge."""

    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = residuals or []


class DaeSystem(ABC):
    """Contract between the time integrators and a spatial discretization."""

    @property
    @abstractmethod
    def n_u(self) -> int: ...

    @property
    @abstractmethod
    def n_v(self) -> int: ...

    @abstractmethod
    def mass_action(self, u: np.ndarray) -> np.ndarray:
        """Apply the (block-diagonal) mass matrix M."""

    @abstractmethod
    def initial_state(self) -> np.ndarray:
        """Initial condition u0."""

    @abstractmethod
    def solve_stage(self, lam, t, rhist, u_guess, v_guess) -> tuple:
        """Solve lam*M u + f(u,v,t) + rhist = 0, g(u,v,t) = 0 -> (u, v, stats)."""

    @abstractmethod
    def solve_algebraic(self, u, t, v_guess) -> np.ndarray:
        """Solve g(u, v, t) = 0 for v at fixed u."""


@dataclass(frozen=True)
class BdfScheme:
    """Backward difference formula with s steps: sum_i a_i M u^{n+i}
    + dt * b_s f(u^{n+s}, v^{n+s}, t^{n+s}) = 0."""

    s: int
    a: tuple
    b_s: float = 1.0

    def __post_init__(self):
        if len(self.a) != self.s + 1:
            raise ValueError("coefficient vector must have length s+1")
        if abs(sum(self.a)) > 1e-12:
            raise ValueError("inconsistent BDF scheme: sum(a) != 0")


_BDF_COEFFS = {
    1: (-1.0, 1.0),
    2: (0.5, -2.0, 1.5),
    3: (-1.0 / 3.0, 1.5, -3.0, 11.0 / 6.0),
}


def make_bdf(s: int) -> BdfScheme:
    if s not in _BDF_COEFFS:
        raise ValueError(f"BDF supported for s in 1..3, got {s}")
    return BdfScheme(s=s, a=_BDF_COEFFS[s])


def bdf_step(dae: DaeSystem, history, scheme: BdfScheme, dt: float, t_end: float,
             u_guess=None, v_guess=None):
    """Advance one BDF step given the previous s states (oldest first)."""
    history = list(history)
    if len(history) != scheme.s:
        raise ValueError(f"BDF{scheme.s} needs {scheme.s} history states")
    lam = scheme.a[-1] / (dt * scheme.b_s)
    rhist = np.zeros(dae.n_u)
    for i, u_old in enumerate(history):
        rhist += (scheme.a[i] / (dt * scheme.b_s)) * dae.mass_action(u_old)
    if u_guess is None:
        u_guess = history[-1].copy()
    u, v, stats = dae.solve_stage(lam, t_end, rhist, u_guess, v_guess)
    return u, v, stats


@dataclass(frozen=True)
class ButcherTableau:
    """Lower-triangular (DIRK) Runge-Kutta tableau with its inverse."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray = None        # inverse of a
    e: np.ndarray = None        # e_j = sum_i b_i d_ij

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("RK matrix must be square")
        if np.any(np.abs(np.triu(a, 1)) > 0):
            raise ValueError("tableau must be lower triangular (DIRK)")
        if np.any(np.abs(np.diag(a)) < 1e-14):
            raise ValueError("DIRK tableau needs a nonzero diagonal")
        d = np.linalg.inv(a)
        if np.abs(a @ d - np.eye(len(a))).max() > 1e-13:
            raise ValueError("RK matrix inverse verification failed")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "e", self.b @ d)

    @property
    def n_stages(self) -> int:
        return len(self.b)

    @property
    def stiffly_accurate(self) -> bool:
        return bool(np.allclose(self.a[-1], self.b, atol=1e-14) and abs(self.c[-1] - 1) < 1e-14)

    def stability_function(self, z: complex) -> complex:
        s = self.n_stages
        one = np.ones(s)
        return 1.0 + z * (self.b @ np.linalg.solve(np.eye(s) - z * self.a, one))


def make_dirk33() -> ButcherTableau:
    """Three-stage, third-order, L-stable SDIRK tableau.

    The diagonal gamma is the root of g^3 - 3g^2 + (3/2)g - 1/6 in (1/6, 1/2);
    the remaining coefficients follow from the order conditions with a
    stiffly accurate last row.
    """
    poly = np.array([1.0, -3.0, 1.5, -1.0 / 6.0])
    roots = np.roots(poly)
    gamma = None
    for r in roots:
        if abs(r.imag) < 1e-10 and 1.0 / 6.0 < r.real < 0.5:
            gamma = float(r.real)
    if gamma is None:
        raise RuntimeError("no SDIRK gamma root in (1/6, 1/2)")
    for _ in range(3):   # polish to full precision
        p = np.polyval(poly, gamma)
        dp = np.polyval(np.polyder(poly), gamma)
        gamma -= p / dp

    c = np.array([gamma, (1.0 + gamma) / 2.0, 1.0])
    # order conditions sum(b) = 1 and sum(b_i c_i) = 1/2 with b3 = gamma
    mat = np.array([[1.0, 1.0], [c[0], c[1]]])
    rhs = np.array([1.0 - gamma, 0.5 - gamma * c[2]])
    b1, b2 = np.linalg.solve(mat, rhs)
    b = np.array([b1, b2, gamma])
    a = np.array([
        [gamma, 0.0, 0.0],
        [c[1] - gamma, gamma, 0.0],
        [b1, b2, gamma],
    ])
    tab = ButcherTableau(a=a, b=b, c=c)
    if abs(b @ c**2 - 1.0 / 3.0) > 1e-12:
        raise RuntimeError("third-order condition failed")
    if abs(b @ (a @ c) - 1.0 / 6.0) > 1e-12:
        raise RuntimeError("fourth order condition sum(b_i a_ij c_j) failed")
    return tab


def dirk_step(dae: DaeSystem, u_n: np.ndarray, tableau: ButcherTableau, dt: float,
              t_n: float, want_v: bool = False, predictor=None, v_guess=None):
    """Advance one DIRK step; stages are solved sequentially as BDF-like systems.

    The algebraic solve for v at t_{n+1} runs only when `want_v` is set (for a
    stiffly accurate tableau the last stage already provides it); u_{n+1} is
    identical either way.
    """
    s = tableau.n_stages
    d = tableau.d
    Mu_n = dae.mass_action(u_n)
    stage_u, stage_Mu, stage_v = [], [], []
    u_guess, vg = u_n.copy(), v_guess
    stats_all = []
    for i in range(s):
        lam = d[i, i] / dt
        t_i = t_n + tableau.c[i] * dt
        rhist = -(d[i, : i + 1].sum() / dt) * Mu_n
        for j in range(i):
            rhist += (d[i, j] / dt) * stage_Mu[j]
        if predictor is not None:
            guess = predictor(t_i)
            if guess is not None:
                u_guess, vg = guess
        try:
            u_i, v_i, st = dae.solve_stage(lam, t_i, rhist, u_guess, vg)
        except StepFailure as exc:
            raise StepFailure(f"DIRK stage {i + 1}/{s} at t={t_i:.6g}: {exc}",
                              exc.residuals) from exc
        stage_u.append(u_i)
        stage_Mu.append(dae.mass_action(u_i))
        stage_v.append(v_i)
        stats_all.append(st)
        u_guess, vg = u_i.copy(), v_i

    coeff_n = 1.0 - float(tableau.b @ d.sum(axis=1))
    u_next = coeff_n * u_n
    for j in range(s):
        u_next = u_next + tableau.e[j] * stage_u[j]

    v_next = None
    if want_v:
        if tableau.stiffly_accurate:
            v_next = stage_v[-1]
        else:
            v_next = dae.solve_algebraic(u_next, t_n + dt, stage_v[-1])
    return u_next, v_next, stats_all


def integrate(
    dae: DaeSystem, scheme: str, dt: float, t_end: float, t0: float = 0.0,
    predictor_order: int = 1, callback=None, v0=None,
):
    """March the DAE from t0 to t_end with fixed steps.

    scheme is 'bdf1'|'bdf2'|'bdf3'|'dirk33'. BDF schemes with s > 1 take
    their startup steps with DIRK(3,3). The callback runs after every
    accepted step as callback(step_index, t, u, v, stats_list).
    """
    n_steps = int(round((t_end - t0) / dt))
    if abs(t0 + n_steps * dt - t_end) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError("t_end - t0 must be an integer multiple of dt")
    u = dae.initial_state()
    v = dae.solve_algebraic(u, t0, v0)
    if callback is not None:
        callback(0, t0, u, v, [])

    history = deque([(t0, u, v)], maxlen=max(predictor_order + 1, 4))
    if scheme.startswith("bdf"):
        bdf = make_bdf(int(scheme[3:]))
    elif scheme == "dirk33":
        bdf = None
    else:
        raise ValueError(f"unknown time scheme {scheme!r}")
    tableau = make_dirk33() if bdf is None or bdf.s > 1 else None

    def predictor(t_target):
        if predictor_order < 0 or len(history) == 0:
            return None
        pts = list(history)[-(predictor_order + 1):]
        return (
            extrapolate([p[0] for p in pts], [p[1] for p in pts], t_target),
            extrapolate([p[0] for p in pts], [p[2] for p in pts], t_target),
        )

    for step in range(1, n_steps + 1):
        t_new = t0 + step * dt
        if bdf is not None and len(history) >= bdf.s:
            hist_u = [h[1] for h in list(history)[-bdf.s:]]
            guess = predictor(t_new) or (hist_u[-1], history[-1][2])
            u, v, stats = bdf_step(dae, hist_u, bdf, dt, t_new,
                                   u_guess=guess[0], v_guess=guess[1])
            stats = [stats]
        else:
            # DIRK path: main scheme or BDF startup
            u, v, stats = dirk_step(dae, history[-1][1], tableau, dt, history[-1][0],
                                    want_v=True, predictor=predictor,
                                    v_guess=history[-1][2])
        history.append((t_new, u, v))
        if callback is not None:
            callback(step, t_new, u, v, stats)
    return u, v


def extrapolate(times, states, t_target):
    """Lagrange extrapolation of a state sequence to a target time."""
    times = np.asarray(times, dtype=float)
    n = len(times)
    if n == 1:
        return states[0].copy()
    out = np.zeros_like(states[0])
    for i in range(n):
        w = 1.0
        for j in range(n):
            if j != i:
                w *= (t_target - times[j]) / (times[i] - times[j])
        out = out + w * states[i]
    return out


class DenseDaeSystem(DaeSystem):
    """Small dense reference implementation of the DAE contract.

    Used for scalar/vector test systems; solves each stage with a plain
    Newton iteration on the full (A B; C D) block system.
    """

    def __init__(self, M, f, g, u0, n_v, dfdu=None, dfdv=None, dgdu=None, dgdv=None,
                 newton_tol=1e-12, max_newton=25):
        self.M = np.atleast_2d(np.asarray(M, dtype=float))
        self._f, self._g = f, g
        self._u0 = np.atleast_1d(np.asarray(u0, dtype=float))
        self._n_v = n_v
        self._jacs = (dfdu, dfdv, dgdu, dgdv)
        self.newton_tol = newton_tol
        self.max_newton = max_newton

    @property
    def n_u(self) -> int:
        return len(self._u0)

    @property
    def n_v(self) -> int:
        return self._n_v

    def mass_action(self, u):
        return self.M @ u

    def initial_state(self):
        return self._u0.copy()

    def f(self, u, v, t):
        return np.atleast_1d(np.asarray(self._f(u, v, t), dtype=float))

    def g(self, u, v, t):
        return np.atleast_1d(np.asarray(self._g(u, v, t), dtype=float))

    def _jacobian(self, u, v, t):
        dfdu, dfdv, dgdu, dgdv = self._jacs
        if all(j is not None for j in self._jacs):
            return (np.atleast_2d(dfdu(u, v, t)), np.atleast_2d(dfdv(u, v, t)),
                    np.atleast_2d(dgdu(u, v, t)), np.atleast_2d(dgdv(u, v, t)))
        # central finite differences; fine for the small test systems
        nu, nv = self.n_u, self.n_v
        eps = 1e-7
        J = np.zeros((nu + nv, nu + nv))
        for k in range(nu + nv):
            du = np.zeros(nu)
            dv = np.zeros(nv)
            (du if k < nu else dv)[k if k < nu else k - nu] = eps
            rp = np.concatenate([self.f(u + du, v + dv, t), self.g(u + du, v + dv, t)])
            rm = np.concatenate([self.f(u - du, v - dv, t), self.g(u - du, v - dv, t)])
            J[:, k] = (rp - rm) / (2 * eps)
        return J[:nu, :nu], J[:nu, nu:], J[nu:, :nu], J[nu:, nu:]

    def solve_stage(self, lam, t, rhist, u_guess, v_guess):
        u = np.array(u_guess, dtype=float)
        v = np.zeros(self.n_v) if v_guess is None else np.array(v_guess, dtype=float)
        stats = StageStats()
        for it in range(self.max_newton):
            h = lam * (self.M @ u) + self.f(u, v, t) + rhist
            g = self.g(u, v, t)
            res = np.linalg.norm(np.concatenate([h, g]))
            stats.residual_history.append(res)
            if res < self.newton_tol:
                stats.newton_iters = it
                return u, v, stats
            A, B, C, D = self._jacobian(u, v, t)
            A = lam * self.M + A
            J = np.block([[A, B], [C, D]])
            delta = np.linalg.solve(J, -np.concatenate([h, g]))
            u = u + delta[: self.n_u]
            v = v + delta[self.n_u:]
        raise StepFailure(
            f"Newton failed after {self.max_newton} iterations (res={res:.3e})",
            stats.residual_history,
        )

    def solve_algebraic(self, u, t, v_guess):
        v = np.zeros(self.n_v) if v_guess is None else np.array(v_guess, dtype=float)
        for _ in range(self.max_newton):
            g = self.g(u, v, t)
            if np.linalg.norm(g) < self.newton_tol:
                return v
            _, _, _, D = self._jacobian(u, v, t)
            v = v + np.linalg.solve(D, -g)
        raise StepFailure("algebraic solve for v failed to converge")
