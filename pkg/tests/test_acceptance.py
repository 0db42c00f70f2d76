"""Acceptance suite: every criterion is one test that prints a PASS line with
its measured quantities when it succeeds (run with -v -s, or rely on the test
name for the per-criterion verdict).

The convergence-table runs execute the reference case files shipped under
cases/ through the production harness, one run per (physics, degree), cached
across assertions.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from hdgwave import krylov as kr
from hdgwave.dae_time import DenseDaeSystem, integrate
from hdgwave.elastodyn import (
    BoundaryCondition,
    ElasticMaterial,
    LinearElastodynamics,
    StabilizationSpec,
    SvkElastodynamics,
    discrete_energy,
    make_plate_model,
    plate_manufactured_case,
)
from hdgwave.harness_cli import CaseFile, run_case
from hdgwave.hdg_core import (
    HdgDaeSystem,
    KrylovOptions,
    condense,
    monolithic_dense,
    recover_local,
)
from hdgwave.maxwell_glm import GlmMaxwell, cavity_case, em_energy, make_cavity_model
from hdgwave.mesh import build_structured_box
from hdgwave.spaces import make_trace_space

CASES = Path(__file__).resolve().parents[1] / "cases"
_RUNS: dict = {}
_OUT = None


@pytest.fixture(scope="session", autouse=True)
def _outdir(tmp_path_factory):
    global _OUT
    _OUT = tmp_path_factory.mktemp("acceptance")
    yield


def reference_run(name, overrides=()):
    key = (name, tuple(overrides))
    if key not in _RUNS:
        case = CaseFile.load(CASES / f"{name}.cfg", overrides)
        _RUNS[key] = run_case(case, out_dir=_OUT)
    return _RUNS[key]


def finest_pair_order(report, field):
    orders = report.orders()[field]
    return orders[-1]


def announce(criterion, text):
    print(f"[criterion {criterion}] PASS: {text}")


# -- criterion 1: static condensation vs dense monolithic --------------------

def _oracle_model(physics):
    if physics == "maxwell":
        case = cavity_case(1, 0.5)
        return make_cavity_model(case, 1)
    case = plate_manufactured_case(1, 0.5, nonlinear=physics == "svk")
    return make_plate_model(case, 1)


@pytest.mark.parametrize("physics", ["linear", "svk", "maxwell"])
def test_criterion_1_condensation_oracle(physics, rng):
    t0 = time.perf_counter()
    model = _oracle_model(physics)
    system = HdgDaeSystem(model, krylov_opts=KrylovOptions(tol=1e-13, restart=400,
                                                           n_subdomains=2))
    nu, nv = system.n_u, system.n_v
    u = system.initial_state() + 0.02 * rng.standard_normal(nu)
    v = 0.02 * rng.standard_normal(nv)
    lam = 15.0
    rhist = 0.01 * rng.standard_normal(nu).reshape(model.ctx.n_elements, -1)
    blocks = system.assemble_local(u, v, 0.3, lam, rhist)
    A, B, C, D, h, g = monolithic_dense(blocks)
    sol = np.linalg.solve(np.block([[A, B], [C, D]]), -np.concatenate([h, g]))
    cs = condense(blocks)
    res = kr.gmres(cs.K, -cs.r, precond=kr.build_ras(cs.K, 2, 1), tol=1e-13,
                   restart=400)
    dv = res.x
    du = recover_local(cs, dv).reshape(-1)
    rel_v = np.abs(dv - sol[nu:]).max() / np.abs(sol[nu:]).max()
    rel_u = np.abs(du - sol[:nu]).max() / np.abs(sol[:nu]).max()
    elapsed = time.perf_counter() - t0
    assert rel_v < 1e-9 and rel_u < 1e-9
    assert elapsed < 10.0
    announce(1, f"{physics}: |dv| rel {rel_v:.2e}, |du| rel {rel_u:.2e}, "
                f"{elapsed:.1f}s")


# -- criterion 2: temporal orders ---------------------------------------------

def test_criterion_2_temporal_orders():
    t0 = time.perf_counter()

    def dae():
        return DenseDaeSystem(
            M=[[1.0]], f=lambda u, v, t: u, g=lambda u, v, t: v - u,
            u0=[1.0], n_v=1,
            dfdu=lambda u, v, t: [[1.0]], dfdv=lambda u, v, t: [[0.0]],
            dgdu=lambda u, v, t: [[-1.0]], dgdv=lambda u, v, t: [[1.0]])

    observed = {}
    for scheme, expect in (("bdf1", 1), ("bdf2", 2), ("dirk33", 3)):
        errs = []
        for nsteps in (8, 16, 32, 64, 128):
            u, _ = integrate(dae(), scheme, 1.0 / nsteps, 1.0)
            errs.append(abs(u[0] - math.exp(-1.0)))
        rate = math.log(errs[-2] / errs[-1]) / math.log(2.0)
        observed[scheme] = rate
        assert abs(rate - expect) < 0.15
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    announce(2, "orders " + ", ".join(f"{s}={r:.3f}" for s, r in observed.items())
             + f" ({elapsed:.1f}s)")


# -- criteria 3/4: plate convergence tables -----------------------------------

LINEAR_TABLE = {   # h -> (err_v, err_F) from the reference results
    1: {0.25: (5.90e-3, 3.92e-2), 1 / 6: (2.71e-3, 1.77e-2), 0.125: (1.54e-3, 1.01e-2)},
    2: {0.25: (1.91e-4, 1.56e-3), 1 / 6: (6.19e-5, 2.26e-4), 0.125: (2.60e-5, 9.30e-5)},
    3: {0.25: (1.64e-5, 7.41e-5), 1 / 6: (2.86e-6, 1.06e-5), 0.125: (9.08e-7, 3.23e-6)},
}


@pytest.mark.slow
@pytest.mark.parametrize("k", [1, 2, 3])
def test_criterion_3_linear_plate(k):
    report = reference_run(f"linear_plate_k{k}")
    ov = finest_pair_order(report, "v")
    oF = finest_pair_order(report, "F")
    assert ov >= k + 0.8, f"velocity order {ov:.2f} < {k + 0.8}"
    assert oF >= k + 0.8, f"gradient order {oF:.2f} < {k + 0.8}"
    for h, err_v, err_F in zip(report.hs, report.errors["v"], report.errors["F"]):
        ref_v, ref_F = LINEAR_TABLE[k][min(LINEAR_TABLE[k], key=lambda x: abs(x - h))]
        # hexahedral elements carry more DOFs per h than the reference mesh,
        # so errors land below the table; the bound is one-sided
        assert err_v <= 3.0 * ref_v, f"err_v {err_v:.3e} above 3x table {ref_v:.3e}"
        assert err_F <= 3.0 * ref_F, f"err_F {err_F:.3e} above 3x table {ref_F:.3e}"
    announce(3, f"k={k}: eoc v={ov:.2f}, F={oF:.2f}; magnitudes within 3x of table")


@pytest.mark.slow
@pytest.mark.parametrize("k", [1, 2, 3])
def test_criterion_4_svk_plate(k):
    report = reference_run(f"svk_plate_k{k}")
    ov = finest_pair_order(report, "v")
    oF = finest_pair_order(report, "F")
    assert ov >= k + 0.8, f"velocity order {ov:.2f} < {k + 0.8}"
    assert oF >= k + 0.3, f"gradient order {oF:.2f} < {k + 0.3}"
    newton_max = max(st["newton_max"] for st in report.stats)
    assert newton_max <= 10
    announce(4, f"k={k}: eoc v={ov:.2f}, F={oF:.2f}; Newton max/stage {newton_max}")


# -- criterion 5: Maxwell cavity tables ---------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("k", [1, 2, 3])
def test_criterion_5_maxwell_cavity(k):
    report = reference_run(f"maxwell_cavity_k{k}")
    oe = finest_pair_order(report, "e")
    oh = finest_pair_order(report, "h")
    assert oe >= k + 0.8, f"e order {oe:.2f} < {k + 0.8}"
    assert oh >= k + 0.8, f"h order {oh:.2f} < {k + 0.8}"
    # multiplier: either optimal order or pinned at the solver noise floor
    # (the tensor-product discretization keeps div e at solver precision here,
    # so phi has nothing to transport)
    phi_errs = report.errors["phi"]
    ophi = finest_pair_order(report, "phi")
    phi_ok = (ophi is not None and ophi >= k + 0.8) or max(phi_errs) <= 1e-9
    assert phi_ok, f"phi errors {phi_errs} neither converging nor at noise floor"
    ohc = finest_pair_order(report, "e_hcurl")
    ohh = finest_pair_order(report, "h_hcurl")
    assert ohc >= k - 0.2, f"H(curl) e order {ohc:.2f} < {k - 0.2}"
    assert ohh >= k - 0.2, f"H(curl) h order {ohh:.2f} < {k - 0.2}"
    announce(5, f"k={k}: eoc e={oe:.2f}, h={oh:.2f}, Hcurl=({ohc:.2f},{ohh:.2f}), "
                f"phi max {max(phi_errs):.1e}")


# -- criterion 6: divergence correction ---------------------------------------

@pytest.mark.slow
def test_criterion_6_divergence_correction():
    reference_run("maxwell_divergence_k2")
    reference_run("maxwell_divergence_k2",
                  overrides=(("case.physics", "maxwell-uncorrected"),))
    glm = _read_series(_OUT / "maxwell-glm_k2_h0.125_divergence.csv")
    unc = _read_series(_OUT / "maxwell-uncorrected_k2_h0.125_divergence.csv")
    assert len(glm) == len(unc) and len(glm) > 50
    wins = sum(1 for a, b in zip(glm, unc) if a[1] <= b[1] + 1e-12)
    frac = wins / len(glm)
    assert frac >= 0.95, f"GLM below uncorrected at only {frac:.1%} of steps"
    announce(6, f"GLM divergence <= uncorrected at {frac:.1%} of {len(glm)} steps "
                f"(final {glm[-1][1]:.2e} vs {unc[-1][1]:.2e})")


def _read_series(path):
    rows = Path(path).read_text().strip().split("\n")[1:]
    return [tuple(map(float, r.split(","))) for r in rows]


# -- criterion 7: energy decay -------------------------------------------------

def _zero_elasto_bcs():
    zero_d = BoundaryCondition("dirichlet", lambda x, t: np.zeros(x.shape[:-1] + (3,)))
    zero_n = BoundaryCondition("neumann",
                               lambda x, t, n: np.zeros(x.shape[:-1] + (3,)))
    return {"xmin": zero_d, "xmax": zero_d, "ymin": zero_d, "ymax": zero_d,
            "zmin": zero_n, "zmax": zero_n}


def _bump_velocity(x):
    s = (np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
         * np.cos(np.pi * x[..., 2]))
    return np.stack([0.2 * s, -0.1 * s, 0.3 * s], axis=-1)


@pytest.mark.parametrize("physics", ["linear", "svk", "maxwell"])
def test_criterion_7_energy_decay(physics):
    mat = ElasticMaterial(1.5, 1.0, 1.0)
    energies = []
    if physics == "maxwell":
        case = cavity_case(2, 0.25)
        model = GlmMaxwell(case.mesh, 2, case.material, case.glm, e_inc=None,
                           e0=lambda x: case.exact_e(x, 0.4),
                           h0=lambda x: case.exact_h(x, 0.4))
        monitor = lambda u, v: em_energy(model, u)["total"]
    else:
        mesh = build_structured_box([1.0, 1.0, 0.25], [3, 3, 1])
        cls = SvkElastodynamics if physics == "svk" else LinearElastodynamics
        model = cls(mesh, 2, mat, StabilizationSpec("shear", 2.0),
                    _zero_elasto_bcs(), v0=_bump_velocity)
        monitor = lambda u, v: discrete_energy(model, u, v)["total"]
    system = HdgDaeSystem(model, krylov_opts=KrylovOptions(n_subdomains=2))

    def cb(step, t, u, v, stats):
        energies.append(monitor(u, v))

    integrate(system, "dirk33", 0.02, 0.5, callback=cb, predictor_order=1)
    rel_increases = [
        (energies[i + 1] - energies[i]) / max(abs(energies[i]), 1e-30)
        for i in range(len(energies) - 1)
    ]
    worst = max(rel_increases)
    assert worst <= 1e-8, f"energy increased by rel {worst:.2e}"
    announce(7, f"{physics}: monotone decay over {len(energies) - 1} steps "
                f"(worst step change {worst:.2e})")


# -- criterion 8: solver properties ---------------------------------------------

def _plate_trace_system():
    case = plate_manufactured_case(1, 0.25)
    model = make_plate_model(case, 1)
    system = HdgDaeSystem(model)
    nu = system.n_u
    blocks = system.assemble_local(system.initial_state(), np.zeros(system.n_v),
                                   0.3, 50.0,
                                   np.zeros((model.ctx.n_elements, model.n_loc)))
    cs = condense(blocks)
    rng = np.random.default_rng(5)
    return cs.K, rng.standard_normal(cs.K.n)


def test_criterion_8_solver_properties(rng):
    K, b = _plate_trace_system()

    # exact LU on one subdomain: preconditioned operator is the identity
    P = kr.build_ras(K, 1, 0, subdomain_solver="lu")
    res1 = kr.gmres(K, b, precond=P, tol=1e-8)
    assert res1.iterations == 1

    # BILU(0) exact on a block-tridiagonal matrix
    rows, cols, blocks = [], [], []
    for i in range(9):
        for j in (i - 1, i, i + 1):
            if 0 <= j < 9:
                rows.append(i)
                cols.append(j)
                blk = rng.standard_normal((3, 3)) + (8 * np.eye(3) if i == j else 0)
                blocks.append(blk)
    Kt = kr.BlockCsrMatrix.from_block_coo(9, 3, rows, cols, blocks)
    fac = kr.bilu0_factor(Kt, kr.mdf_order(Kt))
    x = rng.standard_normal(27)
    exact_err = np.abs(kr.bilu0_apply(fac, Kt.matvec(x)) - x).max()
    assert exact_err < 1e-10

    # overlap delta=1 no worse than delta=0 on the plate system with N=4
    it1 = kr.gmres(K, b, precond=kr.build_ras(K, 4, 1), tol=1e-8).iterations
    it0 = kr.gmres(K, b, precond=kr.build_ras(K, 4, 0), tol=1e-8).iterations
    assert it1 <= it0

    # ICGS basis orthogonality through a long unrestarted solve
    res = kr.gmres(K, b, precond=kr.build_ras(K, 4, 1), tol=1e-12, restart=200)
    assert res.orth_loss < 1e-10
    announce(8, f"N=1 LU 1 iter; BILU(0) tridiag err {exact_err:.1e}; "
                f"RAS iters d1={it1} <= d0={it0}; orth loss {res.orth_loss:.1e}")


def test_criterion_8_orthogonality_in_reference_runs():
    # orthogonality collected from whichever reference runs already executed
    checked = 0
    for report in _RUNS.values():
        for st in report.stats:
            assert st["orth_loss"] < 1e-10
            checked += 1
    announce(8, f"ICGS loss < 1e-10 in {checked} recorded refinement runs")


# -- criterion 9: trace-space taxonomy -------------------------------------------

def test_criterion_9_trace_taxonomy():
    meshes = {
        "1x1x1": build_structured_box([1, 1, 1], [1, 1, 1]),
        "2x2x1": build_structured_box([1, 1, 1], [2, 2, 1]),
        "2x2x2": build_structured_box([1, 1, 1], [2, 2, 2]),
        "3x2x1": build_structured_box([1.5, 1, 0.5], [3, 2, 1]),
    }
    for name, mesh in meshes.items():
        for k in (1, 2):
            counts = {v: make_trace_space(mesh, k, 3, v).n_dofs
                      for v in ("hdg", "iedg", "edg")}
            assert counts["hdg"] >= counts["iedg"] >= counts["edg"]
            if mesh.n_elements == 1:
                # no interior faces: IEDG degenerates to HDG
                assert counts["hdg"] == counts["iedg"] > counts["edg"]
            else:
                assert counts["hdg"] > counts["iedg"] > counts["edg"]
    announce(9, "HDG >= IEDG >= EDG on all meshes, equality only when "
                "the interior skeleton is empty")
