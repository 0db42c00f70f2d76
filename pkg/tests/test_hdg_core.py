import numpy as np
import pytest

from hdgwave import krylov as kr
from hdgwave.dae_time import StepFailure, integrate
from hdgwave.elastodyn import make_plate_model, plate_manufactured_case
from hdgwave.hdg_core import (
    HdgDaeSystem,
    KrylovOptions,
    LocalBlocks,
    NewtonOptions,
    condense,
    monolithic_dense,
    recover_local,
)


@pytest.fixture(scope="module")
def linear_system():
    case = plate_manufactured_case(1, 0.5)
    model = make_plate_model(case, 1)
    return HdgDaeSystem(model, krylov_opts=KrylovOptions(n_subdomains=2, tol=1e-12))


def random_blocks(system, rng, lam=10.0, t=0.3):
    nu, nv = system.n_u, system.n_v
    u = 0.05 * rng.standard_normal(nu)
    v = 0.05 * rng.standard_normal(nv)
    rhist = 0.01 * rng.standard_normal(nu).reshape(
        system.ctx.n_elements, system.model.n_loc)
    return system.assemble_local(u, v, t, lam, rhist)


def test_condense_b_c_zero_reduces_to_d(linear_system, rng):
    blocks = random_blocks(linear_system, rng)
    z = LocalBlocks(A=blocks.A, B=np.zeros_like(blocks.B),
                    C=np.zeros_like(blocks.C), D=blocks.D,
                    h=blocks.h, g=blocks.g, layout=blocks.layout)
    cs = condense(z)
    K_direct = blocks.layout.scatter_matrix(blocks.D)
    assert np.abs(cs.K.to_dense() - K_direct.to_dense()).max() < 1e-14
    assert np.abs(cs.r - blocks.layout.scatter_vector(blocks.g)).max() < 1e-14


def test_condensed_matrix_and_residual_identities(linear_system, rng):
    blocks = random_blocks(linear_system, rng)
    cs = condense(blocks)
    A, B, C, D, h, g = monolithic_dense(blocks)
    K_ref = D - C @ np.linalg.solve(A, B)
    r_ref = g - C @ np.linalg.solve(A, h)
    assert np.abs(cs.K.to_dense() - K_ref).max() < 1e-12 * max(1, np.abs(K_ref).max())
    assert np.abs(cs.r - r_ref).max() < 1e-12 * max(1, np.abs(r_ref).max())


def test_condensed_vs_monolithic_solution(linear_system, rng):
    blocks = random_blocks(linear_system, rng)
    A, B, C, D, h, g = monolithic_dense(blocks)
    nu = len(h)
    sol = np.linalg.solve(np.block([[A, B], [C, D]]), -np.concatenate([h, g]))
    cs = condense(blocks)
    res = kr.gmres(cs.K, -cs.r, precond=kr.build_ras(cs.K, 2, 1),
                   tol=1e-13, restart=400)
    dv = res.x
    du = recover_local(cs, dv).reshape(-1)
    assert np.abs(dv - sol[nu:]).max() / np.abs(sol[nu:]).max() < 1e-9
    assert np.abs(du - sol[:nu]).max() / np.abs(sol[:nu]).max() < 1e-9


def test_recover_zero(linear_system, rng):
    blocks = random_blocks(linear_system, rng)
    blocks = LocalBlocks(A=blocks.A, B=blocks.B, C=blocks.C, D=blocks.D,
                         h=np.zeros_like(blocks.h), g=blocks.g,
                         layout=blocks.layout)
    cs = condense(blocks)
    du = recover_local(cs, np.zeros(linear_system.n_v))
    assert np.abs(du).max() == 0.0


def test_trace_perturbation_locality(linear_system, rng):
    """Perturbing one face's trace DOFs changes du only in adjacent elements."""
    blocks = random_blocks(linear_system, rng)
    cs = condense(blocks)
    mesh = linear_system.ctx.mesh
    trace = linear_system.ctx.trace
    f = int(mesh.interior_faces[0])
    dv = np.zeros(linear_system.n_v)
    dv[trace.face_dofs[f]] = 1.0
    du = recover_local(cs, dv) - recover_local(cs, np.zeros_like(dv))
    touched = set(np.flatnonzero(np.abs(du).max(axis=1) > 1e-14).tolist())
    adjacent = set(int(e) for e in mesh.face_elems[f] if e >= 0)
    assert touched <= adjacent


def test_trace_sparsity_locality(linear_system, rng):
    """K rows couple only faces sharing an element."""
    blocks = random_blocks(linear_system, rng)
    cs = condense(blocks)
    mesh = linear_system.ctx.mesh
    for fi in range(mesh.n_faces):
        cols = set(map(int, cs.K.row_indices(fi)))
        allowed = set()
        for e in mesh.face_elems[fi]:
            if e >= 0:
                allowed.update(int(f) for f in mesh.elem_faces[e])
        assert cols <= allowed


def test_newton_linear_single_iteration(linear_system):
    nu = linear_system.n_u
    u, v, stats = linear_system.solve_stage(20.0, 0.4, np.zeros(nu), np.zeros(nu), None)
    assert stats.newton_iters == 1
    assert stats.residual_history[-1] < 1e-10


def test_newton_exact_guess_immediate(linear_system):
    nu = linear_system.n_u
    u, v, _ = linear_system.solve_stage(20.0, 0.4, np.zeros(nu), np.zeros(nu), None)
    u2, v2, stats = linear_system.solve_stage(20.0, 0.4, np.zeros(nu), u, v)
    assert stats.newton_iters == 0
    assert np.array_equal(u2, u)


def test_newton_nonconvergence_reports():
    case = plate_manufactured_case(1, 0.5, nonlinear=True)
    model = make_plate_model(case, 1)
    system = HdgDaeSystem(model, newton=NewtonOptions(max_iter=0))
    nu = system.n_u
    with pytest.raises(StepFailure) as err:
        system.solve_stage(10.0, 0.5, np.zeros(nu), np.zeros(nu), None)
    assert err.value.residuals


def test_svk_newton_quadratic_convergence():
    """Small-step SVK stage: few Newton iterations, quadratic tail."""
    case = plate_manufactured_case(1, 0.5, nonlinear=True)
    model = make_plate_model(case, 1)
    system = HdgDaeSystem(model, krylov_opts=KrylovOptions(tol=1e-12),
                          newton=NewtonOptions(abs_tol=1e-12))
    u0 = system.initial_state()
    v0 = system.solve_algebraic(u0, 0.0, None)
    lam = 1.0 / 0.4358665215 / 0.02
    u, v, stats = system.solve_stage(lam, 0.02, -lam * system.mass_action(u0), u0, v0)
    hist = stats.residual_history
    assert stats.newton_iters <= 5
    # quadratic reduction on the final drops: log r_{k+1} / log r_k ~ 2
    if len(hist) >= 3 and 1e-12 < hist[-2] < 1.0:
        rate = np.log(hist[-1]) / np.log(hist[-2])
        assert 1.5 < rate < 2.5


def test_energy_decay_linear_homogeneous():
    from hdgwave.elastodyn import (
        BoundaryCondition,
        ElasticMaterial,
        LinearElastodynamics,
        StabilizationSpec,
        discrete_energy,
    )
    from hdgwave.mesh import build_structured_box

    mesh = build_structured_box([1.0, 1.0, 1.0], [2, 2, 2])
    zero = BoundaryCondition("dirichlet", lambda x, t: np.zeros(x.shape[:-1] + (3,)))
    v0 = lambda x: np.stack([
        np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]),
        0 * x[..., 0],
        np.sin(np.pi * x[..., 2]) * np.sin(np.pi * x[..., 0]),
    ], axis=-1)
    model = LinearElastodynamics(
        mesh, 1, ElasticMaterial(1.5, 1.0, 1.0), StabilizationSpec("shear", 1.0),
        {t: zero for t in ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")}, v0=v0)
    system = HdgDaeSystem(model, krylov_opts=KrylovOptions(n_subdomains=2))
    energies = []

    def cb(step, t, u, v, stats):
        energies.append(discrete_energy(model, u, v)["total"])

    integrate(system, "dirk33", 0.05, 0.5, callback=cb)
    assert all(energies[i + 1] <= energies[i] * (1 + 1e-8)
               for i in range(len(energies) - 1))
    jd = discrete_energy(model, system.initial_state(),
                         np.zeros(system.n_v))["jump_dissipation"]
    assert jd >= 0.0
