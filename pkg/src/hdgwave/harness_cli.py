"""Case configuration, end-to-end drivers, and the command-line interface.

A case file is flat key=value text with section headers (INI style). One run
sweeps the configured refinements, integrates each to the final time, and
produces a convergence report (CSV) plus energy/divergence time series
suitable for external plotting.

Exit codes: 0 success, 2 configuration/validation error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import configparser
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import elastodyn as ed
from . import maxwell_glm as mx
from .dae_time import StepFailure, integrate
from .hdg_core import HdgDaeSystem, KrylovOptions, NewtonOptions

PHYSICS = ("linear-elastodyn", "svk-elastodyn", "maxwell-glm", "maxwell-uncorrected")

_SCHEMA = {
    "case": {
        "physics": str, "variant": str, "degree": int, "refinements": str,
        "dt": str, "t_end": float, "scheme": str, "n_quad": int,
    },
    "material": {
        "lam": float, "mu": float, "rho": float, "alpha": float, "stab": str,
        "eps_r": float, "mu_r": float,
    },
    "glm": {"alpha1": float, "alpha2": float, "alpha3": float, "tau": float,
            "omega": float},
    "solver": {
        "newton_abs_tol": float, "newton_rel_tol": float, "newton_max_iter": int,
        "gmres_restart": int, "gmres_tol": float, "gmres_maxit": int,
        "subdomains": int, "overlap": int, "subdomain_solver": str,
        "predictor_order": int,
    },
    "output": {"report": str, "series": str},
}

_DEFAULTS = {
    "case": {"variant": "hdg", "scheme": "dirk33", "n_quad": 0},
    "material": {"lam": 1.5, "mu": 1.0, "rho": 1.0, "alpha": 2.0, "stab": "shear",
                 "eps_r": 2.0, "mu_r": 1.0},
    "glm": {"alpha1": 1.0, "alpha2": 1.0, "alpha3": 1.0, "tau": 2.0, "omega": 1.0},
    "solver": {"newton_abs_tol": 1e-10, "newton_rel_tol": 1e-8, "newton_max_iter": 20,
               "gmres_restart": 200, "gmres_tol": 1e-8, "gmres_maxit": 2000,
               "subdomains": 1, "overlap": 1, "subdomain_solver": "bilu0",
               "predictor_order": 2},
    "output": {"report": "report.csv", "series": ""},
}


class CaseError(ValueError):
    """Invalid case file or overrides."""


@dataclass
class CaseFile:
    """Validated run configuration."""

    physics: str
    degree: int
    refinements: list
    dts: list
    t_end: float
    variant: str = "hdg"
    scheme: str = "dirk33"
    n_quad: int | None = None
    material: dict = field(default_factory=dict)
    glm: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, overrides=()) -> "CaseFile":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise CaseError(f"cannot read case file {path}")
        for key, value in overrides:
            if "." not in key:
                raise CaseError(f"override {key!r} must be section.key")
            section, opt = key.split(".", 1)
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, opt, value)
        return cls.from_parser(parser)

    @classmethod
    def from_parser(cls, parser) -> "CaseFile":
        values = {s: dict(_DEFAULTS.get(s, {})) for s in _SCHEMA}
        for section in parser.sections():
            if section not in _SCHEMA:
                raise CaseError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise CaseError(f"unknown key {key!r} in section [{section}]")
                typ = _SCHEMA[section][key]
                try:
                    values[section][key] = typ(raw) if typ is not str else raw
                except ValueError as exc:
                    raise CaseError(f"bad value for {section}.{key}: {raw!r}") from exc
        case = values["case"]
        for req in ("physics", "degree", "refinements", "dt", "t_end"):
            if req not in case:
                raise CaseError(f"missing required key case.{req}")
        if case["physics"] not in PHYSICS:
            raise CaseError(f"unknown physics {case['physics']!r}")
        if case["degree"] < 1:
            raise CaseError("polynomial degree must be >= 1")
        refinements = _parse_floats(case["refinements"])
        if not refinements:
            raise CaseError("empty refinement list")
        if any(h <= 0 for h in refinements):
            raise CaseError("refinements must be positive")
        dts = _parse_floats(case["dt"])
        if len(dts) == 1:
            dts = dts * len(refinements)
        if len(dts) != len(refinements):
            raise CaseError("dt must be a single value or one per refinement")
        if case["t_end"] <= 0:
            raise CaseError("t_end must be positive")
        return cls(
            physics=case["physics"], degree=case["degree"], refinements=refinements,
            dts=dts, t_end=case["t_end"], variant=case.get("variant", "hdg"),
            scheme=case.get("scheme", "dirk33"),
            n_quad=case["n_quad"] if case.get("n_quad") else None,
            material=values["material"], glm=values["glm"], solver=values["solver"],
            output=values["output"],
        )


def _parse_floats(text: str) -> list:
    out = []
    for tok in str(text).replace(",", " ").split():
        if "/" in tok:
            num, den = tok.split("/")
            out.append(float(num) / float(den))
        else:
            out.append(float(tok))
    return out


def eoc(errors, hs) -> list:
    """Two-point estimated orders of convergence; first entry is None.

    Non-positive errors yield None entries (flagged, not fatal)."""
    errors, hs = list(errors), list(hs)
    if len(errors) != len(hs) or len(errors) < 1:
        raise ValueError("errors and hs must have equal length >= 1")
    out = [None]
    for i in range(1, len(errors)):
        if errors[i - 1] <= 0 or errors[i] <= 0 or hs[i - 1] == hs[i]:
            out.append(None)
        else:
            out.append(float(np.log(errors[i - 1] / errors[i])
                             / np.log(hs[i - 1] / hs[i])))
    return out


@dataclass
class ConvergenceReport:
    """Per-refinement errors with estimated orders and solver statistics."""

    physics: str
    degree: int
    fields: list
    hs: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)       # field -> list
    stats: list = field(default_factory=list)        # per refinement dict
    walltimes: list = field(default_factory=list)

    def orders(self) -> dict:
        return {f: eoc(self.errors[f], self.hs) for f in self.fields}

    def to_csv(self) -> str:
        # wall times stay out of the CSV so repeated runs are byte-identical
        cols = ["h"]
        for f in self.fields:
            cols += [f"err_{f}", f"eoc_{f}"]
        cols += ["newton_total", "gmres_total", "gmres_max"]
        lines = [",".join(cols)]
        orders = self.orders()
        for i, h in enumerate(self.hs):
            row = [_fmt(h)]
            for f in self.fields:
                row.append(_fmt(self.errors[f][i]))
                o = orders[f][i]
                row.append("" if o is None else _fmt(o))
            st = self.stats[i]
            row += [str(st["newton_total"]), str(st["gmres_total"]),
                    str(st["gmres_max"])]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return f"{x:.6g}"


# ---------------------------------------------------------------------------
# physics adapters

def _build_elasto(case: CaseFile, h: float):
    mat = ed.ElasticMaterial(lam=case.material["lam"], mu=case.material["mu"],
                             rho=case.material["rho"])
    nonlinear = case.physics == "svk-elastodyn"
    plate = ed.plate_manufactured_case(
        case.degree, h, nonlinear=nonlinear, material=mat,
        alpha=case.material["alpha"])
    if case.material["stab"] != "shear":
        plate.stab = ed.StabilizationSpec(mode=case.material["stab"],
                                          alpha=case.material["alpha"])
    model = ed.make_plate_model(plate, case.degree, n_quad=case.n_quad)
    return model, plate


def _build_maxwell(case: CaseFile, h: float):
    glm = mx.GlmParameters(alpha1=case.glm["alpha1"], alpha2=case.glm["alpha2"],
                           alpha3=case.glm["alpha3"], tau=case.glm["tau"])
    cav = mx.cavity_case(case.degree, h, omega=case.glm["omega"],
                         eps_r=case.material["eps_r"], mu_r=case.material["mu_r"],
                         glm=glm)
    corrected = case.physics == "maxwell-glm"
    model = mx.make_cavity_model(cav, case.degree, corrected=corrected,
                                 n_quad=case.n_quad)
    return model, cav


def _solver_options(case: CaseFile):
    s = case.solver
    newton = NewtonOptions(abs_tol=s["newton_abs_tol"], rel_tol=s["newton_rel_tol"],
                           max_iter=s["newton_max_iter"])
    krylov = KrylovOptions(restart=s["gmres_restart"], tol=s["gmres_tol"],
                           maxit=s["gmres_maxit"], n_subdomains=s["subdomains"],
                           overlap=s["overlap"],
                           subdomain_solver=s["subdomain_solver"])
    return newton, krylov


def elasto_errors(model, plate, u, t) -> dict:
    geom = model.ctx.geom
    phi = model.ctx.basis.phi
    F, vel = model.split_state(u)
    vq = np.einsum("qb,ebi->eqi", phi, vel)
    Fq = np.einsum("qb,ebij->eqij", phi, F)
    ve = plate.exact_v(geom.xq, t)
    Fe = plate.exact_F(geom.xq, t)
    err_v = np.sqrt((((vq - ve) ** 2).sum(-1) * geom.wdet).sum())
    err_F = np.sqrt((((Fq - Fe) ** 2).sum((-1, -2)) * geom.wdet).sum())
    return {"v": float(err_v), "F": float(err_F)}


def maxwell_errors(model, cav, u, t) -> dict:
    geom = model.ctx.geom
    phi = model.ctx.basis.phi
    e, h, ph = model.split_state(u)
    eq = np.einsum("qb,ebi->eqi", phi, e)
    hq = np.einsum("qb,ebi->eqi", phi, h)
    ee = cav.exact_e(geom.xq, t)
    he = cav.exact_h(geom.xq, t)
    err_e = np.sqrt((((eq - ee) ** 2).sum(-1) * geom.wdet).sum())
    err_h = np.sqrt((((hq - he) ** 2).sum(-1) * geom.wdet).sum())
    # broken H(curl) error: field plus elementwise curl
    eps = 1e-6

    def curl_exact(fn):
        out = np.zeros_like(geom.xq)
        for j in range(3):
            dx = np.zeros(3)
            dx[j] = eps
            d = (fn(geom.xq + dx, t) - fn(geom.xq - dx, t)) / (2 * eps)
            out[..., (j + 2) % 3] += d[..., (j + 1) % 3]
            out[..., (j + 1) % 3] -= d[..., (j + 2) % 3]
        return out

    ce = mx.curl_values(model, e) - curl_exact(cav.exact_e)
    ch = mx.curl_values(model, h) - curl_exact(cav.exact_h)
    curl_e = ((ce ** 2).sum(-1) * geom.wdet).sum()
    curl_h = ((ch ** 2).sum(-1) * geom.wdet).sum()
    out = {
        "e": float(err_e), "h": float(err_h),
        "e_hcurl": float(np.sqrt(err_e**2 + curl_e)),
        "h_hcurl": float(np.sqrt(err_h**2 + curl_h)),
    }
    if model.corrected:
        pq = np.einsum("qb,eb->eq", phi, ph)
        out["phi"] = float(np.sqrt((pq ** 2 * geom.wdet).sum()))
    return out


def run_case(case: CaseFile, out_dir=".", verbose: bool = False,
             progress=None) -> ConvergenceReport:
    """Run every refinement of a case and emit its report and time series."""
    is_maxwell = case.physics.startswith("maxwell")
    fields = (["e", "h", "phi", "e_hcurl", "h_hcurl"]
              if case.physics == "maxwell-glm"
              else ["e", "h", "e_hcurl", "h_hcurl"] if is_maxwell
              else ["v", "F"])
    report = ConvergenceReport(physics=case.physics, degree=case.degree,
                               fields=fields)
    report.errors = {f: [] for f in fields}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    newton, krylov = _solver_options(case)

    for h, dt in zip(case.refinements, case.dts):
        t0 = time.perf_counter()
        model, pcase = (_build_maxwell(case, h) if is_maxwell
                        else _build_elasto(case, h))
        system = HdgDaeSystem(model, newton=newton, krylov_opts=krylov)
        series: dict[str, list] = {"energy": []}
        if is_maxwell:
            series["divergence"] = []
        stats_acc = {"newton_total": 0, "gmres_total": 0, "gmres_max": 0,
                     "newton_max": 0, "orth_loss": 0.0}

        def callback(step, t, u, v, stage_stats):
            for st in stage_stats:
                stats_acc["newton_total"] += st.newton_iters
                stats_acc["gmres_total"] += st.gmres_iters
                stats_acc["gmres_max"] = max(stats_acc["gmres_max"], st.gmres_iters)
                stats_acc["newton_max"] = max(stats_acc["newton_max"], st.newton_iters)
                stats_acc["orth_loss"] = max(stats_acc["orth_loss"], st.orth_loss)
            if is_maxwell:
                series["energy"].append((t, mx.em_energy(model, u)["total"]))
                series["divergence"].append((t, mx.divergence_error(model, u)))
            else:
                series["energy"].append(
                    (t, ed.discrete_energy(model, u, v)["total"]))

        try:
            u, v = integrate(system, case.scheme, dt, case.t_end,
                             predictor_order=case.solver["predictor_order"],
                             callback=callback)
        except StepFailure as exc:
            raise StepFailure(
                f"{case.physics} h={h:g} dt={dt:g}: {exc}", exc.residuals)
        errs = (maxwell_errors(model, pcase, u, case.t_end) if is_maxwell
                else elasto_errors(model, pcase, u, case.t_end))
        report.hs.append(h)
        for f in fields:
            report.errors[f].append(errs[f])
        report.stats.append(dict(stats_acc))
        report.walltimes.append(time.perf_counter() - t0)

        tag = f"{case.physics}_k{case.degree}_h{_fmt(h)}"
        for name, pts in series.items():
            emit_series(pts, out_dir / f"{tag}_{name}.csv")
        if verbose:
            line = f"h={h:g}: " + "  ".join(
                f"{f}={errs[f]:.4e}" for f in fields)
            line += f"  [{report.walltimes[-1]:.1f} s]"
            print(line, file=sys.stderr)
        if progress is not None:
            progress(h, errs)

    emit_report(report, out_dir / (case.output.get("report") or "report.csv"))
    return report


def emit_report(report: ConvergenceReport, path) -> None:
    Path(path).write_text(report.to_csv())


def emit_series(points, path) -> None:
    lines = ["time,value"]
    lines += [f"{_fmt(t)},{v:.12e}" for t, v in points]
    Path(path).write_text("\n".join(lines) + "\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="hdgwave",
                                 description="Hybridized DG wave-propagation runs")
    sub = ap.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run a case file")
    runp.add_argument("casefile")
    runp.add_argument("--override", action="append", default=[],
                      metavar="SECTION.KEY=VALUE")
    runp.add_argument("--out", default=".", help="output directory")
    runp.add_argument("--threads", type=int, default=1,
                      help="worker count; also the default subdomain count")
    runp.add_argument("--verbose", action="store_true")
    args = ap.parse_args(argv)

    try:
        overrides = []
        for ov in args.override:
            if "=" not in ov:
                raise CaseError(f"override {ov!r} must be SECTION.KEY=VALUE")
            key, value = ov.split("=", 1)
            overrides.append((key.strip(), value.strip()))
        case = CaseFile.load(args.casefile, overrides)
        if not any(k == "solver.subdomains" for k, _ in overrides):
            case.solver["subdomains"] = max(case.solver["subdomains"], args.threads)
    except CaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        report = run_case(case, out_dir=args.out, verbose=args.verbose)
    except StepFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    orders = report.orders()
    for f in report.fields:
        pairs = " ".join(
            f"{e:.3e}({'-' if o is None else f'{o:.2f}'})"
            for e, o in zip(report.errors[f], orders[f]))
        print(f"{f}: {pairs}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
