"""Measure temporal-error sensitivity for the acceptance cases.

For each (physics, k) the finest-level error is computed at a few time steps;
the dt-to-dt/2 differences expose the temporal contribution so the shipped
case files can pin steps where spatial error dominates.
"""
import json
import sys
import time

sys.path.insert(0, "src")

import numpy as np

from hdgwave import elastodyn as ed
from hdgwave import maxwell_glm as mx
from hdgwave.dae_time import integrate
from hdgwave.harness_cli import elasto_errors, maxwell_errors
from hdgwave.hdg_core import HdgDaeSystem, KrylovOptions


def run_elasto(k, h, dt, nonlinear):
    case = ed.plate_manufactured_case(k, h, nonlinear=nonlinear)
    model = ed.make_plate_model(case, k)
    sys_ = HdgDaeSystem(model, krylov_opts=KrylovOptions(n_subdomains=2))
    t0 = time.time()
    u, v = integrate(sys_, "dirk33", dt, 1.0, predictor_order=2)
    errs = elasto_errors(model, case, u, 1.0)
    errs["walltime"] = time.time() - t0
    return errs


def run_maxwell(k, h, dt):
    case = mx.cavity_case(k, h)
    model = mx.make_cavity_model(case, k)
    sys_ = HdgDaeSystem(model, krylov_opts=KrylovOptions(n_subdomains=2))
    t0 = time.time()
    u, v = integrate(sys_, "dirk33", dt, 1.0, predictor_order=2)
    errs = maxwell_errors(model, case, u, 1.0)
    errs["walltime"] = time.time() - t0
    return errs


def main():
    out = {}
    jobs = [
        ("linear", 2, 0.25, [0.02, 0.01, 0.005]),
        ("linear", 3, 0.25, [0.01, 0.005, 0.0025]),
        ("maxwell", 2, 0.25, [0.02, 0.01, 0.005]),
        ("maxwell", 3, 0.25, [0.01, 0.005, 0.0025]),
        ("svk", 2, 0.25, [0.02, 0.01, 0.005]),
        ("svk", 3, 0.25, [0.02, 0.01, 0.005]),
    ]
    for phys, k, h, dts in jobs:
        for dt in dts:
            key = f"{phys}_k{k}_h{h}_dt{dt}"
            try:
                if phys == "maxwell":
                    errs = run_maxwell(k, h, dt)
                else:
                    errs = run_elasto(k, h, dt, phys == "svk")
            except Exception as exc:           # keep sweeping on failure
                errs = {"error": str(exc)}
            out[key] = errs
            print(key, errs, flush=True)
            with open("/tmp/calibration.json", "w") as fh:
                json.dump(out, fh, indent=1)


if __name__ == "__main__":
    main()
