"""Structural verification suite: the identities behind the method, measured.

Each check evaluates a residual with a pinned tolerance and reports one
record; the suite passes only if every record passes. Randomized checks are
seeded and iterate in a fixed order, so a report is bit-reproducible for a
given seed.
"""

import numpy as np
from scipy import linalg as dla

from .analysis import poly_consistency_case
from .local_ops import HHOSpace, assemble_bilinear
from .mesh import (
    build_unit_square,
    check_matching,
    read_mesh_file,
    refine_red,
    shape_parameter,
)
from .smoothing import (
    Smoother,
    jump_matrix,
    lagrange_interpolant,
    moment_residuals,
    orthogonality_residual,
)
from .system import LoadFunctional, assemble, rhs_smoothed, solve, solve_full

TOLERANCES = {
    "mesh-matching": 0.0,
    "mesh-area": 1e-12,
    "mesh-refine-gamma": 1e-12,
    "mesh-refine-h": 1e-13,
    "reconstruction-identity": 1e-10,
    "kernel-stab": 1e-18,
    "kernel-reconstruction": 1e-10,
    "coercivity-min-eig": -1e-12,       # passes when residual > tolerance
    "coercivity-stability": 0.2,
    "moment-cell": 1e-11,
    "moment-face": 1e-11,
    "conformity": 1e-10,
    "orthogonality": 1e-10,
    "condensation": 1e-10,
    "discrete-consistency": 1e-9,
}

GREATER_IS_PASS = {"coercivity-min-eig"}


def _sine(x):
    return np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])


def _sine_grad(x):
    return np.stack([
        np.pi * np.cos(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]),
        np.pi * np.sin(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1]),
    ], axis=-1)


class _Report:
    def __init__(self, seed):
        self.checks = []
        self.seed = seed

    def add(self, name, residual, degree=None, resolution=None, variant=None):
        tol = TOLERANCES[name]
        residual = float(residual)
        passed = residual > tol if name in GREATER_IS_PASS else residual <= tol
        self.checks.append({
            "name": name,
            "degree": degree,
            "resolution": resolution,
            "variant": variant,
            "residual": residual,
            "tolerance": tol,
            "passed": bool(passed),
        })

    def to_dict(self):
        return {
            "seed": self.seed,
            "passed": all(c["passed"] for c in self.checks),
            "checks": self.checks,
        }


def _mesh_checks(report, resolutions):
    for n in resolutions:
        mesh = build_unit_square(n)
        report.add("mesh-matching", len(check_matching(mesh)), resolution=n)
        report.add("mesh-area", abs(mesh.volumes.sum() - 1.0), resolution=n)
        refined = refine_red(mesh)
        report.add(
            "mesh-refine-gamma",
            abs(shape_parameter(refined) - shape_parameter(mesh)),
            resolution=n,
        )
        report.add(
            "mesh-refine-h",
            abs(refined.h_cell.max() - 0.5 * mesh.h_cell.max()),
            resolution=n,
        )


def _external_mesh_checks(report, mesh_path):
    mesh = read_mesh_file(mesh_path)
    report.add("mesh-matching", len(check_matching(mesh)), variant=str(mesh_path))


def _space_checks(report, space, n, rng, random_fields, variants):
    p = space.p
    mesh = space.mesh

    recon = space.reconstruct(space.interpolate(_sine))
    proj = space.elliptic_project(_sine, _sine_grad)
    scale = np.abs(proj.coeffs).max()
    report.add(
        "reconstruction-identity",
        np.abs(recon.coeffs - proj.coeffs).max() / scale,
        degree=p, resolution=n,
    )

    hat = lagrange_interpolant(
        mesh, p + 1, lambda x: (1 - np.abs(2 * x[..., 0] - 1))
        * (1 - np.abs(2 * x[..., 1] - 1))
    )
    i_hat = space.interpolate(hat)
    report.add("kernel-stab", space.stab_form(i_hat, i_hat), degree=p, resolution=n)
    r_hat = space.reconstruct(i_hat)
    report.add(
        "kernel-reconstruction",
        np.abs(r_hat.coeffs - hat.coeffs).max() / max(np.abs(hat.coeffs).max(), 1.0),
        degree=p, resolution=n,
    )

    for variant in variants:
        smoother = Smoother(space, averaging=variant)
        worst_cell = worst_face = 0.0
        for _ in range(random_fields):
            field = space.random_field(rng)
            cell_res, face_res = moment_residuals(smoother, field)
            worst_cell = max(worst_cell, cell_res)
            worst_face = max(worst_face, face_res)
        report.add("moment-cell", worst_cell, degree=p, resolution=n, variant=variant)
        report.add("moment-face", worst_face, degree=p, resolution=n, variant=variant)

        jumps = jump_matrix(mesh, smoother.degree) @ smoother.matrix
        conf = np.abs(jumps.data).max() if jumps.nnz else 0.0
        report.add("conformity", conf, degree=p, resolution=n, variant=variant)
        report.add(
            "orthogonality", orthogonality_residual(space, smoother),
            degree=p, resolution=n, variant=variant,
        )

    # condensation exactness on a smooth load
    system = assemble(space)
    smoother = Smoother(space)
    load = LoadFunctional(f0=lambda x: 2 * np.pi ** 2 * _sine(x))
    rhs = rhs_smoothed(space, smoother, load)
    u_cond = space.vector_from_field(solve(system, rhs))
    u_full = space.vector_from_field(solve_full(system, rhs))
    report.add(
        "condensation", np.abs(u_cond - u_full).max(), degree=p, resolution=n
    )

    # discrete consistency: piecewise-polynomial solution, divergence load
    case = poly_consistency_case(p, base_n=n)
    c_space = HHOSpace(case.mesh_for(0), p)
    c_sys = assemble(c_space)
    c_sm = Smoother(c_space)
    u_disc = solve(c_sys, rhs_smoothed(c_space, c_sm, case.load))
    i_u = c_space.interpolate(case.u)
    resid = max(
        np.abs(u_disc.cell_coeffs - i_u.cell_coeffs).max(),
        np.abs(u_disc.face_coeffs - i_u.face_coeffs).max(),
    )
    report.add("discrete-consistency", resid, degree=p, resolution=n)

    return float(
        dla.eigh(
            assemble_bilinear(space, space.A_loc).toarray(),
            space.hho_norm_matrix().toarray(),
            eigvals_only=True,
            subset_by_index=[0, 0],
        )[0]
    )


def run_verification(degrees=(0, 1, 2), resolutions=(2, 4, 8), seed=20180608,
                     random_fields=100, variants=("mean", "scott-zhang"),
                     mesh_path=None):
    """Run the full structural suite; returns a JSON-serializable report."""
    report = _Report(seed)
    if mesh_path is not None:
        _external_mesh_checks(report, mesh_path)
    _mesh_checks(report, resolutions)

    for p in degrees:
        rng = np.random.default_rng(seed + p)
        eigs = []
        for n in resolutions:
            space = HHOSpace(build_unit_square(n), p)
            lam = _space_checks(report, space, n, rng, random_fields, variants)
            eigs.append(lam)
            report.add("coercivity-min-eig", lam, degree=p, resolution=n)
        spread = (max(eigs) - min(eigs)) / max(eigs)
        report.add("coercivity-stability", spread, degree=p)
    return report.to_dict()
