"""Error measurement, manufactured problems, and convergence studies.

Error quadrature uses degree 2(p+2)+4 rules so that transcendental exact
solutions do not contaminate the measured orders. The reported H1 quantity
combines the broken seminorm error with the stabilization seminorm (the
left-hand side of the energy estimate); the quasi-optimality ratio divides it
by the elliptic-projection best error, which is a true lower bound.
"""

import json

import numpy as np

from .local_ops import HHOSpace
from .mesh import build_lshape, build_unit_square
from .polyquad import cell_basis_gradients, cell_basis_values, cell_quadrature, quad_for_degree
from .smoothing import Smoother, lagrange_interpolant
from .system import LoadFunctional, assemble, rhs_classical, rhs_smoothed, solve

REPORT_COLUMNS = [
    "level", "h", "e_H1", "e_stab", "e_L2", "e_super",
    "best_H1", "ratio", "eoc_H1", "eoc_L2",
]


def _error_rule(p):
    return quad_for_degree(2, 2 * (p + 2) + 4)


def error_h1_broken(space, grad_u, field):
    """(broken H1 seminorm error of the reconstruction, sqrt of stab form)."""
    recon = space.reconstruct(field)
    pts, w = cell_quadrature(space.mesh, _error_rule(space.p))
    diff = np.asarray(grad_u(pts), dtype=float) - recon.gradients_at(pts)
    seminorm = float(np.sqrt(np.einsum("tq,tqd->", w, diff ** 2)))
    stab = float(np.sqrt(max(space.stab_form(field, field), 0.0)))
    return seminorm, stab


def error_l2(space, u, field):
    """L2 error of the reconstruction."""
    recon = space.reconstruct(field)
    pts, w = cell_quadrature(space.mesh, _error_rule(space.p))
    diff = np.asarray(u(pts), dtype=float) - recon.values_at(pts)
    return float(np.sqrt(np.einsum("tq,tq->", w, diff ** 2)))


def supercloseness(space, u, field):
    """||U_M - Pi_M u||: the cell component against the L2 projection of u."""
    proj = space.project_cell(u)
    diff = field.cell_coeffs - proj.coeffs
    return float(np.sqrt(np.einsum("ti,tij,tj->", diff, space.mass_p, diff)))


def best_error_h1(space, u, grad_u):
    """Broken H1 best error: the elliptic projection realizes the cell infima."""
    proj = space.elliptic_project(u, grad_u)
    pts, w = cell_quadrature(space.mesh, _error_rule(space.p))
    diff = np.asarray(grad_u(pts), dtype=float) - proj.gradients_at(pts)
    return float(np.sqrt(np.einsum("tq,tqd->", w, diff ** 2)))


def eoc(errors, hs):
    """Empirical orders log(e_i/e_{i+1}) / log(h_i/h_{i+1}); length len-1."""
    errors = np.asarray(errors, dtype=float)
    hs = np.asarray(hs, dtype=float)
    return list(np.log(errors[:-1] / errors[1:]) / np.log(hs[:-1] / hs[1:]))


class PiecewisePolyFunction:
    """Evaluate a broken polynomial anywhere via point location on its mesh.

    Intended for mesh-aligned exact solutions: points are assigned the first
    cell whose closure contains them, so values are single-valued for
    continuous polynomials and gradients pick a deterministic side on edges.
    """

    def __init__(self, bp):
        self.bp = bp
        self.mesh = bp.mesh

    def locate(self, points):
        pts = points.reshape(-1, 2)
        out = np.full(len(pts), -1, dtype=np.int64)
        remaining = np.arange(len(pts))
        for k in range(self.mesh.num_cells):
            if not len(remaining):
                break
            lam = self.mesh.barycentric_coordinates(
                np.full(len(remaining), k), pts[remaining]
            )
            inside = np.all(lam >= -1e-12, axis=1)
            out[remaining[inside]] = k
            remaining = remaining[~inside]
        if len(remaining):
            raise ValueError("point outside the mesh of the piecewise polynomial")
        return out

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        cells = self.locate(points)
        flat = points.reshape(-1, 2)[:, None, :]
        vals = cell_basis_values(self.mesh, self.bp.degree, flat, cells=cells)
        out = np.einsum("pqi,pi->pq", vals, self.bp.coeffs[cells])[:, 0]
        return out.reshape(points.shape[:-1])

    def gradient(self, points):
        points = np.asarray(points, dtype=float)
        cells = self.locate(points)
        flat = points.reshape(-1, 2)[:, None, :]
        grads = cell_basis_gradients(self.mesh, self.bp.degree, flat, cells=cells)
        out = np.einsum("pqid,pi->pqd", grads, self.bp.coeffs[cells])[:, 0]
        return out.reshape(points.shape)


class ManufacturedCase:
    """Exact solution, load, mesh family and expected rates for one problem.

    `level_kind` is 'resolution' (level = grid parameter n) or 'refinement'
    (level = number of red refinements of a fixed base mesh).
    """

    def __init__(self, name, u, grad_u, load, mesh_for, regularity,
                 h1_rate, l2_rate, level_kind="resolution", level_check=None):
        self.name = name
        self.u = u
        self.grad_u = grad_u
        self.load = load
        self.mesh_for = mesh_for
        self.regularity = regularity
        self._h1_rate = h1_rate
        self._l2_rate = l2_rate
        self.level_kind = level_kind
        self.level_check = level_check

    def expected_h1_rate(self, p):
        return self._h1_rate(p)

    def expected_l2_rate(self, p):
        return self._l2_rate(p)

    def validate(self, seed=0):
        """Check the load/solution consistency at sample points."""
        rng = np.random.default_rng(seed)
        pts = self._sample_points(rng)
        if self.load.g is not None:
            got = np.asarray(self.load.g(pts))
            want = np.asarray(self.grad_u(pts))
            if np.abs(got - want).max() > 1e-10 * max(1.0, np.abs(want).max()):
                raise AssertionError(f"{self.name}: g does not match grad u")
        if self.load.f0 is not None and self.load.g is None:
            # finite-difference Laplacian oracle
            h = 1e-4
            lap = -4.0 * self.u(pts)
            for shift in ([h, 0], [-h, 0], [0, h], [0, -h]):
                lap += self.u(pts + np.asarray(shift))
            lap /= h ** 2
            f0 = np.asarray(self.load.f0(pts))
            scale = max(1.0, np.abs(f0).max())
            if np.abs(lap + f0).max() > 1e-4 * scale:
                raise AssertionError(f"{self.name}: f0 does not match -lap u")
        return True

    def _sample_points(self, rng):
        if self.name == "corner-singular":
            pts = rng.uniform(0.1, 0.6, size=(40, 2))
            pts[: 20, 0] *= -1.0  # keep inside the L, away from the corner
            return pts
        pts = rng.uniform(0.06, 0.94, size=(40, 2))
        if self.name == "kink-aligned":
            pts[np.abs(pts[:, 0] - 0.5) < 0.05, 0] += 0.1
        return pts


def _hat(t):
    return 1.0 - np.abs(2.0 * t - 1.0)


def smooth_sine_case():
    def u(x):
        return np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])

    def grad_u(x):
        return np.stack([
            np.pi * np.cos(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]),
            np.pi * np.sin(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1]),
        ], axis=-1)

    def f0(x):
        return 2.0 * np.pi ** 2 * u(x)

    return ManufacturedCase(
        "smooth-sine", u, grad_u, LoadFunctional(f0=f0), build_unit_square,
        regularity="smooth",
        h1_rate=lambda p: p + 1.0, l2_rate=lambda p: p + 2.0,
    )


def poly_consistency_case(p, base_n=2):
    """Continuous piecewise-P^{p+1} hat profile on a fixed mesh, load g = grad u.

    The discrete solution of the smoothed method must coincide with the
    interpolant; all errors are machine zero on every refinement.
    """
    base = build_unit_square(base_n)
    profile = lagrange_interpolant(
        base, p + 1, lambda x: _hat(x[..., 0]) * _hat(x[..., 1])
    )
    u = PiecewisePolyFunction(profile)
    return ManufacturedCase(
        "poly-consistency", u, u.gradient, LoadFunctional(g=u.gradient),
        mesh_for=_refiner(base), regularity="smooth",
        h1_rate=lambda p_: np.inf, l2_rate=lambda p_: np.inf,
        level_kind="refinement",
    )


def _refiner(base):
    from .mesh import refine_red

    def mesh_for(level):
        mesh = base
        for _ in range(int(level)):
            mesh = refine_red(mesh)
        return mesh

    return mesh_for


def kink_aligned_case():
    """u = hat(x) sin(pi y): the load is a line Dirac plus an L2 part, i.e.
    genuinely in H^-1 minus L2; it is supplied only in divergence form."""

    def u(x):
        return _hat(x[..., 0]) * np.sin(np.pi * x[..., 1])

    def grad_u(x):
        dphi = np.where(x[..., 0] < 0.5, 2.0, -2.0)
        return np.stack([
            dphi * np.sin(np.pi * x[..., 1]),
            np.pi * _hat(x[..., 0]) * np.cos(np.pi * x[..., 1]),
        ], axis=-1)

    def check(level):
        if level % 2 != 0:
            raise ValueError(
                "kink-aligned needs an even grid so x = 1/2 is a mesh line"
            )

    return ManufacturedCase(
        "kink-aligned", u, grad_u, LoadFunctional(g=grad_u), build_unit_square,
        regularity="kink-aligned",
        h1_rate=lambda p: p + 1.0, l2_rate=lambda p: p + 2.0,
        level_check=check,
    )


def corner_singular_case():
    """u = cutoff(r) r^(2/3) sin(2 theta / 3) on the L-shape; alpha = 2/3."""

    def polar(x):
        r = np.hypot(x[..., 0], x[..., 1])
        th = np.arctan2(x[..., 1], x[..., 0])
        th = np.where(th < 0.0, th + 2.0 * np.pi, th)
        return r, th

    def u(x):
        r, th = polar(x)
        chi = np.where(r < 1.0, (1.0 - r ** 2) ** 4, 0.0)
        return chi * r ** (2.0 / 3.0) * np.sin(2.0 * th / 3.0)

    def grad_u(x):
        r, th = polar(x)
        r = np.maximum(r, 1e-300)
        inside = r < 1.0
        chi = np.where(inside, (1.0 - r ** 2) ** 4, 0.0)
        dchi = np.where(inside, -8.0 * r * (1.0 - r ** 2) ** 3, 0.0)
        s, c = np.sin(2.0 * th / 3.0), np.cos(2.0 * th / 3.0)
        w = r ** (2.0 / 3.0) * s
        dw_r = (2.0 / 3.0) * r ** (-1.0 / 3.0) * s
        dw_t = (2.0 / 3.0) * r ** (-1.0 / 3.0) * c  # (1/r) d/dtheta
        ur = dchi * w + chi * dw_r
        ut = chi * dw_t
        er = np.stack([np.cos(th), np.sin(th)], axis=-1)
        et = np.stack([-np.sin(th), np.cos(th)], axis=-1)
        return ur[..., None] * er + ut[..., None] * et

    return ManufacturedCase(
        "corner-singular", u, grad_u, LoadFunctional(g=grad_u), build_lshape,
        regularity="corner-singular",
        h1_rate=lambda p: 2.0 / 3.0, l2_rate=lambda p: 4.0 / 3.0,
    )


def builtin_cases(p):
    """All built-in manufactured cases for degree p, self-validated."""
    cases = [
        smooth_sine_case(),
        poly_consistency_case(p),
        kink_aligned_case(),
        corner_singular_case(),
    ]
    for case in cases:
        case.validate()
    return cases


def get_case(name, p):
    for case in builtin_cases(p):
        if case.name == name:
            return case
    raise KeyError(f"unknown case {name!r}")


class ConvergenceReport:
    """Per-level errors and empirical orders for one convergence study."""

    def __init__(self, case_name, degree, method, averaging, rows):
        self.case_name = case_name
        self.degree = degree
        self.method = method
        self.averaging = averaging
        self.rows = rows

    def column(self, key):
        return [row[key] for row in self.rows]

    def energy_errors(self):
        return [np.hypot(r["e_H1"], r["e_stab"]) for r in self.rows]

    def to_dict(self):
        return {
            "case": self.case_name,
            "degree": self.degree,
            "method": self.method,
            "averaging": self.averaging,
            "columns": REPORT_COLUMNS,
            "rows": [{k: row[k] for k in REPORT_COLUMNS} for row in self.rows],
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(REPORT_COLUMNS) + "\n")
            for row in self.rows:
                cells = []
                for key in REPORT_COLUMNS:
                    val = row[key]
                    if key == "level":
                        cells.append(str(int(val)))
                    else:
                        cells.append(f"{float(val):.17g}")
                fh.write(",".join(cells) + "\n")

    def write_gnuplot(self, directory, stem):
        """Two-column (h, error) files per norm, gnuplot-compatible."""
        import os

        series = {
            "h1": self.energy_errors(),
            "l2": self.column("e_L2"),
            "super": self.column("e_super"),
            "best": self.column("best_H1"),
        }
        paths = []
        for norm, errors in series.items():
            path = os.path.join(directory, f"{stem}_{norm}.dat")
            with open(path, "w") as fh:
                fh.write("# h error\n")
                for h, e in zip(self.column("h"), errors):
                    fh.write(f"{h:.17g} {e:.17g}\n")
            paths.append(path)
        return paths


def run_convergence(case, p, levels, method="smoothed", averaging="mean",
                    quad_extra=2, solver="direct"):
    """Solve the case on each level and report errors, ratios and orders."""
    if len(levels) < 2:
        raise ValueError("convergence study needs at least 2 levels")
    rows = []
    for level in levels:
        if case.level_check is not None:
            case.level_check(level)
        mesh = case.mesh_for(level)
        space = HHOSpace(mesh, p, quad_extra=quad_extra)
        system = assemble(space)
        if method == "classical":
            rhs = rhs_classical(space, case.load)
        elif method == "smoothed":
            smoother = Smoother(space, averaging=averaging)
            rhs = rhs_smoothed(space, smoother, case.load)
        else:
            raise ValueError(f"unknown method {method!r}")
        field = solve(system, rhs, method=solver)

        semi, stab = error_h1_broken(space, case.grad_u, field)
        best = best_error_h1(space, case.u, case.grad_u)
        energy = float(np.hypot(semi, stab))
        rows.append({
            "level": level,
            "h": float(mesh.h_cell.max()),
            "e_H1": semi,
            "e_stab": stab,
            "e_L2": error_l2(space, case.u, field),
            "e_super": supercloseness(space, case.u, field),
            "best_H1": best,
            "ratio": energy / best if best > 0.0 else float("nan"),
            "eoc_H1": float("nan"),
            "eoc_L2": float("nan"),
        })
    hs = [row["h"] for row in rows]
    energies = [np.hypot(r["e_H1"], r["e_stab"]) for r in rows]
    l2s = [row["e_L2"] for row in rows]
    for i, (r_h1, r_l2) in enumerate(zip(eoc(energies, hs), eoc(l2s, hs))):
        rows[i + 1]["eoc_H1"] = r_h1
        rows[i + 1]["eoc_L2"] = r_l2
    return ConvergenceReport(case.name, p, method, averaging, rows)


def quasi_optimality_ratio(report):
    """Per-level energy/best ratios and whether they grow monotonically."""
    ratios = report.column("ratio")
    growing = all(b > a for a, b in zip(ratios, ratios[1:])) and len(ratios) > 1
    return ratios, growing
