"""Batch driver: verification suites, convergence studies, single solves.

Usage: hho {verify | converge | solve} --config cfg.json [--threads N]
           [--out DIR] [--mesh PATH]

The JSON config supplies the run parameters (see README for the schema); the
flags override the corresponding config keys. All file outputs use '.' as the
decimal separator and 17 significant digits, and fixed iteration orders make
reruns byte-identical for a given seed. Exit codes: 0 success, 1 check
failure, 2 config error.
"""

import argparse
import json
import os
import sys

import numpy as np

from .analysis import get_case, run_convergence
from .local_ops import HHOSpace
from .mesh import MeshError, read_mesh_file
from .polyquad import UnsupportedDegreeError
from .smoothing import Smoother, lattice_multis
from .system import (
    LoadFunctional,
    MethodNotApplicableError,
    assemble,
    rhs_classical,
    rhs_smoothed,
    solve,
)
from .verify import run_verification

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_CONFIG_ERROR = 2


class ConfigError(ValueError):
    pass


def _load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc


def _get(config, key, default=None, required=False, kind=None):
    if key not in config:
        if required:
            raise ConfigError(f"config field '{key}' is required")
        return default
    value = config[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"config field '{key}' has the wrong type")
    return value


def _quad_extra(config):
    env = os.environ.get("HHO_QUAD_EXTRA")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"HHO_QUAD_EXTRA={env!r} is not an integer") from None
    return _get(config, "quad_extra", 2, kind=int)


def _out_dir(args, config):
    out = args.out or _get(config, "out", ".")
    os.makedirs(out, exist_ok=True)
    return out


def _fmt(x):
    return f"{x:.17g}"


def cmd_verify(args, config):
    degrees = _get(config, "degrees", [0, 1, 2], kind=list)
    resolutions = _get(config, "resolutions", [2, 4, 8], kind=list)
    seed = _get(config, "seed", 20180608, kind=int)
    random_fields = _get(config, "random_fields", 100, kind=int)
    variants = _get(config, "averaging", ["mean", "scott-zhang"])
    if isinstance(variants, str):
        variants = [variants]
    mesh_path = args.mesh or _get(config, "mesh")

    try:
        report = run_verification(
            degrees=degrees, resolutions=resolutions, seed=seed,
            random_fields=random_fields, variants=variants, mesh_path=mesh_path,
        )
    except MeshError as exc:
        print(f"verify: mesh check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILURE

    out = _out_dir(args, config)
    path = os.path.join(out, "verify_report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")

    for check in report["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        where = ",".join(
            str(check[k]) for k in ("degree", "resolution", "variant")
            if check[k] is not None
        )
        print(f"[{status}] {check['name']:<26s} ({where}) "
              f"residual={_fmt(check['residual'])} tol={_fmt(check['tolerance'])}")
    print(f"verify: {'all checks passed' if report['passed'] else 'FAILURES'} "
          f"-> {path}")
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILURE


def cmd_converge(args, config):
    case_name = _get(config, "case", required=True, kind=str)
    degree = _get(config, "degree", required=True, kind=int)
    levels = _get(config, "levels", required=True, kind=list)
    if len(levels) < 2:
        raise ConfigError("converge needs at least 2 levels")
    method = _get(config, "method", "smoothed", kind=str)
    averaging = _get(config, "averaging", "mean", kind=str)
    solver_cfg = _get(config, "solver", {}, kind=dict)
    solver = solver_cfg.get("method", "direct")

    case = get_case(case_name, degree)
    if method == "classical" and case.load.has_divergence_part:
        raise ConfigError(
            f"case '{case_name}' supplies its load in divergence form; the "
            "classical right-hand side is undefined for it (method-inapplicable)"
        )
    report = run_convergence(
        case, degree, levels, method=method, averaging=averaging,
        quad_extra=_quad_extra(config), solver=solver,
    )

    out = _out_dir(args, config)
    stem = f"{case_name}_p{degree}_{method}"
    csv_path = os.path.join(out, stem + ".csv")
    report.write_csv(csv_path)
    report.write_json(os.path.join(out, stem + ".json"))
    report.write_gnuplot(out, stem)

    for row in report.rows:
        print(
            f"level={row['level']:<4} h={row['h']:.5f} "
            f"eH1={row['e_H1']:.6e} eL2={row['e_L2']:.6e} "
            f"eocH1={row['eoc_H1']:.3f} eocL2={row['eoc_L2']:.3f} "
            f"ratio={row['ratio']:.3f}"
        )
    print(f"converge: wrote {csv_path}")
    return EXIT_OK


def cmd_solve(args, config):
    case_name = _get(config, "case", required=True, kind=str)
    degree = _get(config, "degree", required=True, kind=int)
    level = _get(config, "level", 8, kind=int)
    method = _get(config, "method", "smoothed", kind=str)
    averaging = _get(config, "averaging", "mean", kind=str)
    load_kind = _get(config, "load", "case", kind=str)

    case = get_case(case_name, degree)
    if args.mesh:
        try:
            mesh = read_mesh_file(args.mesh)
        except MeshError as exc:
            raise ConfigError(f"--mesh {args.mesh}: {exc}") from exc
    else:
        mesh = case.mesh_for(level)
    space = HHOSpace(mesh, degree, quad_extra=_quad_extra(config))
    system = assemble(space)

    if load_kind == "zero":
        load = LoadFunctional(f0=lambda x: np.zeros(x.shape[:-1]))
    elif load_kind == "case":
        load = case.load
    else:
        raise ConfigError(f"unknown load kind {load_kind!r}")

    if method == "classical":
        rhs = rhs_classical(space, load)
    elif method == "smoothed":
        rhs = rhs_smoothed(space, Smoother(space, averaging=averaging), load)
    else:
        raise ConfigError(f"unknown method {method!r}")
    field = solve(system, rhs)
    recon = space.reconstruct(field)

    bary = lattice_multis(degree + 1) / (degree + 1)
    pts = np.einsum("la,tad->tld", bary, mesh.cell_vertices())
    vals = recon.values_at(pts)

    out = _out_dir(args, config)
    path = os.path.join(out, "solution.csv")
    with open(path, "w") as fh:
        fh.write("x,y,value\n")
        for t in range(mesh.num_cells):
            for l in range(pts.shape[1]):
                fh.write(
                    f"{_fmt(pts[t, l, 0])},{_fmt(pts[t, l, 1])},{_fmt(vals[t, l])}\n"
                )
    print(f"solve: wrote {path} ({mesh.num_cells * pts.shape[1]} samples)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hho",
        description="HHO Poisson solver: verification, convergence, solves.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("verify", cmd_verify), ("converge", cmd_converge),
                     ("solve", cmd_solve)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--threads", type=int, default=1,
                       help="cap on worker count (execution is serial in v1)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--mesh", default=None,
                       help="external mesh file (node/element format)")
        p.set_defaults(handler=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        print("hho: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    try:
        config = _load_config(args.config)
        return args.handler(args, config)
    except (ConfigError, UnsupportedDegreeError) as exc:
        print(f"hho: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except MethodNotApplicableError as exc:
        print(f"hho: method not applicable: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
