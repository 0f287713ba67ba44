"""Global assembly, load discretizations, static condensation, linear solve.

Two right-hand sides are supported: the classical one integrates an L2 load
density against the cell unknowns and refuses divergence-form loads (the
duality is not defined there, a designed failure); the smoothed one evaluates
the load on the smoothed test functions and accepts any load of the form
f0 - div g.

Cell unknowns are eliminated locally (static condensation); the global solve
acts on interior-face unknowns only. Basis ordering is cells then interior
faces, each by index, so golden vectors are reproducible.
"""

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg, splu

from .local_ops import assemble_bilinear
from .polyquad import (
    cell_basis_gradients,
    cell_basis_values,
    cell_quadrature,
)


class MethodNotApplicableError(RuntimeError):
    """The classical L2 right-hand side met a divergence-form load."""


class LoadFunctional:
    """Load f = f0 - div g with <f, v> = int f0 v + int g . grad v.

    At least one of f0 (scalar field) and g (vector field) must be given;
    both are callables vectorized over the trailing coordinate axis. g need
    not be continuous across faces: that is the point of supporting loads
    outside L2.
    """

    def __init__(self, f0=None, g=None):
        if f0 is None and g is None:
            raise ValueError("load needs at least one of f0, g")
        self.f0 = f0
        self.g = g

    @property
    def variant(self):
        if self.f0 is not None and self.g is not None:
            return "composite"
        return "l2-density" if self.f0 is not None else "divergence-form"

    @property
    def has_divergence_part(self):
        return self.g is not None


class CondensedSystem:
    """SPD face-unknown system plus the per-cell elimination data."""

    def __init__(self, space):
        self.space = space
        mesh, nc = space.mesh, space.nc
        self.full_matrix = assemble_bilinear(space, space.A_loc)

        A_tt = space.A_loc[:, :nc, :nc]
        A_tf = space.A_loc[:, :nc, nc:]
        self.inv_tt = np.linalg.inv(A_tt)
        self.A_tf = A_tf
        S_loc = space.A_loc[:, nc:, nc:] - np.einsum(
            "tij,tjk,tkl->til", A_tf.transpose(0, 2, 1), self.inv_tt, A_tf
        )

        ids = space.local_dof_ids[:, nc:] - space.num_cell_dofs
        rows = np.repeat(ids[:, :, None], ids.shape[1], axis=2)
        cols = np.repeat(ids[:, None, :], ids.shape[1], axis=1)
        mask = (rows >= 0) & (cols >= 0)
        self.face_matrix = sparse.coo_matrix(
            (S_loc[mask], (rows[mask], cols[mask])),
            shape=(space.num_face_dofs, space.num_face_dofs),
        ).tocsr()
        self._face_ids = ids
        self._face_lu = None

    def condense_rhs(self, rhs):
        """Eliminate the cell block of a full rhs vector."""
        space = self.space
        b_t = rhs[: space.num_cell_dofs].reshape(space.mesh.num_cells, space.nc)
        b_f = rhs[space.num_cell_dofs:].copy()
        corr = np.einsum(
            "tij,tjk,tk->ti", self.A_tf.transpose(0, 2, 1), self.inv_tt, b_t
        )
        ids = self._face_ids
        np.add.at(b_f, ids[ids >= 0], -corr[ids >= 0])
        return b_f

    def recover_cells(self, rhs, face_vec):
        space = self.space
        b_t = rhs[: space.num_cell_dofs].reshape(space.mesh.num_cells, space.nc)
        ids = self._face_ids
        u_loc = np.where(ids >= 0, face_vec[np.maximum(ids, 0)], 0.0)
        rhs_t = b_t - np.einsum("tij,tj->ti", self.A_tf, u_loc)
        return np.einsum("tij,tj->ti", self.inv_tt, rhs_t)


def assemble(space):
    """Assemble the HHO system with static-condensation data."""
    return CondensedSystem(space)


def rhs_classical(space, load):
    """Right-hand side of the classical method: int f0 sigma_M.

    Face-basis entries are zero. Divergence-form loads are rejected: the
    classical duality cannot be extended to them.
    """
    if load.has_divergence_part:
        raise MethodNotApplicableError(
            "classical right-hand side is undefined for divergence-form loads; "
            "use the smoothed method"
        )
    pts, w = cell_quadrature(space.mesh, space.rule_cell_load)
    basis = cell_basis_values(space.mesh, space.p, pts)
    fv = np.asarray(load.f0(pts), dtype=float)
    rhs = np.zeros(space.num_dofs)
    rhs[: space.num_cell_dofs] = np.einsum(
        "tq,tq,tqi->ti", w, fv, basis
    ).ravel()
    return rhs


def rhs_smoothed(space, smoother, load):
    """Right-hand side of the smoothed method: <f, S_H sigma>.

    The load functional is evaluated on the broken basis underlying the
    smoother output and pulled back through the (one-ring local) smoother
    matrix.
    """
    pts, w = cell_quadrature(space.mesh, space.rule_cell_load)
    fvec = np.zeros(space.mesh.num_cells * smoother.nD)
    if load.f0 is not None:
        basis = cell_basis_values(space.mesh, smoother.degree, pts)
        fv = np.asarray(load.f0(pts), dtype=float)
        fvec += np.einsum("tq,tq,tqi->ti", w, fv, basis).ravel()
    if load.g is not None:
        grads = cell_basis_gradients(space.mesh, smoother.degree, pts)
        gv = np.asarray(load.g(pts), dtype=float)
        fvec += np.einsum("tq,tqd,tqid->ti", w, gv, grads).ravel()
    return smoother.apply_transpose(fvec)


def solve(system, rhs, method="direct", rtol=1e-12):
    """Solve via static condensation; return the HHO field.

    method 'direct' factorizes the condensed SPD matrix once (reused across
    right-hand sides); 'cg' runs Jacobi-preconditioned conjugate gradients to
    the given relative residual.
    """
    space = system.space
    b_f = system.condense_rhs(rhs)
    if space.num_face_dofs == 0:
        u_f = np.zeros(0)
    elif method == "direct":
        if system._face_lu is None:
            system._face_lu = splu(system.face_matrix.tocsc())
        u_f = system._face_lu.solve(b_f)
    elif method == "cg":
        M = sparse.diags(1.0 / system.face_matrix.diagonal())
        u_f, info = cg(system.face_matrix, b_f, rtol=rtol, atol=0.0, M=M,
                       maxiter=20 * max(len(b_f), 1))
        if info != 0:
            raise RuntimeError(f"CG failed to converge (info={info})")
    else:
        raise ValueError(f"unknown solver method {method!r}")
    u_t = system.recover_cells(rhs, u_f)
    vec = np.concatenate([u_t.ravel(), u_f])
    return space.field_from_vector(vec)


def solve_full(system, rhs):
    """Solve the uncondensed system directly (testing aid)."""
    vec = splu(system.full_matrix.tocsc()).solve(rhs)
    return system.space.field_from_vector(vec)


def residual_inf(system, field, rhs):
    """Max-norm discrete residual ||b_H(U, .) - rhs||_inf."""
    vec = system.space.vector_from_field(field)
    return float(np.abs(system.full_matrix @ vec - rhs).max())
