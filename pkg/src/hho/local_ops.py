"""Cell-local HHO operators and the discrete space.

A field of degree p is a pair: polynomial coefficients of degree p per cell
plus coefficients of degree p per interior face (boundary faces carry no
unknowns; their data is structurally zero). :class:`HHOSpace` precomputes,
for every cell at once,

* the reconstruction matrix mapping local (cell, face) coefficients to the
  degree-(p+1) reconstruction, obtained from the local Neumann problem solved
  on the mean-zero complement with the constant fixed by the cell average,
* the stabilization operator and the face-residual trace matrices behind the
  stabilization form (with the h_F^{-1} face weight), and
* the local bilinear blocks assembled by the `system` module.

All local matrices are pure functions of immutable mesh/basis data; any set
of cells may be processed concurrently.
"""

import logging

import numpy as np
from scipy import sparse

from .polyquad import (
    UnsupportedDegreeError,
    cell_basis_gradients,
    cell_basis_laplacians,
    cell_basis_values,
    cell_quadrature,
    face_basis_values,
    face_quadrature,
    quad_for_degree,
    reference_face_mass,
    space_dimension,
    symmetrize,
)

log = logging.getLogger(__name__)

P_MAX = 3


class BrokenPoly:
    """Piecewise polynomial on the mesh: per-cell scaled-monomial coefficients."""

    def __init__(self, mesh, degree, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        expected = (mesh.num_cells, space_dimension(degree))
        if coeffs.shape != expected:
            raise ValueError(f"coefficient shape {coeffs.shape}, expected {expected}")
        self.mesh = mesh
        self.degree = degree
        self.coeffs = coeffs

    @classmethod
    def zero(cls, mesh, degree):
        return cls(mesh, degree, np.zeros((mesh.num_cells, space_dimension(degree))))

    def values_at(self, points, cells=None):
        """Cell-wise values at points (T, Q, 2) aligned with `cells`."""
        vals = cell_basis_values(self.mesh, self.degree, points, cells=cells)
        coeffs = self.coeffs if cells is None else self.coeffs[cells]
        return np.einsum("tqi,ti->tq", vals, coeffs)

    def gradients_at(self, points, cells=None):
        """Broken gradient at points (T, Q, 2) -> (T, Q, 2)."""
        grads = cell_basis_gradients(self.mesh, self.degree, points, cells=cells)
        coeffs = self.coeffs if cells is None else self.coeffs[cells]
        return np.einsum("tqid,ti->tqd", grads, coeffs)

    def pad_to(self, degree):
        """Embed into a higher degree (graded bases nest as prefixes)."""
        if degree < self.degree:
            raise ValueError("pad_to cannot lower the degree")
        out = np.zeros((self.mesh.num_cells, space_dimension(degree)))
        out[:, : self.coeffs.shape[1]] = self.coeffs
        return BrokenPoly(self.mesh, degree, out)


class HHOField:
    """HHO unknowns: degree-p cell blocks plus degree-p interior-face blocks."""

    def __init__(self, mesh, p, cell_coeffs, face_coeffs):
        cell_coeffs = np.asarray(cell_coeffs, dtype=float)
        face_coeffs = np.asarray(face_coeffs, dtype=float)
        if cell_coeffs.shape != (mesh.num_cells, space_dimension(p)):
            raise ValueError("cell coefficient block has wrong shape")
        if face_coeffs.shape != (mesh.num_interior_faces, p + 1):
            raise ValueError("face coefficient block has wrong shape")
        self.mesh = mesh
        self.p = p
        self.cell_coeffs = cell_coeffs
        self.face_coeffs = face_coeffs

    @classmethod
    def zero(cls, mesh, p):
        return cls(
            mesh,
            p,
            np.zeros((mesh.num_cells, space_dimension(p))),
            np.zeros((mesh.num_interior_faces, p + 1)),
        )

    def cell_component(self):
        return BrokenPoly(self.mesh, self.p, self.cell_coeffs)


def _evaluate(v, points, cells=None):
    """Evaluate a callable (vectorized over trailing coordinate axis) or BrokenPoly."""
    if isinstance(v, BrokenPoly):
        return v.values_at(points, cells=cells)
    return np.asarray(v(points), dtype=float)


class HHOSpace:
    """Discrete HHO space of degree p on a mesh, with cached local operators.

    Parameters
    ----------
    mesh : SimplicialMesh
    p : int
        Polynomial degree of cell and face unknowns, 0 <= p <= 3.
    quad_extra : int
        Extra quadrature exactness for load integrands (callables are
        generally non-polynomial); the single source of quadrature error in
        rough-load runs.
    """

    def __init__(self, mesh, p, quad_extra=2):
        if not 0 <= p <= P_MAX:
            raise UnsupportedDegreeError(f"degree p={p} outside [0, {P_MAX}]")
        self.mesh = mesh
        self.p = p
        self.quad_extra = int(quad_extra)

        self.nc = space_dimension(p)
        self.n1 = space_dimension(p + 1)
        self.nf = p + 1
        self.nloc = self.nc + 3 * self.nf
        self.degree_star = 2 + max(p, 1)  # smoother output degree

        self.rule_cell = quad_for_degree(2, 2 * (p + 3))
        self.rule_face = quad_for_degree(1, 2 * (p + 3))
        # projections of general (transcendental) fields: hot enough that the
        # structural identities hold to 1e-10 already on the coarsest meshes
        proj_degree = max(2 * (p + 2) + 4, 16)
        self.rule_cell_proj = quad_for_degree(2, proj_degree)
        self.rule_face_proj = quad_for_degree(1, proj_degree)
        self.rule_cell_load = quad_for_degree(2, self.degree_star + self.quad_extra)

        self._build_cell_tables()
        self._build_face_tables()
        self._build_local_operators()
        self._build_dof_maps()

    # -- construction ---------------------------------------------------

    def _build_cell_tables(self):
        mesh = self.mesh
        self.cell_qp, self.cell_qw = cell_quadrature(mesh, self.rule_cell)
        phi1 = cell_basis_values(mesh, self.p + 1, self.cell_qp)
        gphi1 = cell_basis_gradients(mesh, self.p + 1, self.cell_qp)
        w = self.cell_qw
        self.mass1 = symmetrize(np.einsum("tq,tqi,tqj->tij", w, phi1, phi1))
        self.stiff1 = symmetrize(np.einsum("tq,tqid,tqjd->tij", w, gphi1, gphi1))
        self.ints1 = np.einsum("tq,tqi->ti", w, phi1)
        self.mass_p = self.mass1[:, : self.nc, : self.nc]
        cond = np.linalg.cond(self.mass1 / self.mesh.volumes[:, None, None])
        log.debug("cell Gram condition numbers: max %.3e", cond.max())
        self._phi1 = phi1

    def _build_face_tables(self):
        mesh, p = self.mesh, self.p
        self.hf_loc = mesh.h_face[mesh.cell_faces]  # (T, 3)
        self.mhat_p = reference_face_mass(p)
        self.mhat_p_inv = np.linalg.inv(self.mhat_p)
        self.Ntr = []     # int_F psi_m phi_j, psi of degree p      (T, nf, n1)
        self.Ntr1 = []    # same with psi of degree p+1             (T, p+2, n1)
        self.Bflux = []   # int_F psi_m grad(phi_j) . n_K           (T, nf, n1)
        self.Fcc = []     # int_F phi_i phi_j, cell basis degree p  (T, nc, nc)
        for i in range(3):
            faces_i = mesh.cell_faces[:, i]
            pts, w = face_quadrature(mesh, self.rule_face, faces_i)
            phi1 = cell_basis_values(mesh, p + 1, pts)
            gphi1 = cell_basis_gradients(mesh, p + 1, pts)
            psi = face_basis_values(mesh, p, faces_i, pts)
            psi1 = face_basis_values(mesh, p + 1, faces_i, pts)
            n = mesh.normals[:, i]
            self.Ntr.append(np.einsum("tq,tqm,tqj->tmj", w, psi, phi1))
            self.Ntr1.append(np.einsum("tq,tqm,tqj->tmj", w, psi1, phi1))
            self.Bflux.append(
                np.einsum("tq,tqm,tqjd,td->tmj", w, psi, gphi1, n)
            )
            phi_p = phi1[..., : self.nc]
            self.Fcc.append(
                symmetrize(np.einsum("tq,tqi,tqj->tij", w, phi_p, phi_p))
            )

    def _build_local_operators(self):
        T, nc, n1, nf, nloc = (
            self.mesh.num_cells, self.nc, self.n1, self.nf, self.nloc,
        )
        w = self.cell_qw
        lphi1 = cell_basis_laplacians(self.mesh, self.p + 1, self.cell_qp)
        phi_p = self._phi1[..., :nc]

        # right-hand side of the local Neumann problem, test function phi_j
        B = np.zeros((T, n1, nloc))
        B[:, :, :nc] = -np.einsum("tq,tqm,tqj->tjm", w, phi_p, lphi1)
        for i in range(3):
            cols = slice(nc + i * nf, nc + (i + 1) * nf)
            B[:, :, cols] = self.Bflux[i].transpose(0, 2, 1)

        # solve on the mean-zero complement, then fix the constant by the
        # cell-average condition
        Gred = np.linalg.solve(self.stiff1[:, 1:, 1:], B[:, 1:, :])
        G = np.zeros((T, n1, nloc))
        G[:, 1:, :] = Gred
        int_row = np.zeros((T, nloc))
        int_row[:, :nc] = self.ints1[:, :nc]
        G[:, 0, :] = (
            int_row - np.einsum("ti,tij->tj", self.ints1[:, 1:], Gred)
        ) / self.mesh.volumes[:, None]
        self.G = G

        # stabilization operator S = s_M + (Id - Pi_M) R
        Pi = np.linalg.solve(self.mass_p, self.mass1[:, :nc, :])  # (T, nc, n1)
        self.Pi = Pi
        S = G.copy()
        S[:, :nc, :] = G[:, :nc, :] - np.einsum("tmi,tij->tmj", Pi, G)
        idx = np.arange(nc)
        S[:, idx, idx] += 1.0
        self.S = S

        # face-residual traces T_i = FaceSel_i - Pi_Sigma(S .)|_F
        Tmats = np.empty((T, 3, nf, nloc))
        for i in range(3):
            Qi = np.einsum("mn,tnj->tmj", self.mhat_p_inv, self.Ntr[i])
            Qi /= self.hf_loc[:, i, None, None]
            Ti = -np.einsum("tmj,tjl->tml", Qi, S)
            cols = slice(nc + i * nf, nc + (i + 1) * nf)
            Ti[:, :, cols] += np.eye(nf)
            Tmats[:, i] = Ti
        self.Tmats = Tmats

        # local bilinear blocks: grad(R .) . grad(R .) plus stabilization;
        # the h_F^{-1} weight cancels the h_F inside the face mass matrix
        stab_loc = np.einsum("tfml,mn,tfnk->tlk", Tmats, self.mhat_p, Tmats)
        recon_loc = np.einsum("til,tij,tjk->tlk", G, self.stiff1, G)
        self.A_loc = symmetrize(recon_loc + stab_loc)
        del self._phi1

    def _build_dof_maps(self):
        mesh = self.mesh
        T, nc, nf = mesh.num_cells, self.nc, self.nf
        self.num_cell_dofs = T * nc
        self.num_face_dofs = mesh.num_interior_faces * nf
        self.num_dofs = self.num_cell_dofs + self.num_face_dofs

        ids = np.empty((T, self.nloc), dtype=np.int64)
        ids[:, :nc] = np.arange(T)[:, None] * nc + np.arange(nc)
        fidx = mesh.face_interior_index[mesh.cell_faces]  # (T, 3)
        for i in range(3):
            block = T * nc + fidx[:, i, None] * nf + np.arange(nf)
            block[fidx[:, i] < 0] = -1
            ids[:, nc + i * nf: nc + (i + 1) * nf] = block
        self.local_dof_ids = ids

    # -- field plumbing ---------------------------------------------------

    def zero_field(self):
        return HHOField.zero(self.mesh, self.p)

    def random_field(self, rng, scale=1.0):
        return HHOField(
            self.mesh,
            self.p,
            scale * rng.standard_normal((self.mesh.num_cells, self.nc)),
            scale * rng.standard_normal((self.mesh.num_interior_faces, self.nf)),
        )

    def vector_from_field(self, field):
        return np.concatenate(
            [field.cell_coeffs.ravel(), field.face_coeffs.ravel()]
        )

    def field_from_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.num_dofs,):
            raise ValueError("dof vector has wrong length")
        cells = vec[: self.num_cell_dofs].reshape(self.mesh.num_cells, self.nc)
        faces = vec[self.num_cell_dofs:].reshape(-1, self.nf)
        return HHOField(self.mesh, self.p, cells, faces)

    def local_coeffs(self, field):
        """Per-cell local dof vectors (T, nloc); boundary faces padded with 0."""
        mesh = self.mesh
        fidx = mesh.face_interior_index[mesh.cell_faces]
        gathered = np.where(
            (fidx >= 0)[:, :, None],
            field.face_coeffs[fidx],
            0.0,
        )
        return np.concatenate(
            [field.cell_coeffs, gathered.reshape(mesh.num_cells, 3 * self.nf)],
            axis=1,
        )

    # -- projections and local operators ----------------------------------

    def project_cell(self, v, degree=None):
        """L2 projection onto P^degree(M); degree defaults to p."""
        degree = self.p if degree is None else degree
        pts, w = cell_quadrature(self.mesh, self.rule_cell_proj)
        basis = cell_basis_values(self.mesh, degree, pts)
        fv = _evaluate(v, pts)
        rhs = np.einsum("tq,tqi,tq->ti", w, basis, fv)
        M = symmetrize(np.einsum("tq,tqi,tqj->tij", w, basis, basis))
        coeffs = np.linalg.solve(M, rhs[..., None])[..., 0]
        return BrokenPoly(self.mesh, degree, coeffs)

    def project_face(self, v, degree=None):
        """L2 projection onto P^degree(F) per interior face -> (Ei, degree+1)."""
        degree = self.p if degree is None else degree
        faces = self.mesh.interior_faces
        pts, w = face_quadrature(self.mesh, self.rule_face_proj, faces)
        psi = face_basis_values(self.mesh, degree, faces, pts)
        fv = _evaluate(v, pts, cells=self.mesh.face_cells[faces, 0])
        rhs = np.einsum("fq,fqm,fq->fm", w, psi, fv)
        mhat_inv = np.linalg.inv(reference_face_mass(degree))
        return rhs @ mhat_inv.T / self.mesh.h_face[faces][:, None]

    def interpolate(self, v):
        """HHO interpolant: cell and face L2 projections of v."""
        return HHOField(
            self.mesh, self.p, self.project_cell(v).coeffs, self.project_face(v)
        )

    def reconstruct(self, field):
        """Degree-(p+1) potential reconstruction, cell by cell."""
        x = self.local_coeffs(field)
        return BrokenPoly(
            self.mesh, self.p + 1, np.einsum("tij,tj->ti", self.G, x)
        )

    def stab_operator(self, field):
        """S = s_M + (Id - Pi_M) R, a degree-(p+1) broken polynomial."""
        x = self.local_coeffs(field)
        return BrokenPoly(
            self.mesh, self.p + 1, np.einsum("tij,tj->ti", self.S, x)
        )

    def stab_form(self, a, b):
        """Face-penalty stabilization form (h_F^{-1}-weighted)."""
        xa = self.local_coeffs(a)
        xb = self.local_coeffs(b)
        ra = np.einsum("tfml,tl->tfm", self.Tmats, xa)
        rb = np.einsum("tfml,tl->tfm", self.Tmats, xb)
        return float(np.einsum("tfm,mn,tfn->", ra, self.mhat_p, rb))

    def elliptic_project(self, v, grad_v):
        """Broken elliptic projection onto P^{p+1}(M)."""
        pts, w = cell_quadrature(self.mesh, self.rule_cell_proj)
        gphi = cell_basis_gradients(self.mesh, self.p + 1, pts)
        gv = np.asarray(grad_v(pts), dtype=float)
        rhs = np.einsum("tq,tqjd,tqd->tj", w, gphi[:, :, 1:, :], gv)
        cred = np.linalg.solve(self.stiff1[:, 1:, 1:], rhs[..., None])[..., 0]
        ints_v = np.einsum("tq,tq->t", w, _evaluate(v, pts))
        c0 = (ints_v - np.einsum("ti,ti->t", self.ints1[:, 1:], cred))
        c0 /= self.mesh.volumes
        coeffs = np.concatenate([c0[:, None], cred], axis=1)
        return BrokenPoly(self.mesh, self.p + 1, coeffs)

    def bilinear_b(self, a, b):
        """HHO bilinear form: broken gradients of reconstructions plus stabilization."""
        ra = np.einsum("tij,tj->ti", self.G, self.local_coeffs(a))
        rb = np.einsum("tij,tj->ti", self.G, self.local_coeffs(b))
        grad_part = float(np.einsum("ti,tij,tj->", ra, self.stiff1, rb))
        return grad_part + self.stab_form(a, b)

    # -- norms -------------------------------------------------------------

    def l2_norm_broken(self, bp):
        pts, w = cell_quadrature(self.mesh, self.rule_cell_proj)
        vals = bp.values_at(pts)
        return float(np.sqrt(np.einsum("tq,tq->", w, vals ** 2)))

    def h1_seminorm_broken(self, bp):
        pts, w = cell_quadrature(self.mesh, self.rule_cell_proj)
        grads = bp.gradients_at(pts)
        return float(np.sqrt(np.einsum("tq,tqd->", w, grads ** 2)))

    def energy_norm(self, field):
        return float(np.sqrt(self.bilinear_b(field, field)))

    def hho_norm_matrix(self):
        """Matrix of the coercivity norm: broken H1 of s_M plus face penalties."""
        T, nc, nf, nloc = self.mesh.num_cells, self.nc, self.nf, self.nloc
        H = np.zeros((T, nloc, nloc))
        H[:, :nc, :nc] = self.stiff1[:, :nc, :nc]
        hinv = 1.0 / self.hf_loc
        for i in range(3):
            cols = slice(nc + i * nf, nc + (i + 1) * nf)
            Ncs = self.Ntr[i][:, :, :nc]
            H[:, :nc, :nc] += hinv[:, i, None, None] * self.Fcc[i]
            H[:, cols, cols] += self.mhat_p  # h_F^{-1} times h_F Mhat
            H[:, cols, :nc] -= hinv[:, i, None, None] * Ncs
            H[:, :nc, cols] -= hinv[:, i, None, None] * Ncs.transpose(0, 2, 1)
        return assemble_bilinear(self, H)


def assemble_bilinear(space, local_mats):
    """Scatter per-cell local matrices (T, nloc, nloc) into a global CSR matrix."""
    ids = space.local_dof_ids
    rows = np.repeat(ids[:, :, None], space.nloc, axis=2)
    cols = np.repeat(ids[:, None, :], space.nloc, axis=1)
    mask = (rows >= 0) & (cols >= 0)
    mat = sparse.coo_matrix(
        (local_mats[mask], (rows[mask], cols[mask])),
        shape=(space.num_dofs, space.num_dofs),
    )
    return mat.tocsr()
