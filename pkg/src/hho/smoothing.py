"""Moment-preserving smoothers mapping HHO fields into H1_0-conforming functions.

The stabilized smoother combines a nodal averaging of the reconstruction
(continuous piecewise P^{p+1}, zero on the boundary) with bubble corrections
that restore the cell moments up to degree p-1 and the interior-face moments
up to degree p. Element bubbles are 27*l1*l2*l3, face bubbles 4*la*lb on each
of the two cells sharing the face; both are 1 at the respective barycenter.

Everything is linear with one-ring-local supports, so the whole smoother is
assembled once as a sparse matrix from HHO unknowns to broken polynomial
coefficients of degree 2 + max(p, 1). Cell and face solves are independent
per entity; the assembly loop is the only sequential part.
"""

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .local_ops import BrokenPoly, assemble_bilinear
from .polyquad import (
    cell_basis_values,
    reference_face_mass,
    space_dimension,
    symmetrize,
)


def lattice_multis(degree):
    """Barycentric multi-indices (a, b, c), a+b+c = degree, in a fixed order."""
    out = [
        (a, b, degree - a - b)
        for a in range(degree, -1, -1)
        for b in range(degree - a, -1, -1)
    ]
    return np.array(out, dtype=np.int64)


def lagrange_basis_values(degree, bary):
    """Values of the simplex Lagrange basis of `degree` at barycentric points.

    bary has shape (..., 3); the result has shape (..., n_lattice) with the
    node order of :func:`lattice_multis`. Affine invariant, so one table
    serves every cell.
    """
    multis = lattice_multis(degree)
    vals = np.ones(bary.shape[:-1] + (len(multis),))
    for idx, nu in enumerate(multis):
        for c in range(3):
            for m in range(nu[c]):
                vals[..., idx] *= (degree * bary[..., c] - m) / (nu[c] - m)
    return vals


class LagrangeLayer:
    """Global Lagrange nodes of a given degree on a matching simplicial mesh.

    Node ids: vertices first (gid == vertex id), then degree-1 nodes per
    face ordered from the lower-index vertex to the higher one, then cell
    interior nodes. Provides per-cell lattice-to-global maps, node
    coordinates, boundary flags and incidence counts.
    """

    def __init__(self, mesh, degree):
        if degree < 1:
            raise ValueError("Lagrange layer needs degree >= 1")
        self.mesh = mesh
        self.degree = degree
        q = degree
        multis = lattice_multis(q)
        self.multis = multis
        self.lattice_bary = multis / q

        T = mesh.num_cells
        NV, E = mesh.num_vertices, mesh.num_faces
        n_edge = q - 1
        n_int = (q - 1) * (q - 2) // 2
        self.num_nodes = NV + E * n_edge + T * n_int

        cell_nodes = np.empty((T, len(multis)), dtype=np.int64)
        interior_rank = 0
        for l, nu in enumerate(multis):
            zeros = [c for c in range(3) if nu[c] == 0]
            if len(zeros) == 2:
                v = int(np.argmax(nu))
                cell_nodes[:, l] = mesh.cells[:, v]
            elif len(zeros) == 1:
                i = zeros[0]  # node lies on the face opposite local vertex i
                la, lb = (i + 1) % 3, (i + 2) % 3
                F = mesh.cell_faces[:, i]
                hi_is_lb = mesh.faces[F, 1] == mesh.cells[:, lb]
                w_hi = np.where(hi_is_lb, nu[lb], nu[la])
                cell_nodes[:, l] = NV + F * n_edge + (w_hi - 1)
            else:
                cell_nodes[:, l] = (
                    NV + E * n_edge + np.arange(T) * n_int + interior_rank
                )
                interior_rank += 1
        self.cell_nodes = cell_nodes

        coords = np.empty((self.num_nodes, 2))
        phys = np.einsum("la,tad->tld", self.lattice_bary, mesh.cell_vertices())
        coords[cell_nodes.ravel()] = phys.reshape(-1, 2)
        self.coords = coords

        boundary = np.zeros(self.num_nodes, dtype=bool)
        bfaces = np.nonzero(mesh.boundary_face_mask)[0]
        boundary[mesh.faces[bfaces].ravel()] = True
        if n_edge:
            edge_ids = NV + bfaces[:, None] * n_edge + np.arange(n_edge)
            boundary[edge_ids.ravel()] = True
        self.boundary = boundary

        self.counts = np.bincount(cell_nodes.ravel(), minlength=self.num_nodes)
        min_cell = np.full(self.num_nodes, T, dtype=np.int64)
        np.minimum.at(
            min_cell, cell_nodes.ravel(), np.repeat(np.arange(T), len(multis))
        )
        self.min_cell = min_cell

        self.interior_index = np.full(self.num_nodes, -1, dtype=np.int64)
        ids = np.nonzero(~boundary)[0]
        self.interior_index[ids] = np.arange(len(ids))
        self.num_interior = len(ids)

    def face_nodes(self, faces):
        """Node gids on each face, ordered from the lower vertex to the higher.

        Shape (len(faces), degree + 1).
        """
        mesh, q = self.mesh, self.degree
        out = np.empty((len(faces), q + 1), dtype=np.int64)
        out[:, 0] = mesh.faces[faces, 0]
        out[:, -1] = mesh.faces[faces, 1]
        if q > 1:
            out[:, 1:-1] = (
                mesh.num_vertices + np.asarray(faces)[:, None] * (q - 1)
                + np.arange(q - 1)
            )
        return out


class BubbleSet:
    """Element and face bubbles, normalized to 1 at the barycenters."""

    def __init__(self, mesh):
        self.mesh = mesh

    @staticmethod
    def cell_bubble(bary):
        """27 * l0 * l1 * l2 at barycentric points (..., 3)."""
        return 27.0 * bary[..., 0] * bary[..., 1] * bary[..., 2]

    def face_bubble(self, cell, face, bary):
        """4 * la * lb on `cell`, la/lb the barycentric weights of `face` ends."""
        i = int(np.nonzero(self.mesh.cell_faces[cell] == face)[0][0])
        la, lb = (i + 1) % 3, (i + 2) % 3
        return 4.0 * bary[..., la] * bary[..., lb]


def _face_bubble_weighted_mass(degree):
    """int_{-1/2}^{1/2} s^(m+m') (1 - 4 s^2) ds, exact."""
    n = degree + 1
    W = np.zeros((n, n))
    for k in range(n):
        for l in range(n):
            a = k + l
            if a % 2 == 0:
                W[k, l] = 0.5 ** a * (1.0 / (a + 1) - 1.0 / (a + 3))
    return W


def lagrange_interpolant(mesh, degree, func, zero_boundary=True):
    """Continuous piecewise-P^degree interpolant of `func` at the Lagrange nodes.

    With zero_boundary the boundary nodal values are forced to 0, producing an
    H1_0-conforming piecewise polynomial. Returns a BrokenPoly (continuous by
    construction).
    """
    layer = LagrangeLayer(mesh, degree)
    nodal = np.asarray(func(layer.coords), dtype=float)
    if zero_boundary:
        nodal = np.where(layer.boundary, 0.0, nodal)
    phys = np.einsum("la,tad->tld", layer.lattice_bary, mesh.cell_vertices())
    V = cell_basis_values(mesh, degree, phys)
    coeffs = np.linalg.solve(V, nodal[layer.cell_nodes][..., None])[..., 0]
    return BrokenPoly(mesh, degree, coeffs)


class Smoother:
    """Stabilized bubble smoother for one space, assembled as a sparse matrix.

    Parameters
    ----------
    space : HHOSpace
    averaging : {'mean', 'scott-zhang'}
        Nodal rule of the averaging operator: arithmetic mean over the cells
        containing the node, or the single lowest-index cell.
    """

    def __init__(self, space, averaging="mean"):
        if averaging not in ("mean", "scott-zhang"):
            raise ValueError(f"unknown averaging variant {averaging!r}")
        self.space = space
        self.averaging_variant = averaging
        mesh, p = space.mesh, space.p
        self.degree = space.degree_star
        self.nD = space_dimension(self.degree)

        self._build_lattice_tables()
        self._build_reconstruction_matrix()
        self._build_averaging_matrices()
        self._build_face_trace_matrix()
        self._build_face_bubble_matrix()
        if p >= 1:
            self._build_cell_bubble_matrix()
        self._compose()

    # -- reference and per-cell tables ------------------------------------

    def _build_lattice_tables(self):
        space, mesh = self.space, self.space.mesh
        D = self.degree
        self.lat_bary = lattice_multis(D) / D
        phys = np.einsum("la,tad->tld", self.lat_bary, mesh.cell_vertices())
        V = cell_basis_values(mesh, D, phys)
        self.invV_D = np.linalg.inv(V)
        self.phiK_lat = BubbleSet.cell_bubble(self.lat_bary)  # (nD,)
        self.phiF_lat = np.stack(
            [4.0 * self.lat_bary[:, (i + 1) % 3] * self.lat_bary[:, (i + 2) % 3]
             for i in range(3)]
        )  # (3, nD)

        lat1 = lattice_multis(space.p + 1) / (space.p + 1)
        phys1 = np.einsum("la,tad->tld", lat1, mesh.cell_vertices())
        V1 = cell_basis_values(mesh, space.p + 1, phys1)
        self.invV_1 = np.linalg.inv(V1)

    def _build_reconstruction_matrix(self):
        """HHO dof vector -> broken degree-(p+1) coefficients of R."""
        space = self.space
        T, n1, nloc = space.mesh.num_cells, space.n1, space.nloc
        rows = np.broadcast_to(
            (np.arange(T)[:, None] * n1 + np.arange(n1))[:, :, None],
            (T, n1, nloc),
        )
        cols = np.broadcast_to(space.local_dof_ids[:, None, :], (T, n1, nloc))
        mask = cols >= 0
        self.recon_matrix = sparse.coo_matrix(
            (space.G[mask], (rows[mask], cols[mask])),
            shape=(T * n1, space.num_dofs),
        ).tocsr()

    def _build_averaging_matrices(self):
        """Nodal averaging on interior degree-(p+1) nodes, then re-expansion."""
        space, mesh = self.space, self.space.mesh
        T, n1 = mesh.num_cells, space.n1
        layer = LagrangeLayer(mesh, space.p + 1)
        self.layer1 = layer
        gids = layer.cell_nodes  # (T, n1)
        cell_ids = np.broadcast_to(np.arange(T)[:, None], gids.shape)

        interior = ~layer.boundary[gids]
        if self.averaging_variant == "mean":
            weight = 1.0 / layer.counts[gids]
            take = interior
        else:
            weight = np.ones_like(gids, dtype=float)
            take = interior & (cell_ids == layer.min_cell[gids])

        # rows: interior node rank, cols: broken p+1 coefficients of the cell
        phys = layer.coords[gids]  # (T, n1, 2)
        basis_at_nodes = cell_basis_values(mesh, space.p + 1, phys)  # (T,n1,n1)
        t_idx, l_idx = np.nonzero(take)
        rows = np.repeat(layer.interior_index[gids[t_idx, l_idx]], n1)
        cols = (t_idx[:, None] * n1 + np.arange(n1)).ravel()
        data = (basis_at_nodes[t_idx, l_idx] * weight[t_idx, l_idx, None]).ravel()
        self._avg = sparse.coo_matrix(
            (data, (rows, cols)), shape=(layer.num_interior, T * n1)
        ).tocsr()

        # nodal values (zero on the boundary) back to broken p+1 coefficients
        t_idx, l_idx = np.nonzero(interior)
        rows = (t_idx[:, None] * n1 + np.arange(n1)).ravel()
        cols = np.repeat(layer.interior_index[gids[t_idx, l_idx]], n1)
        data = self.invV_1[t_idx, :, l_idx].ravel()
        self._expand = sparse.coo_matrix(
            (data, (rows, cols)), shape=(T * n1, layer.num_interior)
        ).tocsr()

    def _build_face_trace_matrix(self):
        """Broken p+1 coefficients -> degree-(p+1) face coefficients of the trace."""
        space, mesh = self.space, self.space.mesh
        p = space.p
        nf1 = p + 2
        faces = mesh.interior_faces
        Ei = len(faces)
        k1 = mesh.face_cells[faces, 0]
        s = np.linspace(-0.5, 0.5, nf1)
        span = mesh.h_face[faces][:, None] * mesh.face_tangents[faces]
        pts = mesh.face_midpoints[faces][:, None, :] + s[None, :, None] * span[:, None, :]
        vf_inv = np.linalg.inv(s[:, None] ** np.arange(nf1))
        cell_vals = cell_basis_values(mesh, p + 1, pts, cells=k1)  # (Ei,nf1,n1)
        blocks = np.einsum("mn,fnj->fmj", vf_inv, cell_vals)
        rows = np.broadcast_to(
            (np.arange(Ei)[:, None] * nf1 + np.arange(nf1))[:, :, None],
            blocks.shape,
        )
        cols = np.broadcast_to(
            (k1[:, None] * space.n1 + np.arange(space.n1))[:, None, :],
            blocks.shape,
        )
        self.trace_matrix = sparse.coo_matrix(
            (blocks.ravel(), (rows.ravel(), cols.ravel())),
            shape=(Ei * nf1, mesh.num_cells * space.n1),
        ).tocsr()

    def _build_face_bubble_matrix(self):
        """Degree-(p+1) face data -> broken degree-D coefficients of B_Sigma."""
        space, mesh = self.space, self.space.mesh
        p, nD = space.p, self.nD
        nf1 = p + 2
        faces = mesh.interior_faces
        Ei = len(faces)

        # B_F solve in the scaled arclength coordinate; h_F cancels between
        # the bubble-weighted mass and the moment matrix
        what_inv = np.linalg.inv(_face_bubble_weighted_mass(p))
        beta_mat = what_inv @ reference_face_mass(p + 1)[: p + 1, :]  # (p+1, nf1)

        if p >= 1:
            layer_p = LagrangeLayer(mesh, p)
            self.layer_p = layer_p
            lp_lat = lagrange_basis_values(p, self.lat_bary)  # (nD, nlat_p)
            s_nodes = np.arange(p + 1) / p - 0.5
            eval_nodes = s_nodes[:, None] ** np.arange(p + 1)  # (p+1, p+1)
            nodal_mat = eval_nodes @ beta_mat  # (p+1, nf1)
            gids_f = layer_p.face_nodes(faces)  # (Ei, p+1)

        data, rows, cols = [], [], []
        col_base = (np.arange(Ei)[:, None, None] * nf1 + np.arange(nf1)).repeat(
            nD, axis=1
        )
        for side in (0, 1):
            K = mesh.face_cells[faces, side]
            il = np.argmax(mesh.cell_faces[K] == faces[:, None], axis=1)
            phiF = self.phiF_lat[il]  # (Ei, nD)
            if p == 0:
                coeff = np.einsum("fab,fb->fa", self.invV_D[K], phiF)
                blocks = coeff[:, :, None] * beta_mat[0][None, None, :]
            else:
                cn = layer_p.cell_nodes[K]  # (Ei, nlat_p)
                match = cn[:, :, None] == gids_f[:, None, :]
                lpos = np.argmax(match, axis=1)  # (Ei, p+1)
                zvals = (
                    lp_lat[:, lpos].transpose(1, 0, 2) * phiF[:, :, None]
                )  # (Ei, nD, p+1)
                blocks = np.einsum(
                    "fab,fbz,zl->fal", self.invV_D[K], zvals, nodal_mat
                )
            row_base = K[:, None, None] * nD + np.arange(nD)[None, :, None]
            rows.append(np.broadcast_to(row_base, blocks.shape).ravel())
            cols.append(np.broadcast_to(col_base, blocks.shape).ravel())
            data.append(blocks.ravel())
        self.face_bubble_matrix = sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(mesh.num_cells * nD, Ei * nf1),
        ).tocsr()

    def _build_cell_bubble_matrix(self):
        """Broken degree-D data -> broken degree-D coefficients of B_M (p >= 1)."""
        space, mesh = self.space, self.space.mesh
        p, nD, D = space.p, self.nD, self.degree
        npm1 = space_dimension(p - 1)
        w = space.cell_qw
        bary = space.rule_cell.points
        phiK_q = BubbleSet.cell_bubble(bary)  # (Q,)
        phi_pm1 = cell_basis_values(mesh, p - 1, space.cell_qp)
        phiD = cell_basis_values(mesh, D, space.cell_qp)
        W = symmetrize(
            np.einsum("tq,q,tqm,tqn->tmn", w, phiK_q, phi_pm1, phi_pm1)
        )
        mom = np.einsum("tq,tqm,tqn->tmn", w, phi_pm1, phiD)
        sol = np.linalg.solve(W, mom)  # (T, npm1, nD)

        phys = np.einsum("la,tad->tld", self.lat_bary, mesh.cell_vertices())
        phi_pm1_lat = cell_basis_values(mesh, p - 1, phys)  # (T, nD, npm1)
        lat_vals = phi_pm1_lat * self.phiK_lat[None, :, None]
        blocks = np.einsum("tab,tbm,tmn->tan", self.invV_D, lat_vals, sol)

        T = mesh.num_cells
        rows = np.broadcast_to(
            (np.arange(T)[:, None] * nD + np.arange(nD))[:, :, None], blocks.shape
        )
        cols = np.broadcast_to(
            (np.arange(T)[:, None] * nD + np.arange(nD))[:, None, :], blocks.shape
        )
        self.cell_bubble_matrix = sparse.coo_matrix(
            (blocks.ravel(), (rows.ravel(), cols.ravel())),
            shape=(T * nD, T * nD),
        ).tocsr()

    def _compose(self):
        space, mesh = self.space, self.space.mesh
        T, p = mesh.num_cells, space.p
        n1, nc, nf = space.n1, space.nc, space.nf
        Ei = mesh.num_interior_faces
        nf1 = p + 2

        def pad(n_small, n_big):
            return sparse.eye(n_big, n_small, format="csr")

        self._pad_cell = sparse.kron(sparse.eye(T), pad(nc, n1), format="csr")
        self._pad_1D = sparse.kron(sparse.eye(T), pad(n1, self.nD), format="csr")
        self._pad_face = sparse.kron(sparse.eye(Ei), pad(nf, nf1), format="csr")
        self._cell_sel = sparse.eye(T * nc, space.num_dofs, format="csr")
        self._face_sel = sparse.eye(
            Ei * nf, space.num_dofs, k=space.num_cell_dofs, format="csr"
        )
        self._matrix = None

    # -- application -------------------------------------------------------

    def _averaging_vec(self, vec):
        """Broken p+1 coefficients of the averaged reconstruction."""
        return self._expand @ (self._avg @ (self.recon_matrix @ vec))

    def apply_vector(self, vec):
        """Broken degree-D coefficients of S_H applied to a dof vector."""
        a = self._averaging_vec(vec)
        vsig = self._pad_face @ (self._face_sel @ vec) - self.trace_matrix @ a
        bsig = self.face_bubble_matrix @ vsig
        out = self._pad_1D @ a + bsig
        if self.space.p >= 1:
            vm = self._pad_cell @ (self._cell_sel @ vec) - a
            out = out + self.cell_bubble_matrix @ (self._pad_1D @ vm - bsig)
        return out

    def apply_transpose(self, fvec):
        """S_H^T applied to a broken functional vector (load pullback).

        Same one-ring locality as the forward map, evaluated without forming
        the full smoother matrix.
        """
        u = self._pad_1D.T @ fvec            # weight hitting the averaging term
        g = self.face_bubble_matrix.T @ fvec  # weight hitting the face data
        out = np.zeros(self.space.num_dofs)
        if self.space.p >= 1:
            m = self.cell_bubble_matrix.T @ fvec
            u2 = self._pad_1D.T @ m
            g = g - self.face_bubble_matrix.T @ m
            u = u - u2
            out += self._cell_sel.T @ (self._pad_cell.T @ u2)
        out += self._face_sel.T @ (self._pad_face.T @ g)
        w = u - self.trace_matrix.T @ g
        out += self.recon_matrix.T @ (self._avg.T @ (self._expand.T @ w))
        return out

    @property
    def matrix(self):
        """Full sparse smoother matrix (composed on first use and cached)."""
        if self._matrix is None:
            a = self._expand @ self._avg @ self.recon_matrix
            vsig = self._pad_face @ self._face_sel - self.trace_matrix @ a
            bsig = self.face_bubble_matrix @ vsig
            m = self._pad_1D @ a + bsig
            if self.space.p >= 1:
                vm = self._pad_cell @ self._cell_sel - a
                m = m + self.cell_bubble_matrix @ (self._pad_1D @ vm - bsig)
            self._matrix = m.tocsr()
        return self._matrix

    def apply(self, field):
        """Smoothed field: H1_0-conforming broken polynomial of degree 2+max(p,1)."""
        vec = self.space.vector_from_field(field)
        coeffs = self.apply_vector(vec).reshape(self.space.mesh.num_cells, self.nD)
        return BrokenPoly(self.space.mesh, self.degree, coeffs)

    def averaging(self, field):
        """Averaged reconstruction: continuous piecewise P^{p+1}, zero on walls."""
        vec = self.space.vector_from_field(field)
        coeffs = self._averaging_vec(vec).reshape(-1, self.space.n1)
        return BrokenPoly(self.space.mesh, self.space.p + 1, coeffs)

    def nodal_average(self, bp):
        """Averaging applied to an arbitrary degree-(p+1) broken polynomial."""
        if bp.degree != self.space.p + 1:
            raise ValueError("nodal_average expects a degree-(p+1) broken polynomial")
        coeffs = (self._expand @ (self._avg @ bp.coeffs.ravel())).reshape(
            -1, self.space.n1
        )
        return BrokenPoly(self.space.mesh, self.space.p + 1, coeffs)

    def bubble_cell(self, v):
        """B_M v: element-bubble correction with cell moments of v up to p-1."""
        if self.space.p == 0:
            return BrokenPoly.zero(self.space.mesh, self.degree)
        vD = self.space.project_cell(v, degree=self.degree)
        coeffs = (self.cell_bubble_matrix @ vD.coeffs.ravel()).reshape(-1, self.nD)
        return BrokenPoly(self.space.mesh, self.degree, coeffs)

    def bubble_face(self, v):
        """B_Sigma v: face-bubble lift preserving interior-face moments up to p."""
        vS = self.space.project_face(v, degree=self.space.p + 1)
        coeffs = (self.face_bubble_matrix @ vS.ravel()).reshape(-1, self.nD)
        return BrokenPoly(self.space.mesh, self.degree, coeffs)

    def bubble_smoother(self, v_cell, v_face):
        """B(v_M, v_Sigma) = B_Sigma v_Sigma + B_M(v_M - B_Sigma v_Sigma)."""
        bsig = self.bubble_face(v_face)
        if self.space.p == 0:
            return bsig
        vD = self.space.project_cell(v_cell, degree=self.degree)
        diff = vD.coeffs.ravel() - bsig.coeffs.ravel()
        corr = (self.cell_bubble_matrix @ diff).reshape(-1, self.nD)
        return BrokenPoly(self.space.mesh, self.degree, bsig.coeffs + corr)


def conformity_residual(mesh, bp, samples=5):
    """Max trace mismatch across interior faces plus max boundary trace.

    The computable content of mapping into H1_0: jumps vanish and the trace
    on the domain boundary is zero.
    """
    ts = (np.arange(samples) + 0.5) / samples
    worst = 0.0
    for boundary in (False, True):
        faces = (
            np.nonzero(mesh.boundary_face_mask)[0] if boundary else mesh.interior_faces
        )
        if not len(faces):
            continue
        ends = mesh.vertices[mesh.faces[faces]]
        pts = ends[:, None, 0, :] + ts[None, :, None] * (
            ends[:, 1, :] - ends[:, 0, :]
        )[:, None, :]
        v1 = bp.values_at(pts, cells=mesh.face_cells[faces, 0])
        if boundary:
            worst = max(worst, float(np.abs(v1).max()))
        else:
            v2 = bp.values_at(pts, cells=mesh.face_cells[faces, 1])
            worst = max(worst, float(np.abs(v1 - v2).max()))
    return worst


def jump_matrix(mesh, degree, samples=5):
    """Sparse map from broken coefficients to face jumps and boundary traces."""
    n = space_dimension(degree)
    ts = (np.arange(samples) + 0.5) / samples
    rows, cols, data = [], [], []
    row0 = 0
    for boundary in (False, True):
        faces = (
            np.nonzero(mesh.boundary_face_mask)[0] if boundary else mesh.interior_faces
        )
        if not len(faces):
            continue
        ends = mesh.vertices[mesh.faces[faces]]
        pts = ends[:, None, 0, :] + ts[None, :, None] * (
            ends[:, 1, :] - ends[:, 0, :]
        )[:, None, :]
        sides = (0,) if boundary else (0, 1)
        for side in sides:
            K = mesh.face_cells[faces, side]
            vals = cell_basis_values(mesh, degree, pts, cells=K)  # (F, s, n)
            sign = 1.0 if side == 0 else -1.0
            r = (row0 + np.arange(len(faces))[:, None, None] * samples
                 + np.arange(samples)[None, :, None])
            c = (K[:, None, None] * n + np.arange(n)[None, None, :])
            rows.append(np.broadcast_to(r, vals.shape).ravel())
            cols.append(np.broadcast_to(c, vals.shape).ravel())
            data.append(sign * vals.ravel())
        row0 += len(faces) * samples
    return sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row0, mesh.num_cells * n),
    ).tocsr()


def broken_stiffness_matrix(space, degree):
    """Block-diagonal stiffness of the broken degree-`degree` basis."""
    mesh = space.mesh
    from .polyquad import cell_basis_gradients

    n = space_dimension(degree)
    grads = cell_basis_gradients(mesh, degree, space.cell_qp)
    blocks = symmetrize(
        np.einsum("tq,tqid,tqjd->tij", space.cell_qw, grads, grads)
    )
    T = mesh.num_cells
    rows = np.broadcast_to(
        (np.arange(T)[:, None] * n + np.arange(n))[:, :, None], blocks.shape
    )
    cols = np.broadcast_to(
        (np.arange(T)[:, None] * n + np.arange(n))[:, None, :], blocks.shape
    )
    return sparse.coo_matrix(
        (blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(T * n, T * n)
    ).tocsr()


def moment_residuals(smoother, field):
    """Max violation of the preserved cell and face moments for one field."""
    space, mesh = smoother.space, smoother.space.mesh
    p = space.p
    y = smoother.apply_vector(space.vector_from_field(field)).reshape(-1, smoother.nD)

    cell_res = 0.0
    if p >= 1:
        npm1 = space_dimension(p - 1)
        phi_pm1 = cell_basis_values(mesh, p - 1, space.cell_qp)
        phiD = cell_basis_values(mesh, smoother.degree, space.cell_qp)
        mom_smooth = np.einsum(
            "tq,tqm,tqn,tn->tm", space.cell_qw, phi_pm1, phiD, y
        )
        mom_target = np.einsum(
            "tmn,tn->tm", space.mass1[:, :npm1, : space.nc], field.cell_coeffs
        )
        cell_res = float(np.abs(mom_smooth - mom_target).max())

    # face moments, evaluated from the first adjacent cell
    faces = mesh.interior_faces
    from .polyquad import face_basis_values, face_quadrature

    pts, w = face_quadrature(mesh, space.rule_face, faces)
    k1 = mesh.face_cells[faces, 0]
    psi = face_basis_values(mesh, p, faces, pts)
    smooth_vals = BrokenPoly(mesh, smoother.degree, y).values_at(pts, cells=k1)
    mom_smooth = np.einsum("fq,fqm,fq->fm", w, psi, smooth_vals)
    mom_target = (
        mesh.h_face[faces][:, None] * (field.face_coeffs @ space.mhat_p.T)
    )
    face_res = float(np.abs(mom_smooth - mom_target).max())
    return cell_res, face_res


def orthogonality_residual(space, smoother):
    """Max entry of grad(R .)^T (grad R - grad S_H) over all basis pairs.

    The computable content of the algebraic-consistency identity: the broken
    gradient of R is orthogonal to R - S_H for every pair of basis fields.
    """
    RD = smoother._pad_1D @ smoother.recon_matrix
    stiff = broken_stiffness_matrix(space, smoother.degree)
    C = RD.T @ (stiff @ (RD - smoother.matrix))
    return float(np.abs(C.data).max()) if C.nnz else 0.0


def consistency_constant(space, smoother, bform=None, seed=0, maxiter=400):
    """Smallest C with ||grad(R s - S_H s)|| <= C ||s||_b, by power iteration."""
    RD = smoother._pad_1D @ smoother.recon_matrix
    stiff = broken_stiffness_matrix(space, smoother.degree)
    D = RD - smoother.matrix
    A = (D.T @ (stiff @ D)).tocsc()
    B = bform if bform is not None else assemble_bilinear(space, space.A_loc)
    lu = splu(B.tocsc())
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(space.num_dofs)
    lam = 0.0
    for _ in range(maxiter):
        y = lu.solve(A @ x)
        norm = np.sqrt(y @ (B @ y))
        if norm == 0.0:
            return 0.0
        x_new = y / norm
        lam_new = (x_new @ (A @ x_new)) / (x_new @ (B @ x_new))
        if abs(lam_new - lam) <= 1e-10 * max(lam_new, 1e-30):
            lam = lam_new
            break
        x, lam = x_new, lam_new
    return float(np.sqrt(max(lam, 0.0)))
