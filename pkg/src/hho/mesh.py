"""Matching simplicial meshes of polygonal domains.

The mesh is the combinatorial and geometric substrate of the solver: cells,
globally numbered faces with interior/boundary classification, per-cell face
incidence with outward normals, and the size quantities (diameters, inradii)
entering the shape parameter and the face-weighted forms.

Only d = 2 is implemented; d = 3 input is recognized and rejected with
:class:`UnsupportedDimensionError`.
"""

import numpy as np


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class MeshError(ValueError):
    """Invalid mesh data (degenerate cells, broken incidence, bad file)."""


class UnsupportedDimensionError(MeshError):
    """Mesh dimension is typed but not implemented (d = 3 in v1)."""


class SimplicialMesh:
    """Immutable matching simplicial mesh.

    Attributes
    ----------
    dim : int
        Spatial dimension (2).
    vertices : (N, 2) float array
        Vertex coordinates in domain units.
    cells : (T, 3) int array
        Vertex indices per cell, positively oriented.
    faces : (E, 2) int array
        Global faces as sorted vertex pairs, lexicographically ordered.
    face_cells : (E, 2) int array
        Adjacent cells per face, ascending; second entry -1 on boundary.
    cell_faces : (T, 3) int array
        Global face index opposite each local vertex.
    boundary_face_mask : (E,) bool array
    interior_faces : (Ei,) int array
        Global indices of interior faces, ascending.
    face_interior_index : (E,) int array
        Rank within `interior_faces`, -1 for boundary faces.
    volumes, h_cell, r_cell : (T,) float arrays
        Cell areas, diameters, inradii.
    h_face : (E,) float array
        Face diameters.
    normals : (T, 3, 2) float array
        Unit outward normal per (cell, local face).
    barycenters : (T, 2), face_midpoints : (E, 2), face_tangents : (E, 2)
        The tangent points from the lower-index vertex to the higher one.

    The mesh is never mutated after construction and is safe for concurrent
    reads.
    """

    def __init__(self, vertices, cells):
        vertices = np.asarray(vertices, dtype=float)
        cells = np.asarray(cells, dtype=np.int64)
        if vertices.ndim != 2:
            raise MeshError("vertices must be a 2d array of coordinates")
        if vertices.shape[1] == 3:
            raise UnsupportedDimensionError("d = 3 meshes are not implemented in v1")
        if vertices.shape[1] != 2:
            raise MeshError(f"unsupported vertex dimension {vertices.shape[1]}")
        if cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshError("cells must be a (T, 3) array of vertex indices")
        if cells.min(initial=0) < 0 or cells.max(initial=-1) >= len(vertices):
            raise MeshError("cell vertex index out of range")

        self.dim = 2
        self.vertices = vertices
        self.cells = self._orient_positive(vertices, cells)
        self._build_faces()
        self._build_geometry()
        self.vertices.setflags(write=False)
        self.cells.setflags(write=False)

    @staticmethod
    def _orient_positive(vertices, cells):
        p = vertices[cells]
        area2 = _cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if np.any(area2 == 0.0):
            raise MeshError("degenerate cell with zero area")
        cells = cells.copy()
        flip = area2 < 0.0
        cells[flip] = cells[flip][:, [0, 2, 1]]
        return cells

    def _build_faces(self):
        c = self.cells
        # local face i is the edge opposite local vertex i
        edges = np.stack(
            [c[:, [1, 2]], c[:, [2, 0]], c[:, [0, 1]]], axis=1
        ).reshape(-1, 2)
        edges = np.sort(edges, axis=1)
        faces, inverse = np.unique(edges, axis=0, return_inverse=True)
        self.faces = faces
        self.cell_faces = inverse.reshape(-1, 3)

        num_faces = len(faces)
        counts = np.bincount(inverse, minlength=num_faces)
        if counts.max(initial=0) > 2:
            raise MeshError("face shared by more than two cells")

        flat_faces = self.cell_faces.ravel()
        flat_cells = np.repeat(np.arange(len(c)), 3)
        order = np.lexsort((flat_cells, flat_faces))
        ff, fc = flat_faces[order], flat_cells[order]
        first = np.ones(len(ff), dtype=bool)
        first[1:] = ff[1:] != ff[:-1]
        face_cells = np.full((num_faces, 2), -1, dtype=np.int64)
        face_cells[ff[first], 0] = fc[first]
        face_cells[ff[~first], 1] = fc[~first]
        self.face_cells = face_cells

        self.boundary_face_mask = counts == 1
        self.interior_faces = np.nonzero(counts == 2)[0]
        self.face_interior_index = np.full(num_faces, -1, dtype=np.int64)
        self.face_interior_index[self.interior_faces] = np.arange(
            len(self.interior_faces)
        )

    def _build_geometry(self):
        p = self.vertices[self.cells]  # (T, 3, 2)
        self.volumes = 0.5 * _cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if np.any(self.volumes <= 0.0):
            raise MeshError("non-positive cell volume after orientation")
        self.barycenters = p.mean(axis=1)

        fv = self.vertices[self.faces]
        self.h_face = np.linalg.norm(fv[:, 1] - fv[:, 0], axis=1)
        if np.any(self.h_face == 0.0):
            raise MeshError("zero-length face")
        self.face_midpoints = 0.5 * (fv[:, 0] + fv[:, 1])
        self.face_tangents = (fv[:, 1] - fv[:, 0]) / self.h_face[:, None]

        edge_len = np.stack(
            [np.linalg.norm(p[:, (i + 2) % 3] - p[:, (i + 1) % 3], axis=1)
             for i in range(3)],
            axis=1,
        )
        self.h_cell = edge_len.max(axis=1)
        perimeter = edge_len.sum(axis=1)
        self.r_cell = 2.0 * self.volumes / perimeter
        if np.any(self.r_cell <= 0.0):
            raise MeshError("degenerate cell: zero inradius")

        normals = np.empty((len(self.cells), 3, 2))
        for i in range(3):
            a = p[:, (i + 1) % 3]
            b = p[:, (i + 2) % 3]
            e = b - a
            n = np.stack([e[:, 1], -e[:, 0]], axis=1)
            n /= np.linalg.norm(n, axis=1)[:, None]
            outward = np.einsum("td,td->t", n, 0.5 * (a + b) - p[:, i]) > 0.0
            n[~outward] *= -1.0
            normals[:, i] = n
        self.normals = normals

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_cells(self):
        return len(self.cells)

    @property
    def num_faces(self):
        return len(self.faces)

    @property
    def num_interior_faces(self):
        return len(self.interior_faces)

    def cell_vertices(self):
        """Vertex coordinates per cell, shape (T, 3, 2)."""
        return self.vertices[self.cells]

    def barycentric_coordinates(self, cells, points):
        """Barycentric coordinates of `points` (..., 2) w.r.t. `cells`."""
        p = self.vertices[self.cells[cells]]  # (..., 3, 2)
        v0 = p[..., 0, :]
        T = np.stack([p[..., 1, :] - v0, p[..., 2, :] - v0], axis=-1)
        rhs = points - v0
        lam12 = np.linalg.solve(T, rhs[..., None])[..., 0]
        lam0 = 1.0 - lam12.sum(axis=-1)
        return np.concatenate([lam0[..., None], lam12], axis=-1)

    def __repr__(self):
        return (
            f"SimplicialMesh(d={self.dim}, {self.num_vertices} vertices, "
            f"{self.num_cells} cells, {self.num_faces} faces)"
        )


def build_unit_square(n):
    """Uniform n-by-n triangulation of the unit square.

    Every grid square is split along the same lower-left to upper-right
    diagonal so that generated tables are reproducible bit-for-bit.
    Mesh size is sqrt(2)/n.
    """
    if int(n) != n or n < 1:
        raise MeshError("n must be a positive integer")
    n = int(n)
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    vertices = np.stack([ii.ravel() / n, jj.ravel() / n], axis=1)

    def vid(i, j):
        return i * (n + 1) + j

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    lower = np.stack([a, b, c], axis=1)
    upper = np.stack([a, c, d], axis=1)
    cells = np.concatenate([lower, upper])
    return SimplicialMesh(vertices, cells)


def build_lshape(n):
    """L-shaped domain (-1,1)^2 minus the quadrant x > 0, y < 0.

    `n` squares per unit side, same diagonal convention as
    :func:`build_unit_square`.
    """
    if int(n) != n or n < 1:
        raise MeshError("n must be a positive integer")
    n = int(n)
    m = 2 * n
    ii, jj = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
    vertices = np.stack([ii.ravel() / n - 1.0, jj.ravel() / n - 1.0], axis=1)

    def vid(i, j):
        return i * (m + 1) + j

    i, j = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    i, j = i.ravel(), j.ravel()
    cx = (i + 0.5) / n - 1.0
    cy = (j + 0.5) / n - 1.0
    keep = ~((cx > 0.0) & (cy < 0.0))
    i, j = i[keep], j[keep]
    a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    cells = np.concatenate([np.stack([a, b, c], axis=1),
                            np.stack([a, c, d], axis=1)])
    used = np.unique(cells)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SimplicialMesh(vertices[used], remap[cells])


def refine_red(mesh):
    """Uniform red refinement: each triangle split into 4 congruent children.

    Children are built from edge midpoints; the maximal mesh size halves
    exactly and the shape parameter is unchanged in 2d.
    """
    if mesh.dim != 2:
        raise UnsupportedDimensionError("red refinement implemented for d = 2 only")
    nv = mesh.num_vertices
    midpoints = mesh.face_midpoints
    vertices = np.concatenate([mesh.vertices, midpoints])
    m = nv + mesh.cell_faces  # (T, 3): midpoint of edge opposite vertex i
    c = mesh.cells
    children = np.concatenate([
        np.stack([c[:, 0], m[:, 2], m[:, 1]], axis=1),
        np.stack([c[:, 1], m[:, 0], m[:, 2]], axis=1),
        np.stack([c[:, 2], m[:, 1], m[:, 0]], axis=1),
        m,
    ])
    return SimplicialMesh(vertices, children)


def shape_parameter(mesh):
    """Largest gamma with gamma * r_K <= h_K for all cells: min_K h_K / r_K."""
    if np.any(mesh.r_cell <= 0.0):
        raise MeshError("degenerate cell: zero inradius")
    return float(np.min(mesh.h_cell / mesh.r_cell))


def check_matching(mesh, tol=1e-12):
    """Verify the matching-mesh invariants; return a list of violations.

    Checks: face incidence counts, opposite normals on interior faces,
    positive volumes and inradii, h_F <= h_K, the divergence-theorem closure
    sum_F |F| n_K(F) = 0 per cell, and hanging vertices (a vertex lying in
    the closure of a cell without being one of its vertices).
    """
    problems = []
    counts = np.bincount(mesh.cell_faces.ravel(), minlength=mesh.num_faces)
    if counts.min(initial=2) < 1 or counts.max(initial=0) > 2:
        problems.append("face incidence count outside {1, 2}")

    for f in mesh.interior_faces:
        k1, k2 = mesh.face_cells[f]
        i1 = int(np.nonzero(mesh.cell_faces[k1] == f)[0][0])
        i2 = int(np.nonzero(mesh.cell_faces[k2] == f)[0][0])
        if np.linalg.norm(mesh.normals[k1, i1] + mesh.normals[k2, i2]) > tol:
            problems.append(f"normals on interior face {f} are not opposite")
            break

    if np.any(mesh.volumes <= 0.0):
        problems.append("non-positive cell volume")
    if np.any(mesh.r_cell <= 0.0) or np.any(mesh.r_cell > mesh.h_cell):
        problems.append("inradius out of range (0, h_K]")
    if np.any(mesh.h_face[mesh.cell_faces] > mesh.h_cell[:, None] * (1 + tol)):
        problems.append("face diameter exceeds cell diameter")

    lengths = mesh.h_face[mesh.cell_faces]  # (T, 3)
    closure = np.einsum("tf,tfd->td", lengths, mesh.normals)
    if np.abs(closure).max(initial=0.0) > tol * max(1.0, mesh.h_cell.max()):
        problems.append("sum of |F| n_K over cell faces does not vanish")

    # hanging vertices: every vertex inside closure(K) must be a vertex of K
    for k in range(mesh.num_cells):
        lam = mesh.barycentric_coordinates(
            np.full(mesh.num_vertices, k), mesh.vertices
        )
        inside = np.all(lam >= -1e-9, axis=1)
        inside[mesh.cells[k]] = False
        hanging = np.nonzero(inside)[0]
        if len(hanging):
            problems.append(
                f"vertex {hanging[0]} hangs on cell {k} (mesh is not matching)"
            )
            break
    return problems


def read_mesh_file(path):
    """Read the plain-text node/element format.

    Line 1: ``<num_vertices> <num_cells>``; then one vertex per line
    (coordinates), then one cell per line (0-based vertex indices).
    Blank lines and ``#`` comments are ignored.
    """
    with open(path) as fh:
        raw = fh.readlines()
    lines = []
    for lineno, text in enumerate(raw, start=1):
        stripped = text.split("#", 1)[0].strip()
        if stripped:
            lines.append((lineno, stripped))
    if not lines:
        raise MeshError(f"{path}: empty mesh file")

    lineno, header = lines[0]
    parts = header.split()
    if len(parts) != 2:
        raise MeshError(f"{path}:{lineno}: header must be '<nv> <nc>'")
    try:
        nv, nc = int(parts[0]), int(parts[1])
    except ValueError:
        raise MeshError(f"{path}:{lineno}: non-integer header counts") from None
    if len(lines) != 1 + nv + nc:
        raise MeshError(
            f"{path}: expected {1 + nv + nc} data lines, found {len(lines)}"
        )

    vdim = len(lines[1][1].split()) if nv else 2
    if vdim == 3:
        raise UnsupportedDimensionError(f"{path}: 3d mesh files are not supported in v1")
    vertices = np.empty((nv, 2))
    for row, (lineno, text) in enumerate(lines[1:1 + nv]):
        parts = text.split()
        if len(parts) != 2:
            raise MeshError(f"{path}:{lineno}: expected 2 coordinates")
        try:
            vertices[row] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad coordinate") from None

    cells = np.empty((nc, 3), dtype=np.int64)
    for row, (lineno, text) in enumerate(lines[1 + nv:]):
        parts = text.split()
        if len(parts) != 3:
            raise MeshError(f"{path}:{lineno}: expected 3 vertex indices")
        try:
            cells[row] = [int(p) for p in parts]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad vertex index") from None
    return SimplicialMesh(vertices, cells)


def write_mesh_file(mesh, path):
    """Write a mesh in the plain-text node/element format."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.num_vertices} {mesh.num_cells}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for a, b, c in mesh.cells:
            fh.write(f"{a} {b} {c}\n")
