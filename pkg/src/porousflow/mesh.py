"""Finite-volume and space-time meshes.

Two discrete geometries back the solvers: admissible orthogonal cell
meshes (two-point flux, transmissivity m_sigma/d_sigma) for the finite
volume scheme, and simplicial meshes of the time-extended domain
(0,1) x Omega for the elliptic step of the saddle-point solver.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "MeshError",
    "FVMesh",
    "SpatialGrid",
    "SpaceTimeMesh",
    "build_cartesian_fv_mesh",
    "build_spatial_grid",
    "build_space_time_mesh",
    "validate_mesh",
    "write_fv_mesh",
    "read_fv_mesh",
]

ORTHOGONALITY_TOL = 1e-12
PARTITION_RTOL = 1e-12


class MeshError(ValueError):
    """Invalid construction arguments or malformed mesh files."""


def _as_box(domain, dim=None):
    box = np.asarray(domain, dtype=float)
    if box.ndim == 1:
        box = box[None, :]
    if dim is not None and box.shape[0] != dim:
        raise MeshError(f"domain box has dimension {box.shape[0]}, expected {dim}")
    if box.shape[1] != 2 or np.any(box[:, 1] <= box[:, 0]):
        raise MeshError(f"degenerate domain box: {domain!r}")
    return box


class FVMesh:
    """Admissible cell mesh: cells, inner edges with transmissivities, boundary edges.

    Inner edge normals point from cell K towards cell L and must agree with
    (x_L - x_K)/d_sigma for the two-point flux to be consistent.
    """

    def __init__(self, dim, cell_centers, cell_measures,
                 edge_cells, edge_measures, edge_distances, edge_normals,
                 bedge_cells, bedge_points, bedge_measures, bedge_distances,
                 domain_measure=None):
        self.dim = int(dim)
        self.cell_centers = np.asarray(cell_centers, float).reshape(-1, self.dim)
        self.cell_measures = np.asarray(cell_measures, float).ravel()
        self.edge_cells = np.asarray(edge_cells, int).reshape(-1, 2)
        self.edge_measures = np.asarray(edge_measures, float).ravel()
        self.edge_distances = np.asarray(edge_distances, float).ravel()
        self.edge_normals = np.asarray(edge_normals, float).reshape(-1, self.dim)
        self.bedge_cells = np.asarray(bedge_cells, int).ravel()
        self.bedge_points = np.asarray(bedge_points, float).reshape(-1, self.dim)
        self.bedge_measures = np.asarray(bedge_measures, float).ravel()
        self.bedge_distances = np.asarray(bedge_distances, float).ravel()
        self.edge_transmissivities = self.edge_measures / self.edge_distances
        self.domain_measure = domain_measure

    @property
    def n_cells(self):
        return self.cell_centers.shape[0]

    @property
    def n_edges(self):
        return self.edge_cells.shape[0]

    def __repr__(self):
        return (f"FVMesh(dim={self.dim}, cells={self.n_cells}, "
                f"inner_edges={self.n_edges}, boundary_edges={len(self.bedge_cells)})")


def build_cartesian_fv_mesh(nx, ny=None, domain=((0.0, 1.0), (0.0, 1.0))):
    """Uniform rectangular cell mesh of an axis-aligned box (1D if ny is None)."""
    if ny is None:
        return _build_interval_mesh(nx, domain)
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 1:
        raise MeshError(f"cell counts must be >= 1, got nx={nx}, ny={ny}")
    box = _as_box(domain, 2)
    hx = (box[0, 1] - box[0, 0]) / nx
    hy = (box[1, 1] - box[1, 0]) / ny

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    # cell index K = j*nx + i, x varying fastest
    xc = box[0, 0] + (ii + 0.5) * hx
    yc = box[1, 0] + (jj + 0.5) * hy
    centers = np.column_stack([xc.T.ravel(), yc.T.ravel()])
    measures = np.full(nx * ny, hx * hy)

    def cid(i, j):
        return j * nx + i

    e_cells, e_meas, e_dist, e_norm = [], [], [], []
    if nx > 1:
        i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="ij")
        K = cid(i, j).ravel()
        e_cells.append(np.column_stack([K, K + 1]))
        e_meas.append(np.full(K.size, hy))
        e_dist.append(np.full(K.size, hx))
        e_norm.append(np.tile([1.0, 0.0], (K.size, 1)))
    if ny > 1:
        i, j = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="ij")
        K = cid(i, j).ravel()
        e_cells.append(np.column_stack([K, K + nx]))
        e_meas.append(np.full(K.size, hx))
        e_dist.append(np.full(K.size, hy))
        e_norm.append(np.tile([0.0, 1.0], (K.size, 1)))
    edge_cells = np.concatenate(e_cells) if e_cells else np.zeros((0, 2), int)
    edge_meas = np.concatenate(e_meas) if e_meas else np.zeros(0)
    edge_dist = np.concatenate(e_dist) if e_dist else np.zeros(0)
    edge_norm = np.concatenate(e_norm) if e_norm else np.zeros((0, 2))

    b_cells, b_pts, b_meas, b_dist = [], [], [], []
    jside = np.arange(ny)
    iside = np.arange(nx)
    ycs = box[1, 0] + (jside + 0.5) * hy
    xcs = box[0, 0] + (iside + 0.5) * hx
    # left / right
    b_cells += [cid(0, jside), cid(nx - 1, jside)]
    b_pts += [np.column_stack([np.full(ny, box[0, 0]), ycs]),
              np.column_stack([np.full(ny, box[0, 1]), ycs])]
    b_meas += [np.full(ny, hy), np.full(ny, hy)]
    b_dist += [np.full(ny, hx / 2), np.full(ny, hx / 2)]
    # bottom / top
    b_cells += [cid(iside, 0), cid(iside, ny - 1)]
    b_pts += [np.column_stack([xcs, np.full(nx, box[1, 0])]),
              np.column_stack([xcs, np.full(nx, box[1, 1])])]
    b_meas += [np.full(nx, hx), np.full(nx, hx)]
    b_dist += [np.full(nx, hy / 2), np.full(nx, hy / 2)]

    area = (box[0, 1] - box[0, 0]) * (box[1, 1] - box[1, 0])
    return FVMesh(2, centers, measures, edge_cells, edge_meas, edge_dist, edge_norm,
                  np.concatenate(b_cells), np.concatenate(b_pts),
                  np.concatenate(b_meas), np.concatenate(b_dist),
                  domain_measure=area)


def _build_interval_mesh(nx, domain):
    nx = int(nx)
    if nx < 1:
        raise MeshError(f"cell count must be >= 1, got nx={nx}")
    box = _as_box(domain, 1)
    h = (box[0, 1] - box[0, 0]) / nx
    centers = (box[0, 0] + (np.arange(nx) + 0.5) * h)[:, None]
    measures = np.full(nx, h)
    K = np.arange(nx - 1)
    edge_cells = np.column_stack([K, K + 1])
    # edges are points in 1D; their codimension-one measure is 1
    edge_meas = np.ones(nx - 1)
    edge_dist = np.full(nx - 1, h)
    edge_norm = np.ones((nx - 1, 1))
    b_cells = np.array([0, nx - 1])
    b_pts = np.array([[box[0, 0]], [box[0, 1]]])
    b_meas = np.ones(2)
    b_dist = np.full(2, h / 2)
    return FVMesh(1, centers, measures, edge_cells, edge_meas, edge_dist, edge_norm,
                  b_cells, b_pts, b_meas, b_dist,
                  domain_measure=box[0, 1] - box[0, 0])


def validate_mesh(mesh):
    """Check the admissibility invariants; return a list of violation messages."""
    report = []
    if np.any(mesh.cell_measures <= 0):
        report.append("nonpositive cell measure at cells "
                      f"{np.nonzero(mesh.cell_measures <= 0)[0].tolist()}")
    if mesh.n_edges:
        if np.any(mesh.edge_measures <= 0) or np.any(mesh.edge_distances <= 0):
            report.append("nonpositive inner edge measure or distance")
        dx = mesh.cell_centers[mesh.edge_cells[:, 1]] - mesh.cell_centers[mesh.edge_cells[:, 0]]
        err = np.linalg.norm(dx / mesh.edge_distances[:, None] - mesh.edge_normals, axis=1)
        bad = np.nonzero(err > ORTHOGONALITY_TOL)[0]
        if bad.size:
            report.append(f"orthogonality violated on edges {bad.tolist()} "
                          f"(max deviation {err.max():.3e})")
        ta = mesh.edge_measures / mesh.edge_distances
        bad = np.nonzero(ta != mesh.edge_transmissivities)[0]
        if bad.size:
            report.append(f"transmissivity != m_sigma/d_sigma on edges {bad.tolist()}")
        pairs = np.sort(mesh.edge_cells, axis=1)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            report.append("inner edge joining a cell to itself")
        _, counts = np.unique(pairs, axis=0, return_counts=True)
        if np.any(counts > 1):
            report.append("duplicated inner edge (adjacency must be stored once)")
    if mesh.domain_measure is not None:
        total = mesh.cell_measures.sum()
        if abs(total - mesh.domain_measure) > PARTITION_RTOL * abs(mesh.domain_measure):
            report.append(f"cell measures sum to {total!r}, domain measure is "
                          f"{mesh.domain_measure!r}")
    return report


def write_fv_mesh(mesh, path):
    """Plain-text mesh export: CELLS / INNER_EDGES / BOUNDARY_EDGES sections."""
    fmt = "%.17g"
    with open(path, "w") as f:
        f.write(f"CELLS {mesh.n_cells}\n")
        for k in range(mesh.n_cells):
            coords = " ".join(fmt % v for v in mesh.cell_centers[k])
            f.write(f"{k} {coords} {fmt % mesh.cell_measures[k]}\n")
        f.write(f"INNER_EDGES {mesh.n_edges}\n")
        for e in range(mesh.n_edges):
            K, L = mesh.edge_cells[e]
            f.write(f"{K} {L} {fmt % mesh.edge_measures[e]} {fmt % mesh.edge_distances[e]}\n")
        f.write(f"BOUNDARY_EDGES {len(mesh.bedge_cells)}\n")
        for e in range(len(mesh.bedge_cells)):
            coords = " ".join(fmt % v for v in mesh.bedge_points[e])
            f.write(f"{mesh.bedge_cells[e]} {coords} "
                    f"{fmt % mesh.bedge_measures[e]} {fmt % mesh.bedge_distances[e]}\n")


def read_fv_mesh(path, validate=True):
    """Read a mesh written by write_fv_mesh; normals are derived from cell centers."""
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    try:
        mesh = _parse_fv_mesh(lines)
    except MeshError:
        raise
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if validate:
        report = validate_mesh(mesh)
        if report:
            raise MeshError("imported mesh fails validation: " + "; ".join(report))
    return mesh


def _parse_fv_mesh(lines):
    idx = 0

    def section(name):
        nonlocal idx
        parts = lines[idx].split()
        if len(parts) != 2 or parts[0] != name or not parts[1].isdigit():
            raise MeshError(f"expected '{name} <count>' at line {idx + 1}, got {lines[idx]!r}")
        idx += 1
        return int(parts[1])

    n_cells = section("CELLS")
    if n_cells < 1:
        raise MeshError("mesh must contain at least one cell")
    dim = len(lines[idx].split()) - 2
    if dim not in (1, 2, 3):
        raise MeshError(f"cannot infer dimension from cell row {lines[idx]!r}")
    centers = np.zeros((n_cells, dim))
    measures = np.zeros(n_cells)
    for _ in range(n_cells):
        parts = lines[idx].split()
        k = int(parts[0])
        centers[k] = [float(v) for v in parts[1:1 + dim]]
        measures[k] = float(parts[1 + dim])
        idx += 1

    n_e = section("INNER_EDGES")
    edge_cells = np.zeros((n_e, 2), int)
    edge_meas = np.zeros(n_e)
    edge_dist = np.zeros(n_e)
    for e in range(n_e):
        parts = lines[idx].split()
        edge_cells[e] = [int(parts[0]), int(parts[1])]
        edge_meas[e] = float(parts[2])
        edge_dist[e] = float(parts[3])
        idx += 1
    if n_e:
        dx = centers[edge_cells[:, 1]] - centers[edge_cells[:, 0]]
        normals = dx / edge_dist[:, None]
    else:
        normals = np.zeros((0, dim))

    n_b = section("BOUNDARY_EDGES")
    b_cells = np.zeros(n_b, int)
    b_pts = np.zeros((n_b, dim))
    b_meas = np.zeros(n_b)
    b_dist = np.zeros(n_b)
    for e in range(n_b):
        parts = lines[idx].split()
        b_cells[e] = int(parts[0])
        b_pts[e] = [float(v) for v in parts[1:1 + dim]]
        b_meas[e] = float(parts[1 + dim])
        b_dist[e] = float(parts[2 + dim])
        idx += 1

    return FVMesh(dim, centers, measures, edge_cells, edge_meas, edge_dist, normals,
                  b_cells, b_pts, b_meas, b_dist,
                  domain_measure=measures.sum())


class SpatialGrid:
    """Structured simplicial grid of Omega used by the saddle-point solver.

    Nodes are the tensor lattice of the box; each rectangle is split along
    the same diagonal (lowest-index corner to highest), which keeps the
    extruded space-time prisms face-compatible.
    """

    def __init__(self, dim, nodes, simplices, box, shape):
        self.dim = dim
        self.nodes = nodes                      # (n_sp, dim)
        self.simplices = simplices              # (n_t, dim+1), rows ascending
        self.box = box
        self.shape = shape                      # (nx,) or (nx, ny) cells
        coords = nodes[simplices]               # (n_t, dim+1, dim)
        if dim == 1:
            self.simplex_measures = np.abs(coords[:, 1, 0] - coords[:, 0, 0])
        else:
            e1 = coords[:, 1] - coords[:, 0]
            e2 = coords[:, 2] - coords[:, 0]
            self.simplex_measures = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        w = np.zeros(len(nodes))
        np.add.at(w, simplices, (self.simplex_measures / (dim + 1))[:, None])
        self.node_weights = w                   # lumped nodal quadrature weights
        n_cells = int(np.prod(shape))
        self.simplex_cell = np.repeat(np.arange(n_cells), len(simplices) // n_cells)

    @property
    def n_nodes(self):
        return len(self.nodes)

    def cell_averages(self, nodal):
        """Average a nodal (P1) field over the underlying rectangular cells."""
        nodal = np.asarray(nodal, float)
        means = nodal[self.simplices].mean(axis=1)     # exact P1 average per simplex
        out_shape = (int(np.prod(self.shape)),) + nodal.shape[1:]
        num = np.zeros(out_shape)
        den = np.zeros(len(num))
        np.add.at(num, self.simplex_cell,
                  means * self.simplex_measures.reshape((-1,) + (1,) * (nodal.ndim - 1)))
        np.add.at(den, self.simplex_cell, self.simplex_measures)
        return num / den.reshape((-1,) + (1,) * (nodal.ndim - 1))


def build_spatial_grid(nx, ny=None, domain=((0.0, 1.0), (0.0, 1.0))):
    """Triangulated tensor grid (segments in 1D, two triangles per cell in 2D)."""
    nx = int(nx)
    if nx < 1:
        raise MeshError("cell count must be >= 1")
    if ny is None:
        box = _as_box(domain, 1)
        nodes = np.linspace(box[0, 0], box[0, 1], nx + 1)[:, None]
        i = np.arange(nx)
        simplices = np.column_stack([i, i + 1])
        return SpatialGrid(1, nodes, simplices, box, (nx,))
    ny = int(ny)
    if ny < 1:
        raise MeshError("cell count must be >= 1")
    box = _as_box(domain, 2)
    xs = np.linspace(box[0, 0], box[0, 1], nx + 1)
    ys = np.linspace(box[1, 0], box[1, 1], ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])    # node id = j*(nx+1) + i

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    i = i.T.ravel()
    j = j.T.ravel()                                    # cell order matches FV: K = j*nx + i
    n00 = j * (nx + 1) + i
    n10 = n00 + 1
    n01 = n00 + (nx + 1)
    n11 = n01 + 1
    tris = np.empty((2 * nx * ny, 3), int)
    tris[0::2] = np.column_stack([n00, n10, n11])      # both share diagonal n00-n11
    tris[1::2] = np.column_stack([n00, n01, n11])
    tris.sort(axis=1)
    return SpatialGrid(2, nodes, tris, box, (nx, ny))


class SpaceTimeMesh:
    """Simplicial mesh of (0,1) x Omega obtained by splitting tensor prisms."""

    def __init__(self, spatial, n_inner):
        self.spatial = spatial
        self.n_inner = int(n_inner)
        n_sp = spatial.n_nodes
        sdim = spatial.dim
        self.dim = sdim + 1                      # space-time dimension
        levels = np.linspace(0.0, 1.0, self.n_inner + 1)
        self.nodes = np.concatenate([
            np.column_stack([np.full(n_sp, t), spatial.nodes]) for t in levels])

        elems = []
        for l in range(self.n_inner):
            lo = spatial.simplices + l * n_sp
            hi = spatial.simplices + (l + 1) * n_sp
            if sdim == 1:
                b0, b1 = lo[:, 0], lo[:, 1]
                t0, t1 = hi[:, 0], hi[:, 1]
                elems.append(np.column_stack([b0, t0, t1]))
                elems.append(np.column_stack([b0, b1, t1]))
            else:
                b0, b1, b2 = lo[:, 0], lo[:, 1], lo[:, 2]
                t0, t1, t2 = hi[:, 0], hi[:, 1], hi[:, 2]
                elems.append(np.column_stack([b0, t0, t1, t2]))
                elems.append(np.column_stack([b0, b1, t1, t2]))
                elems.append(np.column_stack([b0, b1, b2, t2]))
        self.elements = np.concatenate(elems)

        coords = self.nodes[self.elements]            # (n_el, dim+1, dim)
        edges = coords[:, 1:] - coords[:, 0:1]
        dets = np.linalg.det(edges)
        flip = dets < 0
        if np.any(flip):                              # orient positively
            self.elements[flip, -2], self.elements[flip, -1] = \
                self.elements[flip, -1].copy(), self.elements[flip, -2].copy()
            coords = self.nodes[self.elements]
        fact = {2: 2.0, 3: 6.0}[self.dim]
        self.element_measures = np.abs(np.linalg.det(coords[:, 1:] - coords[:, 0:1])) / fact

        # P1 basis gradients: rows 1.. of the inverse of [[1, x_k]] per element
        n_loc = self.dim + 1
        A = np.concatenate([np.ones((len(coords), n_loc, 1)), coords], axis=2)
        self.gradients = np.linalg.inv(A)[:, 1:, :].transpose(0, 2, 1)  # (n_el, n_loc, dim)

        self.faces_t0 = spatial.simplices.copy()
        self.faces_t1 = spatial.simplices + self.n_inner * n_sp
        self.trace0_nodes = np.arange(n_sp)
        self.trace1_nodes = np.arange(n_sp) + self.n_inner * n_sp
        self.trace_weights = spatial.node_weights

        # extrusion cells (spatial cell x time slab) grouping the simplices;
        # elementwise solver fields live on these
        n_cells = int(np.prod(spatial.shape))
        per_slab = len(self.elements) // self.n_inner
        slab = np.arange(len(self.elements)) // per_slab
        simplex = (np.arange(len(self.elements)) % per_slab) % len(spatial.simplices)
        self.element_brick = slab * n_cells + spatial.simplex_cell[simplex]
        self.n_bricks = n_cells * self.n_inner
        self.brick_measures = np.zeros(self.n_bricks)
        np.add.at(self.brick_measures, self.element_brick, self.element_measures)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)


def build_space_time_mesh(spatial_grid, n_inner=1):
    """Extrude a spatial grid over (0,1) with n_inner uniform time intervals."""
    if int(n_inner) < 1:
        raise MeshError(f"n_inner must be >= 1, got {n_inner}")
    return SpaceTimeMesh(spatial_grid, n_inner)
