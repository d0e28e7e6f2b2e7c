"""Template hierarchies built by Loop subdivision, plus subdivision pooling/unpooling.

Every level k+1 is the 1:4 split of level k. Vertices inherited from the coarse
level keep their indices (prefix layout), and the vertex inserted on coarse edge
``(a, b)`` sits at index ``v_low + edge_row``.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .mesh import (
    Adjacency,
    MeshError,
    TriMesh,
    build_adjacency,
    check_closed,
    face_normals,
    icosahedron,
    load_mesh,
    save_mesh,
    unique_edges,
    validate_closed,
)


@dataclass(frozen=True, eq=False)
class LevelCorrespondence:
    """Vertex correspondence between a coarse level and its subdivision.

    `inserted_edges[r] = (a, b)` with a < b is the coarse edge that produced
    fine vertex ``n_low + r``. Fine vertices ``0..n_low-1`` are the inherited ones.
    """

    n_low: int
    inserted_edges: np.ndarray

    @property
    def n_high(self) -> int:
        return self.n_low + len(self.inserted_edges)

    @property
    def inherited(self) -> dict:
        return {i: i for i in range(self.n_low)}

    @property
    def inserted(self) -> dict:
        return {self.n_low + r: (int(a), int(b)) for r, (a, b) in enumerate(self.inserted_edges)}

    def is_inherited(self, i: int) -> bool:
        return 0 <= i < self.n_low


def _loop_beta(k):
    return (5.0 / 8.0 - (3.0 / 8.0 + 0.25 * np.cos(2.0 * np.pi / k)) ** 2) / k


def subdivide_loop(mesh: TriMesh, geometric_smoothing: bool = True):
    """One step of Loop subdivision.

    Returns the refined mesh and its correspondence to `mesh`. Without
    smoothing, inherited vertices are copied and inserted vertices sit at
    exact edge midpoints.
    """
    report = validate_closed(mesh)
    if not report.ok:
        raise MeshError(f"subdivision needs a closed mesh:\n{report}")
    v = mesh.vertices
    faces = mesh.faces
    n = len(v)
    edges = unique_edges(faces)
    e = len(edges)

    # edge row for every half-edge of every face: (f, 3), slot s is edge (f[s], f[s+1])
    he = np.stack([faces, np.roll(faces, -1, axis=1)], axis=-1).reshape(-1, 2)
    key = np.sort(he, axis=1)
    rows = np.searchsorted(edges[:, 0] * n + edges[:, 1], key[:, 0] * n + key[:, 1])
    mid = (n + rows).reshape(-1, 3)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    m_ab, m_bc, m_ca = mid[:, 0], mid[:, 1], mid[:, 2]
    new_faces = np.concatenate(
        [
            np.stack([a, m_ab, m_ca], axis=1),
            np.stack([b, m_bc, m_ab], axis=1),
            np.stack([c, m_ca, m_bc], axis=1),
            np.stack([m_ab, m_bc, m_ca], axis=1),
        ]
    )
    # interleave so the four children of face i are contiguous
    new_faces = new_faces.reshape(4, -1, 3).transpose(1, 0, 2).reshape(-1, 3)

    pa, pb = v[edges[:, 0]], v[edges[:, 1]]
    if not geometric_smoothing:
        even = v.copy()
        odd = (pa + pb) / 2.0
    else:
        adj = build_adjacency(mesh)
        k = adj.degree.astype(np.float64)
        beta = _loop_beta(k)
        nb_sum = np.stack([v[nb].sum(axis=0) for nb in adj.neighbors])
        even = (1.0 - k * beta)[:, None] * v + beta[:, None] * nb_sum
        opposite = np.roll(faces, 1, axis=1).reshape(-1)  # vertex opposite each half-edge
        opp_sum = np.zeros((e, 3))
        np.add.at(opp_sum, rows, v[opposite])
        odd = 3.0 / 8.0 * (pa + pb) + 1.0 / 8.0 * opp_sum

    fine = TriMesh(np.concatenate([even, odd]), new_faces, mesh.unit_scale, mesh.normalized)
    return fine, LevelCorrespondence(n_low=n, inserted_edges=edges)


def icosphere(level: int, radius: float = 1.0) -> TriMesh:
    """Icosahedron refined `level` times by midpoint subdivision, projected onto a sphere."""
    mesh = icosahedron()
    for _ in range(level):
        mesh, _ = subdivide_loop(mesh, geometric_smoothing=False)
        p = mesh.vertices
        mesh = mesh.with_vertices(p / np.linalg.norm(p, axis=1, keepdims=True))
    return mesh.with_vertices(mesh.vertices * radius)


# ---------------------------------------------------------------- pooling


def pool_features(F, adjacency_high: Adjacency, corr: LevelCorrespondence) -> np.ndarray:
    """Average each inherited vertex with its fine-level 1-ring.

    Row i of the output is the mean of F over ``{i} | N(i)`` in the fine mesh.
    Accumulation runs over the sorted neighborhood so the result matches
    ``pooling_matrix(...) @ F`` bit for bit.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.shape[0] != adjacency_high.n_vertices or adjacency_high.n_vertices != corr.n_high:
        raise ValueError(f"feature rows {F.shape[0]} do not match fine level {corr.n_high}")
    idx, w = _pool_stencil(adjacency_high, corr)
    out = np.zeros((corr.n_low,) + F.shape[1:])
    wb = w.reshape(w.shape + (1,) * (F.ndim - 1))
    for s in range(idx.shape[1]):
        out += wb[:, s] * F[idx[:, s]]
    return out


def _pool_stencil(adjacency_high: Adjacency, corr: LevelCorrespondence):
    """Padded (n_low, max_degree + 1) index/weight arrays; padding has weight 0."""
    n_low = corr.n_low
    sets = [np.sort(np.append(adjacency_high.neighbors[i], i)) for i in range(n_low)]
    width = max(len(s) for s in sets)
    idx = np.zeros((n_low, width), dtype=np.int64)
    w = np.zeros((n_low, width))
    for i, s in enumerate(sets):
        idx[i, : len(s)] = s
        w[i, : len(s)] = 1.0 / len(s)
        idx[i, len(s):] = s[0]
    return idx, w


def unpool_features(F, corr: LevelCorrespondence) -> np.ndarray:
    """Copy inherited rows; an inserted row is the mean of its edge endpoints."""
    F = np.asarray(F, dtype=np.float64)
    if F.shape[0] != corr.n_low:
        raise ValueError(f"feature rows {F.shape[0]} do not match coarse level {corr.n_low}")
    a, b = corr.inserted_edges[:, 0], corr.inserted_edges[:, 1]
    return np.concatenate([F, (F[a] + F[b]) / 2.0])


def pooling_matrix(corr: LevelCorrespondence, adjacency_high: Adjacency) -> sparse.csr_matrix:
    rows, cols, vals = [], [], []
    for i in range(corr.n_low):
        s = np.sort(np.append(adjacency_high.neighbors[i], i))
        rows.append(np.full(len(s), i))
        cols.append(s)
        vals.append(np.full(len(s), 1.0 / len(s)))
    m = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(corr.n_low, corr.n_high),
    )
    m.sort_indices()
    return m


def unpooling_matrix(corr: LevelCorrespondence) -> sparse.csr_matrix:
    n_low, n_high = corr.n_low, corr.n_high
    ins = np.arange(n_low, n_high)
    rows = np.concatenate([np.arange(n_low), ins, ins])
    cols = np.concatenate([np.arange(n_low), corr.inserted_edges[:, 0], corr.inserted_edges[:, 1]])
    vals = np.concatenate([np.ones(n_low), np.full(2 * len(ins), 0.5)])
    m = sparse.csr_matrix((vals, (rows, cols)), shape=(n_high, n_low))
    m.sort_indices()
    return m


# -------------------------------------------------------------- hierarchy


@dataclass(eq=False)
class TemplateHierarchy:
    """Meshes ordered coarse to fine, with correspondences between neighbors."""

    levels: list
    correspondences: list
    adjacency: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.correspondences) != len(self.levels) - 1:
            raise ValueError("need one correspondence per consecutive level pair")
        if not self.adjacency:
            self.adjacency = [build_adjacency(m) for m in self.levels]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def vertex_counts(self) -> list:
        return [m.n_vertices for m in self.levels]

    @property
    def face_counts(self) -> list:
        return [m.n_faces for m in self.levels]

    @property
    def fine(self) -> TriMesh:
        return self.levels[-1]

    @cached_property
    def pooling_matrices(self) -> list:
        """Entry k maps level k+1 features down to level k."""
        return [pooling_matrix(c, self.adjacency[k + 1]) for k, c in enumerate(self.correspondences)]

    @cached_property
    def unpooling_matrices(self) -> list:
        """Entry k maps level k features up to level k+1."""
        return [unpooling_matrix(c) for c in self.correspondences]

    def check(self) -> None:
        for k, mesh in enumerate(self.levels):
            report = validate_closed(mesh)
            if not report.ok:
                raise MeshError(f"level {k} invalid:\n{report}")
        for k, c in enumerate(self.correspondences):
            lo, hi = self.levels[k], self.levels[k + 1]
            if hi.n_faces != 4 * lo.n_faces or hi.n_vertices != lo.n_vertices + lo.n_edges:
                raise MeshError(f"levels {k}->{k + 1} are not a 1:4 subdivision")
            if c.n_low != lo.n_vertices or c.n_high != hi.n_vertices:
                raise MeshError(f"correspondence {k} does not match level sizes")

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, mesh in enumerate(self.levels):
            save_mesh(mesh, directory / f"level_{k}.off")
        for k, c in enumerate(self.correspondences):
            lines = [f"inherited {c.n_low}"]
            lines += [f"inserted {c.n_low + r} {a} {b}" for r, (a, b) in enumerate(c.inserted_edges)]
            (directory / f"correspondence_{k}.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "TemplateHierarchy":
        directory = Path(directory)
        levels = []
        while (directory / f"level_{len(levels)}.off").exists():
            levels.append(load_mesh(directory / f"level_{len(levels)}.off"))
        if not levels:
            raise FileNotFoundError(f"no hierarchy levels in {directory}")
        corrs = [_read_correspondence(directory / f"correspondence_{k}.txt") for k in range(len(levels) - 1)]
        h = cls(levels, corrs)
        h.check()
        return h


def _read_correspondence(path: Path) -> LevelCorrespondence:
    lines = path.read_text().split("\n")
    tok = lines[0].split()
    if tok[0] != "inherited":
        raise MeshError(f"{path}: expected 'inherited <count>' header")
    n_low = int(tok[1])
    edges = []
    for line in lines[1:]:
        if not line.strip():
            continue
        tag, hi, a, b = line.split()
        if tag != "inserted" or int(hi) != n_low + len(edges):
            raise MeshError(f"{path}: bad line {line!r}")
        edges.append((int(a), int(b)))
    return LevelCorrespondence(n_low, np.array(edges, dtype=np.int64).reshape(-1, 2))


def build_hierarchy(base: TriMesh | None = None, num_levels: int = 3, geometric_smoothing: bool = True):
    if num_levels < 2:
        raise ValueError("a hierarchy needs at least 2 levels")
    base = icosahedron() if base is None else base
    check_closed(base)
    levels, corrs = [base], []
    for _ in range(num_levels - 1):
        fine, corr = subdivide_loop(levels[-1], geometric_smoothing)
        levels.append(fine)
        corrs.append(corr)
    return TemplateHierarchy(levels, corrs)


# ------------------------------------------------------------- decimation


def _plane_quadrics(v, faces):
    n = face_normals(v, faces, unit=False)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    d = -np.einsum("ij,ij->i", n, v[faces[:, 0]])
    p = np.concatenate([n, d[:, None]], axis=1)
    Kp = p[:, :, None] * p[:, None, :]
    Q = np.zeros((len(v), 4, 4))
    for s in range(3):
        np.add.at(Q, faces[:, s], Kp)
    return Q


def decimate(mesh: TriMesh, target_v: int) -> TriMesh:
    """Quadric-error edge collapse down to about `target_v` vertices.

    Collapses that violate the link condition (which would make the surface
    non-manifold) or flip a face normal are skipped.
    """
    if target_v < 4:
        raise ValueError("target_v must be at least 4")
    check_closed(mesh)
    if mesh.n_vertices <= target_v:
        return mesh

    v = mesh.vertices.copy()
    faces = [tuple(f) for f in mesh.faces.tolist()]
    alive_face = [True] * len(faces)
    vert_faces = [set() for _ in range(len(v))]
    for fi, f in enumerate(faces):
        for x in f:
            vert_faces[x].add(fi)
    alive = np.ones(len(v), dtype=bool)
    Q = _plane_quadrics(v, np.array(faces))
    version = np.zeros(len(v), dtype=np.int64)

    def neighbors(x):
        out = set()
        for fi in vert_faces[x]:
            out.update(faces[fi])
        out.discard(x)
        return out

    def candidate(a, b):
        Qe = Q[a] + Q[b]
        A = Qe.copy()
        A[3] = [0, 0, 0, 1]
        try:
            if abs(np.linalg.det(A[:3, :3])) < 1e-12:
                raise np.linalg.LinAlgError
            pos = np.linalg.solve(A, [0, 0, 0, 1])[:3]
        except np.linalg.LinAlgError:
            options = [v[a], v[b], (v[a] + v[b]) / 2]
            pos = min(options, key=lambda p: np.append(p, 1) @ Qe @ np.append(p, 1))
        h = np.append(pos, 1.0)
        return float(h @ Qe @ h), pos

    def push(heap, a, b):
        a, b = min(a, b), max(a, b)
        cost, pos = candidate(a, b)
        heapq.heappush(heap, (cost, a, b, int(version[a]), int(version[b]), tuple(pos)))

    heap = []
    for a, b in unique_edges(mesh.faces).tolist():
        push(heap, a, b)

    n_alive = len(v)
    while n_alive > target_v and heap:
        cost, a, b, va, vb, pos = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or version[a] != va or version[b] != vb:
            continue
        na, nb = neighbors(a), neighbors(b)
        if b not in na:
            continue
        shared = na & nb
        if len(shared) != 2 or n_alive <= 4:
            continue
        if any(len(neighbors(s)) <= 3 for s in shared):
            continue
        pos = np.array(pos)
        removed = vert_faces[a] & vert_faces[b]
        moved = (vert_faces[a] | vert_faces[b]) - removed
        flips = False
        for fi in moved:
            f = faces[fi]
            old = np.cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]])
            p = [pos if x in (a, b) else v[x] for x in f]
            new = np.cross(p[1] - p[0], p[2] - p[0])
            if np.dot(old, new) <= 1e-12 * np.dot(old, old):
                flips = True
                break
        if flips:
            continue

        for fi in removed:
            alive_face[fi] = False
            for x in faces[fi]:
                vert_faces[x].discard(fi)
        for fi in list(vert_faces[b]):
            faces[fi] = tuple(a if x == b else x for x in faces[fi])
            vert_faces[a].add(fi)
        vert_faces[b] = set()
        alive[b] = False
        n_alive -= 1
        v[a] = pos
        Q[a] = Q[a] + Q[b]
        version[a] += 1
        for x in neighbors(a):
            version[x] += 1
        for x in neighbors(a):
            push(heap, a, x)
            for y in neighbors(x):
                if y != a:
                    push(heap, x, y)

    if n_alive > target_v + 2:
        raise ValueError(f"cannot decimate below {n_alive} vertices without breaking topology")
    remap = -np.ones(len(v), dtype=np.int64)
    remap[alive] = np.arange(alive.sum())
    out_faces = remap[np.array([f for f, ok in zip(faces, alive_face) if ok])]
    out = TriMesh(v[alive], out_faces, mesh.unit_scale, mesh.normalized)
    return check_closed(out)
