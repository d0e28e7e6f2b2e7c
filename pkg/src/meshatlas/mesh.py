"""Closed triangle meshes: representation, topology queries, validation and I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

DEFAULT_UNIT_SCALE = 256.0


class MeshError(ValueError):
    """Raised for malformed, open or non-manifold meshes."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh with double-precision vertices and integer faces.

    `unit_scale` is the number of millimetres per normalized unit. When
    `normalized` is true the vertex coordinates are unitless.
    """

    vertices: np.ndarray
    faces: np.ndarray
    unit_scale: float = DEFAULT_UNIT_SCALE
    normalized: bool = False

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            if f.size == 0:
                f = f.reshape(0, 3)
            else:
                raise MeshError(f"faces must be (m, 3) triangles, got {f.shape}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_edges(self) -> int:
        return len(unique_edges(self.faces))

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.unit_scale, self.normalized)


@dataclass(frozen=True)
class Adjacency:
    """Per-vertex sorted neighbor lists."""

    neighbors: tuple
    degree: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.neighbors)

    def matrix(self) -> sparse.csr_matrix:
        """Symmetric 0/1 adjacency matrix without self-loops."""
        rows = np.repeat(np.arange(self.n_vertices), self.degree)
        cols = np.concatenate(self.neighbors) if self.n_vertices else np.zeros(0, int)
        data = np.ones(len(rows))
        n = self.n_vertices
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


@dataclass
class ValidationReport:
    checks: dict = field(default_factory=dict)
    messages: list = field(default_factory=list)
    offending_edges: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def __str__(self):
        lines = [f"{name}: {'pass' if passed else 'FAIL'}" for name, passed in self.checks.items()]
        lines += self.messages
        return "\n".join(lines)


def unique_edges(faces) -> np.ndarray:
    """Sorted undirected edges (a < b), lexicographic order."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    he = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    return np.unique(np.sort(he, axis=1), axis=0)


def face_normals(vertices, faces, unit=True) -> np.ndarray:
    v = np.asarray(vertices)
    f = np.asarray(faces)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if unit:
        lengths = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(lengths > 0, lengths, 1.0)
    return n


def face_areas(vertices, faces) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(vertices, faces, unit=False), axis=1)


def signed_volume(mesh: TriMesh) -> float:
    v = mesh.vertices
    f = mesh.faces
    return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


def validate_closed(mesh: TriMesh) -> ValidationReport:
    """Check index range, degeneracy, manifoldness, orientation and the Euler relation."""
    report = ValidationReport()
    v, f = mesh.n_vertices, mesh.n_faces
    faces = mesh.faces

    in_range = bool(f == 0 or (faces.min() >= 0 and faces.max() < v))
    report.checks["indices_in_range"] = in_range
    if not in_range:
        report.messages.append("face index out of range")
        report.checks.update(non_degenerate=False, manifold=False, oriented=False, euler=False)
        return report

    degenerate = (
        (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    )
    report.checks["non_degenerate"] = not degenerate.any()
    if degenerate.any():
        report.messages.append(f"degenerate faces: {np.flatnonzero(degenerate).tolist()}")

    he = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    und, counts = np.unique(np.sort(he, axis=1), axis=0, return_counts=True)
    bad = und[counts != 2]
    report.checks["manifold"] = len(bad) == 0 and f > 0
    if len(bad):
        report.offending_edges = [tuple(map(int, e)) for e in bad]
        shown = ", ".join(f"({a},{b})x{c}" for (a, b), c in zip(bad[:20], counts[counts != 2][:20]))
        report.messages.append(f"edges not shared by exactly 2 faces: {shown}")

    _, dcounts = np.unique(he, axis=0, return_counts=True)
    oriented = bool(report.checks["manifold"] and (dcounts == 1).all())
    report.checks["oriented"] = oriented
    if report.checks["manifold"] and not oriented:
        report.messages.append("inconsistent face orientation")

    e = len(und)
    euler = (2 * v - f == 4) and (2 * e == 3 * f) and (v - e + f == 2)
    report.checks["euler"] = bool(euler)
    if not euler:
        report.messages.append(f"Euler relation violated: v={v} e={e} f={f}, 2v-f={2 * v - f}")
    return report


def check_closed(mesh: TriMesh) -> TriMesh:
    report = validate_closed(mesh)
    if not report.ok:
        raise MeshError(f"invalid closed mesh:\n{report}")
    return mesh


def build_adjacency(mesh: TriMesh) -> Adjacency:
    edges = unique_edges(mesh.faces)
    n = mesh.n_vertices
    both = np.concatenate([edges, edges[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    degree = np.bincount(both[:, 0], minlength=n)
    splits = np.cumsum(degree)[:-1]
    neighbors = tuple(np.split(both[:, 1], splits))
    for nb in neighbors:
        nb.setflags(write=False)
    return Adjacency(neighbors=neighbors, degree=degree)


def icosahedron() -> TriMesh:
    """Unit-radius regular icosahedron with outward-facing triangles."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    return TriMesh(verts, faces)


def tetrahedron() -> TriMesh:
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    verts /= np.sqrt(3.0)
    faces = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]
    return TriMesh(verts, faces)


# --------------------------------------------------------------------- I/O

_FLOAT = "{:.9g}"


def _fmt_vertex(p) -> str:
    return " ".join(_FLOAT.format(float(c)) for c in p)


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt.upper()
    suffix = path.suffix.lower().lstrip(".")
    if suffix not in {"off", "obj", "ply"}:
        raise MeshError(f"cannot infer mesh format from {path}")
    return suffix.upper()


def _data_lines(text: str):
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line


def _parse_off(text: str):
    lines = _data_lines(text)
    try:
        header = next(lines)
        if header.startswith("OFF") and header != "OFF":
            counts_line = header[3:].strip()
        elif header == "OFF":
            counts_line = next(lines)
        else:
            raise MeshError("missing OFF header")
        nv, nf = (int(x) for x in counts_line.split()[:2])
        verts = [[float(x) for x in next(lines).split()[:3]] for _ in range(nv)]
        faces = []
        for _ in range(nf):
            tok = next(lines).split()
            if int(tok[0]) != 3:
                raise MeshError(f"only triangles are supported, got a {tok[0]}-gon")
            faces.append([int(x) for x in tok[1:4]])
    except StopIteration:
        raise MeshError("unexpected end of OFF file") from None
    except (ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"malformed OFF file: {exc}") from None
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_obj(text: str):
    verts, faces = [], []
    try:
        for line in _data_lines(text):
            tok = line.split()
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise MeshError(f"only triangles are supported: {line!r}")
                faces.append([int(t.split("/")[0]) - 1 for t in tok[1:]])
    except ValueError as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"malformed OBJ file: {exc}") from None
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh(path, format: str | None = None, validate: bool = True) -> TriMesh:
    """Read an OFF or OBJ file. Rejects open or non-manifold meshes unless `validate` is false."""
    path = Path(path)
    fmt = _infer_format(path, format)
    text = path.read_text()
    if fmt == "OFF":
        verts, faces = _parse_off(text)
    elif fmt == "OBJ":
        verts, faces = _parse_obj(text)
    else:
        raise MeshError(f"cannot read format {fmt}")
    mesh = TriMesh(verts, faces)
    if validate:
        check_closed(mesh)
    return mesh


def save_mesh(mesh: TriMesh, path, format: str | None = None, colors=None) -> None:
    """Write OFF, OBJ, or ASCII PLY (with optional per-vertex uchar RGB)."""
    path = Path(path)
    fmt = _infer_format(path, format)
    v, f = mesh.vertices, mesh.faces
    out = []
    if fmt == "OFF":
        out.append("OFF")
        out.append(f"{len(v)} {len(f)} {len(unique_edges(f))}")
        out += [_fmt_vertex(p) for p in v]
        out += [f"3 {a} {b} {c}" for a, b, c in f]
    elif fmt == "OBJ":
        out += ["v " + _fmt_vertex(p) for p in v]
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    elif fmt == "PLY":
        if colors is not None:
            colors = np.asarray(colors)
            if colors.shape != (len(v), 3):
                raise MeshError(f"color array must be ({len(v)}, 3), got {colors.shape}")
            if colors.dtype.kind == "f":
                colors = np.clip(np.round(colors * 255.0), 0, 255)
            colors = colors.astype(np.uint8)
        out += ["ply", "format ascii 1.0", f"element vertex {len(v)}"]
        out += ["property double x", "property double y", "property double z"]
        if colors is not None:
            out += ["property uchar red", "property uchar green", "property uchar blue"]
        out += [f"element face {len(f)}", "property list uchar int vertex_indices", "end_header"]
        for i, p in enumerate(v):
            line = _fmt_vertex(p)
            if colors is not None:
                line += " {} {} {}".format(*colors[i])
            out.append(line)
        out += [f"3 {a} {b} {c}" for a, b, c in f]
    else:
        raise MeshError(f"unknown mesh format {fmt}")
    path.write_text("\n".join(out) + "\n")
