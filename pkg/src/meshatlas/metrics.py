"""Reconstruction metrics in millimetres: MAE, mean surface distance, Hausdorff distance."""
from __future__ import annotations

import io
import csv
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh


def mae(predicted, reference) -> float:
    """Mean Euclidean vertex error over all vertices and cases (same units as input)."""
    p = np.asarray(predicted, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"vertex arrays differ in shape: {p.shape} vs {r.shape}")
    return float(np.linalg.norm(p - r, axis=-1).mean())


def closest_point_on_triangles(points, tri) -> np.ndarray:
    """Closest point on each triangle to each point.

    points: (n, 3); tri: (m, 3, 3). Returns (n, m, 3). Region tests follow
    the Voronoi-region classification of the triangle's vertices and edges.
    """
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    a, b, c = (tri[None, :, i, :] for i in range(3))
    ab, ac = b - a, c - a
    dot = lambda x, y: np.einsum("...k,...k->...", x, y)  # noqa: E731
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    # barycentric weights (v on ab, w on ac) in if-chain priority order
    v = np.select([in_a, in_b, in_ab, in_c, in_ac, in_bc], [0.0, 1.0, t_ab, 0.0, 0.0, 1.0 - t_bc], v_in)
    w = np.select([in_a, in_b, in_ab, in_c, in_ac, in_bc], [0.0, 0.0, 0.0, 1.0, t_ac, t_bc], w_in)
    return a + v[..., None] * ab + w[..., None] * ac


def point_triangle_distance(points, tri) -> np.ndarray:
    """Exact Euclidean distances, shape (n, m)."""
    points = np.asarray(points, dtype=np.float64)
    return np.linalg.norm(closest_point_on_triangles(points, np.asarray(tri, dtype=np.float64)) - points[:, None, :], axis=-1)


def point_to_surface(points, mesh: TriMesh, chunk: int = 64) -> np.ndarray:
    """Distance from each point to the nearest triangle of `mesh` (brute-force scan)."""
    points = np.asarray(points, dtype=np.float64)
    if mesh.n_faces == 0 or len(points) == 0:
        raise ValueError("empty mesh or point set")
    tri = mesh.vertices[mesh.faces]
    out = np.empty(len(points))
    for i in range(0, len(points), chunk):
        out[i : i + chunk] = point_triangle_distance(points[i : i + chunk], tri).min(axis=1)
    return out


def surface_distances(mesh_a: TriMesh, mesh_b: TriMesh):
    """(MD, HD): symmetrized mean and max vertex-to-surface distance."""
    d_ab = point_to_surface(mesh_a.vertices, mesh_b)
    d_ba = point_to_surface(mesh_b.vertices, mesh_a)
    md = 0.5 * (d_ab.mean() + d_ba.mean())
    hd = max(d_ab.max(), d_ba.max())
    return float(md), float(hd)


def mean_surface_distance(mesh_a: TriMesh, mesh_b: TriMesh) -> float:
    return surface_distances(mesh_a, mesh_b)[0]


def hausdorff(mesh_a: TriMesh, mesh_b: TriMesh) -> float:
    return surface_distances(mesh_a, mesh_b)[1]


# ------------------------------------------------------------- reports

FIELDS = ("case_id", "model", "split", "mae_mm", "md_mm", "hd_mm")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, case_id, model, split, mae_mm, md_mm, hd_mm):
        self.rows.append(dict(case_id=case_id, model=model, split=split, mae_mm=mae_mm, md_mm=md_mm, hd_mm=hd_mm))

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self

    def aggregate(self, model=None, split=None) -> dict:
        sel = [r for r in self.rows if (model is None or r["model"] == model) and (split is None or r["split"] == split)]
        if not sel:
            raise KeyError(f"no rows for model={model} split={split}")
        return {k: float(np.mean([r[k] for r in sel])) for k in ("mae_mm", "md_mm", "hd_mm")}

    @property
    def models(self) -> list:
        return list(dict.fromkeys(r["model"] for r in self.rows))

    @property
    def splits(self) -> list:
        return list(dict.fromkeys(r["split"] for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: (f"{r[k]:.6f}" if k.endswith("_mm") else r[k]) for k in FIELDS})
        return buf.getvalue()

    def table_csv(self) -> str:
        """Aggregate means in a model x (metric, split) layout."""
        splits = self.splits
        header = ["model"] + [f"{m}_{s}" for m in ("mae_mm", "md_mm", "hd_mm") for s in splits]
        lines = [",".join(header)]
        for model in self.models:
            cells = [model]
            for metric in ("mae_mm", "md_mm", "hd_mm"):
                for s in splits:
                    try:
                        cells.append(f"{self.aggregate(model, s)[metric]:.4f}")
                    except KeyError:
                        cells.append("")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def evaluate(reconstruct, cohort, split: str, label: str, surface: bool = True) -> EvalReport:
    """Reconstruct every case of `split` and score it in millimetres.

    `reconstruct` maps normalized (B, v, 3) arrays to the same shape.
    """
    idx = cohort.indices(split)
    X = cohort.vertices[idx]
    pred = np.asarray(reconstruct(X))
    report = EvalReport()
    unit = cohort.unit_scale
    for i, x, y in zip(idx, X, pred):
        ref_mm, pred_mm = x * unit, y * unit
        md = hd = float("nan")
        if surface:
            md, hd = surface_distances(TriMesh(pred_mm, cohort.faces), TriMesh(ref_mm, cohort.faces))
        report.add(cohort.case_ids[i], label, split, mae(pred_mm, ref_mm), md, hd)
    return report
