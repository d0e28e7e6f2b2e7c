"""Synthetic organ-like cohorts sharing the fine template topology."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .hierarchy import TemplateHierarchy
from .mesh import DEFAULT_UNIT_SCALE, TriMesh, face_areas, face_normals, load_mesh, save_mesh

DEFAULT_SPLIT = (86 / 124, 19 / 124, 19 / 124)
SPLITS = ("train", "validation", "test")


@dataclass
class DeformConfig:
    """Per-case random warp parameters; lengths in mm unless noted."""

    template_size_mm: tuple = (150.0, 100.0, 110.0)
    scale_sigma: float = 0.15
    max_rotation_deg: float = 20.0
    n_sinusoids: int = 8
    displacement_amplitude: float = 0.1  # per-sinusoid bound, fraction of the template bbox diagonal
    min_cycles: float = 0.5
    max_cycles: float = 1.5
    max_translation: float = 0.1  # normalized units per axis
    max_retries: int = 10

    @classmethod
    def zero(cls) -> "DeformConfig":
        return cls(scale_sigma=0.0, max_rotation_deg=0.0, displacement_amplitude=0.0, max_translation=0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["template_size_mm"] = list(self.template_size_mm)
        return d


@dataclass
class Cohort:
    """Normalized, vertex-corresponded cases over the fine level of `hierarchy`."""

    hierarchy: TemplateHierarchy
    vertices: np.ndarray  # (n_cases, v, 3) normalized
    case_ids: list
    split: np.ndarray  # per-case label in SPLITS
    unit_scale: float = DEFAULT_UNIT_SCALE
    seed: int = 0
    params: list = field(default_factory=list)
    deform: DeformConfig | None = None

    def __post_init__(self):
        n_v = self.hierarchy.fine.n_vertices
        if self.vertices.ndim != 3 or self.vertices.shape[1:] != (n_v, 3):
            raise ValueError(f"cases must be (n, {n_v}, 3), got {self.vertices.shape}")
        if np.abs(self.vertices).max() > 1.0:
            raise ValueError("normalized coordinates must lie in [-1, 1]")
        self.split = np.asarray(self.split, dtype=object)

    @property
    def n_cases(self) -> int:
        return len(self.case_ids)

    @property
    def faces(self) -> np.ndarray:
        return self.hierarchy.fine.faces

    def indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(self.n_cases)
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> np.ndarray:
        return self.vertices[self.indices(split)]

    def mesh(self, i: int, mm: bool = True) -> TriMesh:
        v = self.vertices[i]
        if mm:
            return TriMesh(denormalize(v, self.unit_scale), self.faces, self.unit_scale)
        return TriMesh(v, self.faces, self.unit_scale, normalized=True)

    def case_index(self, case_id) -> int:
        if isinstance(case_id, (int, np.integer)):
            return int(case_id)
        try:
            return self.case_ids.index(case_id)
        except ValueError:
            raise KeyError(f"unknown case id {case_id!r}") from None

    def save(self, directory, hierarchy_dir=None) -> None:
        """Write one OFF per case (mm) and a YAML manifest."""
        directory = Path(directory)
        (directory / "cases").mkdir(parents=True, exist_ok=True)
        if hierarchy_dir is None:
            hierarchy_dir = directory / "hierarchy"
            self.hierarchy.save(hierarchy_dir)
        for i, cid in enumerate(self.case_ids):
            save_mesh(self.mesh(i), directory / "cases" / f"{cid}.off")
        manifest = {
            "hierarchy": str(Path(hierarchy_dir).resolve()),
            "unit_scale": float(self.unit_scale),
            "seed": int(self.seed),
            "deform": self.deform.to_dict() if self.deform else None,
            "cases": [
                {"id": cid, "split": str(s), **({"params": p} if p else {})}
                for cid, s, p in zip(self.case_ids, self.split, self.params or [None] * self.n_cases)
            ],
        }
        (directory / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))

    @classmethod
    def load(cls, directory, hierarchy: TemplateHierarchy | None = None) -> "Cohort":
        directory = Path(directory)
        manifest = yaml.safe_load((directory / "manifest.yaml").read_text())
        if hierarchy is None:
            hierarchy = TemplateHierarchy.load(manifest["hierarchy"])
        unit = float(manifest["unit_scale"])
        ids, splits, verts, params = [], [], [], []
        for entry in manifest["cases"]:
            mesh = load_mesh(directory / "cases" / f"{entry['id']}.off")
            if not np.array_equal(mesh.faces, hierarchy.fine.faces):
                raise ValueError(f"case {entry['id']} does not share the template topology")
            ids.append(entry["id"])
            splits.append(entry["split"])
            verts.append(normalize(mesh.vertices, unit))
            params.append(entry.get("params"))
        deform = DeformConfig(**manifest["deform"]) if manifest.get("deform") else None
        return cls(hierarchy, np.stack(verts), ids, np.array(splits, dtype=object), unit, manifest.get("seed", 0), params, deform)


def normalize(vertices_mm, unit_scale: float = DEFAULT_UNIT_SCALE) -> np.ndarray:
    v = np.asarray(vertices_mm, dtype=np.float64)
    if np.abs(v).max(initial=0.0) > unit_scale:
        raise ValueError(f"coordinates exceed +/-{unit_scale} mm")
    return v / unit_scale


def denormalize(vertices, unit_scale: float = DEFAULT_UNIT_SCALE) -> np.ndarray:
    return np.asarray(vertices, dtype=np.float64) * unit_scale


def split_cohort(n_cases: int, ratios=DEFAULT_SPLIT, seed: int = 0) -> np.ndarray:
    """Seeded shuffle, then partition into train/validation/test."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != 3 or abs(ratios.sum() - 1.0) > 1e-9 or (ratios < 0).any():
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    n_train = int(round(n_cases * ratios[0]))
    n_val = int(round(n_cases * ratios[1]))
    n_test = n_cases - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(f"empty split: train={n_train} validation={n_val} test={n_test}")
    order = np.random.Generator(np.random.Philox(seed)).permutation(n_cases)
    labels = np.empty(n_cases, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train : n_train + n_val]] = "validation"
    labels[order[n_train + n_val :]] = "test"
    return labels


def template_mm(hierarchy: TemplateHierarchy, cfg: DeformConfig) -> np.ndarray:
    """Fine template centred at the origin and stretched to the configured bounding box."""
    v = hierarchy.fine.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    return (v - (lo + hi) / 2) / (hi - lo) * np.asarray(cfg.template_size_mm, dtype=np.float64)


def _rotation(angles) -> np.ndarray:
    cx, cy, cz = np.cos(angles)
    sx, sy, sz = np.sin(angles)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _sample_params(rng: np.random.Generator, cfg: DeformConfig, diag: float, unit_scale: float) -> dict:
    n = cfg.n_sinusoids
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amp_dirs = rng.standard_normal((n, 3))
    amp_dirs /= np.linalg.norm(amp_dirs, axis=1, keepdims=True)
    amps = rng.uniform(0.0, 1.0, n) * cfg.displacement_amplitude * diag
    return {
        "log_scale": (rng.standard_normal(3) * cfg.scale_sigma).tolist(),
        "rotation_deg": rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3).tolist(),
        "wave_dirs": dirs.tolist(),
        "wave_numbers": (2 * np.pi * rng.uniform(cfg.min_cycles, cfg.max_cycles, n) / diag).tolist(),
        "wave_phases": rng.uniform(0, 2 * np.pi, n).tolist(),
        "wave_amplitudes": (amp_dirs * amps[:, None]).tolist(),
        "translation_mm": (rng.uniform(-1, 1, 3) * cfg.max_translation * unit_scale).tolist(),
    }


def deform(template: np.ndarray, params: dict) -> np.ndarray:
    """Scale, rotate, add the sinusoidal field (in template coordinates), translate."""
    x = template * np.exp(np.asarray(params["log_scale"]))
    x = x @ _rotation(np.deg2rad(params["rotation_deg"])).T
    k = np.asarray(params["wave_dirs"]) * np.asarray(params["wave_numbers"])[:, None]
    phase = template @ k.T + np.asarray(params["wave_phases"])
    x = x + np.sin(phase) @ np.asarray(params["wave_amplitudes"]).reshape(-1, 3)
    return x + np.asarray(params["translation_mm"])


def is_valid_shape(vertices, faces, reference) -> bool:
    """Positive areas, no fold-overs against neighbours, no flipped faces vs the template."""
    areas = face_areas(vertices, faces)
    if not (areas > 1e-9 * areas.mean()).all():
        return False
    n = face_normals(vertices, faces)
    edges_faces = _edge_face_pairs(faces)
    if (np.einsum("ij,ij->i", n[edges_faces[:, 0]], n[edges_faces[:, 1]]) <= 0).any():
        return False
    vol = np.einsum("ij,ij->i", vertices[faces[:, 0]], np.cross(vertices[faces[:, 1]], vertices[faces[:, 2]])).sum()
    ref = np.einsum("ij,ij->i", reference[faces[:, 0]], np.cross(reference[faces[:, 1]], reference[faces[:, 2]])).sum()
    return bool(vol * ref > 0)


def _edge_face_pairs(faces) -> np.ndarray:
    he = np.stack([faces, np.roll(faces, -1, axis=1)], axis=-1).reshape(-1, 2)
    key = np.sort(he, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    face_of = np.repeat(np.arange(len(faces)), 3)[order]
    return face_of.reshape(-1, 2)


def generate_cohort(
    hierarchy: TemplateHierarchy,
    n_cases: int,
    seed: int = 0,
    deform_cfg: DeformConfig | None = None,
    unit_scale: float = DEFAULT_UNIT_SCALE,
    ratios=DEFAULT_SPLIT,
) -> Cohort:
    """Warp the fine template into `n_cases` distinct, valid shapes."""
    if n_cases < 3:
        raise ValueError("a cohort needs at least 3 cases")
    cfg = deform_cfg or DeformConfig()
    faces = hierarchy.fine.faces
    template = template_mm(hierarchy, cfg)
    diag = float(np.linalg.norm(template.max(axis=0) - template.min(axis=0)))
    root = np.random.SeedSequence(seed)
    verts, params = [], []
    for i in range(n_cases):
        for attempt in range(cfg.max_retries + 1):
            ss = np.random.SeedSequence(root.entropy, spawn_key=(i, attempt))
            rng = np.random.Generator(np.random.Philox(ss))
            p = _sample_params(rng, cfg, diag, unit_scale)
            x = deform(template, p)
            if np.abs(x).max() < unit_scale and is_valid_shape(x, faces, template):
                break
        else:
            raise RuntimeError(f"case {i}: no valid deformation after {cfg.max_retries} retries")
        verts.append(normalize(x, unit_scale))
        params.append({"attempt": attempt, **p})
    ids = [f"case{i:03d}" for i in range(n_cases)]
    split = split_cohort(n_cases, ratios, seed)
    return Cohort(hierarchy, np.stack(verts), ids, split, unit_scale, seed, params, cfg)

