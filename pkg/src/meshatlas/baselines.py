"""PCA statistical shape model and the ablation model family."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .hierarchy import TemplateHierarchy
from .model import KINDS, ArchConfig, VaeBase, build_model


@dataclass
class PcaModel:
    """Mean shape plus orthonormal variation modes, both over flattened (3v) coordinates."""

    mean: np.ndarray
    components: np.ndarray  # (3v, k)
    eigenvalues: np.ndarray  # (k,), descending

    @property
    def k(self) -> int:
        return self.components.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 3

    def project(self, X) -> np.ndarray:
        return pca_project(self, X)

    def reconstruct(self, X) -> np.ndarray:
        """Project-then-reconstruct, batch-aware; matches the neural models' interface."""
        X = np.asarray(X, dtype=np.float64)
        batch = X if X.ndim == 3 else X[None]
        out = np.stack([pca_reconstruct(self, pca_project(self, x)) for x in batch])
        return out if X.ndim == 3 else out[0]

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            "pca",
            {"k": self.k, "n_fine": self.n_vertices},
            {"mean": self.mean, "components": self.components, "eigenvalues": self.eigenvalues},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PcaModel":
        if ckpt.type != "pca":
            raise ValueError(f"checkpoint holds a {ckpt.type!r} model, not PCA")
        a = ckpt.arrays
        return cls(a["mean"], a["components"], a["eigenvalues"])

    @classmethod
    def load(cls, path) -> "PcaModel":
        return cls.from_checkpoint(load_checkpoint(path))


def pca_fit(X, k: int = 10) -> PcaModel:
    """Fit on cases `X` of shape (M, v, 3).

    The modes come from a thin SVD of the centred (M x 3v) data matrix, which
    yields the covariance eigenvectors without forming the 3v x 3v matrix.
    """
    X = np.asarray(X, dtype=np.float64)
    M = X.shape[0]
    D = X.reshape(M, -1)
    if not 1 <= k <= min(D.shape[1], M - 1):
        raise ValueError(f"k={k} out of range for {M} cases of dimension {D.shape[1]}")
    mean = D.mean(axis=0)
    _, s, vt = np.linalg.svd(D - mean, full_matrices=False)
    comps = vt[:k].T.copy()
    # deterministic sign: largest-magnitude entry of each mode is positive
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    comps *= np.where(flip == 0, 1.0, flip)
    eig = s[:k] ** 2 / (M - 1)
    return PcaModel(mean, comps, eig)


def pca_project(model: PcaModel, mesh) -> np.ndarray:
    x = np.asarray(mesh, dtype=np.float64).reshape(-1)
    if x.size != model.mean.size:
        raise ValueError(f"mesh has {x.size // 3} vertices, model expects {model.n_vertices}")
    return model.components.T @ (x - model.mean)


def pca_reconstruct(model: PcaModel, coefficients) -> np.ndarray:
    c = np.asarray(coefficients, dtype=np.float64)
    if c.shape != (model.k,):
        raise ValueError(f"expected {model.k} coefficients, got {c.shape}")
    return (model.mean + model.components @ c).reshape(-1, 3)


def pca_interpolate(model: PcaModel, mesh_a, mesh_b, alpha: float, beta: float) -> np.ndarray:
    """Move the leading mode with `beta` and modes 2-10 with `alpha`; later modes stay at A."""
    if model.k < 10:
        raise ValueError("PCA interpolation needs at least 10 components")
    ca, cb = pca_project(model, mesh_a), pca_project(model, mesh_b)
    c = ca.copy()
    c[0] = (1 - beta) * ca[0] + beta * cb[0]
    c[1:10] = (1 - alpha) * ca[1:10] + alpha * cb[1:10]
    return pca_reconstruct(model, c)


def build_ablation(kind: str, hierarchy: TemplateHierarchy, config: ArchConfig | None = None, seed: int = 0) -> VaeBase:
    """FC, GCN, Pooling or Proposed model over the hierarchy, sharing one training protocol."""
    kind = kind.lower()
    if kind not in KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {KINDS}")
    return build_model(kind, hierarchy, config, seed)
