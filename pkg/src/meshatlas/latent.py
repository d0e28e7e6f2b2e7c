"""Latent-space operations: hierarchical interpolation and 1-D scatter projections."""
from __future__ import annotations

import numpy as np

from .model import LatentCode


def _lerp(a, b, t):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"latent shapes differ: {a.shape} vs {b.shape}")
    # exact endpoints, so t in {0, 1} reproduces the inputs bit for bit
    if t == 0:
        return a.copy()
    if t == 1:
        return b.copy()
    return (1.0 - t) * a + t * b


def interpolate_latents(code_a: LatentCode, code_b: LatentCode, alpha: float, beta: float) -> LatentCode:
    """Blend two codes level by level.

    The coarsest level (entry 0) moves with `beta`; every finer level moves
    with `alpha`. A single-level code therefore responds to `beta` only.
    """
    for name, t in (("alpha", alpha), ("beta", beta)):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"{name}={t} outside [0, 1]")
    if list(code_a.levels) != list(code_b.levels):
        raise ValueError(f"codes have different latent levels: {code_a.levels} vs {code_b.levels}")
    ts = [beta if i == 0 else alpha for i in range(len(code_a.levels))]
    return LatentCode(
        list(code_a.levels),
        [_lerp(a, b, t) for a, b, t in zip(code_a.mu, code_b.mu, ts)],
        [_lerp(a, b, t) for a, b, t in zip(code_a.logvar, code_b.logvar, ts)],
        [_lerp(a, b, t) for a, b, t in zip(code_a.z, code_b.z, ts)],
    )


def first_component_scores(Z) -> np.ndarray:
    """Scores of the rows of Z on their leading principal axis.

    Sign convention: the largest-magnitude loading is positive.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Zc = Z - Z.mean(axis=0)
    _, _, vt = np.linalg.svd(Zc, full_matrices=False)
    axis = vt[0]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return Zc @ axis


def latent_scatter(codes, case_ids=None) -> list:
    """Per latent level, project flattened z of every case onto one PCA axis.

    Returns rows ``{"case_id": ..., "level_<k>": score, ...}``.
    """
    codes = list(codes)
    if len(codes) < 2:
        raise ValueError("latent scatter needs at least two cases")
    if case_ids is None:
        case_ids = [str(i) for i in range(len(codes))]
    if len(case_ids) != len(codes):
        raise ValueError("case_ids and codes differ in length")
    levels = codes[0].levels
    scores = {}
    for i, lev in enumerate(levels):
        Z = np.stack([np.asarray(c.z[i]).ravel() for c in codes])
        scores[f"level_{lev}"] = first_component_scores(Z)
    return [{"case_id": cid, **{k: float(v[j]) for k, v in scores.items()}} for j, cid in enumerate(case_ids)]
