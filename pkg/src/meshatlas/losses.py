"""KL, reconstruction and combined VAE losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import BatchLatents


@dataclass
class LossConfig:
    alpha: float = 1.0e12

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")


def _latents(code) -> BatchLatents:
    if isinstance(code, BatchLatents):
        return code
    return BatchLatents.from_codes(code)


def kl_loss(code) -> Tensor:
    """KL(q(z|x) || N(0, I)), summed over levels and entries, averaged over the batch."""
    lat = _latents(code)
    total = None
    for mu, lv in zip(lat.mu, lat.logvar):
        term = ad.sub(ad.sub(ad.add(ad.square(mu), ad.exp(lv)), lv), Tensor(np.ones(lv.shape)))
        s = ad.sum_all(term)
        total = s if total is None else ad.add(total, s)
    return ad.scale(total, 0.5 / lat.batch_size)


def _rows(X) -> Tensor:
    if isinstance(X, Tensor):
        return X if X.value.ndim == 2 else ad.reshape(X, (-1, 3))
    return Tensor(np.asarray(X, dtype=np.float64).reshape(-1, 3))


def recon_loss(X, X_hat) -> Tensor:
    """Mean over vertices and cases of the squared Euclidean vertex error."""
    X, X_hat = _rows(X), _rows(X_hat)
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {X_hat.shape}")
    return ad.scale(ad.sum_all(ad.square(ad.sub(X_hat, X))), 1.0 / X.shape[0])


def total_loss(X, X_hat, code, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    return ad.add(kl_loss(code), ad.scale(recon_loss(X, X_hat), cfg.alpha))

