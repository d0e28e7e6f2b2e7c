"""Minibatch Adam training with early stopping on validation reconstruction loss."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .hierarchy import TemplateHierarchy
from .losses import LossConfig, kl_loss, recon_loss
from .model import ArchConfig, VaeBase, build_model
from .nn import make_rng
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 50
    alpha: float = 1.0e12
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    stopped_early: bool = False

    def record(self, **row):
        self.epochs.append(row)

    def column(self, key) -> list:
        return [r[key] for r in self.epochs]

    def to_csv(self) -> str:
        keys = ["epoch", "train_loss", "train_kl", "train_recon", "val_recon"]
        lines = [",".join(keys)]
        for r in self.epochs:
            lines.append(",".join([str(r["epoch"])] + [repr(float(r[k])) for k in keys[1:]]))
        return "\n".join(lines) + "\n"


class EarlyStopping:
    """Stop once the monitored value has not improved for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.counter = 0

    def step(self, value: float, epoch: int) -> bool:
        """Record `value`; returns True if it is a new best."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def evaluate_recon(model: VaeBase, X: np.ndarray, batch_size: int = 32) -> float:
    """Validation L_P in inference mode (z = mu)."""
    total = 0.0
    for i in range(0, len(X), batch_size):
        xb = X[i : i + batch_size]
        out, _ = model.forward(Tensor(xb.reshape(-1, 3)), mode="inference")
        total += float(recon_loss(xb, out.value).value) * len(xb)
    return total / len(X)


def train_step(model: VaeBase, xb: np.ndarray, state: AdamState, loss_cfg: LossConfig, rng):
    X = Tensor(xb.reshape(-1, 3))
    out, lat = model.forward(X, mode="train", eps_source=rng)
    kl = kl_loss(lat)
    rec = recon_loss(X, out)
    loss = ad.add(kl, ad.scale(rec, loss_cfg.alpha))
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} (kl={float(kl.value)}, recon={float(rec.value)})")
    ad.backward(loss)
    adam_step(model.parameters(), state)
    return value, float(kl.value), float(rec.value)


def train(model: VaeBase, cohort, config: TrainConfig | None = None, checkpoint_path=None):
    """Train on the cohort's train split, monitoring validation L_P.

    Returns the model (restored to its best-validation weights) and the history.
    """
    config = config or TrainConfig()
    X_train = cohort.subset("train")
    X_val = cohort.subset("validation")
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    rng = make_rng(config.seed)
    loss_cfg = LossConfig(config.alpha)
    params = model.parameters()
    state = AdamState.for_params(params, lr=config.lr)
    stopper = EarlyStopping(config.patience)
    history = History()
    best_state = model.state_dict()

    for epoch in range(1, config.max_epochs + 1):
        sums = np.zeros(3)
        for idx in batches(len(X_train), config.batch_size, rng):
            sums += np.array(train_step(model, X_train[idx], state, loss_cfg, rng)) * len(idx)
        sums /= len(X_train)
        val = evaluate_recon(model, X_val, config.batch_size)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        history.record(epoch=epoch, train_loss=sums[0], train_kl=sums[1], train_recon=sums[2], val_recon=val)
        if stopper.step(val, epoch):
            best_state = model.state_dict()
        log.debug("epoch %d loss %.6g val L_P %.6g", epoch, sums[0], val)
        if stopper.should_stop:
            history.stopped_early = True
            break

    model.load_state_dict(best_state)
    history.best_epoch = stopper.best_epoch
    history.best_val = stopper.best
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model_checkpoint(model, config, state, len(history.epochs), history.best_val))
    return model, history


# ----------------------------------------------------------- checkpoints


def model_checkpoint(model: VaeBase, config: TrainConfig | None, state: AdamState | None, epoch: int, best_val: float) -> Checkpoint:
    meta = {
        "arch": model.arch.to_dict(),
        "seed": int(model.seed),
        "vertex_counts": list(getattr(model, "level_vertices", [model.n_fine])),
        "n_fine": int(model.n_fine),
        "train": config.to_dict() if config else None,
        "epoch": int(epoch),
        "best_val": float(best_val) if math.isfinite(best_val) else None,
        "adam_step": int(state.step) if state else 0,
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    if state is not None and state.m:
        names = list(model.params)
        for name, m, v in zip(names, state.m, state.v):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
    return Checkpoint("hvae", meta, arrays)


def load_model(path, hierarchy: TemplateHierarchy) -> VaeBase:
    ckpt = load_checkpoint(path)
    if ckpt.type != "hvae":
        raise ValueError(f"{path} holds a {ckpt.type!r} model, not a neural one")
    arch = ArchConfig(**ckpt.meta["arch"])
    model = build_model(arch.kind, hierarchy, arch, ckpt.meta["seed"])
    counts = list(getattr(model, "level_vertices", [model.n_fine]))
    if counts != ckpt.meta["vertex_counts"]:
        raise ValueError(f"checkpoint expects vertex counts {ckpt.meta['vertex_counts']}, hierarchy has {counts}")
    model.load_state_dict({k[len("param/"):]: v for k, v in ckpt.arrays.items() if k.startswith("param/")})
    return model
