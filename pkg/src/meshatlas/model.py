"""Hierarchical mesh VAE and the ablation variants that share its machinery.

Levels are indexed like the template hierarchy: 0 is the coarsest mesh and
the last index is the input resolution. The encoder walks fine to coarse,
pooling between levels; the decoder walks coarse to fine, unpooling and
fusing the latent of each level it owns.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hierarchy import TemplateHierarchy
from .nn import (
    BatchedOperator,
    Dense,
    GraphConvLayer,
    ParamStore,
    ResBlock,
    graph_conv,
    make_rng,
    normalized_adjacency,
    res_block,
)

KINDS = ("proposed", "pooling", "gcn", "fc")


@dataclass
class ArchConfig:
    kind: str = "proposed"
    width: int = 32
    latent_channels: int = 8
    res_blocks: int = 2
    fc_hidden: tuple = (256, 64)
    fc_latent: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        self.fc_hidden = tuple(self.fc_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_hidden"] = list(self.fc_hidden)
        return d


@dataclass
class LatentCode:
    """Latent distribution of one case. Entry 0 is the coarsest latent level."""

    levels: list
    mu: list
    logvar: list
    z: list

    def __post_init__(self):
        if not (len(self.levels) == len(self.mu) == len(self.logvar) == len(self.z)):
            raise ValueError("latent code fields disagree on level count")


@dataclass
class BatchLatents:
    """Latent tensors of a batch; each tensor stacks `batch_size` cases along rows."""

    levels: list
    mu: list = field(default_factory=list)
    logvar: list = field(default_factory=list)
    z: list = field(default_factory=list)
    batch_size: int = 1

    def to_codes(self) -> list:
        B = self.batch_size
        split = lambda ts: [t.value.reshape(B, -1, t.shape[1]) for t in ts]  # noqa: E731
        mu, lv, z = split(self.mu), split(self.logvar), split(self.z)
        return [
            LatentCode(list(self.levels), [m[b].copy() for m in mu], [v[b].copy() for v in lv], [x[b].copy() for x in z])
            for b in range(B)
        ]

    @classmethod
    def from_codes(cls, codes) -> "BatchLatents":
        if isinstance(codes, LatentCode):
            codes = [codes]
        codes = list(codes)
        if not codes:
            raise ValueError("no latent codes given")
        levels = codes[0].levels
        stack = lambda name, i: Tensor(np.concatenate([getattr(c, name)[i] for c in codes]))  # noqa: E731
        n = len(levels)
        return cls(
            list(levels),
            [stack("mu", i) for i in range(n)],
            [stack("logvar", i) for i in range(n)],
            [stack("z", i) for i in range(n)],
            len(codes),
        )


def reparameterize(mu, logvar, eps_source=None, mode: str = "train") -> Tensor:
    """z = mu + eps * exp(logvar / 2); eps = 0 in inference mode.

    `eps_source` is a numpy Generator, an explicit eps array, or None (inference).
    Models also accept a dict mapping latent level to its eps array.
    """
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ValueError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if mode == "inference":
        return mu
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(eps_source, np.random.Generator):
        eps = eps_source.standard_normal(mu.shape)
    elif eps_source is None:
        raise ValueError("training mode needs an eps source")
    else:
        eps = np.broadcast_to(np.asarray(eps_source, dtype=np.float64), mu.shape)
    return ad.add(mu, ad.mul(Tensor(eps), ad.exp(ad.scale(logvar, 0.5))))


def _as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[None] if X.ndim == 2 else X


class VaeBase:
    """Shared encode/decode plumbing; subclasses provide the tensor-level passes."""

    arch: ArchConfig
    store: ParamStore
    n_fine: int

    @property
    def params(self) -> dict:
        return self.store.tensors

    def parameters(self) -> list:
        return list(self.store.tensors.values())

    def state_dict(self) -> dict:
        return {k: t.value.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ValueError(f"parameter names differ from the architecture: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"parameter {k} has shape {v.shape}, expected {t.shape}")
            t.value = v.copy()

    @property
    def num_latent_levels(self) -> int:
        return len(self.latent_levels)

    def _check_input(self, X: Tensor):
        if X.shape[1] != 3 or X.shape[0] % self.n_fine:
            raise ValueError(f"input must stack meshes of {self.n_fine} vertices, got {X.shape}")

    def forward(self, X, mode: str = "train", eps_source=None):
        """Run encoder and decoder on stacked rows (B*v, 3). Returns (X_hat, BatchLatents)."""
        X = ad.as_tensor(X)
        self._check_input(X)
        latents, _ = self.encode_tensors(X, mode, eps_source)
        return self.decode_tensors(latents), latents

    def encode(self, X, mode: str = "inference", eps_source=None, return_features: bool = False):
        X = _as_batch(X)
        if X.shape[1] != self.n_fine:
            raise ValueError(f"expected meshes with {self.n_fine} vertices, got {X.shape[1]}")
        latents, feats = self.encode_tensors(Tensor(X.reshape(-1, 3)), mode, eps_source)
        codes = latents.to_codes()
        if return_features:
            B = X.shape[0]
            return codes, {k: f.value.reshape(B, -1, f.shape[1]) for k, f in feats.items()}
        return codes

    def decode(self, codes) -> np.ndarray:
        latents = BatchLatents.from_codes(codes)
        if list(latents.levels) != list(self.latent_levels):
            raise ValueError(f"code has latent levels {latents.levels}, model expects {self.latent_levels}")
        for t, n in zip(latents.z, self.latent_sizes):
            if t.shape != (latents.batch_size * n, self.latent_channels):
                raise ValueError(f"latent shape {t.shape} does not match the model")
        out = self.decode_tensors(latents)
        return out.value.reshape(latents.batch_size, self.n_fine, 3)

    def reconstruct(self, X) -> np.ndarray:
        return self.decode(self.encode(X))


class HVaeModel(VaeBase):
    """Graph-convolutional VAE over a template hierarchy.

    kind="proposed" keeps a latent at every level, "pooling" only at the
    coarsest level, and "gcn" runs on the fine level alone with a
    full-resolution latent.
    """

    def __init__(self, hierarchy: TemplateHierarchy, arch: ArchConfig | None = None, seed: int = 0):
        arch = arch or ArchConfig()
        if arch.kind == "fc":
            raise ValueError("use FcVae for the fully connected model")
        self.arch = arch
        self.hierarchy = hierarchy
        self.seed = seed
        if arch.kind == "gcn":
            level_ids = [hierarchy.num_levels - 1]
            self.pool_ops, self.unpool_ops = [], []
        else:
            level_ids = list(range(hierarchy.num_levels))
            self.pool_ops = [BatchedOperator(m) for m in hierarchy.pooling_matrices]
            self.unpool_ops = [BatchedOperator(m) for m in hierarchy.unpooling_matrices]
        self.n_levels = len(level_ids)
        self.level_vertices = [hierarchy.levels[i].n_vertices for i in level_ids]
        self.n_fine = self.level_vertices[-1]
        self.adj_ops = [BatchedOperator(normalized_adjacency(hierarchy.adjacency[i])) for i in level_ids]
        self.latent_levels = list(range(self.n_levels)) if arch.kind == "proposed" else [0]
        self.latent_channels = arch.latent_channels
        self.latent_sizes = [self.level_vertices[k] for k in self.latent_levels]
        self._build(make_rng(seed))

    def _build(self, rng):
        a = self.arch
        w, cz, L = a.width, a.latent_channels, self.n_levels
        store = self.store = ParamStore(rng)
        self.enc_blocks, self.mu_heads, self.logvar_heads = {}, {}, {}
        for k in reversed(range(L)):
            c_in = 3 if k == L - 1 else w
            self.enc_blocks[k] = [
                ResBlock.create(store, f"enc{k}.res{r}", c_in if r == 0 else w, w, self.adj_ops[k])
                for r in range(a.res_blocks)
            ]
            if k in self.latent_levels:
                self.mu_heads[k] = GraphConvLayer.create(store, f"enc{k}.mu", w, cz, self.adj_ops[k])
                self.logvar_heads[k] = GraphConvLayer.create(store, f"enc{k}.logvar", w, cz, self.adj_ops[k])
        self.dec_blocks, self.fuse = {}, {}
        for k in range(L):
            c_in = cz if k == 0 else w
            if k > 0 and k in self.latent_levels:
                self.fuse[k] = GraphConvLayer.create(store, f"dec{k}.fuse", w + cz, w, self.adj_ops[k])
            self.dec_blocks[k] = [
                ResBlock.create(store, f"dec{k}.res{r}", c_in if r == 0 else w, w, self.adj_ops[k])
                for r in range(a.res_blocks)
            ]
        # zero output projection: training starts from X_hat = 0 instead of a large random field
        self.out_layer = GraphConvLayer.create(store, "out", w, 3, self.adj_ops[L - 1], zero_weight=True)

    def encode_tensors(self, X: Tensor, mode="train", eps_source=None):
        B = X.shape[0] // self.n_fine
        latents = BatchLatents(levels=[], batch_size=B)
        feats = {}
        h = X
        for k in reversed(range(self.n_levels)):
            for block in self.enc_blocks[k]:
                h = res_block(h, block)
            feats[k] = h
            if k in self.latent_levels:
                mu = graph_conv(h, self.mu_heads[k])
                lv = graph_conv(h, self.logvar_heads[k])
                latents.levels.insert(0, k)
                latents.mu.insert(0, mu)
                latents.logvar.insert(0, lv)
                src = eps_source.get(k) if isinstance(eps_source, dict) else eps_source
                latents.z.insert(0, reparameterize(mu, lv, src, mode))
            if k > 0:
                h = self.pool_ops[k - 1].apply(h)
        return latents, feats

    def decode_tensors(self, latents: BatchLatents) -> Tensor:
        z = dict(zip(latents.levels, latents.z))
        h = z[0]
        for k in range(self.n_levels):
            if k > 0:
                h = self.unpool_ops[k - 1].apply(h)
                if k in self.fuse:
                    h = graph_conv(ad.concat([h, z[k]], axis=1), self.fuse[k])
            for block in self.dec_blocks[k]:
                h = res_block(h, block)
        return graph_conv(h, self.out_layer)


class FcVae(VaeBase):
    """Fully connected VAE on flattened vertex coordinates."""

    def __init__(self, n_vertices: int, arch: ArchConfig | None = None, seed: int = 0):
        arch = arch or ArchConfig(kind="fc")
        self.arch = arch
        self.seed = seed
        self.n_fine = n_vertices
        self.n_levels = 1
        self.latent_levels = [0]
        self.latent_channels = arch.fc_latent
        self.latent_sizes = [1]
        store = self.store = ParamStore(make_rng(seed))
        dims = [3 * n_vertices, *arch.fc_hidden]
        self.enc = [Dense.create(store, f"enc.fc{i}", a, b) for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        self.mu_head = Dense.create(store, "enc.mu", dims[-1], arch.fc_latent)
        self.logvar_head = Dense.create(store, "enc.logvar", dims[-1], arch.fc_latent)
        rdims = [arch.fc_latent, *reversed(arch.fc_hidden)]
        self.dec = [Dense.create(store, f"dec.fc{i}", a, b) for i, (a, b) in enumerate(zip(rdims, rdims[1:]))]
        self.out_layer = Dense.create(store, "out", rdims[-1], 3 * n_vertices)
        self.out_layer.weight.value[:] = 0.0

    def encode_tensors(self, X: Tensor, mode="train", eps_source=None):
        B = X.shape[0] // self.n_fine
        h = ad.reshape(X, (B, 3 * self.n_fine))
        for layer in self.enc:
            h = ad.elu(layer(h))
        mu, lv = self.mu_head(h), self.logvar_head(h)
        z = reparameterize(mu, lv, eps_source, mode)
        return BatchLatents([0], [mu], [lv], [z], B), {0: h}

    def decode_tensors(self, latents: BatchLatents) -> Tensor:
        h = latents.z[0]
        for layer in self.dec:
            h = ad.elu(layer(h))
        out = self.out_layer(h)
        return ad.reshape(out, (latents.batch_size * self.n_fine, 3))


def build_model(kind: str, hierarchy: TemplateHierarchy, arch: ArchConfig | None = None, seed: int = 0) -> VaeBase:
    arch = ArchConfig(**{**(arch.to_dict() if arch else {}), "kind": kind})
    if kind == "fc":
        return FcVae(hierarchy.fine.n_vertices, arch, seed)
    return HVaeModel(hierarchy, arch, seed)


def encode(model: VaeBase, X, mode: str = "inference", eps_source=None):
    return model.encode(X, mode, eps_source)


def decode(model: VaeBase, codes) -> np.ndarray:
    return model.decode(codes)
