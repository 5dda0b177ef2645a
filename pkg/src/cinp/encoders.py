"""Dual encoders and the visual decoder.

Visual path: non-overlapping cubic patches -> linear embedding + learned
positions -> pre-norm self-attention blocks -> mean-pool -> projection ->
L2 normalization. Network path: FCN rows as node features -> linear node
embedding (positions optional) -> the same block stack -> mean-pool ->
projection -> L2 normalization. The decoder consumes the pre-pool token
grid of the masked image and upsamples back to voxel space with a stack of
stride-equals-kernel transposed convolutions (a per-token linear map
followed by a depth-to-space rearrangement).

Both embeddings live in one space: similarity is a plain dot product of
unit-norm vectors, i.e. cosine similarity.

Internals run batched over rank-3 tensors (batch, tokens, features); the
single-sample entry points are batch-of-one wrappers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadConfig, ShapeMismatch
from .synthdata import Fcn, Volume3D, fcn_node_features

Array = np.ndarray

MLP_RATIO = 2
LAYER_NORM_EPS = 1e-5
INIT_STD = 0.02
INIT_TRUNC = 2.0  # in units of INIT_STD
TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 100.0
LOG_TEMPERATURE = "log_temperature"


@dataclass(frozen=True)
class VisualEncoderCfg:
    patch_size: int = 4
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    input_dims: tuple[int, int, int] = (16, 16, 16)

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if min(self.patch_size, self.embed_dim, self.n_layers, self.n_heads) < 1:
            raise BadConfig("VisualEncoderCfg: all extents must be positive")
        if any(d % self.patch_size != 0 for d in self.input_dims):
            raise BadConfig(
                f"VisualEncoderCfg: patch_size {self.patch_size} must divide dims "
                f"{self.input_dims}")
        if self.embed_dim % self.n_heads != 0:
            raise BadConfig("VisualEncoderCfg: n_heads must divide embed_dim")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(d // self.patch_size for d in self.input_dims)

    @property
    def n_tokens(self) -> int:
        g = self.grid
        return g[0] * g[1] * g[2]

    @property
    def n_voxels(self) -> int:
        d, h, w = self.input_dims
        return d * h * w

    @property
    def patch_voxels(self) -> int:
        return self.patch_size ** 3


@dataclass(frozen=True)
class NetworkEncoderCfg:
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    n_rois: int = 16
    use_positional: bool = False

    def __post_init__(self):
        if min(self.embed_dim, self.n_layers, self.n_heads, self.n_rois) < 1:
            raise BadConfig("NetworkEncoderCfg: all extents must be positive")
        if self.embed_dim % self.n_heads != 0:
            raise BadConfig("NetworkEncoderCfg: n_heads must divide embed_dim")


def upsample_factors(patch_size: int) -> list[int]:
    """Per-stage upsampling factors whose product is patch_size."""
    if patch_size == 1:
        return [1]
    factors = []
    p = patch_size
    while p % 2 == 0:
        factors.append(2)
        p //= 2
    if p > 1:
        factors.append(p)
    return factors


def decoder_channels(embed_dim: int, n_stages: int) -> list[int]:
    """Channel widths after each decoder stage; the last stage emits 1."""
    chans = []
    for j in range(n_stages):
        chans.append(1 if j == n_stages - 1 else max(embed_dim // 2 ** (j + 1), 4))
    return chans


# ---------------------------------------------------------------------------
# parameter table
# ---------------------------------------------------------------------------

def _block_spec(prefix: str, d: int) -> dict[str, tuple[tuple[int, ...], str]]:
    h = MLP_RATIO * d
    spec: dict[str, tuple[tuple[int, ...], str]] = {}
    spec[f"{prefix}.ln1.g"] = ((1, d), "ones")
    spec[f"{prefix}.ln1.b"] = ((1, d), "zeros")
    for w in ("wq", "wk", "wv", "wo"):
        spec[f"{prefix}.attn.{w}"] = ((d, d), "weight")
    for b in ("bq", "bk", "bv", "bo"):
        spec[f"{prefix}.attn.{b}"] = ((1, d), "zeros")
    spec[f"{prefix}.ln2.g"] = ((1, d), "ones")
    spec[f"{prefix}.ln2.b"] = ((1, d), "zeros")
    spec[f"{prefix}.mlp.w1"] = ((d, h), "weight")
    spec[f"{prefix}.mlp.b1"] = ((1, h), "zeros")
    spec[f"{prefix}.mlp.w2"] = ((h, d), "weight")
    spec[f"{prefix}.mlp.b2"] = ((1, d), "zeros")
    return spec


def param_spec(vcfg: VisualEncoderCfg, ncfg: NetworkEncoderCfg,
               ) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, init kind) for every learnable tensor.

    Single source of truth shared by init_params and checkpoint validation.
    """
    if ncfg.embed_dim != vcfg.embed_dim:
        raise BadConfig("param_spec: encoder embed_dims must match")
    d = vcfg.embed_dim
    spec: dict[str, tuple[tuple[int, ...], str]] = {}

    spec["vis.patch.w"] = ((vcfg.patch_voxels, d), "weight")
    spec["vis.patch.b"] = ((1, d), "zeros")
    spec["vis.pos"] = ((vcfg.n_tokens, d), "weight")
    for i in range(vcfg.n_layers):
        spec.update(_block_spec(f"vis.blk{i}", d))
    spec["vis.proj.w"] = ((d, d), "weight")
    spec["vis.proj.b"] = ((1, d), "zeros")

    spec["net.node.w"] = ((ncfg.n_rois, d), "weight")
    spec["net.node.b"] = ((1, d), "zeros")
    if ncfg.use_positional:
        spec["net.pos"] = ((ncfg.n_rois, d), "weight")
    for i in range(ncfg.n_layers):
        spec.update(_block_spec(f"net.blk{i}", d))
    spec["net.proj.w"] = ((d, d), "weight")
    spec["net.proj.b"] = ((1, d), "zeros")

    factors = upsample_factors(vcfg.patch_size)
    chans = decoder_channels(d, len(factors))
    c_in = d
    for j, (s, c_out) in enumerate(zip(factors, chans)):
        spec[f"dec.up{j}.w"] = ((c_in, s ** 3 * c_out), "weight")
        spec[f"dec.up{j}.b"] = ((1, s ** 3 * c_out), "zeros")
        c_in = c_out

    spec["inm.w"] = ((2 * d, 2), "weight")
    spec["inm.b"] = ((1, 2), "zeros")
    spec[LOG_TEMPERATURE] = ((1,), "log_temp")
    return spec


@dataclass
class ModelParams:
    """Named collection of learnable tensors."""

    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def tau(self) -> float:
        return float(np.exp(self.tensors[LOG_TEMPERATURE].data[0]))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> Array:
    """N(0, INIT_STD^2) truncated at +/- INIT_TRUNC sigma, by resampling."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > INIT_TRUNC
        n_bad = int(bad.sum())
        if n_bad == 0:
            return x * INIT_STD
        x[bad] = rng.standard_normal(n_bad)


def init_params(vcfg: VisualEncoderCfg, ncfg: NetworkEncoderCfg, seed: int) -> ModelParams:
    """Fresh parameters; deterministic under seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, (shape, kind) in param_spec(vcfg, ncfg).items():
        if kind == "weight":
            data = _trunc_normal(rng, shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "log_temp":
            data = np.full(shape, math.log(TAU_INIT))
        else:  # pragma: no cover
            raise BadConfig(f"init_params: unknown kind {kind!r}")
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


def clamp_temperature(params: ModelParams) -> ModelParams:
    """Keep exp(log_temperature) inside [TAU_MIN, TAU_MAX] after a step."""
    t = params.tensors[LOG_TEMPERATURE]
    clipped = np.clip(t.data, math.log(TAU_MIN), math.log(TAU_MAX))
    if not np.array_equal(clipped, t.data):
        params.tensors[LOG_TEMPERATURE] = Tensor(clipped, requires_grad=True)
    return params


def temperature(params: ModelParams) -> Tensor:
    """The learnable temperature as a graph node, tau = exp(log_temperature)."""
    return ad.exp(params[LOG_TEMPERATURE])


# ---------------------------------------------------------------------------
# cached constants
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _eps_const(eps: float) -> Tensor:
    return Tensor(np.array(eps))


@lru_cache(maxsize=None)
def _depth_to_space_perm(grid: tuple[int, int, int], s: int, c: int,
                         batch: int) -> Array:
    """Flat index map for (B, T, s^3 c) -> (B, T s^3, c) block upsampling."""
    gd, gh, gw = grid
    oh, ow = gh * s, gw * s
    block = gd * gh * gw * s ** 3 * c
    a = np.arange(block)
    # decompose flat input index: (((r * s + i) * s + j) * s + k) * c + m
    m = a % c
    rest = a // c
    k = rest % s
    rest //= s
    j = rest % s
    rest //= s
    i = rest % s
    r = rest // s
    gw_i = r % gw
    gh_i = (r // gw) % gh
    gd_i = r // (gw * gh)
    out_row = ((gd_i * s + i) * oh + (gh_i * s + j)) * ow + (gw_i * s + k)
    flat_out = out_row * c + m
    perm = np.empty_like(a)
    perm[flat_out] = a
    if batch == 1:
        return perm
    return (np.arange(batch)[:, None] * block + perm[None, :]).ravel()


def _patchify(v: Volume3D, patch: int) -> Array:
    """(n_tokens, patch^3) matrix of flattened non-overlapping patches."""
    d, h, w = v.dims
    x = v.as_3d().reshape(d // patch, patch, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(-1, patch ** 3))


# ---------------------------------------------------------------------------
# building blocks (batched: x has shape (B, tokens, features))
# ---------------------------------------------------------------------------

def _layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = ad.mean_axis(x, -1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean_axis(ad.mul(xc, xc), -1, keepdims=True)
    sd = ad.sqrt(ad.add(var, _eps_const(LAYER_NORM_EPS)))
    return ad.add(ad.mul(ad.div(xc, sd), g), b)


def _attention(x: Tensor, p: ModelParams, prefix: str, n_heads: int) -> Tensor:
    d = x.shape[-1]
    dh = d // n_heads
    q = ad.add(ad.matmul(x, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
    k = ad.add(ad.matmul(x, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
    v = ad.add(ad.matmul(x, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_last(q, lo, hi)
        kh = ad.slice_last(k, lo, hi)
        vh = ad.slice_last(v, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.swap_last2(kh)), 1.0 / math.sqrt(dh))
        heads.append(ad.matmul(ad.softmax_last(scores), vh))
    mixed = heads[0] if n_heads == 1 else ad.concat_last(*heads)
    return ad.add(ad.matmul(mixed, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def _mlp(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    hidden = ad.gelu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def _block(x: Tensor, p: ModelParams, prefix: str, n_heads: int) -> Tensor:
    h = ad.add(x, _attention(_layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"]),
                             p, f"{prefix}.attn", n_heads))
    return ad.add(h, _mlp(_layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"]),
                          p, f"{prefix}.mlp"))


def _pool_project(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    pooled = ad.mean_axis(x, 1)  # (B, tokens, d) -> (B, d)
    return ad.l2_normalize_rows(
        ad.add(ad.matmul(pooled, p[f"{prefix}.w"]), p[f"{prefix}.b"]))


# ---------------------------------------------------------------------------
# public forward passes
# ---------------------------------------------------------------------------

def visual_forward_batch(volumes: list[Volume3D], params: ModelParams,
                         cfg: VisualEncoderCfg) -> tuple[Tensor, Tensor]:
    """Returns (unit-norm embeddings (B, d), pre-pool tokens (B, T, d))."""
    for vol in volumes:
        if vol.dims != cfg.input_dims:
            raise ShapeMismatch(
                f"visual_forward: volume dims {vol.dims} != cfg dims {cfg.input_dims}")
    patches = Tensor(np.stack([_patchify(v, cfg.patch_size) for v in volumes]))
    x = ad.add(ad.add(ad.matmul(patches, params["vis.patch.w"]),
                      params["vis.patch.b"]), params["vis.pos"])
    for i in range(cfg.n_layers):
        x = _block(x, params, f"vis.blk{i}", cfg.n_heads)
    return _pool_project(x, params, "vis.proj"), x


def visual_forward(volume: Volume3D, params: ModelParams,
                   cfg: VisualEncoderCfg) -> tuple[Tensor, Tensor]:
    """Single-sample wrapper: ((1, d) embedding, (T, d) pre-pool tokens)."""
    emb, tokens = visual_forward_batch([volume], params, cfg)
    return emb, ad.reshape(tokens, (cfg.n_tokens, cfg.embed_dim))


def visual_encode(volume: Volume3D, params: ModelParams, cfg: VisualEncoderCfg) -> Tensor:
    """Unit-norm image embedding, shape (1, d)."""
    return visual_forward_batch([volume], params, cfg)[0]


def visual_decode_batch(tokens: Tensor, params: ModelParams,
                        cfg: VisualEncoderCfg) -> Tensor:
    """Reconstruct flat volumes (B, D*H*W) from pre-pool token grids."""
    if tokens.ndim != 3 or tokens.shape[1:] != (cfg.n_tokens, cfg.embed_dim):
        raise ShapeMismatch(
            f"visual_decode: tokens {tokens.shape} != "
            f"(B, {cfg.n_tokens}, {cfg.embed_dim})")
    batch = tokens.shape[0]
    factors = upsample_factors(cfg.patch_size)
    chans = decoder_channels(cfg.embed_dim, len(factors))
    grid = cfg.grid
    x = tokens
    for j, (s, c_out) in enumerate(zip(factors, chans)):
        y = ad.add(ad.matmul(x, params[f"dec.up{j}.w"]), params[f"dec.up{j}.b"])
        n_tokens = grid[0] * grid[1] * grid[2]
        perm = _depth_to_space_perm(grid, s, c_out, batch)
        x = ad.gather_flat(y, perm, (batch, n_tokens * s ** 3, c_out))
        grid = (grid[0] * s, grid[1] * s, grid[2] * s)
        if j < len(factors) - 1:
            x = ad.gelu(x)
    return ad.reshape(x, (batch, cfg.n_voxels))


def visual_decode(tokens: Tensor, params: ModelParams, cfg: VisualEncoderCfg) -> Tensor:
    """Single-sample wrapper: reconstruct a flat volume of length D*H*W."""
    if tokens.ndim == 2:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
    recon = visual_decode_batch(tokens, params, cfg)
    return ad.reshape(recon, (cfg.n_voxels,))


def decode_to_volume(tokens: Tensor, params: ModelParams, cfg: VisualEncoderCfg,
                     subject_id: str = "") -> Volume3D:
    """Non-training convenience: run the decoder and wrap the result."""
    recon = visual_decode(tokens, params, cfg)
    return Volume3D(cfg.input_dims, recon.data.copy(), subject_id)


def network_encode_batch(fcns: list[Fcn], params: ModelParams,
                         cfg: NetworkEncoderCfg) -> Tensor:
    """Unit-norm network embeddings, shape (B, d)."""
    for fcn in fcns:
        if fcn.n_rois != cfg.n_rois:
            raise ShapeMismatch(
                f"network_encode: fcn has {fcn.n_rois} ROIs, cfg expects {cfg.n_rois}")
    feats = np.stack([fcn_node_features(f) for f in fcns])
    return _network_forward(Tensor(feats), params, cfg)


def network_encode(fcn: Fcn, params: ModelParams, cfg: NetworkEncoderCfg) -> Tensor:
    """Unit-norm network embedding, shape (1, d)."""
    return network_encode_batch([fcn], params, cfg)


def network_encode_tokens(node_features: Array, params: ModelParams,
                          cfg: NetworkEncoderCfg) -> Tensor:
    """Encode an explicit node-feature matrix (rows are node tokens)."""
    node_features = np.ascontiguousarray(node_features, dtype=np.float64)
    if node_features.shape != (cfg.n_rois, cfg.n_rois):
        raise ShapeMismatch(
            f"network_encode_tokens: features {node_features.shape} != "
            f"({cfg.n_rois}, {cfg.n_rois})")
    return _network_forward(Tensor(node_features[None, :, :]), params, cfg)


def _network_forward(feats: Tensor, params: ModelParams,
                     cfg: NetworkEncoderCfg) -> Tensor:
    x = ad.add(ad.matmul(feats, params["net.node.w"]), params["net.node.b"])
    if cfg.use_positional:
        x = ad.add(x, params["net.pos"])
    for i in range(cfg.n_layers):
        x = _block(x, params, f"net.blk{i}", cfg.n_heads)
    return _pool_project(x, params, "net.proj")
