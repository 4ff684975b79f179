"""Toy vision-transformer encoder with four tappable locations per block.

Each transformer block exposes the outputs of its four components (LN1, ATTN,
LN2, FFN) as tap points. A tap can route the tensor through an aligned-VQ
module; in a split deployment the edge computes up to the tap and transmits
indices, and the cloud resumes from the dequantized tensor.

Residual-substitution rule: for a mid-block tap the dequantized tensor both
replaces the tapped tensor and serves as the residual-stream value for the
rest of the block, so the cloud never needs the pre-normalization stream.
Under the pre-norm variant the FFN tap is the block output stream itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .dlp import AlignedVQModule, alignedvq_forward, dlp_in, xavier_uniform
from .vq import quantize

TAP_LOCATIONS = ("LN1", "ATTN", "LN2", "FFN")
VARIANTS = ("pre_norm", "post_norm")


class PartitionError(ValueError):
    """Partition point or tap configuration is invalid."""


@dataclass(frozen=True)
class PartitionSpec:
    """Where edge computation ends: (block index, tap location)."""

    block_index: int
    location: str

    def __post_init__(self):
        if self.location not in TAP_LOCATIONS + ("NONE",):
            raise PartitionError(f"unknown tap location {self.location!r}")
        if self.block_index < 0:
            raise PartitionError("block index must be non-negative")

    @property
    def is_none(self) -> bool:
        return self.location == "NONE"

    def check(self, depth: int) -> None:
        if not self.is_none and self.block_index >= depth:
            raise PartitionError(
                f"block index {self.block_index} out of range for depth {depth}")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    num_classes: int = 10
    variant: str = "pre_norm"
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise PartitionError("patch size must divide image size")
        if self.embed_dim % self.heads != 0:
            raise PartitionError("heads must divide embed dim")
        if self.variant not in VARIANTS:
            raise PartitionError(f"unknown block variant {self.variant!r}")

    @property
    def patch_grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.patch_grid ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1  # class token

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class BlockParams:
    ln1_gain: Var
    ln1_bias: Var
    wq: Var
    wk: Var
    wv: Var
    wo: Var
    ln2_gain: Var
    ln2_bias: Var
    w1: Var
    b1: Var
    w2: Var
    b2: Var
    heads: int
    variant: str = "pre_norm"

    @classmethod
    def initialize(cls, c: int, heads: int, variant: str, rng: np.random.Generator):
        return cls(
            ln1_gain=Var(np.ones(c, dtype=np.float32)),
            ln1_bias=Var(np.zeros(c, dtype=np.float32)),
            wq=Var(xavier_uniform(rng, c, c)),
            wk=Var(xavier_uniform(rng, c, c)),
            wv=Var(xavier_uniform(rng, c, c)),
            wo=Var(xavier_uniform(rng, c, c)),
            ln2_gain=Var(np.ones(c, dtype=np.float32)),
            ln2_bias=Var(np.zeros(c, dtype=np.float32)),
            w1=Var(xavier_uniform(rng, c, 4 * c)),
            b1=Var(np.zeros(4 * c, dtype=np.float32)),
            w2=Var(xavier_uniform(rng, 4 * c, c)),
            b2=Var(np.zeros(c, dtype=np.float32)),
            heads=heads,
            variant=variant,
        )

    def named(self, prefix: str) -> dict[str, Var]:
        return {f"{prefix}.{k}": getattr(self, k) for k in (
            "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo",
            "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2")}


@dataclass
class LowRankAdapter:
    """Additive low-rank update of the classification head: W + alpha * A B."""

    a: Var
    b: Var
    rank: int
    alpha: float

    @classmethod
    def initialize(cls, c: int, num_classes: int, rank: int, alpha: float, seed: int):
        if rank < 1:
            raise PartitionError("adapter rank must be >= 1")
        if rank > c:
            raise PartitionError(f"adapter rank {rank} exceeds feature width {c}")
        rng = np.random.default_rng(seed)
        a = rng.normal(scale=0.02, size=(c, rank)).astype(np.float32)
        return cls(Var(a), Var(np.zeros((rank, num_classes), dtype=np.float32)), rank, alpha)

    def named(self) -> dict[str, Var]:
        return {"adapter.a": self.a, "adapter.b": self.b}


def attention(x: Var, bp: BlockParams) -> Var:
    b, n, c = x.shape
    h = bp.heads
    dh = c // h

    def split_heads(t: Var) -> Var:
        return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q = split_heads(ad.matmul(x, bp.wq))
    k = split_heads(ad.matmul(x, bp.wk))
    v = split_heads(ad.matmul(x, bp.wv))
    scores = ad.mul_scalar(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax_rows(scores), v)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, c))
    return ad.matmul(merged, bp.wo)


def ffn(x: Var, bp: BlockParams) -> Var:
    hidden = ad.gelu(ad.add_bias(ad.matmul(x, bp.w1), bp.b1))
    return ad.add_bias(ad.matmul(hidden, bp.w2), bp.b2)


def _ln1(x, bp):
    return ad.layernorm(x, bp.ln1_gain, bp.ln1_bias)


def _ln2(x, bp):
    return ad.layernorm(x, bp.ln2_gain, bp.ln2_bias)


def block_edge(x: Var, bp: BlockParams, tap: str) -> Var:
    """The tensor transmitted when the block is split at `tap`."""
    if tap not in TAP_LOCATIONS:
        raise PartitionError(f"unknown tap location {tap!r}")
    if bp.variant == "pre_norm":
        if tap == "LN1":
            return _ln1(x, bp)
        if tap == "ATTN":
            return attention(_ln1(x, bp), bp)
        x1 = ad.add(x, attention(_ln1(x, bp), bp))
        if tap == "LN2":
            return _ln2(x1, bp)
        return ad.add(x1, ffn(_ln2(x1, bp), bp))  # FFN tap = block output stream
    # post_norm: LN follows each sublayer; the LN2 tap is the block output
    if tap == "ATTN":
        return attention(x, bp)
    x1 = _ln1(ad.add(x, attention(x, bp)), bp)
    if tap == "LN1":
        return x1
    if tap == "FFN":
        return ffn(x1, bp)
    return _ln2(ad.add(x1, ffn(x1, bp)), bp)


def block_resume(t: Var, bp: BlockParams, tap: str) -> Var:
    """Complete the block from the (dequantized) tap tensor.

    The tap tensor is substituted for both the sublayer value and the
    residual stream, so this function depends on nothing upstream of it.
    """
    if tap not in TAP_LOCATIONS:
        raise PartitionError(f"unknown tap location {tap!r}")
    if bp.variant == "pre_norm":
        if tap == "LN1":
            x1 = ad.add(t, attention(t, bp))
        elif tap == "ATTN":
            x1 = t
        elif tap == "LN2":
            return ad.add(t, ffn(t, bp))
        else:  # FFN: tap is already the block output
            return t
        return ad.add(x1, ffn(_ln2(x1, bp), bp))
    if tap == "ATTN":
        x1 = _ln1(t, bp)
    elif tap == "LN1":
        x1 = t
    elif tap == "FFN":
        return _ln2(t, bp)
    else:  # LN2: block output
        return t
    return _ln2(ad.add(x1, ffn(x1, bp)), bp)


def block_forward(x: Var, bp: BlockParams, collect_taps: dict | None = None) -> Var:
    """Plain block. When a dict is passed, the four tap tensors are stored
    into it (values only, detached from the graph)."""
    if bp.variant == "pre_norm":
        t_ln1 = _ln1(x, bp)
        t_attn = attention(t_ln1, bp)
        x1 = ad.add(x, t_attn)
        t_ln2 = _ln2(x1, bp)
        x2 = ad.add(x1, ffn(t_ln2, bp))
        t_ffn = x2
    else:
        t_attn = attention(x, bp)
        t_ln1 = _ln1(ad.add(x, t_attn), bp)
        t_ffn = ffn(t_ln1, bp)
        t_ln2 = _ln2(ad.add(t_ln1, t_ffn), bp)
        x2 = t_ln2
    if collect_taps is not None:
        collect_taps["LN1"] = t_ln1.value
        collect_taps["ATTN"] = t_attn.value
        collect_taps["LN2"] = t_ln2.value
        collect_taps["FFN"] = t_ffn.value
    return x2


def extract_patches(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """[B, H, W, ch] -> [B, num_patches, patch_dim], row-major patch order."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    b, h, w, ch = images.shape
    if (h, w, ch) != (cfg.image_size, cfg.image_size, cfg.channels):
        raise PartitionError(
            f"image shape {(h, w, ch)} does not match config "
            f"{(cfg.image_size, cfg.image_size, cfg.channels)}")
    ps, grid = cfg.patch_size, cfg.patch_grid
    tiles = images.reshape(b, grid, ps, grid, ps, ch)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles.reshape(b, cfg.num_patches, cfg.patch_dim))


def cv_stats(features: np.ndarray) -> float:
    """Coefficient of variation of per-token magnitudes.

    Magnitude = L2 norm over channels; CV = population std / mean across all
    tokens of the batch. Undefined (and rejected) for all-zero features.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise PartitionError(f"cv_stats expects [B, N, C], got {features.shape}")
    b, n, _ = features.shape
    if b * n < 2:
        raise PartitionError("cv_stats needs at least two tokens")
    mags = np.linalg.norm(features, axis=-1).ravel()
    mean = mags.mean()
    if mean == 0.0:
        raise PartitionError("coefficient of variation undefined for all-zero features")
    return float(mags.std() / mean)


@dataclass
class ForwardResult:
    logits: Var
    indices: np.ndarray | None = None
    commit: Var | None = None
    taps: dict | None = None
    stage_inputs: dict | None = None


class VisionEncoder:
    """Patch embedding, a stack of blocks, and a classification head with an
    optional low-rank adapter. Parameters are graph leaves; evaluation wraps
    calls in no_grad so values match the training path bit for bit."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.embed_dim
        self.patch_proj = Var(xavier_uniform(rng, cfg.patch_dim, c))
        self.patch_bias = Var(np.zeros(c, dtype=np.float32))
        self.pos_embed = Var(rng.normal(scale=0.02, size=(cfg.num_tokens, c)).astype(np.float32))
        self.cls_token = Var(np.zeros((1, c), dtype=np.float32))
        self.blocks = [BlockParams.initialize(c, cfg.heads, cfg.variant, rng)
                       for _ in range(cfg.depth)]
        self.head_w = Var(xavier_uniform(rng, c, cfg.num_classes))
        self.adapter: LowRankAdapter | None = None

    def add_adapter(self, rank: int = 4, alpha: float = 8.0, seed: int = 0) -> LowRankAdapter:
        self.adapter = LowRankAdapter.initialize(
            self.cfg.embed_dim, self.cfg.num_classes, rank, alpha, seed)
        return self.adapter

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self) -> dict[str, Var]:
        params = {"patch.proj": self.patch_proj, "patch.bias": self.patch_bias,
                  "patch.pos": self.pos_embed, "patch.cls": self.cls_token}
        for i, bp in enumerate(self.blocks):
            params.update(bp.named(f"block.{i}"))
        params["head.w"] = self.head_w
        if self.adapter is not None:
            params.update(self.adapter.named())
        return params

    def backbone_params(self) -> list[Var]:
        return [v for k, v in self.named_params().items() if not k.startswith("adapter.")]

    # -- forward pieces -------------------------------------------------------

    def embed(self, images: np.ndarray) -> Var:
        patches = extract_patches(images, self.cfg)
        b = patches.shape[0]
        tokens = ad.add_bias(ad.matmul(Var(patches), self.patch_proj), self.patch_bias)
        cls = ad.tile_batch(self.cls_token, b)
        with_cls = ad.concat(cls, tokens, axis=1)
        return ad.add(with_cls, ad.tile_batch(self.pos_embed, b))

    def head(self, x: Var) -> Var:
        pooled = ad.first_token(x)
        logits = ad.matmul(pooled, self.head_w)
        if self.adapter is not None:
            low = ad.matmul(ad.matmul(pooled, self.adapter.a), self.adapter.b)
            logits = ad.add(logits, ad.mul_scalar(low, self.adapter.alpha))
        return logits

    def forward(self, images: np.ndarray, partition: PartitionSpec | None = None,
                vq_module: AlignedVQModule | None = None, collect_taps: int | None = None,
                want_stage_inputs: bool = False) -> ForwardResult:
        """Monolithic forward. With a partition and a VQ module the tensor at
        the tap goes through the aligned-VQ pipeline in line; this is the same
        arithmetic the split edge/cloud pair performs.
        """
        if partition is not None and not partition.is_none:
            partition.check(self.cfg.depth)
            if vq_module is None:
                raise PartitionError("a tapped partition requires a VQ module")
        taps: dict | None = None
        x = self.embed(images)
        if partition is None or partition.is_none:
            for i, bp in enumerate(self.blocks):
                sink = {} if collect_taps == i else None
                x = block_forward(x, bp, collect_taps=sink)
                if sink is not None:
                    taps = sink
            return ForwardResult(self.head(x), taps=taps)
        b_idx, tap = partition.block_index, partition.location
        for bp in self.blocks[:b_idx]:
            x = block_forward(x, bp)
        t = block_edge(x, self.blocks[b_idx], tap)
        out = alignedvq_forward(t, vq_module, want_stage_inputs=want_stage_inputs)
        recovered, grid, commit = out[0], out[1], out[2]
        x = block_resume(recovered, self.blocks[b_idx], tap)
        for bp in self.blocks[b_idx + 1:]:
            x = block_forward(x, bp)
        return ForwardResult(self.head(x), indices=grid, commit=commit,
                             stage_inputs=out[3] if want_stage_inputs else None)

    def edge_forward(self, images: np.ndarray, partition: PartitionSpec,
                     vq_module: AlignedVQModule) -> np.ndarray:
        """Edge half of a split run: compute to the tap, project, quantize.
        Returns the index grid (the only thing that leaves the device)."""
        partition.check(self.cfg.depth)
        if partition.is_none:
            raise PartitionError("edge run needs a tapped partition")
        with ad.no_grad():
            x = self.embed(images)
            for bp in self.blocks[:partition.block_index]:
                x = block_forward(x, bp)
            t = block_edge(x, self.blocks[partition.block_index], partition.location)
            zin = dlp_in(t, vq_module.dlp)
            grid, _ = quantize(zin.value, vq_module.vq_config, vq_module.codebooks)
        return grid

    def cloud_forward(self, recovered: Var, partition: PartitionSpec) -> Var:
        """Cloud half of a split run: resume from the recovered (dequantized
        and output-projected) tap tensor and produce logits."""
        partition.check(self.cfg.depth)
        x = block_resume(recovered, self.blocks[partition.block_index], partition.location)
        for bp in self.blocks[partition.block_index + 1:]:
            x = block_forward(x, bp)
        return self.head(x)

    def tap_features(self, images: np.ndarray, partition: PartitionSpec) -> np.ndarray:
        """The raw tensor at a tap (no VQ), e.g. to warm up codebook fitting."""
        partition.check(self.cfg.depth)
        with ad.no_grad():
            x = self.embed(images)
            for bp in self.blocks[:partition.block_index]:
                x = block_forward(x, bp)
            t = block_edge(x, self.blocks[partition.block_index], partition.location)
        return t.value

    def location_cv(self, images: np.ndarray, block_index: int = 0) -> dict[str, float]:
        """Coefficient of variation of token magnitudes at each tap location."""
        with ad.no_grad():
            result = self.forward(images, collect_taps=block_index)
        return {loc: cv_stats(t) for loc, t in result.taps.items()}
