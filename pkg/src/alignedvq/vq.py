"""Vector quantization family: vanilla, residual stages, and channel groups.

A codebook maps D-dimensional vectors to the index of their nearest centroid.
Residual quantization re-quantizes the leftover error with fresh codebooks;
grouped quantization slices the channel dimension into contiguous groups, one
codebook per group. Codebooks are fit by k-means and refined online with an
exponential-moving-average update; the straight-through estimator keeps the
gradient chain alive across the discrete step.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Var, as_array, mse, mul_scalar, straight_through


class CodebookError(ValueError):
    """Codebook or quantizer configuration violates its contract."""


def _is_power_of_two(k: int) -> bool:
    return k >= 2 and (k & (k - 1)) == 0


def centroid_hash(centroids: np.ndarray) -> int:
    """64-bit content digest of a centroid matrix (shape + little-endian bytes)."""
    k, d = centroids.shape
    h = hashlib.blake2b(digest_size=8)
    h.update(np.array([k, d], dtype="<u4").tobytes())
    h.update(np.ascontiguousarray(centroids, dtype="<f4").tobytes())
    return int.from_bytes(h.digest(), "little")


@dataclass
class Codebook:
    """K centroids of dimension D plus the moving-average statistics that
    drive online updates. The content hash identifies the centroid state so
    both ends of a link can detect desynchronized codebooks."""

    centroids: np.ndarray            # [K, D] float32
    ema_size: np.ndarray = None      # [K] float64
    ema_sum: np.ndarray = None       # [K, D] float64
    content_hash: int = 0

    def __post_init__(self):
        self.centroids = as_array(self.centroids)
        if self.centroids.ndim != 2:
            raise CodebookError(f"centroids must be [K, D], got {self.centroids.shape}")
        k = self.centroids.shape[0]
        if not _is_power_of_two(k) or k > 65536:
            raise CodebookError(f"entry count must be a power of two in [2, 2^16], got {k}")
        if self.ema_size is None:
            # Fresh statistics equal the centroids with unit mass.
            self.ema_size = np.ones(k, dtype=np.float64)
            self.ema_sum = self.centroids.astype(np.float64).copy()
        self.ema_size = np.asarray(self.ema_size, dtype=np.float64)
        self.ema_sum = np.asarray(self.ema_sum, dtype=np.float64)
        self.refresh_hash()

    @property
    def num_entries(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def index_bits(self) -> int:
        return self.num_entries.bit_length() - 1

    def refresh_hash(self) -> None:
        self.content_hash = centroid_hash(self.centroids)


@dataclass(frozen=True)
class VQConfig:
    """Shape of a residual/grouped quantizer over a C-channel feature stream.

    Codebook lists are ordered stage-major: codebooks[s * num_groups + q]
    serves residual stage s of channel group q. Groups are contiguous channel
    slices [q*C/g, (q+1)*C/g).
    """

    num_codebooks: int   # residual stages n
    num_groups: int      # channel groups g
    entries: int         # K, shared by every codebook
    feature_dim: int     # C

    def __post_init__(self):
        if self.num_codebooks < 1 or self.num_groups < 1:
            raise CodebookError("need at least one stage and one group")
        if self.feature_dim % self.num_groups != 0:
            raise CodebookError(
                f"groups ({self.num_groups}) must divide channels ({self.feature_dim})")
        if not _is_power_of_two(self.entries):
            raise CodebookError(f"entries must be a power of two, got {self.entries}")

    @property
    def group_dim(self) -> int:
        return self.feature_dim // self.num_groups

    @property
    def total_codebooks(self) -> int:
        return self.num_codebooks * self.num_groups

    @property
    def index_bits(self) -> int:
        return self.entries.bit_length() - 1

    def check_codebooks(self, codebooks: list[Codebook]) -> None:
        if len(codebooks) != self.total_codebooks:
            raise CodebookError(
                f"expected {self.total_codebooks} codebooks, got {len(codebooks)}")
        for cb in codebooks:
            if cb.num_entries != self.entries or cb.dim != self.group_dim:
                raise CodebookError(
                    f"codebook [{cb.num_entries}x{cb.dim}] does not match "
                    f"config [{self.entries}x{self.group_dim}]")


def nearest_indices(z: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Index of the nearest centroid for each row of z, squared-Euclidean
    metric, ties broken toward the lowest index.

    Distances use the expanded form |e|^2 - 2<e,z> + |z|^2 with precomputed
    centroid norms; the naive metric is kept as a test oracle.
    """
    z = np.asarray(z, dtype=np.float32)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.shape[1] != codebook.dim:
        raise CodebookError(f"vector dim {z.shape[1]} != codebook dim {codebook.dim}")
    e = codebook.centroids
    e_norms = np.sum(e * e, axis=1)
    d = e_norms[None, :] - 2.0 * (z @ e.T) + np.sum(z * z, axis=1)[:, None]
    idx = np.argmin(d, axis=1)
    return int(idx[0]) if single else idx


def nearest_index(z: np.ndarray, codebook: Codebook) -> int:
    return nearest_indices(np.asarray(z), codebook)


def dequantize_indices(indices: np.ndarray, config: VQConfig,
                       codebooks: list[Codebook]) -> np.ndarray:
    """Reconstruct [B, N, C] features from an index grid by summing the
    selected centroids stage by stage. This is the single reconstruction
    path shared by the quantizer and the payload decoder, so both ends of a
    link produce bit-identical features from the same indices."""
    config.check_codebooks(codebooks)
    indices = np.asarray(indices)
    b, n_tok, n, g = indices.shape
    if n != config.num_codebooks or g != config.num_groups:
        raise CodebookError(f"index grid {indices.shape} does not match config")
    if indices.min() < 0 or indices.max() >= config.entries:
        raise CodebookError("index outside codebook range")
    d = config.group_dim
    flat = np.zeros((b * n_tok, config.feature_dim), dtype=np.float32)
    idx2 = indices.reshape(b * n_tok, n, g)
    for q in range(g):
        sl = slice(q * d, (q + 1) * d)
        for s in range(n):
            cb = codebooks[s * g + q]
            flat[:, sl] += cb.centroids[idx2[:, s, q]]
    return flat.reshape(b, n_tok, config.feature_dim)


def quantize(features: np.ndarray, config: VQConfig, codebooks: list[Codebook],
             want_stage_inputs: bool = False):
    """Quantize [B, N, C] features.

    Returns (indices [B, N, n, g], dequantized [B, N, C]) and, when asked,
    the per-(stage, group) residual inputs used for moving-average codebook
    updates. Stage s of group q quantizes the residual left by stages < s.
    """
    config.check_codebooks(codebooks)
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 3 or features.shape[2] != config.feature_dim:
        raise CodebookError(f"features {features.shape} do not match C={config.feature_dim}")
    b, n_tok, _ = features.shape
    n, g, d = config.num_codebooks, config.num_groups, config.group_dim
    flat = features.reshape(b * n_tok, config.feature_dim)
    indices = np.empty((b * n_tok, n, g), dtype=np.int64)
    stage_inputs: dict[tuple[int, int], np.ndarray] = {}
    for q in range(g):
        residual = flat[:, q * d:(q + 1) * d].copy()
        for s in range(n):
            cb = codebooks[s * g + q]
            if want_stage_inputs:
                stage_inputs[(s, q)] = residual.copy()
            idx = nearest_indices(residual, cb)
            indices[:, s, q] = idx
            residual -= cb.centroids[idx]
    grid = indices.reshape(b, n_tok, n, g)
    dequantized = dequantize_indices(grid, config, codebooks)
    if want_stage_inputs:
        return grid, dequantized, stage_inputs
    return grid, dequantized


def ste_quantize(features: Var, config: VQConfig, codebooks: list[Codebook],
                 want_stage_inputs: bool = False):
    """Quantize a differentiable feature stream. The forward value is the
    dequantized reconstruction; the backward pass hands the incoming gradient
    to the pre-quantization features unchanged."""
    out = quantize(features.value, config, codebooks, want_stage_inputs=want_stage_inputs)
    grid, dequantized = out[0], out[1]
    node = straight_through(features, dequantized)
    if want_stage_inputs:
        return node, grid, out[2]
    return node, grid


def commitment_loss(pre_quant: Var, dequantized: np.ndarray, beta: float) -> Var:
    """beta * sum of squared quantization error, averaged over tokens.

    The quantized side enters as a constant, so the gradient flows only into
    the pre-quantization features: d/dZ = 2*beta*(Z - q)/num_tokens.
    """
    if pre_quant.shape != np.shape(dequantized):
        raise CodebookError(
            f"commitment shapes disagree: {pre_quant.shape} vs {np.shape(dequantized)}")
    channels = pre_quant.shape[-1]
    # mean over elements * C == sum over channels, mean over tokens
    return mul_scalar(mse(pre_quant, np.asarray(dequantized)), beta * channels)


# ---------------------------------------------------------------------------
# codebook fitting
# ---------------------------------------------------------------------------

def _plusplus_seed(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each next center drawn with probability proportional
    to the squared distance from the nearest already-chosen center."""
    m = samples.shape[0]
    centers = np.empty((k, samples.shape[1]), dtype=np.float64)
    first = int(rng.integers(m))
    centers[0] = samples[first]
    d2 = np.sum((samples - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(m))
        else:
            pick = int(rng.choice(m, p=d2 / total))
        centers[i] = samples[pick]
        d2 = np.minimum(d2, np.sum((samples - centers[i]) ** 2, axis=1))
    return centers


def kmeans_fit(samples: np.ndarray, k: int, seed: int, iters: int = 25,
               distortions: list | None = None) -> Codebook:
    """Fit a codebook with k-means++ seeding and Lloyd iterations.

    Deterministic given (samples, k, seed, iters). Clusters that end an
    iteration empty are reseeded to the sample farthest from its assigned
    centroid. Pass a list as `distortions` to log the mean squared distance
    after each assignment step.
    """
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 2:
        raise CodebookError(f"samples must be [M, D], got {samples.shape}")
    m = samples.shape[0]
    if m < k:
        raise CodebookError(f"need at least K={k} samples, got {m}")
    rng = np.random.default_rng(seed)
    centers = _plusplus_seed(samples.astype(np.float64), k, rng)
    x64 = samples.astype(np.float64)
    x_norms = np.sum(samples * samples, axis=1)[:, None]
    for _ in range(iters):
        # assignment on the float32 fast-distance path (same as production
        # nearest-centroid search); means accumulate in float64
        c32 = centers.astype(np.float32)
        d = np.sum(c32 * c32, axis=1)[None, :] - 2.0 * (samples @ c32.T) + x_norms
        assign = np.argmin(d, axis=1)
        if distortions is not None:
            residual = x64 - centers[assign]
            distortions.append(float(np.mean(np.sum(residual * residual, axis=1))))
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x64)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            dist_to_own = np.sum((x64 - centers[assign]) ** 2, axis=1)
            farthest = np.argsort(dist_to_own)[::-1]
            for j, entry in enumerate(empty):
                centers[entry] = x64[farthest[j % m]]
    cb = Codebook(centers.astype(np.float32))
    return cb


def ema_update(codebook: Codebook, samples: np.ndarray, indices: np.ndarray,
               gamma: float = 0.99, laplace_eps: float = 1e-5) -> Codebook:
    """Exponential-moving-average codebook refresh from one batch.

    size_i <- g*size_i + (1-g)*count_i; sum_i <- g*sum_i + (1-g)*sum of
    assigned vectors; centroid_i <- sum_i / size_i with Laplace smoothing over
    the sizes. Mutates the codebook in place and refreshes its hash.
    """
    if not 0.0 < gamma < 1.0:
        raise CodebookError(f"gamma must lie in (0, 1), got {gamma}")
    samples = np.asarray(samples, dtype=np.float32)
    indices = np.asarray(indices)
    k = codebook.num_entries
    counts = np.bincount(indices, minlength=k).astype(np.float64)
    sums = np.zeros((k, codebook.dim), dtype=np.float64)
    np.add.at(sums, indices, samples.astype(np.float64))
    codebook.ema_size = gamma * codebook.ema_size + (1.0 - gamma) * counts
    codebook.ema_sum = gamma * codebook.ema_sum + (1.0 - gamma) * sums
    total = codebook.ema_size.sum()
    smoothed = (codebook.ema_size + laplace_eps) / (total + k * laplace_eps) * total
    codebook.centroids = (codebook.ema_sum / smoothed[:, None]).astype(np.float32)
    codebook.refresh_hash()
    return codebook


@dataclass
class CodebookTrainer:
    """Online EMA training with dead-entry revival.

    Entries that stay unassigned for `dead_after` consecutive updates are
    reseeded to a random vector from the current batch (seeded generator) and
    their statistics reset to unit mass.
    """

    codebook: Codebook
    gamma: float = 0.99
    laplace_eps: float = 1e-5
    dead_after: int = 100
    seed: int = 0
    _streak: np.ndarray = field(default=None, repr=False)
    _rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        self._streak = np.zeros(self.codebook.num_entries, dtype=np.int64)
        self._rng = np.random.default_rng(self.seed)

    def update(self, samples: np.ndarray, indices: np.ndarray) -> None:
        ema_update(self.codebook, samples, indices, self.gamma, self.laplace_eps)
        counts = np.bincount(np.asarray(indices), minlength=self.codebook.num_entries)
        self._streak[counts > 0] = 0
        self._streak[counts == 0] += 1
        dead = np.flatnonzero(self._streak >= self.dead_after)
        if dead.size:
            samples = np.asarray(samples, dtype=np.float32)
            for entry in dead:
                pick = int(self._rng.integers(samples.shape[0]))
                self.codebook.centroids[entry] = samples[pick]
                self.codebook.ema_size[entry] = 1.0
                self.codebook.ema_sum[entry] = samples[pick].astype(np.float64)
                self._streak[entry] = 0
            self.codebook.refresh_hash()


def fit_residual_grouped(samples: np.ndarray, config: VQConfig, seed: int,
                         iters: int = 25) -> list[Codebook]:
    """Fit the full stage-major codebook list for a residual/grouped config.

    Stage 0 of each group is fit on the group's channel slice; each later
    stage is fit on the residual left by the stages before it.
    """
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 2 or samples.shape[1] != config.feature_dim:
        raise CodebookError(f"samples {samples.shape} do not match C={config.feature_dim}")
    n, g, d = config.num_codebooks, config.num_groups, config.group_dim
    codebooks: list[Codebook] = [None] * (n * g)
    for q in range(g):
        residual = samples[:, q * d:(q + 1) * d].astype(np.float32).copy()
        for s in range(n):
            cb = kmeans_fit(residual, config.entries, seed=seed + 977 * (s * g + q), iters=iters)
            codebooks[s * g + q] = cb
            residual -= cb.centroids[nearest_indices(residual, cb)]
    return codebooks
