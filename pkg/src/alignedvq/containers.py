"""Binary file containers.

Codebook file ("AVQCB01"): the magic, then one record per codebook:
u32 K, u32 D, u32 m (all little-endian), K*D little-endian float32 centroids,
u64 content hash. Records run to end of file.

Checkpoint/shard container ("AVQCKPT1"): the magic, then named sections:
u16 name length, UTF-8 name, u64 payload byte length, little-endian float32
payload. Model checkpoints, dataset shards, and the aligned-VQ adaptor state
all use this container; section names identify the content. Codebooks are not
embedded — a checkpoint records their content hashes (as four u16 limbs per
hash, exactly representable in float32) and the matching codebook file is
loaded alongside.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Var, as_array
from .data import DataConfig, SyntheticDataset
from .dlp import AlignedVQModule, DLPParams
from .encoder import (
    LowRankAdapter, ModelConfig, PartitionSpec, TAP_LOCATIONS, VARIANTS, VisionEncoder,
)
from .vq import Codebook, VQConfig

CODEBOOK_MAGIC = b"AVQCB01"
SECTION_MAGIC = b"AVQCKPT1"


class ContainerError(ValueError):
    """Corrupt or inconsistent container file."""


# ---------------------------------------------------------------------------
# codebook container
# ---------------------------------------------------------------------------

def save_codebooks(path, codebooks: list[Codebook]) -> None:
    blob = bytearray(CODEBOOK_MAGIC)
    for cb in codebooks:
        blob += struct.pack("<III", cb.num_entries, cb.dim, cb.index_bits)
        blob += np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes()
        blob += struct.pack("<Q", cb.content_hash)
    Path(path).write_bytes(bytes(blob))


def load_codebooks(path) -> list[Codebook]:
    data = Path(path).read_bytes()
    if not data.startswith(CODEBOOK_MAGIC):
        raise ContainerError(f"{path}: bad codebook magic")
    offset = len(CODEBOOK_MAGIC)
    codebooks = []
    while offset < len(data):
        if offset + 12 > len(data):
            raise ContainerError(f"{path}: truncated codebook record header")
        k, d, m = struct.unpack_from("<III", data, offset)
        offset += 12
        if (1 << m) != k:
            raise ContainerError(f"{path}: m={m} does not address K={k} entries")
        body = k * d * 4
        if offset + body + 8 > len(data):
            raise ContainerError(f"{path}: truncated codebook record body")
        centroids = np.frombuffer(data, dtype="<f4", count=k * d, offset=offset).reshape(k, d)
        offset += body
        stored_hash, = struct.unpack_from("<Q", data, offset)
        offset += 8
        cb = Codebook(as_array(centroids))
        if cb.content_hash != stored_hash:
            raise ContainerError(f"{path}: codebook hash mismatch (corrupt centroids)")
        codebooks.append(cb)
    return codebooks


# ---------------------------------------------------------------------------
# named-section container
# ---------------------------------------------------------------------------

def write_sections(path, sections: dict[str, np.ndarray]) -> None:
    blob = bytearray(SECTION_MAGIC)
    for name, arr in sections.items():
        encoded = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<Q", len(payload)) + payload
    Path(path).write_bytes(bytes(blob))


def read_sections(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(SECTION_MAGIC):
        raise ContainerError(f"{path}: bad container magic")
    offset = len(SECTION_MAGIC)
    sections: dict[str, np.ndarray] = {}
    while offset < len(data):
        if offset + 2 > len(data):
            raise ContainerError(f"{path}: truncated section name length")
        name_len, = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        if offset + 8 > len(data):
            raise ContainerError(f"{path}: truncated section payload length")
        payload_len, = struct.unpack_from("<Q", data, offset)
        offset += 8
        if payload_len % 4 != 0 or offset + payload_len > len(data):
            raise ContainerError(f"{path}: bad payload length for section {name!r}")
        sections[name] = np.frombuffer(data, dtype="<f4", count=payload_len // 4,
                                       offset=offset).copy()
        offset += payload_len
    return sections


def _hash_to_limbs(h: int) -> list[float]:
    return [float((h >> shift) & 0xFFFF) for shift in (0, 16, 32, 48)]


def _limbs_to_hash(limbs: np.ndarray) -> int:
    return sum(int(round(float(v))) << shift for v, shift in zip(limbs, (0, 16, 32, 48)))


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------

_LOCATION_CODES = {loc: i for i, loc in enumerate(TAP_LOCATIONS)}


@dataclass
class CheckpointBundle:
    model: VisionEncoder
    partition: PartitionSpec | None = None
    vq_module: AlignedVQModule | None = None     # codebooks not attached
    codebook_hashes: list[int] | None = None

    def attach_codebooks(self, codebooks: list[Codebook]) -> None:
        got = [cb.content_hash for cb in codebooks]
        if got != self.codebook_hashes:
            raise ContainerError("codebook hashes do not match the checkpoint")
        self.vq_module.codebooks = codebooks


def save_checkpoint(path, model: VisionEncoder, partition: PartitionSpec | None = None,
                    vq_module: AlignedVQModule | None = None) -> None:
    cfg = model.cfg
    sections: dict[str, np.ndarray] = {
        "config": np.array([cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim,
                            cfg.depth, cfg.heads, cfg.num_classes,
                            VARIANTS.index(cfg.variant), cfg.seed], dtype=np.float32),
    }
    for name, var in model.named_params().items():
        sections[name] = var.value.ravel()
    if model.adapter is not None:
        sections["adapter.meta"] = np.array([model.adapter.rank, model.adapter.alpha],
                                            dtype=np.float32)
    if (partition is None) != (vq_module is None):
        raise ContainerError("partition and VQ module must be stored together")
    if vq_module is not None:
        vcfg = vq_module.vq_config
        sections["vq.meta"] = np.array(
            [partition.block_index, _LOCATION_CODES[partition.location],
             vcfg.num_codebooks, vcfg.num_groups, vcfg.entries], dtype=np.float32)
        for name, var in vq_module.dlp.named().items():
            sections[name] = var.value.ravel()
        limbs = []
        for h in vq_module.codebook_hashes():
            limbs.extend(_hash_to_limbs(h))
        sections["vq.hashes"] = np.array(limbs, dtype=np.float32)
    write_sections(path, sections)


def _take(sections, name, shape) -> Var:
    if name not in sections:
        raise ContainerError(f"missing checkpoint section {name!r}")
    arr = sections.pop(name)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise ContainerError(f"section {name!r} has {arr.size} values, expected {expected}")
    # reshape after validation: ascontiguousarray would promote 0-d to 1-d
    return Var(as_array(arr).reshape(shape))


def load_checkpoint(path) -> CheckpointBundle:
    sections = read_sections(path)
    if "config" not in sections:
        raise ContainerError(f"{path}: not a model checkpoint (no config section)")
    raw = sections.pop("config")
    if raw.size != 9:
        raise ContainerError(f"{path}: malformed config section")
    ints = [int(round(float(v))) for v in raw]
    cfg = ModelConfig(image_size=ints[0], patch_size=ints[1], channels=ints[2],
                      embed_dim=ints[3], depth=ints[4], heads=ints[5],
                      num_classes=ints[6], variant=VARIANTS[ints[7]], seed=ints[8])
    model = VisionEncoder(cfg)
    c = cfg.embed_dim
    model.patch_proj = _take(sections, "patch.proj", (cfg.patch_dim, c))
    model.patch_bias = _take(sections, "patch.bias", (c,))
    model.pos_embed = _take(sections, "patch.pos", (cfg.num_tokens, c))
    model.cls_token = _take(sections, "patch.cls", (1, c))
    shapes = {"ln1_gain": (c,), "ln1_bias": (c,), "wq": (c, c), "wk": (c, c),
              "wv": (c, c), "wo": (c, c), "ln2_gain": (c,), "ln2_bias": (c,),
              "w1": (c, 4 * c), "b1": (4 * c,), "w2": (4 * c, c), "b2": (c,)}
    for i, bp in enumerate(model.blocks):
        for field_name, shape in shapes.items():
            setattr(bp, field_name, _take(sections, f"block.{i}.{field_name}", shape))
    model.head_w = _take(sections, "head.w", (c, cfg.num_classes))
    if "adapter.meta" in sections:
        meta = sections.pop("adapter.meta")
        rank, alpha = int(round(float(meta[0]))), float(meta[1])
        model.adapter = LowRankAdapter(
            _take(sections, "adapter.a", (c, rank)),
            _take(sections, "adapter.b", (rank, cfg.num_classes)),
            rank, alpha)
    bundle = CheckpointBundle(model)
    if "vq.meta" in sections:
        meta = [int(round(float(v))) for v in sections.pop("vq.meta")]
        bundle.partition = PartitionSpec(meta[0], TAP_LOCATIONS[meta[1]])
        vcfg = VQConfig(meta[2], meta[3], meta[4], c)
        dlp = DLPParams(
            _take(sections, "dlp.w_in", (c, c)),
            _take(sections, "dlp.b_in", (c,)),
            _take(sections, "dlp.gamma_in", ()),
            _take(sections, "dlp.w_out", (c, c)),
            _take(sections, "dlp.b_out", (c,)),
            _take(sections, "dlp.gamma_out", ()),
        )
        bundle.vq_module = AlignedVQModule(dlp, vcfg, [])
        limbs = sections.pop("vq.hashes")
        if limbs.size != 4 * vcfg.total_codebooks:
            raise ContainerError(f"{path}: malformed vq.hashes section")
        bundle.codebook_hashes = [
            _limbs_to_hash(limbs[4 * i:4 * i + 4]) for i in range(vcfg.total_codebooks)]
    return bundle


# ---------------------------------------------------------------------------
# dataset shards
# ---------------------------------------------------------------------------

def save_dataset(path, dataset: SyntheticDataset) -> None:
    cfg = dataset.config
    write_sections(path, {
        "data.meta": np.array([cfg.num_classes, cfg.samples_per_class, cfg.image_size,
                               cfg.channels, cfg.noise_sigma, cfg.seed], dtype=np.float32),
        "data.images": dataset.images.ravel(),
        "data.labels": dataset.labels.astype(np.float32),
        "data.train_idx": dataset.train_idx.astype(np.float32),
        "data.val_idx": dataset.val_idx.astype(np.float32),
    })


def load_dataset(path) -> SyntheticDataset:
    sections = read_sections(path)
    if "data.meta" not in sections:
        raise ContainerError(f"{path}: not a dataset shard (no data.meta section)")
    meta = sections["data.meta"]
    cfg = DataConfig(num_classes=int(meta[0]), samples_per_class=int(meta[1]),
                     image_size=int(meta[2]), channels=int(meta[3]),
                     noise_sigma=float(meta[4]), seed=int(round(float(meta[5]))))
    total = cfg.num_classes * cfg.samples_per_class
    images = as_array(sections["data.images"].reshape(
        total, cfg.image_size, cfg.image_size, cfg.channels))
    labels = sections["data.labels"].astype(np.int64)
    return SyntheticDataset(cfg, images, labels,
                            sections["data.train_idx"].astype(np.int64),
                            sections["data.val_idx"].astype(np.int64))
