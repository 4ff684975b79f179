"""Aligned vector quantization for split edge-cloud transformer inference.

The package trains a toy vision-transformer classifier, inserts a vector
quantizer behind a gated dual linear projection at any of the four tap
locations of a transformer block, fine-tunes the adaptor pieces, and runs the
resulting model split across an edge process and a cloud process that exchange
nothing but bit-packed codebook indices.
"""

from .data import DataConfig, SyntheticDataset, generate
from .dlp import AlignedVQModule, DLPParams, alignedvq_forward, dlp_in, dlp_out
from .encoder import (BlockParams, LowRankAdapter, ModelConfig, PartitionSpec,
                      VisionEncoder, cv_stats)
from .train import TrainConfig, TrainReport, evaluate, finetune_alignedvq, train_baseline
from .vq import (Codebook, VQConfig, commitment_loss, ema_update, kmeans_fit,
                 nearest_index, quantize, ste_quantize)
from .wire import (SizeModel, compression_rate, decode_payload, encode_payload,
                   payload_size, raw_feature_kb, raw_image_kb)

__version__ = "0.1.0"

__all__ = [
    "AlignedVQModule", "BlockParams", "Codebook", "DataConfig", "DLPParams",
    "LowRankAdapter", "ModelConfig", "PartitionSpec", "SizeModel",
    "SyntheticDataset", "TrainConfig", "TrainReport", "VQConfig",
    "VisionEncoder", "alignedvq_forward", "commitment_loss", "compression_rate",
    "cv_stats", "decode_payload", "dlp_in", "dlp_out", "ema_update", "encode_payload",
    "evaluate", "finetune_alignedvq", "generate", "kmeans_fit", "nearest_index",
    "payload_size", "quantize", "raw_feature_kb", "raw_image_kb", "ste_quantize",
    "train_baseline",
]
