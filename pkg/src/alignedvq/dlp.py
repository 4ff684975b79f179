"""Dual linear projection around the straight-through quantizer.

A gated linear adaptor runs on each side of the quantizer:

    z_q   = Q(z + tanh(g_in)  * (z  W_in  + b_in))
    z_out = z_q +  tanh(g_out) * (z_q W_out + b_out)

Both gates start at zero, so a freshly initialized module is exactly the
plain quantizer; training opens the gates to reshape features into a more
quantization-friendly form on the way in and restore the statistics the
downstream layers expect on the way out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .vq import Codebook, VQConfig, commitment_loss, ste_quantize


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


@dataclass
class DLPParams:
    """Weights of the two gated projections. Gates are scalar parameters
    initialized to zero so the module starts as the identity."""

    w_in: Var
    b_in: Var
    gamma_in: Var
    w_out: Var
    b_out: Var
    gamma_out: Var

    @classmethod
    def initialize(cls, channels: int, seed: int) -> "DLPParams":
        rng = np.random.default_rng(seed)
        return cls(
            w_in=Var(xavier_uniform(rng, channels, channels)),
            b_in=Var(np.zeros(channels, dtype=np.float32)),
            gamma_in=Var(np.zeros((), dtype=np.float32)),
            w_out=Var(xavier_uniform(rng, channels, channels)),
            b_out=Var(np.zeros(channels, dtype=np.float32)),
            gamma_out=Var(np.zeros((), dtype=np.float32)),
        )

    @property
    def channels(self) -> int:
        return self.w_in.value.shape[0]

    def named(self) -> dict[str, Var]:
        return {"dlp.w_in": self.w_in, "dlp.b_in": self.b_in, "dlp.gamma_in": self.gamma_in,
                "dlp.w_out": self.w_out, "dlp.b_out": self.b_out, "dlp.gamma_out": self.gamma_out}


def _gated_projection(z: Var, w: Var, b: Var, gamma: Var) -> Var:
    proj = ad.add_bias(ad.matmul(z, w), b)
    return ad.add(z, ad.scale(ad.tanh(gamma), proj))


def dlp_in(z: Var, p: DLPParams) -> Var:
    """z + tanh(gamma_in) * (z W_in + b_in)."""
    return _gated_projection(z, p.w_in, p.b_in, p.gamma_in)


def dlp_out(zq: Var, p: DLPParams) -> Var:
    """zq + tanh(gamma_out) * (zq W_out + b_out)."""
    return _gated_projection(zq, p.w_out, p.b_out, p.gamma_out)


@dataclass
class AlignedVQModule:
    """The composite adaptor: input projection, quantizer, output projection."""

    dlp: DLPParams
    vq_config: VQConfig
    codebooks: list[Codebook] = field(default_factory=list)

    def __post_init__(self):
        if self.dlp.channels != self.vq_config.feature_dim:
            raise ValueError(
                f"projection width {self.dlp.channels} != quantizer channels "
                f"{self.vq_config.feature_dim}")

    @classmethod
    def initialize(cls, vq_config: VQConfig, seed: int,
                   codebooks: list[Codebook] | None = None) -> "AlignedVQModule":
        return cls(DLPParams.initialize(vq_config.feature_dim, seed), vq_config,
                   codebooks if codebooks is not None else [])

    def codebook_hashes(self) -> list[int]:
        return [cb.content_hash for cb in self.codebooks]


def alignedvq_forward(z: Var, module: AlignedVQModule, want_stage_inputs: bool = False):
    """Run the full adaptor pipeline.

    Returns (recovered features, transmitted index grid, commitment term) and,
    when asked, the per-stage residual inputs for codebook updates. The
    commitment term is the unscaled squared quantization error (mean over
    tokens), measured on the projected features actually quantized.
    """
    zin = dlp_in(z, module.dlp)
    out = ste_quantize(zin, module.vq_config, module.codebooks,
                       want_stage_inputs=want_stage_inputs)
    quantized, grid = out[0], out[1]
    commit = commitment_loss(zin, quantized.value, beta=1.0)
    recovered = dlp_out(quantized, module.dlp)
    if want_stage_inputs:
        return recovered, grid, commit, out[2]
    return recovered, grid, commit
