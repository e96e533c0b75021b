"""MAC counting for forward passes: instrumented vs closed-form counts.

Counts cover matmul multiply-accumulates only (elementwise work and the
numpy-side QR preprocessing of the baseline variant are excluded); that is
the quantity whose growth trend is of interest. The instrumented numbers
come from the tensor engine's matmul hook, the symbolic ones from the
closed-form expressions below, and the two must agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .channel import Constellation, make_rng, sample_instance
from .network import SgtConfig, SgtModel, forward
from .tokens import tokenize

__all__ = ["OpCount", "count_forward", "symbolic_counts", "fit_loglog_slope",
           "ATTENTION_SCALING_SCOPES"]

# Buckets whose growth carries the quadratic-in-N claim.
ATTENTION_SCALING_SCOPES = ("attn_scores", "attn_mix")


@dataclass
class OpCount:
    n_t: int
    n_r: int
    d_model: int
    n_layers: int
    variant: str
    by_scope: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def attention_score_macs(self) -> int:
        return sum(self.by_scope.get(s, 0) for s in ATTENTION_SCALING_SCOPES)


def count_forward(config: SgtConfig, seed: int = 0) -> OpCount:
    """Exact per-instance MAC counts of one forward pass, by sublayer bucket."""
    model = SgtModel.init(config, seed=seed)
    const = Constellation.from_name("qpsk" if config.bits_per_axis == 1 else
                                    f"{4 ** config.bits_per_axis}qam")
    inst = sample_instance(config.n_t, config.n_r, 10.0, const, make_rng(seed, 0xC0))
    tokens = tokenize(inst)
    with T.mac_counter() as counter:
        forward(tokens, model)
    return OpCount(
        n_t=config.n_t,
        n_r=config.n_r,
        d_model=config.d_model,
        n_layers=config.n_layers,
        variant=config.variant,
        by_scope=dict(counter.by_scope),
    )


def symbolic_counts(config: SgtConfig) -> dict[str, int]:
    """Closed-form MAC counts mirroring count_forward exactly."""
    d = config.d_model
    h = config.ffn_hidden
    nb = config.bits_per_axis
    w = config.lin_width
    s_sym = 2 * config.n_t
    s_lin = 2 * config.n_r
    L = config.n_layers

    def attn(s_q: int, s_kv: int) -> dict[str, int]:
        return {
            "attn_proj": (2 * s_q + 2 * s_kv) * d * d,
            "attn_scores": s_q * s_kv * d,
            "attn_mix": s_q * s_kv * d,
        }

    def acc(dst: dict[str, int], src: dict[str, int], times: int = 1) -> None:
        for k, v in src.items():
            dst[k] = dst.get(k, 0) + v * times

    counts: dict[str, int] = {}
    if config.variant == "full-sgt":
        counts["embed"] = s_sym * (nb * d + d * d) + s_lin * (w * d + d * d)
        acc(counts, attn(s_sym, s_sym), L)
        acc(counts, attn(s_lin, s_lin), L)
        acc(counts, attn(s_sym, s_lin), L)
        if config.bidirectional_cross:
            acc(counts, attn(s_lin, s_sym), L)
        counts["ffn"] = L * (2 * s_sym * d * h + 2 * s_lin * d * h)
        head_rows = s_sym
    else:
        s = s_sym if config.variant == "qr-baseline" else s_lin
        counts["embed"] = s * (w * d + d * d)
        acc(counts, attn(s, s), L)
        counts["ffn"] = L * 2 * s * d * h
        head_rows = s_sym
        if config.variant == "no-cross-attention":
            counts["compress"] = d * s_lin * s_sym
    counts["head"] = head_rows * (d * h + h * nb)
    return counts


def fit_loglog_slope(sizes: list[int], macs: list[int]) -> float:
    """Least-squares slope of log(macs) against log(size)."""
    return float(np.polyfit(np.log(sizes), np.log(macs), 1)[0])
