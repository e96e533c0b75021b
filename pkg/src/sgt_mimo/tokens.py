"""Graph-aware tokenization: constraint tokens and symbol prior tokens.

Each receive row j becomes one linear-constraint token (y_j, h_j, sigma_j^2);
each real transmit dimension becomes one symbol token holding soft bit
beliefs. Soft values live in the probability domain inside tokens and cross
the module boundary as LLRs.

Conventions fixed here once: a soft bit value is the probability that the
bit equals 0, and LLR = log P(bit=0)/P(bit=1), so positive LLR favours bit 0
and p = sigmoid(LLR). LLRs are clamped to +-LLR_MAX.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import MimoInstance

__all__ = [
    "LLR_MAX",
    "TokenSet",
    "tokenize",
    "tokenize_batch",
    "llr_to_prob",
    "prob_to_llr",
    "uninformative_priors",
]

LLR_MAX = 30.0


@dataclass
class TokenSet:
    """Dense token features for the two subgraphs.

    lin: [2N_r, 2N_t + 2] rows (y_j, h_j, sigma_j^2); sym: [2N_t, N_bits/2]
    soft bit priors in [0, 1]. Both may carry one extra leading batch axis.
    """

    lin: np.ndarray
    sym: np.ndarray

    @property
    def batched(self) -> bool:
        return self.lin.ndim == 3


def uninformative_priors(n_t: int, bits_per_axis: int) -> np.ndarray:
    return np.full((2 * n_t, bits_per_axis), 0.5)


def _check_priors(priors: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != shape:
        raise ValueError(f"priors must have shape {shape}, got {priors.shape}")
    if priors.min() < 0.0 or priors.max() > 1.0:
        raise ValueError("priors must lie in [0, 1]")
    return priors


def tokenize(inst: MimoInstance, priors: np.ndarray | None = None) -> TokenSet:
    """Build both token families for one instance.

    Without priors the symbol tokens carry the uninformative prior 0.5.
    """
    lin = np.concatenate(
        [inst.y[:, None], inst.H, inst.sigma2[:, None]], axis=1
    )
    nb = inst.constellation.bits_per_axis
    if priors is None:
        sym = uninformative_priors(inst.n_t, nb)
    else:
        sym = _check_priors(priors, (2 * inst.n_t, nb))
    return TokenSet(lin=lin, sym=sym)


def tokenize_batch(
    instances: list[MimoInstance], priors: np.ndarray | None = None
) -> TokenSet:
    """Stack tokens of same-sized instances along a leading batch axis.

    priors, when given, is [B, 2N_t, N_bits/2].
    """
    lin = np.stack(
        [
            np.concatenate([i.y[:, None], i.H, i.sigma2[:, None]], axis=1)
            for i in instances
        ]
    )
    nb = instances[0].constellation.bits_per_axis
    n_t = instances[0].n_t
    if priors is None:
        sym = np.full((len(instances), 2 * n_t, nb), 0.5)
    else:
        priors = np.asarray(priors, dtype=np.float64)
        if priors.shape != (len(instances), 2 * n_t, nb):
            raise ValueError(
                f"batched priors must have shape {(len(instances), 2 * n_t, nb)}, "
                f"got {priors.shape}"
            )
        if priors.min() < 0.0 or priors.max() > 1.0:
            raise ValueError("priors must lie in [0, 1]")
        sym = priors
    return TokenSet(lin=lin, sym=sym)


def llr_to_prob(llr: np.ndarray) -> np.ndarray:
    """P(bit = 0) from LLR = log P(0)/P(1), clamped to +-LLR_MAX."""
    z = np.clip(np.asarray(llr, dtype=np.float64), -LLR_MAX, LLR_MAX)
    return 1.0 / (1.0 + np.exp(-z))


def prob_to_llr(p: np.ndarray) -> np.ndarray:
    """Inverse of llr_to_prob inside the clamp range."""
    p = np.asarray(p, dtype=np.float64)
    eps = np.exp(-LLR_MAX) / (1.0 + np.exp(-LLR_MAX))
    p = np.clip(p, eps, 1.0 - eps)
    return np.clip(np.log(p) - np.log1p(-p), -LLR_MAX, LLR_MAX)
