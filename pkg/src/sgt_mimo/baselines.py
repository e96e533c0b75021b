"""Reference detectors: exhaustive ML, LMMSE, and classical OAMP.

All three run on the real-lifted model. ML is the correctness anchor
(optimal, exponential); LMMSE the cheap linear baseline; OAMP the iterative
message-passing baseline built from a de-correlated LMMSE-style linear
estimator followed by a divergence-free posterior-mean denoiser.

LMMSE estimator, with Sigma the per-row noise covariance and E_s the
per-real-dimension prior symbol variance (0.5 for unit-energy complex
symbols):

    x_hat = (H^T Sigma^-1 H + E_s^-1 I)^-1 H^T Sigma^-1 y

Per-dimension soft outputs use the standard Gaussian post-equalisation
model: with G = I - C_e / E_s (C_e the posterior covariance), the unbiased
estimate z_i = x_hat_i / g_ii behaves as x_i plus noise of variance
E_s (1 - g_ii) / g_ii.

OAMP update (iteration t, M = 2N_r rows, N = 2N_t columns):

    v_t^2   = max((|y - H s_t|^2 - M sigma^2) / tr(H^T H), eps)
    W_t     = v_t^2 H^T (v_t^2 H H^T + sigma^2 I)^-1
    What_t  = N / tr(W_t H) * W_t          (de-correlated linear stage)
    r_t     = s_t + What_t (y - H s_t)
    tau_t^2 = (v_t^2 tr(B B^T) + sigma^2 tr(What What^T)) / N,  B = I - What H
    s_{t+1} = (E[x | r_t] - alpha r_t) / (1 - alpha),  alpha = avg posterior
              variance / tau_t^2           (divergence-free denoiser)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import Constellation, MimoInstance, hard_demap
from .tokens import LLR_MAX

__all__ = [
    "DetectorOutput",
    "SearchSpaceError",
    "ml_detect",
    "lmmse_detect",
    "oamp_detect",
    "enumerate_candidates",
    "bits_for_levels",
]

ML_CANDIDATE_GUARD = 2**24


class SearchSpaceError(ValueError):
    """ML enumeration would exceed the candidate guard."""


@dataclass
class DetectorOutput:
    hard_bits: np.ndarray                 # [2N_t, N_bits/2] in {0,1}
    llrs: np.ndarray | None = None        # same shape, clamped to +-LLR_MAX
    info: dict = field(default_factory=dict)


def enumerate_candidates(constellation: Constellation, n_dims: int) -> np.ndarray:
    """All level combinations as [L^n_dims, n_dims], lexicographic by level index.

    Dimension 0 is the most significant digit, so candidate index 0 is the
    all-(index-0) vector and ordering is deterministic.
    """
    levels = constellation.levels_desc
    n_levels = len(levels)
    count = n_levels**n_dims
    if count > ML_CANDIDATE_GUARD:
        raise SearchSpaceError(
            f"{count} candidates exceed the enumeration guard {ML_CANDIDATE_GUARD}"
        )
    idx = np.arange(count)
    digits = np.empty((count, n_dims), dtype=np.int64)
    for d in range(n_dims):
        digits[:, d] = (idx // n_levels ** (n_dims - 1 - d)) % n_levels
    return levels[digits]


def bits_for_levels(constellation: Constellation) -> np.ndarray:
    """Bit pattern [L, bits_per_axis] for each position in levels_desc."""
    return hard_demap(constellation.levels_desc, constellation)


def _weighted_costs(inst: MimoInstance, candidates: np.ndarray) -> np.ndarray:
    resid = inst.y[None, :] - candidates @ inst.H.T
    return (resid**2 / inst.sigma2[None, :]).sum(axis=1)


def ml_detect(inst: MimoInstance, soft_output: bool = False) -> DetectorOutput:
    """Exhaustive maximum-likelihood search over all constellation vectors.

    Minimises the noise-weighted residual sum_j (y_j - h_j x)^2 / sigma_j^2;
    ties break toward the lowest candidate index. Optional soft output are
    max-log LLRs from the same enumeration, serving as a gold soft reference.
    """
    cands = enumerate_candidates(inst.constellation, 2 * inst.n_t)
    costs = _weighted_costs(inst, cands)
    best = int(np.argmin(costs))
    hard = hard_demap(cands[best], inst.constellation)
    out = DetectorOutput(hard_bits=hard, info={"candidates": len(cands)})
    if soft_output:
        nb = inst.constellation.bits_per_axis
        n_levels = len(inst.constellation.levels_desc)
        bit_table = bits_for_levels(inst.constellation)
        n_dims = 2 * inst.n_t
        idx = np.arange(len(cands))
        llrs = np.empty((n_dims, nb))
        for d in range(n_dims):
            level_idx = (idx // n_levels ** (n_dims - 1 - d)) % n_levels
            for b in range(nb):
                is_one = bit_table[level_idx, b] == 1
                c1 = costs[is_one].min()
                c0 = costs[~is_one].min()
                llrs[d, b] = (c1 - c0) / 2.0
        out.llrs = np.clip(llrs, -LLR_MAX, LLR_MAX)
    return out


def _scalar_gaussian_llrs(
    z: np.ndarray, noise_var: np.ndarray, constellation: Constellation
) -> np.ndarray:
    """Exact per-bit LLRs for z_i = x_i + N(0, noise_var_i), x_i on the levels."""
    levels = constellation.levels_desc
    bit_table = bits_for_levels(constellation)
    # [n_dims, L] log-likelihood per level, stabilised per dimension
    logp = -((z[:, None] - levels[None, :]) ** 2) / (2.0 * noise_var[:, None])
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    nb = constellation.bits_per_axis
    llrs = np.empty((len(z), nb))
    for b in range(nb):
        mask0 = bit_table[:, b] == 0
        p0 = p[:, mask0].sum(axis=1)
        p1 = p[:, ~mask0].sum(axis=1)
        with np.errstate(divide="ignore"):
            llrs[:, b] = np.log(p0) - np.log(p1)
    return np.clip(llrs, -LLR_MAX, LLR_MAX)


def lmmse_detect(inst: MimoInstance, soft_output: bool = True) -> DetectorOutput:
    """Regularised linear MMSE estimate with per-dimension Gaussian demap."""
    H, y = inst.H, inst.y
    es = inst.constellation.symbol_energy / 2.0  # prior variance per real dim
    ht_si = H.T / inst.sigma2[None, :]
    a = ht_si @ H + np.eye(H.shape[1]) / es
    c_e = np.linalg.inv(a)
    x_hat = c_e @ (ht_si @ y)
    out = DetectorOutput(
        hard_bits=hard_demap(x_hat, inst.constellation),
        info={"x_hat": x_hat},
    )
    if soft_output:
        g = 1.0 - np.diag(c_e) / es
        g = np.clip(g, 1e-12, 1.0 - 1e-12)
        z = x_hat / g
        eta = es * (1.0 - g) / g
        out.llrs = _scalar_gaussian_llrs(z, eta, inst.constellation)
    return out


def oamp_detect(
    inst: MimoInstance, iterations: int = 10, soft_output: bool = True
) -> DetectorOutput:
    """Classical OAMP with posterior-mean denoiser matched to the constellation.

    Error variance tau^2 is tracked per iteration; if it grows three times in
    a row the loop stops and the best iterate (smallest tau^2) is returned
    with ``diverged`` set in the metadata.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    H, y = inst.H, inst.y
    m, n = H.shape
    sigma2 = float(inst.sigma2.mean())
    levels = inst.constellation.levels_desc
    tr_hth = float((H * H).sum())
    hht = H @ H.T

    s = np.zeros(n)
    best: tuple[float, np.ndarray] | None = None
    tau2_hist: list[float] = []
    rises = 0
    diverged = False

    for _ in range(iterations):
        z = y - H @ s
        v2 = max((float(z @ z) - m * sigma2) / tr_hth, 1e-12)
        w = v2 * H.T @ np.linalg.inv(v2 * hht + sigma2 * np.eye(m))
        wh = w @ H
        w_hat = (n / np.trace(wh)) * w
        r = s + w_hat @ z
        b = np.eye(n) - w_hat @ H
        tau2 = (v2 * float((b * b).sum()) + sigma2 * float((w_hat * w_hat).sum())) / n
        tau2 = max(tau2, 1e-12)

        if best is None or tau2 < best[0]:
            best = (tau2, r)
        if tau2_hist and tau2 > tau2_hist[-1]:
            rises += 1
            if rises >= 3:
                diverged = True
                tau2_hist.append(tau2)
                break
        else:
            rises = 0
        tau2_hist.append(tau2)

        # Posterior mean/variance under r = x + N(0, tau2), uniform level prior.
        logp = -((r[:, None] - levels[None, :]) ** 2) / (2.0 * tau2)
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        p /= p.sum(axis=1, keepdims=True)
        x_post = p @ levels
        var_post = (p * (levels[None, :] - x_post[:, None]) ** 2).sum(axis=1)
        alpha = min(float(var_post.mean()) / tau2, 1.0 - 1e-6)
        s = (x_post - alpha * r) / (1.0 - alpha)

    tau2_out, r_out = best if diverged else (tau2_hist[-1], r)
    llrs = _scalar_gaussian_llrs(r_out, np.full(n, tau2_out), inst.constellation)
    hard = (llrs[:, :] <= 0).astype(np.int64)
    return DetectorOutput(
        hard_bits=hard,
        llrs=llrs if soft_output else None,
        info={
            "iterations": len(tau2_hist),
            "tau2_history": tau2_hist,
            "diverged": diverged,
            "r": r_out,
        },
    )
