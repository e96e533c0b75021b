"""Training loop, BER evaluation harness, and detector adapters.

Training samples fresh channel instances every step (infinite-data regime),
optionally feeding a fraction of them synthetic soft priors so the model
learns to exploit its soft-input interface. The loss is mean bitwise binary
cross-entropy; soft bit values throughout the package are probabilities that
the bit equals 0, so targets are the complement of the raw bits.

BER evaluation draws instances from seed streams keyed by (seed, snr index,
chunk index) only, so every detector sees the same instances and reruns are
bit-reproducible regardless of worker count.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .baselines import lmmse_detect, ml_detect, oamp_detect
from .channel import Constellation, MimoInstance, make_rng, sample_batch
from .network import SgtModel, forward
from .tokens import tokenize_batch

__all__ = [
    "TrainConfig",
    "TrainLog",
    "BerRecord",
    "loss",
    "train",
    "evaluate_ber",
    "Adam",
    "genie_priors",
    "synthetic_priors",
    "Detector",
    "SgtDetector",
    "MlDetector",
    "LmmseDetector",
    "OampDetector",
    "RandomGuessDetector",
    "wilson_interval",
    "check_ordering",
    "WORKERS_ENV",
]

WORKERS_ENV = "SGT_WORKERS"


@dataclass
class TrainConfig:
    n_t: int
    n_r: int
    constellation: str = "qpsk"
    batch_size: int = 128
    steps: int = 20000
    lr: float = 1e-3
    lr_schedule: str = "cosine"  # "cosine" or "constant"
    snr_lo_db: float = 0.0
    snr_hi_db: float = 15.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # Soft-input curriculum: fraction of instances trained with synthetic
    # priors of random quality, so informative priors are in-distribution.
    prior_fraction: float = 0.25
    prior_llr_scale: float = 16.0
    val_every: int = 0
    val_snrs: tuple[float, ...] = ()
    val_trials: int = 2000
    snapshot_every: int = 1000

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.snr_hi_db <= self.snr_lo_db:
            raise ValueError("snr range must be non-degenerate (lo < hi)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    val_history: list[tuple[int, list["BerRecord"]]] = field(default_factory=list)
    wall_clock_s: float = 0.0
    aborted: bool = False


@dataclass
class BerRecord:
    detector: str
    snr_db: float
    ber: float
    errors: int
    bits: int
    ci_low: float
    ci_high: float
    trials: int
    capped: bool  # trial cap hit before reaching the error target


def loss(pred: T.Tensor, bits: np.ndarray) -> T.Tensor:
    """Mean bitwise BCE of soft bits (P(bit=0)) against ground-truth bits."""
    targets = 1.0 - np.asarray(bits, dtype=np.float64)
    return T.binary_cross_entropy(pred, targets)


class Adam:
    """Adaptive-moment optimizer; update order follows the parameter list."""

    def __init__(
        self,
        params: list[T.Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: dict[T.Tensor, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / corr1
            v_hat = self.v[i] / corr2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    # Cosine decay to 1% of the base rate over the full run.
    frac = step / max(cfg.steps - 1, 1)
    return cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def genie_priors(bits: np.ndarray, strength: float) -> np.ndarray:
    """Ground-truth-aligned prior LLRs: +strength on bit 0, -strength on bit 1."""
    return (1.0 - 2.0 * np.asarray(bits, dtype=np.float64)) * strength


def synthetic_priors(
    bits: np.ndarray, rng: np.random.Generator, llr_scale: float
) -> np.ndarray:
    """Noisy priors of random quality from the consistent Gaussian LLR model.

    Per instance a mean magnitude mu ~ U(0, llr_scale) is drawn; each bit gets
    LLR ~ N((1-2b) mu, 2 mu), which is the LLR distribution of a BPSK-like
    observation of matching quality.
    """
    bits = np.asarray(bits, dtype=np.float64)
    mu = rng.uniform(0.0, llr_scale)
    noise = rng.standard_normal(bits.shape) * math.sqrt(2.0 * mu)
    return (1.0 - 2.0 * bits) * mu + noise


def train(model: SgtModel, cfg: TrainConfig) -> TrainLog:
    """Run the fresh-sample training loop; deterministic given cfg.seed.

    On a non-finite loss the run aborts: parameters roll back to the last
    snapshot (taken every ``snapshot_every`` steps) and the log is marked.
    """
    # Single-threaded BLAS: faster at these matrix sizes and removes any
    # dependence on the ambient thread configuration.
    with threadpool_limits(limits=1):
        return _train_impl(model, cfg)


def _train_impl(model: SgtModel, cfg: TrainConfig) -> TrainLog:
    from .tokens import llr_to_prob

    const = Constellation.from_name(cfg.constellation)
    params = model.parameters()
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    data_rng = make_rng(cfg.seed, 1)
    prior_rng = make_rng(cfg.seed, 2)
    log = TrainLog()
    snapshot = [p.data.copy() for p in params]
    t0 = time.monotonic()

    for step in range(cfg.steps):
        instances = sample_batch(
            cfg.batch_size, cfg.n_t, cfg.n_r,
            (cfg.snr_lo_db, cfg.snr_hi_db), const, data_rng,
        )
        bits = np.stack([i.bits for i in instances]).astype(np.float64)
        priors = None
        if cfg.prior_fraction > 0.0:
            priors = np.full_like(bits, 0.5)
            for k in range(cfg.batch_size):
                if prior_rng.uniform() < cfg.prior_fraction:
                    priors[k] = llr_to_prob(
                        synthetic_priors(bits[k], prior_rng, cfg.prior_llr_scale)
                    )
        tokens = tokenize_batch(instances, priors)
        lr = _lr_at(cfg, step)
        try:
            with T.GradTape() as tape:
                out = forward(tokens, model)
                step_loss = loss(out, bits)
            grads = tape.gradients(step_loss, params)
        except T.NonFiniteError:
            for p, snap in zip(params, snapshot):
                p.data = snap.copy()
            log.aborted = True
            break
        opt.step(grads, lr)
        log.losses.append(float(step_loss.data))
        log.lrs.append(lr)

        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            snapshot = [p.data.copy() for p in params]
        if cfg.val_every and (step + 1) % cfg.val_every == 0 and cfg.val_snrs:
            records = evaluate_ber(
                SgtDetector(model),
                list(cfg.val_snrs),
                trials=cfg.val_trials,
                seed=cfg.seed + 0x5A17,
                n_t=cfg.n_t,
                n_r=cfg.n_r,
                constellation=const,
            )
            log.val_history.append((step + 1, records))

    log.wall_clock_s = time.monotonic() - t0
    return log


# ---------------------------------------------------------------------------
# Detector adapters

class Detector:
    """Interface: name + batched hard decisions (bits in {0,1})."""

    name = "detector"

    def detect_batch(self, instances: list[MimoInstance]) -> np.ndarray:
        raise NotImplementedError


class SgtDetector(Detector):
    def __init__(self, model: SgtModel, prior_fn=None, name: str = "sgt") -> None:
        self.model = model
        self.prior_fn = prior_fn  # optional: instances -> prior prob matrix
        self.name = name

    def detect_batch(self, instances: list[MimoInstance]) -> np.ndarray:
        priors = None if self.prior_fn is None else self.prior_fn(instances)
        tokens = tokenize_batch(instances, priors)
        probs = forward(tokens, self.model).data
        return (probs <= 0.5).astype(np.int64)


class MlDetector(Detector):
    name = "ml"

    def detect_batch(self, instances: list[MimoInstance]) -> np.ndarray:
        return np.stack([ml_detect(i).hard_bits for i in instances])


class LmmseDetector(Detector):
    name = "lmmse"

    def detect_batch(self, instances: list[MimoInstance]) -> np.ndarray:
        return np.stack(
            [lmmse_detect(i, soft_output=False).hard_bits for i in instances]
        )


class OampDetector(Detector):
    def __init__(self, iterations: int = 10) -> None:
        self.iterations = iterations
        self.name = "oamp"

    def detect_batch(self, instances: list[MimoInstance]) -> np.ndarray:
        return np.stack(
            [
                oamp_detect(i, self.iterations, soft_output=False).hard_bits
                for i in instances
            ]
        )


class RandomGuessDetector(Detector):
    """Coin-flip detector; only useful as a sanity anchor in tests."""

    name = "random"

    def __init__(self, seed: int = 0) -> None:
        self.rng = make_rng(seed, 0xC01)

    def detect_batch(self, instances: list[MimoInstance]) -> np.ndarray:
        shape = (len(instances),) + instances[0].bits.shape
        return self.rng.integers(0, 2, size=shape)


# ---------------------------------------------------------------------------
# Monte-Carlo BER

_Z95 = 1.959963984540054


def wilson_interval(errors: int, n: int) -> tuple[float, float]:
    """Binomial 95% confidence interval (Wilson score)."""
    if n == 0:
        return 0.0, 1.0
    p = errors / n
    z2 = _Z95**2
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = _Z95 * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


_EVAL_CHUNK = 512


def _eval_chunk(
    detector: Detector,
    n: int,
    n_t: int,
    n_r: int,
    snr_db: float,
    constellation: Constellation,
    seed: int,
    snr_idx: int,
    chunk_idx: int,
) -> tuple[int, int]:
    rng = make_rng(seed, 3, snr_idx, chunk_idx)
    instances = sample_batch(n, n_t, n_r, snr_db, constellation, rng)
    truth = np.stack([i.bits for i in instances])
    with threadpool_limits(limits=1):
        hard = detector.detect_batch(instances)
    return int((hard != truth).sum()), truth.size


def evaluate_ber(
    detector: Detector,
    snrs_db: list[float],
    trials: int,
    seed: int,
    n_t: int,
    n_r: int,
    constellation: Constellation,
    min_errors: int = 100,
    workers: int | None = None,
) -> list[BerRecord]:
    """Monte-Carlo BER per SNR point with a binomial 95% interval.

    Evaluation stops early once ``min_errors`` bit errors are seen; otherwise
    the ``trials`` cap is hit and the record is marked capped. Instances are
    keyed by (seed, snr index, chunk index), so different detectors under the
    same seed are compared on identical realisations, and the worker count
    (SGT_WORKERS) cannot change any result.
    """
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    records = []
    for si, snr in enumerate(snrs_db):
        chunk_sizes = []
        left = trials
        while left > 0:
            chunk_sizes.append(min(_EVAL_CHUNK, left))
            left -= chunk_sizes[-1]
        args = [
            (detector, n, n_t, n_r, snr, constellation, seed, si, ci)
            for ci, n in enumerate(chunk_sizes)
        ]
        errors = bits = 0
        trials_done = 0
        if workers > 1 and len(args) > 1:
            import multiprocessing as mp

            with mp.get_context("fork").Pool(workers) as pool:
                for (e, b), a in zip(pool.imap(_eval_chunk_star, args), args):
                    errors += e
                    bits += b
                    trials_done += a[1]
                    if errors >= min_errors:
                        pool.terminate()
                        break
        else:
            for a in args:
                e, b = _eval_chunk(*a)
                errors += e
                bits += b
                trials_done += a[1]
                if errors >= min_errors:
                    break
        lo, hi = wilson_interval(errors, bits)
        records.append(
            BerRecord(
                detector=detector.name,
                snr_db=float(snr),
                ber=errors / bits,
                errors=errors,
                bits=bits,
                ci_low=lo,
                ci_high=hi,
                trials=trials_done,
                capped=trials_done >= trials and errors < min_errors,
            )
        )
    return records


def _eval_chunk_star(a):
    return _eval_chunk(*a)


def check_ordering(
    records: list[BerRecord], expr: str
) -> list[str]:
    """Check an ordering expression like 'ml<=sgt<=lmmse' against BER records.

    A pair a<=b is violated only when it fails at 95% confidence, i.e. the
    lower interval bound of a exceeds the upper bound of b at some SNR.
    Returns a list of human-readable violations (empty = ordering holds).
    """
    names = [p.strip() for p in expr.split("<=")]
    if len(names) < 2 or any(not n for n in names):
        raise ValueError(f"malformed ordering expression {expr!r}")
    by_detector: dict[str, dict[float, BerRecord]] = {}
    for r in records:
        by_detector.setdefault(r.detector, {})[r.snr_db] = r
    missing = [n for n in names if n not in by_detector]
    if missing:
        raise ValueError(f"ordering names not present in records: {missing}")
    violations = []
    for a, b in zip(names, names[1:]):
        for snr in sorted(set(by_detector[a]) & set(by_detector[b])):
            ra, rb = by_detector[a][snr], by_detector[b][snr]
            if ra.ci_low > rb.ci_high:
                violations.append(
                    f"{a}<={b} fails at {snr:g} dB: "
                    f"{a} ber={ra.ber:.3e} [{ra.ci_low:.3e},{ra.ci_high:.3e}] vs "
                    f"{b} ber={rb.ber:.3e} [{rb.ci_low:.3e},{rb.ci_high:.3e}]"
                )
    return violations
