"""MIMO instance generation: Rayleigh channels, QPSK, AWGN, real-valued lift.

The complex system y_c = H_c x_c + n_c is carried around in its equivalent
real form with the block structure [[Re, -Im], [Im, Re]]; all detectors in
this package operate on the real model. Per real dimension the noise
variance is half the complex one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Constellation",
    "ComplexMimoSystem",
    "MimoInstance",
    "sample_rayleigh",
    "lift_to_real",
    "modulate",
    "hard_demap",
    "snr_to_sigma",
    "sample_instance",
    "sample_batch",
    "save_instances",
    "load_instances",
    "make_rng",
]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for a (seed, stream path) pair."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(stream)))


@dataclass(frozen=True, eq=False)
class Constellation:
    """Square constellation described by its Gray-labelled real-axis levels.

    ``levels_desc[g]`` is the level whose Gray index is g; index 0 (the
    all-zero bit pattern) sits on the most positive level, so bit 0 maps to
    the positive side. Levels are scaled for unit average complex symbol
    energy, i.e. E[level^2] = 1/2 per real axis.
    """

    name: str
    bits_per_symbol: int  # bits per complex symbol (N_bits)
    levels_desc: np.ndarray = field(repr=False)

    @property
    def bits_per_axis(self) -> int:
        return self.bits_per_symbol // 2

    @property
    def symbol_energy(self) -> float:
        """Average complex symbol energy under uniform bits (1 by scaling)."""
        return float(2.0 * np.mean(self.levels_desc**2))

    @staticmethod
    def from_name(name: str) -> "Constellation":
        key = name.lower()
        if key == "qpsk":
            bits_per_axis = 1
        elif key.endswith("qam"):
            order = int(key[:-3])
            bits_per_axis = int(np.log2(order)) // 2
            if 4**bits_per_axis != order:
                raise ValueError(f"unsupported constellation {name!r}: not square")
        else:
            raise ValueError(f"unknown constellation {name!r}")
        n_levels = 2**bits_per_axis
        d = np.sqrt(1.5 / (n_levels**2 - 1))
        descending = np.arange(n_levels - 1, -n_levels, -2, dtype=np.float64) * d
        # Reorder so position g holds the level of Gray index g.
        idx = np.arange(n_levels)
        gray = idx ^ (idx >> 1)
        levels_desc = np.empty(n_levels)
        levels_desc[gray] = descending
        return Constellation(key, 2 * bits_per_axis, levels_desc)


@dataclass
class ComplexMimoSystem:
    """One realisation of the complex model y_c = H_c x_c + n_c."""

    H_c: np.ndarray
    x_c: np.ndarray
    y_c: np.ndarray
    sigma_c2: float


@dataclass
class MimoInstance:
    """Real-lifted detection problem with ground truth attached."""

    H: np.ndarray          # [2N_r, 2N_t]
    y: np.ndarray          # [2N_r]
    x: np.ndarray          # [2N_t]
    sigma2: np.ndarray     # [2N_r] per-row noise variances
    bits: np.ndarray       # [2N_t, bits_per_axis] ground truth in {0,1}
    snr_db: float
    constellation: Constellation

    @property
    def n_t(self) -> int:
        return self.H.shape[1] // 2

    @property
    def n_r(self) -> int:
        return self.H.shape[0] // 2


def sample_rayleigh(n_r: int, n_t: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. CN(0, 1) channel matrix [n_r, n_t] (variance 0.5 per real part)."""
    if n_r < 1 or n_t < 1:
        raise ValueError(f"antenna counts must be >= 1, got {n_r}x{n_t}")
    re = rng.standard_normal((n_r, n_t))
    im = rng.standard_normal((n_r, n_t))
    return (re + 1j * im) * np.sqrt(0.5)


def snr_to_sigma(snr_db: float, constellation: Constellation, n_t: int) -> float:
    """Complex noise variance for a per-receive-antenna SNR in dB.

    SNR := E[|Hx|^2] / (N_r sigma_c^2) = N_t E_s / sigma_c^2 for i.i.d.
    unit-variance channel entries, so sigma_c^2 = N_t E_s / 10^(snr/10).
    """
    return n_t * constellation.symbol_energy / 10.0 ** (snr_db / 10.0)


def modulate(bits: np.ndarray, constellation: Constellation) -> np.ndarray:
    """Map a [2N_t, bits_per_axis] bit matrix to real-axis levels."""
    bits = np.asarray(bits)
    if bits.ndim != 2 or bits.shape[1] != constellation.bits_per_axis:
        raise ValueError(
            f"bit matrix must be [2N_t, {constellation.bits_per_axis}], "
            f"got {bits.shape}"
        )
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bits must be 0 or 1")
    weights = 1 << np.arange(constellation.bits_per_axis - 1, -1, -1)
    pattern = (bits * weights).sum(axis=1)
    gray = pattern ^ (pattern >> 1)
    return constellation.levels_desc[gray]


def hard_demap(x: np.ndarray, constellation: Constellation) -> np.ndarray:
    """Nearest-level decision back to the bit matrix; inverse of modulate."""
    x = np.asarray(x, dtype=np.float64)
    gray = np.argmin(np.abs(x[:, None] - constellation.levels_desc[None, :]), axis=1)
    pattern = np.zeros_like(gray)
    g = gray.copy()
    while np.any(g):
        pattern ^= g
        g >>= 1
    nb = constellation.bits_per_axis
    weights = 1 << np.arange(nb - 1, -1, -1)
    return ((pattern[:, None] & weights) > 0).astype(np.int64)


def lift_to_real(
    sys: ComplexMimoSystem,
    bits: np.ndarray,
    snr_db: float,
    constellation: Constellation,
) -> MimoInstance:
    """Exact real-valued representation of a complex system."""
    Hc, yc, xc = sys.H_c, sys.y_c, sys.x_c
    n_r, n_t = Hc.shape
    H = np.empty((2 * n_r, 2 * n_t))
    H[:n_r, :n_t] = Hc.real
    H[:n_r, n_t:] = -Hc.imag
    H[n_r:, :n_t] = Hc.imag
    H[n_r:, n_t:] = Hc.real
    y = np.concatenate([yc.real, yc.imag])
    x = np.concatenate([xc.real, xc.imag])
    sigma2 = np.full(2 * Hc.shape[0], sys.sigma_c2 / 2.0)
    return MimoInstance(H, y, x, sigma2, bits, snr_db, constellation)


def sample_instance(
    n_t: int,
    n_r: int,
    snr_db: float,
    constellation: Constellation,
    rng: np.random.Generator,
) -> MimoInstance:
    """Fresh Rayleigh channel, uniform bits, AWGN at the given SNR."""
    Hc = sample_rayleigh(n_r, n_t, rng)
    bits = rng.integers(0, 2, size=(2 * n_t, constellation.bits_per_axis))
    xr = modulate(bits, constellation)
    xc = xr[:n_t] + 1j * xr[n_t:]
    sigma_c2 = snr_to_sigma(snr_db, constellation, n_t)
    nc = (rng.standard_normal(n_r) + 1j * rng.standard_normal(n_r)) * np.sqrt(
        sigma_c2 / 2.0
    )
    yc = Hc @ xc + nc
    return lift_to_real(
        ComplexMimoSystem(Hc, xc, yc, sigma_c2), bits, snr_db, constellation
    )


def sample_batch(
    n: int,
    n_t: int,
    n_r: int,
    snr_db: float | tuple[float, float],
    constellation: Constellation,
    rng: np.random.Generator,
) -> list[MimoInstance]:
    """n instances; snr_db may be a fixed value or a uniform (lo, hi) range.

    All randomness is drawn in a few bulk calls (channel, bits, noise, SNRs),
    which keeps large-batch generation cheap; the per-instance distribution
    matches sample_instance.
    """
    if isinstance(snr_db, tuple):
        snrs = rng.uniform(snr_db[0], snr_db[1], size=n)
    else:
        snrs = np.full(n, float(snr_db))
    Hc = (
        rng.standard_normal((n, n_r, n_t)) + 1j * rng.standard_normal((n, n_r, n_t))
    ) * np.sqrt(0.5)
    nb = constellation.bits_per_axis
    bits = rng.integers(0, 2, size=(n, 2 * n_t, nb))
    weights = 1 << np.arange(nb - 1, -1, -1)
    pattern = (bits * weights).sum(axis=2)
    x = constellation.levels_desc[pattern ^ (pattern >> 1)]
    xc = x[:, :n_t] + 1j * x[:, n_t:]
    sigma_c2 = n_t * constellation.symbol_energy / 10.0 ** (snrs / 10.0)
    nc = (
        rng.standard_normal((n, n_r)) + 1j * rng.standard_normal((n, n_r))
    ) * np.sqrt(sigma_c2 / 2.0)[:, None]
    yc = np.einsum("brt,bt->br", Hc, xc) + nc

    H = np.empty((n, 2 * n_r, 2 * n_t))
    H[:, :n_r, :n_t] = Hc.real
    H[:, :n_r, n_t:] = -Hc.imag
    H[:, n_r:, :n_t] = Hc.imag
    H[:, n_r:, n_t:] = Hc.real
    y = np.concatenate([yc.real, yc.imag], axis=1)
    return [
        MimoInstance(
            H=H[k],
            y=y[k],
            x=x[k],
            sigma2=np.full(2 * n_r, sigma_c2[k] / 2.0),
            bits=bits[k],
            snr_db=float(snrs[k]),
            constellation=constellation,
        )
        for k in range(n)
    ]


# ---------------------------------------------------------------------------
# Instance batch dump (npz archive, one stacked array per field)

def save_instances(path: str | Path, instances: list[MimoInstance]) -> None:
    """Write an instance batch as an .npz archive.

    Arrays: H [B,2N_r,2N_t], y [B,2N_r], sigma2 [B,2N_r],
    bits [B,2N_t,bits_per_axis], snr_db [B]; plus the constellation name.
    x is not stored, it is reconstructed from bits on load.
    """
    if not instances:
        raise ValueError("refusing to save an empty instance batch")
    names = {i.constellation.name for i in instances}
    if len(names) > 1:
        raise ValueError(f"mixed constellations in batch: {sorted(names)}")
    np.savez(
        path,
        H=np.stack([i.H for i in instances]),
        y=np.stack([i.y for i in instances]),
        sigma2=np.stack([i.sigma2 for i in instances]),
        bits=np.stack([i.bits for i in instances]),
        snr_db=np.array([i.snr_db for i in instances]),
        constellation=np.array(instances[0].constellation.name),
    )


def load_instances(path: str | Path) -> list[MimoInstance]:
    with np.load(path) as data:
        constellation = Constellation.from_name(str(data["constellation"]))
        out = []
        for k in range(data["H"].shape[0]):
            bits = data["bits"][k]
            out.append(
                MimoInstance(
                    H=data["H"][k],
                    y=data["y"][k],
                    x=modulate(bits, constellation),
                    sigma2=data["sigma2"][k],
                    bits=bits,
                    snr_db=float(data["snr_db"][k]),
                    constellation=constellation,
                )
            )
    return out
