"""Closed-form linear precoders and the downlink sum rate.

Channels are ``(M, K)`` arrays whose column ``k`` is user ``k``'s channel
``h_k``; user ``k`` receives ``h_k^H W d + n_k``. All functions also accept a
stack of channels with shape ``(..., M, K)``.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .linalg import DegenerateInputError, as_cmatrix, hermitian, invert

__all__ = [
    "LinkConfig",
    "normalize_power",
    "mmse_precode",
    "zf_precode",
    "mrt_precode",
    "sum_rate",
    "per_user_rates",
    "taylor_inverse_approx",
    "PRECODERS",
]


@dataclasses.dataclass(frozen=True)
class LinkConfig:
    """Noise variance, transmit power budget and MMSE regulariser.

    ``rho`` defaults to ``noise_variance / power_budget`` (the inverse SNR).
    Pass ``rho_convention="k_over_snr"`` for ``K * noise_variance /
    power_budget`` instead, or give ``rho`` explicitly.
    """

    noise_variance: float = 1.0
    power_budget: float = 10.0
    rho: float | None = None
    rho_convention: str = "inverse_snr"
    users: int | None = None

    def __post_init__(self):
        if not self.noise_variance >= 0 or not self.power_budget > 0:
            raise ValueError("noise_variance must be >= 0 and power_budget positive")
        if self.rho is None:
            rho = self.noise_variance / self.power_budget
            if self.rho_convention == "k_over_snr":
                if self.users is None:
                    raise ValueError("k_over_snr convention needs the user count")
                rho *= self.users
            elif self.rho_convention != "inverse_snr":
                raise ValueError(f"unknown rho convention {self.rho_convention!r}")
            object.__setattr__(self, "rho", rho)
        if not self.rho >= 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")

    @classmethod
    def from_snr_db(cls, snr_db: float, noise_variance: float = 1.0, **kw) -> "LinkConfig":
        return cls(noise_variance, noise_variance * 10.0 ** (snr_db / 10.0), **kw)

    @property
    def snr(self) -> float:
        return self.power_budget / self.noise_variance


def normalize_power(w, p_t: float) -> np.ndarray:
    """Scale each precoder so that ``||W||_F = sqrt(p_t)``."""
    w = as_cmatrix(w)
    norm = np.sqrt(np.sum(w.real**2 + w.imag**2, axis=(-2, -1), keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot power-normalize an all-zero precoder")
    return w * (math.sqrt(p_t) / norm)


def mmse_precode(h, cfg: LinkConfig) -> np.ndarray:
    """Regularised channel inversion ``H (H^H H + rho I)^-1``, power-normalized."""
    if not cfg.rho > 0:
        raise ValueError(f"MMSE precoding needs rho > 0, got {cfg.rho}")
    h = as_cmatrix(h)
    k = h.shape[-1]
    z = hermitian(h) @ h + cfg.rho * np.eye(k)
    return normalize_power(h @ invert(z), cfg.power_budget)


def zf_precode(h, p_t: float) -> np.ndarray:
    """Zero forcing ``H (H^H H)^-1``, power-normalized.

    Raises :class:`~ipnet.linalg.SingularMatrixError` for rank-deficient
    channels.
    """
    h = as_cmatrix(h)
    return normalize_power(h @ invert(hermitian(h) @ h), p_t)


def mrt_precode(h, p_t: float) -> np.ndarray:
    return normalize_power(as_cmatrix(h), p_t)


def per_user_rates(h, w, noise_variance: float) -> np.ndarray:
    """Rates ``log2(1 + SINR_k)`` with shape ``(..., K)``."""
    h = as_cmatrix(h)
    w = as_cmatrix(w)
    g = hermitian(h) @ w  # g[k, j] = h_k^H w_j
    power = g.real**2 + g.imag**2
    desired = np.diagonal(power, axis1=-2, axis2=-1)
    interference = power.sum(axis=-1) - desired
    return np.log2(1.0 + desired / (interference + noise_variance))


def sum_rate(h, w, noise_variance: float) -> np.ndarray | float:
    """Downlink sum rate in bit/s/Hz. Returns a float for a single channel."""
    r = per_user_rates(h, w, noise_variance).sum(axis=-1)
    return float(r) if r.ndim == 0 else r


def taylor_inverse_approx(z) -> np.ndarray:
    """First-order expansion of ``Z^-1`` about its diagonal ``D``.

    Returns ``2 D^-1 - D^-1 Z D^-1``, which reduces to ``2 D^-1 - Z D^-2``
    when ``D`` commutes with ``Z``. It is evaluated as
    ``D^-1 - D^-1 (Z - D) D^-1`` so a diagonal input gives ``D^-1`` exactly.
    The error is second order in the off-diagonal part of ``D^-1 Z``.
    """
    z = as_cmatrix(z)
    if z.shape[-1] != z.shape[-2]:
        raise ValueError(f"expected square matrices, got {z.shape}")
    k = z.shape[-1]
    d = np.diagonal(z, axis1=-2, axis2=-1)
    if np.any(d == 0):
        raise DegenerateInputError("zero on the diagonal")
    d_inv = 1.0 / d
    off = z * (1.0 - np.eye(k))
    return d_inv[..., None] * np.eye(k) - d_inv[..., :, None] * off * d_inv[..., None, :]


PRECODERS = {
    "mmse": lambda h, cfg: mmse_precode(h, cfg),
    "zf": lambda h, cfg: zf_precode(h, cfg.power_budget),
    "mrt": lambda h, cfg: mrt_precode(h, cfg.power_budget),
}
