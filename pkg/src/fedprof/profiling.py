"""Representation profiles, Gaussian KL matching and the compact wire format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError, DomainError, FormatError, StalenessError
from .nn_core import CaptureSelector, Model, forward_capture

MAGIC = b"FPRP"
HEADER = struct.Struct("<4sHH")
# exact-zero variances (constant units) are lifted to this floor inside the KL only
VAR_FLOOR = 1e-8


class KlVariant(str, Enum):
    CANONICAL = "canonical"
    # the shortened form without the -1/2 constant
    PAPER_EQ4 = "paper_eq4"


@dataclass(frozen=True)
class GaussianParam:
    mu: float
    var: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.var)) or self.var < 0:
            raise DomainError(f"invalid Gaussian parameters (mu={self.mu}, var={self.var})")


@dataclass(frozen=True, eq=False)
class RepresentationProfile:
    """Per-unit (mean, variance) summary of one layer's representations on one dataset."""

    mu: np.ndarray
    var: np.ndarray
    version: int = 0
    owner: int = -1

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        var = np.asarray(self.var, dtype=float).ravel()
        if mu.size < 1 or mu.shape != var.shape:
            raise ContractError(f"profile needs matching non-empty mu/var, got {mu.shape}, {var.shape}")
        if self.version < 0:
            raise ContractError("profile version must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)

    def __len__(self):
        return self.mu.size

    @property
    def elements(self) -> list[GaussianParam]:
        return [GaussianParam(float(m), float(v)) for m, v in zip(self.mu, self.var)]

    @classmethod
    def from_elements(cls, elements, version=0, owner=-1) -> "RepresentationProfile":
        elements = list(elements)
        return cls(
            np.array([e.mu for e in elements]), np.array([e.var for e in elements]), version, owner
        )


def profile_from_captured(captured: np.ndarray, version: int = 0, owner: int = -1) -> RepresentationProfile:
    captured = np.asarray(captured, dtype=float)
    if captured.ndim != 2 or captured.shape[0] == 0:
        raise ContractError("cannot profile an empty representation matrix")
    return RepresentationProfile(captured.mean(axis=0), captured.var(axis=0), version, owner)


def generate_profile(model: Model, ds, sel: CaptureSelector, version: int = 0,
                     owner: int = -1) -> RepresentationProfile:
    """Profile ``model``'s representation at ``sel`` over every sample of ``ds``.

    Variance uses the population denominator n.
    """
    batch = ds.as_batch() if hasattr(ds, "as_batch") else ds
    if len(batch) == 0:
        raise ContractError("cannot profile an empty dataset")
    _, captured = forward_capture(model, batch, sel)
    return profile_from_captured(captured, version, owner)


def _check_variances(var, which):
    var = np.asarray(var, dtype=float)
    bad = np.flatnonzero(~np.isfinite(var) | (var < 0))
    if bad.size:
        i = int(bad[0])
        raise DomainError(f"{which} variance at element {i} is {float(var.flat[i])}; must be >= 0")
    return np.maximum(var, VAR_FLOOR)


def kl_terms(mu_p, var_p, mu_q, var_q, variant=KlVariant.CANONICAL) -> np.ndarray:
    """Elementwise KL(N(mu_p, var_p) || N(mu_q, var_q))."""
    var_p = _check_variances(var_p, "left")
    var_q = _check_variances(var_q, "right")
    diff = np.asarray(mu_p, dtype=float) - np.asarray(mu_q, dtype=float)
    kl = 0.5 * np.log(var_q / var_p) + (var_p + diff * diff) / (2.0 * var_q)
    if KlVariant(variant) is KlVariant.CANONICAL:
        kl = kl - 0.5
    return kl


def gaussian_kl(p: GaussianParam, q: GaussianParam, variant=KlVariant.CANONICAL) -> float:
    return float(kl_terms(p.mu, p.var, q.mu, q.var, variant))


def profile_divergence(rp_k: RepresentationProfile, rp_b: RepresentationProfile,
                       variant=KlVariant.CANONICAL, check_version: bool = True) -> float:
    """Mean elementwise KL of the client profile against the baseline profile."""
    if len(rp_k) != len(rp_b):
        raise ContractError(f"profile lengths differ: {len(rp_k)} vs {len(rp_b)}")
    if check_version and rp_k.version != rp_b.version:
        raise StalenessError(
            f"client profile v{rp_k.version} compared with baseline v{rp_b.version}"
        )
    return float(np.mean(kl_terms(rp_k.mu, rp_k.var, rp_b.mu, rp_b.var, variant)))


def encode_profile(rp: RepresentationProfile) -> bytes:
    if not (np.all(np.isfinite(rp.mu)) and np.all(np.isfinite(rp.var))):
        raise FormatError("cannot encode non-finite profile values")
    if rp.version > 0xFFFF or len(rp) > 0xFFFF:
        raise FormatError("version and length must fit in 16 bits")
    body = np.empty(2 * len(rp), dtype="<f4")
    body[0::2] = rp.mu
    body[1::2] = rp.var
    return HEADER.pack(MAGIC, rp.version, len(rp)) + body.tobytes()


def decode_profile(data: bytes, owner: int = -1) -> RepresentationProfile:
    if len(data) < HEADER.size:
        raise FormatError(f"truncated header: {len(data)} bytes")
    magic, version, q = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    expected = HEADER.size + 8 * q
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for q={q}, got {len(data)}")
    if q == 0:
        raise FormatError("empty profile")
    body = np.frombuffer(data, dtype="<f4", offset=HEADER.size).astype(float)
    return RepresentationProfile(body[0::2], body[1::2], version, owner)
