"""Profile divergence computed on encrypted means.

The reference :class:`TransparentBackend` keeps plaintext inside its cipher
objects. It exists to exercise the computation structure and to audit which
operations touched ciphertext; it provides no confidentiality.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CapabilityError, ContractError, DomainError
from .profiling import RepresentationProfile

ALLOWED_OPS = frozenset({"encrypt", "add", "sub", "mul", "scale"})


@dataclass(frozen=True)
class Cipher:
    value: float
    backend_id: int


class TransparentBackend:
    """Exact-arithmetic stand-in for an additive+multiplicative HE scheme."""

    supports_log = False
    _ids = itertools.count()

    def __init__(self):
        self.id = next(self._ids)
        self.trace: list[str] = []

    def _own(self, *cs: Cipher):
        for c in cs:
            if not isinstance(c, Cipher) or c.backend_id != self.id:
                raise ContractError("ciphertext does not belong to this backend")

    def encrypt(self, x: float) -> Cipher:
        self.trace.append("encrypt")
        return Cipher(float(x), self.id)

    def decrypt(self, c: Cipher) -> float:
        self._own(c)
        self.trace.append("decrypt")
        return c.value

    def add(self, a: Cipher, b: Cipher) -> Cipher:
        self._own(a, b)
        self.trace.append("add")
        return Cipher(a.value + b.value, self.id)

    def sub(self, a: Cipher, b: Cipher) -> Cipher:
        self._own(a, b)
        self.trace.append("sub")
        return Cipher(a.value - b.value, self.id)

    def mul(self, a: Cipher, b: Cipher) -> Cipher:
        self._own(a, b)
        self.trace.append("mul")
        return Cipher(a.value * b.value, self.id)

    def scale(self, k: float, c: Cipher) -> Cipher:
        self._own(c)
        self.trace.append("scale")
        return Cipher(float(k) * c.value, self.id)


@dataclass(frozen=True)
class EncryptedProfile:
    mu: tuple
    var: tuple  # plaintext floats in restricted mode, ciphers in full mode
    mode: str = "restricted"
    version: int = 0
    owner: int = -1

    def __len__(self):
        return len(self.mu)


def encrypt_profile(rp: RepresentationProfile, backend, mode: str = "restricted") -> EncryptedProfile:
    if mode == "full":
        if not getattr(backend, "supports_log", False):
            raise CapabilityError(
                "encrypting variances needs a ciphertext logarithm, which this backend lacks"
            )
        mu = tuple(backend.encrypt(m) for m in rp.mu)
        var = tuple(backend.encrypt(v) for v in rp.var)
    elif mode == "restricted":
        mu = tuple(backend.encrypt(m) for m in rp.mu)
        var = tuple(float(v) for v in rp.var)
    else:
        raise ContractError(f"unknown encryption mode {mode!r}")
    return EncryptedProfile(mu, var, mode, rp.version, rp.owner)


def encrypted_divergence(ep_k: EncryptedProfile, ep_b: EncryptedProfile, backend) -> Cipher:
    """Encrypted mean Gaussian KL of ``ep_k`` against the baseline ``ep_b``.

    The variance-only part of each element's KL is evaluated in plaintext and
    encrypted; the mean-difference part is built from ciphertext sub/mul/scale.
    """
    if ep_k.mode != "restricted" or ep_b.mode != "restricted":
        raise CapabilityError("only restricted-mode profiles can be matched on this backend")
    if len(ep_k) != len(ep_b):
        raise ContractError(f"profile lengths differ: {len(ep_k)} vs {len(ep_b)}")
    q = len(ep_k)
    total: Optional[Cipher] = None
    for i, (mk, mb, vk, vb) in enumerate(zip(ep_k.mu, ep_b.mu, ep_k.var, ep_b.var)):
        if not vb > 0:
            raise DomainError(f"baseline variance at element {i} is {vb}; must be > 0")
        if not vk > 0:
            raise DomainError(f"client variance at element {i} is {vk}; must be > 0")
        plain = 0.5 * np.log(vb / vk) + 0.5 * (vk / vb) - 0.5
        d = backend.sub(mk, mb)
        term = backend.add(backend.encrypt(plain), backend.scale(1.0 / (2.0 * vb), backend.mul(d, d)))
        total = term if total is None else backend.add(total, term)
    return backend.scale(1.0 / q, total)


def audit_trace(trace) -> bool:
    """True iff only encrypt/add/sub/mul/scale were applied during the computation."""
    return all(op in ALLOWED_OPS for op in trace)


@dataclass
class AuditedResult:
    value: float
    passed: bool
    op_counts: dict = field(default_factory=dict)


def audited_divergence(rp_k: RepresentationProfile, rp_b: RepresentationProfile,
                       backend=None) -> AuditedResult:
    """Encrypt both profiles, match them, audit the trace, then decrypt."""
    backend = backend or TransparentBackend()
    start = len(backend.trace)
    cipher = encrypted_divergence(
        encrypt_profile(rp_k, backend), encrypt_profile(rp_b, backend), backend
    )
    ops = backend.trace[start:]
    counts = {op: ops.count(op) for op in sorted(set(ops))}
    passed = audit_trace(ops)
    return AuditedResult(backend.decrypt(cipher), passed, counts)
