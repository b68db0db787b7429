"""Wall-clock and device-energy accounting for one FL round.

Units: sizes in Mbit, bandwidth in MHz (``bw * log2(1 + SNR)`` read as Mbit/s),
compute rate in GHz, power in W, energy reported in Wh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError

JOULES_PER_WH = 3600.0


@dataclass(frozen=True)
class DeviceSpec:
    s: float  # GHz
    bw: float  # MHz
    snr_db: float = 10.0
    bps: float = 352.0
    cpb: float = 300.0

    def __post_init__(self):
        for name in ("s", "bw", "bps", "cpb"):
            if not getattr(self, name) > 0:
                raise ContractError(f"device {name} must be positive, got {getattr(self, name)}")

    @property
    def downlink_rate(self) -> float:
        """Mbit/s."""
        return self.bw * math.log2(1.0 + 10.0 ** (self.snr_db / 10.0))


@dataclass(frozen=True)
class PowerModel:
    p_trans: float = 0.75
    p_f: float = 0.7


@dataclass(frozen=True)
class DeviceLaw:
    """Gaussian laws for per-device compute rate and bandwidth."""

    s_mean: float = 0.5
    s_std: float = 0.1
    bw_mean: float = 0.7
    bw_std: float = 0.1
    snr_db: float = 7.0
    bps: float = 352.0
    cpb: float = 300.0
    floor: float = 0.05

    def sample(self, n: int, rng: np.random.Generator) -> list[DeviceSpec]:
        s = np.maximum(rng.normal(self.s_mean, self.s_std, n), self.floor)
        bw = np.maximum(rng.normal(self.bw_mean, self.bw_std, n), self.floor)
        return [DeviceSpec(float(a), float(b), self.snr_db, self.bps, self.cpb) for a, b in zip(s, bw)]


@dataclass(frozen=True)
class ClientTimes:
    comm: float
    train: float
    rp_gen: float = 0.0
    rp_up: float = 0.0

    @property
    def rp(self) -> float:
        return self.rp_gen + self.rp_up

    @property
    def total(self) -> float:
        return self.comm + self.train + self.rp


def model_size_mbit(n_params: int, bytes_per_param: int = 4) -> float:
    return n_params * bytes_per_param * 8 / 1e6


def profile_size_mbit(q: int) -> float:
    return 8 * q * 8 / 1e6


def comm_time(msize_mbit: float, dev: DeviceSpec) -> float:
    """Download plus upload at half the downlink bandwidth: 3 * msize / rate."""
    return 3.0 * msize_mbit / dev.downlink_rate


def train_time(epochs: int, n_samples: int, dev: DeviceSpec) -> float:
    if epochs < 1 or n_samples < 1:
        raise ContractError("epochs and sample count must be >= 1")
    return epochs * n_samples * dev.bps * dev.cpb / (dev.s * 1e9)


def rp_split(train_time_value: float, epochs: int, rp_size_mbit: float, dev: DeviceSpec):
    """Return ``(generation, upload)`` seconds for one profile."""
    return train_time_value / epochs, rp_size_mbit / (0.5 * dev.downlink_rate)


def rp_time(train_time_value: float, epochs: int, rp_size_mbit: float, dev: DeviceSpec) -> float:
    gen, up = rp_split(train_time_value, epochs, rp_size_mbit, dev)
    return gen + up


def client_times(dev: DeviceSpec, n_samples: int, epochs: int, msize_mbit: float,
                 q: int = 0, uses_rp: bool = False) -> ClientTimes:
    t_train = train_time(epochs, n_samples, dev)
    t_comm = comm_time(msize_mbit, dev)
    if not uses_rp:
        return ClientTimes(t_comm, t_train)
    gen, up = rp_split(t_train, epochs, profile_size_mbit(q), dev)
    return ClientTimes(t_comm, t_train, gen, up)


def round_time(components: Sequence[ClientTimes], uses_rp: bool = True) -> float:
    """Slowest selected client's comm + train (+ profiling) time."""
    if not components:
        raise ContractError("round has no selected clients")
    if uses_rp:
        return max(c.total for c in components)
    return max(c.comm + c.train for c in components)


def client_energy(times: ClientTimes, dev: DeviceSpec, power: PowerModel = PowerModel(),
                  uses_rp: bool = False) -> float:
    """Device energy for one round in Wh."""
    compute_power = power.p_f * dev.s ** 3
    joules = power.p_trans * times.comm + compute_power * times.train
    if uses_rp:
        joules += power.p_trans * times.rp_up + compute_power * times.rp_gen
    return joules / JOULES_PER_WH


@dataclass
class CostLedger:
    """Cumulative per-client time/energy components and per-round lengths."""

    comm_s: dict = field(default_factory=dict)
    train_s: dict = field(default_factory=dict)
    rp_s: dict = field(default_factory=dict)
    energy_wh: dict = field(default_factory=dict)
    round_s: list = field(default_factory=list)
    round_energy_wh: list = field(default_factory=list)

    def record(self, per_client: dict, energies: dict, t_round: float, uses_rp: bool):
        for cid in sorted(per_client):
            t = per_client[cid]
            self.comm_s[cid] = self.comm_s.get(cid, 0.0) + t.comm
            self.train_s[cid] = self.train_s.get(cid, 0.0) + t.train
            self.rp_s[cid] = self.rp_s.get(cid, 0.0) + (t.rp if uses_rp else 0.0)
            self.energy_wh[cid] = self.energy_wh.get(cid, 0.0) + energies[cid]
        self.round_s.append(t_round)
        self.round_energy_wh.append(sum(energies[cid] for cid in sorted(energies)))

    def merge(self, other: "CostLedger") -> "CostLedger":
        out = CostLedger()
        for ledger in (self, other):
            for name in ("comm_s", "train_s", "rp_s", "energy_wh"):
                dst = getattr(out, name)
                for cid, v in getattr(ledger, name).items():
                    dst[cid] = dst.get(cid, 0.0) + v
            out.round_s.extend(ledger.round_s)
            out.round_energy_wh.extend(ledger.round_energy_wh)
        return out

    @property
    def total_time_s(self) -> float:
        return sum(self.round_s)

    @property
    def total_energy_wh(self) -> float:
        return sum(self.round_energy_wh)
