"""Analytic compute-time, CPU-energy and communication cost models, and the ledger."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .errors import ConfigError

FEATURE_BITS = 32
LABEL_BITS = 32


@dataclass(frozen=True)
class DeviceProfile:
    """CPU model of one base station.

    ``shard_bits`` is the size of the station's local dataset in bits; see
    :func:`shard_bits`.
    """

    cycles_per_bit: float = 40.0
    cpu_freq: float = 2.0e9
    capacitance_coeff: float = 2e-28
    shard_bits: float = 0.0

    def __post_init__(self):
        if self.cycles_per_bit <= 0 or self.cpu_freq <= 0 or self.capacitance_coeff <= 0:
            raise ConfigError("device profile fields must be strictly positive")
        if self.shard_bits < 0:
            raise ConfigError("shard_bits must be nonnegative")

    def with_bits(self, bits: float) -> "DeviceProfile":
        return DeviceProfile(self.cycles_per_bit, self.cpu_freq, self.capacitance_coeff, float(bits))


def shard_bits(n_samples: int, n_features: int, n_tasks: int) -> int:
    """Bits in a shard: 32-bit features plus one 32-bit label per task per sample."""
    return n_samples * (n_features * FEATURE_BITS + n_tasks * LABEL_BITS)


def local_iteration_time(profile: DeviceProfile) -> float:
    return profile.cycles_per_bit * profile.shard_bits / profile.cpu_freq


def iteration_energy(profile: DeviceProfile) -> float:
    return 0.5 * profile.capacitance_coeff * profile.cycles_per_bit * profile.shard_bits * profile.cpu_freq**2


def total_energy(profile: DeviceProfile, iterations: int) -> float:
    if iterations < 0:
        raise ConfigError("iteration count must be nonnegative")
    return iterations * iteration_energy(profile)


def round_comm_bytes(participants: int, roster: int, n_params: int, bytes_per_param: int = 4) -> int:
    """Uplink from participants plus downlink to the whole roster."""
    return (participants + roster) * n_params * bytes_per_param


def comm_cost(rounds_log, bytes_per_param: int = 4, mb_def: float = 1e6) -> float:
    """Total megabytes over ``(participants, roster, n_params)`` round entries."""
    total = sum(round_comm_bytes(p, u, n, bytes_per_param) for p, u, n in rounds_log)
    return total / mb_def


def first_crossing(accuracies, kappa: float):
    """1-based index of the first value >= ``kappa``, or ``None``."""
    for i, acc in enumerate(accuracies, start=1):
        if acc >= kappa:
            return i
    return None


def comm_cost_to_accuracy(accuracies, ledger: "CostLedger", kappa: float):
    """``(rounds, megabytes)`` to first reach ``kappa``, or ``None`` if never reached."""
    if not 0.0 < kappa < 1.0:
        raise ConfigError(f"target accuracy must lie in (0, 1), got {kappa}")
    rounds = first_crossing(accuracies, kappa)
    if rounds is None:
        return None
    return rounds, comm_cost(ledger.round_log()[:rounds], ledger.bytes_per_param, ledger.mb_definition)


@dataclass
class RoundCost:
    round: int
    participants: int
    roster: int
    n_params: int
    comm_bytes: int
    energy_j_cum: float
    modeled_s: float
    wall_ms: float | None = None


@dataclass
class CostLedger:
    """Cumulative costs per station and globally.

    Station energy is always recomputed as ``iterations * iteration_energy``
    from integer iteration counts, so it equals the closed form exactly. A
    round's modeled compute time is that of its slowest participant, since
    stations train in parallel within a synchronous round.
    """

    n_stations: int
    bytes_per_param: int = 4
    mb_definition: float = 1e6
    profiles: list = field(default_factory=list)
    station_iterations: list = field(default_factory=list)
    station_modeled_s: list = field(default_factory=list)
    rounds: list = field(default_factory=list)

    def __post_init__(self):
        if not self.station_iterations:
            self.profiles = [None] * self.n_stations
            self.station_iterations = [0] * self.n_stations
            self.station_modeled_s = [0.0] * self.n_stations

    @property
    def station_energy_j(self) -> list:
        return [0.0 if p is None else total_energy(p, i) for p, i in zip(self.profiles, self.station_iterations)]

    def record_round(self, round_index, participants, roster, n_params, work, wall_ms=None) -> RoundCost:
        """Book one round. ``work`` maps station index to ``(profile, iterations)``."""
        slowest = 0.0
        for u in sorted(work):
            profile, iters = work[u]
            if iters < 0:
                raise ConfigError("iteration count must be nonnegative")
            s = iters * local_iteration_time(profile)
            self.profiles[u] = profile
            self.station_iterations[u] += iters
            self.station_modeled_s[u] += s
            slowest = max(slowest, s)
        entry = RoundCost(
            round=round_index,
            participants=participants,
            roster=roster,
            n_params=n_params,
            comm_bytes=round_comm_bytes(participants, roster, n_params, self.bytes_per_param),
            energy_j_cum=sum(self.station_energy_j),
            modeled_s=slowest,
            wall_ms=wall_ms,
        )
        self.rounds.append(entry)
        return entry

    def round_log(self):
        return [(r.participants, r.roster, r.n_params) for r in self.rounds]

    @property
    def comm_bytes(self) -> int:
        return sum(r.comm_bytes for r in self.rounds)

    @property
    def energy_j(self) -> float:
        return sum(self.station_energy_j)

    @property
    def modeled_s(self) -> float:
        return sum(r.modeled_s for r in self.rounds)

    def cumulative(self):
        """Yield ``(round, comm_bytes, energy_j, modeled_s, wall_ms)`` running totals."""
        comm, modeled, wall = 0, 0.0, 0.0
        for r in self.rounds:
            comm += r.comm_bytes
            modeled += r.modeled_s
            wall = None if r.wall_ms is None or wall is None else wall + r.wall_ms
            yield r.round, comm, r.energy_j_cum, modeled, wall

    def to_dict(self) -> dict:
        return {
            "bytes_per_param": self.bytes_per_param,
            "mb_definition": self.mb_definition,
            "n_stations": self.n_stations,
            "comm_bytes": self.comm_bytes,
            "energy_j": self.energy_j,
            "modeled_s": self.modeled_s,
            "stations": [
                {
                    "station": u,
                    "energy_j": e,
                    "modeled_s": s,
                    "local_iterations": i,
                    "profile": None if p is None else vars(p),
                }
                for u, (e, s, i, p) in enumerate(
                    zip(self.station_energy_j, self.station_modeled_s, self.station_iterations, self.profiles)
                )
            ],
            "rounds": [vars(r) for r in self.rounds],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CostLedger":
        ledger = cls(
            n_stations=doc["n_stations"],
            bytes_per_param=doc["bytes_per_param"],
            mb_definition=doc["mb_definition"],
        )
        for st in doc["stations"]:
            u = st["station"]
            ledger.profiles[u] = None if st["profile"] is None else DeviceProfile(**st["profile"])
            ledger.station_modeled_s[u] = st["modeled_s"]
            ledger.station_iterations[u] = st["local_iterations"]
        ledger.rounds = [RoundCost(**r) for r in doc["rounds"]]
        return ledger

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rounds_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "comm_bytes_cum", "energy_j_cum", "modeled_s_cum", "wall_ms_cum"])
        for row in self.cumulative():
            writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()
