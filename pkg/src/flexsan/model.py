"""Core domain types and link/queue/cost mathematics for the satellite access network.

Everything in this module is a pure function of its inputs. The satellite
serves ground users over discrete time slots; each admitted user is bound to
one of two regenerative payload architectures and a bandwidth allocation, and
all admitted users share a single M/M/1 processing queue on board.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# Relative slack applied to resource-cap comparisons so that floating-point
# dust from summing per-user terms never flags a genuinely tight allocation.
CAP_REL_TOL = 1e-9


class FlexsanError(Exception):
    """Base class for domain errors."""


class QueueUnstableError(FlexsanError):
    """Aggregate load reached or exceeded the service rate."""


class ThroughputUnsatisfiableError(FlexsanError):
    """No bandwidth within the allowed budget reaches the demanded rate."""


class CompressionInsufficientError(FlexsanError):
    """Bandwidth compression hit every floor while caps were still violated."""


class OracleLimitError(FlexsanError):
    """Exhaustive search refused: instance exceeds the configured size guard."""


class ArchKind(Enum):
    """Regenerative payload architecture for one user."""

    ONBOARD_GNB = 0     # full base station on the satellite
    ONBOARD_GNB_DU = 1  # only the distributed unit on board, CU on the ground

    @property
    def g(self) -> int:
        return self.value


@dataclass(frozen=True, eq=False)
class UserDemand:
    """One user's QoS contract plus per-slot channel state.

    ``snr_linear`` and ``distance_m`` may be scalars (constant over the pass)
    or per-slot arrays; use :meth:`snr_at` / :meth:`distance_at` to read them.
    """

    id: int
    r_min: float                                  # bits/s
    t_max: float                                  # s
    snr_linear: Union[float, np.ndarray]          # dimensionless, > 0
    distance_m: Union[float, np.ndarray]          # m

    def __post_init__(self) -> None:
        if self.r_min <= 0:
            raise ValueError(f"user {self.id}: r_min must be > 0")
        if self.t_max <= 0:
            raise ValueError(f"user {self.id}: t_max must be > 0")
        if np.any(np.asarray(self.snr_linear) <= 0):
            raise ValueError(f"user {self.id}: snr_linear must be > 0")
        if np.any(np.asarray(self.distance_m) <= 0):
            raise ValueError(f"user {self.id}: distance_m must be > 0")

    def snr_at(self, slot: int) -> float:
        if np.ndim(self.snr_linear) == 0:
            return float(self.snr_linear)
        return float(self.snr_linear[slot])

    def distance_at(self, slot: int) -> float:
        if np.ndim(self.distance_m) == 0:
            return float(self.distance_m)
        return float(self.distance_m[slot])


@dataclass(frozen=True)
class SatelliteConfig:
    """System capacities and physical constants."""

    b_s: float = 20e6            # total service-link bandwidth, Hz
    c_cap: float = 32_000.0      # total on-board compute, GOPS
    t_f1: float = 0.09           # F1 round-trip delay, s
    s_p: float = 8192.0          # packet size, bits (1 KB)
    job_gop: float = 1.0         # queue job granularity, Gop
    light_speed: float = SPEED_OF_LIGHT

    T_F1_BOUNDS = (0.08, 0.10)

    def __post_init__(self) -> None:
        for name in ("b_s", "c_cap", "t_f1", "s_p", "job_gop", "light_speed"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        lo, hi = self.T_F1_BOUNDS
        if not lo <= self.t_f1 <= hi:
            raise ValueError(f"t_f1 must lie in [{lo}, {hi}] s, got {self.t_f1}")


@dataclass(frozen=True)
class ProcessingFunction:
    """One processing function of the gNB stack with an affine GOPS cost."""

    name: str
    kappa_gops_per_mhz: float   # cost slope per MHz of allocated bandwidth
    beta_gops: float            # base cost per admitted user
    in_sat: bool                # stays on the satellite under the DU split


def _default_functions() -> tuple[ProcessingFunction, ...]:
    # Split calibrated so the on-board share totals kappa=320/beta=40 against
    # a full-stack total of kappa=400/beta=50 (DU runs at 80% of gNB cost).
    return (
        ProcessingFunction("phy", 250.0, 20.0, True),
        ProcessingFunction("mac", 50.0, 10.0, True),
        ProcessingFunction("rlc", 20.0, 10.0, True),
        ProcessingFunction("pdcp", 60.0, 8.0, False),
        ProcessingFunction("rrc", 20.0, 2.0, False),
    )


@dataclass(frozen=True)
class CostModel:
    """Per-function GOPS coefficients defining the cost of both architectures.

    The full on-board gNB executes every function; the gNB-DU split keeps only
    the ``in_sat`` subset on the satellite, which must be strictly cheaper.
    """

    functions: tuple[ProcessingFunction, ...] = field(default_factory=_default_functions)

    def __post_init__(self) -> None:
        if not self.functions:
            raise ValueError("cost model needs at least one processing function")
        for f in self.functions:
            if f.kappa_gops_per_mhz < 0 or f.beta_gops < 0:
                raise ValueError(f"function {f.name}: coefficients must be >= 0")
        if not (self.kappa_sat < self.kappa_all and self.beta_sat < self.beta_all):
            raise ValueError("the DU split must be strictly cheaper on board")

    @property
    def kappa_all(self) -> float:
        return sum(f.kappa_gops_per_mhz for f in self.functions)

    @property
    def beta_all(self) -> float:
        return sum(f.beta_gops for f in self.functions)

    @property
    def kappa_sat(self) -> float:
        return sum(f.kappa_gops_per_mhz for f in self.functions if f.in_sat)

    @property
    def beta_sat(self) -> float:
        return sum(f.beta_gops for f in self.functions if f.in_sat)

    def coefficients(self, arch: ArchKind) -> tuple[float, float]:
        """(kappa, beta) totals for the given architecture."""
        if arch is ArchKind.ONBOARD_GNB:
            return self.kappa_all, self.beta_all
        return self.kappa_sat, self.beta_sat


@dataclass
class Assignment:
    """Per-user decision: admission flag, architecture, allocated bandwidth."""

    admitted: bool = False
    arch: Optional[ArchKind] = None
    bandwidth_hz: float = 0.0


class SlotSolution:
    """The orchestrator's output for one slot.

    The container itself is permissive (the feasibility checker treats
    constraint violations as data, so malformed combinations must be
    representable); solvers are expected to produce solutions that pass
    :func:`check_feasibility`.
    """

    def __init__(self, user_ids: Iterable[int]):
        self._entries: dict[int, Assignment] = {int(u): Assignment() for u in user_ids}

    @classmethod
    def reject_all(cls, users: Sequence[UserDemand]) -> "SlotSolution":
        return cls(u.id for u in users)

    def admit(self, user_id: int, arch: ArchKind, bandwidth_hz: float) -> None:
        self._entries[user_id] = Assignment(True, arch, float(bandwidth_hz))

    def reject(self, user_id: int) -> None:
        self._entries[user_id] = Assignment()

    def set_entry(self, user_id: int, entry: Assignment) -> None:
        self._entries[user_id] = entry

    def entry(self, user_id: int) -> Assignment:
        return self._entries[user_id]

    def user_ids(self) -> list[int]:
        return sorted(self._entries)

    def admitted_ids(self) -> list[int]:
        return [u for u in sorted(self._entries) if self._entries[u].admitted]

    @property
    def n_admitted(self) -> int:
        return sum(1 for e in self._entries.values() if e.admitted)

    def total_bandwidth_hz(self) -> float:
        # Eq.-style budget: every allocated Hz counts, admitted or not.
        return sum(e.bandwidth_hz for e in self._entries.values())

    def copy(self) -> "SlotSolution":
        out = SlotSolution(self._entries)
        for uid, e in self._entries.items():
            out._entries[uid] = Assignment(e.admitted, e.arch, e.bandwidth_hz)
        return out

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SlotSolution):
            return NotImplemented
        return self._entries == other._entries

    def __repr__(self) -> str:
        return f"SlotSolution(admitted={self.n_admitted}/{len(self._entries)})"


# Violation kind identifiers used in FeasibilityReport.
V_DELAY = "delay"
V_THROUGHPUT = "throughput"
V_ASSOCIATION = "association"
V_BANDWIDTH_CAP = "bandwidth-cap"
V_COMPUTE_CAP = "compute-cap"
V_QUEUE_STABILITY = "queue-stability"


@dataclass(frozen=True)
class Violation:
    kind: str
    user_id: Optional[int] = None


@dataclass
class FeasibilityReport:
    """Outcome of evaluating every constraint for a given solution.

    ``latency_s`` covers admitted users only (infinite when the shared queue
    is unstable); ``rate_bps`` covers every user at its allocated bandwidth.
    """

    latency_s: dict[int, float]
    rate_bps: dict[int, float]
    violations: list[Violation]

    @property
    def feasible(self) -> bool:
        return not self.violations


def achievable_rate(bandwidth_hz: float, snr_linear: float) -> float:
    """Shannon-style service-link rate w*log2(1+snr), in bits/s."""
    if bandwidth_hz < 0:
        raise ValueError("bandwidth must be >= 0")
    if snr_linear <= 0:
        raise ValueError("snr must be > 0")
    return bandwidth_hz * math.log2(1.0 + snr_linear)


def transmission_delay(distance_m: float, bandwidth_hz: float, snr_linear: float,
                       packet_bits: float) -> float:
    """Propagation plus data transfer time for one packet, in seconds."""
    if bandwidth_hz <= 0:
        raise ValueError("rate undefined: bandwidth must be > 0")
    rate = achievable_rate(bandwidth_hz, snr_linear)
    return distance_m / SPEED_OF_LIGHT + packet_bits / rate


def per_user_cost(arch: ArchKind, bandwidth_hz: float, cost_model: CostModel) -> float:
    """On-board computational cost of serving one user, in GOPS."""
    if bandwidth_hz < 0:
        raise ValueError("bandwidth must be >= 0")
    kappa, beta = cost_model.coefficients(arch)
    return kappa * (bandwidth_hz / 1e6) + beta


def aggregate_load(solution: SlotSolution, cost_model: CostModel) -> float:
    """Total on-board load from all admitted users, in GOPS."""
    total = 0.0
    for uid in solution.user_ids():
        e = solution.entry(uid)
        if e.admitted and e.arch is not None:
            total += per_user_cost(e.arch, e.bandwidth_hz, cost_model)
    return total


def queuing_delay(lambda_gops: float, config: SatelliteConfig) -> float:
    """M/M/1 sojourn time of one job of ``job_gop`` Gop, in seconds."""
    if lambda_gops < 0:
        raise ValueError("load must be >= 0")
    mu = config.c_cap
    if lambda_gops >= mu:
        raise QueueUnstableError(
            f"queue unstable: load {lambda_gops:.1f} GOPS >= capacity {mu:.1f} GOPS")
    return config.job_gop / (mu - lambda_gops)


def processing_delay(arch: ArchKind, lambda_gops: float, config: SatelliteConfig) -> float:
    """Queueing delay plus the F1 round trip when the DU split is used."""
    delay = queuing_delay(lambda_gops, config)
    if arch is ArchKind.ONBOARD_GNB_DU:
        delay += config.t_f1
    return delay


def end_to_end_latency(user: UserDemand, slot: int, solution: SlotSolution,
                       config: SatelliteConfig, cost_model: CostModel) -> float:
    """Total latency of an admitted user, coupled to the whole solution.

    The queueing term depends on the aggregate load of every admitted user,
    so a user's latency changes when anyone else's allocation does.
    """
    entry = solution.entry(user.id)
    if not entry.admitted or entry.arch is None:
        raise ValueError(f"user {user.id} is not admitted")
    lam = aggregate_load(solution, cost_model)
    t_tx = transmission_delay(user.distance_at(slot), entry.bandwidth_hz,
                              user.snr_at(slot), config.s_p)
    return t_tx + processing_delay(entry.arch, lam, config)


def min_bandwidth(r_min: float, snr_linear: float, tolerance_hz: float = 1e4,
                  max_hz: Optional[float] = None) -> float:
    """Smallest bandwidth on the tolerance grid meeting the rate demand.

    Binary search over grid indices anchored at 0 Hz; the exact solution is
    r_min/log2(1+snr) and the result lies within one grid step above it.
    Raises ThroughputUnsatisfiableError when no grid point <= ``max_hz`` works.
    """
    if r_min <= 0:
        raise ValueError("r_min must be > 0")
    if snr_linear <= 0:
        raise ValueError("snr must be > 0")
    if tolerance_hz <= 0:
        raise ValueError("tolerance must be > 0")

    eff = math.log2(1.0 + snr_linear)   # bits/s per Hz

    if max_hz is None:
        hi = math.ceil(r_min / (eff * tolerance_hz)) + 1
    else:
        hi = math.floor(max_hz / tolerance_hz)
        if hi * tolerance_hz * eff < r_min:
            raise ThroughputUnsatisfiableError(
                f"rate {r_min:.0f} bits/s needs more than {max_hz:.0f} Hz")

    lo = 0  # rate(0) = 0 < r_min, so lo is always infeasible
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if mid * tolerance_hz * eff >= r_min:
            hi = mid
        else:
            lo = mid
    return hi * tolerance_hz


def check_feasibility(solution: SlotSolution, slot: int, users: Sequence[UserDemand],
                      config: SatelliteConfig, cost_model: CostModel) -> FeasibilityReport:
    """Evaluate every constraint for the given admission pattern.

    Violations are data, not errors; each (kind, user) pair is reported at
    most once. With an unstable queue, admitted users' latencies are infinite
    and therefore also violate their delay budgets.
    """
    ids = {u.id for u in users}
    if set(solution.user_ids()) != ids:
        raise ValueError("solution shape does not match the user set")

    violations: list[Violation] = []
    latency: dict[int, float] = {}
    rate: dict[int, float] = {}

    lam = aggregate_load(solution, cost_model)
    mu = config.c_cap
    stable = lam < mu
    if not stable:
        violations.append(Violation(V_QUEUE_STABILITY))
    if lam > config.c_cap * (1.0 + CAP_REL_TOL):
        violations.append(Violation(V_COMPUTE_CAP))
    if solution.total_bandwidth_hz() > config.b_s * (1.0 + CAP_REL_TOL):
        violations.append(Violation(V_BANDWIDTH_CAP))

    for user in sorted(users, key=lambda u: u.id):
        e = solution.entry(user.id)
        rate[user.id] = achievable_rate(e.bandwidth_hz, user.snr_at(slot))

        associated = e.admitted and e.arch is not None and e.bandwidth_hz > 0
        idle = (not e.admitted) and e.arch is None and e.bandwidth_hz == 0
        if not (associated or idle):
            violations.append(Violation(V_ASSOCIATION, user.id))

        if not e.admitted:
            continue
        if rate[user.id] < user.r_min:
            violations.append(Violation(V_THROUGHPUT, user.id))
        if e.arch is None or e.bandwidth_hz <= 0:
            latency[user.id] = math.inf
        elif not stable:
            latency[user.id] = math.inf
        else:
            t_tx = transmission_delay(user.distance_at(slot), e.bandwidth_hz,
                                      user.snr_at(slot), config.s_p)
            latency[user.id] = t_tx + processing_delay(e.arch, lam, config)
        if latency[user.id] > user.t_max:
            violations.append(Violation(V_DELAY, user.id))

    return FeasibilityReport(latency_s=latency, rate_bps=rate, violations=violations)
