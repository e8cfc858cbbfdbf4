"""Adaptive two-stage orchestration: congestion scoring, a cost-minimizing
solver for uncongested slots, and an admission-maximizing solver for
congested ones.

All solvers are pure and re-entrant; the only clock used is a monotonic one
for the optional wall-clock budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from time import perf_counter
from typing import Mapping, Optional, Sequence

from .model import (
    ArchKind,
    CompressionInsufficientError,
    CostModel,
    QueueUnstableError,
    SatelliteConfig,
    SlotSolution,
    ThroughputUnsatisfiableError,
    UserDemand,
    V_DELAY,
    aggregate_load,
    check_feasibility,
    min_bandwidth,
    per_user_cost,
)

BRANCH_CEO = "ceo"
BRANCH_CEO_THEN_SMO = "ceo_then_smo"
BRANCH_SMO = "smo"

# Utilization assumed by the admission solver when estimating queueing delay
# for architecture preference; the raw optimistic estimate can exceed 1 under
# congestion, where a clamped value keeps the margin rule usable.
RHO_ESTIMATE_CLAMP = 0.95


@dataclass(frozen=True)
class TagoParams:
    """Tuning knobs of the adaptive orchestrator."""

    sigma_light: float = 0.7
    sigma_heavy: float = 1.0
    tau_strict: float = 0.010        # s, wall-clock budget in the marginal band
    tau_margin: float = 0.005        # s, delay-margin threshold for the DU split
    eta_hz: float = 5e4              # bandwidth adjustment step
    omega_eff: float = 0.6
    omega_flex: float = 0.4
    alpha_hz_per_gop: float = 625.0  # resource exchange rate (bandwidth per compute)
    t_bar: float = 0.1               # s, reference delay under congestion
    k_max_bandwidth: int = 12
    k_max_refine: int = 3
    wmin_tolerance_hz: float = 1e4

    def __post_init__(self) -> None:
        if abs(self.omega_eff + self.omega_flex - 1.0) > 1e-9:
            raise ValueError("omega_eff + omega_flex must equal 1")
        if not self.sigma_light < self.sigma_heavy:
            raise ValueError("sigma_light must be below sigma_heavy")
        for name in ("sigma_light", "sigma_heavy", "tau_strict", "tau_margin",
                     "eta_hz", "omega_eff", "omega_flex", "alpha_hz_per_gop",
                     "t_bar", "k_max_bandwidth", "k_max_refine", "wmin_tolerance_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass
class OrchestrationTrace:
    """Routing record for one orchestrated slot."""

    sigma: float
    branch: str
    ceo_iterations: int = 0
    smo_passes: int = 0
    duration_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "branch": self.branch,
            "ceo_iterations": self.ceo_iterations,
            "smo_passes": self.smo_passes,
            "duration_s": self.duration_s,
        }


@dataclass
class _UserCtx:
    """Per-slot derived quantities for one user.

    ``w_min`` is None when the rate demand cannot be met within the full
    service band; such a user can never be admitted in this slot.
    ``slack_*`` is the queueing delay the user can absorb on each
    architecture at its minimum bandwidth (negative: architecture unusable).
    """

    user: UserDemand
    w_min: Optional[float]
    eff: float
    prop_s: float
    transfer_s: float
    c_min: float              # DU cost at w_min (at the full band if unsatisfiable)
    slack_gnb: float
    slack_du: float

    @property
    def uid(self) -> int:
        return self.user.id

    def slack(self, arch: ArchKind) -> float:
        return self.slack_du if arch is ArchKind.ONBOARD_GNB_DU else self.slack_gnb


def _build_contexts(users: Sequence[UserDemand], slot: int, config: SatelliteConfig,
                    cost_model: CostModel, params: TagoParams) -> list[_UserCtx]:
    ctxs = []
    for user in sorted(users, key=lambda u: u.id):
        snr = user.snr_at(slot)
        eff = math.log2(1.0 + snr)
        prop = user.distance_at(slot) / config.light_speed
        try:
            w_min = min_bandwidth(user.r_min, snr, params.wmin_tolerance_hz,
                                  max_hz=config.b_s)
        except ThroughputUnsatisfiableError:
            ctxs.append(_UserCtx(user, None, eff, prop, math.inf,
                                 per_user_cost(ArchKind.ONBOARD_GNB_DU, config.b_s, cost_model),
                                 -math.inf, -math.inf))
            continue
        transfer = config.s_p / (w_min * eff)
        slack_gnb = user.t_max - prop - transfer
        ctxs.append(_UserCtx(
            user, w_min, eff, prop, transfer,
            per_user_cost(ArchKind.ONBOARD_GNB_DU, w_min, cost_model),
            slack_gnb, slack_gnb - config.t_f1,
        ))
    return ctxs


def congestion_score(users: Sequence[UserDemand], slot: int, config: SatelliteConfig,
                     cost_model: CostModel, params: TagoParams) -> float:
    """Most optimistic utilization if every user got its minimum footprint.

    Users whose rate demand exceeds the full band contribute the whole band
    to the bandwidth sum, which pushes the score into congested territory
    where they can be rejected cleanly.
    """
    if not users:
        return 0.0
    ctxs = _build_contexts(users, slot, config, cost_model, params)
    c_sum = sum(c.c_min for c in ctxs)
    w_sum = sum(c.w_min if c.w_min is not None else config.b_s for c in ctxs)
    return max(c_sum / config.c_cap, w_sum / config.b_s)


def delay_margin(user: UserDemand, slot: int, arch: ArchKind, rho: float,
                 config: SatelliteConfig, params: TagoParams) -> float:
    """Slack left in the delay budget under an estimated utilization ``rho``.

    Fixed delays are evaluated at the user's minimum bandwidth; returns
    -inf when the rate demand is unsatisfiable within the band.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if rho >= 1:
        raise QueueUnstableError(f"utilization estimate {rho} leaves no service margin")
    snr = user.snr_at(slot)
    eff = math.log2(1.0 + snr)
    try:
        w_min = min_bandwidth(user.r_min, snr, params.wmin_tolerance_hz, max_hz=config.b_s)
    except ThroughputUnsatisfiableError:
        return -math.inf
    t_fixed = user.distance_at(slot) / config.light_speed + config.s_p / (w_min * eff)
    if arch is ArchKind.ONBOARD_GNB_DU:
        t_fixed += config.t_f1
    t_queue = config.job_gop / (config.c_cap * (1.0 - rho))
    return user.t_max - t_fixed - t_queue


def select_architecture(margins: Mapping[ArchKind, float], costs: Mapping[ArchKind, float],
                        params: TagoParams) -> ArchKind:
    """Prefer the DU split only when its margin clears the threshold and it
    is actually cheaper; ties go to the full gNB (lower latency)."""
    if (margins[ArchKind.ONBOARD_GNB_DU] > params.tau_margin
            and costs[ArchKind.ONBOARD_GNB_DU] < costs[ArchKind.ONBOARD_GNB]):
        return ArchKind.ONBOARD_GNB_DU
    return ArchKind.ONBOARD_GNB


def cost_gradient(arch: ArchKind, bandwidth_hz: float, cost_model: CostModel) -> float:
    """d(cost)/d(bandwidth) in GOPS per Hz; constant under the affine model."""
    if bandwidth_hz < 0:
        raise ValueError("bandwidth must be >= 0")
    kappa, _ = cost_model.coefficients(arch)
    return kappa / 1e6


def gradient_compress(solution: SlotSolution, users: Sequence[UserDemand], slot: int,
                      config: SatelliteConfig, cost_model: CostModel, params: TagoParams,
                      donor_slack_s: float = 0.0) -> SlotSolution:
    """Shed bandwidth from admitted users, steepest cost gradient first.

    Each user's allocation is reduced in ``eta_hz`` quanta, never below its
    minimum-rate bandwidth nor below what its delay budget needs under the
    current load. With ``donor_slack_s`` > 0, only users whose latency slack
    exceeds it are drawn from. Raises CompressionInsufficientError when every
    floor is reached while a cap is still violated; returns an (equal) copy
    untouched when no cap is violated.
    """
    by_id = {u.id: u for u in users}
    out = solution.copy()
    lam = aggregate_load(out, cost_model)
    bw = out.total_bandwidth_hz()
    mu = config.c_cap
    lam_target = mu * (1.0 - 1e-9)  # stability requires strictly below mu

    def caps_ok() -> bool:
        return bw <= config.b_s and lam <= config.c_cap and lam < mu

    if caps_ok():
        return out

    order = sorted(
        (uid for uid in out.admitted_ids() if out.entry(uid).arch is not None),
        key=lambda uid: (-cost_gradient(out.entry(uid).arch, out.entry(uid).bandwidth_hz,
                                        cost_model), uid),
    )
    for uid in order:
        if caps_ok():
            break
        user = by_id[uid]
        entry = out.entry(uid)
        snr = user.snr_at(slot)
        eff = math.log2(1.0 + snr)
        w_cur = entry.bandwidth_hz
        floor = min_bandwidth(user.r_min, snr, params.wmin_tolerance_hz)

        if lam < mu:
            t_queue = config.job_gop / (mu - lam)
            budget = (user.t_max - user.distance_at(slot) / config.light_speed - t_queue
                      - (config.t_f1 if entry.arch is ArchKind.ONBOARD_GNB_DU else 0.0))
            if budget <= 0:
                continue  # already past its budget; reducing would make it worse
            floor = max(floor, min(w_cur, config.s_p / (budget * eff)))
            if donor_slack_s > 0:
                slack = budget - config.s_p / (w_cur * eff)
                if slack <= donor_slack_s:
                    continue

        reducible = w_cur - floor
        if reducible <= 0:
            continue
        grad = cost_gradient(entry.arch, w_cur, cost_model)
        need = max(bw - config.b_s, 0.0)
        if lam > lam_target and grad > 0:
            need = max(need, (lam - lam_target) / grad)
        take = min(reducible, math.ceil(need / params.eta_hz) * params.eta_hz)
        out.admit(uid, entry.arch, w_cur - take)
        bw -= take
        lam -= grad * take

    if not caps_ok():
        raise CompressionInsufficientError(
            f"floors reached with load {lam:.1f} GOPS / bandwidth {bw:.0f} Hz still over cap")
    return out


def _ceo(users: Sequence[UserDemand], slot: int, config: SatelliteConfig,
         cost_model: CostModel, params: TagoParams,
         time_budget: Optional[float] = None) -> tuple[bool, SlotSolution, int]:
    start = perf_counter()

    def expired() -> bool:
        return time_budget is not None and perf_counter() - start >= time_budget

    solution = SlotSolution.reject_all(users)
    if not users:
        return True, solution, 0
    if expired():
        return False, solution, 0

    ctxs = _build_contexts(users, slot, config, cost_model, params)
    if any(c.w_min is None for c in ctxs):
        return False, solution, 0

    rho = sum(c.c_min for c in ctxs) / config.c_cap
    if rho >= 1.0:
        return False, solution, 0  # even the cheapest full admission saturates the queue
    t_queue_est = config.job_gop / (config.c_cap * (1.0 - rho))

    # Phase 1: architecture per user from the delay margin at minimum bandwidth.
    for ctx in ctxs:
        margins = {
            ArchKind.ONBOARD_GNB: ctx.slack_gnb - t_queue_est,
            ArchKind.ONBOARD_GNB_DU: ctx.slack_du - t_queue_est,
        }
        costs = {
            ArchKind.ONBOARD_GNB: per_user_cost(ArchKind.ONBOARD_GNB, ctx.w_min, cost_model),
            ArchKind.ONBOARD_GNB_DU: ctx.c_min,
        }
        solution.admit(ctx.uid, select_architecture(margins, costs, params), ctx.w_min)

    if expired():
        return False, solution, 0

    # Phase 2: start from minimum bandwidths, compress if over capacity.
    lam = aggregate_load(solution, cost_model)
    if solution.total_bandwidth_hz() > config.b_s or lam >= config.c_cap:
        try:
            solution = gradient_compress(solution, users, slot, config, cost_model, params)
        except CompressionInsufficientError:
            return False, solution, 0

    # Iterative refinement: widen delay violators, rebalance from users with
    # comfortable slack when a cap is hit.
    ctx_of = {c.uid: c for c in ctxs}
    rounds = 0
    for _ in range(params.k_max_bandwidth):
        if expired():
            return False, solution, rounds
        report = check_feasibility(solution, slot, users, config, cost_model)
        if report.feasible:
            break
        delay_uids = sorted(
            (v.user_id for v in report.violations if v.kind == V_DELAY),
            key=lambda uid: (-(report.latency_s[uid] - ctx_of[uid].user.t_max), uid),
        )
        if not delay_uids:
            break  # remaining violations are not fixable by widening
        rounds += 1
        lam = aggregate_load(solution, cost_model)
        changed = False
        for uid in delay_uids:
            ctx = ctx_of[uid]
            entry = solution.entry(uid)
            if lam >= config.c_cap:
                break
            t_queue = config.job_gop / (config.c_cap - lam)
            budget = (ctx.user.t_max - ctx.prop_s - t_queue
                      - (config.t_f1 if entry.arch is ArchKind.ONBOARD_GNB_DU else 0.0))
            if budget <= 0:
                continue
            w_req = config.s_p / (budget * ctx.eff)
            if w_req <= entry.bandwidth_hz:
                continue
            steps = math.ceil((w_req - ctx.w_min) / params.eta_hz - 1e-12)
            w_new = ctx.w_min + steps * params.eta_hz
            if w_new <= entry.bandwidth_hz:
                continue
            lam += cost_gradient(entry.arch, w_new, cost_model) * (w_new - entry.bandwidth_hz)
            solution.admit(uid, entry.arch, w_new)
            changed = True
        lam = aggregate_load(solution, cost_model)
        if solution.total_bandwidth_hz() > config.b_s or lam >= config.c_cap:
            try:
                solution = gradient_compress(solution, users, slot, config, cost_model,
                                             params, donor_slack_s=2 * params.tau_margin)
            except CompressionInsufficientError:
                return False, solution, rounds
        if not changed:
            break

    report = check_feasibility(solution, slot, users, config, cost_model)
    feasible = report.feasible and solution.n_admitted == len(users)
    return feasible, solution, rounds


def ceo(users: Sequence[UserDemand], slot: int, config: SatelliteConfig,
        cost_model: CostModel, params: TagoParams,
        time_budget: Optional[float] = None) -> tuple[bool, SlotSolution]:
    """Cost-minimizing orchestration that serves every user or reports failure.

    Returns (True, solution) only when all users are admitted and every
    constraint holds; under an expired ``time_budget`` the best effort so far
    is returned with False.
    """
    feasible, solution, _ = _ceo(users, slot, config, cost_model, params, time_budget)
    return feasible, solution


def _blended_demand(ctx: _UserCtx, config: SatelliteConfig, params: TagoParams) -> float:
    w = ctx.w_min if ctx.w_min is not None else config.b_s
    return w + params.alpha_hz_per_gop * ctx.c_min


def composite_score(user: UserDemand, slot: int, e_ref: float, config: SatelliteConfig,
                    cost_model: CostModel, params: TagoParams) -> float:
    """Admission priority blending resource efficiency and demand flexibility.

    ``e_ref`` is the population mean of the blended minimum footprint
    (bandwidth plus compute at the exchange rate), which normalizes the
    efficiency term to O(1).
    """
    ctx = _build_contexts([user], slot, config, cost_model, params)[0]
    blended = _blended_demand(ctx, config, params)
    return (params.omega_eff * e_ref / blended
            + params.omega_flex * user.t_max / params.t_bar)


def population_mean_demand(users: Sequence[UserDemand], slot: int, config: SatelliteConfig,
                           cost_model: CostModel, params: TagoParams) -> float:
    """Mean blended minimum footprint over the user population."""
    if not users:
        return 0.0
    ctxs = _build_contexts(users, slot, config, cost_model, params)
    return sum(_blended_demand(c, config, params) for c in ctxs) / len(ctxs)


def _delta_cost(w_hz: float, cost_model: CostModel) -> float:
    return (per_user_cost(ArchKind.ONBOARD_GNB, w_hz, cost_model)
            - per_user_cost(ArchKind.ONBOARD_GNB_DU, w_hz, cost_model))


def _smo(users: Sequence[UserDemand], slot: int, config: SatelliteConfig,
         cost_model: CostModel, params: TagoParams) -> tuple[SlotSolution, int]:
    solution = SlotSolution.reject_all(users)
    if not users:
        return solution, 0

    ctxs = _build_contexts(users, slot, config, cost_model, params)
    ctx_of = {c.uid: c for c in ctxs}
    e_ref = sum(_blended_demand(c, config, params) for c in ctxs) / len(ctxs)
    score = {
        c.uid: (params.omega_eff * e_ref / _blended_demand(c, config, params)
                + params.omega_flex * c.user.t_max / params.t_bar)
        for c in ctxs
    }
    order = sorted(score, key=lambda uid: (-score[uid], uid))

    rho_est = min(sum(c.c_min for c in ctxs) / config.c_cap, RHO_ESTIMATE_CLAMP)
    t_queue_est = config.job_gop / (config.c_cap * (1.0 - rho_est))

    mu = config.c_cap
    lam = 0.0
    bw = 0.0
    min_slack = math.inf  # tightest queue-delay budget among admitted users

    # Phase 1: greedy admission at minimum bandwidth. The architecture
    # preference uses the conservative estimated queue so that marginal users
    # start on the full gNB and can later donate compute by switching.
    for uid in order:
        ctx = ctx_of[uid]
        if ctx.w_min is None or bw + ctx.w_min > config.b_s:
            continue
        du_ok = (ctx.slack_du - t_queue_est > params.tau_margin
                 and ctx.c_min < per_user_cost(ArchKind.ONBOARD_GNB, ctx.w_min, cost_model))
        prefer = ((ArchKind.ONBOARD_GNB_DU, ArchKind.ONBOARD_GNB) if du_ok
                  else (ArchKind.ONBOARD_GNB, ArchKind.ONBOARD_GNB_DU))
        for arch in prefer:
            sl = ctx.slack(arch)
            if sl < 0:
                continue
            lam2 = lam + per_user_cost(arch, ctx.w_min, cost_model)
            if lam2 > config.c_cap or lam2 >= mu:
                continue
            if config.job_gop / (mu - lam2) > min(min_slack, sl):
                continue
            solution.admit(uid, arch, ctx.w_min)
            lam, bw = lam2, bw + ctx.w_min
            min_slack = min(min_slack, sl)
            break

    # Phase 2: retry rejected users in priority order; admitted gNB users
    # whose budget also tolerates the DU split donate compute by switching.
    passes = 0
    for _ in range(params.k_max_refine):
        rejected = [uid for uid in order
                    if not solution.entry(uid).admitted and ctx_of[uid].w_min is not None]
        donors = sorted(
            (uid for uid in solution.admitted_ids()
             if solution.entry(uid).arch is ArchKind.ONBOARD_GNB
             and ctx_of[uid].slack_du >= 0),
            key=lambda uid: (-_delta_cost(solution.entry(uid).bandwidth_hz, cost_model), uid),
        )
        if not rejected or not donors:
            break
        passes += 1
        progress = False
        dptr = 0
        for uid in rejected:
            ctx = ctx_of[uid]
            if bw + ctx.w_min > config.b_s:
                continue
            admitted_now = False
            pool_exhausted = False
            for arch in (ArchKind.ONBOARD_GNB_DU, ArchKind.ONBOARD_GNB):
                sl_u = ctx.slack(arch)
                if sl_u < 0:
                    continue
                cost_u = per_user_cost(arch, ctx.w_min, cost_model)
                lam_t = lam + cost_u
                ms_t = min(min_slack, sl_u)
                k = dptr
                while True:
                    ok = (lam_t <= config.c_cap and lam_t < mu
                          and config.job_gop / (mu - lam_t) <= ms_t)
                    if ok or k >= len(donors):
                        break
                    v = donors[k]
                    k += 1
                    lam_t -= _delta_cost(solution.entry(v).bandwidth_hz, cost_model)
                    ms_t = min(ms_t, ctx_of[v].slack_du)
                if not ok:
                    pool_exhausted = True
                    continue
                for v in donors[dptr:k]:
                    solution.admit(v, ArchKind.ONBOARD_GNB_DU, solution.entry(v).bandwidth_hz)
                    min_slack = min(min_slack, ctx_of[v].slack_du)
                solution.admit(uid, arch, ctx.w_min)
                lam = lam_t
                bw += ctx.w_min
                min_slack = min(min_slack, sl_u)
                dptr = k
                admitted_now = True
                progress = True
                break
            if admitted_now:
                continue
            if pool_exhausted:
                break  # whole donor pool cannot save this user; end the pass
        if not progress:
            break
    return solution, passes


def smo(users: Sequence[UserDemand], slot: int, config: SatelliteConfig,
        cost_model: CostModel, params: TagoParams) -> SlotSolution:
    """Admission-maximizing orchestration; zero admissions is a valid output."""
    solution, _ = _smo(users, slot, config, cost_model, params)
    return solution


def tago(users: Sequence[UserDemand], slot: int, config: SatelliteConfig,
         cost_model: CostModel, params: TagoParams) -> tuple[SlotSolution, OrchestrationTrace]:
    """Route the slot by congestion score and solve it.

    Below the light threshold the cost solver runs to completion (falling
    back to admission maximization if it cannot serve everyone); in the
    marginal band it runs under the strict wall-clock budget; above the heavy
    threshold admission maximization runs directly.
    """
    start = perf_counter()
    sigma = congestion_score(users, slot, config, cost_model, params)
    ceo_rounds = 0
    smo_passes = 0
    if sigma < params.sigma_light:
        feasible, solution, ceo_rounds = _ceo(users, slot, config, cost_model, params)
        if feasible:
            branch = BRANCH_CEO
        else:
            solution, smo_passes = _smo(users, slot, config, cost_model, params)
            branch = BRANCH_CEO_THEN_SMO
    elif sigma <= params.sigma_heavy:
        feasible, solution, ceo_rounds = _ceo(users, slot, config, cost_model, params,
                                              time_budget=params.tau_strict)
        if feasible:
            branch = BRANCH_CEO
        else:
            solution, smo_passes = _smo(users, slot, config, cost_model, params)
            branch = BRANCH_CEO_THEN_SMO
    else:
        solution, smo_passes = _smo(users, slot, config, cost_model, params)
        branch = BRANCH_SMO
    trace = OrchestrationTrace(
        sigma=sigma,
        branch=branch,
        ceo_iterations=ceo_rounds,
        smo_passes=smo_passes,
        duration_s=perf_counter() - start,
    )
    return solution, trace
