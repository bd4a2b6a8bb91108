"""Allocation, payment rules, and the N-round simulation engine.

Four payment rules share one allocation pipeline (top-K by ranking score):

    CFP             pays bid * cvr on every click, online.
    CPA_OFFLINE     pays tcpa on every conversion; the formula needs nothing
                    beyond the current round, so the engine fills it in-loop
                    (numerically identical to post-hoc repricing because
                    outcomes never depend on payments).
    PACING_OFFLINE  pays each click the same amount, total_conversions *
                    tcpa / total_clicks, known only after the run; the engine
                    runs the outcome pass first and reprices afterwards.
    DFP             per-click payments chosen online by a pluggable
                    controller ("debt" or an RL policy), or in hindsight by
                    the per-stage pacing oracle ("oracle").

Bids are frozen within a stage, so each stage's allocation is deterministic
given the bids at its start; the engine exploits that to vectorize scoring,
allocation, and outcome sampling stage by stage. Agent bid updates fire at
stage boundaries for CFP, CPA_OFFLINE, and online DFP. PACING_OFFLINE and
the DFP oracle price clicks only after outcomes are fixed, so those runs
keep bids static (agents receive no mid-run updates).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import ConfigError, ContractViolation
from .market import MarketLog, OutcomeSampler, sample_outcomes, stage_starts

ROUNDS_CSV_HEADER = "round,stage,bidder,slot,score,click,conversion,payment,bid"
SUMMARY_CSV_HEADER = (
    "bidder,tcpa,final_bid,impressions,clicks,conversions,expected_clicks,"
    "expected_conversions,expected_payment,payment,utility,withdrawn"
)

MECHANISM_KINDS = ("CFP", "DFP", "CPA_OFFLINE", "PACING_OFFLINE")


def ranking_score(bid: float, ctr: float, cvr: float) -> float:
    """Default ranking score: expected spend per impression, bid * ctr * cvr.

    Weakly increasing in bid, which allocation monotonicity relies on.
    """
    return bid * ctr * cvr


RANKING_RULES: dict[str, Callable] = {"expected_spend": lambda bid, ctr, cvr: bid * ctr * cvr}


def register_ranking_rule(name: str, rule: Callable) -> None:
    """Register a ranking rule; it must broadcast over numpy arrays and be
    weakly increasing in bid (checked by ranking_rule_violations in tests)."""
    RANKING_RULES[name] = rule


def ranking_rule_violations(rule: Callable, samples: int = 2000, seed: int = 0) -> int:
    """Property hook: count sampled (ctr, cvr, b1 <= b2) triples where the
    rule's score decreases as the bid rises. Registered rules must return 0."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 97]))
    ctr = rng.uniform(0.05, 1.0, samples)
    cvr = rng.uniform(0.001, 0.05, samples)
    b1 = rng.uniform(0.0, 20.0, samples)
    b2 = b1 + rng.uniform(0.0, 20.0, samples)
    return int(np.sum(rule(b2, ctr, cvr) < rule(b1, ctr, cvr)))


@dataclass(frozen=True)
class MechanismConfig:
    """Which payment rule runs, with its ranking rule and (for DFP) controller."""

    kind: str
    ranking: str = "expected_spend"
    controller: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in MECHANISM_KINDS:
            raise ConfigError(f"unknown mechanism kind {self.kind!r}, expected one of {MECHANISM_KINDS}")
        if self.ranking not in RANKING_RULES:
            raise ConfigError(f"unknown ranking rule {self.ranking!r}")
        if (self.kind == "DFP") != (self.controller is not None):
            raise ConfigError("a controller must be given for DFP and only for DFP")

    @property
    def label(self) -> str:
        return self.kind if self.controller is None else f"{self.kind}:{self.controller}"


@dataclass
class BidderLedger:
    """Per-bidder accumulators over a full run.

    expected_* accumulate x*ctr, x*ctr*cvr, and bid*x*ctr*cvr per round (the
    click, conversion, and spend expectations at the quoted bid), while
    clicks/conversions/payment hold realized totals. utility sums conversion
    values actually won.
    """

    bid: float
    tcpa: float
    impressions: int = 0
    clicks: int = 0
    conversions: int = 0
    visible_conversions: int = 0
    expected_clicks: float = 0.0
    expected_conversions: float = 0.0
    expected_payment: float = 0.0
    payment: float = 0.0
    last_nonzero_payment: float = 0.0
    utility: float = 0.0


def rank_and_allocate(scores: np.ndarray, num_slots: int) -> np.ndarray:
    """Allocate slot k to the k-th highest score; ties go to the lowest
    bidder index; zero (or negative) scores are never allocated.

    Returns a (num_bidders, num_slots) 0/1 matrix.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    x = np.zeros((scores.size, num_slots), dtype=np.uint8)
    for k in range(min(num_slots, scores.size)):
        m = order[k]
        if scores[m] <= 0.0:
            break
        x[m, k] = 1
    return x


def cfp_payment(bid: float, click: int, cvr: float) -> float:
    """Coupled first-price per-click payment: bid * click * cvr."""
    return bid * click * cvr


def cpa_offline_payment(conversion: int, tcpa: float) -> float:
    """Offline CPA billing: tcpa per conversion, nothing otherwise."""
    return conversion * tcpa


def pacing_offline_payment(click: int, total_conversions: float, total_clicks: float, tcpa: float) -> float:
    """Offline pacing: every click pays total_conversions * tcpa / total_clicks."""
    if not click:
        return 0.0
    if total_clicks <= 0:
        raise ContractViolation("pacing payment on a click requires total_clicks > 0")
    return total_conversions * tcpa / total_clicks


class OnlineController(Protocol):
    """Per-click payment policy for online DFP runs.

    The engine calls begin_stage once per stage with the stage's expected
    click/conversion schedule, on_click once per realized click in round
    order, and end_stage at the boundary with cumulative true conversions
    (the delayed feedback release).
    """

    def begin_stage(self, stage: int, expected_clicks: np.ndarray, expected_conversions: np.ndarray,
                    bids: np.ndarray, stage_start: int, stage_len: int) -> None: ...

    def on_click(self, bidder: int, round_index: int, cvr: float, expected_remaining_clicks: float) -> float: ...

    def end_stage(self, visible_conversions: np.ndarray) -> None: ...


class BidderAgent(Protocol):
    """Stage-boundary bidding behavior; see the agents module."""

    def initial_bid(self, tcpa: float) -> float: ...

    def stage_update(self, bid: float, tcpa: float, ratio: float | None, paid: bool) -> float: ...


@dataclass
class RoundsTable:
    """Columnar log, one row per displayed (round, slot)."""

    round: np.ndarray
    stage: np.ndarray
    bidder: np.ndarray
    slot: np.ndarray
    score: np.ndarray
    click: np.ndarray
    conversion: np.ndarray
    payment: np.ndarray
    bid: np.ndarray


@dataclass
class SimulationResult:
    """Outcome stream plus per-stage and final per-bidder accounting.

    Stage tables are (num_stages, num_bidders) arrays; rounds is the flat
    per-displayed-slot log in round order.
    """

    mechanism: str
    stage_plan: tuple[int, ...]
    tcpa: np.ndarray
    rounds: RoundsTable
    ledgers: list[BidderLedger]
    stage_impressions: np.ndarray
    stage_clicks: np.ndarray
    stage_conversions: np.ndarray
    stage_payments: np.ndarray
    stage_expected_clicks: np.ndarray
    stage_expected_conversions: np.ndarray
    stage_expected_payments: np.ndarray
    stage_value: np.ndarray
    bid_by_stage: np.ndarray
    final_bids: np.ndarray
    withdrawn: np.ndarray

    @property
    def num_bidders(self) -> int:
        return self.tcpa.size

    @property
    def num_stages(self) -> int:
        return len(self.stage_plan)


def _stage_allocation(scores: np.ndarray, num_slots: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized rank_and_allocate over a block of rounds.

    Returns (winner, valid): winner[n, k] is the bidder in slot k of round n
    (meaningful where valid[n, k]); zero scores never win.
    """
    order = np.argsort(-scores, axis=1, kind="stable")[:, :num_slots]
    valid = np.take_along_axis(scores, order, axis=1) > 0.0
    return order, valid


def run_auction(
    market: MarketLog,
    mech: MechanismConfig,
    agents: list[BidderAgent],
    controller: OnlineController | None = None,
) -> SimulationResult:
    """Simulate every round of the market under one mechanism.

    Per stage: score -> allocate -> sample outcomes -> pay -> accumulate; at
    each boundary conversions are released and (for CFP, CPA_OFFLINE, and
    online DFP) agents update bids from their cumulative checkpoint ratio
    conversions * tcpa / payments. PACING_OFFLINE and DFP "oracle" runs are
    repriced after outcomes are fixed and keep bids static throughout.

    Args:
        market: generated or replayed market log.
        mech: mechanism configuration; for kind DFP with controller "debt"
            or "rl", pass the controller object.
        agents: one BidderAgent per bidder.
        controller: online controller instance (DFP only, except "oracle").

    Returns:
        SimulationResult with the rounds table, stage tables, and ledgers.
    """
    cfg = market.config
    M, K = cfg.num_bidders, cfg.num_slots
    plan = cfg.stage_plan
    T = len(plan)
    if len(agents) != M:
        raise ContractViolation(f"need {M} agents, got {len(agents)}")
    oracle_run = mech.kind == "DFP" and mech.controller == "oracle"
    online_dfp = mech.kind == "DFP" and not oracle_run
    if online_dfp and controller is None:
        raise ContractViolation(f"DFP with controller {mech.controller!r} needs a controller instance")
    dynamic_bids = mech.kind in ("CFP", "CPA_OFFLINE") or online_dfp

    sampler = market.sampler()
    rule = RANKING_RULES[mech.ranking]
    tcpa = market.tcpa
    bids = np.array([float(agents[m].initial_bid(float(tcpa[m]))) for m in range(M)])

    starts = stage_starts(plan)
    shape = (T, M)
    stage_impressions = np.zeros(shape)
    stage_clicks = np.zeros(shape)
    stage_conversions = np.zeros(shape)
    stage_payments = np.zeros(shape)
    stage_e_clicks = np.zeros(shape)
    stage_e_convs = np.zeros(shape)
    stage_e_pay = np.zeros(shape)
    stage_value = np.zeros(shape)
    bid_by_stage = np.zeros(shape)
    col_round: list[np.ndarray] = []
    col_stage: list[np.ndarray] = []
    col_bidder: list[np.ndarray] = []
    col_slot: list[np.ndarray] = []
    col_score: list[np.ndarray] = []
    col_click: list[np.ndarray] = []
    col_conv: list[np.ndarray] = []
    col_pay: list[np.ndarray] = []
    col_bid: list[np.ndarray] = []

    for t in range(T):
        s0 = int(starts[t])
        n_t = plan[t]
        sl = slice(s0, s0 + n_t)
        bid_by_stage[t] = bids
        ctr0 = market.ctr[sl, :, 0]
        cvr = market.cvr[sl]
        scores = np.asarray(rule(bids[None, :], ctr0, cvr), dtype=np.float64)
        winner, valid = _stage_allocation(scores, K)

        rows, slots = np.nonzero(valid)
        bidders = winner[rows, slots]
        rounds_global = rows + s0
        y, z = sample_outcomes(market, rounds_global, bidders, slots, sampler)

        ctr_at = market.ctr[rounds_global, bidders, slots]
        cvr_at = market.cvr[rounds_global, bidders]
        # Expected quantities under the stage's fixed allocation.
        e_clicks = ctr_at
        e_convs = ctr_at * cvr_at
        e_pay = bids[bidders] * e_convs

        if mech.kind == "CFP":
            pay = y * bids[bidders] * cvr_at
        elif mech.kind == "CPA_OFFLINE":
            pay = z * tcpa[bidders]
        elif mech.kind == "PACING_OFFLINE" or oracle_run:
            pay = np.zeros(y.shape)
        else:
            # Online DFP: expected-click suffix schedule, then clicks in
            # (round, slot) order through the controller.
            x_ctr = np.zeros((n_t, M))
            x_ctr[rows, bidders] = ctr_at
            suffix = np.vstack([np.cumsum(x_ctr[::-1], axis=0)[::-1][1:], np.zeros((1, M))])
            controller.begin_stage(t, x_ctr.sum(axis=0), (x_ctr * cvr).sum(axis=0), bids, s0, n_t)
            pay = np.zeros(y.shape)
            for i in np.nonzero(y)[0]:
                m = int(bidders[i])
                pay[i] = controller.on_click(
                    m, int(rounds_global[i]), float(cvr_at[i]), float(suffix[rows[i], m])
                )
                if pay[i] < 0:
                    raise ContractViolation("controller returned a negative payment")

        np.add.at(stage_impressions[t], bidders, 1)
        np.add.at(stage_clicks[t], bidders, y)
        np.add.at(stage_conversions[t], bidders, z)
        np.add.at(stage_payments[t], bidders, pay)
        np.add.at(stage_e_clicks[t], bidders, e_clicks)
        np.add.at(stage_e_convs[t], bidders, e_convs)
        np.add.at(stage_e_pay[t], bidders, e_pay)
        np.add.at(stage_value[t], bidders, market.value[rounds_global, bidders] * z)

        col_round.append(rounds_global)
        col_stage.append(np.full(rounds_global.shape, t, dtype=np.int64))
        col_bidder.append(bidders.astype(np.int64))
        col_slot.append(slots.astype(np.int64))
        col_score.append(scores[rows, bidders])
        col_click.append(y)
        col_conv.append(z)
        col_pay.append(pay)
        col_bid.append(bids[bidders])

        # Boundary: conversions for stages <= t become visible.
        visible = stage_conversions[: t + 1].sum(axis=0)
        if online_dfp:
            controller.end_stage(visible)
        if dynamic_bids:
            paid_cum = stage_payments[: t + 1].sum(axis=0)
            new_bids = bids.copy()
            for m in range(M):
                if visible[m] >= 1.0:
                    ratio = visible[m] * tcpa[m] / paid_cum[m] if paid_cum[m] > 0 else np.inf
                else:
                    ratio = None
                new_bids[m] = agents[m].stage_update(
                    float(bids[m]), float(tcpa[m]), ratio, bool(paid_cum[m] > 0)
                )
            bids = new_bids

    rounds = RoundsTable(
        round=np.concatenate(col_round),
        stage=np.concatenate(col_stage),
        bidder=np.concatenate(col_bidder),
        slot=np.concatenate(col_slot),
        score=np.concatenate(col_score),
        click=np.concatenate(col_click).astype(np.uint8),
        conversion=np.concatenate(col_conv).astype(np.uint8),
        payment=np.concatenate(col_pay),
        bid=np.concatenate(col_bid),
    )

    if mech.kind == "PACING_OFFLINE":
        _reprice_pacing(rounds, stage_payments, tcpa)
    elif oracle_run:
        _reprice_oracle(rounds, stage_payments, stage_clicks, stage_conversions, tcpa)

    ledgers = _final_ledgers(
        rounds, tcpa, bids, stage_impressions, stage_clicks, stage_conversions,
        stage_e_clicks, stage_e_convs, stage_e_pay, stage_payments, stage_value,
    )
    return SimulationResult(
        mechanism=mech.label,
        stage_plan=plan,
        tcpa=tcpa.copy(),
        rounds=rounds,
        ledgers=ledgers,
        stage_impressions=stage_impressions,
        stage_clicks=stage_clicks,
        stage_conversions=stage_conversions,
        stage_payments=stage_payments,
        stage_expected_clicks=stage_e_clicks,
        stage_expected_conversions=stage_e_convs,
        stage_expected_payments=stage_e_pay,
        stage_value=stage_value,
        bid_by_stage=bid_by_stage,
        final_bids=bids.copy(),
        withdrawn=(bids == 0.0),
    )


def _reprice_pacing(rounds: RoundsTable, stage_payments: np.ndarray, tcpa: np.ndarray) -> None:
    """Assign every click its bidder's constant whole-run pacing price."""
    M = tcpa.size
    clicked = rounds.click == 1
    total_clicks = np.bincount(rounds.bidder[clicked], minlength=M).astype(np.float64)
    total_convs = np.bincount(rounds.bidder[clicked], weights=rounds.conversion[clicked], minlength=M)
    per_click = np.divide(total_convs * tcpa, total_clicks, out=np.zeros(M), where=total_clicks > 0)
    rounds.payment[clicked] = per_click[rounds.bidder[clicked]]
    for t in range(stage_payments.shape[0]):
        in_stage = clicked & (rounds.stage == t)
        stage_payments[t] = np.bincount(
            rounds.bidder[in_stage], weights=rounds.payment[in_stage], minlength=M
        )


def _reprice_oracle(
    rounds: RoundsTable,
    stage_payments: np.ndarray,
    stage_clicks: np.ndarray,
    stage_conversions: np.ndarray,
    tcpa: np.ndarray,
) -> None:
    """Hindsight per-stage settlement: clicks in stage t pay conversions_t * tcpa / clicks_t."""
    from .controllers import stage_pacing_oracle

    T, M = stage_payments.shape
    clicked = rounds.click == 1
    for t in range(T):
        per_click = stage_pacing_oracle(stage_clicks[t], stage_conversions[t], tcpa)
        in_stage = clicked & (rounds.stage == t)
        rounds.payment[in_stage] = per_click[rounds.bidder[in_stage]]
        stage_payments[t] = per_click * stage_clicks[t]


def _final_ledgers(
    rounds: RoundsTable,
    tcpa: np.ndarray,
    final_bids: np.ndarray,
    *tables: np.ndarray,
) -> list[BidderLedger]:
    (imps, clicks, convs, e_clicks, e_convs, e_pay, pays, value) = tables
    M = tcpa.size
    last_nonzero = np.zeros(M)
    pos = np.nonzero(rounds.payment > 0)[0]
    if pos.size:
        last_row = np.full(M, -1, dtype=np.int64)
        np.maximum.at(last_row, rounds.bidder[pos], pos)
        has = last_row >= 0
        last_nonzero[has] = rounds.payment[last_row[has]]
    return [
        BidderLedger(
            bid=float(final_bids[m]),
            tcpa=float(tcpa[m]),
            impressions=int(imps[:, m].sum()),
            clicks=int(clicks[:, m].sum()),
            conversions=int(convs[:, m].sum()),
            visible_conversions=int(convs[:, m].sum()),
            expected_clicks=float(e_clicks[:, m].sum()),
            expected_conversions=float(e_convs[:, m].sum()),
            expected_payment=float(e_pay[:, m].sum()),
            payment=float(pays[:, m].sum()),
            last_nonzero_payment=float(last_nonzero[m]),
            utility=float(value[:, m].sum()),
        )
        for m in range(M)
    ]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_rounds_csv(result: SimulationResult, path: str) -> None:
    """One row per displayed (round, slot), in round order."""
    r = result.rounds
    with open(path, "w", newline="") as fh:
        fh.write(ROUNDS_CSV_HEADER + "\n")
        for i in range(r.round.size):
            fh.write(
                f"{int(r.round[i])},{int(r.stage[i])},{int(r.bidder[i])},{int(r.slot[i])},"
                f"{_fmt(r.score[i])},{int(r.click[i])},{int(r.conversion[i])},"
                f"{_fmt(r.payment[i])},{_fmt(r.bid[i])}\n"
            )


def write_summary_csv(result: SimulationResult, path: str) -> None:
    """Final per-bidder ledger totals."""
    with open(path, "w", newline="") as fh:
        fh.write(SUMMARY_CSV_HEADER + "\n")
        for m, led in enumerate(result.ledgers):
            fh.write(
                f"{m},{_fmt(led.tcpa)},{_fmt(led.bid)},{led.impressions},{led.clicks},"
                f"{led.conversions},{_fmt(led.expected_clicks)},{_fmt(led.expected_conversions)},"
                f"{_fmt(led.expected_payment)},{_fmt(led.payment)},{_fmt(led.utility)},"
                f"{int(result.withdrawn[m])}\n"
            )
