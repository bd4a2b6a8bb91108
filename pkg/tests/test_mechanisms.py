"""Payment formulas, allocation, and the stage-vectorized simulation engine."""

import numpy as np
import pytest

from auctionlab import (
    ConfigError,
    ContractViolation,
    DebtController,
    MarketConfig,
    MechanismConfig,
    TruthfulAgent,
    cfp_payment,
    cpa_offline_payment,
    generate_market,
    pacing_offline_payment,
    rank_and_allocate,
    ranking_rule_violations,
    ranking_score,
    register_ranking_rule,
    run_auction,
    sample_round,
    stage_of,
    write_rounds_csv,
    write_summary_csv,
)
from auctionlab.mechanisms import RANKING_RULES, ROUNDS_CSV_HEADER, SUMMARY_CSV_HEADER, _stage_allocation


def _market(**kw):
    base = dict(
        num_bidders=4,
        num_rounds=60,
        num_slots=2,
        stage_plan=(20, 20, 20),
        ctr_range=(0.4, 0.9),
        cvr_range=(0.1, 0.2),
        value_range=(1.0, 3.0),
        tcpa_range=(1.0, 4.0),
        seed=11,
    )
    base.update(kw)
    return generate_market(MarketConfig(**base))


def _truthful(market):
    return [TruthfulAgent() for _ in range(market.num_bidders)]


def test_payment_formula_values():
    assert ranking_score(2.0, 0.3, 0.05) == pytest.approx(0.03, abs=1e-17)
    assert cfp_payment(2.0, 1, 0.05) == 0.1
    assert cfp_payment(2.0, 0, 0.05) == 0.0
    assert cpa_offline_payment(1, 2.0) == 2.0
    assert cpa_offline_payment(0, 2.0) == 0.0
    assert pacing_offline_payment(1, 10, 100, 2.0) == 0.2
    assert pacing_offline_payment(0, 10, 100, 2.0) == 0.0
    with pytest.raises(ContractViolation):
        pacing_offline_payment(1, 5, 0, 2.0)


def test_rank_and_allocate_order_and_ties():
    x = rank_and_allocate(np.array([3.0, 1.0, 2.0]), 2)
    assert x[0, 0] == 1 and x[2, 1] == 1 and x.sum() == 2
    # Ties go to the lowest bidder index.
    x = rank_and_allocate(np.array([2.0, 2.0, 1.0]), 2)
    assert x[0, 0] == 1 and x[1, 1] == 1
    # Zero or negative scores never win a slot.
    assert rank_and_allocate(np.array([0.0, -1.0]), 2).sum() == 0
    x = rank_and_allocate(np.array([1.0, 0.0, -1.0]), 3)
    assert x[0, 0] == 1 and x.sum() == 1
    # More slots than bidders.
    assert rank_and_allocate(np.array([1.0, 2.0]), 5).sum() == 2


def test_stage_allocation_matches_scalar_rule():
    rng = np.random.Generator(np.random.PCG64(3))
    scores = rng.uniform(-0.2, 1.0, size=(50, 6))
    winner, valid = _stage_allocation(scores, 3)
    for n in range(50):
        x = rank_and_allocate(scores[n], 3)
        ref = np.zeros((6, 3), dtype=np.uint8)
        for k in range(3):
            if valid[n, k]:
                ref[winner[n, k], k] = 1
        np.testing.assert_array_equal(x, ref)


def test_ranking_rule_registry():
    assert ranking_rule_violations(RANKING_RULES["expected_spend"]) == 0
    assert ranking_rule_violations(lambda b, ctr, cvr: -b) > 0
    register_ranking_rule("test_rule", lambda b, ctr, cvr: b * ctr)
    try:
        assert MechanismConfig("CFP", ranking="test_rule").ranking == "test_rule"
    finally:
        del RANKING_RULES["test_rule"]


def test_mechanism_config_validation_and_labels():
    assert MechanismConfig("CFP").label == "CFP"
    assert MechanismConfig("DFP", controller="debt").label == "DFP:debt"
    assert MechanismConfig("DFP", controller="oracle").label == "DFP:oracle"
    with pytest.raises(ConfigError):
        MechanismConfig("SECOND_PRICE")
    with pytest.raises(ConfigError):
        MechanismConfig("CFP", ranking="nope")
    with pytest.raises(ConfigError):
        MechanismConfig("DFP")
    with pytest.raises(ConfigError):
        MechanismConfig("CFP", controller="debt")


def test_single_round_cfp_composition():
    market = generate_market(
        MarketConfig(
            num_bidders=1,
            num_rounds=1,
            num_slots=1,
            stage_plan=(1,),
            ctr_range=(1.0, 1.0),
            cvr_range=(0.05, 0.05),
            value_range=(1.0, 1.0),
            tcpa_range=(2.0, 2.0),
            seed=0,
        )
    )
    result = run_auction(market, MechanismConfig("CFP"), _truthful(market))
    led = result.ledgers[0]
    assert led.clicks == 1
    assert led.payment == 0.1
    assert result.rounds.payment[0] == 0.1


def _reference_cfp(market):
    """Per-round scalar re-simulation of a truthful CFP run."""
    cfg = market.config
    M, K, T = cfg.num_bidders, cfg.num_slots, len(cfg.stage_plan)
    bids = market.tcpa.copy()
    clicks = np.zeros((T, M))
    convs = np.zeros((T, M))
    pays = np.zeros((T, M))
    e_clicks = np.zeros((T, M))
    value = np.zeros((T, M))
    flat = []
    for n in range(cfg.num_rounds):
        t = stage_of(n, cfg.stage_plan)
        scores = np.array(
            [ranking_score(bids[m], market.ctr[n, m, 0], market.cvr[n, m]) for m in range(M)]
        )
        x = rank_and_allocate(scores, K)
        out = sample_round(market, n, x)
        for k in range(K):
            holders = np.nonzero(x[:, k])[0]
            if holders.size == 0:
                continue
            m = int(holders[0])
            y = int(out.click[m, k])
            z = int(out.conversion[m, k])
            p = cfp_payment(float(bids[m]), y, float(market.cvr[n, m]))
            clicks[t, m] += y
            convs[t, m] += z
            pays[t, m] += p
            e_clicks[t, m] += market.ctr[n, m, k]
            value[t, m] += market.value[n, m] * z
            flat.append((n, t, m, k, float(scores[m]), y, z, p, float(bids[m])))
    return clicks, convs, pays, e_clicks, value, flat


def test_engine_matches_per_round_reference():
    market = _market(seed=17)
    result = run_auction(market, MechanismConfig("CFP"), _truthful(market))
    clicks, convs, pays, e_clicks, value, flat = _reference_cfp(market)
    np.testing.assert_array_equal(result.stage_clicks, clicks)
    np.testing.assert_array_equal(result.stage_conversions, convs)
    np.testing.assert_allclose(result.stage_payments, pays, rtol=0, atol=1e-12)
    np.testing.assert_allclose(result.stage_expected_clicks, e_clicks, rtol=0, atol=1e-12)
    np.testing.assert_allclose(result.stage_value, value, rtol=0, atol=1e-12)
    r = result.rounds
    assert r.round.size == len(flat)
    for i, (n, t, m, k, score, y, z, p, b) in enumerate(flat):
        assert (int(r.round[i]), int(r.stage[i]), int(r.bidder[i]), int(r.slot[i])) == (n, t, m, k)
        assert (int(r.click[i]), int(r.conversion[i])) == (y, z)
        assert r.score[i] == pytest.approx(score, abs=1e-15)
        assert r.payment[i] == pytest.approx(p, abs=1e-15)
        assert r.bid[i] == b


def test_outcome_stream_invariant_across_mechanisms():
    market = _market(seed=23)
    runs = [
        run_auction(market, MechanismConfig("CFP"), _truthful(market)),
        run_auction(market, MechanismConfig("CPA_OFFLINE"), _truthful(market)),
        run_auction(market, MechanismConfig("PACING_OFFLINE"), _truthful(market)),
        run_auction(market, MechanismConfig("DFP", controller="debt"), _truthful(market), DebtController(market.tcpa)),
        run_auction(market, MechanismConfig("DFP", controller="oracle"), _truthful(market)),
    ]
    base = runs[0].rounds
    for other in runs[1:]:
        np.testing.assert_array_equal(base.click, other.rounds.click)
        np.testing.assert_array_equal(base.conversion, other.rounds.conversion)
        np.testing.assert_array_equal(base.bidder, other.rounds.bidder)
        np.testing.assert_array_equal(base.round, other.rounds.round)


def test_cfp_pays_bid_times_cvr_on_clicks():
    market = _market(seed=29)
    result = run_auction(market, MechanismConfig("CFP"), _truthful(market))
    r = result.rounds
    cvr_at = market.cvr[r.round, r.bidder]
    np.testing.assert_allclose(r.payment, r.click * r.bid * cvr_at, rtol=0, atol=0)


def test_cpa_offline_pays_tcpa_per_conversion():
    market = _market(seed=31)
    result = run_auction(market, MechanismConfig("CPA_OFFLINE"), _truthful(market))
    r = result.rounds
    np.testing.assert_array_equal(r.payment, r.conversion * market.tcpa[r.bidder])
    np.testing.assert_allclose(
        result.stage_payments, result.stage_conversions * market.tcpa[None, :], rtol=0, atol=0
    )


def test_pacing_offline_constant_per_click_price():
    market = _market(seed=37)
    result = run_auction(market, MechanismConfig("PACING_OFFLINE"), _truthful(market))
    r = result.rounds
    assert np.all(r.payment[r.click == 0] == 0)
    for m in range(market.num_bidders):
        mine = (r.bidder == m) & (r.click == 1)
        if not mine.any():
            continue
        prices = np.unique(r.payment[mine])
        assert prices.size == 1
        total_z = r.conversion[mine].sum()
        assert r.payment[mine].sum() == pytest.approx(total_z * market.tcpa[m], abs=1e-9)
    # Stage payment table was repriced consistently with the rounds table.
    for t in range(result.num_stages):
        in_stage = r.stage == t
        for m in range(market.num_bidders):
            mine = in_stage & (r.bidder == m)
            assert result.stage_payments[t, m] == pytest.approx(r.payment[mine].sum(), abs=1e-12)


def test_oracle_settles_each_stage_exactly():
    market = _market(seed=41)
    result = run_auction(market, MechanismConfig("DFP", controller="oracle"), _truthful(market))
    target = result.stage_conversions * market.tcpa[None, :]
    has_clicks = result.stage_clicks > 0
    np.testing.assert_allclose(
        result.stage_payments[has_clicks], target[has_clicks], rtol=0, atol=1e-12
    )
    assert np.all(result.stage_payments[~has_clicks] == 0)


def test_debt_run_respects_budget_identity():
    market = _market(seed=43)
    ctrl = DebtController(market.tcpa)
    result = run_auction(market, MechanismConfig("DFP", controller="debt"), _truthful(market), ctrl)
    assert np.all(result.rounds.payment >= 0)
    assert np.all(result.rounds.payment[result.rounds.click == 0] == 0)
    # Payments only move through the controller's clamp, never above the cap.
    assert np.all(result.rounds.payment <= 10 * market.tcpa[result.rounds.bidder] + 1e-12)


class _NegativeController:
    def begin_stage(self, stage, expected_clicks, expected_conversions, bids, stage_start, stage_len):
        pass

    def on_click(self, bidder, round_index, cvr, expected_remaining_clicks):
        return -1.0

    def end_stage(self, visible_conversions):
        pass


class _RecordingAgent:
    """Truthful bidder that logs every stage_update call."""

    def __init__(self):
        self.calls = []

    def initial_bid(self, tcpa):
        return tcpa

    def stage_update(self, bid, tcpa, ratio, paid):
        self.calls.append((bid, tcpa, ratio, paid))
        return bid


def test_negative_controller_payment_rejected():
    market = _market(seed=47, ctr_range=(0.9, 0.9), cvr_range=(0.1, 0.1))
    with pytest.raises(ContractViolation):
        run_auction(
            market, MechanismConfig("DFP", controller="debt"), _truthful(market), _NegativeController()
        )


def test_online_dfp_requires_controller_instance():
    market = _market()
    with pytest.raises(ContractViolation):
        run_auction(market, MechanismConfig("DFP", controller="debt"), _truthful(market))


def test_agent_count_mismatch_rejected():
    market = _market()
    with pytest.raises(ContractViolation):
        run_auction(market, MechanismConfig("CFP"), [TruthfulAgent()])


def test_stage_update_feed_matches_checkpoint_accounting():
    market = _market(seed=53)
    agents = [_RecordingAgent() for _ in range(market.num_bidders)]
    result = run_auction(market, MechanismConfig("CFP"), agents)
    for m, agent in enumerate(agents):
        assert len(agent.calls) == result.num_stages
        for t, (bid, tcpa, ratio, paid) in enumerate(agent.calls):
            visible = result.stage_conversions[: t + 1, m].sum()
            paid_cum = result.stage_payments[: t + 1, m].sum()
            assert tcpa == market.tcpa[m]
            assert paid == (paid_cum > 0)
            if visible < 1:
                assert ratio is None
            elif paid_cum == 0:
                assert ratio == np.inf
            else:
                assert ratio == pytest.approx(visible * tcpa / paid_cum, abs=1e-15)


def test_withdrawn_flags_zero_final_bids():
    market = _market(seed=59)

    class ZeroAgent:
        def initial_bid(self, tcpa):
            return 0.0

        def stage_update(self, bid, tcpa, ratio, paid):
            return bid

    result = run_auction(market, MechanismConfig("CFP"), [ZeroAgent() for _ in range(4)])
    assert result.withdrawn.all()
    assert result.rounds.round.size == 0
    truthful = run_auction(market, MechanismConfig("CFP"), _truthful(market))
    assert not truthful.withdrawn.any()


def test_rounds_and_summary_csv(tmp_path):
    market = _market(seed=61)
    result = run_auction(market, MechanismConfig("CFP"), _truthful(market))
    rounds_path = str(tmp_path / "rounds.csv")
    summary_path = str(tmp_path / "summary.csv")
    write_rounds_csv(result, rounds_path)
    write_summary_csv(result, summary_path)

    lines = open(rounds_path).read().splitlines()
    assert lines[0] == ROUNDS_CSV_HEADER
    assert len(lines) == 1 + result.rounds.round.size
    fields = lines[1].split(",")
    assert int(fields[0]) == result.rounds.round[0]
    assert float(fields[7]) == result.rounds.payment[0]

    lines = open(summary_path).read().splitlines()
    assert lines[0] == SUMMARY_CSV_HEADER
    assert len(lines) == 1 + market.num_bidders
    for m, line in enumerate(lines[1:]):
        fields = line.split(",")
        led = result.ledgers[m]
        assert int(fields[0]) == m
        assert float(fields[1]) == led.tcpa
        assert int(fields[4]) == led.clicks
        assert float(fields[9]) == led.payment
        assert fields[11] == "0"
