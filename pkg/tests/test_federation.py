"""Round execution: message transcripts, participation, carried state,
and the experiment driver."""

import numpy as np
import pytest

from conftest import make_shards

from fedunroll.config import ExperimentConfig
from fedunroll.errors import ProtocolViolation
from fedunroll.federation import (
    ParticipationPlan,
    RoundMessage,
    Transcript,
    full_participation,
    run_round,
    run_unrolled_experiment,
    sample_participants,
)
from fedunroll.learner import init_optimizer
from fedunroll.math_core import sse_loss
from fedunroll.unrolled_net import init_params, init_state


def round_cfg(**kw) -> ExperimentConfig:
    base = dict(seed=0, L=4, rounds=3, epochs_per_round=2)
    base.update(kw)
    return ExperimentConfig(**base)


def one_round(shards, cfg, plan=None):
    M = len(shards)
    k = shards[0].X_train.shape[1]
    params = init_params(M, k, cfg.L)
    opt = init_optimizer(params, kind=cfg.optimizer, lr=cfg.lr)
    state = init_state(M, k, seed=int(cfg.seed))
    plan = plan or full_participation(M)
    rr = run_round(shards, params, opt, state, plan, cfg, round_index=1, epoch=1)
    return rr, state, params


class TestParticipation:
    def test_full_plan(self):
        plan = full_participation(4)
        assert plan.active_ids == [1, 2, 3, 4]
        assert np.array_equal(plan.indices, np.array([0, 1, 2, 3]))

    def test_sample_size_is_ceiling(self):
        rng = np.random.default_rng(0)
        assert len(sample_participants(10, 0.5, rng).active_ids) == 5
        assert len(sample_participants(10, 0.55, rng).active_ids) == 6
        assert len(sample_participants(7, 0.5, rng).active_ids) == 4

    def test_sample_unique_and_sorted(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            plan = sample_participants(10, 0.5, rng)
            assert len(set(plan.active_ids)) == 5
            assert plan.active_ids == sorted(plan.active_ids)
            assert all(1 <= c <= 10 for c in plan.active_ids)

    def test_sample_deterministic_per_generator_state(self):
        a = sample_participants(10, 0.3, np.random.default_rng(7))
        b = sample_participants(10, 0.3, np.random.default_rng(7))
        assert a.active_ids == b.active_ids

    def test_bad_fraction(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            sample_participants(10, 0.0, rng)
        with pytest.raises(ValueError):
            sample_participants(10, 1.5, rng)


class TestTranscript:
    def test_counts_full_participation(self):
        shards = make_shards(M=5, seed=0)
        rr, _, _ = one_round(shards, round_cfg())
        c = rr.transcript.counts()
        assert c["client_vector"] == 5 * 4
        assert c["global_broadcast"] == 4
        assert c["loss_report"] == 5
        assert c["loss_sum_broadcast"] == 1
        rr.transcript.verify(n_active=5, L=4)

    def test_counts_partial_participation(self):
        shards = make_shards(M=6, seed=1)
        plan = ParticipationPlan(active_ids=[2, 5, 6], fraction=0.5)
        rr, _, _ = one_round(shards, round_cfg(), plan)
        c = rr.transcript.counts()
        assert c["client_vector"] == 3 * 4
        assert c["loss_report"] == 3
        ids = {m.client_id for m in rr.transcript.messages if m.kind == "client_vector"}
        assert ids == {2, 5, 6}

    def test_canonical_order(self):
        shards = make_shards(M=3, seed=2)
        rr, _, _ = one_round(shards, round_cfg(L=2))
        kinds = [m.kind for m in rr.transcript.messages]
        want = (
            ["client_vector"] * 3 + ["global_broadcast"]
        ) * 2 + ["loss_report"] * 3 + ["loss_sum_broadcast"]
        assert kinds == want
        layer1 = [m for m in rr.transcript.messages[:4]]
        assert [m.client_id for m in layer1] == [1, 2, 3, None]

    def test_verify_rejects_missing_message(self):
        shards = make_shards(M=3, seed=3)
        rr, _, _ = one_round(shards, round_cfg(L=2))
        t = rr.transcript
        t.messages.pop(0)
        with pytest.raises(ProtocolViolation):
            t.verify(n_active=3, L=2)

    def test_verify_rejects_reordering(self):
        shards = make_shards(M=3, seed=4)
        rr, _, _ = one_round(shards, round_cfg(L=2))
        t = rr.transcript
        t.messages[0], t.messages[3] = t.messages[3], t.messages[0]
        with pytest.raises(ProtocolViolation):
            t.verify(n_active=3, L=2)

    def test_broadcast_reconstructible_from_client_vectors(self):
        # channel purity: what the server aggregates is exactly what the
        # transcript carries
        shards = make_shards(M=4, seed=5)
        rr, _, params = one_round(shards, round_cfg())
        t = rr.transcript
        for layer in range(1, 5):
            us = np.stack([
                m.payload for m in t.messages
                if m.kind == "client_vector" and m.layer == layer
            ])
            w_msg = next(
                m.payload for m in t.messages
                if m.kind == "global_broadcast" and m.layer == layer
            )
            s = params.slot(layer)
            q = params.p[s] * np.maximum(params.gam_raw[s], 1e-6)
            w = (q / q.sum()) @ us
            assert np.array_equal(w, w_msg)

    def test_loss_reports_match_final_models(self):
        shards = make_shards(M=3, seed=6)
        rr, _, _ = one_round(shards, round_cfg())
        v_final = rr.tape.final_v()
        reports = [m for m in rr.transcript.messages if m.kind == "loss_report"]
        total = 0.0
        for m in reports:
            want = sse_loss(
                shards[m.client_id - 1].X_train,
                v_final[m.client_id - 1],
                shards[m.client_id - 1].Y_train,
            )
            assert m.payload == want
            total += want
        final = rr.transcript.messages[-1]
        assert final.kind == "loss_sum_broadcast"
        assert final.payload == pytest.approx(total, rel=1e-15)
        assert rr.loss_sum == final.payload

    def test_digest_stable_and_sensitive(self):
        m1 = RoundMessage("client_vector", 1, 1, np.array([1.0, 2.0]))
        m2 = RoundMessage("client_vector", 1, 1, np.array([1.0, 2.0]))
        m3 = RoundMessage("client_vector", 1, 1, np.array([1.0, 2.0 + 1e-12]))
        assert m1.digest() == m2.digest()
        assert m1.digest() != m3.digest()


class TestRoundStateAndLearning:
    def test_carried_state_updated_for_active_rows_only(self):
        shards = make_shards(M=5, seed=7)
        cfg = round_cfg()
        M, k = 5, 4
        params = init_params(M, k, cfg.L)
        opt = init_optimizer(params, kind=cfg.optimizer, lr=cfg.lr)
        state = init_state(M, k, seed=0)
        before = state.copy()
        plan = ParticipationPlan(active_ids=[1, 3], fraction=0.4)
        run_round(shards, params, opt, state, plan, cfg, 1, 1)
        assert not np.array_equal(state.v[0], before.v[0])
        assert not np.array_equal(state.v[2], before.v[2])
        for idle in (1, 3, 4):
            assert np.array_equal(state.v[idle], before.v[idle])
            assert np.array_equal(state.z[idle], before.z[idle])
            assert np.array_equal(state.alpha[idle], before.alpha[idle])
        assert not np.array_equal(state.w, before.w)

    def test_round_advances_parameters(self):
        shards = make_shards(M=3, seed=8)
        rr, _, params = one_round(shards, round_cfg())
        assert not np.array_equal(rr.params.rho_raw, params.rho_raw)

    def test_round_objective_value_present(self):
        shards = make_shards(M=3, seed=9)
        rr, _, _ = one_round(shards, round_cfg())
        assert np.isfinite(rr.lagrangian_final)
        assert rr.lagrangian_final > 0


class TestExperimentDriver:
    def test_record_cadence(self):
        shards = make_shards(M=3, n=30, seed=10)
        res = run_unrolled_experiment(round_cfg(rounds=6), shards)
        assert len(res.records) == 6
        assert [r.round for r in res.records] == list(range(1, 7))
        for r in res.records:
            assert r.method == "unrolled"
            assert r.loss_sum is not None
            assert r.lagrangian_final_cell is not None
            assert r.wall_ms is not None

    def test_zero_rounds_initial_evaluation(self):
        shards = make_shards(M=3, n=30, seed=11)
        res = run_unrolled_experiment(round_cfg(rounds=0), shards)
        assert len(res.records) == 1
        assert res.records[0].round == 0
        assert res.records[0].loss_sum is None

    def test_training_improves_over_initial(self):
        shards = make_shards(M=4, n=60, seed=12)
        res0 = run_unrolled_experiment(round_cfg(rounds=0, L=6), shards)
        res = run_unrolled_experiment(round_cfg(rounds=30, L=6), shards)
        assert res.mean_test_rmse < res0.mean_test_rmse

    def test_deterministic_rerun(self):
        shards = make_shards(M=3, n=30, seed=13)
        cfg = round_cfg(rounds=5)
        a = run_unrolled_experiment(cfg, shards)
        b = run_unrolled_experiment(cfg, shards)
        assert np.array_equal(a.models_raw, b.models_raw)
        for ra, rb in zip(a.records, b.records):
            assert ra.test_rmse == rb.test_rmse
            assert ra.loss_sum == rb.loss_sum

    def test_partial_participation_runs_and_covers_everyone(self):
        shards = make_shards(M=6, n=30, seed=14)
        cfg = round_cfg(rounds=12, participation=0.5, transcript=True)
        res = run_unrolled_experiment(cfg, shards)
        assert len(res.records) == 12
        seen = set()
        for t in res.transcripts:
            seen |= {m.client_id for m in t.messages if m.kind == "loss_report"}
        assert seen == {1, 2, 3, 4, 5, 6}

    def test_transcripts_collected_when_asked(self):
        shards = make_shards(M=3, n=20, seed=15)
        res = run_unrolled_experiment(round_cfg(rounds=2, transcript=True), shards)
        assert len(res.transcripts) == 2 * 2  # rounds x epochs
        res2 = run_unrolled_experiment(round_cfg(rounds=2), shards)
        assert res2.transcripts == []

    def test_federated_local_policy_trains(self):
        shards = make_shards(M=3, n=30, seed=16)
        res = run_unrolled_experiment(
            round_cfg(rounds=10, policy="federated_local"), shards
        )
        assert not res.diverged
        assert np.isfinite(res.mean_test_rmse)

    def test_grad_mode_with_minibatches_trains(self):
        shards = make_shards(M=3, n=80, seed=17)
        res = run_unrolled_experiment(
            round_cfg(rounds=10, mode="grad", batch_size=32), shards
        )
        assert not res.diverged
        assert np.isfinite(res.mean_test_rmse)

    def test_tied_parameters_train(self):
        shards = make_shards(M=3, n=30, seed=18)
        res = run_unrolled_experiment(round_cfg(rounds=5, tied=True), shards)
        assert res.params.lam_raw.shape[0] == 1
        assert not res.diverged

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_configuration_marked_not_raised(self):
        # a penalty-scaled dual step with a huge fixed penalty and a
        # plain-GD parameter update blows the iterates up quickly; the
        # driver must record the divergence instead of crashing
        shards = make_shards(M=3, n=30, seed=19)
        cfg = round_cfg(rounds=40, L=20, optimizer="gd", lr=1e6)
        res = run_unrolled_experiment(cfg, shards)
        if res.diverged:
            last = res.records[-1]
            assert not np.isfinite(last.test_rmse)
        else:
            assert np.isfinite(res.mean_test_rmse)
