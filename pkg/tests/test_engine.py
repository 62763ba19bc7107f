import numpy as np
import pytest

from fedplanes.aggregation import DefenseSpec
from fedplanes.attacks import AttackSpec
from fedplanes.cfgen import JointModel, JointModelSpec
from fedplanes.datasets import make_splits, standardize, synth_generate
from fedplanes.engine import local_train, run_federated
from fedplanes.metrics import select_best_round
from fedplanes.rng import RngStream


SPEC = JointModelSpec.default(2, 2, hidden=(16, 8), gen_hidden=(8,), latent_dim=4)


def tiny_split(n_clients=3, n=80, seed=0, n_attackers=0):
    stream = RngStream(seed, "fixture")
    clients = synth_generate(n_clients, n, 1.0, stream.derive("d"), n_attackers=n_attackers)
    split = make_splits(clients, stream.derive("s"), server_val_size=20)
    split, _ = standardize(split)
    return split, stream


class TestLocalTrain:
    def test_zero_epochs_identity(self):
        split, stream = tiny_split()
        model = JointModel.init(SPEC, stream.derive("init"))
        out = local_train(SPEC, model.params, split.clients[0].train, 0, stream.derive("t"))
        np.testing.assert_array_equal(out.data, model.params.data)

    def test_loss_descends(self):
        split, stream = tiny_split(seed=1)
        model = JointModel.init(SPEC, stream.derive("init"))
        shard = split.clients[0].train

        def joint_loss(params):
            m = JointModel(SPEC, params)
            zeros = np.zeros((shard.n_rows, SPEC.latent_dim))
            loss = m.task_loss(shard.features, shard.labels)
            gen, _ = m.cfgen_loss(
                shard.features, shard.labels, shard.labels[:, ::-1].copy(), (zeros, zeros)
            )
            return loss + gen

        before = joint_loss(model.params)
        out = local_train(SPEC, model.params, shard, 2, stream.derive("t"))
        assert joint_loss(out) <= before

    def test_inverted_task_ascends_ce(self):
        split, stream = tiny_split(seed=2)
        model = JointModel.init(SPEC, stream.derive("init"))
        shard = split.clients[0].train

        def task(params):
            return JointModel(SPEC, params).task_loss(shard.features, shard.labels)

        before = task(model.params)
        up = local_train(SPEC, model.params, shard, 3, stream.derive("t"), invert_task=True)
        honest = local_train(SPEC, model.params, shard, 3, stream.derive("t"))
        assert task(up) > before
        d_attack = up.data - model.params.data
        d_honest = honest.data - model.params.data
        cos = d_attack @ d_honest / (np.linalg.norm(d_attack) * np.linalg.norm(d_honest))
        assert cos < 0

    def test_empty_shard_rejected(self):
        split, stream = tiny_split()
        model = JointModel.init(SPEC, stream.derive("init"))
        empty = split.clients[0].train.take([])
        with pytest.raises(ValueError):
            local_train(SPEC, model.params, empty, 1, stream)


def small_run(defense, attack=None, rounds=4, seed=0, n_attackers=0, **kw):
    split, stream = tiny_split(seed=seed, n_attackers=n_attackers)
    attack = attack or AttackSpec(kind="none")
    return run_federated(
        SPEC, split, attack, defense, stream.derive("run"),
        rounds=rounds, epochs=1, record_test_every=2, **kw
    ), split


class TestRunFederated:
    def test_record_count_and_schema(self):
        res, split = small_run(DefenseSpec(kind="fedavg"), rounds=3)
        assert len(res.records) == 3
        rec = res.records[0]
        assert len(rec.clients) == len(split.clients)
        assert rec.server_cbp is not None
        assert rec.aggregated

    def test_single_client_fedavg_identity(self):
        split, stream = tiny_split(n_clients=1, seed=3)
        res = run_federated(
            SPEC, split, AttackSpec(kind="none"), DefenseSpec(kind="fedavg"),
            stream.derive("run"), rounds=1, epochs=1,
        )
        trained = local_train(
            SPEC,
            JointModel.init(SPEC, stream.derive("run", "init")).params,
            split.clients[0].train, 1,
            stream.derive("run", "client", 0, "round", 0),
        )
        np.testing.assert_array_equal(res.final_params.data, trained.data)

    def test_bit_reproducible(self):
        r1, _ = small_run(DefenseSpec(kind="fbs", window=3), rounds=3)
        r2, _ = small_run(DefenseSpec(kind="fbs", window=3), rounds=3)
        assert r1.params_hash == r2.params_hash
        for a, b in zip(r1.records, r2.records):
            assert a.to_dict() == b.to_dict()

    def test_fbs_weights_sum_to_one(self):
        res, _ = small_run(DefenseSpec(kind="fbs", window=2), rounds=3)
        for rec in res.records:
            assert sum(c.weight for c in rec.clients) == pytest.approx(1.0)

    def test_fbs_near_uniform_without_attack_iid(self):
        stream = RngStream(7, "fixture")
        clients = synth_generate(4, 120, 1.0, stream.derive("d"), iid=True)
        split = make_splits(clients, stream.derive("s"), server_val_size=30)
        split, _ = standardize(split)
        res = run_federated(
            SPEC, split, AttackSpec(kind="none"), DefenseSpec(kind="fbs", window=3),
            stream.derive("run"), rounds=6, epochs=1, record_test_every=0,
        )
        for rec in res.records[3:]:
            for c in rec.clients:
                assert abs(c.weight - 0.25) < 0.15

    def test_best_round_matches_select_best_round(self):
        res, _ = small_run(DefenseSpec(kind="median"), rounds=4)
        assert select_best_round(res.records) == res.best_round

    def test_defenses_run(self):
        split, stream = tiny_split(n_clients=4, seed=5)
        for kind in ("median", "trimmed_mean", "krum", "rfa"):
            res = run_federated(
                SPEC, split, AttackSpec(kind="none"), DefenseSpec(kind=kind),
                stream.derive("run", kind), rounds=2, epochs=1, record_test_every=0,
            )
            assert len(res.records) == 2

    def test_krum_output_is_a_submission(self):
        res, _ = small_run(DefenseSpec(kind="krum", krum_malicious=0), rounds=1)
        assert res.final_params is not None

    def test_label_flip_attacker_flagged(self):
        attack = AttackSpec(kind="label_flip", malicious_ids=frozenset({3}))
        res, _ = small_run(attack=attack, defense=DefenseSpec(kind="fedavg"),
                           rounds=2, n_attackers=1)
        rec = res.records[0]
        assert rec.clients[3].malicious
        assert not rec.clients[0].malicious

    def test_inverted_gradient_round0_replays_global(self):
        attack = AttackSpec(kind="inverted_gradient", malicious_ids=frozenset({3}))
        res, _ = small_run(attack=attack, defense=DefenseSpec(kind="fedavg"),
                           rounds=1, n_attackers=1)
        assert len(res.records) == 1

    def test_predictor_only_mode_no_cbp(self):
        res, _ = small_run(DefenseSpec(kind="fedavg"), rounds=2, joint_generator=False)
        assert res.records[0].server_cbp is None
        assert np.isfinite(res.records[0].server_ebp[0])

    def test_planes_off_skips_descriptors(self):
        res, _ = small_run(DefenseSpec(kind="fedavg"), rounds=2, record_planes=False)
        assert np.isnan(res.records[0].server_ebp[0])

    def test_crafted_noise_attacker_excluded_by_fbs(self):
        # huge noise makes the attacker's products collapse to ~0 weight
        attack = AttackSpec(
            kind="crafted_noise", malicious_ids=frozenset({3}), beta=50.0
        )
        res, _ = small_run(attack=attack, defense=DefenseSpec(kind="fbs", window=2),
                           rounds=3, n_attackers=1)
        last = res.records[-1]
        honest_w = [c.weight for c in last.clients[:3]]
        assert last.clients[3].weight <= min(honest_w) + 1e-9
