import numpy as np
import pytest

from distgan.data import Shard, make_gaussian_1d, make_ring, partition
from distgan.gan import NoiseSource, TrainConfig
from distgan.metrics import GENERATOR_ID
from distgan.nn import NumericError, build_network, discriminator_preset, generator_preset, preset_specs
from distgan.protocol import MaxMagnitude, RandomFraction, Threshold, audit_channel
from distgan.strategies import (
    AveragedOracle,
    GeneratorSide,
    Seeds,
    StrategyConfig,
    StrategyError,
    UserNode,
    build_and_run,
    init_seeds,
    minibatches,
    run_averaged,
)
from distgan.gan import DiscriminatorOracle

GEN, DISC = preset_specs("ring", hidden=8)
SEEDS = Seeds(0, 11, 22)


def ring_shards(users=2, per_mode=16):
    ds = make_ring(8, 2.0, 0.05, per_mode, 0)
    return [ds.samples[p.indices] for p in partition(ds, Shard(users, 0))], ds


def cfg(kind, epochs=3, users=2, **kw):
    gan = kw.pop("gan", TrainConfig(batch_real=32, batch_fake=24, lr_d=0.05, lr_g=0.05))
    policy = kw.pop("policy", MaxMagnitude() if kind == "federated" else None)
    return StrategyConfig(kind, epochs, users, gan, policy, **kw)


def final_bytes(res):
    return res.final_generator.params.values.tobytes()


def test_round_robin_single_user_equals_baseline():
    parts, _ = ring_shards(1)
    rr = build_and_run(cfg("round_robin", epochs=25, users=1), parts, GEN, DISC, SEEDS)
    base = build_and_run(cfg("baseline", epochs=25, users=1), parts, GEN, DISC, SEEDS)
    assert final_bytes(rr) == final_bytes(base)
    assert rr.discriminators[0].params.values.tobytes() == base.discriminators[0].params.values.tobytes()


@pytest.mark.parametrize("kind", ["federated", "averaged", "round_robin", "baseline"])
def test_epochs_zero_returns_initial_generator(kind):
    parts, _ = ring_shards()
    res = build_and_run(cfg(kind, epochs=0), parts, GEN, DISC, SEEDS)
    g_seed, _ = init_seeds(SEEDS.init, 2)
    assert res.metrics == [] and len(res.message_log) == 0
    assert final_bytes(res) == build_network(GEN, g_seed).params.values.tobytes()


@pytest.mark.parametrize("kind", ["federated", "averaged", "round_robin", "baseline"])
def test_deterministic(kind):
    parts, _ = ring_shards()
    a = build_and_run(cfg(kind), parts, GEN, DISC, SEEDS)
    b = build_and_run(cfg(kind), parts, GEN, DISC, SEEDS)
    assert final_bytes(a) == final_bytes(b)
    assert a.message_log.to_text() == b.message_log.to_text()
    assert [m.csv_row(False) for m in a.metrics] == [m.csv_row(False) for m in b.metrics]


@pytest.mark.parametrize("kind", ["federated", "averaged"])
def test_workers_do_not_change_results(kind):
    parts, _ = ring_shards()
    a = build_and_run(cfg(kind, workers=1), parts, GEN, DISC, SEEDS)
    b = build_and_run(cfg(kind, workers=2), parts, GEN, DISC, SEEDS)
    assert final_bytes(a) == final_bytes(b)
    assert a.message_log.to_text() == b.message_log.to_text()


@pytest.mark.parametrize("kind,users", [("federated", 2), ("averaged", 3), ("round_robin", 3), ("baseline", 1)])
def test_one_record_per_user_plus_generator(kind, users):
    parts, _ = ring_shards(users)
    res = build_and_run(cfg(kind, epochs=4, users=users), parts, GEN, DISC, SEEDS)
    for e in range(1, 5):
        rows = [m for m in res.metrics if m.epoch == e]
        assert sorted(m.user_id for m in rows) == [GENERATOR_ID] + list(range(users))


@pytest.mark.parametrize("kind", ["federated", "averaged", "round_robin"])
def test_work_units_half_of_baseline(kind):
    parts, _ = ring_shards(2)
    base = build_and_run(cfg("baseline", epochs=2, users=1), parts, GEN, DISC, SEEDS)
    res = build_and_run(cfg(kind, epochs=2), parts, GEN, DISC, SEEDS)
    base_work = max(m.work_units for m in base.metrics if m.user_id != GENERATOR_ID)
    for e in (1, 2):
        user_rows = [m for m in res.metrics if m.epoch == e and m.user_id != GENERATOR_ID]
        assert [m.work_units for m in user_rows] == [len(p) for p in parts]
        assert 2 * max(m.work_units for m in user_rows) == base_work


def test_round_robin_generator_steps():
    parts, _ = ring_shards(3)
    res = build_and_run(cfg("round_robin", users=3, g_steps=2), parts, GEN, DISC, SEEDS)
    assert all(m.work_units == 6 for m in res.metrics if m.user_id == GENERATOR_ID)


def test_d_steps_multiply_work():
    parts, _ = ring_shards(2)
    gan = TrainConfig(32, 24, 0.05, 0.05, d_steps_per_g_step=3)
    res = build_and_run(cfg("averaged", gan=gan), parts, GEN, DISC, SEEDS)
    assert {m.work_units for m in res.metrics if m.user_id == 0} == {3 * len(parts[0])}


@pytest.mark.parametrize("kind,kinds", [
    ("federated", {"GradUpload", "GlobalGradBroadcast", "FakeSampleBatch"}),
    ("averaged", {"FakeSampleBatch", "ScalarScores"}),
    ("round_robin", {"FakeSampleBatch", "ScalarScores"}),
])
def test_message_kinds_and_no_leaks(kind, kinds):
    parts, _ = ring_shards()
    res = build_and_run(cfg(kind), parts, GEN, DISC, SEEDS)
    rep = audit_channel(res.message_log, parts)
    assert rep.kinds == kinds and rep.flags == []


def test_baseline_sends_nothing():
    parts, _ = ring_shards()
    assert len(build_and_run(cfg("baseline", users=1), parts, GEN, DISC, SEEDS).message_log) == 0


@pytest.mark.parametrize("policy", [MaxMagnitude(), Threshold(1e-3), RandomFraction(0.5, 3)])
def test_federated_users_track_server(policy):
    parts, _ = ring_shards()
    res = build_and_run(cfg("federated", policy=policy, upload_fraction=0.5), parts, GEN, DISC, SEEDS)
    server, *users = res.discriminators
    for u in users:  # users apply broadcasts with lr_d, the server with lr_server = lr_d
        np.testing.assert_allclose(u.params.values, server.params.values, rtol=0, atol=1e-12)


def test_federated_fake_refresh_period():
    parts, _ = ring_shards()
    res = build_and_run(cfg("federated", epochs=5, fake_refresh=2), parts, GEN, DISC, SEEDS)
    epochs = sorted({m.epoch for m in res.message_log if m.kind.value == "FakeSampleBatch"})
    assert epochs == [1, 3, 5]


def test_config_validation():
    with pytest.raises(StrategyError):
        StrategyConfig("federated", 1, 1, policy=MaxMagnitude())
    with pytest.raises(StrategyError):
        StrategyConfig("federated", 1, 2)
    with pytest.raises(StrategyError):
        StrategyConfig("gossip", 1, 2)
    with pytest.raises(StrategyError):
        StrategyConfig("averaged", -1, 2)


def test_dimension_mismatch():
    parts, _ = ring_shards()
    bad = preset_specs("gauss1d")[1]
    with pytest.raises(StrategyError, match="inputs"):
        build_and_run(cfg("averaged"), parts, GEN, bad, SEEDS)


class Const(DiscriminatorOracle):
    def __init__(self, p):
        self.p, self.input_dim = p, 2

    def score(self, x):
        return np.full(x.shape[0], self.p), np.full(x.shape, self.p)


def test_averaged_oracle_mean():
    p, g = AveragedOracle([Const(0.2), Const(0.8)]).score(np.zeros((3, 2)))
    assert np.all(p == 0.5) and np.all(g == 0.5)


def test_averaged_identical_members_match_single():
    from distgan.gan import NetworkOracle

    net = build_network(DISC, 3)
    x = np.random.default_rng(0).standard_normal((5, 2))
    single = NetworkOracle(net).evaluate(x)
    avg = AveragedOracle([NetworkOracle(net), NetworkOracle(net), NetworkOracle(net)]).evaluate(x)
    np.testing.assert_allclose(avg[1], single[1], rtol=1e-15)


def test_minibatches_cover_once():
    rng = np.random.default_rng(0)
    b = minibatches(10, 4, rng)
    assert [len(x) for x in b] == [4, 4, 2]
    assert sorted(np.concatenate(b).tolist()) == list(range(10))


def test_user_data_private_copy():
    data = np.ones((4, 2))
    u = UserNode(0, data, build_network(DISC, 0), 0.1, 0)
    data[0, 0] = 9.0
    assert u.raw_data_for_audit[0, 0] == 1.0
    with pytest.raises(ValueError):
        u.raw_data_for_audit[0, 0] = 2.0


def test_numeric_failure_keeps_partial_metrics():
    parts, _ = ring_shards()
    huge = TrainConfig(32, 24, lr_d=1e150, lr_g=1e150)
    with pytest.raises(NumericError) as ei:
        build_and_run(cfg("averaged", epochs=50, gan=huge), parts, GEN, DISC, SEEDS)
    partial = ei.value.partial_result
    assert partial is not None and partial.kind == "averaged"


def test_baseline_gaussian_1d_converges():
    ds = make_gaussian_1d(4.0, 0.5, 512, 0)
    gen, disc = preset_specs("gauss1d", noise_dim=2)
    c = StrategyConfig("baseline", 2000, 1, TrainConfig(batch_real=512, batch_fake=256, lr_d=0.05, lr_g=0.05))
    res = build_and_run(c, [ds.samples], gen, disc, Seeds(0, 1, 2))
    from distgan.nn import forward

    out = forward(res.final_generator, NoiseSource(2, 99).draw(1000))
    assert abs(out.mean() - 4.0) < 1.0
