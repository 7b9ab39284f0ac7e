import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distgan import protocol as proto
from distgan.nn import LayoutError, build_network, mlp
from distgan.protocol import (
    FakeSamples,
    GlobalGrad,
    GradUpdate,
    MaxMagnitude,
    MessageKind,
    MessageLog,
    ProtocolError,
    RandomFraction,
    ScoreReport,
    ServerState,
    Threshold,
    WeightSnapshot,
    aggregate,
    apply_global,
    audit_channel,
    select_upload,
)

SPEC = mlp([3, 4, 2], "relu", "sigmoid")  # 26 parameters
N = SPEC.param_count


def server(policy, epoch=0, lr=0.1, seed=0):
    net = build_network(SPEC, seed)
    return ServerState(SPEC, net.params.copy(), policy, lr, epoch)


# Plain-loop reference implementations; deliberately share no code with the package.

def ref_select(g, fraction):
    n = len(g)
    k = min(n, math.ceil(fraction * n))
    ranked = sorted(range(n), key=lambda i: (-abs(g[i]), i))
    keep = sorted(ranked[:k])
    return keep, [g[i] for i in keep]


def ref_max_magnitude(n, uploads):
    out = [0.0] * n
    best = [-1.0] * n
    for uid, idx, vals in sorted(uploads, key=lambda u: u[0]):
        for i, v in zip(idx, vals):
            if abs(v) > best[i]:
                best[i] = abs(v)
                out[i] = v
    return out


def ref_mean(n, uploads):
    sums = [0.0] * n
    counts = [0] * n
    for uid, idx, vals in sorted(uploads, key=lambda u: u[0]):
        for i, v in zip(idx, vals):
            sums[i] += v
            counts[i] += 1
    return [s / c if c else 0.0 for s, c in zip(sums, counts)], counts


def ref_threshold(n, uploads, tau):
    mean, _ = ref_mean(n, uploads)
    return [m if abs(m) > tau else 0.0 for m in mean]


def random_uploads(rng, epoch, users=None):
    users = users or int(rng.integers(1, 5))
    ups = []
    for u in rng.permutation(users):
        g = rng.standard_normal(N)
        if rng.random() < 0.3:  # force magnitude ties across users
            g = np.round(g, 1)
        ups.append(select_upload(g, float(rng.uniform(0.05, 1.0)), user_id=int(u), epoch=epoch))
    return ups


def as_tuples(ups):
    return [(u.user_id, u.indices.tolist(), u.values.tolist()) for u in ups]


def test_select_upload_500_cases():
    rng = np.random.default_rng(0)
    t = time.perf_counter()
    for _ in range(500):
        n = int(rng.integers(1, 60))
        g = rng.standard_normal(n)
        if rng.random() < 0.4:
            g = np.round(g)  # many ties
        f = float(rng.uniform(0.01, 1.0))
        up = select_upload(g, f)
        idx, vals = ref_select(g.tolist(), f)
        assert up.indices.tolist() == idx
        assert up.values.tolist() == vals
    assert time.perf_counter() - t < 5


@pytest.mark.parametrize("policy_kind", ["max_magnitude", "threshold", "random_fraction"])
def test_aggregate_500_cases(policy_kind):
    rng = np.random.default_rng(1)
    t = time.perf_counter()
    for case in range(500):
        epoch = int(rng.integers(0, 50))
        ups = random_uploads(rng, epoch)
        tup = as_tuples(ups)
        if policy_kind == "max_magnitude":
            got = aggregate(server(MaxMagnitude(), epoch), ups)
            assert got.tolist() == ref_max_magnitude(N, tup)
        elif policy_kind == "threshold":
            tau = float(rng.uniform(0.05, 1.5))
            got = aggregate(server(Threshold(tau), epoch), ups)
            np.testing.assert_array_equal(got, ref_threshold(N, tup, tau))
        else:
            f = float(rng.uniform(0.05, 1.0))
            seed = int(rng.integers(0, 1000))
            got = aggregate(server(RandomFraction(f, seed), epoch), ups)
            mean, counts = ref_mean(N, tup)
            contributed = [i for i in range(N) if counts[i]]
            k = min(len(contributed), math.ceil(f * len(contributed)))
            # the draw itself is part of the contract: a generator seeded by (seed, epoch)
            draw = np.random.default_rng([seed, epoch]).choice(np.array(contributed), size=k, replace=False)
            expect = [0.0] * N
            for i in draw.tolist():
                expect[i] = mean[i]
            assert got.tolist() == expect
    assert time.perf_counter() - t < 5


def test_apply_global_500_cases():
    rng = np.random.default_rng(2)
    for _ in range(500):
        lr = float(rng.uniform(1e-3, 1.0))
        s = server(MaxMagnitude(), epoch=int(rng.integers(0, 9)), lr=lr, seed=int(rng.integers(0, 99)))
        w = s.w_s.values.tolist()
        agg = rng.standard_normal(N)
        e0 = s.epoch
        apply_global(s, agg)
        assert s.w_s.values.tolist() == [wi - lr * ai for wi, ai in zip(w, agg.tolist())]
        assert s.epoch == e0 + 1


def test_select_full_fraction_keeps_everything():
    g = np.array([0.0, -1.0, 2.0])
    up = select_upload(g, 1.0)
    assert up.indices.tolist() == [0, 1, 2]


def test_select_tie_goes_to_lower_index():
    up = select_upload(np.array([1.0, -1.0, 1.0, 0.5]), 0.5)
    assert up.indices.tolist() == [0, 1]


@pytest.mark.parametrize("f", [0.0, -0.1, 1.01])
def test_select_bad_fraction(f):
    with pytest.raises(ProtocolError):
        select_upload(np.ones(4), f)


def test_max_magnitude_lowest_id_wins_tie():
    ups = [GradUpdate(1, 0, [0], [-2.0], N), GradUpdate(0, 0, [0], [2.0], N)]
    assert aggregate(server(MaxMagnitude()), ups)[0] == 2.0


def test_aggregate_rejects_wrong_epoch_and_size():
    with pytest.raises(ProtocolError, match="epoch"):
        aggregate(server(MaxMagnitude(), epoch=3), [GradUpdate(0, 2, [0], [1.0], N)])
    with pytest.raises(ProtocolError):
        aggregate(server(MaxMagnitude()), [GradUpdate(0, 0, [0], [1.0], N + 1)])


def test_grad_update_validation():
    with pytest.raises(ProtocolError):
        GradUpdate(0, 0, [2, 1], [1.0, 1.0], 5)
    with pytest.raises(ProtocolError):
        GradUpdate(0, 0, [5], [1.0], 5)


def test_apply_global_layout_mismatch():
    with pytest.raises(LayoutError):
        apply_global(server(MaxMagnitude()), np.zeros(N + 1))


def test_policy_validation():
    with pytest.raises(ProtocolError):
        Threshold(0.0)
    with pytest.raises(ProtocolError):
        RandomFraction(0.0)
    for p in (MaxMagnitude(), Threshold(0.3), RandomFraction(0.5, 4)):
        assert proto.policy_from_dict(proto.policy_to_dict(p)) == p


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40))
def test_global_grad_sparse_roundtrip(vals):
    v = np.array(vals)
    np.testing.assert_array_equal(GlobalGrad.from_dense(v).dense(), v)


def test_byte_sizes():
    assert proto.payload_bytes(GradUpdate(0, 0, [1, 3], [1.0, 2.0], 5)) == 2 * 20
    assert proto.payload_bytes(FakeSamples(np.zeros((4, 2)))) == 4 * 2 * 8 + 4 * 12
    assert proto.payload_bytes(ScoreReport(np.zeros(3), np.zeros((3, 2)))) == (3 + 6) * 8 + 3 * 12
    assert proto.payload_bytes(WeightSnapshot(np.zeros(7))) == 7 * 8 + 12


def test_message_type_checked():
    with pytest.raises(ProtocolError):
        MessageLog().send(MessageKind.GradUpload, 0, "user0", "server", FakeSamples(np.zeros((1, 2))))


def test_log_epochs_non_decreasing():
    log = MessageLog()
    log.send(MessageKind.WeightSnapshot, 2, "server", "user0", WeightSnapshot(np.zeros(1)))
    with pytest.raises(ProtocolError):
        log.send(MessageKind.WeightSnapshot, 1, "server", "user0", WeightSnapshot(np.zeros(1)))


def test_log_text_format():
    log = MessageLog()
    log.send(MessageKind.FakeSampleBatch, 1, "generator", "user0", FakeSamples(np.zeros((2, 2))))
    assert log.to_text() == "epoch,from,to,kind,bytes\n1,generator,user0,FakeSampleBatch,56\n"


def test_audit_clean_log():
    log = MessageLog()
    log.send(MessageKind.FakeSampleBatch, 1, "generator", "user0", FakeSamples(np.ones((2, 2))))
    log.send(MessageKind.ScalarScores, 1, "user0", "generator", ScoreReport(np.ones(2) / 2, np.zeros((2, 2))))
    rep = audit_channel(log, [np.full((3, 2), 7.0)])
    assert rep.flags == [] and rep.kinds == {"FakeSampleBatch", "ScalarScores"}
    assert rep.counts["FakeSampleBatch"] == 1 and rep.bytes["FakeSampleBatch"] == 56


def test_audit_flags_leaked_rows():
    real = np.array([[0.25, -1.5], [3.0, 4.0]])
    log = MessageLog()
    log.send(MessageKind.FakeSampleBatch, 1, "generator", "user0", FakeSamples(real[:1].copy()))
    assert len(audit_channel(log, [real]).flags) == 1


def test_audit_flags_user_sent_samples():
    log = MessageLog()
    log.send(MessageKind.FakeSampleBatch, 1, "user1", "server", FakeSamples(np.zeros((1, 2)), origin="user1"))
    assert len(audit_channel(log).flags) == 1


def test_replay_matches_user_params():
    from distgan.strategies import UserNode

    net = build_network(SPEC, 0)
    s = ServerState(SPEC, net.params.copy(), MaxMagnitude(), 0.1)
    users = [UserNode(u, np.zeros((4, 3)), net.copy(), 0.2, u) for u in range(2)]
    log = MessageLog()
    rng = np.random.default_rng(0)
    for e in range(3):
        agg = rng.standard_normal(N)
        apply_global(s, agg)
        proto.broadcast(s, users, agg, log, epoch=e + 1)
    for u in users:
        replay = proto.replay_user_params(net.params.values, log, u.user_id, 0.2)
        np.testing.assert_allclose(replay, u.disc.params.values, rtol=0, atol=1e-15)
