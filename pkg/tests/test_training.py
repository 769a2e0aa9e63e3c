import json
import math

import numpy as np
import pytest

from mbq import autograd as ag
from mbq.coreset import CoresetPlan
from mbq.data import Dataset, normalize, synth_blobs
from mbq.model import Arch, BitRanges, BNPolicy, build_model, child_forward
from mbq.training import (
    SGD,
    MetricsRecord,
    TrainConfig,
    bn_adapt,
    calibrate_baseline,
    calibration_epochs,
    evaluate,
    joint_loss,
    train_batchwise,
    train_bitwise,
    write_metrics,
)


def blobs(n=100, sep=4.0, seed=0, k=4):
    return normalize(synth_blobs(n, 8, k, sep, seed))


def mlp(trained=(2, 8), switchable=None, policy=BNPolicy.SHARED_ALL, seed=0, k=4, widths=(16, 16)):
    ranges = BitRanges(trained, switchable or trained)
    return build_model(Arch("mlp", (8,), k, widths), ranges, policy, seed=seed)


def cfg(**kw):
    base = dict(epochs=1, batch_size=10, lr=0.05, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- config -------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_lr_schedules():
    c = TrainConfig(epochs=4, lr=1.0, lr_schedule="cosine")
    assert c.lr_at(1) == 1.0
    assert c.lr_at(3) == pytest.approx(0.5)
    s = TrainConfig(epochs=10, lr=1.0, lr_schedule="step", milestones=(3, 6), gamma=0.1)
    assert [s.lr_at(e) for e in (1, 3, 4, 7)] == pytest.approx([1.0, 1.0, 0.1, 0.01])
    assert TrainConfig(lr=0.3, lr_schedule="constant").lr_at(9) == 0.3


# -- joint objective ------------------------------------------------------------


def test_joint_loss_singleton_and_sum():
    m = mlp((2, 8))
    data = blobs(20)
    x, y = data.images, data.labels
    total, parts = joint_loss(m, x, y, [8], training=False)
    single = ag.softmax_cross_entropy(child_forward(m, 8, x), y)
    assert float(total.data) == float(single.data)
    total, parts = joint_loss(m, x, y, [2, 8], training=False)
    assert float(total.data) == pytest.approx(parts[2] + parts[8], rel=1e-6)
    l2 = float(ag.softmax_cross_entropy(child_forward(m, 2, x), y).data)
    assert parts[2] == pytest.approx(l2, rel=1e-6)
    with pytest.raises(ValueError):
        joint_loss(m, x, y, [])


def test_joint_gradient_is_sum_of_per_bit_gradients():
    m = mlp((2, 8))
    data = blobs(20)
    x, y = data.images, data.labels
    with ag.precision(np.float64):
        for t in m.theta.values():
            t.data = t.data.astype(np.float64)
        total, _ = joint_loss(m, x, y, [2, 8], training=False)
        joint = ag.backward(total)
        separate = {}
        for b in (2, 8):
            g = ag.backward(ag.softmax_cross_entropy(child_forward(m, b, x), y))
            for t, v in g.items():
                separate[t] = separate.get(t, 0) + v
    for name, t in m.theta.items():
        np.testing.assert_allclose(joint[t], separate[t], rtol=1e-6, atol=1e-12)


# -- schedules ------------------------------------------------------------------


def test_batchwise_full_data_step_count():
    m = mlp((2, 8))
    calls = []
    train_batchwise(m, blobs(100), cfg(), step_hook=lambda e, s, g: calls.append(sorted(g)))
    assert len(calls) == 10
    assert all(c == [2, 8] for c in calls)


def test_batchwise_coreset_step_count():
    m = mlp((2, 8))
    rng = np.random.default_rng(0)
    sets = {b: [np.sort(rng.choice(100, 20, replace=False))] for b in (2, 8)}
    plan = CoresetPlan([2, 8], 0.8, 0.5, 1e-3, 0, 100, 1, sets)
    calls, seen = [], {2: [], 8: []}

    def probe(epoch, bit, idx, err):
        seen[bit].extend(idx.tolist())

    _, records = train_batchwise(m, blobs(100), cfg(), plan=plan, probe=probe,
                                 step_hook=lambda e, s, g: calls.append(s))
    assert len(calls) == 2 == math.ceil(0.2 * 100 / 10)
    for b in (2, 8):
        assert sorted(seen[b]) == sets[b][0].tolist()
    assert {r.samples_seen for r in records} == {20}


def test_batchwise_cycles_shorter_streams():
    m = mlp((2, 8))
    sets = {2: [np.arange(30)], 8: [np.arange(10)]}
    plan = CoresetPlan([2, 8], 0.0, 0.5, 1e-3, 0, 100, 1, sets)
    steps = []
    train_batchwise(m, blobs(100), cfg(), plan=plan, step_hook=lambda e, s, g: steps.append(s))
    assert len(steps) == 3


def test_bitwise_schedule_and_probe_accounting():
    m = mlp((2, 8))
    order = []
    _, recs = train_bitwise(m, blobs(100), cfg(epochs=2), probe=lambda e, b, idx, err: order.append((e, b, len(idx))))
    per_epoch = [(b, n) for e, b, n in order if e == 1]
    assert [b for b, _ in per_epoch] == [2] * 10 + [8] * 10  # bit 2 fully before bit 8
    assert sum(n for _, _, n in order) == 2 * 2 * 100


def test_bitwise_updates_count():
    m = mlp((2, 8))
    opt = SGD()
    steps = []
    original = opt.step

    def counting(params, lr):
        steps.append(1)
        original(params, lr)

    opt.step = counting
    train_bitwise(m, blobs(100), cfg(), optimizer=opt)
    assert len(steps) == 20


def test_probe_error_vectors():
    m = mlp((8,))
    data = blobs(20)
    got = {}
    train_bitwise(m, data, cfg(batch_size=20, lr=1e-9), probe=lambda e, b, idx, err: got.update(idx=idx, err=err))
    assert got["err"].shape == (20, 4)
    np.testing.assert_allclose(got["err"].sum(axis=1), 0, atol=1e-6)
    onehot = np.eye(4)[data.labels[got["idx"]]]
    p = got["err"] + onehot
    assert np.all((p >= -1e-7) & (p <= 1 + 1e-7))


def test_schemes_coincide_on_singleton_range():
    data = blobs(100)
    a, _ = train_batchwise(mlp((8,)), data, cfg(epochs=2))
    b, _ = train_bitwise(mlp((8,)), data, cfg(epochs=2))
    assert a.state_checksum() == b.state_checksum()


def test_full_precision_loss_decreases_on_blobs():
    # full-batch steps: epoch averages are then the exact objective, free of shuffle noise
    data = blobs(400, sep=6.0)
    _, recs = train_batchwise(mlp((32,)), data, cfg(epochs=30, lr=0.3, batch_size=400))
    losses = [r.loss for r in recs]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_is_reproducible():
    data = blobs(100)
    a, ra = train_batchwise(mlp(), data, cfg(epochs=2))
    b, rb = train_batchwise(mlp(), data, cfg(epochs=2))
    assert a.state_checksum() == b.state_checksum()
    strip = lambda rs: [(r.epoch, r.bit, r.loss, r.accuracy, r.samples_seen) for r in rs]
    assert strip(ra) == strip(rb)


def test_weight_decay_skips_bn_affine():
    m = mlp((32,))
    opt = SGD(momentum=0.0, weight_decay=0.5)
    gamma = m.bank("bn0", 32).gamma
    w = m.theta["fc0.weight"]
    gamma.grad = np.zeros_like(gamma.data)
    w.grad = np.zeros_like(w.data)
    w0 = w.data.copy()
    opt.step([(w, True), (gamma, False)], lr=0.1)
    np.testing.assert_array_equal(gamma.data, 1.0)
    np.testing.assert_allclose(w.data, w0 * (1 - 0.05), rtol=1e-6)


def test_metrics_json_lines(tmp_path):
    _, recs = train_batchwise(mlp(), blobs(40), cfg())
    write_metrics(recs, tmp_path / "m.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert list(rows[0]) == ["epoch", "bit", "split", "loss", "accuracy", "wall_seconds", "samples_seen"]
    assert all(0 <= r["accuracy"] <= 1 for r in rows)
    assert {r["samples_seen"] for r in rows} == {40}


# -- evaluation -----------------------------------------------------------------


def test_evaluate_memorised_toy_set():
    data = blobs(40, sep=12.0)
    m, _ = train_batchwise(mlp((32,)), data, cfg(epochs=30, lr=0.05))
    acc, _ = evaluate(m, data, 32)
    assert acc == 1.0


def test_evaluate_untrained_chance_level():
    rng = np.random.default_rng(0)
    data = Dataset(rng.standard_normal((2000, 8)), rng.integers(0, 10, 2000), 10)
    m = mlp((2, 8), k=10)
    for b in (2, 8):
        acc, loss = evaluate(m, data, b)
        assert abs(acc - 0.1) <= 0.05
        assert (acc, loss) == evaluate(m, data, b)


# -- BN adaptation --------------------------------------------------------------


def _two_pass(model, data, b, batch_size=500):
    acts = {}
    with ag.no_grad():
        for i in range(0, len(data), batch_size):
            child_forward(model, b, data.images[i : i + batch_size], training=True, update_stats=False,
                          observer=lambda site, h: acts.setdefault(site, []).append(h.astype(np.float64)))
    out = {}
    for site, chunks in acts.items():
        a = np.concatenate(chunks)
        mu = a.mean(0)
        out[site] = (mu, ((a - mu) ** 2).mean(0))
    return out


def test_bn_adapt_matches_two_pass_oracle():
    data = blobs(230)
    m, _ = train_batchwise(mlp((2, 8), (2, 3, 8), BNPolicy.PER_BIT), data, cfg(epochs=2))
    theta = m.checksum()
    bn_adapt(m, data, [2, 3, 8], batch_size=64)
    assert m.checksum() == theta
    for b in (2, 3, 8):
        oracle = _two_pass(m, data, b, batch_size=64)
        for site, (mu, var) in oracle.items():
            bank = m.bank(site, b)
            np.testing.assert_allclose(bank.running_mean, mu, rtol=1e-5, atol=1e-6)
            np.testing.assert_allclose(bank.running_var, var, rtol=1e-5)


def test_bn_adapt_constant_input():
    m = build_model(Arch("mlp", (3,), 2, (4,), keep_first_last_fp=True), BitRanges((8,), (8,)))
    data = Dataset(np.full((10, 3), 0.7), np.zeros(10, dtype=int), 2)
    bn_adapt(m, data, [8])
    h = 0.7 * m.theta["fc0.weight"].data.astype(np.float64).sum(axis=1)
    np.testing.assert_allclose(m.bank("bn0", 8).running_mean, h, rtol=1e-6)
    np.testing.assert_allclose(m.bank("bn0", 8).running_var, 0, atol=1e-10)


def test_bn_adapt_per_bit_isolation():
    m = mlp((2, 8), (2, 4, 8), BNPolicy.PER_BIT)
    before = {k: (b.running_mean.copy(), b.running_var.copy()) for k, b in m.bn_banks.items()}
    bn_adapt(m, blobs(50), [4])
    for (site, key), bank in m.bn_banks.items():
        if key == "b4":
            assert not np.array_equal(bank.running_mean, before[(site, key)][0])
        else:
            np.testing.assert_array_equal(bank.running_mean, before[(site, key)][0])
            np.testing.assert_array_equal(bank.running_var, before[(site, key)][1])


def test_bn_adapt_shared_bank_keeps_per_bit_statistics():
    data = blobs(80)
    m = mlp((2, 8), (2, 3, 8), BNPolicy.SHARED_ALL)
    bn_adapt(m, data, [2, 3, 8])
    bank = m.bank("bn1", 2)  # bn0 sits behind the full-precision first layer
    assert set(bank.bit_stats) == {2, 3, 8}
    assert not np.array_equal(bank.bit_stats[2][0], bank.bit_stats[8][0])
    oracle = _two_pass(m, data, 3)
    np.testing.assert_allclose(bank.stats_for(3)[0], oracle["bn1"][0], rtol=1e-5, atol=1e-6)


def test_bn_adapt_empty_data():
    m = mlp()
    with pytest.raises(ValueError, match="empty"):
        bn_adapt(m, Dataset(np.zeros((0, 8)), np.zeros(0, dtype=int), 4), [2])


# -- calibration baseline ------------------------------------------------------------


def test_calibration_epochs():
    assert calibration_epochs(200) == 67
    assert calibration_epochs(3) == 1


def test_calibration_requires_per_bit_policy():
    m = mlp((2, 8), (2, 3, 8), BNPolicy.HYBRID_ONE_BIT_SEPARATE)
    with pytest.raises(ValueError, match="per_bit"):
        calibrate_baseline(m, blobs(20), [3], cfg())
    m = mlp((2, 8), (2, 3, 8), BNPolicy.PER_BIT)
    with pytest.raises(ValueError, match="subset"):
        calibrate_baseline(m, blobs(20), [2], cfg())


def test_calibration_freezes_theta_and_helps_untrained_bit():
    train = normalize(synth_blobs(600, 8, 4, 3.0, seed=1))
    test = normalize(synth_blobs(600, 8, 4, 3.0, seed=2), train.mean, train.std)
    m, _ = train_batchwise(mlp((2, 8), (2, 3, 8), BNPolicy.PER_BIT, widths=(32, 32)), train, cfg(epochs=6, batch_size=50))
    theta = m.checksum()
    pre, _ = evaluate(m, test, 3)
    calibrate_baseline(m, train, [3], cfg(epochs=6, batch_size=50))
    post, _ = evaluate(m, test, 3)
    assert m.checksum() == theta
    assert all(t.requires_grad for t in m.theta.values())
    assert post >= pre
