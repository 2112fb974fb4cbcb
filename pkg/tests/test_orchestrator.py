import logging

import numpy as np
import pytest

from conftest import make_shards, tiny_config
from fedgan import nn
from fedgan import orchestrator as orc
from fedgan.config import FaultEvent
from fedgan.datasets import BatchStream, next_batch
from fedgan.errors import NonFiniteWeightsError, TopologyError
from fedgan.topology import FluId, SyncId


def snapshot(st):
    parts = [st.gen_sync[k] for k in sorted(st.gen_sync)] + [st.disc_sync[k] for k in sorted(st.disc_sync)]
    parts += [st.flu_gen[f] for f in st.topology.flus] + [st.flu_disc[f] for f in st.topology.flus]
    for key in sorted(st.replicas, key=lambda k: (k[0], k[1])):
        parts += [st.replicas[key].gen, st.replicas[key].disc]
    return b"".join(p.tobytes() for p in parts)


def fresh(cfg, shards):
    return orc.init_state(cfg, shards[0].shape[1])


def test_sync_fixpoint(shards3):
    cfg = tiny_config()
    st = orc.sync_step(fresh(cfg, shards3))
    before = snapshot(st)
    assert snapshot(orc.sync_step(st)) == before


def test_sync_routes_parts_by_id(shards3):
    st = fresh(tiny_config(), shards3)
    rng = np.random.default_rng(0)
    for k in st.gen_sync:
        st.gen_sync[k] = rng.normal(size=st.spec_g.n_params).astype(np.float32)
    for k in st.disc_sync:
        st.disc_sync[k] = rng.normal(size=st.spec_d.n_params).astype(np.float32)
    orc.sync_step(st)
    f = FluId(1, 2)
    assert np.array_equal(st.flu_gen[f], st.gen_sync[1])
    assert np.array_equal(st.flu_disc[f], st.disc_sync[2])
    for i in range(3):
        assert np.array_equal(st.replicas[(f, i)].gen, st.gen_sync[1])
        assert np.array_equal(st.replicas[(f, i)].disc, st.disc_sync[2])


def test_single_flu_receives_both_parts(shards3):
    st = fresh(tiny_config(X=1, Y=1), shards3)
    st.gen_sync[1] = st.gen_sync[1] + 1
    st.disc_sync[1] = st.disc_sync[1] - 1
    orc.sync_step(st)
    assert np.array_equal(st.flu_gen[FluId(1, 1)], st.gen_sync[1])
    assert np.array_equal(st.flu_disc[FluId(1, 1)], st.disc_sync[1])


def test_round0_syncs_are_fedavg_of_flu_inits(shards3):
    st = fresh(tiny_config(), shards3)
    for g in (1, 2):
        expect = (st.flu_gen[FluId(g, 1)].astype(np.float64) + st.flu_gen[FluId(g, 2)]) / 2
        assert np.allclose(st.gen_sync[g], expect, atol=0)


def test_zero_alpha_changes_nothing(shards3):
    cfg = tiny_config(alpha=0.0)
    st = orc.sync_step(fresh(cfg, shards3))
    before = {k: (r.gen.copy(), r.disc.copy()) for k, r in st.replicas.items()}
    orc.train_flu_step(st, shards3)
    for k, r in st.replicas.items():
        assert np.array_equal(r.gen, before[k][0]) and np.array_equal(r.disc, before[k][1])


def test_zero_alpha_conservation_over_rounds(shards3):
    cfg = tiny_config(alpha=0.0, epochs=4)
    init = fresh(cfg, shards3)
    st = orc.run(cfg, shards3)
    for k in init.gen_sync:
        assert np.array_equal(st.gen_sync[k], init.gen_sync[k])
    for k in init.disc_sync:
        assert np.array_equal(st.disc_sync[k], init.disc_sync[k])


def test_effective_lr_scaling_and_cap():
    assert tiny_config(N=20, alpha=2e-4, lr_scaling=True, lr_cap=None).effective_lr == pytest.approx(4e-3)
    assert tiny_config(N=20, alpha=0.01, lr_scaling=True).effective_lr == 0.05
    assert tiny_config(N=20, alpha=0.01, lr_scaling=False).effective_lr == 0.01


def standalone_gan(cfg, shard, w_g, w_d, rounds):
    """A plain GAN loop written against nn directly, using client 0's stream."""
    steps = 0
    for rnd in range(1, rounds + 1):
        rng = np.random.default_rng([cfg.seed, 0x5EED, 0, 0, rnd, 0])
        stream = BatchStream(len(shard), rng)
        opt_d = nn.OptimizerState(cfg.alpha, cfg.weight_decay, steps)
        opt_g = nn.OptimizerState(cfg.alpha, cfg.weight_decay, steps)
        for _ in range(cfg.local_steps):
            real = next_batch(shard, cfg.batch_size, stream)
            z = rng.standard_normal((cfg.batch_size, cfg.z_dim)).astype(np.float32)
            _, gd = nn.disc_loss_and_grad(cfg_spec_d(cfg), w_d, real, nn.forward(cfg_spec_g(cfg), w_g, z))
            w_d = nn.sgd_step(w_d, gd, opt_d)
            z = rng.standard_normal((cfg.batch_size, cfg.z_dim)).astype(np.float32)
            _, gg = nn.gen_loss_and_grad(cfg_spec_g(cfg), cfg_spec_d(cfg), w_g, w_d, z)
            w_g = nn.sgd_step(w_g, gg, opt_g)
        steps = opt_g.step_count
    return w_g, w_d


def cfg_spec_g(cfg):
    return nn.NetSpec((cfg.z_dim, *cfg.gen_hidden, 2), "tanh")


def cfg_spec_d(cfg):
    return nn.NetSpec((2, *cfg.disc_hidden, 1), "sigmoid")


@pytest.mark.parametrize("arch", ["MULTI_FLGAN", "FLGAN", "AFLGAN"])
def test_single_client_matches_standalone_gan(arch):
    shards = make_shards(1)
    cfg = tiny_config(arch, N=1, X=1, Y=1, epochs=4, local_steps=2, lr_scaling=True)
    st0 = fresh(cfg, shards)
    w_g, w_d = standalone_gan(cfg, shards[0], st0.gen_sync[1], st0.disc_sync[1], 4)
    st = orc.run(cfg, shards)
    assert np.array_equal(st.gen_sync[1], w_g)
    (rep,) = [r for r in st.replicas.values()]
    assert np.array_equal(rep.disc, w_d)


def test_update_flu_single_client():
    shards = make_shards(1)
    st = orc.sync_step(fresh(tiny_config(N=1), shards))
    orc.train_flu_step(st, shards)
    orc.update_flu_step(st)
    for f in st.topology.flus:
        assert np.array_equal(st.flu_gen[f], st.replicas[(f, 0)].gen)


def test_update_flu_two_clients_mean():
    shards = make_shards(2)
    st = orc.sync_step(fresh(tiny_config(N=2), shards))
    orc.train_flu_step(st, shards)
    orc.update_flu_step(st)
    f = FluId(2, 1)
    a, b = st.replicas[(f, 0)].gen, st.replicas[(f, 1)].gen
    mean = [(x + y) / 2 for x, y in zip(a.tolist(), b.tolist())]
    assert np.max(np.abs(st.flu_gen[f] - np.array(mean))) <= 1e-6


def test_update_flu_median_with_poisoned_replica():
    shards = make_shards(5)
    cfg = tiny_config(N=5, aggregator="coordinate_median")
    st = orc.sync_step(fresh(cfg, shards))
    orc.train_flu_step(st, shards)
    f = FluId(1, 1)
    honest = np.stack([st.replicas[(f, i)].gen for i in range(4)])
    st.replicas[(f, 4)].gen = np.random.default_rng(0).normal(size=honest.shape[1]).astype(np.float32)
    orc.update_flu_step(st)
    out = st.flu_gen[f]
    assert np.all(out >= honest.min(axis=0)) and np.all(out <= honest.max(axis=0))


def test_update_sync_bruteforce_and_drop(shards3):
    st = fresh(tiny_config(), shards3)
    rng = np.random.default_rng(1)
    for f in st.topology.flus:
        st.flu_gen[f] = rng.normal(size=st.spec_g.n_params).astype(np.float32)
        st.flu_disc[f] = rng.normal(size=st.spec_d.n_params).astype(np.float32)
    orc.update_sync_step(st)
    g1 = [(a + b) / 2 for a, b in zip(st.flu_gen[FluId(1, 1)].tolist(), st.flu_gen[FluId(1, 2)].tolist())]
    assert np.max(np.abs(st.gen_sync[1] - np.array(g1))) <= 1e-6
    d2 = [(a + b) / 2 for a, b in zip(st.flu_disc[FluId(1, 2)].tolist(), st.flu_disc[FluId(2, 2)].tolist())]
    assert np.max(np.abs(st.disc_sync[2] - np.array(d2))) <= 1e-6
    orc.inject_fault(st, FaultEvent(1, "G1D2"))
    orc.update_sync_step(st)
    assert np.array_equal(st.gen_sync[1], st.flu_gen[FluId(1, 1)])


def test_update_sync_single_flu(shards3):
    st = fresh(tiny_config(X=1, Y=1), shards3)
    f = FluId(1, 1)
    st.flu_gen[f] = st.flu_gen[f] + 2
    orc.update_sync_step(st)
    assert np.array_equal(st.gen_sync[1], st.flu_gen[f])
    assert np.array_equal(st.disc_sync[1], st.flu_disc[f])


def test_terminate(shards3):
    st = fresh(tiny_config(Y=1), shards3)
    assert orc.terminate(st, lambda w: 0.0) is st.gen_sync[1]
    st = fresh(tiny_config(), shards3)
    scores = {id(st.gen_sync[1]): 2.1, id(st.gen_sync[2]): 3.4}
    sync, best, score = orc.terminate(st, lambda w: scores[id(w)], with_details=True)
    assert best is st.gen_sync[2] and sync == SyncId("G", 2) and score == 3.4


def test_terminate_rescoring_oracle(shards3):
    cfg = tiny_config(Y=3, epochs=2)
    st = orc.run(cfg, shards3)
    metric = lambda w: float(np.sum(np.sin(w)))
    best = orc.terminate(st, metric)
    assert metric(best) == max(metric(st.gen_sync[g]) for g in (1, 2, 3))


def test_terminate_without_live_gsync(shards3):
    st = fresh(tiny_config(Y=1), shards3)
    orc.inject_fault(st, FaultEvent(1, "G1"))
    with pytest.raises(TopologyError):
        orc.terminate(st, lambda w: 0.0)


def test_flgan_zero_lr_round_is_mean_of_inits(shards3):
    cfg = tiny_config("FLGAN", alpha=0.0, epochs=1)
    init = fresh(cfg, shards3)
    reps = [init.replicas[(FluId(1, 1), i)] for i in range(3)]
    expected = sum(r.gen.astype(np.float64) for r in reps) / 3
    st = orc.run(cfg, shards3)
    assert np.array_equal(st.gen_sync[1], expected.astype(np.float32))


def test_aflgan_zero_lr_keeps_discriminator_inits(shards3):
    cfg = tiny_config("AFLGAN", alpha=0.0, epochs=1)
    init = fresh(cfg, shards3)
    st = orc.run(cfg, shards3)
    for i in range(3):
        assert np.array_equal(st.replicas[(FluId(1, 1), i)].disc, init.replicas[(FluId(1, 1), i)].disc)


def test_aflgan_discriminator_sensitivity_probe():
    cfg = tiny_config("AFLGAN", epochs=1)
    a = make_shards(3)
    b = [s.copy() for s in a]
    b[1] = b[1] * 0.5 + 0.3
    st_a, st_b = orc.run(cfg, a), orc.run(cfg, b)
    f = FluId(1, 1)
    assert np.array_equal(st_a.replicas[(f, 0)].disc, st_b.replicas[(f, 0)].disc)
    assert np.array_equal(st_a.replicas[(f, 2)].disc, st_b.replicas[(f, 2)].disc)
    assert not np.array_equal(st_a.replicas[(f, 1)].disc, st_b.replicas[(f, 1)].disc)
    # discriminators are never pooled
    assert not np.array_equal(st_a.replicas[(f, 0)].disc, st_a.replicas[(f, 2)].disc)


def test_aflgan_equals_flgan_for_one_client():
    shards = make_shards(1)
    a = orc.run(tiny_config("AFLGAN", N=1, epochs=3), shards)
    f = orc.run(tiny_config("FLGAN", N=1, epochs=3), shards)
    # AFLGAN leaves the server-side discriminator slot untouched; compare what trains
    assert np.array_equal(a.gen_sync[1], f.gen_sync[1])
    ra, rf = a.replicas[(FluId(1, 1), 0)], f.replicas[(FluId(1, 1), 0)]
    assert np.array_equal(ra.gen, rf.gen) and np.array_equal(ra.disc, rf.disc)


@pytest.mark.parametrize("N", [1, 3])
def test_multi_one_by_one_reduces_to_flgan(N):
    shards = make_shards(N)
    m = orc.run(tiny_config("MULTI_FLGAN", N=N, X=1, Y=1, epochs=10), shards)
    f = orc.run(tiny_config("FLGAN", N=N, epochs=10), shards)
    assert snapshot(m) == snapshot(f)


def test_worker_count_does_not_change_results(shards3):
    cfg = tiny_config(epochs=2)
    assert snapshot(orc.run(cfg, shards3, workers=1)) == snapshot(orc.run(cfg, shards3, workers=3))


def test_fault_drop_flu_under_gsync(shards3):
    cfg = tiny_config(epochs=4, faults=[{"at_round": 2, "target": "G1D2"}])
    st = orc.run(cfg, shards3)
    assert FluId(1, 2) in st.dead_flus
    assert np.array_equal(st.gen_sync[1], st.flu_gen[FluId(1, 1)])


def test_fault_drop_client(shards3):
    cfg = tiny_config(epochs=2, faults=[{"at_round": 2, "target": "client:1"}])
    seen = []
    st = orc.run(cfg, shards3, on_round=lambda s: seen.append(snapshot(s)))
    f = FluId(2, 2)
    mean = (st.replicas[(f, 0)].gen.astype(np.float64) + st.replicas[(f, 2)].gen) / 2
    assert np.allclose(st.flu_gen[f], mean, atol=1e-6)
    assert st.alive_clients() == [0, 2]


def test_fault_drop_all_flus_of_a_sync(shards3, caplog):
    cfg = tiny_config(epochs=3, faults=[{"at_round": 2, "target": "G1D1"},
                                        {"at_round": 2, "target": "G1D2"}])
    frozen = {}

    def hook(s):
        if s.round == 1:
            frozen["g1"] = s.gen_sync[1].copy()

    with caplog.at_level(logging.WARNING):
        st = orc.run(cfg, shards3, on_round=hook)
    assert np.array_equal(st.gen_sync[1], frozen["g1"])
    assert "no live FLUs" in caplog.text
    assert orc.terminate(st, lambda w: 0.0) is not None


def test_fault_errors(shards3):
    st = fresh(tiny_config(), shards3)
    with pytest.raises(TopologyError):
        orc.inject_fault(st, FaultEvent(1, "G3D1"))
    orc.inject_fault(st, FaultEvent(1, "client:0"))
    with pytest.raises(TopologyError):
        orc.inject_fault(st, FaultEvent(1, "client:0"))


def test_all_clients_dropped_warns(shards3, caplog):
    st = orc.sync_step(fresh(tiny_config(N=1), make_shards(1)))
    orc.inject_fault(st, FaultEvent(1, "client:0"))
    with caplog.at_level(logging.WARNING):
        orc.update_flu_step(st)
    assert "no live clients" in caplog.text


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_guard():
    shards = make_shards(2)
    shards[0][:] = np.nan
    with pytest.raises(NonFiniteWeightsError):
        orc.run(tiny_config(N=2, epochs=2), shards)


def test_weights_stay_finite_and_float32(shards3):
    st = orc.run(tiny_config(epochs=3), shards3)
    for w in list(st.gen_sync.values()) + list(st.disc_sync.values()):
        assert w.dtype == np.float32 and np.all(np.isfinite(w))


def test_weighted_fedavg_by_shard_size():
    shards = make_shards(2)
    st = orc.sync_step(fresh(tiny_config(N=2, weighted_fedavg=True), shards))
    orc.train_flu_step(st, shards)
    sizes = [len(s) for s in shards]
    orc.update_flu_step(st, shard_sizes=sizes)
    f = FluId(1, 1)
    a, b = (st.replicas[(f, i)].gen.astype(np.float64) for i in (0, 1))
    expect = (sizes[0] * a + sizes[1] * b) / sum(sizes)
    assert np.allclose(st.flu_gen[f], expect, atol=1e-6)
