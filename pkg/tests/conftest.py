import numpy as np
import pytest

from fedgan.config import RunConfig
from fedgan.datasets import MixtureSpec, make_ring_mixture, partition_noniid


def tiny_config(arch="MULTI_FLGAN", N=3, **kw):
    d = dict(arch=arch, N=N, X=2, Y=2, seed=7, epochs=3, alpha=0.01, lr_scaling=False,
             gen_hidden=[8], disc_hidden=[8], z_dim=2, batch_size=16, metric_every=1,
             eval_samples=200, dataset={"n_total": 400, "train_size": 200})
    d.update(kw)
    return RunConfig.from_dict(d)


def make_shards(n_clients, seed=0, n=200):
    t = make_ring_mixture(MixtureSpec(seed=seed), n)
    part = partition_noniid(t, n_clients, "label_skew", 0.5, seed)
    return [t.points[s].astype(np.float32) for s in part.client_shards]


@pytest.fixture
def shards3():
    return make_shards(3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
