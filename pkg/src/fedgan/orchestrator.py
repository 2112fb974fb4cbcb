"""Round-by-round protocol drivers for MULTI-FLGAN and the FLGAN/AFLGAN baselines.

One round of MULTI-FLGAN:

1. sync      - every FLU (and its client replicas) takes its generator from
               its G-sync server and its discriminator from its D-sync server
2. train     - every client trains each of its ``X*Y`` replicas on its shard
3. FLU       - each FLU aggregates its clients' replicas
4. sync srv  - G-sync ``g`` averages the generators of FLUs ``G{g}D*``,
               D-sync ``d`` the discriminators of FLUs ``G*D{d}``

All randomness in a round is drawn from streams keyed on
``(seed, client, flu, round)``, so worker scheduling cannot change results.
Model state is kept in float32, which is also the checkpoint format.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .adversary import free_rider_update, poison_update
from .aggregation import AggregatorKind, fedavg, select_best
from .config import FaultEvent, RunConfig
from .datasets import BatchStream, next_batch
from .errors import NonFiniteWeightsError, TopologyError
from .topology import FluId, GanPair, SyncId, Topology, allocate, assign_clients

log = logging.getLogger(__name__)

DTYPE = np.float32

__all__ = [
    "FaultEvent", "RoundState", "build_specs", "init_state", "sync_step", "train_flu_step",
    "update_flu_step", "update_sync_step", "terminate", "inject_fault", "run",
    "run_multi_flgan", "run_flgan", "run_aflgan",
]


def build_specs(cfg: RunConfig, data_dim: int) -> tuple[nn.NetSpec, nn.NetSpec]:
    spec_g = nn.NetSpec((cfg.z_dim, *cfg.gen_hidden, data_dim), "tanh")
    spec_d = nn.NetSpec((data_dim, *cfg.disc_hidden, 1), "sigmoid")
    return spec_g, spec_d


@dataclass
class RoundState:
    config: RunConfig
    topology: Topology
    spec_g: nn.NetSpec
    spec_d: nn.NetSpec
    round: int = 0
    gen_sync: dict = field(default_factory=dict)   # generator index -> weights
    disc_sync: dict = field(default_factory=dict)  # discriminator index -> weights
    flu_gen: dict = field(default_factory=dict)    # FluId -> weights
    flu_disc: dict = field(default_factory=dict)
    replicas: dict = field(default_factory=dict)   # (FluId, client) -> GanPair
    dead_flus: set = field(default_factory=set)
    dead_syncs: set = field(default_factory=set)
    dead_clients: set = field(default_factory=set)

    @property
    def n_clients(self) -> int:
        return self.config.N

    def alive_clients(self) -> list[int]:
        return [i for i in range(self.config.N) if i not in self.dead_clients]

    def alive_flus(self) -> list[FluId]:
        return [f for f in self.topology.flus if f not in self.dead_flus]

    def alive_g_syncs(self) -> list[SyncId]:
        return [s for s in self.topology.g_syncs if s not in self.dead_syncs]

    def alive_d_syncs(self) -> list[SyncId]:
        return [s for s in self.topology.d_syncs if s not in self.dead_syncs]

    def flu_pos(self, f: FluId) -> int:
        return self.topology.flus.index(f)


def init_state(cfg: RunConfig, data_dim: int) -> RoundState:
    """Allocate the topology, seed the replicas and bootstrap the sync servers."""
    spec_g, spec_d = build_specs(cfg, data_dim)
    topo = allocate(cfg.X, cfg.Y)
    assignment = assign_clients(topo, cfg.N, cfg.seed, spec_g, spec_d, dtype=DTYPE)
    st = RoundState(cfg, topo, spec_g, spec_d)
    for f, reps in assignment.replicas.items():
        st.flu_gen[f] = reps[0].gen.copy()
        st.flu_disc[f] = reps[0].disc.copy()
        for i, r in enumerate(reps):
            st.replicas[(f, i)] = r
    # sync servers start from the average of their FLUs' initial models
    for s in topo.g_syncs:
        st.gen_sync[s.index] = fedavg([st.flu_gen[f] for f in topo.flus_of(s)])
    for s in topo.d_syncs:
        st.disc_sync[s.index] = fedavg([st.flu_disc[f] for f in topo.flus_of(s)])
    return st


def _check_finite(w: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(w)):
        raise NonFiniteWeightsError(f"non-finite weights in {where}")
    return w


# --- protocol steps --------------------------------------------------------

def sync_step(state: RoundState) -> RoundState:
    """Push sync models into their FLUs, then hand FLU models to live clients."""
    for f in state.alive_flus():
        gs, ds = state.topology.syncs_of(f)
        if gs not in state.dead_syncs:
            state.flu_gen[f] = state.gen_sync[gs.index].copy()
        if ds not in state.dead_syncs:
            state.flu_disc[f] = state.disc_sync[ds.index].copy()
        for i in state.alive_clients():
            old = state.replicas[(f, i)]
            state.replicas[(f, i)] = GanPair(state.flu_gen[f].copy(), state.flu_disc[f].copy(), old.steps)
    return state


def stream_seed(seed: int, client: int, flu_pos: int, rnd: int, purpose: int = 0) -> list[int]:
    return [int(seed), 0x5EED, int(client), int(flu_pos), int(rnd), int(purpose)]


def train_replica(replica: GanPair, shard: np.ndarray, cfg: RunConfig, spec_g: nn.NetSpec,
                  spec_d: nn.NetSpec, rng: np.random.Generator, lr: float) -> GanPair:
    """``local_steps`` rounds of one discriminator step followed by one generator step."""
    gen, disc = replica.gen, replica.disc
    opt_d = nn.OptimizerState(lr, cfg.weight_decay, replica.steps)
    opt_g = nn.OptimizerState(lr, cfg.weight_decay, replica.steps)
    stream = BatchStream(len(shard), rng)
    b = cfg.batch_size
    for _ in range(cfg.local_steps):
        real = next_batch(shard, b, stream)
        noise = rng.standard_normal((b, spec_g.n_in)).astype(gen.dtype)
        fake = nn.forward(spec_g, gen, noise)
        _, g_d = nn.disc_loss_and_grad(spec_d, disc, real, fake)
        disc = nn.sgd_step(disc, g_d, opt_d)
        noise = rng.standard_normal((b, spec_g.n_in)).astype(gen.dtype)
        _, g_g = nn.gen_loss_and_grad(spec_g, spec_d, gen, disc, noise, cfg.gen_loss)
        gen = nn.sgd_step(gen, g_g, opt_g)
    return GanPair(gen, disc, opt_g.step_count)


def _client_update(state: RoundState, shards, f: FluId, i: int, lr: float) -> GanPair:
    cfg = state.config
    rnd = state.round + 1
    replica = state.replicas[(f, i)]
    attack = cfg.attack
    pos = state.flu_pos(f)
    if attack is not None and attack.active(i, rnd):
        if attack.kind == "free_rider":
            return free_rider_update(replica)
        rng = np.random.default_rng(stream_seed(cfg.seed, i, pos, rnd, purpose=1))
        return poison_update(replica, attack.poison_mean, attack.poison_std, rng)
    rng = np.random.default_rng(stream_seed(cfg.seed, i, pos, rnd))
    return train_replica(replica, shards[i], cfg, state.spec_g, state.spec_d, rng, lr)


def train_flu_step(state: RoundState, shards, cfg: RunConfig | None = None,
                   workers: int = 1) -> RoundState:
    """Every live client trains every live replica it holds.

    ``shards`` is a list of per-client float arrays of real samples.
    """
    cfg = cfg or state.config
    lr = cfg.effective_lr
    tasks = [(f, i) for i in state.alive_clients() for f in state.alive_flus()]
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: _client_update(state, shards, t[0], t[1], lr), tasks))
    else:
        results = [_client_update(state, shards, f, i, lr) for f, i in tasks]
    for (f, i), rep in zip(tasks, results):
        state.replicas[(f, i)] = rep
    return state


def _client_aggregate(cfg: RunConfig, ws, sizes):
    if cfg.weighted_fedavg and cfg.aggregator == "fedavg":
        return fedavg(ws, weights=sizes)
    return AggregatorKind.parse(cfg.aggregator)(ws)


def update_flu_step(state: RoundState, cfg: RunConfig | None = None, shard_sizes=None) -> RoundState:
    """Each live FLU replaces its model with the aggregate of its live clients' replicas."""
    cfg = cfg or state.config
    clients = state.alive_clients()
    for f in state.alive_flus():
        if not clients:
            log.warning("FLU %s has no live clients; keeping its previous model", f)
            continue
        sizes = None if shard_sizes is None else [shard_sizes[i] for i in clients]
        gens = [state.replicas[(f, i)].gen for i in clients]
        discs = [state.replicas[(f, i)].disc for i in clients]
        state.flu_gen[f] = _check_finite(_client_aggregate(cfg, gens, sizes), f"FLU {f} generator")
        state.flu_disc[f] = _check_finite(_client_aggregate(cfg, discs, sizes), f"FLU {f} discriminator")
    return state


def update_sync_step(state: RoundState) -> RoundState:
    """G-syncs average generators, D-syncs average discriminators, of live connected FLUs."""
    topo = state.topology
    for s in topo.syncs:
        if s in state.dead_syncs:
            continue
        live = [f for f in topo.flus_of(s) if f not in state.dead_flus]
        if not live:
            log.warning("sync %s has no live FLUs; keeping its previous model", s)
            continue
        if s.kind == "G":
            state.gen_sync[s.index] = _check_finite(fedavg([state.flu_gen[f] for f in live]), f"sync {s}")
        else:
            state.disc_sync[s.index] = _check_finite(fedavg([state.flu_disc[f] for f in live]), f"sync {s}")
    return state


def terminate(state: RoundState, metric_fn, with_details: bool = False):
    """Pick the highest-scoring generator among live G-sync servers.

    ``metric_fn`` maps generator weights to a score (higher is better).
    """
    syncs = state.alive_g_syncs()
    if not syncs:
        raise TopologyError("no live G-sync server to select a generator from")
    scored = [(state.gen_sync[s.index], float(metric_fn(state.gen_sync[s.index]))) for s in syncs]
    best = select_best(scored)
    if with_details:
        idx = next(j for j, (w, _) in enumerate(scored) if w is best)
        return syncs[idx], best, scored[idx][1]
    return best


def inject_fault(state: RoundState, event: FaultEvent) -> RoundState:
    target = event.parsed_target()
    if isinstance(target, int):
        if not 0 <= target < state.config.N:
            raise TopologyError(f"unknown client {target}")
        if target in state.dead_clients:
            raise TopologyError(f"client {target} is already down")
        state.dead_clients.add(target)
    elif isinstance(target, FluId):
        state.topology.check_flu(target)
        if target in state.dead_flus:
            raise TopologyError(f"FLU {target} is already down")
        state.dead_flus.add(target)
    else:
        state.topology.check_sync(target)
        if target in state.dead_syncs:
            raise TopologyError(f"sync {target} is already down")
        state.dead_syncs.add(target)
    log.info("round %d: %s dropped", event.at_round, event.target)
    return state


def _apply_faults(state: RoundState, rnd: int) -> None:
    for ev in state.config.faults:
        if ev.at_round == rnd:
            inject_fault(state, ev)


# --- full runs ---------------------------------------------------------------

def _finish_round(state, rnd, on_round):
    state.round = rnd
    if on_round is not None:
        on_round(state)


def run_multi_flgan(cfg: RunConfig, shards, state: RoundState | None = None,
                    on_round=None, workers: int = 1) -> RoundState:
    """Run (or resume) MULTI-FLGAN up to ``cfg.epochs`` rounds."""
    if state is None:
        state = init_state(cfg, shards[0].shape[1])
    sizes = [len(s) for s in shards]
    for rnd in range(state.round + 1, cfg.epochs + 1):
        _apply_faults(state, rnd)
        sync_step(state)
        train_flu_step(state, shards, cfg, workers)
        update_flu_step(state, cfg, sizes)
        update_sync_step(state)
        _finish_round(state, rnd, on_round)
    return state


def _baseline_round(state: RoundState, shards, sizes, workers, share_disc: bool):
    cfg = state.config
    (flu,) = state.topology.flus
    clients = state.alive_clients()
    gen_global, disc_global = state.gen_sync[1], state.disc_sync[1]
    for i in clients:
        old = state.replicas[(flu, i)]
        disc = disc_global.copy() if share_disc else old.disc
        state.replicas[(flu, i)] = GanPair(gen_global.copy(), disc, old.steps)
    train_flu_step(state, shards, cfg, workers)
    if not clients:
        log.warning("no live clients; global model unchanged")
        return
    client_sizes = [sizes[i] for i in clients]
    gen = _check_finite(_client_aggregate(cfg, [state.replicas[(flu, i)].gen for i in clients], client_sizes),
                        "global generator")
    state.flu_gen[flu] = gen
    state.gen_sync[1] = gen.copy()
    if share_disc:
        disc = _check_finite(
            _client_aggregate(cfg, [state.replicas[(flu, i)].disc for i in clients], client_sizes),
            "global discriminator")
        state.flu_disc[flu] = disc
        state.disc_sync[1] = disc.copy()


def run_flgan(cfg: RunConfig, shards, state: RoundState | None = None,
              on_round=None, workers: int = 1) -> RoundState:
    """Each client trains a full GAN; the server averages both networks every round."""
    if state is None:
        state = init_state(cfg, shards[0].shape[1])
    sizes = [len(s) for s in shards]
    for rnd in range(state.round + 1, cfg.epochs + 1):
        _apply_faults(state, rnd)
        _baseline_round(state, shards, sizes, workers, share_disc=True)
        _finish_round(state, rnd, on_round)
    return state


def run_aflgan(cfg: RunConfig, shards, state: RoundState | None = None,
               on_round=None, workers: int = 1) -> RoundState:
    """Like FLGAN, but discriminators never leave their client."""
    if state is None:
        state = init_state(cfg, shards[0].shape[1])
    sizes = [len(s) for s in shards]
    for rnd in range(state.round + 1, cfg.epochs + 1):
        _apply_faults(state, rnd)
        _baseline_round(state, shards, sizes, workers, share_disc=False)
        _finish_round(state, rnd, on_round)
    return state


RUNNERS = {"MULTI_FLGAN": run_multi_flgan, "FLGAN": run_flgan, "AFLGAN": run_aflgan}


def run(cfg: RunConfig, shards, state=None, on_round=None, workers: int = 1) -> RoundState:
    return RUNNERS[cfg.arch](cfg, shards, state=state, on_round=on_round, workers=workers)
