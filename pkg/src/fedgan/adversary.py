"""Malicious clients: free-riders that leak the shared generators, and poisoners."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .topology import FluId, GanPair

ATTACK_KINDS = ("free_rider", "poison")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    malicious_clients: frozenset = field(default_factory=frozenset)
    poison_mean: float = 0.0
    poison_std: float = 1.0
    start_round: int = 1

    def __post_init__(self):
        object.__setattr__(self, "malicious_clients", frozenset(int(c) for c in self.malicious_clients))
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.poison_std < 0:
            raise ValueError("poison std must be nonnegative")

    def active(self, client: int, rnd: int) -> bool:
        return rnd >= self.start_round and client in self.malicious_clients

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "malicious_clients": sorted(self.malicious_clients),
            "poison_mean": self.poison_mean,
            "poison_std": self.poison_std,
            "start_round": self.start_round,
        }


def free_rider_update(replica: GanPair) -> GanPair:
    """A free-rider skips training and hands the received models straight back."""
    return replica


def poison_update(replica: GanPair, poison_mean: float, poison_std: float,
                  rng: np.random.Generator) -> GanPair:
    """Replace every weight with an i.i.d. normal draw."""
    gen = rng.normal(poison_mean, poison_std, size=replica.gen.shape).astype(replica.gen.dtype)
    disc = rng.normal(poison_mean, poison_std, size=replica.disc.shape).astype(replica.disc.dtype)
    return GanPair(gen, disc, replica.steps)


def extract_inference_samples(state, malicious_client: int, n_samples: int, seed,
                              flu: FluId | None = None) -> np.ndarray:
    """Sample the generator a compromised client currently holds.

    ``state`` is a :class:`fedgan.orchestrator.RoundState`. With ``flu`` unset
    the first live FLU is used.
    """
    if flu is None:
        flu = next(f for f in state.topology.flus if f not in state.dead_flus)
    replica = state.replicas[(flu, malicious_client)]
    spec_g = state.spec_g
    if n_samples == 0:
        return np.empty((0, spec_g.n_out), dtype=replica.gen.dtype)
    noise = sample_noise(spec_g.n_in, n_samples, seed, replica.gen.dtype)
    return nn.forward(spec_g, replica.gen, noise)


def sample_noise(z_dim: int, n: int, seed, dtype=np.float32) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, z_dim)).astype(dtype)
