"""The MULTI-FLGAN graph: FLUs, generator/discriminator sync servers and their edges.

``Y`` generators and ``X`` discriminators give ``X*Y`` FLUs, one per
(generator, discriminator) pairing. G-sync ``g`` is wired to every FLU whose
generator id is ``g``; D-sync ``d`` to every FLU whose discriminator id is ``d``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import total_ordering

import numpy as np

from .errors import TopologyError
from .nn import NetSpec, init_params


@dataclass(frozen=True, order=True)
class FluId:
    g: int
    d: int

    def __str__(self):
        return f"G{self.g}D{self.d}"


@total_ordering
@dataclass(frozen=True)
class SyncId:
    kind: str  # "G" or "D"
    index: int

    def __post_init__(self):
        if self.kind not in ("G", "D"):
            raise TopologyError(f"sync kind must be 'G' or 'D', got {self.kind!r}")

    def __lt__(self, other):
        # G-syncs first, matching the j = 1..X+Y loop order
        return (self.kind != "G", self.index) < (other.kind != "G", other.index)

    def __str__(self):
        return f"{self.kind}{self.index}"


_FLU_RE = re.compile(r"^G(\d+)D(\d+)$")
_SYNC_RE = re.compile(r"^([GD])(\d+)$")


def parse_node(name: str):
    """``"G2D1"`` -> FluId, ``"G2"``/``"D1"`` -> SyncId."""
    m = _FLU_RE.match(name)
    if m:
        return FluId(int(m.group(1)), int(m.group(2)))
    m = _SYNC_RE.match(name)
    if m:
        return SyncId(m.group(1), int(m.group(2)))
    raise TopologyError(f"not a node name: {name!r}")


@dataclass(frozen=True)
class Topology:
    X: int  # discriminators
    Y: int  # generators
    flus: tuple[FluId, ...] = field(repr=False)
    syncs: tuple[SyncId, ...] = field(repr=False)
    edges: frozenset = field(repr=False)

    def check_flu(self, f: FluId) -> None:
        if not (1 <= f.g <= self.Y and 1 <= f.d <= self.X):
            raise TopologyError(f"{f} outside a topology with Y={self.Y}, X={self.X}")

    def check_sync(self, s: SyncId) -> None:
        bound = self.Y if s.kind == "G" else self.X
        if not 1 <= s.index <= bound:
            raise TopologyError(f"{s} outside a topology with Y={self.Y}, X={self.X}")

    def is_connected(self, s: SyncId, f: FluId) -> bool:
        self.check_sync(s)
        self.check_flu(f)
        return s.index == (f.g if s.kind == "G" else f.d)

    def flus_of(self, s: SyncId) -> list[FluId]:
        self.check_sync(s)
        return [f for f in self.flus if self.is_connected(s, f)]

    def syncs_of(self, f: FluId) -> tuple[SyncId, SyncId]:
        self.check_flu(f)
        return SyncId("G", f.g), SyncId("D", f.d)

    @property
    def g_syncs(self) -> list[SyncId]:
        return [s for s in self.syncs if s.kind == "G"]

    @property
    def d_syncs(self) -> list[SyncId]:
        return [s for s in self.syncs if s.kind == "D"]

    def to_dict(self) -> dict:
        return {
            "X": self.X,
            "Y": self.Y,
            "flus": [str(f) for f in self.flus],
            "syncs": [str(s) for s in self.syncs],
            "edges": [[str(s), str(f)] for s, f in sorted(self.edges)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def allocate(X: int, Y: int) -> Topology:
    if X < 1 or Y < 1:
        raise TopologyError(f"X and Y must be positive, got X={X}, Y={Y}")
    flus = tuple(FluId(g, d) for g in range(1, Y + 1) for d in range(1, X + 1))
    syncs = tuple([SyncId("G", g) for g in range(1, Y + 1)] + [SyncId("D", d) for d in range(1, X + 1)])
    edges = frozenset((s, f) for s in syncs for f in flus
                      if s.index == (f.g if s.kind == "G" else f.d))
    return Topology(X, Y, flus, syncs, edges)


def is_connected(topology: Topology, s: SyncId, f: FluId) -> bool:
    return topology.is_connected(s, f)


@dataclass
class GanPair:
    """One client's copy of a (generator, discriminator) pairing."""
    gen: np.ndarray
    disc: np.ndarray
    steps: int = 0

    def copy(self) -> "GanPair":
        return GanPair(self.gen.copy(), self.disc.copy(), self.steps)


@dataclass
class ClientAssignment:
    n_clients: int
    replicas: dict  # FluId -> list[GanPair]

    @property
    def models_per_client(self) -> int:
        return len(self.replicas)


def part_init_seed(init_seed: int, kind: str, index: int) -> list[int]:
    return [int(init_seed), 0x1F1A, 0 if kind == "G" else 1, int(index)]


def flu_init(spec_g: NetSpec, spec_d: NetSpec, init_seed: int, f: FluId, dtype=np.float32):
    """Initial weights of FLU ``f``.

    The generator part is seeded by the generator id and the discriminator
    part by the discriminator id, so FLUs sharing a sync server start from the
    same half and the round-0 sync average is not a blend of unrelated nets.
    """
    return (init_params(spec_g, part_init_seed(init_seed, "G", f.g), dtype=dtype),
            init_params(spec_d, part_init_seed(init_seed, "D", f.d), dtype=dtype))


def assign_clients(topology: Topology, N: int, init_seed: int, spec_g: NetSpec,
                   spec_d: NetSpec, dtype=np.float32) -> ClientAssignment:
    """Create ``N`` identical replicas per FLU."""
    if N < 1:
        raise TopologyError(f"number of clients must be positive, got {N}")
    replicas = {}
    for f in topology.flus:
        g, d = flu_init(spec_g, spec_d, init_seed, f, dtype)
        replicas[f] = [GanPair(g.copy(), d.copy()) for _ in range(N)]
    return ClientAssignment(N, replicas)
