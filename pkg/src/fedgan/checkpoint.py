"""Checkpoints: ``manifest.json`` plus ``weights.bin``.

``weights.bin`` is an 8-byte magic followed by little-endian float32 arrays
concatenated in the order the manifest lists them; each manifest section
records its byte offset and element count.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import CorruptCheckpointError
from .nn import NetSpec
from .orchestrator import DTYPE, RoundState
from .topology import GanPair, allocate, parse_node

MAGIC = b"FGANCK01"
FORMAT = "fedgan-checkpoint/1"


def checkpoint_dir(root, run_id: str, rnd: int) -> Path:
    return Path(root) / run_id / f"round_{rnd:04d}"


def _sections(state: RoundState):
    for g in sorted(state.gen_sync):
        yield f"sync/G{g}", state.gen_sync[g]
    for d in sorted(state.disc_sync):
        yield f"sync/D{d}", state.disc_sync[d]
    for f in state.topology.flus:
        yield f"flu/{f}/gen", state.flu_gen[f]
        yield f"flu/{f}/disc", state.flu_disc[f]
    for f in state.topology.flus:
        for i in range(state.config.N):
            r = state.replicas[(f, i)]
            yield f"replica/{f}/{i}/gen", r.gen
            yield f"replica/{f}/{i}/disc", r.disc


def save_checkpoint(state: RoundState, path, metrics: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sections = []
    chunks = [MAGIC]
    offset = len(MAGIC)
    for name, arr in _sections(state):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        sections.append({"name": name, "offset": offset, "count": int(arr.size)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format": FORMAT,
        "run_id": state.config.run_id,
        "round": state.round,
        "arch": state.config.arch,
        "X": state.config.X,
        "Y": state.config.Y,
        "N": state.config.N,
        "seed": state.config.seed,
        "gen_spec": state.spec_g.to_dict(),
        "disc_spec": state.spec_d.to_dict(),
        "config": state.config.to_dict(),
        "metrics": metrics or {},
        "replica_steps": {f"{f}/{i}": state.replicas[(f, i)].steps
                          for f in state.topology.flus for i in range(state.config.N)},
        "dead": {
            "flus": sorted(str(f) for f in state.dead_flus),
            "syncs": sorted(str(s) for s in state.dead_syncs),
            "clients": sorted(state.dead_clients),
        },
        "blob_bytes": offset,
        "sections": sections,
    }
    (path / "weights.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[RoundState, dict]:
    """Rebuild the round state saved at ``path``; also returns the manifest."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"unreadable manifest in {path}: {e}") from None
    if manifest.get("format") != FORMAT:
        raise CorruptCheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    if path.name.startswith("round_") and int(path.name[6:]) != manifest["round"]:
        raise CorruptCheckpointError("manifest round does not match directory name")
    blob = (path / "weights.bin").read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("weights.bin magic mismatch")
    if len(blob) != manifest["blob_bytes"]:
        raise CorruptCheckpointError(
            f"weights.bin has {len(blob)} bytes, manifest declares {manifest['blob_bytes']}")

    arrays = {}
    for sec in manifest["sections"]:
        end = sec["offset"] + 4 * sec["count"]
        if end > len(blob):
            raise CorruptCheckpointError(f"section {sec['name']} runs past the end of the blob")
        arrays[sec["name"]] = np.frombuffer(blob, dtype="<f4", count=sec["count"],
                                            offset=sec["offset"]).astype(DTYPE)

    cfg = RunConfig.from_dict(manifest["config"])
    spec_g = NetSpec.from_dict(manifest["gen_spec"])
    spec_d = NetSpec.from_dict(manifest["disc_spec"])
    topo = allocate(cfg.X, cfg.Y)
    st = RoundState(cfg, topo, spec_g, spec_d, round=manifest["round"])
    try:
        for s in topo.g_syncs:
            st.gen_sync[s.index] = arrays[f"sync/{s}"]
        for s in topo.d_syncs:
            st.disc_sync[s.index] = arrays[f"sync/{s}"]
        for f in topo.flus:
            st.flu_gen[f] = arrays[f"flu/{f}/gen"]
            st.flu_disc[f] = arrays[f"flu/{f}/disc"]
            for i in range(cfg.N):
                st.replicas[(f, i)] = GanPair(arrays[f"replica/{f}/{i}/gen"],
                                              arrays[f"replica/{f}/{i}/disc"],
                                              manifest["replica_steps"][f"{f}/{i}"])
    except KeyError as e:
        raise CorruptCheckpointError(f"checkpoint is missing section {e}") from None
    for name, arr in arrays.items():
        if name.endswith("gen") or name.startswith("sync/G"):
            expected = spec_g.n_params
        else:
            expected = spec_d.n_params
        if arr.size != expected:
            raise CorruptCheckpointError(f"section {name} has {arr.size} values, layout needs {expected}")
    st.dead_flus = {parse_node(x) for x in manifest["dead"]["flus"]}
    st.dead_syncs = {parse_node(x) for x in manifest["dead"]["syncs"]}
    st.dead_clients = set(manifest["dead"]["clients"])
    return st, manifest
