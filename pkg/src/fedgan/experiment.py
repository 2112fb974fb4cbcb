"""Experiment execution: data preparation, scoring, run matrices and reporting."""
from __future__ import annotations

import csv
import functools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, nn
from .adversary import extract_inference_samples, sample_noise
from .checkpoint import checkpoint_dir, load_checkpoint, save_checkpoint
from .config import ExperimentPlan, RunConfig
from .datasets import (LabeledSet, MixtureSpec, Partition, idx_to_labeled_set, load_idx,
                       make_ring_mixture, partition_noniid, subsample_training_set)
from .errors import ConfigError, NonFiniteWeightsError
from .orchestrator import DTYPE, RoundState, run, terminate

log = logging.getLogger(__name__)

CSV_COLUMNS = ("run_id", "arch", "N", "X", "Y", "seed", "round",
               "proxy_is", "frechet", "mode_coverage", "wall_seconds")


@dataclass
class ResultRow:
    run_id: str
    arch: str
    N: int
    X: int
    Y: int
    seed: int
    round: int
    proxy_is: float
    frechet: float
    mode_coverage: int
    wall_seconds: float

    def csv_fields(self) -> list[str]:
        return [self.run_id, self.arch, str(self.N), str(self.X), str(self.Y), str(self.seed),
                str(self.round), repr(float(self.proxy_is)), repr(float(self.frechet)),
                str(self.mode_coverage), f"{self.wall_seconds:.3f}"]

    @property
    def failed(self) -> bool:
        return math.isnan(self.proxy_is)


@dataclass
class MetricReport:
    round: int
    proxy_is: float
    frechet: float
    mode_coverage: int
    mode_counts: list = field(default_factory=list)
    selected_sync: str = ""


@dataclass
class RunData:
    train: LabeledSet
    partition: Partition
    shards: list
    reference: np.ndarray
    classifier: metrics.FrozenClassifier
    mixture: MixtureSpec | None
    eval_noise: np.ndarray


# --- data and scoring --------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _ring_classifier(k: int, radius: float, sigma: float) -> metrics.FrozenClassifier:
    return metrics.classifier_for_mixture(MixtureSpec(k, radius, sigma, 0))


@functools.lru_cache(maxsize=2)
def _idx_data(image_path: str, label_path: str, side: int) -> LabeledSet:
    return idx_to_labeled_set(load_idx(image_path, label_path), side)


@functools.lru_cache(maxsize=2)
def _idx_classifier(image_path: str, label_path: str, side: int) -> metrics.FrozenClassifier:
    data = _idx_data(image_path, label_path, side)
    rng = np.random.default_rng(0)
    order = rng.permutation(len(data))
    cut = int(0.8 * len(data))
    n_classes = int(data.labels.max()) + 1
    # a dense net on pooled digits may miss the gate; it is reported, not enforced
    clf = metrics.fit_classifier(data.subset(order[:cut]), data.subset(order[cut:]), n_classes,
                                 hidden=(64,), steps=3000, lr=0.1, gate=None)
    if clf.accuracy < metrics.ACCURACY_GATE:
        log.warning("image classifier held-out accuracy %.3f is below the %.2f gate",
                    clf.accuracy, metrics.ACCURACY_GATE)
    return clf


def scoring_classifier(cfg: RunConfig, cache_dir=None) -> metrics.FrozenClassifier:
    ds = cfg.dataset
    if ds.kind == "idx":
        return _idx_classifier(ds.image_path, ds.label_path, ds.image_side)
    if cache_dir is not None:
        path = Path(cache_dir) / f"classifier-k{ds.k}-r{ds.ring_radius}-s{ds.sigma}.npz"
        if path.exists():
            return metrics.FrozenClassifier.load(path)
        clf = _ring_classifier(ds.k, ds.ring_radius, ds.sigma)
        path.parent.mkdir(parents=True, exist_ok=True)
        clf.save(path)
        return clf
    return _ring_classifier(ds.k, ds.ring_radius, ds.sigma)


def prepare_data(cfg: RunConfig, cache_dir=None) -> RunData:
    """Everything data-dependent is a function of the run seed only, not the architecture."""
    ds = cfg.dataset
    seed = cfg.seed
    if ds.kind == "ring":
        mixture = MixtureSpec(ds.k, ds.ring_radius, ds.sigma, [seed, 1])
        full = make_ring_mixture(mixture, ds.n_total)
        reference = make_ring_mixture(MixtureSpec(ds.k, ds.ring_radius, ds.sigma, [seed, 4]),
                                      max(cfg.eval_samples, ds.k)).points
    else:
        mixture = None
        full = _idx_data(ds.image_path, ds.label_path, ds.image_side)
        ref_idx = np.random.default_rng([seed, 4]).choice(len(full), size=min(cfg.eval_samples, len(full)),
                                                          replace=False)
        reference = full.points[ref_idx]
    train = subsample_training_set(full, min(ds.train_size, len(full)), [seed, 2])
    part = partition_noniid(train, cfg.N, ds.partition, ds.skew_alpha, [seed, 3])
    shards = [train.points[idx].astype(DTYPE) for idx in part.client_shards]
    eval_noise = sample_noise(cfg.z_dim, cfg.eval_samples, [seed, 5], DTYPE)
    return RunData(train, part, shards, reference, scoring_classifier(cfg, cache_dir),
                   mixture, eval_noise)


def evaluate(state: RoundState, data: RunData) -> MetricReport:
    """Score the best live G-sync generator (by proxy IS) on the fixed evaluation noise."""
    spec_g = state.spec_g

    def score(w):
        return metrics.proxy_is(nn.forward(spec_g, w, data.eval_noise), data.classifier)

    sync, best, best_is = terminate(state, score, with_details=True)
    samples = nn.forward(spec_g, best, data.eval_noise).astype(np.float64)
    if data.mixture is not None:
        fd = metrics.frechet_2d(data.reference, samples)
        counts = metrics.mode_counts(samples, data.mixture)
        cov = int((counts >= metrics.default_min_count(len(samples))).sum())
    else:
        fd = metrics.frechet_distance(data.reference, samples)
        cov, counts = metrics.class_coverage(samples, data.classifier)
    return MetricReport(state.round, best_is, fd, cov, [int(c) for c in counts], str(sync))


def is_metric_round(cfg: RunConfig, rnd: int) -> bool:
    return rnd % cfg.metric_every == 0 or rnd == cfg.epochs


# --- single runs -------------------------------------------------------------

def run_single(cfg: RunConfig, out_dir=None, resume=None, workers: int = 1,
               data: RunData | None = None):
    """Execute one run; returns ``(rows, final_state)``.

    With ``out_dir`` a checkpoint is written at every metric round. ``resume``
    names a checkpoint directory to continue from.
    """
    ckpt_root = None if out_dir is None else Path(out_dir) / "checkpoints"
    state = None
    if resume is not None:
        state, _ = load_checkpoint(resume)
        # the checkpoint's own config wins; only the round budget may be extended
        if cfg is not None and cfg.epochs != state.config.epochs:
            state.config = state.config.replace(epochs=cfg.epochs)
        cfg = state.config
    data = data or prepare_data(cfg, out_dir)
    rows: list[ResultRow] = []
    t0 = time.perf_counter()

    def on_round(st: RoundState):
        if not is_metric_round(cfg, st.round):
            return
        rep = evaluate(st, data)
        rows.append(ResultRow(cfg.run_id, cfg.arch, cfg.N, cfg.X, cfg.Y, cfg.seed, st.round,
                              rep.proxy_is, rep.frechet, rep.mode_coverage, time.perf_counter() - t0))
        if ckpt_root is not None:
            save_checkpoint(st, checkpoint_dir(ckpt_root, cfg.run_id, st.round), asdict(rep))

    try:
        state = run(cfg, data.shards, state=state, on_round=on_round, workers=workers)
    except NonFiniteWeightsError as e:
        failed_round = (rows[-1].round if rows else 0) + 1
        log.error("run %s aborted: %s", cfg.run_id, e)
        rows.append(ResultRow(cfg.run_id, cfg.arch, cfg.N, cfg.X, cfg.Y, cfg.seed, failed_round,
                              float("nan"), float("nan"), -1, time.perf_counter() - t0))
        state = None
    return rows, state


def _run_worker(args):
    cfg, out_dir = args
    rows, _ = run_single(cfg, out_dir)
    return rows


def run_experiment(plan: ExperimentPlan, out_dir=None, threads: int = 1) -> list[ResultRow]:
    """Run ``archs x client_counts x seeds``; rows come back in plan order."""
    out_dir = out_dir or plan.out
    configs = plan.run_configs()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
        if any(c.dataset.kind == "ring" for c in configs):
            scoring_classifier(configs[0], out_dir)  # persist once before workers fork
    jobs = [(c, out_dir) for c in configs]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            per_run = list(pool.map(_run_worker, jobs))
    else:
        per_run = [_run_worker(j) for j in jobs]
    rows = [r for rs in per_run for r in rs]
    if out_dir is not None:
        write_results_csv(rows, Path(out_dir) / "results.csv")
        summary = report(rows, plan.dataset_name)
        write_summary(summary, Path(out_dir))
    return rows


def run_attack(cfg: RunConfig, out_dir=None, workers: int = 1, n_samples: int = 1000) -> dict:
    """Run a configuration with an attack schedule and measure what a free-rider can sample."""
    if cfg.attack is None:
        raise ConfigError("attack", "attack runs need an attack specification")
    data = prepare_data(cfg, out_dir)
    rows, state = run_single(cfg, out_dir, workers=workers, data=data)
    result = {"run_id": cfg.run_id, "attack": cfg.attack.to_dict(), "final": asdict(rows[-1])}
    if state is not None and cfg.attack.kind == "free_rider":
        client = min(cfg.attack.malicious_clients)
        leaked = extract_inference_samples(state, client, n_samples, [cfg.seed, 6]).astype(np.float64)
        rep = evaluate(state, data)
        result["leak"] = {
            "client": client,
            "leaked_frechet": metrics.frechet_distance(data.reference, leaked),
            "global_frechet": rep.frechet,
            "global_mode_coverage": rep.mode_coverage,
        }
        if data.mixture is not None:
            result["leak"]["leaked_mode_coverage"] = metrics.mode_coverage(leaked, data.mixture)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_results_csv(rows, Path(out_dir) / "results.csv")
        (Path(out_dir) / "attack.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


# --- CSV and reporting ---------------------------------------------------------

def write_results_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_fields())


def read_results_csv(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns {reader.fieldnames}")
        return [ResultRow(r["run_id"], r["arch"], int(r["N"]), int(r["X"]), int(r["Y"]), int(r["seed"]),
                          int(r["round"]), float(r["proxy_is"]), float(r["frechet"]),
                          int(r["mode_coverage"]), float(r["wall_seconds"])) for r in reader]


@dataclass
class SummaryRow:
    arch: str
    dataset: str
    runs: int
    is_min: float
    is_max: float
    is_mean: float
    frechet_min: float
    frechet_max: float
    frechet_mean: float
    stability: float


def final_rows(rows) -> dict:
    """Last row of every run that finished without a NaN abort."""
    last: dict[str, ResultRow] = {}
    for r in rows:
        if r.run_id not in last or r.round >= last[r.run_id].round:
            last[r.run_id] = r
    return {k: v for k, v in last.items() if not v.failed}


def report(rows, dataset: str = "ring8") -> list[SummaryRow]:
    """Min/max/mean of final scores across client counts, plus Fréchet stability.

    Seeds are averaged within each client count first.
    """
    finals = final_rows(rows)
    out = []
    for arch in dict.fromkeys(r.arch for r in finals.values()):
        by_n: dict[int, list[ResultRow]] = {}
        for r in finals.values():
            if r.arch == arch:
                by_n.setdefault(r.N, []).append(r)
        ns = sorted(by_n)
        is_n = [float(np.mean([r.proxy_is for r in by_n[n]])) for n in ns]
        fd_n = [float(np.mean([r.frechet for r in by_n[n]])) for n in ns]
        out.append(SummaryRow(arch, dataset, sum(len(v) for v in by_n.values()),
                              min(is_n), max(is_n), float(np.mean(is_n)),
                              min(fd_n), max(fd_n), float(np.mean(fd_n)), metrics.stability(fd_n)))
    return out


SUMMARY_COLUMNS = ("arch", "dataset", "runs", "is_min", "is_max", "is_mean",
                   "frechet_min", "frechet_max", "frechet_mean", "stability")


def format_summary(summary) -> str:
    head = f"{'arch':<12} {'dataset':<8} {'runs':>4} {'IS min':>8} {'IS max':>8} {'IS mean':>8} " \
           f"{'FD min':>9} {'FD max':>9} {'FD mean':>9} {'stability':>9}"
    lines = [head, "-" * len(head)]
    for s in summary:
        lines.append(f"{s.arch:<12} {s.dataset:<8} {s.runs:>4} {s.is_min:>8.3f} {s.is_max:>8.3f} "
                     f"{s.is_mean:>8.3f} {s.frechet_min:>9.4f} {s.frechet_max:>9.4f} "
                     f"{s.frechet_mean:>9.4f} {s.stability:>9.4f}")
    return "\n".join(lines)


def write_summary(summary, out_dir) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summary:
            w.writerow([getattr(s, c) if c in ("arch", "dataset", "runs") else repr(getattr(s, c))
                        for c in SUMMARY_COLUMNS])
    (out_dir / "summary.txt").write_text(format_summary(summary) + "\n")


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("FEDGAN_THREADS", "1")))
    except ValueError:
        return 1
