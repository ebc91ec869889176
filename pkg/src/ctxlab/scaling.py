"""Optimal-context analysis: the three-term loss model, the (dataset size x
context length) training sweep, and the capped nearest-neighbour distance
sandbox behind the data-scaling exponent.

The loss model is  H(D, l) = c0 + c / l**gamma + A(l) / D**alpha(l)  with
dim(l) = dim_inf - c_dim / l**gamma, alpha(l) = c_alpha / dim(l) and
A(l) = a0 * l**beta: an irreducible-risk term that falls with context length
plus a data-limited term that grows with it, so finite data admits an
optimal context length that moves right as the dataset grows.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nn
from .numerics import fit_linear
from .parity import ParityConfig, bayes_risk, config_from_json, config_to_json, decompose_loss, split_disjoint


# ---------------------------------------------------------------------------
# Analytic loss model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossModelParams:
    c0: float
    c: float
    gamma: float
    dim_inf: float
    c_dim: float
    c_alpha: float
    a0: float
    beta: float

    def __post_init__(self):
        if self.gamma <= 0 or self.c_alpha <= 0 or self.dim_inf <= 0:
            raise ValueError("gamma, c_alpha and dim_inf must be positive")
        if self.c < 0 or self.c_dim < 0 or self.a0 < 0 or self.beta < 0:
            raise ValueError("c, c_dim, a0 and beta must be non-negative")

    def dim(self, l) -> float:
        return self.dim_inf - self.c_dim * float(l) ** (-self.gamma)

    def alpha(self, l) -> float:
        return self.c_alpha / self.dim(l)


def model_loss(params: LossModelParams, D, l) -> float:
    """Evaluate the three-term loss (nats) at dataset size D, context l."""
    D = float(D)
    l = float(l)
    if D < 1 or l < 1:
        raise ValueError("need D >= 1 and l >= 1")
    dim = params.dim(l)
    if dim <= 0:
        raise ValueError(f"loss model has non-positive dimension at l={l}")
    bayes_part = params.c0 + params.c * l ** (-params.gamma)
    approx_part = params.a0 * l**params.beta * D ** (-params.c_alpha / dim)
    return bayes_part + approx_part


def optimal_context(params: LossModelParams, D, l_grid) -> int:
    """Smallest grid context length minimizing the model loss at size D."""
    grid = [int(l) for l in l_grid]
    if not grid:
        raise ValueError("context-length grid must be nonempty")
    if sorted(grid) != grid:
        raise ValueError("context-length grid must be ascending")
    losses = [model_loss(params, D, l) for l in grid]
    best = min(range(len(grid)), key=lambda i: (losses[i], grid[i]))
    return grid[best]


# ---------------------------------------------------------------------------
# Training sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    dataset_size: int
    context_length: int
    seed: int
    final_val_ce: float
    bayes_risk: float
    approx_loss: float
    epochs: int
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "dataset_size": self.dataset_size,
            "context_length": self.context_length,
            "seed": self.seed,
            "final_val_ce": self.final_val_ce,
            "bayes_risk": self.bayes_risk,
            "approx_loss": self.approx_loss,
            "epochs": self.epochs,
            "wall_time_s": self.wall_time_s,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        return cls(
            dataset_size=int(doc["dataset_size"]),
            context_length=int(doc["context_length"]),
            seed=int(doc["seed"]),
            final_val_ce=float(doc["final_val_ce"]),
            bayes_risk=float(doc["bayes_risk"]),
            approx_loss=float(doc["approx_loss"]),
            epochs=int(doc["epochs"]),
            wall_time_s=float(doc["wall_time_s"]),
        )


@dataclass
class SweepReport:
    records: list[RunRecord]
    failed_cells: list[dict]
    optimal_l: dict[int, int]          # dataset size -> smallest argmin l
    optimal_l_monotone: bool

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in sorted(
                self.records,
                key=lambda r: (r.dataset_size, r.context_length, r.seed))],
            "failed_cells": self.failed_cells,
            "optimal_l": {str(k): v for k, v in sorted(self.optimal_l.items())},
            "optimal_l_monotone": self.optimal_l_monotone,
        }


@dataclass(frozen=True)
class SweepPlan:
    """Everything needed to reproduce one sweep."""

    config: ParityConfig
    hidden_dims: tuple[int, ...]
    train_config: nn.TrainConfig
    dataset_sizes: tuple[int, ...]
    context_lengths: tuple[int, ...]
    seeds: tuple[int, ...]
    n_val: int = 50000

    def cells(self):
        for D in self.dataset_sizes:
            for l in self.context_lengths:
                for seed in self.seeds:
                    yield D, l, seed


def _cell_receipt_name(D: int, l: int, seed: int) -> str:
    return f"cell_D{D}_l{l}_s{seed}.json"


# Early stopping counts epochs, so an epoch must mean a comparable number of
# optimizer steps at every dataset size; the reference recipe takes ~200 steps
# per epoch, and sweep cells scale their batch down with D to preserve that.
STEPS_PER_EPOCH = 200


def _cell_batch_size(configured: int, dataset_size: int) -> int:
    return max(1, min(configured, dataset_size // STEPS_PER_EPOCH,
                      dataset_size))


def run_cell(plan: SweepPlan, D: int, l: int, seed: int) -> RunRecord:
    """Train one grid cell on its own disjoint splits and evaluate against
    the exact posterior, so val_ce - bayes - approx cancels to float precision."""
    t0 = time.time()
    cell_ss = np.random.SeedSequence([plan.train_config.seed, seed, D, l])
    data_seed, model_seed = cell_ss.spawn(2)
    train_set, val_set = split_disjoint(plan.config, D, plan.n_val, data_seed)
    T = plan.config.n_control_bits
    spec = nn.MlpSpec(layer_dims=(l + T, *plan.hidden_dims, 1),
                      seed=int(model_seed.generate_state(1)[0]))
    cfg = replace(plan.train_config,
                  batch_size=_cell_batch_size(plan.train_config.batch_size, D),
                  seed=int(model_seed.generate_state(2)[1]))
    model, history = nn.train(spec, cfg, train_set, val_set)
    probs = nn.predict_proba_dataset(model, val_set, l)
    dec = decompose_loss(probs, val_set, l, use_exact_posterior=True)
    return RunRecord(
        dataset_size=D, context_length=l, seed=seed,
        final_val_ce=dec.total_ce, bayes_risk=dec.bayes_risk,
        approx_loss=dec.approx_loss, epochs=len(history.val_loss),
        wall_time_s=time.time() - t0,
    )


def _run_cell_job(args):
    plan_doc, D, l, seed = args
    plan = _plan_from_doc(plan_doc)
    try:
        return ("ok", run_cell(plan, D, l, seed))
    except Exception as exc:  # single cell failure must not kill the sweep
        return ("failed", {"dataset_size": D, "context_length": l, "seed": seed,
                           "error": f"{type(exc).__name__}: {exc}"})


def _plan_to_doc(plan: SweepPlan) -> dict:
    return {
        "config": json.loads(config_to_json(plan.config)),
        "hidden_dims": list(plan.hidden_dims),
        "train_config": {
            "learning_rate": plan.train_config.learning_rate,
            "weight_decay": plan.train_config.weight_decay,
            "batch_size": plan.train_config.batch_size,
            "max_epochs": plan.train_config.max_epochs,
            "patience": plan.train_config.patience,
            "seed": plan.train_config.seed,
        },
        "dataset_sizes": list(plan.dataset_sizes),
        "context_lengths": list(plan.context_lengths),
        "seeds": list(plan.seeds),
        "n_val": plan.n_val,
    }


def _plan_from_doc(doc: dict) -> SweepPlan:
    tc = doc["train_config"]
    return SweepPlan(
        config=config_from_json(json.dumps(doc["config"])),
        hidden_dims=tuple(doc["hidden_dims"]),
        train_config=nn.TrainConfig(
            learning_rate=float(tc["learning_rate"]),
            weight_decay=float(tc["weight_decay"]),
            batch_size=int(tc["batch_size"]),
            max_epochs=int(tc["max_epochs"]),
            patience=int(tc["patience"]),
            seed=int(tc["seed"]),
        ),
        dataset_sizes=tuple(doc["dataset_sizes"]),
        context_lengths=tuple(doc["context_lengths"]),
        seeds=tuple(doc["seeds"]),
        n_val=int(doc["n_val"]),
    )


def summarize_records(records: list[RunRecord], failed: list[dict]) -> SweepReport:
    """Per-D argmin over mean val CE, ties toward smaller l, plus monotonicity."""
    by_cell: dict[tuple[int, int], list[float]] = {}
    for r in records:
        by_cell.setdefault((r.dataset_size, r.context_length), []).append(r.final_val_ce)
    optimal: dict[int, int] = {}
    for D in sorted({k[0] for k in by_cell}):
        ls = sorted(l for (d, l) in by_cell if d == D)
        if len(ls) < 2:
            continue
        means = [float(np.mean(by_cell[(D, l)])) for l in ls]
        best = min(range(len(ls)), key=lambda i: (means[i], ls[i]))
        optimal[D] = ls[best]
    sizes = sorted(optimal)
    monotone = all(optimal[a] <= optimal[b] for a, b in zip(sizes, sizes[1:]))
    return SweepReport(records=records, failed_cells=failed,
                       optimal_l=optimal, optimal_l_monotone=monotone)


def run_sweep(plan: SweepPlan, out_dir=None, jobs: int = 1) -> SweepReport:
    """Train the full (D, l, seed) grid, skipping cells already receipted in
    ``out_dir``; single failed cells are recorded and the sweep continues."""
    receipts_dir = None
    if out_dir is not None:
        receipts_dir = Path(out_dir) / "cells"
        receipts_dir.mkdir(parents=True, exist_ok=True)

    records: list[RunRecord] = []
    failed: list[dict] = []
    pending = []
    for D, l, seed in plan.cells():
        if receipts_dir is not None:
            receipt = receipts_dir / _cell_receipt_name(D, l, seed)
            if receipt.exists():
                doc = json.loads(receipt.read_text())
                if doc.get("status") == "ok":
                    records.append(RunRecord.from_dict(doc["record"]))
                    continue
                # failed receipts are retried
        pending.append((D, l, seed))

    def _store(status, payload, D, l, seed):
        if status == "ok":
            records.append(payload)
            doc = {"status": "ok", "record": payload.to_dict()}
        else:
            failed.append(payload)
            doc = {"status": "failed", **payload}
        if receipts_dir is not None:
            tmp = receipts_dir / (_cell_receipt_name(D, l, seed) + ".tmp")
            tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            tmp.replace(receipts_dir / _cell_receipt_name(D, l, seed))

    if jobs > 1 and len(pending) > 1:
        plan_doc = _plan_to_doc(plan)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = pool.map(_run_cell_job, [(plan_doc, D, l, s) for D, l, s in pending])
            for (D, l, seed), (status, payload) in zip(pending, outcomes):
                _store(status, payload, D, l, seed)
    else:
        for D, l, seed in pending:
            status, payload = _run_cell_job((_plan_to_doc(plan), D, l, seed))
            _store(status, payload, D, l, seed)

    return summarize_records(records, failed)


def write_sweep_outputs(report: SweepReport, out_dir) -> tuple[Path, Path]:
    """Emit sweep_report.json and sweep_grid.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "sweep_report.json"
    tmp = report_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    tmp.replace(report_path)

    grid_path = out / "sweep_grid.csv"
    tmp = grid_path.with_suffix(".csv.tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write("D,l,seed,val_ce,bayes_risk,approx_loss,epochs,wall_time_s\n")
        for r in sorted(report.records,
                        key=lambda r: (r.dataset_size, r.context_length, r.seed)):
            fh.write(",".join([
                str(r.dataset_size), str(r.context_length), str(r.seed),
                repr(r.final_val_ce), repr(r.bayes_risk), repr(r.approx_loss),
                str(r.epochs), repr(r.wall_time_s),
            ]) + "\n")
    tmp.replace(grid_path)
    return report_path, grid_path


# ---------------------------------------------------------------------------
# Capped nearest-neighbour distance sandbox
# ---------------------------------------------------------------------------


def capped_nn_mean(points, cap: float) -> float:
    """Mean over points of min(cap, distance to nearest other point).

    Exact all-pairs computation, chunked; intended for n <= 2e4.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")
    if not (cap > 0):
        raise ValueError("cap must be positive")
    sq = np.sum(x * x, axis=1)
    best = np.full(n, np.inf)
    chunk = max(1, int(2e7) // max(1, n))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (x[start:stop] @ x.T)
        np.clip(d2, 0.0, None, out=d2)
        idx = np.arange(start, stop)
        d2[idx - start, idx] = np.inf
        best[start:stop] = np.minimum(best[start:stop], d2.min(axis=1))
    return float(np.mean(np.minimum(np.sqrt(best), cap)))


def sample_density(kind: str, d: int, n: int, rng: np.random.Generator,
                   eps: float = 0.5) -> np.ndarray:
    """Draw n points from one of the sandbox densities.

    ``heavy-tail`` is a multivariate Student-t whose degrees of freedom are
    chosen so the admissible negative-moment order is ``eps``: small eps
    means heavier low-density tails and a shallower distance-scaling slope.
    """
    if kind == "uniform-cube":
        return rng.random((n, d))
    if kind == "gaussian":
        return rng.standard_normal((n, d))
    if kind == "heavy-tail":
        if not (0 < eps < 1):
            raise ValueError("heavy-tail eps must lie in (0, 1)")
        nu = d * eps / (1.0 - eps)
        g = rng.standard_normal((n, d))
        chi = rng.chisquare(nu, size=n)
        return g / np.sqrt(chi / nu)[:, None]
    raise ValueError(f"unknown density {kind!r}")


@dataclass(frozen=True)
class NnScalingResult:
    exponent: float
    intercept: float
    r_squared: float
    dataset_sizes: tuple[int, ...]
    mean_distances: tuple[float, ...]
    degenerate: bool = False


def nn_scaling_exponent(d: int, density: str, D_grid, trials: int, cap: float,
                        seed, eps: float = 0.5) -> NnScalingResult:
    """Log-log slope of the mean capped nearest-neighbour distance vs D."""
    grid = sorted(int(v) for v in D_grid)
    if len(grid) < 2 or grid[0] < 2:
        raise ValueError("need a D grid of at least 2 sizes, all >= 2")
    if math.log10(grid[-1] / grid[0]) < 2 - 1e-9:
        raise ValueError("D grid should span at least 2 decades")
    if trials < 10:
        raise ValueError("need at least 10 trials per grid point")
    rng = np.random.default_rng(seed)
    means = []
    for D in grid:
        vals = [capped_nn_mean(sample_density(density, d, D, rng, eps), cap)
                for _ in range(trials)]
        means.append(float(np.mean(vals)))
    if min(means) <= 0:
        return NnScalingResult(0.0, 0.0, 0.0, tuple(grid), tuple(means), degenerate=True)
    fit = fit_linear(np.log(np.asarray(grid, dtype=float)), np.log(np.asarray(means)))
    degenerate = not math.isfinite(fit.slope) or fit.r_squared < 0.5
    return NnScalingResult(
        exponent=fit.slope, intercept=fit.intercept, r_squared=fit.r_squared,
        dataset_sizes=tuple(grid), mean_distances=tuple(means),
        degenerate=degenerate,
    )
