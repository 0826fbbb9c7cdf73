"""Run execution: seeding, per-step telemetry, CSV and manifest output.

Each (method, eta, seed) combination is an independent run writing one
CSV with the fixed header ``step,loss,oracle_gap,flops,wall_ms``.  Row
``t`` records the loss of the iterate *before* step ``t`` (so row 0 is
the initial loss).  Factor trajectories are optionally saved alongside
for cross-run product-distance reports.  Runs execute sequentially;
failures are recorded in the manifest and do not stop the remaining
runs.
"""

import json
import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import nets, optim
from ..errors import OploraError
from ..instrument import counters
from ..lowrank import (FactorPair, product_distance, product_distance_to_dense,
                       truncated_svd)
from .aggregate import write_aggregate
from .config import ExperimentConfig

RUN_HEADER = "step,loss,oracle_gap,flops,wall_ms"


def _f17(x) -> str:
    return format(float(x), ".17g")


@dataclass
class RunRecord:
    step: int
    loss: float
    oracle_gap: Optional[float]
    flops: int
    wall_ms: float


def write_run_csv(path, records):
    with open(path, "w") as fh:
        fh.write(RUN_HEADER + "\n")
        for rec in records:
            gap = "" if rec.oracle_gap is None else _f17(rec.oracle_gap)
            fh.write(f"{rec.step},{_f17(rec.loss)},{gap},"
                     f"{rec.flops},{_f17(rec.wall_ms)}\n")


def read_run_csv(path):
    records = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != RUN_HEADER:
            raise OploraError(f"unexpected CSV header in {path}: {header!r}")
        for line in fh:
            step, loss, gap, flops, wall = line.strip().split(",")
            records.append(RunRecord(
                int(step), float(loss),
                None if gap == "" else float(gap), int(flops), float(wall)))
    return records


def _seeded(*keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(list(keys))))


def _make_oplora_state(cfg, eta, seed, beta):
    hyper = optim.OploraConfig(
        eta=eta, alpha=cfg.alpha, lambda_u=cfg.lam, lambda_v=cfg.lam,
        beta=beta, delta=cfg.delta, num_iters=cfg.k,
        momentum_rank=cfg.momentum_rank, metric_rank=cfg.metric_rank)
    return optim.OploraState(hyper, init_seed=seed)


class _FactorMethod:
    """Any method whose iterate is the adapter pair of a single layer."""

    def __init__(self, cfg, eta, seed, init_pair, w0=None):
        self.cfg = cfg
        self.eta = eta
        self.layer = nets.LoraLinear(w0, init_pair.copy())
        m = cfg.method
        if m in ("oplora", "oplora_scaled"):
            self.state = _make_oplora_state(cfg, eta, seed, cfg.beta)
        elif m == "oplora_proj":
            self.state = optim.ProjMomentumState.like(init_pair)
        elif m == "lora_sgd":
            self.state = optim.SgdState.like(init_pair)
        elif m == "lora_adamw":
            self.state = optim.AdamwState.like(init_pair)
        else:
            self.state = None  # prec_lora is stateless

    @property
    def pair(self) -> FactorPair:
        return self.layer.adapter

    def step(self):
        m = self.cfg.method
        if m in ("oplora", "oplora_scaled"):
            optim.oplora_step(self.layer, self.state)
        elif m == "oplora_proj":
            optim.proj_lora_step(self.layer, self.state, self.eta,
                                 self.cfg.alpha, self.cfg.lam)
        elif m == "prec_lora":
            optim.prec_lora_step(self.layer, self.eta, self.cfg.lam)
        elif m == "lora_sgd":
            grads = nets.factor_grads(self.layer, consume=True)
            self.layer.adapter = optim.sgd_step(
                self.layer.adapter, grads, self.eta, self.cfg.alpha,
                self.state)
        elif m == "lora_adamw":
            grads = nets.factor_grads(self.layer, consume=True)
            self.layer.adapter = optim.adamw_step(
                self.layer.adapter, grads, self.eta, state=self.state)
        else:
            raise OploraError(f"not a factor method: {m}")


def _run_linear(cfg: ExperimentConfig, eta, seed):
    task_rng = _seeded(cfg.task.seed, 0)
    target = nets.make_linear_target(cfg.task.d_out, cfg.task.d_in,
                                     task_rng, cfg.task.singular_values)
    task = nets.LinearTask(
        target,
        None if cfg.batch.mode == "full" else cfg.batch.size,
        seed=cfg.task.seed)
    if cfg.task.init == "svd":
        init_pair = nets.init_adapter_svd(target, cfg.rank)
    else:
        init_pair = nets.init_adapter_random(cfg.task.d_out, cfg.task.d_in,
                                             cfg.rank, _seeded(cfg.task.seed, 1))
    oracle = truncated_svd(target, cfg.rank)
    oracle_dense = oracle.u @ oracle.v.T

    batch_rng = _seeded(seed, 2)
    method = cfg.method
    records = []
    trail_u, trail_v = [], []
    flops0 = counters().flops
    t0 = time.perf_counter()

    def wall_ms():
        if not cfg.timing:
            return 0.0
        return (time.perf_counter() - t0) * 1e3

    # the loss column always reports the full objective (cheap to get
    # thin for this task); minibatching only affects the gradients
    if method in ("svdlora", "full"):
        dense_w = init_pair.u @ init_pair.v.T
        state = optim.SvdLoraState(dense_w, np.zeros_like(dense_w))
        for t in range(cfg.steps):
            idx = nets.sample_batch(task, batch_rng)
            grad, _ = nets.linear_task_grad_dense(task, state.dense_weight,
                                                  idx)
            loss = 0.5 * float(
                np.sum((state.dense_weight - target) ** 2))
            gap = float(np.linalg.norm(state.dense_weight - oracle_dense))
            if cfg.record_factors and method == "svdlora":
                pair = truncated_svd(state.dense_weight, cfg.rank)
                trail_u.append(pair.u)
                trail_v.append(pair.v)
            records.append(RunRecord(t, loss, gap,
                                     counters().flops - flops0, wall_ms()))
            if method == "svdlora":
                optim.svdlora_step(state, grad, eta, cfg.alpha, cfg.rank)
            else:
                state.dense_momentum = cfg.alpha * state.dense_momentum + grad
                state.dense_weight = state.dense_weight \
                    - eta * state.dense_momentum
    else:
        driver = _FactorMethod(cfg, eta, seed, init_pair)
        for t in range(cfg.steps):
            idx = nets.sample_batch(task, batch_rng)
            left, right, _ = nets.linear_task_grad(task, driver.pair, idx)
            driver.layer.captured_x = right.T
            driver.layer.captured_s = left.T
            loss = 0.5 * product_distance_to_dense(driver.pair, target) ** 2
            gap = product_distance(driver.pair, oracle)
            if cfg.record_factors:
                trail_u.append(driver.pair.u.copy())
                trail_v.append(driver.pair.v.copy())
            records.append(RunRecord(t, loss, gap,
                                     counters().flops - flops0, wall_ms()))
            driver.step()
    trail = None
    if trail_u:
        trail = (np.stack(trail_u), np.stack(trail_v))
    return records, trail


class _MlpDriver:
    """Per-layer optimizer states over the synthetic MLP task."""

    def __init__(self, cfg, eta, seed, task, layers):
        self.cfg, self.eta, self.task = cfg, eta, task
        self.layers = layers
        m = cfg.method
        self.states = []
        self.dense = None
        if m == "svdlora":
            self.dense = [optim.SvdLoraState.from_pair(l.adapter)
                          for l in layers]
        elif m == "full":
            self.dense = [nets.DenseLinear(l.w0.copy()) for l in layers]
            self.dense_momenta = [np.zeros_like(l.w0) for l in layers]
        else:
            for layer in layers:
                if m in ("oplora", "oplora_scaled"):
                    self.states.append(
                        _make_oplora_state(cfg, eta, seed, cfg.beta))
                elif m == "oplora_proj":
                    self.states.append(optim.ProjMomentumState.like(layer.adapter))
                elif m == "lora_sgd":
                    self.states.append(optim.SgdState.like(layer.adapter))
                elif m == "lora_adamw":
                    self.states.append(optim.AdamwState.like(layer.adapter))
                else:
                    self.states.append(None)

    def loss_and_capture(self, xb, yb) -> float:
        if self.cfg.method == "full":
            return nets.mlp_forward_backward(self.task, self.dense, xb, yb)
        return nets.mlp_forward_backward(self.task, self.layers, xb, yb)

    def step(self):
        m = self.cfg.method
        if m == "full":
            for layer, mom in zip(self.dense, self.dense_momenta):
                grad = layer.weight_grad()
                mom *= self.cfg.alpha
                mom += grad
                layer.w = layer.w - self.eta * mom
                layer.clear_captures()
            return
        if m == "svdlora":
            for layer, state in zip(self.layers, self.dense):
                # dense baseline: the full gradient S^T X is materialized
                grad = layer.captured_s.T @ layer.captured_x
                layer.adapter = optim.svdlora_step(
                    state, grad, self.eta, self.cfg.alpha, self.cfg.rank)
                layer.clear_captures()
            return
        for layer, state in zip(self.layers, self.states):
            if m in ("oplora", "oplora_scaled"):
                optim.oplora_step(layer, state)
            elif m == "oplora_proj":
                optim.proj_lora_step(layer, state, self.eta, self.cfg.alpha,
                                     self.cfg.lam)
            elif m == "prec_lora":
                optim.prec_lora_step(layer, self.eta, self.cfg.lam)
            elif m == "lora_sgd":
                grads = nets.factor_grads(layer, consume=True)
                layer.adapter = optim.sgd_step(layer.adapter, grads, self.eta,
                                               self.cfg.alpha, state)
            elif m == "lora_adamw":
                grads = nets.factor_grads(layer, consume=True)
                layer.adapter = optim.adamw_step(layer.adapter, grads,
                                                 self.eta, state=state)


def _run_mlp(cfg: ExperimentConfig, eta, seed):
    task = nets.MlpTask(cfg.task.dims, cfg.task.nonlinearity, cfg.task.loss,
                        cfg.task.n_samples, seed=cfg.task.seed)
    data_rng = _seeded(cfg.task.seed, 3)
    x, y = nets.make_mlp_dataset(task, data_rng)
    layers = nets.make_mlp_layers(task, cfg.rank, _seeded(cfg.task.seed, 4))
    batch_rng = _seeded(seed, 5)
    driver = _MlpDriver(cfg, eta, seed, task, layers)
    records = []
    flops0 = counters().flops
    t0 = time.perf_counter()
    n = task.n_samples
    for t in range(cfg.steps):
        if cfg.batch.mode == "minibatch":
            rows = batch_rng.choice(n, size=cfg.batch.size, replace=False)
        else:
            rows = np.arange(n)
        loss = driver.loss_and_capture(x[rows], y[rows])
        wall = 0.0 if not cfg.timing else (time.perf_counter() - t0) * 1e3
        records.append(RunRecord(t, loss, None,
                                 counters().flops - flops0, wall))
        driver.step()
    return records, None


def run_single(cfg: ExperimentConfig, eta, seed):
    if cfg.task.kind == "linear":
        return _run_linear(cfg, eta, seed)
    return _run_mlp(cfg, eta, seed)


def _run_name(method, eta, seed) -> str:
    return f"{method}_eta{format(eta, '.6g')}_seed{seed}"


def run_experiment(cfg: ExperimentConfig, out_dir=None, quiet=False) -> dict:
    """Execute every (eta, seed) run of the config and aggregate.

    Returns the manifest dict (also written to ``manifest.json``).
    Optimizer errors mark the run failed; the remaining runs continue.
    """
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"schema_version": 1, "config": cfg.to_dict(), "runs": []}
    per_eta_records = {}
    for eta in cfg.etas():
        for seed in cfg.seeds:
            name = _run_name(cfg.method, eta, seed)
            entry = {"method": cfg.method, "eta": eta, "seed": seed,
                     "status": "ok", "error": None,
                     "csv": f"{name}.csv", "trail": None}
            try:
                records, trail = run_single(cfg, eta, seed)
            except OploraError as exc:
                entry["status"] = "failed"
                entry["error"] = f"{type(exc).__name__}: {exc}"
                entry["csv"] = None
                if not quiet:
                    print(f"[bench] {name}: FAILED ({entry['error']})")
            else:
                write_run_csv(os.path.join(out_dir, entry["csv"]), records)
                if trail is not None:
                    entry["trail"] = f"{name}.npz"
                    np.savez(os.path.join(out_dir, entry["trail"]),
                             u=trail[0], v=trail[1])
                per_eta_records.setdefault(eta, []).append(records)
                if not quiet:
                    print(f"[bench] {name}: ok "
                          f"(final loss {records[-1].loss:.6g})")
            manifest["runs"].append(entry)
    for eta, record_sets in per_eta_records.items():
        agg_path = os.path.join(
            out_dir, f"agg_{cfg.method}_eta{format(eta, '.6g')}.csv")
        write_aggregate(agg_path, record_sets)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def sweep_score(records) -> float:
    """Mean loss over the final 10% of steps; inf when non-finite."""
    losses = np.array([r.loss for r in records])
    tail = max(1, len(losses) // 10)
    score = float(np.mean(losses[-tail:]))
    return score if np.isfinite(score) else float("inf")


def lr_sweep(cfg: ExperimentConfig, out_dir=None, quiet=False):
    """Run the grid, score each eta, and emit a sorted sweep summary.

    The score of an eta is the median across seeds of the mean loss over
    the final 10% of steps; ties break toward the smaller eta and
    non-finite runs rank last.  Returns ``(best_eta, manifest)``.
    """
    from ..errors import SweepError

    out_dir = out_dir or cfg.out_dir
    manifest = run_experiment(cfg, out_dir=out_dir, quiet=quiet)
    by_eta = {}
    for entry in manifest["runs"]:
        if entry["status"] != "ok":
            continue
        records = read_run_csv(os.path.join(out_dir, entry["csv"]))
        by_eta.setdefault(entry["eta"], []).append(sweep_score(records))
    rows = []
    for eta in cfg.etas():
        scores = by_eta.get(eta)
        if not scores:
            rows.append((eta, float("inf"), "failed"))
        else:
            score = float(np.median(scores))
            status = "ok" if np.isfinite(score) else "divergent"
            rows.append((eta, score if np.isfinite(score) else float("inf"),
                         status))
    rows.sort(key=lambda r: (r[1], r[0]))
    with open(os.path.join(out_dir, "sweep_summary.csv"), "w") as fh:
        fh.write("eta,score,status\n")
        for eta, score, status in rows:
            stext = "inf" if not np.isfinite(score) else _f17(score)
            fh.write(f"{format(eta, '.6g')},{stext},{status}\n")
    finite = [r for r in rows if np.isfinite(r[1])]
    if not finite:
        raise SweepError("all sweep runs failed or diverged")
    best = finite[0][0]
    with open(os.path.join(out_dir, "sweep_best.json"), "w") as fh:
        json.dump({"best_eta": best, "score": finite[0][1]}, fh, indent=2)
    if not quiet:
        print(f"[bench] sweep best eta = {best}")
    return best, manifest
