"""Mini-batch Adam training of the Y/Z networks on the rollout loss."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import networks, rng
from .problems import ProblemSpec, get_problem, load_problem_file, read_key_values
from .rollout import evaluate_loss, make_fields, rollout
from .sde import PathBatch, TimeGrid, sample_paths


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    problem: str = "example1a"
    problem_file: str = ""
    N: int = 20
    M_train: int = 2**18
    M_batch: int = 2**11
    K_epoch: int = 10
    lr0: float = 0.005
    decay_rate: float = 0.2  # lr after epoch e is lr0 * exp(-decay_rate * e)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    M_val: int = 2**12
    y_width: int = 50
    z_width: int = 100
    depth: int = 3
    time_scale: float = 1.0
    divergence_factor: float = 1e6
    max_rows: int = 2**17  # z-net rows per sub-batch; fixes the sub-batch split
    threads: int = 1

    def validate(self) -> None:
        checks = {
            "N": self.N >= 1,
            "M_batch": self.M_batch >= 1,
            "M_train": self.M_train >= 1 and self.M_train % self.M_batch == 0,
            "K_epoch": self.K_epoch >= 0,
            "lr0": self.lr0 > 0,
            "beta1": 0 <= self.beta1 < 1,
            "beta2": 0 <= self.beta2 < 1,
            "eps": self.eps > 0,
            "M_val": self.M_val >= 1,
            "threads": self.threads >= 1,
            "seed": self.seed >= 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid config field {name!r}: {getattr(self, name)!r}")

    @property
    def K_batch(self) -> int:
        return self.M_train // self.M_batch

    def lr(self, epoch: int) -> float:
        return self.lr0 * math.exp(-self.decay_rate * epoch)

    def sub_batches(self) -> int:
        """Power-of-two split of a mini-batch keeping each tape under max_rows."""
        pairs = self.N * (self.N + 1) // 2
        count = 1
        while count < self.M_batch and (self.M_batch // count) * pairs > self.max_rows:
            count *= 2
        return count

    def build_problem(self) -> ProblemSpec:
        if self.problem_file:
            return load_problem_file(self.problem_file)
        return get_problem(self.problem)


PROFILES = {
    "paper": dict(M_train=2**18, M_batch=2**11, K_epoch=10),
    "desk": dict(M_train=2**14, M_batch=2**9, K_epoch=10),
}


def profile_config(profile: str, **overrides) -> TrainConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    config = TrainConfig(**{**PROFILES[profile], **overrides})
    config.validate()
    return config


def _coerce(value: str, kind):
    if kind in (int, "int"):
        return int(float(value)) if "e" in value.lower() or "." in value else int(value, 0)
    if kind in (float, "float"):
        return float(value)
    return value


def load_config(path: str | Path, **overrides) -> TrainConfig:
    """Read ``key = value`` lines; an optional ``profile`` key seeds the defaults."""
    entries = read_key_values(path)
    base = dict(PROFILES[entries.pop("profile")]) if "profile" in entries else {}
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for key, value in entries.items():
        if key not in kinds:
            raise ValueError(f"unknown config field {key!r} in {path}")
        try:
            base[key] = _coerce(value, kinds[key])
        except ValueError as exc:
            raise ValueError(f"invalid config field {key!r}: {value!r}") from exc
    config = TrainConfig(**{**base, **overrides})
    config.validate()
    return config


def write_config(config: TrainConfig, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(config, f.name)!r}".replace("'", "") for f in dataclasses.fields(config)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: networks.NetworkParams) -> "AdamState":
        return cls({n: np.zeros_like(a) for n, a in params.arrays.items()},
                   {n: np.zeros_like(a) for n, a in params.arrays.items()})


def adam_step(params: networks.NetworkParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new params, new state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for parameter {name}")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    arrays, m_new, v_new = {}, {}, {}
    for name, value in params.arrays.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        arrays[name] = value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name], v_new[name] = m, v
    return params.with_arrays(arrays), AdamState(m_new, v_new, step)


# -- training ----------------------------------------------------------------

def loss_and_grads(problem, grid: TimeGrid, batch: PathBatch, params, time_scale: float = 1.0):
    with ad.Tape() as tape:
        fields = make_fields(problem, params, trainable=True, time_scale=time_scale)
        result = rollout(problem, grid, batch, fields)
    names = params.names()
    grads = ad.gradients(tape, result.loss, [fields.leaves[n] for n in names])
    return result.loss_value, dict(zip(names, grads))


def batch_loss_and_grads(problem, grid, batch: PathBatch, params, config: TrainConfig,
                         pool: Optional[ThreadPoolExecutor] = None):
    """Split into a fixed number of sub-batches, then reduce in order."""
    parts = np.array_split(np.arange(batch.M), min(config.sub_batches(), batch.M))
    jobs = [(batch.subset(p), p.size / batch.M) for p in parts]

    def run(job):
        sub, _ = job
        return loss_and_grads(problem, grid, sub, params, config.time_scale)

    outputs = list(pool.map(run, jobs)) if pool is not None else [run(j) for j in jobs]
    loss = 0.0
    grads = {n: np.zeros_like(a) for n, a in params.arrays.items()}
    for (_, weight), (sub_loss, sub_grads) in zip(jobs, outputs):
        loss += weight * sub_loss
        for n in grads:
            grads[n] += weight * sub_grads[n]
    return loss, grads


@dataclass
class TraceRow:
    step: int
    epoch: int
    lr: float
    train_loss: float
    val_loss: Optional[float] = None


@dataclass
class TrainReport:
    config: TrainConfig
    trace: list[TraceRow] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)  # entry 0 is before training
    epoch_seconds: list[float] = field(default_factory=list)
    train_seconds: float = 0.0

    def write_trace_csv(self, path: str | Path) -> None:
        write_trace_csv(self.trace, path)


def write_trace_csv(trace: list[TraceRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "lr", "train_loss", "val_loss"])
        for row in trace:
            val = "" if row.val_loss is None else repr(row.val_loss)
            writer.writerow([row.step, row.epoch, repr(row.lr), repr(row.train_loss), val])


def validation_paths(problem, grid: TimeGrid, M_val: int, seed: int) -> PathBatch:
    if M_val < 1:
        raise ValueError("M_val must be at least 1")
    return sample_paths(problem, grid, M_val, seed, stream=rng.VALIDATION)


def validate(params, problem, grid: TimeGrid, M_val: int, seed_val: int,
             time_scale: float = 1.0, closed_form: bool = False,
             paths: Optional[PathBatch] = None) -> float:
    """Rollout loss on the validation stream, without a tape."""
    if paths is None:
        paths = validation_paths(problem, grid, M_val, seed_val)
    fields = make_fields(problem, params, closed_form=closed_form, time_scale=time_scale)
    return evaluate_loss(problem, grid, paths, fields).loss_value


def train(config: TrainConfig, problem: Optional[ProblemSpec] = None,
          params: Optional[networks.NetworkParams] = None, log=None):
    """Run the epoch/mini-batch schedule. Returns ``(params, report)``."""
    config.validate()
    problem = problem or config.build_problem()
    grid = TimeGrid(problem.T, config.N)
    if params is None:
        params = networks.init(config.seed, problem.d, problem.ell, y_width=config.y_width,
                               z_width=config.z_width, depth=config.depth)
    report = TrainReport(config)
    train_paths = sample_paths(problem, grid, config.M_train, config.seed, stream=rng.TRAIN)
    val_paths = validation_paths(problem, grid, config.M_val, config.seed)

    def val_loss(p):
        return validate(p, problem, grid, config.M_val, config.seed, config.time_scale, paths=val_paths)

    report.val_losses.append(val_loss(params))
    state = AdamState.zeros(params)
    initial = None
    started = time.perf_counter()
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        step = 0
        for epoch in range(config.K_epoch):
            epoch_start = time.perf_counter()
            lr = config.lr(epoch)
            order = np.random.default_rng([config.seed, epoch]).permutation(config.M_train)
            for b in range(config.K_batch):
                idx = np.sort(order[b * config.M_batch:(b + 1) * config.M_batch])
                loss, grads = batch_loss_and_grads(problem, grid, train_paths.subset(idx), params, config, pool)
                initial = loss if initial is None else initial
                report.trace.append(TraceRow(step, epoch, lr, loss))
                if not math.isfinite(loss) or loss > config.divergence_factor * initial:
                    raise TrainingDiverged(f"loss {loss:.3e} at step {step} exceeds "
                                           f"{config.divergence_factor:g} x initial {initial:.3e}", report.trace)
                params, state = adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps)
                step += 1
            report.val_losses.append(val_loss(params))
            report.trace[-1].val_loss = report.val_losses[-1]
            report.epoch_seconds.append(time.perf_counter() - epoch_start)
            if log is not None:
                log(f"epoch {epoch + 1}/{config.K_epoch} lr={lr:.5f} "
                    f"train={report.trace[-1].train_loss:.4e} val={report.val_losses[-1]:.4e}")
    finally:
        if pool is not None:
            pool.shutdown()
    report.train_seconds = time.perf_counter() - started
    params.meta.update({"problem": problem.name, "seed": str(config.seed), "N": str(config.N)})
    return params, report
