"""Time grids, Brownian paths and Euler-Maruyama forward simulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng
from .autodiff import NonFiniteError, Tensor


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant partition of [0, T] with N steps; t_n = n h."""

    T: float
    N: int

    def __post_init__(self):
        if self.N < 1 or not self.T > 0:
            raise ValueError(f"need N >= 1 and T > 0, got N={self.N}, T={self.T}")

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.h

    def t(self, n: int) -> float:
        return n * self.h


@dataclass
class PathBatch:
    grid: TimeGrid
    dW: np.ndarray  # (M, N, ell)
    X: Optional[np.ndarray] = None  # (M, N+1, d); None for coupled problems until simulated
    seed: int = 0
    stream: int = rng.TRAIN
    path_offset: int = 0

    @property
    def M(self) -> int:
        return self.dW.shape[0]

    def subset(self, index) -> "PathBatch":
        X = None if self.X is None else self.X[index]
        return PathBatch(self.grid, self.dW[index], X, self.seed, self.stream, self.path_offset)


def _assert_finite(state: np.ndarray, step: int) -> None:
    bad = ~np.all(np.isfinite(state), axis=-1)
    if np.any(bad):
        path = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite forward state at path {path}, step {step}")


def euler_decoupled(problem, dW: np.ndarray, grid: TimeGrid, x0=None) -> np.ndarray:
    """X_{n+1} = X_n + b(t_n, X_n) h + sigma(t_n, X_n) dW_n, all paths at once."""
    if problem.coupled:
        raise ValueError(f"{problem.name} is coupled; use euler_coupled")
    M, N, _ = dW.shape
    if N != grid.N:
        raise ValueError(f"increments have {N} steps, grid has {grid.N}")
    x0 = problem.x0 if x0 is None else np.asarray(x0, dtype=np.float64)
    X = np.empty((M, N + 1, problem.d))
    X[:, 0] = x0
    h = grid.h
    for n in range(N):
        t = grid.t(n)
        x = X[:, n]
        X[:, n + 1] = x + problem.drift(t, x) * h + problem.diffusion(t, x, None, dW[:, n])
        _assert_finite(X[:, n + 1], n + 1)
    return X


def euler_coupled(problem, dW: np.ndarray, grid: TimeGrid, fields, x0=None):
    """Forward states whose coefficients consume Y_n and Z_{n,n} from ``fields``.

    Returns ``(X, Y, Zdiag)`` as lists indexed by step: X has N+1 entries of
    shape (M, d), Y has N+1 entries (M, 1), Zdiag has N entries (M, ell).
    When ``fields`` holds trainable leaves the states are tensors on the
    active tape, so gradients flow through the simulation.
    """
    M, N, _ = dW.shape
    if N != grid.N:
        raise ValueError(f"increments have {N} steps, grid has {grid.N}")
    x0 = problem.x0 if x0 is None else np.asarray(x0, dtype=np.float64)
    h = grid.h
    x = np.broadcast_to(x0, (M, problem.d)).copy()
    X, Y, Zdiag = [x], [], []
    for n in range(N):
        t = grid.t(n)
        y = fields.y(t, x)
        z_nn = fields.z(t, t, x, x)
        x_next = x + problem.drift(t, x, y, z_nn) * h + problem.diffusion(t, x, y, dW[:, n])
        _assert_finite(x_next.data if isinstance(x_next, Tensor) else x_next, n + 1)
        X.append(x_next)
        Y.append(y)
        Zdiag.append(z_nn)
        x = x_next
    Y.append(fields.y(grid.t(N), x))
    return X, Y, Zdiag


def sample_paths(problem, grid: TimeGrid, M: int, seed: int, stream: int = rng.TRAIN,
                 path_offset: int = 0, fields=None) -> PathBatch:
    """Draw increments and, for decoupled problems, the Euler forward.

    Coupled problems simulate their forward only when ``fields`` is given
    (network or closed-form bypass); otherwise ``X`` stays ``None`` and the
    rollout simulates on the tape.
    """
    dW = rng.sample_increments(seed, M, grid.N, problem.ell, grid.h, stream=stream, path_offset=path_offset)
    if not problem.coupled:
        X = euler_decoupled(problem, dW, grid)
    elif fields is not None:
        X = _stack_states(euler_coupled(problem, dW, grid, fields)[0])
    else:
        X = None
    return PathBatch(grid, dW, X, seed, stream, path_offset)


def exact_paths(problem, batch: PathBatch) -> np.ndarray:
    """Reference forward on the same increments: exact where known, else ``batch.X``."""
    if problem.exact_forward is not None:
        return problem.exact_forward(batch.dW, batch.grid.T)
    if batch.X is None:
        raise ValueError("no exact forward and no simulated paths available")
    return batch.X


def _stack_states(states) -> np.ndarray:
    return np.stack([s.data if isinstance(s, Tensor) else s for s in states], axis=1)


def write_paths_csv(batch: PathBatch, path: str | Path, max_paths: Optional[int] = None) -> None:
    if batch.X is None:
        raise ValueError("paths have not been simulated")
    X = batch.X if max_paths is None else batch.X[:max_paths]
    d = X.shape[2]
    times = batch.grid.times
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_id", "step", "t"] + [f"x_{i + 1}" for i in range(d)])
        for m in range(X.shape[0]):
            for n in range(X.shape[1]):
                writer.writerow([batch.path_offset + m, n, repr(float(times[n]))] + [repr(float(v)) for v in X[m, n]])


def strong_error(problem, grid: TimeGrid, M: int, seed: int, stream: int = rng.EVALUATION) -> float:
    """RMS terminal error of Euler against the exact forward on shared increments."""
    batch = sample_paths(problem, grid, M, seed, stream)
    exact = exact_paths(problem, batch)
    diff = batch.X[:, -1] - exact[:, -1]
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=-1))))


__all__ = [
    "TimeGrid", "PathBatch", "euler_decoupled", "euler_coupled", "sample_paths",
    "exact_paths", "write_paths_csv", "strong_error",
]
