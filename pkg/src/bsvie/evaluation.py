"""Error metrics, convergence and dimension studies, and the stability verifier."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng
from .networks import ClosedFormFields
from .rollout import evaluate_loss, make_fields
from .sde import PathBatch, TimeGrid, euler_coupled, exact_paths, sample_paths


class UnsupportedProblem(ValueError):
    pass


@dataclass
class ErrorReport:
    problem: str
    d: int
    N: int
    M: int
    seed: int
    err_y: float
    err_z: float
    err_t: float

    @property
    def rms_y(self) -> float:
        return math.sqrt(self.err_y)

    @property
    def rms_z(self) -> float:
        return math.sqrt(self.err_z)


def reference_paths(problem, batch: PathBatch) -> np.ndarray:
    """Forward used for the reference solution on the same increments.

    Decoupled problems use the exact forward where one exists; coupled ones
    use Euler with the closed forms substituted into the coefficients.
    """
    if problem.coupled:
        X, _, _ = euler_coupled(problem, batch.dW, batch.grid, ClosedFormFields(problem))
        return np.stack(X, axis=1)
    return exact_paths(problem, batch)


def _field_errors(problem, grid: TimeGrid, X: np.ndarray, X_ref: np.ndarray, fields):
    """Per-path sums sum_n |dY|^2 h and sum_{k<=n} |dZ|^2 h^2."""
    N, h = grid.N, grid.h
    times = grid.times
    t_col = times[None, :N, None]
    dy = fields.y(t_col, X[:, :N]) - problem.closed_y(t_col, X_ref[:, :N])
    err_y = np.sum(dy**2, axis=(1, 2)) * h
    err_z = np.zeros(X.shape[0])
    for k in range(N):
        s = times[None, k:N, None]
        x_k = X[:, k:k + 1]
        z_hat = fields.z(times[k], s, x_k, X[:, k:N])
        z_ref = problem.closed_z(times[k], s, X_ref[:, k:k + 1], X_ref[:, k:N])
        err_z += np.sum((z_hat - z_ref) ** 2, axis=(1, 2)) * h * h
    return err_y, err_z


def compute_errors(problem, grid: TimeGrid, M: int, seed: int, params=None, *,
                   closed_form: bool = False, time_scale: float = 1.0,
                   stream: int = rng.EVALUATION, max_rows: int = 1 << 17) -> ErrorReport:
    """Err^Y, Err^Z and Err^T on fresh evaluation paths."""
    if not problem.has_closed_form:
        raise UnsupportedProblem(f"{problem.name} has no closed-form reference solution")
    fields = make_fields(problem, params, closed_form=closed_form, time_scale=time_scale)
    batch = sample_paths(problem, grid, M, seed, stream=stream, fields=fields if problem.coupled else None)
    X_ref = reference_paths(problem, batch)
    chunk = max(1, max_rows // grid.N)
    err_y = np.empty(M)
    err_z = np.empty(M)
    for start in range(0, M, chunk):
        sl = slice(start, start + chunk)
        err_y[sl], err_z[sl] = _field_errors(problem, grid, batch.X[sl], X_ref[sl], fields)
    err_t = evaluate_loss(problem, grid, batch, fields, max_rows=max_rows).loss_value
    return ErrorReport(problem.name, problem.d, grid.N, M, seed,
                       float(np.mean(err_y)), float(np.mean(err_z)), float(err_t))


# -- convergence -------------------------------------------------------------

@dataclass
class ConvergenceFit:
    metric: str
    N: list[int]
    values: list[float]
    slope: float
    intercept: float
    r2: float


def fit_convergence(N_list: Sequence[int], values: Sequence[float], T: float = 1.0, metric: str = "") -> ConvergenceFit:
    """Least-squares line through (log h, log value) over all points."""
    if len(N_list) < 3:
        raise ValueError("a convergence fit needs at least 3 grid sizes")
    vals = np.asarray(values, dtype=np.float64)
    if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
        raise ValueError(f"metric {metric!r} has non-positive or non-finite values: {values}")
    log_h = np.log(T / np.asarray(N_list, dtype=np.float64))
    log_v = np.log(vals)
    A = np.column_stack([log_h, np.ones_like(log_h)])
    (slope, intercept), *_ = np.linalg.lstsq(A, log_v, rcond=None)
    fitted = A @ np.array([slope, intercept])
    ss_res = float(np.sum((log_v - fitted) ** 2))
    ss_tot = float(np.sum((log_v - log_v.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ConvergenceFit(metric, list(map(int, N_list)), vals.tolist(), float(slope), float(intercept), r2)


METRICS = {
    "loss": lambda r: r.err_t,
    "Y": lambda r: r.err_y,
    "Z": lambda r: r.err_z,
    "Y_rms": lambda r: r.rms_y,
    "Z_rms": lambda r: r.rms_z,
}


@dataclass
class ConvergenceStudy:
    problem: str
    mode: str
    T: float = 1.0
    reports: list[ErrorReport] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)
    fits: dict[str, ConvergenceFit] = field(default_factory=dict)
    train_seconds: dict[int, float] = field(default_factory=dict)


def convergence_study(problem, N_list: Sequence[int], mode: str = "plugin", train_config=None,
                      M: int = 2**12, seed: int = 0, log=None) -> ConvergenceStudy:
    """Metrics at each N, then per-metric log-log fits.

    ``mode='plugin'`` substitutes the closed forms; ``mode='trained'`` trains
    a fresh pair of networks at each N with ``train_config``.
    """
    if len(N_list) < 3:
        raise ValueError("need at least 3 grid sizes")
    study = ConvergenceStudy(problem.name, mode, problem.T)
    for N in N_list:
        grid = TimeGrid(problem.T, N)
        try:
            if mode == "plugin":
                report = compute_errors(problem, grid, M, seed, closed_form=True)
            elif mode == "trained":
                from .trainer import train

                config = _replace(train_config, N=N)
                params, train_report = train(config, problem, log=log)
                study.train_seconds[N] = train_report.train_seconds
                report = compute_errors(problem, grid, M, seed, params, time_scale=config.time_scale)
            else:
                raise ValueError(f"unknown mode {mode!r}")
        except (RuntimeError, FloatingPointError) as exc:
            study.failures[N] = str(exc)
            continue
        study.reports.append(report)
        if log is not None:
            log(f"N={N}: err_y={report.err_y:.3e} err_z={report.err_z:.3e} err_t={report.err_t:.3e}")
    if len(study.reports) >= 3:
        Ns = [r.N for r in study.reports]
        for metric, get in METRICS.items():
            values = [get(r) for r in study.reports]
            if all(v > 0 for v in values):
                study.fits[metric] = fit_convergence(Ns, values, problem.T, metric)
    return study


def _replace(config, **changes):
    return dataclasses.replace(config, **changes)


# -- dimension scaling -------------------------------------------------------

@dataclass
class DimensionRow:
    d: int
    seed: int
    err_y: float
    err_z: float
    err_t: float
    train_seconds: float
    total_seconds: float


def dimension_study(d_list: Sequence[int], train_config, seeds: Sequence[int] = (0,),
                    problem_name: str = "example1b", M: int = 2**12, log=None) -> list[DimensionRow]:
    """Train the problem family at each d (constants tiled) and evaluate."""
    from .problems import get_problem
    from .trainer import train

    rows = []
    for d in d_list:
        problem = get_problem(problem_name, d=d)
        grid = TimeGrid(problem.T, train_config.N)
        for seed in seeds:
            started = time.perf_counter()
            config = _replace(train_config, seed=seed, problem=problem_name)
            params, report = train(config, problem, log=log)
            errors = compute_errors(problem, grid, M, seed, params, time_scale=config.time_scale)
            rows.append(DimensionRow(d, seed, errors.err_y, errors.err_z, errors.err_t,
                                     report.train_seconds, time.perf_counter() - started))
            if log is not None:
                log(f"d={d} seed={seed}: err_y={errors.err_y:.3e} err_z={errors.err_z:.3e} "
                    f"train={report.train_seconds:.1f}s")
    return rows


def median_by_dimension(rows: Sequence[DimensionRow]) -> dict[int, dict[str, float]]:
    out = {}
    for d in sorted({r.d for r in rows}):
        sel = [r for r in rows if r.d == d]
        out[d] = {key: float(np.median([getattr(r, key) for r in sel]))
                  for key in ("err_y", "err_z", "err_t", "train_seconds", "total_seconds")}
    return out


# -- stability ---------------------------------------------------------------

@dataclass
class StabilityReport:
    K1: float
    h: float
    c_y: float
    c_z: float
    rows: list[tuple] = field(default_factory=list)  # (k, n, lhsY, rhsY, lhsZ, rhsZ, violated)

    @property
    def violations(self) -> int:
        return sum(1 for row in self.rows if row[-1])


def _generic_solution(problem, grid: TimeGrid, X: np.ndarray, dW: np.ndarray, fields):
    """Two-index solution Yhat[k][n] (n = k..N) and Zhat[k][n] (n = k..N-1), per path.

    Yhat_k^k = y(t_k, X_k), Zhat_n^k = z(t_k, t_n, X_n), and
    Yhat_{n+1}^k = Yhat_n^k - f(t_k, t_n, X_n, y(t_n, X_n), Zhat_n^k) h + Zhat_n^k . dW_n.
    """
    N, h = grid.N, grid.h
    times = grid.times
    y_diag = fields.y(times[None, :, None], X)  # (M, N+1, 1)
    Y_hat, Z_hat = [], []
    for k in range(N):
        s = times[None, k:N, None]
        Z_k = fields.z(times[k], s, X[:, k:k + 1], X[:, k:N])  # (M, N-k, ell)
        f = problem.driver(times[k], s, X[:, k:N], y_diag[:, k:N], Z_k, None, X[:, k:k + 1])
        steps = -f[..., 0] * h + np.sum(Z_k * dW[:, k:N], axis=-1)
        Y_k = y_diag[:, k, 0][:, None] + np.concatenate([np.zeros((X.shape[0], 1)), np.cumsum(steps, axis=1)], axis=1)
        Y_hat.append(Y_k)  # (M, N-k+1): columns n = k..N
        Z_hat.append(Z_k)
    return Y_hat, Z_hat


def stability_check(problem, grid: TimeGrid, params_a, params_b, M: int, seed: int = 0, *,
                    K1: Optional[float] = None, c_y: Optional[float] = None, c_z: Optional[float] = None,
                    fields_a=None, fields_b=None, n_se: float = 3.0) -> StabilityReport:
    """Monte Carlo check of the discrete stability estimate between two solutions.

    Both solutions of the generic two-index scheme are built from the given
    parameter sets on common paths.  A (k, n) pair is a violation when the
    mean of lhs - rhs exceeds ``n_se`` standard errors.
    """
    if problem.coupled:
        raise UnsupportedProblem("stability check needs a decoupled forward")
    if problem.driver_uses_y and problem.lipschitz_yz is None:
        raise UnsupportedProblem("driver depends on y; supply K1 explicitly")
    K1 = problem.lipschitz_yz if K1 is None else K1
    if K1 is None:
        raise UnsupportedProblem(f"{problem.name} has no known Lipschitz constant")
    h, T = grid.h, grid.T
    if not h * (8 * K1**2 + 1) < 1:
        need = math.floor(T * (8 * K1**2 + 1)) + 1
        raise ValueError(f"step too coarse: need h(8K1^2+1) < 1, i.e. N >= {need}")
    base = math.exp((8 * K1**2 + 1) * T)
    c_y = base if c_y is None else c_y
    c_z = 2 * base if c_z is None else c_z

    batch = sample_paths(problem, grid, M, seed, stream=rng.STABILITY)
    fa = fields_a or make_fields(problem, params_a)
    fb = fields_b or make_fields(problem, params_b)
    Ya, Za = _generic_solution(problem, grid, batch.X, batch.dW, fa)
    Yb, Zb = _generic_solution(problem, grid, batch.X, batch.dW, fb)
    N = grid.N
    dY = [a - b for a, b in zip(Ya, Yb)]
    dZ2 = [np.sum((a - b) ** 2, axis=-1) for a, b in zip(Za, Zb)]
    terminal = np.stack([dy[:, -1] ** 2 for dy in dY], axis=1)  # |dY_N^l|^2, l = 0..N-1
    tail = np.cumsum(terminal[:, ::-1], axis=1)[:, ::-1] * h  # sum_{l>=n} |dY_N^l|^2 h
    report = StabilityReport(float(K1), h, c_y, c_z)
    sqrt_m = math.sqrt(M)

    def exceeds(diff: np.ndarray) -> bool:
        mean = diff.mean()
        se = diff.std(ddof=1) / sqrt_m if M > 1 else 0.0
        return bool(mean > n_se * se and mean > 0)

    for k in range(N):
        for n in range(k, N + 1):
            bound = terminal[:, k] + (tail[:, n] if n < N else 0.0)
            lhs_y = dY[k][:, n - k] ** 2
            rhs_y = c_y * bound
            violated = exceeds(lhs_y - rhs_y)
            if n < N:
                lhs_z = dZ2[k][:, n - k] * h
                rhs_z = c_z * bound
                violated = violated or exceeds(lhs_z - rhs_z)
                z_pair = (float(lhs_z.mean()), float(rhs_z.mean()))
            else:
                z_pair = (float("nan"), float("nan"))
            report.rows.append((k, n, float(lhs_y.mean()), float(rhs_y.mean()), *z_pair, violated))
    return report


# -- CSV ---------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_errors_csv(reports: Sequence[ErrorReport], path) -> None:
    _write(path, ["problem", "d", "N", "M", "err_y", "err_z", "err_t", "seed"],
           [(r.problem, r.d, r.N, r.M, r.err_y, r.err_z, r.err_t, r.seed) for r in reports])


def write_convergence_csv(study: ConvergenceStudy, path) -> None:
    rows = []
    for r in study.reports:
        h = study.T / r.N
        for metric, get in METRICS.items():
            slope = study.fits[metric].slope if metric in study.fits else float("nan")
            rows.append((r.N, h, metric, get(r), slope))
    _write(path, ["N", "h", "metric", "value", "slope"], rows)


def write_stability_csv(report: StabilityReport, path) -> None:
    _write(path, ["k", "n", "lhsY", "rhsY", "lhsZ", "rhsZ", "violated"],
           [(*row[:-1], int(row[-1])) for row in report.rows])


def write_dimension_csv(rows: Sequence[DimensionRow], path) -> None:
    _write(path, ["d", "seed", "err_y", "err_z", "err_t"],
           [(r.d, r.seed, r.err_y, r.err_z, r.err_t) for r in rows])
