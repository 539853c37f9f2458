"""Benchmark FSDE-BSVIE systems with closed-form solutions.

All coefficient callables accept either numpy arrays or autodiff tensors for
the arguments that may carry gradients (``x`` in coupled problems, ``y`` and
``z`` always).  Shapes follow one convention throughout:

* ``x``: (..., d), ``y``: (..., 1), ``z``: (..., ell)
* ``t`` is a scalar, ``s`` a scalar or an array broadcastable to (..., 1)
* drivers and free terms return (..., 1)

Constants are stored in ``ProblemSpec.constants`` and can be overridden from
a ``key = value`` problem file (see :func:`load_problem_file`).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients, coupling structure and reference solution of one system."""

    name: str
    d: int
    ell: int
    T: float
    x0: np.ndarray
    drift: Callable  # (t, x, y, z_diag) -> (..., d)
    diffusion: Callable  # (t, x, y, dw) -> sigma(t, x, y) @ dw, shape (..., d)
    sigma: Callable  # (t, x, y) -> (..., d, ell), numpy only
    driver: Callable  # (t, s, x_s, y_s, z_ts, z_ss, x_t) -> (..., 1)
    free_term: Callable  # (t, x_t, x_T) -> (..., 1)
    closed_y: Optional[Callable] = None  # (t, x) -> (..., 1)
    closed_z: Optional[Callable] = None  # (t, s, x_t, x_s) -> (..., ell)
    exact_forward: Optional[Callable] = None  # (dW, T) -> X of shape (M, N+1, d)
    drift_uses_y: bool = False
    drift_uses_zdiag: bool = False
    diff_uses_y: bool = False
    driver_uses_y: bool = False
    driver_uses_zdiag: bool = False
    g_uses_xt: bool = False
    lipschitz_yz: Optional[float] = None
    domain_check: Optional[Callable] = None  # (t, x_t) -> bool mask of undefined points
    constants: dict = field(default_factory=dict)

    @property
    def coupled(self) -> bool:
        return self.drift_uses_y or self.drift_uses_zdiag or self.diff_uses_y

    @property
    def has_closed_form(self) -> bool:
        return self.closed_y is not None and self.closed_z is not None

    def with_constants(self, **overrides) -> "ProblemSpec":
        """Rebuild through the catalog with some constants replaced."""
        merged = {**self.constants, **overrides}
        return CATALOG[self.name](**merged)


def xbar(x):
    """Coordinate mean over the last axis, kept as a trailing singleton."""
    return x.mean(axis=-1, keepdims=True)


def _vec(value, d: int) -> np.ndarray:
    """Scalar -> constant vector; sequence -> tiled/truncated to length d."""
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64)).ravel()
    return np.resize(arr, d)


def _diag_sigma(sig: np.ndarray) -> Callable:
    def sigma(t, x, y=None):
        x = np.asarray(getattr(x, "data", x))
        return np.broadcast_to(np.diag(sig), x.shape[:-1] + (sig.size, sig.size))

    return sigma


def exact_abm(x0: np.ndarray, mu: np.ndarray, sig: np.ndarray) -> Callable:
    """X_t = x0 + mu t + diag(sig) W_t on the grid of the increments."""

    def forward(dW: np.ndarray, T: float) -> np.ndarray:
        M, N, _ = dW.shape
        t = np.arange(N + 1) * (T / N)
        W = np.concatenate([np.zeros((M, 1, dW.shape[2])), np.cumsum(dW, axis=1)], axis=1)
        return x0 + mu * t[None, :, None] + sig * W

    return forward


def exact_gbm(x0: np.ndarray, mu: np.ndarray, sig: np.ndarray) -> Callable:
    """Componentwise GBM X^i_t = x0^i exp((mu_i - sig_i^2/2) t + sig_i W^i_t)."""

    def forward(dW: np.ndarray, T: float) -> np.ndarray:
        M, N, _ = dW.shape
        t = np.arange(N + 1) * (T / N)
        W = np.concatenate([np.zeros((M, 1, dW.shape[2])), np.cumsum(dW, axis=1)], axis=1)
        return x0 * np.exp((mu - 0.5 * sig**2) * t[None, :, None] + sig * W)

    return forward


def example_1a(d=5, k=5.0, mu=0.25, sigma=(0.8, 0.9, 1.0, 1.1, 1.2), x0=1.0, T=1.0) -> ProblemSpec:
    """Additive noise: arithmetic Brownian motion forward, Y_t = t sin(k xbar_t)."""
    d = int(d)
    mu_v, sig, x0_v = _vec(mu, d), _vec(sigma, d), _vec(x0, d)
    if np.any(sig == 0):
        raise ValueError("sigma must be invertible")
    sig_norm2 = float(np.sum(sig**2))  # Frobenius norm of diag(sigma), squared
    mu_over_sig = (mu_v / sig)[:, None]

    def drift(t, x, y=None, z_diag=None):
        return np.broadcast_to(mu_v, np.shape(getattr(x, "data", x)))

    def diffusion(t, x, y, dw):
        return sig * dw

    def driver(t, s, x_s, y_s, z_ts, z_ss=None, x_t=None):
        source = (t * k**2 / (2 * d**2) * sig_norm2) * np.sin(k * xbar(x_s))
        return source - z_ts @ mu_over_sig

    def free_term(t, x_t, x_T):
        return t * np.sin(k * xbar(x_T))

    def closed_y(t, x):
        return t * np.sin(k * xbar(x))

    def closed_z(t, s, x_t, x_s):
        return (t * k / d) * np.cos(k * xbar(x_s)) * sig

    return ProblemSpec(
        name="example1a", d=d, ell=d, T=float(T), x0=x0_v,
        drift=drift, diffusion=diffusion, sigma=_diag_sigma(sig), driver=driver,
        free_term=free_term, closed_y=closed_y, closed_z=closed_z,
        exact_forward=exact_abm(x0_v, mu_v, sig),
        lipschitz_yz=float(np.linalg.norm(mu_v / sig)),
        constants=dict(d=d, k=k, mu=mu_v.tolist(), sigma=sig.tolist(), x0=x0_v.tolist(), T=T),
    )


def example_1b(d=5, k=5.0, mu=0.05, sigma=(0.2, 0.25, 0.3, 0.35, 0.45), x0=1.0, T=1.0) -> ProblemSpec:
    """Multiplicative noise: componentwise GBM forward, Y_t = t sin(k xbar_t)."""
    d = int(d)
    mu_v, sig, x0_v = _vec(mu, d), _vec(sigma, d), _vec(x0, d)
    if np.any(sig == 0):
        raise ValueError("sigma must be invertible")
    mu_over_sig = (mu_v / sig)[:, None]

    def drift(t, x, y=None, z_diag=None):
        return mu_v * x

    def diffusion(t, x, y, dw):
        return sig * x * dw

    def sigma_fn(t, x, y=None):
        x = np.asarray(getattr(x, "data", x))
        out = np.zeros(x.shape[:-1] + (d, d))
        idx = np.arange(d)
        out[..., idx, idx] = sig * x
        return out

    def driver(t, s, x_s, y_s, z_ts, z_ss=None, x_t=None):
        vol2 = np.sum((sig * x_s) ** 2, axis=-1, keepdims=True)
        source = (t * k**2 / (2 * d**2)) * np.sin(k * xbar(x_s)) * vol2
        return source - z_ts @ mu_over_sig

    def free_term(t, x_t, x_T):
        return t * np.sin(k * xbar(x_T))

    def closed_y(t, x):
        return t * np.sin(k * xbar(x))

    def closed_z(t, s, x_t, x_s):
        return (t * k / d) * np.cos(k * xbar(x_s)) * (sig * x_s)

    return ProblemSpec(
        name="example1b", d=d, ell=d, T=float(T), x0=x0_v,
        drift=drift, diffusion=diffusion, sigma=sigma_fn, driver=driver,
        free_term=free_term, closed_y=closed_y, closed_z=closed_z,
        exact_forward=exact_gbm(x0_v, mu_v, sig),
        lipschitz_yz=float(np.linalg.norm(mu_v / sig)),
        constants=dict(d=d, k=k, mu=mu_v.tolist(), sigma=sig.tolist(), x0=x0_v.tolist(), T=T),
    )


EXAMPLE_2_SIGMA = (0.3, 0.375, 0.45, 0.375)


def example_2(d=20, mu=-0.05, sigma=EXAMPLE_2_SIGMA, x0=1.0, T=1.0) -> ProblemSpec:
    """Quadratic solution Y_t = <t + X_t, X_t>; free term depends on X_t and X_T."""
    d = int(d)
    mu_v, sig, x0_v = _vec(mu, d), _vec(sigma, d), _vec(x0, d)
    if np.any(sig == 0):
        raise ValueError("sigma must be invertible")

    def drift(t, x, y=None, z_diag=None):
        return mu_v * x

    def diffusion(t, x, y, dw):
        return sig * x * dw

    def sigma_fn(t, x, y=None):
        x = np.asarray(getattr(x, "data", x))
        out = np.zeros(x.shape[:-1] + (d, d))
        idx = np.arange(d)
        out[..., idx, idx] = sig * x
        return out

    def singular(t, x_t):
        return np.any(t + np.asarray(x_t) == 0, axis=-1)

    def driver(t, s, x_s, y_s, z_ts, z_ss=None, x_t=None):
        # literal diag(t+x_t) sigma^{-1} diag(t+x_t)^{-1}; undefined where t + x_t^i = 0
        shifted = t + np.asarray(x_t)
        with np.errstate(divide="ignore", invalid="ignore"):
            weight = mu_v * shifted / sig / shifted
        if not np.all(np.isfinite(weight)):
            raise ValueError("example2 driver undefined: t + x_t has a zero coordinate")
        return -(z_ts * weight).sum(axis=-1, keepdims=True)

    def free_term(t, x_t, x_T):
        return np.sum((t + x_t) * x_T, axis=-1, keepdims=True)

    def closed_y(t, x):
        return np.sum((t + x) * x, axis=-1, keepdims=True)

    def closed_z(t, s, x_t, x_s):
        return (t + x_t) * sig * x_s

    return ProblemSpec(
        name="example2", d=d, ell=d, T=float(T), x0=x0_v,
        drift=drift, diffusion=diffusion, sigma=sigma_fn, driver=driver,
        free_term=free_term, closed_y=closed_y, closed_z=closed_z,
        exact_forward=exact_gbm(x0_v, mu_v, sig),
        g_uses_xt=True,
        lipschitz_yz=float(np.linalg.norm(mu_v / sig)),
        domain_check=singular,
        constants=dict(d=d, mu=mu_v.tolist(), sigma=sig.tolist(), x0=x0_v.tolist(), T=T),
    )


def example_3(
    d=5, k=5.0, a=(0.15, 0.075, 0.0, -0.075, -0.15), b=1.0, c=1.001,
    sigma=(0.4, 0.5, 0.6, 0.7, 0.9), x0=1.0, T=1.0,
) -> ProblemSpec:
    """Fully coupled: drift a + b Z_{s,s}, diffusion (c + Y_s) sigma."""
    d = int(d)
    a_v, sig, x0_v = _vec(a, d), _vec(sigma, d), _vec(x0, d)
    sig_mat = np.diag(sig)
    ones_sig = np.ones(d) @ sig_mat  # 1^T sigma
    ones_sig_norm2 = float(ones_sig @ ones_sig)
    sum_a = float(a_v.sum())

    def drift(t, x, y=None, z_diag=None):
        return a_v + b * z_diag

    def diffusion(t, x, y, dw):
        return (c + y) * (dw @ sig_mat.T)

    def sigma_fn(t, x, y):
        y = np.asarray(getattr(y, "data", y))
        return (c + y)[..., None] * sig_mat

    def driver(t, s, x_s, y_s, z_ts, z_ss=None, x_t=None):
        kx = k * xbar(x_s)
        source = (t * k**2 / (2 * d**2) * ones_sig_norm2) * ad.sin(kx) * ad.square(c + y_s)
        transport = (k / d) * ad.cos(kx) * (t * sum_a + (s * b) * z_ts.sum(axis=-1, keepdims=True))
        return source - transport

    def free_term(t, x_t, x_T):
        return t * ad.sin(k * xbar(x_T))

    def closed_y(t, x):
        return t * np.sin(k * xbar(x))

    def closed_z(t, s, x_t, x_s):
        kx = k * xbar(x_s)
        return (t * k / d) * np.cos(kx) * (c + s * np.sin(kx)) * ones_sig

    return ProblemSpec(
        name="example3", d=d, ell=d, T=float(T), x0=x0_v,
        drift=drift, diffusion=diffusion, sigma=sigma_fn, driver=driver,
        free_term=free_term, closed_y=closed_y, closed_z=closed_z,
        drift_uses_zdiag=True, diff_uses_y=True, driver_uses_y=True,
        constants=dict(d=d, k=k, a=a_v.tolist(), b=b, c=c, sigma=sig.tolist(), x0=x0_v.tolist(), T=T),
    )


CATALOG: dict[str, Callable[..., ProblemSpec]] = {
    "example1a": example_1a,
    "example1b": example_1b,
    "example2": example_2,
    "example3": example_3,
}


def get_problem(name: str, **constants) -> ProblemSpec:
    key = name.lower().replace("_", "").replace("-", "")
    if key not in CATALOG:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(CATALOG)}")
    return CATALOG[key](**constants)


def parse_value(text: str):
    """``1`` -> 1.0-ish scalar, ``0.2, 0.3`` -> list of floats."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    values = [float(p) for p in parts]
    return values[0] if len(values) == 1 else values


def read_key_values(path: str | Path) -> dict[str, str]:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    parser.read_string("[root]\n" + Path(path).read_text(encoding="utf-8"))
    return dict(parser["root"])


def load_problem_file(path: str | Path) -> ProblemSpec:
    """Problem file: ``problem = <id>`` plus optional constant overrides.

    Example::

        problem = example1b
        d = 20
        sigma = 0.2, 0.25, 0.3, 0.35, 0.45   # tiled to length d
    """
    entries = read_key_values(path)
    if "problem" not in entries:
        raise ValueError(f"{path}: missing required key 'problem'")
    name = entries.pop("problem")
    constants = {key: parse_value(value) for key, value in entries.items()}
    if "d" in constants:
        constants["d"] = int(constants["d"])
    return get_problem(name, **constants)


def write_problem_file(problem: ProblemSpec, path: str | Path) -> None:
    lines = [f"problem = {problem.name}"]
    for key, value in problem.constants.items():
        text = ", ".join(repr(float(v)) for v in value) if isinstance(value, list) else repr(value)
        lines.append(f"{key} = {text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def zero_driver(problem: ProblemSpec) -> ProblemSpec:
    """Same system with f == 0; used for martingale checks."""

    def driver(t, s, x_s, y_s, z_ts, z_ss=None, x_t=None):
        return np.zeros(np.shape(getattr(x_s, "data", x_s))[:-1] + (1,))

    return dataclasses.replace(problem, driver=driver, closed_y=None, closed_z=None, lipschitz_yz=0.0)
