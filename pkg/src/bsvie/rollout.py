"""Two-clock rollout of the discrete BSVIE and its h-weighted residual loss.

For every evaluation index n the backward dynamics are rolled from t_n to T:

    Yhat(n) = Y_n - sum_{k=n}^{N-1} f(t_n, t_k, X_k, Y_k, Z_{n,k}, Z_{k,k}) h
                  + sum_{k=n}^{N-1} Z_{n,k} . dW_k

and compared with the free term g(t_n, X_n, X_N).  The loss is
(1/M) sum_{m,n} residual(m, n)^2 h.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .networks import ClosedFormFields, NetworkFields, NetworkParams
from .sde import PathBatch, TimeGrid, euler_coupled


@dataclass
class RolloutResult:
    residuals: np.ndarray  # (M, N)
    loss: object  # Tensor on the tape when trainable fields were used, else float
    y_values: np.ndarray  # (M, N+1)
    z_diag: Optional[np.ndarray]  # (M, N, ell), None when neither drift nor driver needs it

    @property
    def loss_value(self) -> float:
        return float(self.loss.item() if isinstance(self.loss, Tensor) else self.loss)


def loss_weighting(residuals, h: float):
    """(1/M) sum r^2 h over an (M, N) residual array or list of (M, 1) tensors."""
    if isinstance(residuals, (list, tuple)):
        M = residuals[0].shape[0]
        total = None
        for r in residuals:
            term = ad.square(r).sum() if isinstance(r, Tensor) else float(np.sum(np.square(r)))
            total = term if total is None else total + term
        return total * (h / M)
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.size == 0:
        return 0.0
    return float(np.sum(residuals**2) * h / residuals.shape[0])


def make_fields(problem, params: Optional[NetworkParams] = None, *, trainable: bool = False,
                closed_form: bool = False, time_scale: float = 1.0):
    """Network fields with the problem's Z input convention, or the closed-form bypass.

    When the free term ignores X_t the feedback Z depends on (t, s, X_s) only,
    so X_s is fed into both spatial slots of the z-net.
    """
    if closed_form:
        return ClosedFormFields(problem)
    if params is None:
        raise ValueError("network parameters required unless closed_form=True")
    if (params.d, params.ell) != (problem.d, problem.ell):
        raise ad.DimensionError(
            f"parameters are for (d, ell)=({params.d}, {params.ell}); "
            f"{problem.name} needs ({problem.d}, {problem.ell})"
        )
    return NetworkFields(params, trainable=trainable, decoupled=not problem.g_uses_xt, time_scale=time_scale)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _stack(items, axis=1):
    if any(isinstance(i, Tensor) for i in items):
        return ad.stack(items, axis=axis)
    return np.stack(items, axis=axis)


def rollout(problem, grid: TimeGrid, paths: PathBatch, fields) -> RolloutResult:
    """Residuals and loss for one batch of paths.

    Decoupled problems use ``paths.X``; coupled problems re-simulate the
    forward with ``fields`` so that, on an active tape, gradients flow
    through the states.
    """
    N, h = grid.N, grid.h
    if paths.dW.shape[1] != N:
        raise ValueError(f"paths have {paths.dW.shape[1]} steps, grid has {N}")
    dW = paths.dW
    times = grid.times
    z_diag = None

    if problem.coupled:
        X_list, Y_list, Zd_list = euler_coupled(problem, dW, grid, fields)
        X = _stack(X_list)
        Y = _stack(Y_list)
        z_diag = _stack(Zd_list)
    else:
        if paths.X is None:
            raise ValueError("decoupled rollout needs simulated paths")
        X = paths.X
        Y = fields.y(times[None, :, None], X)
        if problem.driver_uses_zdiag:
            s = times[None, :N, None]
            z_diag = fields.z(s, s, X[:, :N], X[:, :N])

    X_N = X[:, N]
    residuals = []
    for n in range(N):
        t_n = times[n]
        s = times[None, n:N, None]
        X_n = X[:, n]
        X_k = X[:, n:N]
        Y_k = Y[:, n:N]
        Z_nk = fields.z(t_n, s, X_n.reshape((-1, 1, problem.d)), X_k)
        zd = None if z_diag is None else z_diag[:, n:N]
        f = problem.driver(t_n, s, X_k, Y_k, Z_nk, zd, X_n.reshape((-1, 1, problem.d)))
        drift_term = f.sum(axis=(1, 2)) * h
        noise_term = (Z_nk * dW[:, n:N]).sum(axis=(1, 2))
        y_hat = Y[:, n, 0] - drift_term + noise_term
        g = problem.free_term(t_n, X_n, X_N)[:, 0]
        residuals.append(y_hat - g)

    res = np.stack([_data(r) for r in residuals], axis=1)
    bad = ~np.isfinite(res)
    if np.any(bad):
        m, n = map(int, np.argwhere(bad)[0])
        raise NonFiniteError(f"non-finite residual at path {m}, step {n}")
    loss = loss_weighting([r.reshape((-1, 1)) for r in residuals], h)
    return RolloutResult(
        residuals=res,
        loss=loss,
        y_values=np.asarray(_data(Y))[..., 0],
        z_diag=None if z_diag is None else np.asarray(_data(z_diag)),
    )


def evaluate_loss(problem, grid: TimeGrid, paths: PathBatch, fields, max_rows: int = 1 << 17) -> RolloutResult:
    """Tape-free rollout in path chunks so memory stays bounded for large M."""
    chunk = max(1, max_rows // grid.N)
    parts = [rollout(problem, grid, paths.subset(slice(i, i + chunk)), fields)
             for i in range(0, paths.M, chunk)]
    res = np.concatenate([p.residuals for p in parts])
    zd = None if parts[0].z_diag is None else np.concatenate([p.z_diag for p in parts])
    return RolloutResult(res, loss_weighting(res, grid.h), np.concatenate([p.y_values for p in parts]), zd)
