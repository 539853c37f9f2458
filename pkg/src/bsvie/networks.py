"""ReLU MLP fields Y(t, x) and Z(t, s, x_t, x_s), plus closed-form stand-ins.

Layer ``i`` of a net stores ``W{i}`` with shape (out, in) and ``b{i}`` with
shape (out,), and computes ``x @ W.T + b``.  Hidden layers use ReLU; the
output layer is affine.

Checkpoint text format (UTF-8, one record per line, in this order)::

    bsvie-checkpoint 1
    meta <key> <value>            # repeated; problem, d, ell, seed, widths, depth
    tensor <name> <rows> <cols>   # followed by one line of row-major f64 values
    <v0> <v1> ...                 # float.hex encoding, exact round-trip
    ...
    sha256 <hex digest of all preceding bytes>

Tensor records appear in ``NetworkParams.names()`` order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

CHECKPOINT_MAGIC = "bsvie-checkpoint 1"


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkParams:
    d: int
    ell: int
    arrays: dict[str, np.ndarray]
    y_width: int = 50
    z_width: int = 100
    depth: int = 3
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        expected = expected_shapes(self.d, self.ell, self.y_width, self.z_width, self.depth)
        if list(self.arrays) != list(expected):
            raise DimensionError(f"parameter names {list(self.arrays)} != {list(expected)}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ad.NonFiniteError(f"{name} has non-finite entries")
            self.arrays[name] = arr

    def names(self) -> list[str]:
        return list(self.arrays)

    def count(self, prefix: str = "") -> int:
        return sum(a.size for n, a in self.arrays.items() if n.startswith(prefix))

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.d, self.ell, {n: a.copy() for n, a in self.arrays.items()},
            self.y_width, self.z_width, self.depth, dict(self.meta),
        )

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "NetworkParams":
        return NetworkParams(self.d, self.ell, arrays, self.y_width, self.z_width, self.depth, dict(self.meta))

    def zeros_like(self) -> "NetworkParams":
        return self.with_arrays({n: np.zeros_like(a) for n, a in self.arrays.items()})


def layer_sizes(n_in: int, width: int, n_out: int, depth: int) -> list[tuple[int, int]]:
    dims = [n_in] + [width] * depth + [n_out]
    return [(dims[i + 1], dims[i]) for i in range(depth + 1)]


def expected_shapes(d: int, ell: int, y_width=50, z_width=100, depth=3) -> dict[str, tuple]:
    shapes = {}
    for prefix, n_in, width, n_out in (("y", d + 1, y_width, 1), ("z", 2 * d + 2, z_width, ell)):
        for i, (rows, cols) in enumerate(layer_sizes(n_in, width, n_out, depth), start=1):
            shapes[f"{prefix}.W{i}"] = (rows, cols)
            shapes[f"{prefix}.b{i}"] = (rows,)
    return shapes


def init(seed: int, d: int, ell: int, scheme: str = "he_uniform",
         y_width: int = 50, z_width: int = 100, depth: int = 3) -> NetworkParams:
    """He-uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in expected_shapes(d, ell, y_width, z_width, depth).items():
        if len(shape) == 1 or scheme == "zeros":
            arrays[name] = np.zeros(shape)
        elif scheme == "he_uniform":
            bound = np.sqrt(6.0 / shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return NetworkParams(d, ell, arrays, y_width, z_width, depth, {"seed": str(seed)})


def mlp(layers: list[tuple], inputs):
    """Apply affine/ReLU layers; works on numpy arrays or tensors."""
    out = inputs
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        out = out @ W.T + b
        if i < last:
            out = ad.relu(out) if isinstance(out, Tensor) else np.maximum(out, 0.0)
    return out


def _feature(value, batch_shape: tuple):
    """Broadcast a time value (scalar or (..., 1) array) to batch_shape + (1,)."""
    shape = batch_shape + (1,)
    if isinstance(value, Tensor):
        return ad.broadcast_to(value, shape)
    return np.broadcast_to(np.asarray(value, dtype=np.float64), shape)


def _concat(parts: list):
    if any(isinstance(p, Tensor) for p in parts):
        return ad.concat(parts, axis=-1)
    return np.concatenate(parts, axis=-1)


def _shape(x) -> tuple:
    return x.shape if isinstance(x, Tensor) else np.shape(x)


class NetworkFields:
    """Evaluate Y and Z nets for given parameters.

    ``trainable=True`` wraps every array in a gradient-tracking leaf tensor
    (available as ``self.leaves``); otherwise evaluation is plain numpy.
    With ``decoupled=True`` the x_s input is also fed to the x_t slot.
    """

    def __init__(self, params: NetworkParams, *, trainable: bool = False,
                 decoupled: bool = False, time_scale: float = 1.0):
        self.params = params
        self.decoupled = decoupled
        self.time_scale = float(time_scale)
        if trainable:
            self.leaves = {n: Tensor(a, requires_grad=True, name=n) for n, a in params.arrays.items()}
            source = self.leaves
        else:
            self.leaves = {}
            source = params.arrays
        depth = params.depth
        self._y = [(source[f"y.W{i}"], source[f"y.b{i}"]) for i in range(1, depth + 2)]
        self._z = [(source[f"z.W{i}"], source[f"z.b{i}"]) for i in range(1, depth + 2)]

    def y(self, t, x):
        shape = _shape(x)
        if shape[-1] != self.params.d:
            raise DimensionError(f"y-net expects d={self.params.d} columns, got {shape[-1]}")
        batch = shape[:-1]
        t_in = _feature(np.asarray(t) / self.time_scale, batch)
        return mlp(self._y, _concat([t_in, x]))

    def z(self, t, s, x_t, x_s):
        if np.any(np.asarray(s) < np.asarray(t)):
            raise ValueError("z-net evaluated below the diagonal (s < t)")
        if self.decoupled:
            x_t = x_s
        shape_s = _shape(x_s)
        d = self.params.d
        if shape_s[-1] != d or _shape(x_t)[-1] != d:
            raise DimensionError(f"z-net expects d={d} columns")
        batch = np.broadcast_shapes(_shape(x_t)[:-1], shape_s[:-1], np.shape(s)[:-1] if np.ndim(s) else ())
        parts = [
            _feature(np.asarray(t) / self.time_scale, batch),
            _feature(np.asarray(s) / self.time_scale, batch),
            _broadcast_x(x_t, batch + (d,)),
            _broadcast_x(x_s, batch + (d,)),
        ]
        return mlp(self._z, _concat(parts))


def _broadcast_x(x, shape):
    if _shape(x) == shape:
        return x
    if isinstance(x, Tensor):
        return ad.broadcast_to(x, shape)
    return np.broadcast_to(x, shape)


def y_forward(params: NetworkParams, t, x):
    return NetworkFields(params).y(t, x)


def z_forward(params: NetworkParams, t, s, x_t, x_s):
    return NetworkFields(params).z(t, s, x_t, x_s)


class ClosedFormFields:
    """Drop-in replacement for NetworkFields using a problem's exact solution."""

    decoupled = False
    leaves: dict = {}

    def __init__(self, problem):
        if not problem.has_closed_form:
            raise ValueError(f"{problem.name} has no closed-form solution")
        self.problem = problem

    def y(self, t, x):
        return self.problem.closed_y(np.asarray(t), _numpy(x))

    def z(self, t, s, x_t, x_s):
        x_t, x_s = _numpy(x_t), _numpy(x_s)
        out = self.problem.closed_z(np.asarray(t), np.asarray(s), x_t, x_s)
        batch = np.broadcast_shapes(x_t.shape[:-1], x_s.shape[:-1])
        return np.broadcast_to(out, batch + (self.problem.ell,))


def _numpy(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(params: NetworkParams, path: str | Path, **meta) -> None:
    header = {
        "d": params.d, "ell": params.ell, "y_width": params.y_width,
        "z_width": params.z_width, "depth": params.depth, **params.meta, **meta,
    }
    lines = [CHECKPOINT_MAGIC]
    lines += [f"meta {key} {value}" for key, value in header.items()]
    for name, arr in params.arrays.items():
        rows, cols = (arr.shape[0], arr.shape[1]) if arr.ndim == 2 else (arr.shape[0], 1)
        lines.append(f"tensor {name} {rows} {cols}")
        lines.append(" ".join(float.hex(v) for v in arr.ravel().tolist()))
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    Path(path).write_text(body + f"sha256 {digest}\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> NetworkParams:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    body, sep, trailer = text.rstrip("\n").rpartition("\nsha256 ")
    if not sep or hashlib.sha256((body + "\n").encode("utf-8")).hexdigest() != trailer.strip():
        raise CheckpointError(f"{path}: checksum mismatch or truncated file")
    lines = body.split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a bsvie checkpoint")
    meta, arrays = {}, {}
    i = 1
    try:
        while i < len(lines):
            kind, rest = lines[i].split(" ", 1)
            if kind == "meta":
                key, value = rest.split(" ", 1)
                meta[key] = value
                i += 1
            elif kind == "tensor":
                name, rows, cols = rest.split()
                values = np.array([float.fromhex(v) for v in lines[i + 1].split()])
                arrays[name] = values.reshape(int(rows), int(cols))
                i += 2
            else:
                raise CheckpointError(f"{path}: unexpected record {kind!r}")
        sizes = {k: int(meta.pop(k)) for k in ("d", "ell", "y_width", "z_width", "depth")}
    except (ValueError, KeyError, IndexError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    for name in arrays:
        if ".b" in name:
            arrays[name] = arrays[name].ravel()
    return NetworkParams(sizes["d"], sizes["ell"], arrays, sizes["y_width"],
                         sizes["z_width"], sizes["depth"], meta)
