"""Two-layer LeakyReLU perceptrons with hand-written gradients, SGD and helpers.

Parameter containers are dataclasses whose ndarray fields are the trainable
tensors; :func:`param_arrays` flattens a (possibly nested) container into
``{"f.w1": array, ...}`` and :func:`replace_arrays` rebuilds it. Gradients
use the same flat naming.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_HIDDEN = 2048
DEFAULT_SLOPE = 0.01


def param_arrays(params, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for f in dataclasses.fields(params):
        v = getattr(params, f.name)
        if isinstance(v, np.ndarray):
            out[prefix + f.name] = v
        elif dataclasses.is_dataclass(v):
            out.update(param_arrays(v, prefix + f.name + "."))
    return out


def replace_arrays(params, arrays: Mapping[str, np.ndarray], prefix: str = ""):
    changes = {}
    for f in dataclasses.fields(params):
        v = getattr(params, f.name)
        key = prefix + f.name
        if isinstance(v, np.ndarray) and key in arrays:
            changes[f.name] = arrays[key]
        elif dataclasses.is_dataclass(v):
            changes[f.name] = replace_arrays(v, arrays, key + ".")
    return dataclasses.replace(params, **changes)


@dataclass(frozen=True, eq=False)
class MlpParams:
    """``y = leaky(x @ w1 + b1) @ w2 + b2`` with weights stored (in, out)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if (self.w1.ndim != 2 or self.w2.ndim != 2 or self.b1.shape != (self.w1.shape[1],)
                or self.w2.shape[0] != self.w1.shape[1] or self.b2.shape != (self.w2.shape[1],)):
            raise ShapeError("inconsistent MLP dimension chain")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[1]


def init_mlp(input_dim: int, hidden_dim: int = DEFAULT_HIDDEN, output_dim: int = 1,
             rng: Optional[np.random.Generator] = None, slope: float = DEFAULT_SLOPE) -> MlpParams:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` init for weights and biases."""
    rng = np.random.default_rng() if rng is None else rng
    a1 = 1.0 / np.sqrt(input_dim)
    a2 = 1.0 / np.sqrt(hidden_dim)
    return MlpParams(
        w1=rng.uniform(-a1, a1, size=(input_dim, hidden_dim)),
        b1=rng.uniform(-a1, a1, size=hidden_dim),
        w2=rng.uniform(-a2, a2, size=(hidden_dim, output_dim)),
        b2=rng.uniform(-a2, a2, size=output_dim),
        slope=slope,
    )


def zero_mlp(input_dim: int, hidden_dim: int, output_dim: int = 1, slope: float = DEFAULT_SLOPE):
    return MlpParams(np.zeros((input_dim, hidden_dim)), np.zeros(hidden_dim),
                     np.zeros((hidden_dim, output_dim)), np.zeros(output_dim), slope)


@dataclass(frozen=True, eq=False)
class MlpCache:
    params: MlpParams
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray


def mlp_forward(params: MlpParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input_dim {params.input_dim}")
    z1 = x @ params.w1 + params.b1
    a1 = np.where(z1 > 0, z1, params.slope * z1)
    y = a1 @ params.w2 + params.b2
    return y, MlpCache(params, x, z1, a1)


def mlp_backward(params: MlpParams, cache: MlpCache, grad_out: np.ndarray):
    """Returns ``({"w1", "b1", "w2", "b2"} gradients, input gradient)``."""
    if cache.params is not params:
        raise ContractError("cache was produced by a different parameter set")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (cache.x.shape[0], params.output_dim):
        raise ShapeError(f"output gradient shape {grad_out.shape} does not match forward output")
    grads = {"w2": cache.a1.T @ grad_out, "b2": grad_out.sum(axis=0)}
    da1 = grad_out @ params.w2.T
    dz1 = np.where(cache.z1 > 0, da1, params.slope * da1)
    grads["w1"] = cache.x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads, dz1 @ params.w1.T


def prefixed(grads: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in grads.items()}


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def sgd_step(params, grads: Mapping[str, np.ndarray], config: SgdConfig, ascend: bool = False):
    """Return a new container with ``p - lr * g`` applied to every named gradient.

    With ``clip_norm`` set the joint gradient vector is rescaled to at most
    that norm. ``ascend`` flips the sign.
    """
    arrays = param_arrays(params)
    for k, g in grads.items():
        if k not in arrays:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != arrays[k].shape:
            raise ShapeError(f"gradient {k!r} has shape {g.shape}, parameter {arrays[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}")
    scale = config.learning_rate
    if config.clip_norm is not None:
        norm = global_norm(grads)
        if norm > config.clip_norm:
            scale *= config.clip_norm / norm
    if ascend:
        scale = -scale
    return replace_arrays(params, {k: arrays[k] - scale * g for k, g in grads.items()})


def finite_diff_check(loss_fn: Callable, params, step: float = 1e-5,
                      n_probe: Optional[int] = None, rng=None) -> float:
    """Max of ``|analytic - central| / max(1, |central|)`` over parameter entries.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed
    like :func:`param_arrays`; only the entries it names are checked. With
    ``n_probe`` a random subset of that many entries per array is probed.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    arrays = param_arrays(params)
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for name, g in grads.items():
        base = arrays[name]
        idx = np.arange(base.size)
        if n_probe is not None and n_probe < base.size:
            idx = rng.choice(base.size, size=n_probe, replace=False)
        flat_g = np.asarray(g).ravel()
        for i in idx:
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy().ravel()
                pert[i] += sign * step
                val, _ = loss_fn(replace_arrays(params, {name: pert.reshape(base.shape)}))
                if not np.isfinite(val):
                    raise NumericError("loss is not finite under perturbation")
                vals.append(val)
            fd = (vals[0] - vals[1]) / (2 * step)
            worst = max(worst, abs(flat_g[i] - fd) / max(1.0, abs(fd)))
    return worst


def svd(m: np.ndarray):
    """Thin SVD returning ``(U, s, V)`` with ``m = U @ diag(s) @ V.T``."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericError("svd input has non-finite entries")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"svd did not converge: {exc}") from exc
    return u, s, vt.T


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)
