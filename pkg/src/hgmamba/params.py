"""Named trainable parameters, seeded initialization, and the
finite-difference gradient oracle.

Every trainable array is registered once under a dotted path name
(e.g. "cpkan.layer0.W_cheby"). Initial values are a pure function of
(seed, name, init spec): each parameter draws from its own generator keyed
by name, so registration order never changes initialization.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import HgmambaError, NumericError
from .tensor import Tensor, no_grad


def rng_for(seed, *tags):
    """Generator derived from a seed plus a tag path, stable across runs."""
    key = ":".join(str(t) for t in (seed,) + tags)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


@dataclass(frozen=True)
class InitSpec:
    kind: str  # kaiming_fan_in | normal | constant | uniform
    a: float = 0.0
    b: float = 0.0

    def materialize(self, shape, rng, dtype):
        shape = tuple(shape)
        if self.kind == "kaiming_fan_in":
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            std = self.a * np.sqrt(2.0 / fan_in)
            return rng.normal(0.0, std, size=shape).astype(dtype)
        if self.kind == "normal":
            return rng.normal(self.a, self.b, size=shape).astype(dtype)
        if self.kind == "constant":
            return np.full(shape, self.a, dtype=dtype)
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size=shape).astype(dtype)
        raise HgmambaError(f"unknown init spec kind {self.kind!r}")


def kaiming_fan_in(gain=1.0):
    return InitSpec("kaiming_fan_in", a=float(gain))


def normal(mean, std):
    return InitSpec("normal", a=float(mean), b=float(std))


def constant(value):
    return InitSpec("constant", a=float(value))


def uniform(lo, hi):
    return InitSpec("uniform", a=float(lo), b=float(hi))


class Parameter:
    """A named trainable tensor together with its initialization spec."""

    def __init__(self, name, value, init):
        self.name = name
        self.value = value
        self.init = init

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ParameterStore:
    """Registry of all trainable parameters of one model instance."""

    def __init__(self, seed=0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params = {}

    def add(self, name, shape, init):
        if name in self._params:
            raise HgmambaError(f"parameter {name!r} registered twice")
        rng = rng_for(self.seed, "init", name)
        value = Tensor(init.materialize(shape, rng, self.dtype), requires_grad=True)
        param = Parameter(name, value, init)
        self._params[name] = param
        return value

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def parameters(self):
        return [self._params[name] for name in self.names()]

    def zero_grads(self):
        for param in self._params.values():
            param.value.zero_grad()

    def state_arrays(self):
        return {name: self._params[name].value.data.copy() for name in self.names()}

    def load_state_arrays(self, arrays):
        for name in self.names():
            if name not in arrays:
                raise HgmambaError(f"missing parameter {name!r} in state")
            current = self._params[name].value
            incoming = np.asarray(arrays[name], dtype=current.data.dtype)
            if incoming.shape != current.data.shape:
                raise HgmambaError(
                    f"parameter {name!r}: shape {incoming.shape} != expected {current.data.shape}")
            current.data = incoming.copy()


def grad_check(f, params, eps=1e-5, negate_analytic=False):
    """Max relative error between reverse-mode and central-difference
    gradients of the scalar-valued f over the given parameters.

    f must rebuild its graph from the parameters' live tensors on every
    call; parameter data is perturbed in place for the numeric side.
    negate_analytic flips the analytic gradients and exists only so the
    verification harness can prove it detects wrong gradients.
    """
    tensors = [p.value if isinstance(p, Parameter) else p for p in params]
    for t in tensors:
        t.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check:目standard forward produced non-finite output"
                           if False else "grad_check: forward produced non-finite output")
    out.backward()
    sign = -1.0 if negate_analytic else 1.0
    analytic = [sign * (t.grad if t.grad is not None else np.zeros_like(t.data)) for t in tensors]

    worst = 0.0
    with no_grad():
        for t, grad in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                f_plus = float(f().data.reshape(()))
                flat[i] = original - eps
                f_minus = float(f().data.reshape(()))
                flat[i] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError("grad_check: perturbed forward produced non-finite output")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                ana = float(gflat[i])
                rel = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
                worst = max(worst, rel)
    return worst
