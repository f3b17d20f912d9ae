"""Tensor helpers, error types and the forkable random stream.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in C (row-major)
order. Nothing here mutates its inputs.
"""
from __future__ import annotations

import hashlib
import os
import tempfile

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class ConstraintError(ValueError):
    pass


class SizeError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contains NaN or Inf")
    return x


def matmul(a, b) -> np.ndarray:
    """``a @ b`` for 2-D float64 operands with a readable shape error."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Deterministic random stream backed by Philox (counter based).

    A stream is identified by its seed and the path of fork labels that led to
    it, so ``Rng(7).fork("masks")`` is the same stream in every process no
    matter what the parent has drawn in the meantime.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise DomainError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def fork(self, label: str) -> "Rng":
        return Rng(self.seed, self._path + (_label_key(label),))

    def random(self, shape=None):
        return self.generator.random(shape, dtype=DTYPE)

    def uniform(self, low, high, shape=None):
        return self.generator.uniform(low, high, shape)

    def normal(self, shape, scale=1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size=size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, depth={len(self._path)})"


def rng_fork(rng: Rng, label: str) -> Rng:
    return rng.fork(label)


def bernoulli(rng: Rng, shape, keep_prob) -> np.ndarray:
    """0/1 float tensor, each entry 1 with probability ``keep_prob``.

    ``keep_prob`` may be a scalar or an array broadcastable to ``shape``.
    """
    p = np.asarray(keep_prob, dtype=DTYPE)
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise DomainError(f"keep probability must lie in [0, 1], got {keep_prob}")
    u = rng.random(shape)
    return (u < p).astype(DTYPE)


def atomic_write(path, data: bytes | str):
    """Write to a temporary sibling, then rename over ``path``."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
