"""Half-vectorization of symmetric matrices.

Ordering is column-major over the lower triangle: ``(0,0), (1,0), ..., (d-1,0),
(1,1), (2,1), ...``. Two coordinate systems are used for ``S_d``:

* primal: ``vech(X)`` for states,
* dual: ``dual(U)``, i.e. ``vech(U)`` with doubled off-diagonals, so that
  ``dual(U) @ vech(X) == tr(U X)``.

``adjoint`` is the inverse of ``dual``: the adjoint of ``vech`` under the
trace inner product.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def vech_size(d: int) -> int:
    return d * (d + 1) // 2


def matrix_dim(p: int) -> int:
    d = int(round((np.sqrt(8 * p + 1) - 1) / 2))
    if vech_size(d) != p:
        raise ValueError(f"{p} is not a triangular number")
    return d


@lru_cache(maxsize=None)
def tril_indices(d: int) -> tuple:
    rows, cols = [], []
    for j in range(d):
        for i in range(j, d):
            rows.append(i)
            cols.append(j)
    return np.array(rows), np.array(cols)


def vech(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    rows, cols = tril_indices(x.shape[-1])
    return x[..., rows, cols]


def mat(s: np.ndarray) -> np.ndarray:
    """Symmetric matrix with ``vech(mat(s)) == s``."""
    s = np.asarray(s)
    d = matrix_dim(s.shape[-1])
    rows, cols = tril_indices(d)
    out = np.zeros(s.shape[:-1] + (d, d), dtype=s.dtype)
    out[..., rows, cols] = s
    out[..., cols, rows] = s
    return out


def _offdiag_mask(d: int) -> np.ndarray:
    rows, cols = tril_indices(d)
    return rows != cols


def dual(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u)
    d = u.shape[-1]
    w = vech(u).copy()
    w[..., _offdiag_mask(d)] *= 2
    return w


def adjoint(y: np.ndarray) -> np.ndarray:
    """Symmetric matrix ``A`` with ``y @ vech(x) == tr(x A)`` for symmetric ``x``."""
    y = np.array(y, dtype=np.result_type(np.asarray(y), float))
    y[..., _offdiag_mask(matrix_dim(y.shape[-1]))] /= 2
    return mat(y)
