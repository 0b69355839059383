"""Minimal banded-matrix container used by every operator in the package.

Diagonals are stored in a dict keyed by offset k; the array for offset k
has length n - |k| and holds M[i, i+k] (k >= 0) or M[i-k, i] (k < 0).
Symmetric matrices store only k >= 0 with `symmetric=True`.

This is deliberately not a full matrix class: it exists to feed LAPACK's
banded drivers (solve_banded, eig_banded) and scipy.sparse without anyone
downstream touching storage conventions.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded


class Banded:
    def __init__(self, n: int, diags: dict[int, np.ndarray], symmetric: bool = False):
        self.n = n
        self.symmetric = symmetric
        self.diags = {}
        for k, arr in diags.items():
            arr = np.asarray(arr)
            if arr.shape != (n - abs(k),):
                raise ValueError(f"diagonal {k}: expected length {n - abs(k)}, got {arr.shape}")
            if symmetric and k < 0:
                raise ValueError("symmetric storage keeps only k >= 0")
            self.diags[int(k)] = arr

    @property
    def bandwidth(self) -> int:
        return max(abs(k) for k in self.diags)

    def _alldiags(self) -> dict[int, np.ndarray]:
        out = dict(self.diags)
        if self.symmetric:
            for k, arr in self.diags.items():
                if k > 0:
                    out[-k] = arr
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = np.zeros(self.n, dtype=np.result_type(x.dtype, *(a.dtype for a in self.diags.values())))
        for k, arr in self._alldiags().items():
            if k >= 0:
                y[: self.n - k] += arr * x[k:]
            else:
                y[-k:] += arr * x[: self.n + k]
        return y

    def add_diag(self, v) -> "Banded":
        d = {k: a.copy() for k, a in self.diags.items()}
        d[0] = d.get(0, np.zeros(self.n)) + v
        return Banded(self.n, d, symmetric=self.symmetric)

    def scaled(self, a: float) -> "Banded":
        return Banded(self.n, {k: a * arr for k, arr in self.diags.items()}, symmetric=self.symmetric)

    def plus(self, other: "Banded") -> "Banded":
        if other.n != self.n:
            raise ValueError("size mismatch")
        sym = self.symmetric and other.symmetric
        mine, theirs = self._alldiags(), other._alldiags()
        keys = set(mine) | set(theirs)
        if sym:
            keys = {k for k in keys if k >= 0}
        d = {}
        for k in keys:
            n = self.n - abs(k)
            d[k] = mine.get(k, np.zeros(n)) + theirs.get(k, np.zeros(n))
        return Banded(self.n, d, symmetric=sym)

    def lower_form(self) -> np.ndarray:
        """(p+1, n) lower-banded storage for scipy.linalg.eig_banded(lower=True)."""
        if not self.symmetric:
            raise ValueError("lower_form requires symmetric storage")
        p = self.bandwidth
        ab = np.zeros((p + 1, self.n))
        for k, arr in self.diags.items():
            ab[k, : self.n - k] = arr
        return ab

    def ab_form(self) -> tuple[tuple[int, int], np.ndarray]:
        """((l, u), ab) for scipy.linalg.solve_banded."""
        alld = self._alldiags()
        u = max(max((k for k in alld if k > 0), default=0), 0)
        l = max(max((-k for k in alld if k < 0), default=0), 0)
        dtype = np.result_type(*(a.dtype for a in alld.values()))
        ab = np.zeros((l + u + 1, self.n), dtype=dtype)
        for k, arr in alld.items():
            if k >= 0:
                ab[u - k, k:] = arr
            else:
                ab[u - k, : self.n + k] = arr
        return (l, u), ab

    def solve(self, b: np.ndarray) -> np.ndarray:
        (l, u), ab = self.ab_form()
        return solve_banded((l, u), ab, b)

    def to_sparse(self) -> sp.csr_matrix:
        alld = self._alldiags()
        offsets = sorted(alld)
        data = []
        for k in offsets:
            arr = alld[k]
            row = np.zeros(self.n, dtype=arr.dtype)
            # scipy dia convention: data[d, j] is element (j - d, j)
            if k >= 0:
                row[k:] = arr
            else:
                row[: self.n + k] = arr
            data.append(row)
        return sp.dia_matrix((np.array(data), offsets), shape=(self.n, self.n)).tocsr()

    def toarray(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=np.result_type(*(a.dtype for a in self.diags.values())))
        for k, arr in self._alldiags().items():
            if k >= 0:
                m[np.arange(self.n - k), np.arange(k, self.n)] = arr
            else:
                m[np.arange(-k, self.n), np.arange(self.n + k)] = arr
        return m
