"""Square-root velocity functions and elastic similarity between Lorenz curves.

The elastic inner product maximises ``<q1, (q2 o gamma) sqrt(gamma')>`` over
piecewise-linear warps whose vertices lie on the ``m x m`` lattice of grid
nodes, using dynamic programming over a fixed set of step patterns.  Each
SRVF is treated as the piecewise-linear interpolant of its node values; the
segment integrals are computed exactly (Simpson's rule on the merged
breakpoints of both curves), and the optimum is divided by the product of
the exact L2 norms.  Since a piecewise-linear warp acts isometrically on the
interpolant, the result obeys Cauchy-Schwarz and lies in [-1, 1] up to
rounding; self-similarity under the identity warp is exactly 1.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import List, Sequence, Tuple

import numba
import numpy as np

from .errors import InputError
from .income import LorenzCurve

# every coprime (a, b) with a, b <= 4; (1, 1) first so ties favour the identity.
# A path can only mix these slopes, and sqrt is concave, so a coarser set
# caps the attainable inner product below 1 however fine the grid.
STEPS: Tuple[Tuple[int, int], ...] = ((1, 1), (1, 2), (2, 1), (1, 3), (3, 1), (2, 3), (3, 2),
                                      (1, 4), (4, 1), (3, 4), (4, 3))
FISHER_EPS = 1e-8


@dataclass
class Srvf:
    grid: np.ndarray
    q: np.ndarray
    state_id: str = ""

    @property
    def m(self) -> int:
        return self.q.size

    def norm2(self) -> float:
        """Trapezoidal squared L2 norm."""
        return float(np.trapezoid(self.q ** 2, self.grid))


@dataclass
class WarpingFunction:
    grid: np.ndarray
    gamma: np.ndarray

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.gamma - self.grid)) <= tol)


@dataclass
class SimilarityMatrix:
    """Elastic similarities ``S`` and their Fisher Z-transform ``Z``."""

    ids: List[str]
    S: np.ndarray
    Z: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ids)

    def to_dict(self) -> dict:
        return {"ids": list(self.ids), "S": self.S.tolist(), "Z": self.Z.tolist(),
                "eps": FISHER_EPS}

    @classmethod
    def from_dict(cls, d) -> "SimilarityMatrix":
        S = np.asarray(d["S"], dtype=float)
        Z = np.asarray(d["Z"], dtype=float) if "Z" in d else fisher_z(S, d.get("eps", FISHER_EPS))
        return cls(list(d["ids"]), S, Z)


def srvf(curve: LorenzCurve) -> Srvf:
    """``sign(f') sqrt(|f'|)`` with central differences inside, one-sided at the ends."""
    f = curve.share
    if f.size < 3:
        raise InputError("SRVF needs a grid of at least 3 points")
    h = np.diff(curve.grid)
    if not np.allclose(h, h[0], rtol=1e-9, atol=0):
        raise InputError("SRVF requires a uniform grid")
    d = np.gradient(f, h[0], edge_order=1)
    return Srvf(curve.grid.copy(), np.sign(d) * np.sqrt(np.abs(d)), curve.state_id)


def fisher_z(S, eps: float = FISHER_EPS) -> np.ndarray:
    """``log((1+s)/(1-s))`` after clipping ``s`` to [-1+eps, 1-eps]."""
    s = np.clip(np.asarray(S, dtype=float), -1.0 + eps, 1.0 - eps)
    return np.log1p(s) - np.log1p(-s)


def _step_quadrature(steps):
    """Exact quadrature of q1(i + a u) q2(j + b u) over u in [0, 1].

    Returns flat arrays (offset and fraction for both axes, weights) plus
    per-step start indices.  Offsets are computed in rational arithmetic.
    """
    ia, fa, ib, fb, w, start = [], [], [], [], [], [0]
    for a, b in steps:
        br = sorted({Fraction(k, a) for k in range(a + 1)} | {Fraction(k, b) for k in range(b + 1)})
        nodes = {}
        for u0, u1 in zip(br[:-1], br[1:]):
            length = u1 - u0
            for u, c in ((u0, length / 6), ((u0 + u1) / 2, 4 * length / 6), (u1, length / 6)):
                nodes[u] = nodes.get(u, 0) + c
        for u, c in sorted(nodes.items()):
            xa, xb = a * u, b * u
            ia.append(int(xa)), fa.append(float(xa - int(xa)))
            ib.append(int(xb)), fb.append(float(xb - int(xb)))
            w.append(float(c) * (a * b) ** 0.5)
        start.append(len(w))
    return (np.array(ia, np.int64), np.array(fa), np.array(ib, np.int64), np.array(fb),
            np.array(w), np.array(start, np.int64))


_STEP_A = np.array([s[0] for s in STEPS], np.int64)
_STEP_B = np.array([s[1] for s in STEPS], np.int64)
_QUAD = _step_quadrature(STEPS)


@numba.njit(cache=True, nogil=True)
def _lerp(q, i0, frac):
    if frac == 0.0:
        return q[i0]
    return q[i0] * (1.0 - frac) + q[i0 + 1] * frac


@numba.njit(cache=True, nogil=True)
def _segment(q1, q2, i, j, s, qia, qfa, qib, qfb, qw, qstart):
    acc = 0.0
    for k in range(qstart[s], qstart[s + 1]):
        acc += qw[k] * _lerp(q1, i + qia[k], qfa[k]) * _lerp(q2, j + qib[k], qfb[k])
    return acc


@numba.njit(cache=True, nogil=True)
def _dp_align(q1, q2, h, step_a, step_b, qia, qfa, qib, qfb, qw, qstart):
    m = q1.size
    best = np.full((m, m), -np.inf)
    back = np.full((m, m), -1, np.int64)
    best[0, 0] = 0.0
    for i in range(1, m):
        for j in range(1, m):
            top = -np.inf
            arg = -1
            for s in range(step_a.size):
                a = step_a[s]
                b = step_b[s]
                if a > i or b > j:
                    continue
                prev = best[i - a, j - b]
                if prev == -np.inf:
                    continue
                cand = prev + h * _segment(q1, q2, i - a, j - b, s, qia, qfa, qib, qfb, qw, qstart)
                if cand > top:
                    top = cand
                    arg = s
            best[i, j] = top
            back[i, j] = arg
    return best[m - 1, m - 1], back


def _pl_norm2(q: np.ndarray, h: float) -> float:
    """Exact squared L2 norm of the piecewise-linear interpolant."""
    return float(h * np.sum(q[:-1] ** 2 + q[:-1] * q[1:] + q[1:] ** 2) / 3.0)


def _backtrack(back: np.ndarray) -> List[Tuple[int, int]]:
    i = j = back.shape[0] - 1
    path = [(i, j)]
    while (i, j) != (0, 0):
        s = back[i, j]
        if s < 0:
            raise RuntimeError("broken DP back-pointer")
        i, j = i - STEPS[s][0], j - STEPS[s][1]
        path.append((i, j))
    return path[::-1]


def align(q1: np.ndarray, q2: np.ndarray, h: float):
    """Raw DP optimum of the unnormalised warped inner product and its back-pointers."""
    q1 = np.ascontiguousarray(q1, dtype=float)
    q2 = np.ascontiguousarray(q2, dtype=float)
    return _dp_align(q1, q2, h, _STEP_A, _STEP_B, *_QUAD)


def elastic_inner_product(q1: Srvf, q2: Srvf, allow_reflection: bool = False):
    """Elastic inner product of two SRVFs and the warp applied to ``q2``.

    Returns ``(value, WarpingFunction)`` with ``value`` in [-1, 1].  With
    ``allow_reflection`` the sign of ``q2`` is also optimised (O(1) instead of
    SO(1)).
    """
    if q1.m != q2.m or not np.allclose(q1.grid, q2.grid):
        raise InputError("SRVFs must share a common grid")
    h = float(q1.grid[1] - q1.grid[0])
    norm = np.sqrt(_pl_norm2(q1.q, h) * _pl_norm2(q2.q, h))
    raw, back = align(q1.q, q2.q, h)
    if allow_reflection:
        raw_neg, back_neg = align(q1.q, -q2.q, h)
        if raw_neg > raw:
            raw, back = raw_neg, back_neg
    value = float(np.clip(raw / norm, -1.0, 1.0)) if norm > 0 else 0.0
    path = np.array(_backtrack(back), dtype=float)
    gamma = np.interp(q1.grid, q1.grid[path[:, 0].astype(int)], q1.grid[path[:, 1].astype(int)])
    gamma[0], gamma[-1] = 0.0, 1.0
    return value, WarpingFunction(q1.grid.copy(), gamma)


def _pair_value(args):
    q1, q2, h, norm, allow_reflection = args
    raw, _ = align(q1, q2, h)
    if allow_reflection:
        raw = max(raw, align(q1, -q2, h)[0])
    return float(np.clip(raw / norm, -1.0, 1.0)) if norm > 0 else 0.0


def similarity_matrix(curves: Sequence[LorenzCurve], eps: float = FISHER_EPS,
                      allow_reflection: bool = False, threads: int = 1) -> SimilarityMatrix:
    """Pairwise elastic similarities (one alignment per unordered pair)."""
    if len(curves) < 2:
        raise InputError("need at least two curves")
    qs = [srvf(c) for c in curves]
    m = qs[0].m
    if any(q.m != m or not np.allclose(q.grid, qs[0].grid) for q in qs):
        raise InputError("all curves must share a common grid")
    h = float(qs[0].grid[1] - qs[0].grid[0])
    norms = [_pl_norm2(q.q, h) for q in qs]
    pairs = list(combinations(range(len(qs)), 2))
    jobs = [(np.ascontiguousarray(qs[i].q), np.ascontiguousarray(qs[j].q), h,
             np.sqrt(norms[i] * norms[j]), allow_reflection) for i, j in pairs]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(_pair_value, jobs))
    else:
        values = [_pair_value(job) for job in jobs]
    n = len(qs)
    S = np.eye(n)
    for (i, j), v in zip(pairs, values):
        S[i, j] = S[j, i] = v
    return SimilarityMatrix([c.state_id for c in curves], S, fisher_z(S, eps))


# --- file formats -------------------------------------------------------------

def write_similarity(sim: SimilarityMatrix, out_dir) -> List[Path]:
    """Write ``similarity.json`` plus dense ``S.csv`` and ``Z.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "similarity.json", out_dir / "S.csv", out_dir / "Z.csv"]
    paths[0].write_text(json.dumps(sim.to_dict()))
    for path, mat in zip(paths[1:], (sim.S, sim.Z)):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(sim.ids)
            w.writerows([repr(x) for x in row] for row in mat.tolist())
    return paths


def read_similarity(path) -> SimilarityMatrix:
    """Load a similarity matrix from JSON or from a dense ``S`` CSV."""
    path = Path(path)
    if not path.exists():
        raise InputError("matrix file not found", path=path)
    if path.suffix == ".json":
        try:
            return SimilarityMatrix.from_dict(json.loads(path.read_text()))
        except (json.JSONDecodeError, KeyError) as exc:
            raise InputError(f"malformed matrix JSON ({exc})", path=path) from exc
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = rows[0]
    body = rows[1:]
    if len(body) != len(ids):
        raise InputError(f"expected {len(ids)} matrix rows, got {len(body)}", path=path)
    mat = np.empty((len(ids), len(ids)))
    for k, row in enumerate(body):
        if len(row) != len(ids):
            raise InputError(f"expected {len(ids)} columns", line=k + 2, path=path)
        try:
            mat[k] = [float(x) for x in row]
        except ValueError:
            raise InputError("non-numeric matrix entry", line=k + 2, path=path) from None
    return SimilarityMatrix(ids, mat, fisher_z(mat))
