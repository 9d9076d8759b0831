"""Synthetic state-level incomes, empirical Lorenz curves and Gini coefficients."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import InputError

DEFAULT_GRID_SIZE = 101


@dataclass
class IncomeSample:
    values: np.ndarray
    state_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size == 0:
            raise InputError(f"empty income sample for state {self.state_id!r}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise InputError(f"incomes must be finite and nonnegative (state {self.state_id!r})")
        if self.values.sum() <= 0:
            raise InputError(f"incomes of state {self.state_id!r} sum to zero")


@dataclass
class LorenzCurve:
    """Cumulative income share ``share[k] = L(grid[k])``."""

    grid: np.ndarray
    share: np.ndarray
    state_id: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.share = np.asarray(self.share, dtype=float)
        if self.grid.shape != self.share.shape or self.grid.ndim != 1 or self.grid.size < 2:
            raise InputError("grid and share must be 1-D arrays of equal length >= 2")
        if self.grid[0] != 0.0 or self.grid[-1] != 1.0 or np.any(np.diff(self.grid) <= 0):
            raise InputError("Lorenz grid must increase strictly from 0 to 1")


@dataclass(frozen=True)
class ClusterIncomeModel:
    """Gamma incomes plus a Bernoulli-gated Gamma noise term."""

    gamma_shape: float
    gamma_scale: float
    noise_prob: float = 0.0
    noise_shape: float = 1.0
    noise_scale: float = 1.0

    def __post_init__(self):
        for name in ("gamma_shape", "gamma_scale", "noise_shape", "noise_scale"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise InputError("noise_prob must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return self.gamma_shape * self.gamma_scale + self.noise_prob * self.noise_shape * self.noise_scale

    @property
    def variance(self) -> float:
        p = self.noise_prob
        noise_mean = self.noise_shape * self.noise_scale
        noise_var = self.noise_shape * self.noise_scale ** 2
        gated_var = p * (noise_var + noise_mean ** 2) - (p * noise_mean) ** 2
        return self.gamma_shape * self.gamma_scale ** 2 + gated_var


@dataclass
class PartitionDesign:
    """Ground-truth partition of states; ``true_labels`` are 0-based model indices."""

    state_ids: List[str]
    true_labels: np.ndarray
    models: List[ClusterIncomeModel]
    name: str = ""
    neighbor_limit: Optional[int] = None

    def __post_init__(self):
        self.state_ids = [str(s) for s in self.state_ids]
        self.true_labels = np.asarray(self.true_labels, dtype=int)
        if len(self.state_ids) != self.true_labels.size:
            raise InputError("design: states and labels differ in length")
        if len(set(self.state_ids)) != len(self.state_ids):
            raise InputError("design: duplicate state ids")
        if self.true_labels.min() < 0 or self.true_labels.max() >= len(self.models):
            raise InputError("design: a label does not index a model")

    @property
    def n(self) -> int:
        return len(self.state_ids)

    @property
    def k_true(self) -> int:
        return len(np.unique(self.true_labels))

    @classmethod
    def from_dict(cls, d: Mapping) -> "PartitionDesign":
        try:
            models = [ClusterIncomeModel(**m) for m in d["models"]]
            labels = np.asarray(d["labels"], dtype=int) - 1  # files use 1..K
            return cls(list(d["states"]), labels, models, name=d.get("name", ""),
                       neighbor_limit=d.get("neighbor_limit"))
        except (KeyError, TypeError) as exc:
            raise InputError(f"design: missing or malformed field ({exc})") from exc

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "states": self.state_ids,
            "labels": (self.true_labels + 1).tolist(),
            "models": [m.__dict__.copy() for m in self.models],
        }
        if self.neighbor_limit is not None:
            d["neighbor_limit"] = self.neighbor_limit
        return d


def load_design(path) -> PartitionDesign:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read design file ({exc})", path=path) from exc
    return PartitionDesign.from_dict(d)


def empirical_lorenz(sample: IncomeSample, grid_size: int = DEFAULT_GRID_SIZE) -> LorenzCurve:
    """Empirical Lorenz curve resampled onto ``grid_size`` uniform points.

    Cumulative shares are formed at p_k = k/T from the sorted incomes and then
    linearly interpolated, so the endpoints 0 and 1 are always exact.
    """
    if grid_size < 2:
        raise InputError("grid_size must be at least 2")
    y = np.sort(sample.values, kind="stable")
    total = y.sum()
    if not total > 0:
        raise InputError("income total must be positive")
    cum = np.concatenate(([0.0], np.cumsum(y) / total))
    cum[-1] = 1.0
    p = np.arange(y.size + 1) / y.size
    grid = np.linspace(0.0, 1.0, grid_size)
    share = np.interp(grid, p, cum)
    # L(p) <= p can be lost to rounding only
    share = np.minimum(share, grid)
    return LorenzCurve(grid, share, sample.state_id)


def gini(curve: LorenzCurve) -> float:
    """One minus twice the trapezoidal area under the curve."""
    area = np.trapezoid(curve.share, curve.grid)
    return float(1.0 - 2.0 * area)


def gamma_gini(shape: float) -> float:
    """Closed-form Gini coefficient of a Gamma(shape) population."""
    return math.exp(gammaln(shape + 0.5) - gammaln(shape + 1.0)) / math.sqrt(math.pi)


def sample_gini(values) -> float:
    """Gini of raw incomes via the sorted-rank formula (no Lorenz grid)."""
    y = np.sort(np.asarray(values, dtype=float))
    n = y.size
    ranks = np.arange(1, n + 1)
    return float(2.0 * np.sum(ranks * y) / (n * y.sum()) - (n + 1) / n)


def simulate_state(model: ClusterIncomeModel, n_obs: int, rng_seed, state_id: str = "") -> IncomeSample:
    """Draw ``n_obs`` incomes: Gamma + Bernoulli(noise_prob) * Gamma noise."""
    if n_obs < 1:
        raise InputError("n_obs must be >= 1")
    rng = np.random.default_rng(rng_seed)
    base = rng.gamma(model.gamma_shape, model.gamma_scale, size=n_obs)
    gate = rng.random(n_obs) < model.noise_prob
    noise = rng.gamma(model.noise_shape, model.noise_scale, size=n_obs)
    return IncomeSample(base + gate * noise, state_id)


def state_seed(master_seed, index: int, replicate: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(0, replicate, index))


def simulate_design(design: PartitionDesign, n_obs: int, rng_seed,
                    replicate: int = 0) -> Dict[str, IncomeSample]:
    """Simulate every state from its cluster's model with per-state sub-seeds."""
    out = {}
    for idx, (sid, lab) in enumerate(zip(design.state_ids, design.true_labels)):
        out[sid] = simulate_state(design.models[lab], n_obs,
                                  state_seed(rng_seed, idx, replicate), sid)
    return out


# --- file formats -------------------------------------------------------------

def read_income_csv(path) -> Dict[str, IncomeSample]:
    """Read ``state_id,income`` rows; state order is first appearance."""
    path = Path(path)
    values: Dict[str, list] = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot open income file ({exc})", path=path) from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["state_id", "income"]:
            raise InputError("expected header 'state_id,income'", line=1, path=path)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise InputError(f"expected 2 fields, got {len(row)}", line=lineno, path=path)
            sid = row[0].strip()
            try:
                x = float(row[1])
            except ValueError:
                raise InputError(f"income {row[1]!r} is not a number", line=lineno, path=path) from None
            if not math.isfinite(x) or x < 0:
                raise InputError(f"income {row[1]!r} must be finite and nonnegative", line=lineno, path=path)
            values.setdefault(sid, []).append(x)
    if not values:
        raise InputError("income file has no data rows", path=path)
    return {sid: IncomeSample(np.array(v), sid) for sid, v in values.items()}


def write_income_csv(samples: Mapping[str, IncomeSample], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("state_id,income\n")
        for sid, s in samples.items():
            fh.writelines(f"{sid},{x!r}\n" for x in s.values.tolist())


def write_lorenz_csv(curves: Sequence[LorenzCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("state_id,p,L\n")
        for c in curves:
            fh.writelines(f"{c.state_id},{p!r},{l!r}\n" for p, l in zip(c.grid.tolist(), c.share.tolist()))


def read_lorenz_csv(path) -> List[LorenzCurve]:
    path = Path(path)
    rows: Dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["state_id", "p", "L"]:
            raise InputError("expected header 'state_id,p,L'", line=1, path=path)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise InputError(f"expected 3 fields, got {len(row)}", line=lineno, path=path)
            try:
                rows.setdefault(row[0], []).append((float(row[1]), float(row[2])))
            except ValueError:
                raise InputError("non-numeric p or L", line=lineno, path=path) from None
    return [LorenzCurve(np.array([r[0] for r in v]), np.array([r[1] for r in v]), sid)
            for sid, v in rows.items()]
