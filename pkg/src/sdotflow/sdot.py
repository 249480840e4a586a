"""Semi-discrete optimal transport between a Gaussian prior and a point cloud.

The transport map sends a noise vector ``x`` to ``argmin_i |x - y_i|^2 - g_i``
(a Laguerre cell assignment). The dual weights ``g`` are found by stochastic
ascent on the dual objective: its gradient is ``b - mass(g)`` where
``mass_i`` is the prior mass of cell ``i``, estimated from noise batches.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import FormatError, NumericalError, ValidationError
from .rng import generator

_CHUNK = 1 << 18  # max entries in one cost block
# exp() below this is < 1e-304 of the row maximum; the floor keeps numpy off
# the slow subnormal path
_EXP_FLOOR = -700.0


@dataclass(frozen=True)
class Dataset:
    """Discrete target distribution: points with probability weights.

    ``class_ids`` is ``None`` for unconditional data. Arrays are made
    read-only so a Dataset can be shared freely.
    """

    points: np.ndarray
    weights: np.ndarray
    class_ids: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[1] < 1:
            raise ValidationError(f"points must be an (n, d) array, got shape {pts.shape}")
        if pts.shape[0] == 0:
            raise ValidationError("dataset is empty")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("points contain non-finite values")
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise ValidationError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if not np.all(w > 0):
            raise ValidationError("weights must be strictly positive")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValidationError(f"weights sum to {math.fsum(w)!r}, expected 1")
        cls = None
        if self.class_ids is not None:
            cls = np.array(self.class_ids, dtype=np.int64).reshape(-1)
            if cls.shape[0] != pts.shape[0]:
                raise ValidationError("class_ids length differs from point count")
            if np.any(cls < 0):
                raise ValidationError("class ids must be non-negative")
            cls.setflags(write=False)
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "class_ids", cls)

    @classmethod
    def uniform(cls, points, class_ids=None) -> "Dataset":
        n = np.asarray(points).shape[0]
        return cls(points, np.full(n, 1.0 / n), class_ids)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def classes(self) -> list[int]:
        if self.class_ids is None:
            return [0]
        return sorted(int(c) for c in np.unique(self.class_ids))

    def class_indices(self, class_id: int) -> np.ndarray:
        """Global indices of the points belonging to ``class_id``."""
        if self.class_ids is None:
            if class_id != 0:
                raise ValidationError(f"unconditional dataset has no class {class_id}")
            return np.arange(self.size)
        idx = np.flatnonzero(self.class_ids == class_id)
        if idx.size == 0:
            raise ValidationError(f"dataset has no points of class {class_id}")
        return idx

    def restrict(self, class_id: int) -> "Dataset":
        """Sub-dataset of one class with weights renormalised to sum to 1."""
        idx = self.class_indices(class_id)
        w = self.weights[idx]
        w = w / math.fsum(w)
        # fix the last entry so the fsum is exactly 1 after rounding
        w[-1] = 1.0 - math.fsum(w[:-1])
        return Dataset(self.points[idx], w, None)


@dataclass
class DualWeights:
    """Dual vector ``g`` and its exponential moving average."""

    g: np.ndarray
    g_ema: np.ndarray

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64).reshape(-1)
        self.g_ema = np.asarray(self.g_ema, dtype=np.float64).reshape(-1)
        if self.g.shape != self.g_ema.shape:
            raise ValidationError("g and g_ema lengths differ")
        if not (np.all(np.isfinite(self.g)) and np.all(np.isfinite(self.g_ema))):
            raise ValidationError("dual weights must be finite")

    @classmethod
    def zeros(cls, n: int) -> "DualWeights":
        return cls(np.zeros(n), np.zeros(n))

    @classmethod
    def from_vector(cls, g) -> "DualWeights":
        g = np.asarray(g, dtype=np.float64)
        return cls(g.copy(), g.copy())

    def __len__(self):
        return self.g.shape[0]


@dataclass(frozen=True)
class Stage:
    num_steps: int
    learning_rate: float
    batch_size: int
    ema_beta: float = 0.99
    entropic_eps: float = 0.0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValidationError("stage num_steps must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("stage batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("stage learning_rate must be > 0")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ValidationError("stage ema_beta must lie in [0, 1)")
        if not self.entropic_eps >= 0:
            raise ValidationError("stage entropic_eps must be >= 0")


@dataclass(frozen=True)
class SdotConfig:
    stages: tuple[Stage, ...]
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    master_seed: int = 0

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValidationError("at least one stage is required")
        object.__setattr__(self, "stages", stages)

    @property
    def total_steps(self) -> int:
        return sum(s.num_steps for s in self.stages)


@dataclass(frozen=True)
class MetricsSnapshot:
    step: int
    mre_est: float
    l1_est: float
    warmup: bool = False


@dataclass(frozen=True)
class NoisePrior:
    """Standard normal prior on R^dim (the only supported kind)."""

    dim: int
    kind: str = "standard_normal"

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("prior dim must be >= 1")
        if self.kind != "standard_normal":
            raise ValidationError(f"unsupported prior kind {self.kind!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.dim))


@dataclass
class SolveResult:
    duals: DualWeights
    history: list[MetricsSnapshot]
    grad_ema: np.ndarray = field(repr=False)


# --- assignment -------------------------------------------------------------


def dual_vector(g) -> np.ndarray:
    """Plain array form of a dual argument; a DualWeights contributes ``g_ema``."""
    return np.asarray(g.g_ema if isinstance(g, DualWeights) else g, dtype=np.float64)


def _check_inputs(x: np.ndarray, dataset: Dataset, g) -> np.ndarray:
    if x.shape[-1] != dataset.dim:
        raise ValidationError(f"noise dimension {x.shape[-1]} != data dimension {dataset.dim}")
    g = dual_vector(g)
    if g.shape != (dataset.size,):
        raise ValidationError(f"dual vector has shape {g.shape}, expected ({dataset.size},)")
    if not np.all(np.isfinite(g)):
        raise ValidationError("dual vector contains non-finite values")
    return g


def _shifted_costs(x: np.ndarray, points: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``|y_i|^2 - 2 <x_j, y_i> - g_i`` for a block of noise rows.

    This is ``|x_j - y_i|^2 - g_i`` minus ``|x_j|^2``; argmin and softmax
    over ``i`` do not see the dropped per-row term.
    """
    out = x @ (-2.0 * points).T
    out += np.einsum("nd,nd->n", points, points) - g
    return out


def _blocks(n_rows: int, n_points: int):
    step = max(1, _CHUNK // max(1, n_points))
    for start in range(0, n_rows, step):
        yield slice(start, min(n_rows, start + step))


def _soft_column_sums(x: np.ndarray, points: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    """``sum_j softmax_i(-(|x_j - y_i|^2 - g_i) / eps)`` over the rows of ``x``."""
    z = x @ (points * (2.0 / eps)).T
    z += (g - np.einsum("nd,nd->n", points, points)) / eps
    z -= z.max(axis=1, keepdims=True)
    np.maximum(z, _EXP_FLOOR, out=z)
    np.exp(z, out=z)
    return (1.0 / z.sum(axis=1)) @ z


def hard_assign_batch(x: np.ndarray, dataset: Dataset, g) -> np.ndarray:
    """Laguerre cell index of every row of ``x`` (ties go to the smallest index)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = _check_inputs(x, dataset, g)
    out = np.empty(x.shape[0], dtype=np.int64)
    for sl in _blocks(x.shape[0], dataset.size):
        # argmin returns the first minimum, which is the tie-break we want
        out[sl] = np.argmin(_shifted_costs(x[sl], dataset.points, g), axis=1)
    return out


def hard_assign(x0, dataset: Dataset, g) -> int:
    """Index of the Laguerre cell containing ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    return int(hard_assign_batch(x0[None, :], dataset, g)[0])


def _softmax_rows(shifted: np.ndarray, eps: float) -> np.ndarray:
    z = -shifted / eps
    z -= z.max(axis=1, keepdims=True)
    np.maximum(z, _EXP_FLOOR, out=z)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def soft_assign_batch(x: np.ndarray, dataset: Dataset, g, eps: float) -> np.ndarray:
    if not eps > 0:
        raise ValidationError("soft assignment needs eps > 0; use hard_assign for eps = 0")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = _check_inputs(x, dataset, g)
    out = np.empty((x.shape[0], dataset.size))
    for sl in _blocks(x.shape[0], dataset.size):
        out[sl] = _softmax_rows(_shifted_costs(x[sl], dataset.points, g), eps)
    return out


def soft_assign(x0, dataset: Dataset, g, eps: float) -> np.ndarray:
    """Entropic cell membership: softmax of ``-(|x0 - y_i|^2 - g_i) / eps``."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    return soft_assign_batch(x0[None, :], dataset, g, eps)[0]


def gradient_estimate(noise_batch: np.ndarray, dataset: Dataset, g, eps: float = 0.0) -> np.ndarray:
    """Monte-Carlo estimate of ``mass(g) - b``.

    Averages one-hot (``eps == 0``) or softmax (``eps > 0``) assignments
    over the batch. Entries sum to zero up to rounding.
    """
    x = np.atleast_2d(np.asarray(noise_batch, dtype=np.float64))
    if x.shape[0] < 1:
        raise ValidationError("noise batch is empty")
    g = _check_inputs(x, dataset, g)
    n = dataset.size
    mass = np.zeros(n)
    for sl in _blocks(x.shape[0], n):
        if eps > 0:
            mass += _soft_column_sums(x[sl], dataset.points, g, eps)
        else:
            mass += np.bincount(np.argmin(_shifted_costs(x[sl], dataset.points, g), axis=1), minlength=n)
    return mass / x.shape[0] - dataset.weights


# --- metrics ----------------------------------------------------------------


def estimate_metrics(grad_ema, dataset: Dataset, step: int = 0, warmup: bool = False) -> MetricsSnapshot:
    """MRE and L1 estimates from a smoothed gradient (or an exact mass error).

    ``mre_est = max_i |grad_i| / b_i``, ``l1_est = sum_i |grad_i|``.
    """
    grad = np.asarray(grad_ema, dtype=np.float64).reshape(-1)
    b = dataset.weights
    if grad.shape != b.shape:
        raise ValidationError(f"gradient length {grad.shape[0]} != dataset size {b.shape[0]}")
    if np.any(b == 0):
        raise ValidationError("zero target weight")
    return MetricsSnapshot(
        step=step,
        mre_est=float(np.max(np.abs(grad) / b)),
        l1_est=float(np.sum(np.abs(grad))),
        warmup=warmup,
    )


def warmup_steps(beta: float) -> int:
    """Number of leading steps whose EMA metrics are still biased toward 0."""
    return max(10, math.ceil(1.0 / (1.0 - beta)))


# --- solver -----------------------------------------------------------------


def solve_dual(dataset: Dataset, prior: NoisePrior, config: SdotConfig,
               record_every: int = 1) -> SolveResult:
    """Stochastic Adam ascent on the dual objective.

    Every step draws ``batch_size`` noise vectors, forms the mass-error
    estimate, folds it into the gradient EMA, takes an Adam step along
    ``b - mass`` and updates ``g_ema``. Adam moments persist across stages.

    Returns
    -------
    SolveResult
        ``duals.g_ema`` is the answer; ``history`` holds one snapshot per
        ``record_every`` steps plus the final step.
    """
    if prior.dim != dataset.dim:
        raise ValidationError(f"prior dimension {prior.dim} != data dimension {dataset.dim}")
    n = dataset.size
    rng = generator(config.master_seed)
    g = np.zeros(n)
    g_ema = np.zeros(n)
    grad_ema = np.zeros(n)
    m = np.zeros(n)
    v = np.zeros(n)
    b1, b2 = config.adam_beta1, config.adam_beta2
    n_warm = warmup_steps(config.stages[0].ema_beta)
    history: list[MetricsSnapshot] = []
    total = config.total_steps
    step = 0
    for stage in config.stages:
        beta = stage.ema_beta
        for _ in range(stage.num_steps):
            step += 1
            x = prior.sample(rng, stage.batch_size)
            grad = gradient_estimate(x, dataset, g, stage.entropic_eps)
            if not np.all(np.isfinite(grad)):
                raise NumericalError("non-finite dual gradient", step=step)
            grad_ema = beta * grad_ema + (1.0 - beta) * grad
            ascent = -grad
            m = b1 * m + (1.0 - b1) * ascent
            v = b2 * v + (1.0 - b2) * ascent * ascent
            m_hat = m / (1.0 - b1 ** step)
            v_hat = v / (1.0 - b2 ** step)
            g = g + stage.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
            if not np.all(np.isfinite(g)):
                raise NumericalError("dual weights became non-finite", step=step)
            g_ema = beta * g_ema + (1.0 - beta) * g
            if step % record_every == 0 or step == total:
                history.append(estimate_metrics(grad_ema, dataset, step, warmup=step <= n_warm))
    return SolveResult(DualWeights(g, g_ema), history, grad_ema)


# --- 1D oracle --------------------------------------------------------------


def cell_intervals_1d(points, g) -> tuple[np.ndarray, np.ndarray]:
    """Exact Laguerre intervals ``[lo_i, hi_i]`` on the real line.

    Costs minus ``x^2`` are lines with slopes ``-2 y_i``; cell ``i`` is where
    line ``i`` is the lower envelope. For adjacent cells the boundary is
    ``(y_i + y_{i+1}) / 2 - (g_{i+1} - g_i) / (2 (y_{i+1} - y_i))``. An
    empty cell comes back with ``lo_i == hi_i``.
    """
    y = np.asarray(points, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if y.shape != g.shape:
        raise ValidationError("points and duals differ in length")
    if y.size > 1 and not np.all(np.diff(y) > 0):
        raise ValidationError("1D oracle needs strictly increasing points")
    n = y.size
    # crossing[i, j] for i < j: x where cell i (left) hands over to cell j
    yi, yj = y[:, None], y[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        crossing = (yi + yj) / 2.0 - (g[None, :] - g[:, None]) / (2.0 * (yj - yi))
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    hi = np.where(upper, crossing, np.inf).min(axis=1)
    lo = np.where(upper.T, crossing.T, -np.inf).max(axis=1)
    lo = np.minimum(lo, hi)
    return lo, hi


def exact_cell_mass_1d(dataset_1d: Dataset, g) -> np.ndarray:
    """Standard-normal mass of every Laguerre cell of a sorted 1D dataset."""
    if dataset_1d.dim != 1:
        raise ValidationError("exact_cell_mass_1d needs one-dimensional points")
    g = dual_vector(g)
    lo, hi = cell_intervals_1d(dataset_1d.points[:, 0], g)
    return np.maximum(ndtr(hi) - ndtr(lo), 0.0)


def adjacent_boundaries_1d(dataset_1d: Dataset, g) -> np.ndarray:
    """Right edge of every cell but the last (``hi[:-1]`` of the intervals)."""
    g = dual_vector(g)
    _, hi = cell_intervals_1d(dataset_1d.points[:, 0], g)
    return hi[:-1]


# --- persistence ------------------------------------------------------------

_DUAL_MAGIC = b"ALNW"
_DUAL_VERSION = 1
_DUAL_HEADER = struct.Struct("<4sHI")


def write_duals(duals: DualWeights, path) -> None:
    n = len(duals)
    with open(path, "wb") as fh:
        fh.write(_DUAL_HEADER.pack(_DUAL_MAGIC, _DUAL_VERSION, n))
        fh.write(duals.g_ema.astype("<f8").tobytes())
        fh.write(duals.g.astype("<f8").tobytes())


def read_duals(path) -> DualWeights:
    raw = Path(path).read_bytes()
    if len(raw) < _DUAL_HEADER.size:
        raise FormatError("dual file truncated in header", offset=len(raw))
    magic, version, n = _DUAL_HEADER.unpack_from(raw, 0)
    if magic != _DUAL_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != _DUAL_VERSION:
        raise FormatError(f"unsupported dual file version {version}", offset=4)
    expected = _DUAL_HEADER.size + 16 * n
    if len(raw) != expected:
        raise FormatError(f"dual file has {len(raw)} bytes, expected {expected}",
                          offset=min(len(raw), expected))
    body = np.frombuffer(raw, dtype="<f8", offset=_DUAL_HEADER.size)
    return DualWeights(g=body[n:].astype(np.float64), g_ema=body[:n].astype(np.float64))


def write_metrics_csv(history: Sequence[MetricsSnapshot], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mre_est", "l1_est", "warmup"])
        for snap in history:
            w.writerow([snap.step, repr(snap.mre_est), repr(snap.l1_est), int(snap.warmup)])


def read_metrics_csv(path) -> list[MetricsSnapshot]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsSnapshot(int(r["step"]), float(r["mre_est"]), float(r["l1_est"]),
                            bool(int(r["warmup"]))) for r in rows]
