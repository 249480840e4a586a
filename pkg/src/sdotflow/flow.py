"""Flow-matching training with pluggable couplings and regression targets.

Coupling ``independent`` draws noise and data independently each step.
Coupling ``aligned`` consumes a presampled, rebalanced pair table whose
data index was fixed by the SDOT map; noise is regenerated from the seeds.

Targets:

* ``vanilla``  -- ``x1 - x0``.
* ``shortcut`` -- the network takes a step size ``d``; the first ``kappa``
  samples of a batch regress ``x1 - x0`` at ``d = 0``, the rest regress the
  average of two ``d``-steps of the current network (no gradient).
* ``meanflow`` -- the network takes an interval start ``r <= t``; target
  ``v - (t - r) * (v . grad_x u + d_t u)`` with ``v = x1 - x0`` (no gradient).
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .nn import AdamState, MlpParams, adam_update, backward_cached, forward, forward_cached, init_mlp, jvp
from .pairing import pair_noise
from .rng import generator
from .sdot import Dataset

SHORTCUT_STEPS = (1 / 128, 1 / 64, 1 / 32, 1 / 16)


class Coupling(str, enum.Enum):
    INDEPENDENT = "independent"
    ALIGNED = "aligned"


class Target(str, enum.Enum):
    VANILLA = "vanilla"
    SHORTCUT = "shortcut"
    MEANFLOW = "meanflow"

    @property
    def n_extra(self) -> int:
        return 0 if self is Target.VANILLA else 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    num_steps: int = 1000
    learning_rate: float = 1e-3
    loss_p: float = 2.0
    coupling: Coupling = Coupling.INDEPENDENT
    target: Target = Target.VANILLA
    shortcut_kappa: int = 0
    shortcut_steps: tuple[float, ...] = SHORTCUT_STEPS
    meanflow_equal_prob: float = 0.75
    hidden: tuple[int, ...] = (128, 128, 128)
    embed_width: int = 16
    master_seed: int = 0
    loss_ema_beta: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "coupling", Coupling(self.coupling))
        object.__setattr__(self, "target", Target(self.target))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "shortcut_steps", tuple(float(s) for s in self.shortcut_steps))
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.num_steps < 0:
            raise ValidationError("num_steps must be >= 0")
        if not self.loss_p >= 1:
            raise ValidationError("loss exponent p must be >= 1")
        if not 0 <= self.shortcut_kappa <= self.batch_size:
            raise ValidationError("shortcut_kappa must lie in [0, batch_size]")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if not 0 <= self.meanflow_equal_prob <= 1:
            raise ValidationError("meanflow_equal_prob must lie in [0, 1]")
        if any(s <= 0 or s > 1 for s in self.shortcut_steps):
            raise ValidationError("shortcut step sizes must lie in (0, 1]")

    @property
    def pairs_needed(self) -> int:
        return self.num_steps * self.batch_size


@dataclass
class TrainingBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    extra: np.ndarray | None
    xt: np.ndarray
    target: np.ndarray
    fm_slot: np.ndarray | None = None


@dataclass
class TrainResult:
    params: MlpParams
    history: list[tuple[int, float, float]] = field(default_factory=list)


# --- elementary pieces --------------------------------------------------------


def interpolate(x0, x1, t) -> np.ndarray:
    """``(1 - t) x0 + t x1`` row-wise; ``t`` is a scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValidationError(f"x0 {x0.shape} and x1 {x1.shape} differ in shape")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ValidationError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def target_vanilla(x0, x1) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValidationError(f"x0 {x0.shape} and x1 {x1.shape} differ in shape")
    return x1 - x0


def target_shortcut(params: MlpParams, x0, x1, t, d_step, is_flow_matching_slot) -> np.ndarray:
    """Shortcut regression target, treated as a constant by the caller.

    Flow-matching slots get ``x1 - x0``. Other slots get
    ``(s_t + s_{t+d}) / 2`` with ``s_t = u(x_t, t, d)`` and
    ``s_{t+d} = u(x_t + d s_t, t + d, d)``.
    """
    single = np.ndim(x0) == 1
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    n = x0.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
    d = np.broadcast_to(np.asarray(d_step, dtype=np.float64).reshape(-1), (n,))
    fm = np.broadcast_to(np.asarray(is_flow_matching_slot, dtype=bool).reshape(-1), (n,))
    boot = ~fm
    if np.any(t[boot] + d[boot] > 1.0 + 1e-12):
        raise ValidationError("shortcut step leaves [0, 1]: t + d > 1")
    out = target_vanilla(x0, x1)
    if boot.any():
        xt = interpolate(x0[boot], x1[boot], t[boot])
        tb, db = t[boot], d[boot]
        s_t = forward(params, xt, tb, db)
        s_td = forward(params, xt + s_t * db[:, None], np.minimum(tb + db, 1.0), db)
        out[boot] = 0.5 * (s_t + s_td)
    return out[0] if single else out


def target_meanflow(params: MlpParams, x0, x1, t, r) -> np.ndarray:
    """MeanFlow regression target ``v - (t - r) (v . grad_x u + d_t u)``.

    The directional derivative is a forward-mode JVP of ``u(x_t, t, r)``
    along tangent ``(v, 1, 0)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(r > t) or np.any(r < 0) or np.any(t > 1):
        raise ValidationError("MeanFlow needs 0 <= r <= t <= 1")
    v = target_vanilla(x0, x1)
    xt = interpolate(x0, x1, t)
    du = jvp(params, xt, t, r, (v, 1.0, 0.0))
    gap = (t - r)[..., None] if np.ndim(t) == 1 and v.ndim == 2 else (t - r)
    return v - gap * du


def loss(predictions, targets, p: float = 2.0) -> float:
    """Batch mean of ``||pred - target||_p^p``."""
    diff = np.atleast_2d(np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64))
    return float(np.mean(np.sum(np.abs(diff) ** p, axis=1)))


def loss_upstream(predictions, targets, p: float = 2.0) -> np.ndarray:
    """d loss / d predictions."""
    diff = np.atleast_2d(np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64))
    if p == 2.0:
        return 2.0 * diff / diff.shape[0]
    return p * np.abs(diff) ** (p - 1) * np.sign(diff) / diff.shape[0]


# --- batches ------------------------------------------------------------------


def _sample_shortcut_steps(rng, t: np.ndarray, choices: Sequence[float]) -> np.ndarray:
    """Uniform over the step sizes with ``t + d <= 1``; ``1 - t`` when none fits."""
    choices = np.sort(np.asarray(choices, dtype=np.float64))
    n_ok = np.searchsorted(choices, 1.0 - t, side="right")
    pick = np.floor(rng.random(t.size) * n_ok).astype(np.int64)
    return np.where(n_ok > 0, choices[np.minimum(pick, choices.size - 1)], 1.0 - t)


def build_batch(params: MlpParams, config: TrainConfig, x0: np.ndarray, x1: np.ndarray,
                t: np.ndarray, rng: np.random.Generator) -> TrainingBatch:
    """Assemble inputs and (stop-gradient) targets for one step."""
    target = config.target
    if target is Target.VANILLA:
        xt = interpolate(x0, x1, t)
        return TrainingBatch(x0, x1, t, None, xt, target_vanilla(x0, x1))
    if target is Target.SHORTCUT:
        fm = np.arange(x0.shape[0]) < config.shortcut_kappa
        d = _sample_shortcut_steps(rng, t, config.shortcut_steps)
        d[fm] = 0.0
        xt = interpolate(x0, x1, t)
        v = target_shortcut(params, x0, x1, t, d, fm)
        return TrainingBatch(x0, x1, t, d, xt, v, fm)
    # MeanFlow: r == t with probability meanflow_equal_prob, else a sorted pair
    other = rng.random(t.size)
    distinct = rng.random(t.size) >= config.meanflow_equal_prob
    r = np.where(distinct, np.minimum(t, other), t)
    t_new = np.where(distinct, np.maximum(t, other), t)
    xt = interpolate(x0, x1, t_new)
    v = target_meanflow(params, x0, x1, t_new, r)
    return TrainingBatch(x0, x1, t_new, r, xt, v)


def loss_and_grad(params: MlpParams, batch: TrainingBatch, p: float = 2.0):
    """Loss and parameter gradient with the batch target held constant."""
    cache = forward_cached(params, batch.xt, batch.t, batch.extra)
    value = loss(cache.output, batch.target, p)
    grads = backward_cached(params, cache, loss_upstream(cache.output, batch.target, p))
    return value, grads


# --- training -----------------------------------------------------------------


def train(dataset: Dataset, config: TrainConfig, pairs: np.ndarray | None = None,
          params: MlpParams | None = None, record_every: int = 1) -> TrainResult:
    """Run ``config.num_steps`` Adam steps of flow-matching regression.

    In aligned mode ``pairs`` must hold at least ``num_steps * batch_size``
    records; step ``k`` uses records ``[k B, (k + 1) B)``. All times are
    drawn up front from the training generator in that mode.
    """
    rng = generator(config.master_seed)
    if params is None:
        params = init_mlp(dataset.dim, config.hidden, seed=config.master_seed,
                          embed_width=config.embed_width, n_extra=config.target.n_extra)
    elif params.n_extra != config.target.n_extra:
        raise ValidationError(f"{config.target.value} target needs a network with "
                              f"{config.target.n_extra} extra input(s)")
    B, K = config.batch_size, config.num_steps
    times = None
    if config.coupling is Coupling.ALIGNED:
        need = config.pairs_needed
        if pairs is None or pairs.size < need:
            have = 0 if pairs is None else pairs.size
            raise ValidationError(f"aligned training needs M = K*B = {K}*{B} = {need} pairs, got {have}")
        if pairs.size and int(pairs["data_index"][:need].max(initial=0)) >= dataset.size:
            raise ValidationError("pair table refers to indices beyond the dataset")
        times = rng.random(need)

    state = AdamState.for_params(params)
    result = TrainResult(params)
    ema = None
    for k in range(K):
        if config.coupling is Coupling.ALIGNED:
            chunk = pairs[k * B:(k + 1) * B]
            x0 = pair_noise(chunk, dataset.dim)
            x1 = dataset.points[chunk["data_index"].astype(np.int64)]
            t = times[k * B:(k + 1) * B]
        else:
            x0 = rng.standard_normal((B, dataset.dim))
            x1 = dataset.points[rng.choice(dataset.size, size=B, p=dataset.weights)]
            t = rng.random(B)
        batch = build_batch(params, config, x0, x1, t, rng)
        value, grads = loss_and_grad(params, batch, config.loss_p)
        if not np.isfinite(value):
            raise NumericalError("training loss is not finite", step=k + 1)
        params, state = adam_update(params, grads, state, config.learning_rate)
        ema = value if ema is None else config.loss_ema_beta * ema + (1 - config.loss_ema_beta) * value
        if (k + 1) % record_every == 0 or k + 1 == K:
            result.history.append((k + 1, value, ema))
    result.params = params
    return result


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "loss_ema"])
        for step, value, ema in history:
            w.writerow([step, repr(float(value)), repr(float(ema))])
