"""Fixed-step ODE sampling from noise to data and trajectory metrics."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NumericalError, ValidationError
from .nn import MlpParams, forward

SCHEMES = {"euler": 1, "midpoint": 2, "rk4": 4}
POLICIES = ("plain", "shortcut", "meanflow")
MAX_W2_SAMPLES = 2048


@dataclass
class TrajectoryLog:
    """States of ``n`` trajectories at shared times.

    ``states`` has shape ``(len(times), n, d)``; ``nfe`` counts network
    evaluations per trajectory.
    """

    times: np.ndarray
    states: np.ndarray
    nfe: int

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def velocity_field(params: MlpParams, policy: str = "plain") -> Callable:
    """Wrap a network as ``f(x, t, h)`` for :func:`integrate`.

    ``plain`` evaluates ``u(x, t)``; ``shortcut`` passes the step size ``h``
    as the extra input; ``meanflow`` returns the mean velocity over
    ``[t, t + h]`` as ``u(x, t + h, r = t)``.
    """
    if policy not in POLICIES:
        raise ValidationError(f"unknown policy {policy!r}; choose from {POLICIES}")
    if policy == "plain":
        if params.n_extra:
            raise ValidationError("network has extra inputs; use the shortcut or meanflow policy")
        return lambda x, t, h: forward(params, x, t)
    if params.n_extra != 1:
        raise ValidationError(f"{policy} policy needs a network with one extra input")
    if policy == "shortcut":
        return lambda x, t, h: forward(params, x, t, h)
    return lambda x, t, h: forward(params, x, min(t + h, 1.0), t)


def integrate(field, x0, scheme: str = "euler", steps: int = 100,
              policy: str = "plain") -> TrajectoryLog:
    """Integrate ``dx/dt = field`` from ``t = 0`` to ``t = 1`` with ``steps`` uniform steps.

    Parameters
    ----------
    field : MlpParams or callable
        A network (wrapped with ``policy``) or a callable ``f(x, t)``
        returning velocities for a batch ``x`` of shape (n, d).
    x0 : array, shape (n, d) or (d,)
    scheme : {"euler", "midpoint", "rk4"}
    steps : int

    Returns
    -------
    TrajectoryLog
        States at every grid time ``k / steps``.
    """
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown scheme {scheme!r}; choose from {tuple(SCHEMES)}")
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if isinstance(field, MlpParams):
        f = velocity_field(field, policy)
        if policy == "meanflow" and scheme != "euler":
            raise ValidationError("meanflow policy takes mean-velocity jumps; use the euler scheme")
    else:
        f = lambda x, t, h: field(x, t)  # noqa: E731
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    h = 1.0 / steps
    times = np.arange(steps + 1) / steps
    states = np.empty((steps + 1,) + x.shape)
    states[0] = x
    for k in range(steps):
        t = times[k]
        if scheme == "euler":
            x = x + h * f(x, t, h)
        elif scheme == "midpoint":
            k1 = f(x, t, h)
            x = x + h * f(x + 0.5 * h * k1, t + 0.5 * h, h)
        else:
            k1 = f(x, t, h)
            k2 = f(x + 0.5 * h * k1, t + 0.5 * h, h)
            k3 = f(x + 0.5 * h * k2, t + 0.5 * h, h)
            k4 = f(x + h * k3, t + h, h)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NumericalError("trajectory state became non-finite", step=k + 1)
        states[k + 1] = x
    return TrajectoryLog(times, states, SCHEMES[scheme] * steps)


def straightness_per_trajectory(traj: TrajectoryLog) -> np.ndarray:
    """Mean distance from the chord over interior times, one value per trajectory."""
    n = traj.states.shape[1]
    if traj.times.size < 3:
        return np.zeros(n)
    t = traj.times[1:-1, None, None]
    chord = (1.0 - t) * traj.states[0][None] + t * traj.states[-1][None]
    dev = np.linalg.norm(traj.states[1:-1] - chord, axis=2)
    return dev.mean(axis=0)


def straightness(traj: TrajectoryLog) -> float:
    """Mean chord deviation averaged over all logged trajectories.

    Returns 0 (with a warning) when fewer than three time points exist.
    """
    if traj.times.size < 3:
        warnings.warn("straightness needs at least three logged times; returning 0", stacklevel=2)
        return 0.0
    return float(straightness_per_trajectory(traj).mean())


def empirical_w2(samples_a, samples_b) -> float:
    """Exact 2-Wasserstein distance between two equal-size point clouds.

    Solves the assignment problem on squared Euclidean costs.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise ValidationError(f"sample counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValidationError("sample dimensions differ")
    if a.shape[0] > MAX_W2_SAMPLES:
        raise ValidationError(f"exact W2 is limited to {MAX_W2_SAMPLES} samples")
    if a.shape[0] == 0:
        return 0.0
    diff = a[:, None, :] - b[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(max(cost[rows, cols].mean(), 0.0)))


def write_trajectories_csv(traj: TrajectoryLog, path, first_id: int = 0) -> None:
    d = traj.states.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "t"] + [f"x{k}" for k in range(d)])
        for j in range(traj.states.shape[1]):
            for k, t in enumerate(traj.times):
                w.writerow([first_id + j, repr(float(t))] + [repr(float(v)) for v in traj.states[k, j]])


def read_trajectories_csv(path) -> TrajectoryLog:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ids = data[:, 0].astype(np.int64)
    n = np.unique(ids).size
    n_t = data.shape[0] // n
    times = data[:n_t, 1]
    states = data[:, 2:].reshape(n, n_t, -1).transpose(1, 0, 2)
    return TrajectoryLog(times, np.ascontiguousarray(states), nfe=0)


def write_summary_csv(metrics: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key, value in metrics.items():
            w.writerow([key, repr(value) if isinstance(value, float) else value])
