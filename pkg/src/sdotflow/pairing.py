"""Noise-to-data training pairs stored as ``(seed, class, index)`` records.

Noise is never written to disk: a record's seed regenerates the exact noise
vector through :func:`sdotflow.rng.noise_from_seeds`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import FormatError, ValidationError
from .rng import generator, mix_seed, noise_from_seeds
from .sdot import Dataset, DualWeights, NoisePrior, dual_vector, hard_assign_batch

PAIR_DTYPE = np.dtype([("seed", "<u8"), ("class_id", "<u4"), ("data_index", "<u4")])

_PAIR_MAGIC = b"ALNF"
_PAIR_VERSION = 1
_PAIR_HEADER = struct.Struct("<4sHHII")
_ASSIGN_CHUNK = 1 << 16


@dataclass(frozen=True)
class PairRecord:
    seed: int
    class_id: int
    data_index: int


@dataclass(frozen=True)
class RebalanceReport:
    total: int
    changed: int
    counts_before: np.ndarray
    counts_after: np.ndarray


def empty_pairs(n: int = 0) -> np.ndarray:
    return np.zeros(n, dtype=PAIR_DTYPE)


def records_from_list(records) -> np.ndarray:
    """Pack an iterable of :class:`PairRecord` into a structured array."""
    records = list(records)
    out = empty_pairs(len(records))
    for k, r in enumerate(records):
        out[k] = (r.seed, r.class_id, r.data_index)
    return out


def records_to_list(table: np.ndarray) -> list[PairRecord]:
    return [PairRecord(int(s), int(c), int(i)) for s, c, i in table.tolist()]


def pair_noise(table: np.ndarray, dim: int) -> np.ndarray:
    """Regenerate the noise vectors of a pair table, one row per record."""
    return noise_from_seeds(table["seed"], dim)


# --- generation ---------------------------------------------------------------


def class_schedule(class_mix: Mapping[int, int], master_seed: int) -> np.ndarray:
    """Class label of every pair position.

    Labels are laid out class by class (ascending id) and then shuffled with
    a generator seeded from ``master_seed`` so training batches mix classes.
    """
    labels = np.concatenate(
        [np.full(int(class_mix[c]), c, dtype=np.int64) for c in sorted(class_mix)]
        or [np.zeros(0, dtype=np.int64)]
    )
    if len(class_mix) > 1:
        labels = labels[generator(master_seed).permutation(labels.size)]
    return labels


def generate_pairs(dataset: Dataset, duals: Mapping[int, DualWeights] | DualWeights,
                   prior: NoisePrior, count: int, master_seed: int,
                   class_mix: Mapping[int, int] | None = None) -> np.ndarray:
    """Draw ``count`` seeds and map their noise through the per-class SDOT map.

    Parameters
    ----------
    dataset : Dataset
        Full dataset; indices in the output are global.
    duals : mapping class_id -> DualWeights, or a single DualWeights for
        unconditional data. Each class uses its ``g_ema`` over the points of
        that class (in ascending global order).
    prior : NoisePrior
    count : int
        Total number of pairs M.
    master_seed : int
        Pair ``j`` gets seed ``mix_seed(master_seed, j)``.
    class_mix : mapping class_id -> number of pairs, summing to ``count``.
        Defaults to all pairs in class 0.

    Returns
    -------
    ndarray of PAIR_DTYPE, shape (count,)
    """
    if prior.dim != dataset.dim:
        raise ValidationError(f"prior dimension {prior.dim} != data dimension {dataset.dim}")
    if isinstance(duals, DualWeights):
        duals = {0: duals}
    if class_mix is None:
        class_mix = {0: count}
    if sum(int(v) for v in class_mix.values()) != count:
        raise ValidationError(f"class mix sums to {sum(class_mix.values())}, expected {count}")
    if any(int(v) < 0 for v in class_mix.values()):
        raise ValidationError("class mix counts must be non-negative")

    table = empty_pairs(count)
    if count == 0:
        return table
    table["seed"] = mix_seed(master_seed, np.arange(count, dtype=np.uint64))
    labels = class_schedule(class_mix, master_seed)
    table["class_id"] = labels
    for c in sorted(class_mix):
        if int(class_mix[c]) == 0:
            continue
        if c not in duals:
            raise ValidationError(f"no dual weights for class {c}")
        members = dataset.class_indices(c)
        sub = dataset.restrict(c) if dataset.class_ids is not None else dataset
        g = dual_vector(duals[c])
        if g.shape[0] != members.size:
            raise ValidationError(f"class {c} has {members.size} points but {g.shape[0]} dual weights")
        positions = np.flatnonzero(labels == c)
        for start in range(0, positions.size, _ASSIGN_CHUNK):
            pos = positions[start:start + _ASSIGN_CHUNK]
            noise = noise_from_seeds(table["seed"][pos], prior.dim)
            table["data_index"][pos] = members[hard_assign_batch(noise, sub, g)]
    return table


# --- rebalance ----------------------------------------------------------------


_SMALL_REBALANCE = 64


def rebalance(indices, num_indices: int) -> np.ndarray:
    """Fewest edits that make every index count ``floor(M/N)`` or ``ceil(M/N)``.

    The ``M mod N`` extra slots go to the most frequent indices (smallest
    index on ties), which maximises the number of kept positions. Excess
    occurrences are removed from the end of the list; the freed positions,
    in order, receive the deficient indices in ascending order.
    """
    if num_indices < 1:
        raise ValidationError("num_indices must be >= 1")
    if isinstance(indices, (list, tuple)) and len(indices) <= _SMALL_REBALANCE:
        small = [int(i) for i in indices]
        for i in small:
            if not 0 <= i < num_indices:
                raise ValidationError(f"index {i} outside [0, {num_indices})")
        return np.array(_rebalance_list(small, num_indices), dtype=np.int64)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= num_indices):
        bad = int(idx[(idx < 0) | (idx >= num_indices)][0])
        raise ValidationError(f"index {bad} outside [0, {num_indices})")
    if idx.size <= _SMALL_REBALANCE:
        return np.array(_rebalance_list(idx.tolist(), num_indices), dtype=np.int64)
    return _rebalance_array(idx, num_indices)


def _rebalance_list(idx: list[int], n: int) -> list[int]:
    """Plain-Python form of :func:`rebalance` for short lists (same rule)."""
    m = len(idx)
    counts = [0] * n
    for i in idx:
        counts[i] += 1
    base, extra = divmod(m, n)
    target = [base] * n
    for i in sorted(range(n), key=lambda i: -counts[i])[:extra]:
        target[i] += 1
    surplus = [max(c - t, 0) for c, t in zip(counts, target)]
    fill = iter([i for i in range(n) for _ in range(max(target[i] - counts[i], 0))])
    out = list(idx)
    for pos in range(m - 1, -1, -1):
        i = idx[pos]
        if surplus[i]:
            surplus[i] -= 1
            out[pos] = -1
    return [next(fill) if v < 0 else v for v in out]


def _rebalance_array(idx: np.ndarray, num_indices: int) -> np.ndarray:
    m = idx.size
    counts = np.bincount(idx, minlength=num_indices)
    base, extra = divmod(m, num_indices)
    target = np.full(num_indices, base, dtype=np.int64)
    # stable sort on -count keeps the smallest index first among ties
    target[np.argsort(-counts, kind="stable")[:extra]] += 1
    surplus = np.maximum(counts - target, 0)
    if not surplus.any():
        return idx.copy()

    # rank of each position among occurrences of the same index, counted from the end
    order = np.argsort(idx, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank_fwd = np.empty(m, dtype=np.int64)
    rank_fwd[order] = np.arange(m) - np.repeat(starts, counts)
    rank_from_end = counts[idx] - 1 - rank_fwd
    drop = rank_from_end < surplus[idx]

    deficit = np.maximum(target - counts, 0)
    out = idx.copy()
    out[np.flatnonzero(drop)] = np.repeat(np.arange(num_indices), deficit)
    return out


def rebalance_report(before, after, num_indices: int) -> RebalanceReport:
    before = np.asarray(before, dtype=np.int64)
    after = np.asarray(after, dtype=np.int64)
    return RebalanceReport(
        total=int(before.size),
        changed=int(np.count_nonzero(before != after)),
        counts_before=np.bincount(before, minlength=num_indices),
        counts_after=np.bincount(after, minlength=num_indices),
    )


def rebalance_pairs(table: np.ndarray, dataset: Dataset) -> tuple[np.ndarray, dict[int, RebalanceReport]]:
    """Rebalance each class separately inside its own index space."""
    out = table.copy()
    reports = {}
    for c in np.unique(table["class_id"]).tolist():
        members = dataset.class_indices(int(c))
        pos = np.flatnonzero(table["class_id"] == c)
        local = np.searchsorted(members, table["data_index"][pos].astype(np.int64))
        if np.any(local >= members.size) or np.any(members[np.minimum(local, members.size - 1)] != table["data_index"][pos]):
            raise ValidationError(f"pair table maps class {c} to an index of another class")
        new_local = rebalance(local, members.size)
        out["data_index"][pos] = members[new_local]
        reports[int(c)] = rebalance_report(local, new_local, members.size)
    return out, reports


def shuffle_pairs(table: np.ndarray, seed: int) -> np.ndarray:
    """Seeded permutation of the records.

    Rebalance rewrites the latest occurrences of over-represented indices,
    which piles every changed record into the tail of the stream. Training
    consumes the stream in order, so the tail would be a run of mismatched
    pairs. Permuting the records after rebalance spreads them out and keeps
    every (seed, index) record intact.
    """
    return table[generator(seed).permutation(table.size)]


# --- augmentation ---------------------------------------------------------------


def augment_involution(dataset: Dataset, transform: Callable[[np.ndarray], np.ndarray],
                       check_seed: int = 0) -> Dataset:
    """Append ``transform(points)`` after the originals and halve every weight.

    ``transform`` maps an (n, d) array to an (n, d) array and must be its own
    inverse; this is checked on the dataset and on 100 Gaussian points.
    """
    probe = np.vstack([dataset.points,
                       generator(check_seed).standard_normal((100, dataset.dim))])
    once = np.asarray(transform(probe), dtype=np.float64)
    if once.shape != probe.shape:
        raise ValidationError(f"transform changed shape {probe.shape} -> {once.shape}")
    twice = np.asarray(transform(once), dtype=np.float64)
    if not np.allclose(twice, probe, rtol=1e-12, atol=1e-12):
        raise ValidationError("transform is not an involution")
    points = np.vstack([dataset.points, once[: dataset.size]])
    weights = np.concatenate([dataset.weights, dataset.weights]) / 2.0
    cls = None
    if dataset.class_ids is not None:
        cls = np.concatenate([dataset.class_ids, dataset.class_ids])
    return Dataset(points, weights, cls)


def mirror(axis: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    """Sign flip of one coordinate (a horizontal flip for 2D points)."""

    def flip(points):
        out = np.array(points, dtype=np.float64, copy=True)
        out[:, axis] = -out[:, axis]
        return out

    return flip


# --- pair file ----------------------------------------------------------------


def write_pairs(table, path, dataset_size: int) -> None:
    """Write ``ALNF`` v1: 16-byte header then 16 bytes per record, little-endian."""
    if not isinstance(table, np.ndarray):
        table = records_from_list(table)
    table = np.ascontiguousarray(table, dtype=PAIR_DTYPE)
    with open(path, "wb") as fh:
        fh.write(_PAIR_HEADER.pack(_PAIR_MAGIC, _PAIR_VERSION, 0, table.size, int(dataset_size)))
        fh.write(table.tobytes())


def read_pairs(path) -> tuple[np.ndarray, int]:
    """Return ``(table, dataset_size)``; raises FormatError with a byte offset."""
    raw = Path(path).read_bytes()
    if len(raw) < _PAIR_HEADER.size:
        raise FormatError("pair file truncated in header", offset=len(raw))
    magic, version, reserved, count, n = _PAIR_HEADER.unpack_from(raw, 0)
    if magic != _PAIR_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != _PAIR_VERSION:
        raise FormatError(f"unsupported pair file version {version}", offset=4)
    if reserved != 0:
        raise FormatError("reserved header field is not zero", offset=6)
    expected = _PAIR_HEADER.size + PAIR_DTYPE.itemsize * count
    if len(raw) < expected:
        whole = (len(raw) - _PAIR_HEADER.size) // PAIR_DTYPE.itemsize
        raise FormatError(f"pair file truncated: {count} records declared, {whole} present",
                          offset=_PAIR_HEADER.size + whole * PAIR_DTYPE.itemsize)
    if len(raw) > expected:
        raise FormatError("trailing bytes after last record", offset=expected)
    table = np.frombuffer(raw, dtype=PAIR_DTYPE, count=count, offset=_PAIR_HEADER.size).copy()
    if count and int(table["data_index"].max()) >= n:
        bad = int(np.argmax(table["data_index"] >= n))
        raise FormatError(f"record {bad} has data_index >= {n}",
                          offset=_PAIR_HEADER.size + bad * PAIR_DTYPE.itemsize + 12)
    return table, int(n)
