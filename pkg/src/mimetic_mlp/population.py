"""Covariance statistics over populations of independently trained networks.

All unrolling is row-major: ``vec(W)[i * cols + j] = W[i, j]``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .train import SnapshotFormatError, load_snapshot

logger = logging.getLogger(__name__)

MAX_DENSE_PN = 2048
MIN_STRIPE_MEMBERS = 8


class PopulationError(ValueError):
    pass


@dataclass
class PopulationMatrix:
    layer_index: int
    W1: np.ndarray  # [K, p, n]
    W2: np.ndarray  # [K, n, p]
    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""
    skipped_corrupt: int = 0
    skipped_failed: int = 0

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        if self.W1.ndim != 3 or self.W2.ndim != 3 or self.W1.shape[0] != self.W2.shape[0]:
            raise PopulationError(f"expected stacked [K, p, n] / [K, n, p], got {self.W1.shape}, {self.W2.shape}")
        if self.W2.shape[1:] != self.W1.shape[1:][::-1]:
            raise PopulationError(f"W2 members {self.W2.shape[1:]} must be transposed-shape of W1 {self.W1.shape[1:]}")

    @property
    def K(self) -> int:
        return self.W1.shape[0]

    @property
    def pn(self) -> int:
        return self.W1.shape[1] * self.W1.shape[2]

    def vectors(self) -> np.ndarray:
        """``[K, 2pn]`` rows of ``[vec(W1); vec(W2)]``."""
        return np.concatenate([self.W1.reshape(self.K, -1), self.W2.reshape(self.K, -1)], axis=1)

    def matrix(self, which: str) -> np.ndarray:
        if which == "W1":
            return self.W1
        if which == "W2":
            return self.W2
        raise ValueError(f"which must be 'W1' or 'W2', got {which!r}")


@dataclass
class PopulationStats:
    K: int
    layer_index: int
    stripe_scores: dict[str, dict[str, float]]
    rho: float
    rho_excluded: int
    cov: np.ndarray | None = None
    block_summary: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"K": self.K, "layer_index": self.layer_index, "stripe_scores": self.stripe_scores,
                "rho": self.rho, "rho_excluded_entries": self.rho_excluded,
                "block_summary": self.block_summary, "vec_order": "row-major",
                "dense_covariance": self.cov is not None}


def collect(snapshot_dir, layer_index: int) -> PopulationMatrix:
    """Stack MLP weights of ``layer_index`` from every valid snapshot under ``snapshot_dir``.

    Corrupt (bad magic / CRC) files and snapshots containing non-finite values
    are skipped and counted. Members are ordered by seed.
    """
    paths = sorted(Path(snapshot_dir).glob("*.mimw"))
    members = []
    corrupt = failed = 0
    for path in paths:
        try:
            snap = load_snapshot(path)
        except SnapshotFormatError as exc:
            logger.warning("skipping %s: %s", path.name, exc)
            corrupt += 1
            continue
        if not all(np.isfinite(a).all() for _, a in snap.tensors):
            failed += 1
            continue
        members.append(snap)
    if corrupt or failed:
        logger.info("collect: skipped %d corrupt and %d failed snapshots", corrupt, failed)
    hashes = sorted({s.config_hash for s in members})
    if len(hashes) > 1:
        raise PopulationError(f"snapshots come from different configs: {hashes[0]} vs {hashes[1]}"
                              + (f" (+{len(hashes) - 2} more)" if len(hashes) > 2 else ""))
    if len(members) < 2:
        raise PopulationError(f"need at least 2 valid snapshots, found {len(members)}")
    members.sort(key=lambda s: s.seed)
    name1, name2 = f"block.{layer_index}.mlp.W1", f"block.{layer_index}.mlp.W2"
    if name1 not in members[0].names():
        depth = sum(1 for n in members[0].names() if n.endswith(".mlp.W1"))
        raise PopulationError(f"layer_index {layer_index} out of range for depth {depth}")
    return PopulationMatrix(layer_index, np.stack([s.get(name1) for s in members]),
                            np.stack([s.get(name2) for s in members]), [s.seed for s in members],
                            hashes[0], corrupt, failed)


def covariance(pop: PopulationMatrix) -> np.ndarray:
    """Unbiased ``[2pn, 2pn]`` covariance of ``[vec(W1); vec(W2)]`` across members."""
    if pop.K < 2:
        raise PopulationError("covariance needs K >= 2")
    X = pop.vectors()
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (pop.K - 1)
    return 0.5 * (cov + cov.T)


def _variance_floor(W: np.ndarray) -> float:
    """Variances at or below this are rounding noise from subtracting a mean of identical values."""
    return float((64 * np.finfo(np.float64).eps * np.abs(W).max()) ** 2)


def stripe_score(pop: PopulationMatrix, which: str, axis: str) -> float:
    """Variance ratio measuring how strongly entries of one row/column move together.

    For ``axis="columns"`` with ``W`` of shape ``r x c``: ``m_j`` is the mean of
    column ``j`` within one member, ``v`` the mean over ``j`` of ``Var_K(m_j)`` and
    ``s^2`` the mean per-entry variance. The score is ``r * v / s^2``; it is about 1
    for independent entries and ``r`` when every column moves as one.
    ``axis="rows"`` swaps the roles.
    """
    W = pop.matrix(which)
    K, r, c = W.shape
    if K < MIN_STRIPE_MEMBERS:
        raise PopulationError(f"stripe_score needs K >= {MIN_STRIPE_MEMBERS}, got {K}")
    s2 = W.var(axis=0, ddof=1).mean()
    if not s2 > _variance_floor(W):
        raise PopulationError(f"degenerate population: {which} entries have zero variance")
    if axis in ("columns", "cols"):
        group, means = r, W.mean(axis=1)
    elif axis == "rows":
        group, means = c, W.mean(axis=2)
    else:
        raise ValueError(f"axis must be 'rows' or 'columns', got {axis!r}")
    v = means.var(axis=0, ddof=1).mean()
    return float(group * v / s2)


def all_stripe_scores(pop: PopulationMatrix) -> dict[str, dict[str, float]]:
    return {w: {"rows": stripe_score(pop, w, "rows"), "columns": stripe_score(pop, w, "columns")}
            for w in ("W1", "W2")}


def cross_correlation(pop: PopulationMatrix, return_excluded: bool = False):
    """Mean Pearson correlation between ``W1[i, j]`` and ``W2[j, i]`` across members.

    Entry pairs where either side has zero variance are left out.
    """
    if pop.K < MIN_STRIPE_MEMBERS:
        raise PopulationError(f"cross_correlation needs K >= {MIN_STRIPE_MEMBERS}, got {pop.K}")
    A = pop.W1 - pop.W1.mean(axis=0)
    B = np.transpose(pop.W2, (0, 2, 1))
    B = B - B.mean(axis=0)
    va = (A * A).sum(axis=0)
    vb = (B * B).sum(axis=0)
    ok = (va > _variance_floor(pop.W1) * (pop.K - 1)) & (vb > _variance_floor(pop.W2) * (pop.K - 1))
    excluded = int(ok.size - ok.sum())
    if not ok.any():
        raise PopulationError("cross_correlation: every entry pair is degenerate")
    corr = (A * B).sum(axis=0)[ok] / np.sqrt(va[ok] * vb[ok])
    rho = float(np.clip(corr.mean(), -1.0, 1.0))
    return (rho, excluded) if return_excluded else rho


def block_summary(pop: PopulationMatrix) -> dict[str, float]:
    """Mean per-entry variance of each matrix and mean |cross-covariance| on the transposed pairing."""
    A = pop.W1 - pop.W1.mean(axis=0)
    B = np.transpose(pop.W2, (0, 2, 1)) - pop.W2.mean(axis=0).T
    return {"mean_var_W1": float(pop.W1.var(axis=0, ddof=1).mean()),
            "mean_var_W2": float(pop.W2.var(axis=0, ddof=1).mean()),
            "mean_cross_cov": float(((A * B).sum(axis=0) / (pop.K - 1)).mean())}


def analyze(pop: PopulationMatrix, dense_cap: int = MAX_DENSE_PN) -> PopulationStats:
    rho, excluded = cross_correlation(pop, return_excluded=True)
    cov = covariance(pop) if pop.pn <= dense_cap else None
    return PopulationStats(pop.K, pop.layer_index, all_stripe_scores(pop), rho, excluded, cov,
                           block_summary(pop))


def export_heatmap_data(cov: np.ndarray, path, pn: int | None = None) -> Path:
    """Write ``cov`` as full-precision CSV plus a ``.json`` sidecar with block offsets."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got {cov.shape}")
    if pn is None:
        pn = cov.shape[0] // 2
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in cov:
            writer.writerow([repr(float(x)) for x in row])
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"size": cov.shape[0], "offsets": [0, pn, 2 * pn],
                                   "blocks": ["vec(W1)", "vec(W2)"], "vec_order": "row-major"},
                                  indent=1, sort_keys=True))
    return sidecar


def read_heatmap_data(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh)]
    return np.array(rows), json.loads(path.with_suffix(".json").read_text())
