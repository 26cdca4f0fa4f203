"""Grouped long-format dataset container."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable

import numpy as np

__all__ = ["GroupData", "GroupedDataset"]


@dataclass(frozen=True)
class GroupData:
    """One group's observations: response y, fixed design X, random design Z."""

    group_id: Hashable
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class GroupedDataset:
    """Observations partitioned into groups, ordered by ascending group id.

    All groups share the fixed-effect dimension ``p`` and random-effect
    dimension ``q``; every group has at least one observation.
    """

    groups: tuple[GroupData, ...]
    p: int
    q: int

    def __post_init__(self):
        if not self.groups:
            raise ValueError("dataset has no groups")
        for g in self.groups:
            y = np.asarray(g.y, dtype=float)
            if y.ndim != 1 or y.shape[0] < 1:
                raise ValueError(f"group {g.group_id!r}: empty or non-1-D response")
            if g.X.shape != (y.shape[0], self.p):
                raise ValueError(
                    f"group {g.group_id!r}: X shape {g.X.shape} != ({y.shape[0]}, {self.p})"
                )
            if g.Z.shape != (y.shape[0], self.q):
                raise ValueError(
                    f"group {g.group_id!r}: Z shape {g.Z.shape} != ({y.shape[0]}, {self.q})"
                )
            if not (
                np.all(np.isfinite(y))
                and np.all(np.isfinite(g.X))
                and np.all(np.isfinite(g.Z))
            ):
                raise ValueError(f"group {g.group_id!r}: non-finite values")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_obs(self) -> int:
        return sum(g.n for g in self.groups)

    @classmethod
    def from_long(cls, y, X, Z, group_ids) -> "GroupedDataset":
        """Partition long-format arrays into groups by id, ascending.

        Parameters
        ----------
        y : array-like of shape (N,)
        X : array-like of shape (N, p)
        Z : array-like of shape (N, q)
        group_ids : sequence of length N
            Orderable, hashable group keys.
        """
        y = np.ascontiguousarray(y, dtype=float)
        X = np.ascontiguousarray(X, dtype=float)
        Z = np.ascontiguousarray(Z, dtype=float)
        ids = np.asarray(group_ids)
        if not (y.shape[0] == X.shape[0] == Z.shape[0] == ids.shape[0]):
            raise ValueError("y, X, Z, and group_ids must have equal length")
        if y.shape[0] == 0:
            raise ValueError("dataset has no rows")
        uniq, inverse = np.unique(ids, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=uniq.shape[0])
        bounds = np.cumsum(counts)[:-1]
        groups = []
        y_s, X_s, Z_s = y[order], X[order], Z[order]
        for gid, ys, Xs, Zs in zip(
            uniq,
            np.split(y_s, bounds),
            np.split(X_s, bounds),
            np.split(Z_s, bounds),
        ):
            groups.append(GroupData(group_id=gid.item() if hasattr(gid, "item") else gid,
                                    y=ys, X=Xs, Z=Zs))
        return cls(groups=tuple(groups), p=X.shape[1], q=Z.shape[1])
