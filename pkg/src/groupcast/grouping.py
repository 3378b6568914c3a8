"""Class grouping and padding for sets of series.

Series sharing a label are packed into one class row of a padded
[C, S_c, T, D] tensor. Real series occupy the leading slots of each row;
padded slots are tracked by a mask and are never read by any computation
(attention sets are built from real slots only), so their contents are
irrelevant by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass
class GroupMeta:
    """Bookkeeping to invert grouping exactly."""

    labels: tuple
    class_order: tuple          # distinct labels by first appearance
    members: tuple              # per class: original indices, ascending
    s_cap: int                  # widest class size
    real_flat: np.ndarray       # original series i -> flat slot c * s_cap + slot
    mask: np.ndarray            # [C, S_c] True where a real series sits
    size_groups: dict = field(default_factory=dict)  # class size -> class indices

    @property
    def n_classes(self):
        return len(self.class_order)

    @property
    def n_series(self):
        return len(self.labels)

    @property
    def class_sizes(self):
        return np.array([len(m) for m in self.members])


def group_meta(labels) -> GroupMeta:
    labels = tuple(labels)
    if len(labels) == 0:
        raise DimensionError("cannot group an empty series set")
    class_order = []
    members = {}
    for i, lab in enumerate(labels):
        if lab not in members:
            members[lab] = []
            class_order.append(lab)
        members[lab].append(i)
    members = tuple(tuple(members[lab]) for lab in class_order)
    s_cap = max(len(m) for m in members)
    c = len(class_order)
    mask = np.zeros((c, s_cap), dtype=bool)
    real_flat = np.zeros(len(labels), dtype=np.intp)
    for ci, mem in enumerate(members):
        mask[ci, : len(mem)] = True
        for slot, orig in enumerate(mem):
            real_flat[orig] = ci * s_cap + slot
    size_groups = {}
    for ci, mem in enumerate(members):
        size_groups.setdefault(len(mem), []).append(ci)
    size_groups = {s: np.array(ix, dtype=np.intp) for s, ix in size_groups.items()}
    return GroupMeta(labels, tuple(class_order), members, s_cap, real_flat, mask, size_groups)


@dataclass
class GroupedSeriesTensor:
    """Padded class view of a series tensor plus its inversion bookkeeping."""

    values: np.ndarray  # [C, S_c, T, D]
    mask: np.ndarray    # [C, S_c]
    meta: GroupMeta


def group_and_pad(x, labels) -> GroupedSeriesTensor:
    """Arrange x [S, T, D] into the padded [C, S_c, T, D] class layout."""
    x = np.asarray(x)
    if x.shape[0] != len(tuple(labels)):
        raise DimensionError(
            f"labels length {len(tuple(labels))} does not match series count {x.shape[0]}")
    meta = group_meta(labels)
    values = np.zeros((meta.n_classes, meta.s_cap) + x.shape[1:], dtype=x.dtype)
    for ci, mem in enumerate(meta.members):
        values[ci, : len(mem)] = x[list(mem)]
    return GroupedSeriesTensor(values, meta.mask.copy(), meta)


def group_batch(xb, meta: GroupMeta) -> np.ndarray:
    """Batched grouping: xb [B, S, T, D] -> [B, C, S_c, T, D] (zero padding)."""
    xb = np.asarray(xb)
    out = np.zeros((xb.shape[0], meta.n_classes, meta.s_cap) + xb.shape[2:], dtype=xb.dtype)
    for ci, mem in enumerate(meta.members):
        out[:, ci, : len(mem)] = xb[:, list(mem)]
    return out


def ungroup(grouped: GroupedSeriesTensor) -> np.ndarray:
    """Exact inverse of group_and_pad on the real entries."""
    meta = grouped.meta
    c, s_cap = meta.n_classes, meta.s_cap
    flat = grouped.values.reshape((c * s_cap,) + grouped.values.shape[2:])
    return flat[meta.real_flat]
