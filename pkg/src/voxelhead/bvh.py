"""Bounding volume hierarchy over oriented boxes.

The tree is built in numpy as flat arrays (median split on the longest
centroid axis, leaves of <= 4 primitives) and consumed by the march
kernels. Node AABBs are padded by a small epsilon so the AABB pruning
can never reject a ray that the exact oriented-box test would accept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAF_SIZE = 8
_PAD = 1e-5


@dataclass
class BVH:
    """Flat-array tree. ``left < 0`` marks a leaf: prims are
    ``order[-left - 1 : -left - 1 + right]``."""

    bb_min: np.ndarray  # (M, 3) float64
    bb_max: np.ndarray  # (M, 3)
    left: np.ndarray  # (M,) int32
    right: np.ndarray  # (M,) int32
    order: np.ndarray  # (P,) int32


def world_aabbs(R: np.ndarray, t: np.ndarray, s: np.ndarray):
    """AABBs of oriented boxes with rotation R (P,3,3), center t, half-extent s."""
    ext = np.einsum("pij,pj->pi", np.abs(R), s)
    return t - ext, t + ext


def build_bvh(R: np.ndarray, t: np.ndarray, s: np.ndarray, active: np.ndarray | None = None) -> BVH:
    P = len(t)
    lo, hi = world_aabbs(R, t, s)
    if active is not None:
        idx_all = np.nonzero(active)[0].astype(np.int32)
    else:
        idx_all = np.arange(P, dtype=np.int32)
    if len(idx_all) == 0:
        raise ValueError("build_bvh requires at least one active box")
    lo = lo - _PAD
    hi = hi + _PAD
    centroids = 0.5 * (lo + hi)

    bb_min, bb_max, lefts, rights = [], [], [], []
    order: list[int] = []

    def emit(idx: np.ndarray) -> int:
        node = len(lefts)
        bb_min.append(lo[idx].min(axis=0))
        bb_max.append(hi[idx].max(axis=0))
        lefts.append(0)
        rights.append(0)
        if len(idx) <= LEAF_SIZE:
            lefts[node] = -(len(order) + 1)
            rights[node] = len(idx)
            order.extend(int(i) for i in idx)
            return node
        c = centroids[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        perm = np.argsort(c[:, axis], kind="stable")
        half = len(idx) // 2
        l = emit(idx[perm[:half]])
        r = emit(idx[perm[half:]])
        lefts[node] = l
        rights[node] = r
        return node

    import sys

    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 4 * int(np.log2(len(idx_all) + 1)) + 64))
    try:
        emit(idx_all)
    finally:
        sys.setrecursionlimit(old)
    return BVH(
        np.asarray(bb_min),
        np.asarray(bb_max),
        np.asarray(lefts, dtype=np.int32),
        np.asarray(rights, dtype=np.int32),
        np.asarray(order, dtype=np.int32),
    )


def ray_obb(o, d, R, t, s, t0, t1):
    """Exact slab test of one ray against one oriented box.

    Returns (hit, enter, exit) clipped to [t0, t1]; grazing contacts of
    zero length do not count as hits.
    """
    ol = R.T @ (o - t) / s
    dl = R.T @ d / s
    lo, hi = t0, t1
    for i in range(3):
        if abs(dl[i]) < 1e-12:
            if ol[i] < -1.0 or ol[i] > 1.0:
                return False, 0.0, 0.0
            continue
        a = (-1.0 - ol[i]) / dl[i]
        b = (1.0 - ol[i]) / dl[i]
        if a > b:
            a, b = b, a
        lo = max(lo, a)
        hi = min(hi, b)
        if lo >= hi:
            return False, 0.0, 0.0
    return True, lo, hi


def ray_obb_batch(o, d, R, t, s, t0: float, t1: float):
    """Vectorized slab test of one ray against all boxes.

    Returns (hit (P,), enter (P,), exit (P,)).
    """
    ol = np.einsum("pij,pi->pj", R, o[None, :] - t) / s
    dl = np.einsum("pij,pi->pj", R, np.broadcast_to(d, t.shape)) / s
    safe = np.where(np.abs(dl) < 1e-12, 1.0, dl)
    a = (-1.0 - ol) / safe
    b = (1.0 - ol) / safe
    near = np.minimum(a, b)
    far = np.maximum(a, b)
    para = np.abs(dl) < 1e-12
    inside = (ol >= -1.0) & (ol <= 1.0)
    near = np.where(para, -np.inf, near)
    far = np.where(para, np.inf, far)
    bad = para & ~inside
    lo = np.maximum(near.max(axis=1), t0)
    hi = np.minimum(far.min(axis=1), t1)
    hit = (lo < hi) & ~bad.any(axis=1)
    return hit, lo, hi


def query(tree: BVH, o, d, R, t, s, t0: float, t1: float):
    """Traverse the tree; returns intervals [(prim, enter, exit)] sorted by enter."""
    out = []
    stack = [0]
    inv = np.where(np.abs(d) < 1e-12, np.inf, 1.0 / np.where(d == 0, 1.0, d))
    while stack:
        node = stack.pop()
        a = (tree.bb_min[node] - o) * inv
        b = (tree.bb_max[node] - o) * inv
        near = np.minimum(a, b)
        far = np.maximum(a, b)
        para = ~np.isfinite(inv)
        if np.any(para & ((o < tree.bb_min[node]) | (o > tree.bb_max[node]))):
            continue
        lo = max(near[~para].max(initial=t0), t0)
        hi = min(far[~para].min(initial=t1), t1)
        if lo >= hi:
            continue
        if tree.left[node] < 0:
            start = -tree.left[node] - 1
            for p in tree.order[start : start + tree.right[node]]:
                okay, e0, e1 = ray_obb(o, d, R[p], t[p], s[p], t0, t1)
                if okay:
                    out.append((int(p), e0, e1))
        else:
            stack.append(int(tree.left[node]))
            stack.append(int(tree.right[node]))
    out.sort(key=lambda r: r[1])
    return out


def brute_query(o, d, R, t, s, t0: float, t1: float):
    """Exhaustive version of ``query`` (the BVH correctness oracle)."""
    out = []
    for p in range(len(t)):
        okay, e0, e1 = ray_obb(o, d, R[p], t[p], s[p], t0, t1)
        if okay:
            out.append((p, e0, e1))
    out.sort(key=lambda r: r[1])
    return out
