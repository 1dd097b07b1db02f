"""Two-level bounding volume hierarchy.

The bottom level holds one tree per object over its triangles; the top level
holds one tree over object boxes. Builds use binned SAH (16 bins, surface
area heuristic) with a fixed leaf limit, and are deterministic for a fixed
input order. Traversal kernels run over flat arrays so they stay inside
numba; the packed form concatenates every object's tree into shared arrays
with global indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .geometry import Aabb, Ray, Triangle, _box_contains, _ray_aabb, _ray_triangle, _transform_inner, _transform_outer

MAX_LEAF = 4
N_BINS = 16
COST_TRAVERSAL = 1.0
COST_INTERSECT = 1.5
# traversal stacks are fixed-size; builds check their depth against this
MAX_DEPTH = 120


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------


@njit(cache=True)
def _build_sah(lo, hi, ce, max_leaf, n_bins, c_trav, c_isect):
    """Binned SAH over primitive bounds `lo`/`hi` and centroids `ce`.

    Returns (node_lo, node_hi, node_a, node_b, node_leaf, order). For leaves
    node_a is the first index into `order` and node_b the primitive count;
    for internal nodes they are the child node indices.
    """
    n = lo.shape[0]
    order = np.arange(n)
    cap = 2 * n
    node_lo = np.empty((cap, 3))
    node_hi = np.empty((cap, 3))
    node_a = np.zeros(cap, np.int64)
    node_b = np.zeros(cap, np.int64)
    node_leaf = np.zeros(cap, np.uint8)
    tmp = np.empty(n, np.int64)
    stack = np.empty((2 * n + 8, 3), np.int64)
    bin_cnt = np.empty(n_bins, np.int64)
    bin_lo = np.empty((n_bins, 3))
    bin_hi = np.empty((n_bins, 3))
    left_sa = np.empty(n_bins)
    left_n = np.empty(n_bins, np.int64)
    right_sa = np.empty(n_bins)
    right_n = np.empty(n_bins, np.int64)

    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        idx = stack[sp, 0]
        start = stack[sp, 1]
        end = stack[sp, 2]
        count = end - start

        blx = np.inf
        bly = np.inf
        blz = np.inf
        bhx = -np.inf
        bhy = -np.inf
        bhz = -np.inf
        clx = np.inf
        cly = np.inf
        clz = np.inf
        chx = -np.inf
        chy = -np.inf
        chz = -np.inf
        for i in range(start, end):
            p = order[i]
            if lo[p, 0] < blx:
                blx = lo[p, 0]
            if lo[p, 1] < bly:
                bly = lo[p, 1]
            if lo[p, 2] < blz:
                blz = lo[p, 2]
            if hi[p, 0] > bhx:
                bhx = hi[p, 0]
            if hi[p, 1] > bhy:
                bhy = hi[p, 1]
            if hi[p, 2] > bhz:
                bhz = hi[p, 2]
            if ce[p, 0] < clx:
                clx = ce[p, 0]
            if ce[p, 1] < cly:
                cly = ce[p, 1]
            if ce[p, 2] < clz:
                clz = ce[p, 2]
            if ce[p, 0] > chx:
                chx = ce[p, 0]
            if ce[p, 1] > chy:
                chy = ce[p, 1]
            if ce[p, 2] > chz:
                chz = ce[p, 2]
        node_lo[idx, 0] = blx
        node_lo[idx, 1] = bly
        node_lo[idx, 2] = blz
        node_hi[idx, 0] = bhx
        node_hi[idx, 1] = bhy
        node_hi[idx, 2] = bhz

        best_cost = np.inf
        best_axis = -1
        best_k = -1
        if count > 1:
            dx = bhx - blx
            dy = bhy - bly
            dz = bhz - blz
            sa_node = 2.0 * (dx * dy + dy * dz + dz * dx)
            if sa_node > 1e-300:
                for axis in range(3):
                    if axis == 0:
                        cmin = clx
                        ext = chx - clx
                    elif axis == 1:
                        cmin = cly
                        ext = chy - cly
                    else:
                        cmin = clz
                        ext = chz - clz
                    if ext <= 0.0:
                        continue
                    for k in range(n_bins):
                        bin_cnt[k] = 0
                        bin_lo[k, 0] = np.inf
                        bin_lo[k, 1] = np.inf
                        bin_lo[k, 2] = np.inf
                        bin_hi[k, 0] = -np.inf
                        bin_hi[k, 1] = -np.inf
                        bin_hi[k, 2] = -np.inf
                    for i in range(start, end):
                        p = order[i]
                        b = int(n_bins * (ce[p, axis] - cmin) / ext)
                        if b >= n_bins:
                            b = n_bins - 1
                        if b < 0:
                            b = 0
                        bin_cnt[b] += 1
                        for c in range(3):
                            if lo[p, c] < bin_lo[b, c]:
                                bin_lo[b, c] = lo[p, c]
                            if hi[p, c] > bin_hi[b, c]:
                                bin_hi[b, c] = hi[p, c]
                    # sweep from the left: union of bins [0..k]
                    ax = np.inf
                    ay = np.inf
                    az = np.inf
                    bx = -np.inf
                    by = -np.inf
                    bz = -np.inf
                    cnt = 0
                    for k in range(n_bins):
                        if bin_cnt[k] > 0:
                            if bin_lo[k, 0] < ax:
                                ax = bin_lo[k, 0]
                            if bin_lo[k, 1] < ay:
                                ay = bin_lo[k, 1]
                            if bin_lo[k, 2] < az:
                                az = bin_lo[k, 2]
                            if bin_hi[k, 0] > bx:
                                bx = bin_hi[k, 0]
                            if bin_hi[k, 1] > by:
                                by = bin_hi[k, 1]
                            if bin_hi[k, 2] > bz:
                                bz = bin_hi[k, 2]
                        cnt += bin_cnt[k]
                        left_n[k] = cnt
                        if cnt > 0:
                            ex = bx - ax
                            ey = by - ay
                            ez = bz - az
                            left_sa[k] = 2.0 * (ex * ey + ey * ez + ez * ex)
                        else:
                            left_sa[k] = 0.0
                    # sweep from the right: union of bins [k..]
                    ax = np.inf
                    ay = np.inf
                    az = np.inf
                    bx = -np.inf
                    by = -np.inf
                    bz = -np.inf
                    cnt = 0
                    for k in range(n_bins - 1, -1, -1):
                        if bin_cnt[k] > 0:
                            if bin_lo[k, 0] < ax:
                                ax = bin_lo[k, 0]
                            if bin_lo[k, 1] < ay:
                                ay = bin_lo[k, 1]
                            if bin_lo[k, 2] < az:
                                az = bin_lo[k, 2]
                            if bin_hi[k, 0] > bx:
                                bx = bin_hi[k, 0]
                            if bin_hi[k, 1] > by:
                                by = bin_hi[k, 1]
                            if bin_hi[k, 2] > bz:
                                bz = bin_hi[k, 2]
                        cnt += bin_cnt[k]
                        right_n[k] = cnt
                        if cnt > 0:
                            ex = bx - ax
                            ey = by - ay
                            ez = bz - az
                            right_sa[k] = 2.0 * (ex * ey + ey * ez + ez * ex)
                        else:
                            right_sa[k] = 0.0
                    for k in range(n_bins - 1):
                        nl = left_n[k]
                        nr = right_n[k + 1]
                        if nl == 0 or nr == 0:
                            continue
                        cost = c_trav + (left_sa[k] * nl + right_sa[k + 1] * nr) * c_isect / sa_node
                        if cost < best_cost:
                            best_cost = cost
                            best_axis = axis
                            best_k = k

        do_split = False
        mid = start
        if best_axis >= 0 and (count > max_leaf or best_cost < c_isect * count):
            # stable partition by bin index
            if best_axis == 0:
                cmin = clx
                ext = chx - clx
            elif best_axis == 1:
                cmin = cly
                ext = chy - cly
            else:
                cmin = clz
                ext = chz - clz
            nl = 0
            for i in range(start, end):
                p = order[i]
                b = int(n_bins * (ce[p, best_axis] - cmin) / ext)
                if b >= n_bins:
                    b = n_bins - 1
                if b < 0:
                    b = 0
                if b <= best_k:
                    tmp[nl] = p
                    nl += 1
            nr = nl
            for i in range(start, end):
                p = order[i]
                b = int(n_bins * (ce[p, best_axis] - cmin) / ext)
                if b >= n_bins:
                    b = n_bins - 1
                if b < 0:
                    b = 0
                if b > best_k:
                    tmp[nr] = p
                    nr += 1
            for i in range(count):
                order[start + i] = tmp[i]
            mid = start + nl
            do_split = True
        elif count > max_leaf:
            # centroids collapsed; halve by current order
            mid = start + count // 2
            do_split = True

        if do_split:
            left = n_nodes
            right = n_nodes + 1
            n_nodes += 2
            node_a[idx] = left
            node_b[idx] = right
            node_leaf[idx] = 0
            stack[sp, 0] = right
            stack[sp, 1] = mid
            stack[sp, 2] = end
            sp += 1
            stack[sp, 0] = left
            stack[sp, 1] = start
            stack[sp, 2] = mid
            sp += 1
        else:
            node_a[idx] = start
            node_b[idx] = count
            node_leaf[idx] = 1

    return (
        node_lo[:n_nodes].copy(),
        node_hi[:n_nodes].copy(),
        node_a[:n_nodes].copy(),
        node_b[:n_nodes].copy(),
        node_leaf[:n_nodes].copy(),
        order,
    )


@dataclass(frozen=True)
class BvhNode:
    bounds: Aabb
    leaf: bool
    a: int  # leaf: first primitive slot; internal: left child
    b: int  # leaf: primitive count; internal: right child


class _FlatBvh:
    """Shared array-of-nodes view with small inspection helpers."""

    def __init__(self, node_lo, node_hi, node_a, node_b, node_leaf, order):
        self.node_lo = node_lo
        self.node_hi = node_hi
        self.node_a = node_a
        self.node_b = node_b
        self.node_leaf = node_leaf
        self.order = order

    @property
    def n_nodes(self) -> int:
        return len(self.node_a)

    def node(self, i: int) -> BvhNode:
        return BvhNode(
            Aabb(self.node_lo[i].copy(), self.node_hi[i].copy()),
            bool(self.node_leaf[i]),
            int(self.node_a[i]),
            int(self.node_b[i]),
        )

    def depth(self) -> int:
        best = 0
        stack = [(0, 1)]
        while stack:
            i, d = stack.pop()
            best = max(best, d)
            if not self.node_leaf[i]:
                stack.append((int(self.node_a[i]), d + 1))
                stack.append((int(self.node_b[i]), d + 1))
        return best

    def subtree_prim_count(self, i: int) -> int:
        total = 0
        stack = [i]
        while stack:
            j = stack.pop()
            if self.node_leaf[j]:
                total += int(self.node_b[j])
            else:
                stack.append(int(self.node_a[j]))
                stack.append(int(self.node_b[j]))
        return total


class BottomLevelBvh(_FlatBvh):
    """Per-object tree; triangle arrays are stored in leaf order."""

    def __init__(self, nodes, order, v0, v1, v2, n0, n1, n2, src):
        super().__init__(*nodes, order)
        self.v0 = v0
        self.v1 = v1
        self.v2 = v2
        self.n0 = n0
        self.n1 = n1
        self.n2 = n2
        self.src = src  # original triangle index per slot
        self.bounds = Aabb(self.node_lo[0].copy(), self.node_hi[0].copy())

    @property
    def n_triangles(self) -> int:
        return len(self.v0)


class TopLevelBvh(_FlatBvh):
    """Tree over object boxes; leaf slots map to object ids via `order`."""


def triangles_to_arrays(triangles: Sequence[Triangle]):
    m = len(triangles)
    v0 = np.empty((m, 3))
    v1 = np.empty((m, 3))
    v2 = np.empty((m, 3))
    n0 = np.empty((m, 3))
    n1 = np.empty((m, 3))
    n2 = np.empty((m, 3))
    for i, t in enumerate(triangles):
        v0[i] = t.v0
        v1[i] = t.v1
        v2[i] = t.v2
        n0[i] = t.n0
        n1[i] = t.n1
        n2[i] = t.n2
    return v0, v1, v2, n0, n1, n2


def build_bottom(triangles) -> BottomLevelBvh:
    """Build an object's tree. Accepts a Triangle sequence or a prebuilt
    (v0, v1, v2, n0, n1, n2) array tuple."""
    if isinstance(triangles, tuple):
        v0, v1, v2, n0, n1, n2 = triangles
    else:
        v0, v1, v2, n0, n1, n2 = triangles_to_arrays(triangles)
    if len(v0) == 0:
        raise ValueError("cannot build a tree over zero triangles")
    lo = np.minimum(np.minimum(v0, v1), v2)
    hi = np.maximum(np.maximum(v0, v1), v2)
    ce = (lo + hi) * 0.5
    *nodes, order = _build_sah(lo, hi, ce, MAX_LEAF, N_BINS, COST_TRAVERSAL, COST_INTERSECT)
    bvh = BottomLevelBvh(
        tuple(nodes),
        order,
        v0[order].copy(),
        v1[order].copy(),
        v2[order].copy(),
        n0[order].copy(),
        n1[order].copy(),
        n2[order].copy(),
        order.copy(),
    )
    if bvh.depth() > MAX_DEPTH - 8:
        raise ValueError("tree depth exceeds the traversal stack budget")
    return bvh


def build_top(boxes: Sequence[Aabb]) -> TopLevelBvh:
    if len(boxes) == 0:
        raise ValueError("cannot build a tree over zero boxes")
    lo = np.stack([b.min for b in boxes]).astype(np.float64)
    hi = np.stack([b.max for b in boxes]).astype(np.float64)
    ce = (lo + hi) * 0.5
    *nodes, order = _build_sah(lo, hi, ce, 1, N_BINS, COST_TRAVERSAL, COST_INTERSECT)
    return TopLevelBvh(*nodes, order)


# ---------------------------------------------------------------------------
# traversal
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _window_hit(ox, oy, oz, dx, dy, dz, lx, ly, lz, hx, hy, hz, t_floor, t_cap):
    hit, t0, t1 = _ray_aabb(ox, oy, oz, dx, dy, dz, lx, ly, lz, hx, hy, hz)
    if hit and t0 <= t_cap and t1 >= t_floor:
        return True, t0
    return False, t0


@njit(cache=True)
def _closest_in_object(
    b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, root,
    ox, oy, oz, dx, dy, dz, eps, t_best,
):
    """Nearest triangle in one object's subtree with t in (eps, t_best).

    Returns (t, slot, b1, b2); slot is -1 when nothing beats t_best."""
    stack = np.empty(MAX_DEPTH, np.int64)
    tstack = np.empty(MAX_DEPTH, np.float64)
    best = np.int64(-1)
    bu = 0.0
    bv = 0.0
    sp = 0
    node = root
    while node >= 0:
        descend = np.int64(-1)
        if b_leaf[node] == 1:
            first = b_a[node]
            for i in range(first, first + b_b[node]):
                t, u, v = _ray_triangle(
                    ox, oy, oz, dx, dy, dz,
                    v0[i, 0], v0[i, 1], v0[i, 2],
                    v1[i, 0], v1[i, 1], v1[i, 2],
                    v2[i, 0], v2[i, 1], v2[i, 2],
                )
                if t > eps and t < t_best:
                    t_best = t
                    best = i
                    bu = u
                    bv = v
        else:
            l = b_a[node]
            r = b_b[node]
            hl, tl = _window_hit(
                ox, oy, oz, dx, dy, dz,
                b_lo[l, 0], b_lo[l, 1], b_lo[l, 2],
                b_hi[l, 0], b_hi[l, 1], b_hi[l, 2],
                eps, t_best,
            )
            hr, tr = _window_hit(
                ox, oy, oz, dx, dy, dz,
                b_lo[r, 0], b_lo[r, 1], b_lo[r, 2],
                b_hi[r, 0], b_hi[r, 1], b_hi[r, 2],
                eps, t_best,
            )
            if hl and hr:
                if tl > tr:
                    l, r = r, l
                    tl, tr = tr, tl
                stack[sp] = r
                tstack[sp] = tr
                sp += 1
                descend = l
            elif hl:
                descend = l
            elif hr:
                descend = r
        if descend >= 0:
            node = descend
        else:
            node = np.int64(-1)
            while sp > 0:
                sp -= 1
                if tstack[sp] < t_best:
                    node = stack[sp]
                    break
    return t_best, best, bu, bv


@njit(cache=True)
def _occluded_in_object(
    b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, root,
    ox, oy, oz, dx, dy, dz, eps, t_max,
):
    """Any-hit test in one object's subtree with t in (eps, t_max)."""
    stack = np.empty(MAX_DEPTH, np.int64)
    sp = 0
    node = root
    while node >= 0:
        descend = np.int64(-1)
        if b_leaf[node] == 1:
            first = b_a[node]
            for i in range(first, first + b_b[node]):
                t, u, v = _ray_triangle(
                    ox, oy, oz, dx, dy, dz,
                    v0[i, 0], v0[i, 1], v0[i, 2],
                    v1[i, 0], v1[i, 1], v1[i, 2],
                    v2[i, 0], v2[i, 1], v2[i, 2],
                )
                if t > eps and t < t_max:
                    return True
        else:
            l = b_a[node]
            r = b_b[node]
            hl, tl = _window_hit(
                ox, oy, oz, dx, dy, dz,
                b_lo[l, 0], b_lo[l, 1], b_lo[l, 2],
                b_hi[l, 0], b_hi[l, 1], b_hi[l, 2],
                eps, t_max,
            )
            hr, tr = _window_hit(
                ox, oy, oz, dx, dy, dz,
                b_lo[r, 0], b_lo[r, 1], b_lo[r, 2],
                b_hi[r, 0], b_hi[r, 1], b_hi[r, 2],
                eps, t_max,
            )
            if hl and hr:
                stack[sp] = r
                sp += 1
                descend = l
            elif hl:
                descend = l
            elif hr:
                descend = r
        if descend >= 0:
            node = descend
        elif sp > 0:
            sp -= 1
            node = stack[sp]
        else:
            node = np.int64(-1)
    return False


@njit(cache=True)
def _scene_closest(
    t_lo, t_hi, t_a, t_b, t_leaf, t_order,
    roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2,
    ox, oy, oz, dx, dy, dz, eps,
):
    """Nearest hit over the whole scene. Returns (t, object, slot, b1, b2)."""
    stack = np.empty(MAX_DEPTH, np.int64)
    tstack = np.empty(MAX_DEPTH, np.float64)
    t_best = np.inf
    best_obj = np.int64(-1)
    best_slot = np.int64(-1)
    bu = 0.0
    bv = 0.0
    sp = 0
    node = np.int64(0)
    while node >= 0:
        descend = np.int64(-1)
        if t_leaf[node] == 1:
            first = t_a[node]
            for i in range(first, first + t_b[node]):
                o = t_order[i]
                t, slot, u, v = _closest_in_object(
                    b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, roots[o],
                    ox, oy, oz, dx, dy, dz, eps, t_best,
                )
                if slot >= 0:
                    t_best = t
                    best_obj = o
                    best_slot = slot
                    bu = u
                    bv = v
        else:
            l = t_a[node]
            r = t_b[node]
            hl, tl = _window_hit(
                ox, oy, oz, dx, dy, dz,
                t_lo[l, 0], t_lo[l, 1], t_lo[l, 2],
                t_hi[l, 0], t_hi[l, 1], t_hi[l, 2],
                eps, t_best,
            )
            hr, tr = _window_hit(
                ox, oy, oz, dx, dy, dz,
                t_lo[r, 0], t_lo[r, 1], t_lo[r, 2],
                t_hi[r, 0], t_hi[r, 1], t_hi[r, 2],
                eps, t_best,
            )
            if hl and hr:
                if tl > tr:
                    l, r = r, l
                    tl, tr = tr, tl
                stack[sp] = r
                tstack[sp] = tr
                sp += 1
                descend = l
            elif hl:
                descend = l
            elif hr:
                descend = r
        if descend >= 0:
            node = descend
        else:
            node = np.int64(-1)
            while sp > 0:
                sp -= 1
                if tstack[sp] < t_best:
                    node = stack[sp]
                    break
    return t_best, best_obj, best_slot, bu, bv


@njit(cache=True)
def _scene_occluded(
    t_lo, t_hi, t_a, t_b, t_leaf, t_order,
    roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2,
    ox, oy, oz, dx, dy, dz, eps, t_max,
):
    stack = np.empty(MAX_DEPTH, np.int64)
    sp = 0
    node = np.int64(0)
    while node >= 0:
        descend = np.int64(-1)
        if t_leaf[node] == 1:
            first = t_a[node]
            for i in range(first, first + t_b[node]):
                o = t_order[i]
                if _occluded_in_object(
                    b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, roots[o],
                    ox, oy, oz, dx, dy, dz, eps, t_max,
                ):
                    return True
        else:
            l = t_a[node]
            r = t_b[node]
            hl, tl = _window_hit(
                ox, oy, oz, dx, dy, dz,
                t_lo[l, 0], t_lo[l, 1], t_lo[l, 2],
                t_hi[l, 0], t_hi[l, 1], t_hi[l, 2],
                eps, t_max,
            )
            hr, tr = _window_hit(
                ox, oy, oz, dx, dy, dz,
                t_lo[r, 0], t_lo[r, 1], t_lo[r, 2],
                t_hi[r, 0], t_hi[r, 1], t_hi[r, 2],
                eps, t_max,
            )
            if hl and hr:
                stack[sp] = r
                sp += 1
                descend = l
            elif hl:
                descend = l
            elif hr:
                descend = r
        if descend >= 0:
            node = descend
        elif sp > 0:
            sp -= 1
            node = stack[sp]
        else:
            node = np.int64(-1)
    return False


# ---------------------------------------------------------------------------
# batch kernels over packed scenes
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _k_closest(
    t_lo, t_hi, t_a, t_b, t_leaf, t_order,
    roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, n0, n1, n2,
    origins, dirs, i0, i1, eps,
    out_t, out_obj, out_slot, out_point, out_normal,
):
    for i in range(i0, i1):
        t, o, slot, bu, bv = _scene_closest(
            t_lo, t_hi, t_a, t_b, t_leaf, t_order,
            roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], eps,
        )
        out_obj[i] = o
        out_slot[i] = slot
        if slot >= 0:
            out_t[i] = t
            b0 = 1.0 - bu - bv
            for c in range(3):
                out_point[i, c] = origins[i, c] + t * dirs[i, c]
            nx = b0 * n0[slot, 0] + bu * n1[slot, 0] + bv * n2[slot, 0]
            ny = b0 * n0[slot, 1] + bu * n1[slot, 1] + bv * n2[slot, 1]
            nz = b0 * n0[slot, 2] + bu * n1[slot, 2] + bv * n2[slot, 2]
            nn = (nx * nx + ny * ny + nz * nz) ** 0.5
            if nn > 0.0:
                nx /= nn
                ny /= nn
                nz /= nn
            out_normal[i, 0] = nx
            out_normal[i, 1] = ny
            out_normal[i, 2] = nz
        else:
            out_t[i] = np.inf


@njit(cache=True, nogil=True)
def _k_occluded(
    t_lo, t_hi, t_a, t_b, t_leaf, t_order,
    roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2,
    origins, dirs, tmaxs, i0, i1, eps, out_occ,
):
    for i in range(i0, i1):
        out_occ[i] = _scene_occluded(
            t_lo, t_hi, t_a, t_b, t_leaf, t_order,
            roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2,
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], eps, tmaxs[i],
        )


@njit(cache=True, nogil=True)
def _k_occluded_by_object(
    roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2,
    objs, origins, dirs, tmaxs, i0, i1, eps, out_occ,
):
    for i in range(i0, i1):
        out_occ[i] = _occluded_in_object(
            b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, roots[objs[i]],
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], eps, tmaxs[i],
        )


@njit(cache=True, nogil=True)
def _k_gather_queries(
    t_lo, t_hi, t_a, t_b, t_leaf, t_order,
    roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2,
    obox_lo, obox_hi, route,
    origins, dirs, tmaxs, i0, i1, eps, tol,
    rec_kind, rec_obj, rec_ray, rec_coord, out_bvh_occ, out_stats,
):
    """Phase one of the split shading pass: enumerate, per shadow ray, the
    object boxes the segment touches. Boxes containing the origin yield inner
    records, boxes entered from outside yield outer records. Objects routed
    away from the networks (route == 0) are resolved against their own tree
    immediately into `out_bvh_occ`.

    Records for ray i live in slots [i * n_obj, (i + 1) * n_obj); returns are
    per-ray record counts in rec_kind (255 marks an empty slot).
    """
    n_obj = len(roots)
    cand = np.empty(n_obj, np.int64)
    stack = np.empty(MAX_DEPTH, np.int64)
    for i in range(i0, i1):
        ox = origins[i, 0]
        oy = origins[i, 1]
        oz = origins[i, 2]
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        tmax = tmaxs[i]
        occ = False
        # collect candidate objects from the top level
        n_cand = 0
        sp = 0
        node = np.int64(0)
        while node >= 0:
            descend = np.int64(-1)
            if t_leaf[node] == 1:
                first = t_a[node]
                for k in range(first, first + t_b[node]):
                    cand[n_cand] = t_order[k]
                    n_cand += 1
            else:
                l = t_a[node]
                r = t_b[node]
                hl, tl = _window_hit(
                    ox, oy, oz, dx, dy, dz,
                    t_lo[l, 0], t_lo[l, 1], t_lo[l, 2],
                    t_hi[l, 0], t_hi[l, 1], t_hi[l, 2],
                    -tol, tmax,
                )
                hr, tr = _window_hit(
                    ox, oy, oz, dx, dy, dz,
                    t_lo[r, 0], t_lo[r, 1], t_lo[r, 2],
                    t_hi[r, 0], t_hi[r, 1], t_hi[r, 2],
                    -tol, tmax,
                )
                if hl and hr:
                    stack[sp] = r
                    sp += 1
                    descend = l
                elif hl:
                    descend = l
                elif hr:
                    descend = r
            if descend >= 0:
                node = descend
            elif sp > 0:
                sp -= 1
                node = stack[sp]
            else:
                node = np.int64(-1)

        base = i * n_obj
        n_rec = 0
        for k in range(n_cand):
            o = cand[k]
            lx = obox_lo[o, 0]
            ly = obox_lo[o, 1]
            lz = obox_lo[o, 2]
            hx = obox_hi[o, 0]
            hy = obox_hi[o, 1]
            hz = obox_hi[o, 2]
            if _box_contains(ox, oy, oz, lx, ly, lz, hx, hy, hz, tol):
                if route[o] == 1:
                    pu, pv, du, dv, r, deg = _transform_inner(
                        ox, oy, oz, dx, dy, dz, lx, ly, lz, hx, hy, hz
                    )
                    slot = base + n_rec
                    rec_kind[slot] = 1
                    rec_obj[slot] = o
                    rec_ray[slot] = i
                    rec_coord[slot, 0] = pu
                    rec_coord[slot, 1] = pv
                    rec_coord[slot, 2] = du
                    rec_coord[slot, 3] = dv
                    rec_coord[slot, 4] = r
                    n_rec += 1
                    if deg:
                        out_stats[0] += 1
                elif not occ:
                    occ = _occluded_in_object(
                        b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, roots[o],
                        ox, oy, oz, dx, dy, dz, eps, tmax,
                    )
            else:
                hit, t0, t1 = _ray_aabb(ox, oy, oz, dx, dy, dz, lx, ly, lz, hx, hy, hz)
                if hit and t0 > 0.0 and t0 < tmax:
                    if route[o] == 1:
                        pu, pv, du, dv, deg = _transform_outer(
                            ox, oy, oz, dx, dy, dz, lx, ly, lz, hx, hy, hz, t0
                        )
                        slot = base + n_rec
                        rec_kind[slot] = 0
                        rec_obj[slot] = o
                        rec_ray[slot] = i
                        rec_coord[slot, 0] = pu
                        rec_coord[slot, 1] = pv
                        rec_coord[slot, 2] = du
                        rec_coord[slot, 3] = dv
                        rec_coord[slot, 4] = 0.0
                        n_rec += 1
                        if deg:
                            out_stats[0] += 1
                    elif not occ:
                        occ = _occluded_in_object(
                            b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, roots[o],
                            ox, oy, oz, dx, dy, dz, eps, tmax,
                        )
        for k in range(n_rec, n_obj):
            rec_kind[base + k] = 255
        out_bvh_occ[i] = 1 if occ else 0


@njit(cache=True, nogil=True)
def _k_label_visible(
    roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2,
    rec_obj, rec_ray, origins, dirs, tmaxs, j0, j1, eps, out_vis,
):
    for j in range(j0, j1):
        i = rec_ray[j]
        occ = _occluded_in_object(
            b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, roots[rec_obj[j]],
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], eps, tmaxs[i],
        )
        out_vis[j] = 0 if occ else 1


@njit(cache=True, nogil=True)
def _k_label_geometry(
    roots, b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, n0, n1, n2,
    rec_obj, rec_ray, origins, dirs, j0, j1, eps,
    out_hit, out_normal, out_t,
):
    """Closest hit of each record's ray against that record's object alone:
    interpolated shading normal plus distance, with a hit flag."""
    for j in range(j0, j1):
        i = rec_ray[j]
        t, slot, bu, bv = _closest_in_object(
            b_lo, b_hi, b_a, b_b, b_leaf, v0, v1, v2, roots[rec_obj[j]],
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], eps, np.inf,
        )
        if slot < 0:
            out_hit[j] = 0
            continue
        out_hit[j] = 1
        out_t[j] = t
        b0 = 1.0 - bu - bv
        nx = b0 * n0[slot, 0] + bu * n1[slot, 0] + bv * n2[slot, 0]
        ny = b0 * n0[slot, 1] + bu * n1[slot, 1] + bv * n2[slot, 1]
        nz = b0 * n0[slot, 2] + bu * n1[slot, 2] + bv * n2[slot, 2]
        nn = math.sqrt(nx * nx + ny * ny + nz * nz)
        if nn > 0.0:
            nx /= nn
            ny /= nn
            nz /= nn
        out_normal[j, 0] = nx
        out_normal[j, 1] = ny
        out_normal[j, 2] = nz


# ---------------------------------------------------------------------------
# packed scene + python-level tracing API
# ---------------------------------------------------------------------------


@dataclass
class ScenePack:
    """Every array a traversal kernel needs, concatenated over objects."""

    t_lo: np.ndarray
    t_hi: np.ndarray
    t_a: np.ndarray
    t_b: np.ndarray
    t_leaf: np.ndarray
    t_order: np.ndarray
    roots: np.ndarray  # per-object root node (global index)
    b_lo: np.ndarray
    b_hi: np.ndarray
    b_a: np.ndarray
    b_b: np.ndarray
    b_leaf: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    n0: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    src: np.ndarray  # per-slot original triangle index within its object
    prim_off: np.ndarray  # object -> first triangle slot
    obox_lo: np.ndarray
    obox_hi: np.ndarray
    tri_counts: np.ndarray

    @property
    def n_objects(self) -> int:
        return len(self.roots)

    def top_args(self):
        return (self.t_lo, self.t_hi, self.t_a, self.t_b, self.t_leaf, self.t_order)

    def bottom_args(self):
        return (
            self.roots, self.b_lo, self.b_hi, self.b_a, self.b_b, self.b_leaf,
            self.v0, self.v1, self.v2,
        )


def pack_scene(bvhs: List[BottomLevelBvh], top: TopLevelBvh) -> ScenePack:
    node_off = np.zeros(len(bvhs) + 1, np.int64)
    prim_off = np.zeros(len(bvhs) + 1, np.int64)
    for i, b in enumerate(bvhs):
        node_off[i + 1] = node_off[i] + b.n_nodes
        prim_off[i + 1] = prim_off[i] + b.n_triangles

    b_lo = np.concatenate([b.node_lo for b in bvhs])
    b_hi = np.concatenate([b.node_hi for b in bvhs])
    b_leaf = np.concatenate([b.node_leaf for b in bvhs])
    a_parts = []
    b_parts = []
    for i, b in enumerate(bvhs):
        a = b.node_a.copy()
        bb = b.node_b.copy()
        leaf = b.node_leaf == 1
        a[leaf] += prim_off[i]
        a[~leaf] += node_off[i]
        bb[~leaf] += node_off[i]
        a_parts.append(a)
        b_parts.append(bb)
    return ScenePack(
        t_lo=top.node_lo,
        t_hi=top.node_hi,
        t_a=top.node_a,
        t_b=top.node_b,
        t_leaf=top.node_leaf,
        t_order=top.order,
        roots=node_off[:-1].copy(),
        b_lo=b_lo,
        b_hi=b_hi,
        b_a=np.concatenate(a_parts),
        b_b=np.concatenate(b_parts),
        b_leaf=b_leaf,
        v0=np.concatenate([b.v0 for b in bvhs]),
        v1=np.concatenate([b.v1 for b in bvhs]),
        v2=np.concatenate([b.v2 for b in bvhs]),
        n0=np.concatenate([b.n0 for b in bvhs]),
        n1=np.concatenate([b.n1 for b in bvhs]),
        n2=np.concatenate([b.n2 for b in bvhs]),
        src=np.concatenate([b.src for b in bvhs]),
        prim_off=prim_off,
        obox_lo=np.stack([b.bounds.min for b in bvhs]),
        obox_hi=np.stack([b.bounds.max for b in bvhs]),
        tri_counts=np.array([b.n_triangles for b in bvhs], np.int64),
    )


@dataclass(frozen=True)
class HitRecord:
    t: float
    object_id: int
    triangle_id: int  # index into the object's triangle list as loaded
    b1: float
    b2: float
    point: np.ndarray
    shading_normal: np.ndarray


def trace_closest(ray: Ray, scene, t_min: Optional[float] = None) -> Optional[HitRecord]:
    """Nearest hit beyond the scene's self-intersection threshold."""
    pack = scene.pack
    eps = scene.epsilon_t if t_min is None else t_min
    t, obj, slot, bu, bv = _scene_closest(
        *pack.top_args(), *pack.bottom_args(),
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2], eps,
    )
    if slot < 0:
        return None
    b0 = 1.0 - bu - bv
    n = b0 * pack.n0[slot] + bu * pack.n1[slot] + bv * pack.n2[slot]
    nn = np.linalg.norm(n)
    if nn > 0:
        n = n / nn
    return HitRecord(
        t=float(t),
        object_id=int(obj),
        triangle_id=int(pack.src[slot]),
        b1=float(bu),
        b2=float(bv),
        point=ray.origin + t * ray.direction,
        shading_normal=n,
    )


def trace_occluded(ray: Ray, scene, t_max: float) -> bool:
    pack = scene.pack
    return bool(
        _scene_occluded(
            *pack.top_args(), *pack.bottom_args(),
            ray.origin[0], ray.origin[1], ray.origin[2],
            ray.direction[0], ray.direction[1], ray.direction[2],
            scene.epsilon_t, t_max,
        )
    )


def trace_occluded_by_object(ray: Ray, scene, object_id: int, t_max: float) -> bool:
    """Any-hit restricted to one object's triangles; this is the label
    source for training and the ground-truth half of the hybrid path."""
    pack = scene.pack
    return bool(
        _occluded_in_object(
            pack.b_lo, pack.b_hi, pack.b_a, pack.b_b, pack.b_leaf,
            pack.v0, pack.v1, pack.v2, pack.roots[object_id],
            ray.origin[0], ray.origin[1], ray.origin[2],
            ray.direction[0], ray.direction[1], ray.direction[2],
            scene.epsilon_t, t_max,
        )
    )
