"""Compiled inner loops for the walk engine.

The step loop is resumable: whenever it runs out of uniforms, arena slots or
output buffer space it returns a status code *before* mutating anything, the
caller grows the offending buffer and calls again.  Uniforms are consumed in
a fixed order (offspring count, then rotor, per new vertex; neighbour choice
first for the simple random walk), so the trajectory depends only on the
uniform stream and never on buffer sizes.
"""
from __future__ import annotations

import numpy as np
from numba import njit

SINK = -1
UNVISITED = -1
FREED = -2

WALK_ROTOR = 0
WALK_SRW = 1

# state vector slots
S_N = 0
S_CUR = 1
S_SIZE = 2
S_RANGE = 3
S_POS = 4
S_NRET = 5
S_NSAMP = 6
S_FREE_TOP = 7
S_LIVE = 8
S_PEAK_LIVE = 9
STATE_LEN = 10

# status codes
DONE_STEPS = 0
DONE_RETURNS = 1
NEED_UNIFORMS = 2
NEED_ARENA = 3
NEED_RETURNS = 4
NEED_SAMPLES = 5

UNIFORMS_PER_STEP = 3


@njit(cache=True, inline="always")
def alias_draw(u, prob, alias, n):
    x = u * n
    i = int(x)
    if i >= n:
        i = n - 1
    if x - i < prob[i]:
        return i
    return alias[i]


@njit(cache=True, inline="always")
def alias_draw_row(u, prob, alias, row, n):
    x = u * n
    i = int(x)
    if i >= n:
        i = n - 1
    if x - i < prob[row, i]:
        return i
    return alias[row, i]


@njit(cache=True)
def _fill(
    idx, par, lk, pos, uni,
    parent, depth, nchild, rotor, rotor0, children, first_visit, keep,
    walk, fixed_deg, off_prob, off_alias, off_vals, rot_prob, rot_alias,
):
    parent[idx] = par
    depth[idx] = 0 if par < 0 else depth[par] + 1
    if off_prob is None:
        k = fixed_deg
    else:
        k = off_vals[alias_draw(uni[pos], off_prob, off_alias, off_prob.shape[0])]
        pos += 1
    nchild[idx] = k
    if rot_prob is None:
        r0 = 0
    else:
        r0 = alias_draw_row(uni[pos], rot_prob, rot_alias, k, k + 1)
        pos += 1
    rotor[idx] = r0
    rotor0[idx] = r0
    for j in range(children.shape[1]):
        children[idx, j] = UNVISITED
    first_visit[idx] = -1
    keep[idx] = lk
    return pos


@njit(cache=True)
def materialize(
    idx, par, letter_keep, state, uni,
    parent, depth, nchild, rotor, rotor0, children, first_visit, keep,
    walk, fixed_deg, off_prob, off_alias, off_vals, rot_prob, rot_alias,
):
    """Fill arena slot ``idx`` with a fresh vertex whose parent is ``par``."""
    state[S_POS] = _fill(
        idx, par, letter_keep, state[S_POS], uni,
        parent, depth, nchild, rotor, rotor0, children, first_visit, keep,
        walk, fixed_deg, off_prob, off_alias, off_vals, rot_prob, rot_alias,
    )


@njit(cache=True, nogil=True)
def walk_loop(
    state, uni,
    parent, depth, nchild, rotor, rotor0, children, first_visit, keep, freelist,
    walk, fixed_deg, off_prob, off_alias, off_vals, rot_prob, rot_alias,
    n_target, k_target, stride, samples, ret_times, ret_range,
    prune, keep_depth,
):
    n_uni = uni.shape[0]
    cap = parent.shape[0]
    n = state[S_N]
    cur = state[S_CUR]
    size = state[S_SIZE]
    rng_range = state[S_RANGE]
    pos = state[S_POS]
    nret = state[S_NRET]
    nsamp = state[S_NSAMP]
    free_top = state[S_FREE_TOP]
    live = state[S_LIVE]
    peak = state[S_PEAK_LIVE]
    ret_cap = ret_times.shape[0]
    samp_cap = samples.shape[0]
    next_sample = (n // stride + 1) * stride
    status = DONE_STEPS
    while True:
        if n >= n_target:
            status = DONE_STEPS
            break
        if nret >= k_target:
            status = DONE_RETURNS
            break
        if n_uni - pos < UNIFORMS_PER_STEP:
            status = NEED_UNIFORMS
            break
        if nret >= ret_cap:
            status = NEED_RETURNS
            break
        if nsamp >= samp_cap:
            status = NEED_SAMPLES
            break

        choice = 0
        new_rotor = 0
        used = 0
        if cur == SINK:
            dest = 0
        else:
            k = nchild[cur]
            if walk == WALK_ROTOR:
                new_rotor = rotor[cur] + 1
                if new_rotor > k:
                    new_rotor = 0
                choice = new_rotor
            else:
                choice = int(uni[pos] * (k + 1))
                if choice > k:
                    choice = k
                used = 1
            if choice == 0:
                dest = parent[cur]
            else:
                dest = children[cur, choice - 1]

        create = cur != SINK and choice > 0 and dest == UNVISITED
        if create and free_top == 0 and size >= cap:
            status = NEED_ARENA
            break

        # commit
        pos += used
        if walk == WALK_ROTOR and cur != SINK:
            rotor[cur] = new_rotor
        if create:
            if free_top > 0:
                free_top -= 1
                idx = freelist[free_top]
            else:
                idx = size
                size += 1
            lk = 0
            if prune:
                letter = nchild[cur] - choice
                if keep[cur] == 1 and (depth[cur] + 1 <= keep_depth or letter == 0):
                    lk = 1
            pos = _fill(
                idx, cur, lk, pos, uni,
                parent, depth, nchild, rotor, rotor0, children, first_visit, keep,
                walk, fixed_deg, off_prob, off_alias, off_vals, rot_prob, rot_alias,
            )
            children[cur, choice - 1] = idx
            dest = idx
            live += 1
            if live > peak:
                peak = live
        elif prune and cur != SINK and choice == 0 and keep[cur] == 0:
            # subtree of cur is finished for this excursion; recycle its slot
            p = parent[cur]
            children[p, rotor[p] - 1] = FREED
            freelist[free_top] = cur
            free_top += 1
            live -= 1

        n += 1
        cur = dest
        if dest == SINK:
            ret_times[nret] = n
            ret_range[nret] = rng_range
            nret += 1
            dist = 1
        else:
            if first_visit[dest] < 0:
                first_visit[dest] = n
                rng_range += 1
            dist = depth[dest]
        if n == next_sample or n == n_target:
            samples[nsamp, 0] = n
            samples[nsamp, 1] = rng_range
            samples[nsamp, 2] = dist
            nsamp += 1
            if n == next_sample:
                next_sample += stride

    state[S_N] = n
    state[S_CUR] = cur
    state[S_SIZE] = size
    state[S_RANGE] = rng_range
    state[S_POS] = pos
    state[S_NRET] = nret
    state[S_NSAMP] = nsamp
    state[S_FREE_TOP] = free_top
    state[S_LIVE] = live
    state[S_PEAK_LIVE] = peak
    return status


@njit(cache=True)
def boundary_counts(nchild, children, ranges):
    """Outer-boundary size and child-count sum of the first ``R`` arena nodes.

    Arena order equals first-visit order, so the range at a return with
    ``|R| = R`` is exactly the index prefix ``[0, R)``.  A child slot lies on
    the outer boundary if it is empty or holds a vertex with index ``>= R``;
    slots are histogrammed once so every ``R`` costs O(1) after a prefix sum.
    """
    m = ranges.shape[0]
    out_leaves = np.zeros(m, dtype=np.int64)
    out_xi = np.zeros(m, dtype=np.int64)
    if m == 0:
        return out_leaves, out_xi
    top = 0
    for t in range(m):
        if ranges[t] > top:
            top = ranges[t]
    xi_pref = np.zeros(top + 1, dtype=np.int64)
    inner_by_max = np.zeros(top + 1, dtype=np.int64)
    for i in range(top):
        k = nchild[i]
        xi_pref[i + 1] = xi_pref[i] + k
        for j in range(k):
            c = children[i, j]
            if c >= 0:
                # slot is interior for every R > max(i, c)
                hi = c if c > i else i
                if hi < top:
                    inner_by_max[hi + 1] += 1
    for r in range(1, top + 1):
        inner_by_max[r] += inner_by_max[r - 1]
    for t in range(m):
        R = ranges[t]
        out_xi[t] = xi_pref[R]
        out_leaves[t] = xi_pref[R] - inner_by_max[R]
    return out_leaves, out_xi


@njit(cache=True)
def contour_descend(children, nchild, first_visit, d, words, L, tail_cap, t_visit):
    """First depth along each tail-0 ray whose vertex is outside the range.

    ``words`` holds one base-``d`` digit word per row; letter ``k`` selects the
    child in neighbour slot ``d - k``.  Past the word, letter 0 is repeated.
    Returns -1 when the ray stays inside for ``tail_cap`` levels and -2 when
    it runs into a recycled slot.
    """
    n = words.shape[0]
    out = np.empty(n, dtype=np.int64)
    for w in range(n):
        v = 0
        if first_visit[0] < 0 or first_visit[0] > t_visit:
            out[w] = 1
            continue
        level = 1
        while True:
            if level <= L:
                letter = words[w, level - 1]
            else:
                letter = 0
            if level > L + tail_cap:
                out[w] = -1
                break
            slot = d - letter - 1
            c = children[v, slot]
            if c == FREED:
                # only off-ray vertices are recycled; reaching one is a caller bug
                out[w] = -2
                break
            if c < 0 or first_visit[c] < 0 or first_visit[c] > t_visit:
                out[w] = level
                break
            v = c
            level += 1
    return out
