"""Exact leave-one-out Aalen-Johansen occupation probabilities.

The censoring survival ``K(u-)`` divides both the transition count and the
risk set at the same time ``u``, so it cancels from every Nelson-Aalen
increment; deleting a unit therefore only perturbs the weighted risk sets and
transition counts over a contiguous range of event indices.  Products of the
``I + dA`` factors over such ranges are served from segment trees of 3-d
factor arrays, one tree per (cluster, state-at-risk) class, so a deletion
costs ``O(runs * log K)`` small matrix-vector products instead of a full
re-estimation.

Everything in here works in event-index space: ``tau`` are the distinct
transition times up to the last grid time, and a subject at risk in state
``s`` on ``(a, b]`` is the half-open index run ``[lo, hi)`` of event times in
that interval.  Raw (unweighted) counts travel alongside the weighted sums so
that an emptied risk set is detected exactly rather than through floating
cancellation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .panel import Panel, WeightScheme, running_total, subject_weights


@njit(cache=True)
def _vecmat(v, M, tmp):
    Q = v.shape[0]
    for j in range(Q):
        s = 0.0
        for i in range(Q):
            s += v[i] * M[i, j]
        tmp[j] = s
    for j in range(Q):
        v[j] = tmp[j]


@njit(cache=True)
def _matmul(A, B, out):
    Q = A.shape[0]
    for i in range(Q):
        for j in range(Q):
            s = 0.0
            for k in range(Q):
                s += A[i, k] * B[k, j]
            out[i, j] = s


@njit(cache=True)
def _mod_factor(k, kk, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep, y_state, trans_to, out):
    """``I + dA'`` at event index ``k`` after a deletion.

    The retained part of the deleted unit's cluster is reweighted by ``wn``;
    ``kk < 0`` means the cluster has nothing at index ``k``.
    """
    Q = Yw.shape[1]
    for l in range(Q):
        yc = Ycl[kk, l] if kk >= 0 else 0.0
        y = 1.0 if l == y_state else 0.0
        for m in range(Q):
            out[l, m] = 0.0
        cnt = Yraw[k, l] - yc + keep * (yc - y)
        if cnt < 0.5:
            out[l, l] = 1.0
            continue
        others = Yraw[k, l] - yc
        Y = wn * (yc - y)
        if others > 0.5:
            Y += Yw[k, l] - wi * yc
        if Y <= 0.0:
            # class-tree leaf no valid deletion can reach
            out[l, l] = 1.0
            continue
        diag = 1.0
        for m in range(Q):
            if m == l:
                continue
            nc = Ncl[kk, l, m] if kk >= 0 else 0.0
            nj = 1.0 if (l == y_state and m == trans_to) else 0.0
            ncnt = Nraw[k, l, m] - nc + keep * (nc - nj)
            if ncnt < 0.5:
                continue
            nothers = Nraw[k, l, m] - nc
            N = wn * (nc - nj)
            if nothers > 0.5:
                N += Nw[k, l, m] - wi * nc
            a = N / Y
            out[l, m] = a
            diag -= a
        out[l, l] = diag


@njit(cache=True)
def _build_tree(tree, P, lo, hi, slo, cls, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep, use_cluster):
    Q = Yw.shape[1]
    for p in range(P, 2 * P):
        k = lo + p - P
        if k < hi:
            kk = k - slo if use_cluster else -1
            _mod_factor(k, kk, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep, cls, -1, tree[p])
        else:
            for i in range(Q):
                for j in range(Q):
                    tree[p, i, j] = 1.0 if i == j else 0.0
    for p in range(P - 1, 0, -1):
        _matmul(tree[2 * p], tree[2 * p + 1], tree[p])


@njit(cache=True)
def _tree_apply(tree, P, v, tmp, a, b, stack):
    """``v <- v @ prod(leaves[a:b])`` in left-to-right order."""
    l = a + P
    r = b + P
    n = 0
    while l < r:
        if l & 1:
            _vecmat(v, tree[l], tmp)
            l += 1
        if r & 1:
            r -= 1
            stack[n] = r
            n += 1
        l >>= 1
        r >>= 1
    for t in range(n - 1, -1, -1):
        _vecmat(v, tree[stack[t]], tmp)


@njit(cache=True)
def _pow2(n):
    P = 1
    while P < n:
        P *= 2
    return P


@njit(cache=True)
def _advance(v, tmp, F, stack, a, b, kind, cls, to, g, gk, outd,
             btree, bP, ctree, cP, slo, use_trees, none_is_base,
             Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep):
    # kind 0: base factors; 1: cluster class ``cls`` (-1 = no own risk); 2: own transition
    R = gk.shape[0]
    while True:
        while g < R and gk[g] <= a:
            outd[g, :] = v
            g += 1
        if a >= b:
            break
        stop = b
        if g < R and gk[g] < stop:
            stop = gk[g]
        if kind == 0 or (kind == 1 and cls < 0 and none_is_base):
            _tree_apply(btree, bP, v, tmp, a, stop, stack)
        elif kind == 1 and use_trees:
            _tree_apply(ctree[cls + 1], cP, v, tmp, a - slo, stop - slo, stack)
        else:
            for k in range(a, stop):
                _mod_factor(k, k - slo, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep, cls, to, F)
                _vecmat(v, F, tmp)
        a = stop
    return g


@njit(cache=True)
def _gap(v, tmp, F, stack, p, q, g, gk, outd, btree, bP, ctree, cP, slo, shi,
         use_trees, none_is_base, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep):
    a = p
    b = min(q, slo)
    if b > a:
        g = _advance(v, tmp, F, stack, a, b, 0, -1, -1, g, gk, outd, btree, bP, ctree, cP, slo,
                     use_trees, none_is_base, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep)
    a = max(p, slo)
    b = min(q, shi)
    if b > a:
        g = _advance(v, tmp, F, stack, a, b, 1, -1, -1, g, gk, outd, btree, bP, ctree, cP, slo,
                     use_trees, none_is_base, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep)
    a = max(p, shi)
    if q > a:
        g = _advance(v, tmp, F, stack, a, q, 0, -1, -1, g, gk, outd, btree, bP, ctree, cP, slo,
                     use_trees, none_is_base, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep)
    return g


@njit(cache=True)
def base_tree(Yw, Yraw, Nw, Nraw):
    K, Q = Yw.shape
    P = _pow2(max(K, 1))
    tree = np.empty((2 * P, Q, Q))
    dummy_y = np.zeros((1, Q))
    dummy_n = np.zeros((1, Q, Q))
    _build_tree(tree, P, 0, K, 0, -1, Yw, Yraw, Nw, Nraw, dummy_y, dummy_n, 0.0, 0.0, 1.0, False)
    return tree, P


@njit(cache=True)
def cluster_kernel(Yw, Yraw, Nw, Nraw, gk, btree, bP, slo, shi, Ycl, Ncl, wi, wn, keep,
                   pi0_by_init, del_init, run_ptr, run_lo, run_hi, run_state, run_to,
                   use_trees, none_is_base, state_mask):
    """Occupation probabilities on the grid after each listed deletion.

    Returns an array ``(D, R, Q)``.
    """
    K, Q = Yw.shape
    R = gk.shape[0]
    D = del_init.shape[0]
    out = np.empty((D, R, Q))
    span = shi - slo
    cP = _pow2(max(span, 1))
    if use_trees:
        ctree = np.empty((Q + 1, 2 * cP, Q, Q))
        if not none_is_base:
            _build_tree(ctree[0], cP, slo, shi, slo, -1, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep, True)
        for s in range(Q):
            if state_mask[s]:
                _build_tree(ctree[s + 1], cP, slo, shi, slo, s, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep, True)
    else:
        ctree = np.empty((1, 2, Q, Q))
    v = np.empty(Q)
    tmp = np.empty(Q)
    F = np.empty((Q, Q))
    stack = np.empty(128, dtype=np.int64)
    for d in range(D):
        for q in range(Q):
            v[q] = pi0_by_init[del_init[d], q]
        outd = out[d]
        g = 0
        p = 0
        for r in range(run_ptr[d], run_ptr[d + 1]):
            lo = run_lo[r]
            hi = run_hi[r]
            s = run_state[r]
            to = run_to[r]
            g = _gap(v, tmp, F, stack, p, lo, g, gk, outd, btree, bP, ctree, cP, slo, shi,
                     use_trees, none_is_base, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep)
            e = hi - 1 if to >= 0 else hi
            if e > lo:
                g = _advance(v, tmp, F, stack, lo, e, 1, s, -1, g, gk, outd, btree, bP, ctree, cP, slo,
                             use_trees, False, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep)
            if to >= 0:
                g = _advance(v, tmp, F, stack, hi - 1, hi, 2, s, to, g, gk, outd, btree, bP, ctree, cP,
                             slo, use_trees, False, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep)
            p = hi
        g = _gap(v, tmp, F, stack, p, K, g, gk, outd, btree, bP, ctree, cP, slo, shi,
                 use_trees, none_is_base, Yw, Yraw, Nw, Nraw, Ycl, Ncl, wi, wn, keep)
        while g < R:
            outd[g, :] = v
            g += 1
    return out


@dataclass
class EventIndex:
    """A panel laid out on the grid of distinct transition times."""

    tau: np.ndarray
    gk: np.ndarray  # number of event times <= each grid time
    Q: int
    run_subject: np.ndarray
    run_lo: np.ndarray
    run_hi: np.ndarray
    run_state: np.ndarray
    run_to: np.ndarray
    run_ptr: np.ndarray  # CSR over subjects
    init: np.ndarray
    cluster: np.ndarray

    def counts(self, w: np.ndarray, members: np.ndarray | None = None, lo: int = 0, hi: int | None = None):
        """Weighted risk sets and transition counts on ``[lo, hi)``."""
        K = self.tau.size if hi is None else hi
        size = K - lo
        Q = self.Q
        sel = np.ones(self.run_lo.size, bool) if members is None else np.isin(self.run_subject, members)
        ws = w[self.run_subject[sel]]
        a, b = self.run_lo[sel] - lo, self.run_hi[sel] - lo
        st = self.run_state[sel]
        Y = np.zeros((size, Q))
        for l in range(Q):
            on = st == l
            Y[:, l] = running_total(np.concatenate((a[on], b[on])), np.concatenate((ws[on], -ws[on])), size)
        N = np.zeros((size, Q, Q))
        tsel = self.run_to[sel] >= 0
        np.add.at(N, (b[tsel] - 1, st[tsel], self.run_to[sel][tsel]), ws[tsel])
        return Y, N


def event_index(panel: Panel, grid) -> EventIndex:
    arr = panel.arrays
    grid = np.asarray(grid, dtype=float)
    tmax = float(grid.max())
    tau = np.unique(arr.tr_time[arr.tr_time <= tmax])
    gk = np.searchsorted(tau, grid, side="right").astype(np.int64)
    lo = np.searchsorted(tau, arr.sp_start, side="right")
    hi = np.searchsorted(tau, arr.sp_end, side="right")
    to = np.where(arr.sp_end <= tmax, arr.sp_to, -1)
    keep = lo < hi
    subj = arr.sp_subject[keep]
    order = np.lexsort((lo[keep], subj))
    n = arr.cluster.size
    run_subject = subj[order]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(run_subject, minlength=n), out=ptr[1:])
    return EventIndex(
        tau=tau,
        gk=gk,
        Q=panel.state_space.num_states,
        run_subject=run_subject,
        run_lo=lo[keep][order].astype(np.int64),
        run_hi=hi[keep][order].astype(np.int64),
        run_state=arr.sp_state[keep][order].astype(np.int64),
        run_to=to[keep][order].astype(np.int64),
        run_ptr=ptr,
        init=arr.init,
        cluster=arr.cluster,
    )


def _dedupe(ev: EventIndex, subjects: np.ndarray, by_cluster: bool):
    """Group subjects whose deletion has identical effect; return reps and inverse map."""
    keys = {}
    reps = []
    inverse = np.empty(subjects.size, dtype=np.int64)
    for pos, j in enumerate(subjects.tolist()):
        a, b = ev.run_ptr[j], ev.run_ptr[j + 1]
        key = (
            int(ev.cluster[j]) if by_cluster else 0,
            int(ev.init[j]),
            ev.run_lo[a:b].tobytes(),
            ev.run_hi[a:b].tobytes(),
            ev.run_state[a:b].tobytes(),
            ev.run_to[a:b].tobytes(),
        )
        idx = keys.get(key)
        if idx is None:
            idx = keys[key] = len(reps)
            reps.append(j)
        inverse[pos] = idx
    return np.array(reps, dtype=np.int64), inverse


def _runs_csr(ev: EventIndex, reps: np.ndarray):
    lens = ev.run_ptr[reps + 1] - ev.run_ptr[reps]
    ptr = np.zeros(reps.size + 1, dtype=np.int64)
    np.cumsum(lens, out=ptr[1:])
    idx = np.concatenate([np.arange(ev.run_ptr[j], ev.run_ptr[j + 1]) for j in reps]) if reps.size else np.empty(0, np.int64)
    idx = idx.astype(np.int64)
    return ptr, ev.run_lo[idx], ev.run_hi[idx], ev.run_state[idx], ev.run_to[idx]


@dataclass
class _Base:
    ev: EventIndex
    Yw: np.ndarray
    Yraw: np.ndarray
    Nw: np.ndarray
    Nraw: np.ndarray
    btree: np.ndarray
    bP: int
    W0: np.ndarray
    w: np.ndarray


def _base(panel: Panel, grid, scheme: WeightScheme) -> _Base:
    ev = event_index(panel, grid)
    w = subject_weights(panel, scheme)
    Yraw, Nraw = ev.counts(np.ones(w.size))
    Yw, Nw = (Yraw, Nraw) if scheme is WeightScheme.UNWEIGHTED else ev.counts(w)
    btree, bP = base_tree(Yw, Yraw, Nw, Nraw)
    W0 = np.bincount(ev.init, weights=w, minlength=ev.Q)
    return _Base(ev, Yw, Yraw, Nw, Nraw, btree, bP, W0, w)


def _run(b: _Base, slo, shi, Ycl, Ncl, wi, wn, keep, pi0_by_init, reps, use_trees, none_is_base):
    ev = b.ev
    ptr, lo, hi, st, to = _runs_csr(ev, reps)
    mask = np.zeros(ev.Q, dtype=np.bool_)
    mask[np.unique(st)] = True
    return cluster_kernel(
        b.Yw, b.Yraw, b.Nw, b.Nraw, ev.gk, b.btree, b.bP, int(slo), int(shi), Ycl, Ncl,
        float(wi), float(wn), float(keep), pi0_by_init, ev.init[reps] if reps.size else np.empty(0, np.int64),
        ptr, lo, hi, st, to, bool(use_trees), bool(none_is_base), mask,
    )


def full_estimate(b: _Base) -> np.ndarray:
    Q = b.ev.Q
    pi0 = (b.W0 / b.W0.sum()).reshape(1, Q)
    empty = np.empty(0, dtype=np.int64)
    out = cluster_kernel(
        b.Yw, b.Yraw, b.Nw, b.Nraw, b.ev.gk, b.btree, b.bP, 0, 0, np.zeros((1, Q)), np.zeros((1, Q, Q)),
        0.0, 0.0, 1.0, pi0, np.zeros(1, np.int64), np.zeros(2, np.int64), empty, empty, empty, empty,
        False, True, np.zeros(Q, np.bool_),
    )
    return out[0]


def loo_unweighted(panel: Panel, grid, tree_threshold: int = 8):
    """Full and leave-one-subject-out unweighted estimates.

    Returns ``(full (R, Q), loo (n, R, Q))``.
    """
    b = _base(panel, grid, WeightScheme.UNWEIGHTED)
    ev = b.ev
    n = ev.init.size
    Q = ev.Q
    full = full_estimate(b)
    if n < 2:
        raise ValueError("jackknife undefined")
    reps, inverse = _dedupe(ev, np.arange(n), by_cluster=False)
    pi0 = (b.W0[None, :] - np.eye(Q)) / (n - 1)
    K = ev.tau.size
    out = _run(b, 0, K, np.zeros((max(K, 1), Q)), np.zeros((max(K, 1), Q, Q)), 0.0, 1.0, 1.0,
               pi0, reps, reps.size >= tree_threshold, True)
    return full, out[inverse]


def loo_cluster_weighted(panel: Panel, grid, tree_threshold: int = 8):
    """Full, leave-one-cluster-out and leave-one-subject-out estimates under
    inverse cluster size weights.

    Returns ``(full (R, Q), minus_cluster (m, R, Q), minus_subject (n, R, Q))``.
    A subject deletion keeps the rest of its cluster, reweighted by
    ``1/(n_i - 1)``.
    """
    b = _base(panel, grid, WeightScheme.INVERSE_CLUSTER_SIZE)
    ev = b.ev
    Q = ev.Q
    m = panel.num_clusters
    if m < 2:
        raise ValueError("cluster jackknife undefined")
    full = full_estimate(b)
    sizes = panel.cluster_sizes
    n = ev.init.size
    minus_cluster = np.empty((m, ev.gk.size, Q))
    minus_subject = np.empty((n, ev.gk.size, Q))
    run_cluster = ev.cluster[ev.run_subject]
    for i in range(m):
        members = np.flatnonzero(ev.cluster == i)
        ni = sizes[i]
        wi = 1.0 / ni
        rsel = run_cluster == i
        if np.any(rsel):
            slo = int(ev.run_lo[rsel].min())
            shi = int(ev.run_hi[rsel].max())
            Ycl, Ncl = ev.counts(np.ones(n), members, slo, shi)
        else:
            slo = shi = 0
            Ycl, Ncl = np.zeros((1, Q)), np.zeros((1, Q, Q))
        ci = np.bincount(ev.init[members], minlength=Q).astype(float)
        rest = b.W0 - wi * ci
        none = np.empty(0, dtype=np.int64)
        pi0_c = (rest / rest.sum()).reshape(1, Q)
        # cluster removal: pass a single empty deletion
        out_c = cluster_kernel(
            b.Yw, b.Yraw, b.Nw, b.Nraw, ev.gk, b.btree, b.bP, slo, shi, Ycl, Ncl, wi, 0.0, 0.0,
            pi0_c, np.zeros(1, np.int64), np.zeros(2, np.int64), none, none, none, none,
            False, False, np.zeros(Q, np.bool_),
        )
        minus_cluster[i] = out_c[0]
        if ni == 1:
            minus_subject[members] = out_c[0]
            continue
        wn = 1.0 / (ni - 1)
        pi0 = rest[None, :] + wn * (ci[None, :] - np.eye(Q))
        pi0 /= pi0.sum(axis=1, keepdims=True)
        reps, inverse = _dedupe(ev, members, by_cluster=True)
        out = _run(b, slo, shi, Ycl, Ncl, wi, wn, 1.0, pi0, reps, reps.size >= tree_threshold, False)
        minus_subject[members] = out[inverse]
    return full, minus_cluster, minus_subject
