# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ray-march kernels: saturating-transmittance forward pass and
its exact adjoint, parallelized over rays with OpenMP.

Discretization (front to back, per span of constant overlap set):
    A_k = min(1, A_{k-1} + alpha(x_k) * h)
    I  += ebar(x_k) * (A_k - A_{k-1})
where alpha sums opacity density over overlapping primitives, ebar is
the density-weighted radiance sum divided by alpha, and marching stops
once A reaches 1. Ties at the saturation kink take the unsaturated
(left) subgradient.

The BVH path interleaves traversal with marching: nodes pop from a
min-heap keyed on AABB entry parameter, and a span is only marched once
every undiscovered box provably starts behind it (a node's AABB entry
lower-bounds the entries of all boxes inside). Saturated rays therefore
never visit geometry behind the saturation point, and the executed step
stream is bit-identical to the exhaustive (no-BVH) path.

The adjoint differentiates the exact discrete computation, including
the dependence of the sample schedule on the ray/box intersection
parameters (span endpoints move with frames, pose and rays).

Rotations are passed as ``Rc`` with Rc[p, i, :] = world components of the
box's local axis i (the transpose of the local-to-world matrix), so the
inner loops read contiguous rows.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, threadid
from libc.math cimport ceil, fabs

cnp.import_array()

ctypedef fused real:
    float
    double

DEF INF = 1e300


cdef inline int obb_clip(const real* o, const real* d,
                         const real* Rc, const real* tr, const real* sinv,
                         real tmin, real tmax,
                         real* e0, real* e1, int* ax0, int* ax1) nogil:
    """Slab test in the box's local frame.

    ax0/ax1 report which local axis produced the entry/exit parameter
    (-1 when clipped by tmin/tmax instead)."""
    cdef real rel0 = o[0] - tr[0]
    cdef real rel1 = o[1] - tr[1]
    cdef real rel2 = o[2] - tr[2]
    cdef real lo = tmin
    cdef real hi = tmax
    cdef int alo = -1
    cdef int ahi = -1
    cdef real a, b, tmp, ol, dl, inv
    cdef int i
    for i in range(3):
        ol = (Rc[3 * i] * rel0 + Rc[3 * i + 1] * rel1 + Rc[3 * i + 2] * rel2) * sinv[i]
        dl = (Rc[3 * i] * d[0] + Rc[3 * i + 1] * d[1] + Rc[3 * i + 2] * d[2]) * sinv[i]
        if fabs(dl) < 1e-12:
            if ol < -1.0 or ol > 1.0:
                return 0
            continue
        inv = 1.0 / dl
        a = (-1.0 - ol) * inv
        b = (1.0 - ol) * inv
        if a > b:
            tmp = a; a = b; b = tmp
        if a > lo:
            lo = a
            alo = i
        if b < hi:
            hi = b
            ahi = i
        if lo >= hi:
            return 0
    e0[0] = lo
    e1[0] = hi
    ax0[0] = alo
    ax1[0] = ahi
    return 1


cdef inline double node_entry(const double* o64_unused, const real* o, const real* d,
                              const double* invd, const int* dzero,
                              const double* bbmin, const double* bbmax,
                              double tmin, double tmax) nogil:
    """AABB entry parameter, or INF on a miss."""
    cdef double lo = tmin
    cdef double hi = tmax
    cdef double a, b, tmp
    cdef int i
    for i in range(3):
        if dzero[i]:
            if o[i] < bbmin[i] or o[i] > bbmax[i]:
                return INF
            continue
        a = (bbmin[i] - o[i]) * invd[i]
        b = (bbmax[i] - o[i]) * invd[i]
        if a > b:
            tmp = a; a = b; b = tmp
        if a > lo:
            lo = a
        if b < hi:
            hi = b
        if lo >= hi:
            return INF
    return lo


cdef inline void trilinear(const real* va, const real* vc, int D, const real* u,
                           real* a_out, real* c_out) nogil:
    """Sample opacity density + radiance at local coords u in [-1,1]^3."""
    cdef real g[3]
    cdef int i0[3]
    cdef real w[3]
    cdef int i
    cdef real gi
    for i in range(3):
        gi = (u[i] + 1.0) * (<real>0.5) * (D - 1)
        if gi < 0.0:
            gi = 0.0
        elif gi > D - 1:
            gi = D - 1
        g[i] = gi
        i0[i] = <int>g[i]
        if i0[i] > D - 2:
            i0[i] = D - 2
        w[i] = g[i] - i0[i]
    cdef real acc_a = 0.0
    cdef real acc0 = 0.0, acc1 = 0.0, acc2 = 0.0
    cdef int cx, cy, cz, idx
    cdef real wx, wy, wz, wt
    for cx in range(2):
        wx = w[0] if cx else 1.0 - w[0]
        for cy in range(2):
            wy = w[1] if cy else 1.0 - w[1]
            for cz in range(2):
                wz = w[2] if cz else 1.0 - w[2]
                wt = wx * wy * wz
                idx = ((i0[0] + cx) * D + (i0[1] + cy)) * D + (i0[2] + cz)
                acc_a += wt * va[idx]
                acc0 += wt * vc[3 * idx]
                acc1 += wt * vc[3 * idx + 1]
                acc2 += wt * vc[3 * idx + 2]
    a_out[0] = acc_a
    c_out[0] = acc0
    c_out[1] = acc1
    c_out[2] = acc2


cdef inline void trilinear_adj(const real* va, const real* vc, int D, const real* u,
                               real ga, const real* gc,
                               real* gva, real* gvc, real* gu) nogil:
    """Adjoint of ``trilinear``: accumulate voxel grads and du."""
    cdef real g[3]
    cdef int i0[3]
    cdef real w[3]
    cdef int clamped[3]
    cdef int i
    cdef real gi
    for i in range(3):
        gi = (u[i] + 1.0) * (<real>0.5) * (D - 1)
        clamped[i] = 0
        if gi < 0.0:
            gi = 0.0
            clamped[i] = 1
        elif gi > D - 1:
            gi = D - 1
            clamped[i] = 1
        g[i] = gi
        i0[i] = <int>g[i]
        if i0[i] > D - 2:
            i0[i] = D - 2
        w[i] = g[i] - i0[i]
        gu[i] = 0.0
    cdef int cx, cy, cz, idx
    cdef real wx, wy, wz, wt
    cdef real dwx, dwy, dwz
    cdef real corner_g
    cdef real scale = (<real>0.5) * (D - 1)
    for cx in range(2):
        wx = w[0] if cx else 1.0 - w[0]
        dwx = 1.0 if cx else -1.0
        for cy in range(2):
            wy = w[1] if cy else 1.0 - w[1]
            dwy = 1.0 if cy else -1.0
            for cz in range(2):
                wz = w[2] if cz else 1.0 - w[2]
                dwz = 1.0 if cz else -1.0
                wt = wx * wy * wz
                idx = ((i0[0] + cx) * D + (i0[1] + cy)) * D + (i0[2] + cz)
                gva[idx] += ga * wt
                gvc[3 * idx] += gc[0] * wt
                gvc[3 * idx + 1] += gc[1] * wt
                gvc[3 * idx + 2] += gc[2] * wt
                corner_g = ga * va[idx] + gc[0] * vc[3 * idx] \
                    + gc[1] * vc[3 * idx + 1] + gc[2] * vc[3 * idx + 2]
                gu[0] += corner_g * dwx * wy * wz
                gu[1] += corner_g * wx * dwy * wz
                gu[2] += corner_g * wx * wy * dwz
    for i in range(3):
        if clamped[i]:
            gu[i] = 0.0
        else:
            gu[i] *= scale


cdef inline void local_coords(const real* x, const real* Rc, const real* tr,
                              const real* sinv, real* u) nogil:
    cdef real r0 = x[0] - tr[0]
    cdef real r1 = x[1] - tr[1]
    cdef real r2 = x[2] - tr[2]
    cdef int i
    for i in range(3):
        u[i] = (Rc[3 * i] * r0 + Rc[3 * i + 1] * r1 + Rc[3 * i + 2] * r2) * sinv[i]


cdef struct RayState:
    double A
    double I0
    double I1
    double I2
    int total
    int done
    int saturated
    int nrec


cdef inline void march_span(const real* o, const real* d, real dt,
                            const real* Rc, const real* tr, const real* sinv,
                            const real* va, const real* vc,
                            int D, int vox, int max_steps,
                            real a, real b, int src_a, int src_b,
                            int nint, const int* iprim, const real* it0, const real* it1,
                            const int* perm,
                            RayState* rs, int record, real* st, int* sti) nogil:
    """March one constant-overlap span [a, b] and update the ray state.

    Primitives are visited in (enter, prim) order via ``perm`` so the
    floating summation order is independent of discovery order."""
    if b - a < 1e-9:
        return
    cdef real mid = (a + b) * 0.5
    cdef int any_active = 0
    cdef int k, kk, p, step, nsteps
    for k in range(nint):
        if it0[k] <= mid and mid < it1[k]:
            any_active = 1
            break
    if not any_active:
        return
    nsteps = <int>ceil((b - a) / dt)
    if nsteps < 1:
        nsteps = 1
    cdef real h = (b - a) / nsteps
    cdef real t, alpha, q, rem, wgt, ap
    cdef real x[3]
    cdef real u[3]
    cdef real cp[3]
    cdef real e0, e1, e2
    for step in range(nsteps):
        if rs.total >= max_steps:
            rs.done = 1
            return
        rs.total += 1
        t = a + (step + 0.5) * h
        x[0] = o[0] + t * d[0]
        x[1] = o[1] + t * d[1]
        x[2] = o[2] + t * d[2]
        alpha = 0.0
        e0 = 0.0; e1 = 0.0; e2 = 0.0
        for kk in range(nint):
            k = perm[kk]
            if it0[k] <= t and t < it1[k]:
                p = iprim[k]
                local_coords(x, Rc + 9 * p, tr + 3 * p, sinv + 3 * p, u)
                trilinear(va + vox * p, vc + 3 * vox * p, D, u, &ap, cp)
                alpha = alpha + ap
                e0 = e0 + ap * cp[0]
                e1 = e1 + ap * cp[1]
                e2 = e2 + ap * cp[2]
        if alpha <= 0.0:
            continue
        if record:
            st[7 * rs.nrec] = t
            st[7 * rs.nrec + 1] = h
            st[7 * rs.nrec + 2] = alpha
            st[7 * rs.nrec + 3] = e0
            st[7 * rs.nrec + 4] = e1
            st[7 * rs.nrec + 5] = e2
            st[7 * rs.nrec + 6] = <real>rs.A
            sti[4 * rs.nrec] = step
            sti[4 * rs.nrec + 1] = nsteps
            sti[4 * rs.nrec + 2] = src_a
            sti[4 * rs.nrec + 3] = src_b
            rs.nrec += 1
        q = alpha * h
        rem = <real>(1.0 - rs.A)
        if q <= rem:
            rs.I0 += e0 * h
            rs.I1 += e1 * h
            rs.I2 += e2 * h
            rs.A += q
            if rs.A >= 1.0:
                rs.A = 1.0
                rs.done = 1
                return
        else:
            wgt = rem / alpha
            rs.I0 += e0 * wgt
            rs.I1 += e1 * wgt
            rs.I2 += e2 * wgt
            rs.A = 1.0
            rs.done = 1
            rs.saturated = 1
            return


cdef inline void insert_interval(int* iprim, real* it0, real* it1, int* iax0, int* iax1,
                                 int* perm, int* nint,
                                 int p, real e0, real e1, int a0, int a1,
                                 real* bp, int* bsrc, int* nbp, int ibp) nogil:
    """Append one interval and keep ``perm`` ordered by (enter, prim);
    insert its two breakpoints into the sorted tail of ``bp``."""
    cdef int slot = nint[0]
    iprim[slot] = p
    it0[slot] = e0
    it1[slot] = e1
    iax0[slot] = a0
    iax1[slot] = a1
    nint[0] = slot + 1
    cdef int j = slot - 1
    cdef int q
    # ordered insertion into perm
    while j >= 0:
        q = perm[j]
        if it0[q] > e0 or (it0[q] == e0 and iprim[q] > p):
            perm[j + 1] = perm[j]
            j -= 1
        else:
            break
    perm[j + 1] = slot
    # breakpoints (only in the unconsumed tail, ibp..nbp)
    cdef int nb = nbp[0]
    cdef int src0 = 2 * slot
    cdef int src1 = 2 * slot + 1
    j = nb - 1
    while j >= ibp and bp[j] > e0:
        bp[j + 1] = bp[j]
        bsrc[j + 1] = bsrc[j]
        j -= 1
    bp[j + 1] = e0
    bsrc[j + 1] = src0
    nb += 1
    j = nb - 1
    while j >= ibp and bp[j] > e1:
        bp[j + 1] = bp[j]
        bsrc[j + 1] = bsrc[j]
        j -= 1
    bp[j + 1] = e1
    bsrc[j + 1] = src1
    nbp[0] = nb + 1


cdef inline void heap_push(double* ht, int* hid, int* hn, double key, int node) nogil:
    cdef int i = hn[0]
    cdef int parent
    cdef double tk
    cdef int tn
    ht[i] = key
    hid[i] = node
    hn[0] = i + 1
    while i > 0:
        parent = (i - 1) >> 1
        if ht[parent] > ht[i] or (ht[parent] == ht[i] and hid[parent] > hid[i]):
            tk = ht[parent]; ht[parent] = ht[i]; ht[i] = tk
            tn = hid[parent]; hid[parent] = hid[i]; hid[i] = tn
            i = parent
        else:
            break


cdef inline int heap_pop(double* ht, int* hid, int* hn, double* key_out) nogil:
    cdef int n = hn[0]
    cdef int node = hid[0]
    key_out[0] = ht[0]
    n -= 1
    ht[0] = ht[n]
    hid[0] = hid[n]
    hn[0] = n
    cdef int i = 0
    cdef int l, r, m
    cdef double tk
    cdef int tn
    while True:
        l = 2 * i + 1
        r = l + 1
        m = i
        if l < n and (ht[l] < ht[m] or (ht[l] == ht[m] and hid[l] < hid[m])):
            m = l
        if r < n and (ht[r] < ht[m] or (ht[r] == ht[m] and hid[r] < hid[m])):
            m = r
        if m == i:
            break
        tk = ht[m]; ht[m] = ht[i]; ht[i] = tk
        tn = hid[m]; hid[m] = hid[i]; hid[i] = tn
        i = m
    return node


cdef int _trace_ray(const real* o, const real* d, real tmin, real tmax, real dt,
                    const real* Rc, const real* tr, const real* sinv,
                    const real* va, const real* vc,
                    const double* bbmin, const double* bbmax,
                    const int* left, const int* right, const int* order,
                    int use_bvh, int P, int D, int vox, int max_steps,
                    int* iprim, real* it0, real* it1, int* iax0, int* iax1,
                    int* perm, real* bp, int* bsrc,
                    double* heap_t, int* heap_id,
                    RayState* rs, int record, real* st, int* sti) nogil:
    """Walk one ray; fills rs and (if record) the step scratch.

    Returns the number of discovered intervals (for the adjoint sweep)."""
    cdef int nint = 0
    cdef int nbp = 0
    cdef int ibp = 0
    cdef int hn = 0
    cdef double invd[3]
    cdef int dzero[3]
    cdef int i, k, p, node, start
    cdef real e0 = 0.0, e1 = 0.0
    cdef int a0 = -1, a1 = -1
    cdef double barrier, key
    rs.A = 0.0
    rs.I0 = 0.0; rs.I1 = 0.0; rs.I2 = 0.0
    rs.total = 0
    rs.done = 0
    rs.saturated = 0
    rs.nrec = 0
    cdef int stack[128]
    cdef int top
    if use_bvh:
        for i in range(3):
            dzero[i] = fabs(d[i]) < 1e-12
            invd[i] = 0.0 if dzero[i] else 1.0 / (<double>d[i])
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if node_entry(NULL, o, d, invd, dzero,
                          bbmin + 3 * node, bbmax + 3 * node, tmin, tmax) >= INF:
                continue
            if left[node] < 0:
                start = -left[node] - 1
                for k in range(right[node]):
                    p = order[start + k]
                    if obb_clip(o, d, Rc + 9 * p, tr + 3 * p, sinv + 3 * p,
                                tmin, tmax, &e0, &e1, &a0, &a1):
                        insert_interval(iprim, it0, it1, iax0, iax1, perm, &nint,
                                        p, e0, e1, a0, a1, bp, bsrc, &nbp, ibp)
            elif top + 2 <= 128:
                stack[top] = left[node]
                stack[top + 1] = right[node]
                top += 2
        while ibp + 1 < nbp and not rs.done:
            march_span(o, d, dt, Rc, tr, sinv, va, vc, D, vox, max_steps,
                       bp[ibp], bp[ibp + 1], bsrc[ibp], bsrc[ibp + 1],
                       nint, iprim, it0, it1, perm, rs, record, st, sti)
            ibp += 1
    else:
        for p in range(P):
            if obb_clip(o, d, Rc + 9 * p, tr + 3 * p, sinv + 3 * p,
                        tmin, tmax, &e0, &e1, &a0, &a1):
                insert_interval(iprim, it0, it1, iax0, iax1, perm, &nint,
                                p, e0, e1, a0, a1, bp, bsrc, &nbp, ibp)
        while ibp + 1 < nbp and not rs.done:
            march_span(o, d, dt, Rc, tr, sinv, va, vc, D, vox, max_steps,
                       bp[ibp], bp[ibp + 1], bsrc[ibp], bsrc[ibp + 1],
                       nint, iprim, it0, it1, perm, rs, record, st, sti)
            ibp += 1
    return nint


def march_forward(real[:, ::1] o, real[:, ::1] d, real tmin, real tmax, real dt,
                  real[:, :, ::1] Rc, real[:, ::1] tr, real[:, ::1] sc,
                  real[:, ::1] va, real[:, ::1] vc,
                  double[:, ::1] bbmin, double[:, ::1] bbmax,
                  int[::1] left, int[::1] right, int[::1] order,
                  int use_bvh, int max_steps, int num_threads,
                  real[:, ::1] out_rad, real[::1] out_cov):
    """Forward march over all rays. va: (P, D^3), vc: (P, D^3*3) flattened."""
    cdef int N = o.shape[0]
    cdef int P = tr.shape[0]
    cdef int M = left.shape[0]
    cdef int D = <int>round((<double>va.shape[1]) ** (1.0 / 3.0))
    while D * D * D < va.shape[1]:
        D += 1
    cdef cnp.ndarray sinv_arr = np.ascontiguousarray(1.0 / np.asarray(sc))
    cdef real[:, ::1] sinv = sinv_arr
    cdef int T = num_threads if num_threads > 0 else 1
    cdef int[:, ::1] ws_prim = np.empty((T, P), dtype=np.int32)
    cdef int[:, ::1] ws_ax0 = np.empty((T, P), dtype=np.int32)
    cdef int[:, ::1] ws_ax1 = np.empty((T, P), dtype=np.int32)
    cdef int[:, ::1] ws_perm = np.empty((T, P), dtype=np.int32)
    cdef int[:, ::1] ws_bsrc = np.empty((T, 2 * P + 2), dtype=np.int32)
    cdef int[:, ::1] ws_hid = np.empty((T, M + 2), dtype=np.int32)
    cdef double[:, ::1] ws_ht = np.empty((T, M + 2), dtype=np.float64)
    cdef cnp.dtype dt_np = np.asarray(sc).dtype
    cdef real[:, ::1] ws_t0 = np.empty((T, P), dtype=dt_np)
    cdef real[:, ::1] ws_t1 = np.empty((T, P), dtype=dt_np)
    cdef real[:, ::1] ws_bp = np.empty((T, 2 * P + 2), dtype=dt_np)
    cdef int r, tid
    with nogil:
        for r in prange(N, num_threads=T, schedule='static'):
            tid = threadid()
            _forward_one(&o[r, 0], &d[r, 0], tmin, tmax, dt,
                         &Rc[0, 0, 0], &tr[0, 0], &sinv[0, 0],
                         &va[0, 0], &vc[0, 0],
                         &bbmin[0, 0], &bbmax[0, 0], &left[0], &right[0], &order[0],
                         use_bvh, P, D, va.shape[1], max_steps,
                         &ws_prim[tid, 0], &ws_t0[tid, 0], &ws_t1[tid, 0],
                         &ws_ax0[tid, 0], &ws_ax1[tid, 0], &ws_perm[tid, 0],
                         &ws_bp[tid, 0], &ws_bsrc[tid, 0],
                         &ws_ht[tid, 0], &ws_hid[tid, 0],
                         &out_rad[r, 0], &out_cov[r])
    return None


cdef void _forward_one(const real* o, const real* d, real tmin, real tmax, real dt,
                       const real* Rc, const real* tr, const real* sinv,
                       const real* va, const real* vc,
                       const double* bbmin, const double* bbmax,
                       const int* left, const int* right, const int* order,
                       int use_bvh, int P, int D, int vox, int max_steps,
                       int* iprim, real* it0, real* it1, int* iax0, int* iax1,
                       int* perm, real* bp, int* bsrc,
                       double* heap_t, int* heap_id,
                       real* out_rad, real* out_cov) nogil:
    cdef RayState rs
    _trace_ray(o, d, tmin, tmax, dt, Rc, tr, sinv, va, vc,
               bbmin, bbmax, left, right, order, use_bvh,
               P, D, vox, max_steps,
               iprim, it0, it1, iax0, iax1, perm, bp, bsrc,
               heap_t, heap_id, &rs, 0, NULL, NULL)
    out_rad[0] = <real>rs.I0
    out_rad[1] = <real>rs.I1
    out_rad[2] = <real>rs.I2
    out_cov[0] = <real>rs.A


def march_backward(real[:, ::1] o, real[:, ::1] d, real tmin, real tmax, real dt,
                   real[:, :, ::1] Rc, real[:, ::1] tr, real[:, ::1] sc,
                   real[:, ::1] va, real[:, ::1] vc,
                   double[:, ::1] bbmin, double[:, ::1] bbmax,
                   int[::1] left, int[::1] right, int[::1] order,
                   int use_bvh, int max_steps, int num_threads,
                   real[:, ::1] grad_rad, real[::1] grad_cov,
                   real[:, :, :, ::1] gR_buf, real[:, :, ::1] gt_buf,
                   real[:, :, ::1] gs_buf, real[:, :, ::1] gva_buf,
                   real[:, :, ::1] gvc_buf,
                   real[:, ::1] g_o, real[:, ::1] g_d):
    """Adjoint pass. Buffers are (n_buckets, ...) partitioned gradient
    copies merged by the caller in bucket order; rays map to buckets by a
    fixed static split so the reduction order does not depend on the
    machine's thread count."""
    cdef int N = o.shape[0]
    cdef int P = tr.shape[0]
    cdef int M = left.shape[0]
    cdef int D = <int>round((<double>va.shape[1]) ** (1.0 / 3.0))
    while D * D * D < va.shape[1]:
        D += 1
    cdef int nbuck = gva_buf.shape[0]
    cdef cnp.ndarray sinv_arr = np.ascontiguousarray(1.0 / np.asarray(sc))
    cdef real[:, ::1] sinv = sinv_arr
    cdef int chunk = (N + nbuck - 1) // nbuck
    cdef int[:, ::1] ws_prim = np.empty((nbuck, P), dtype=np.int32)
    cdef int[:, ::1] ws_ax0 = np.empty((nbuck, P), dtype=np.int32)
    cdef int[:, ::1] ws_ax1 = np.empty((nbuck, P), dtype=np.int32)
    cdef int[:, ::1] ws_perm = np.empty((nbuck, P), dtype=np.int32)
    cdef int[:, ::1] ws_bsrc = np.empty((nbuck, 2 * P + 2), dtype=np.int32)
    cdef int[:, ::1] ws_hid = np.empty((nbuck, M + 2), dtype=np.int32)
    cdef double[:, ::1] ws_ht = np.empty((nbuck, M + 2), dtype=np.float64)
    cdef int[:, ::1] ws_sti = np.empty((nbuck, 4 * max_steps + 4), dtype=np.int32)
    cdef cnp.dtype dt_np = np.asarray(sc).dtype
    cdef real[:, ::1] ws_t0 = np.empty((nbuck, P), dtype=dt_np)
    cdef real[:, ::1] ws_t1 = np.empty((nbuck, P), dtype=dt_np)
    cdef real[:, ::1] ws_bp = np.empty((nbuck, 2 * P + 2), dtype=dt_np)
    cdef real[:, ::1] ws_st = np.empty((nbuck, 7 * max_steps + 7), dtype=dt_np)
    cdef int bucket, r, lo_r, hi_r
    with nogil:
        for bucket in prange(nbuck, num_threads=num_threads, schedule='static'):
            lo_r = bucket * chunk
            hi_r = lo_r + chunk
            if hi_r > N:
                hi_r = N
            for r in range(lo_r, hi_r):
                _march_adj_one(&o[r, 0], &d[r, 0], tmin, tmax, dt,
                               &Rc[0, 0, 0], &tr[0, 0], &sinv[0, 0],
                               &va[0, 0], &vc[0, 0],
                               &bbmin[0, 0], &bbmax[0, 0], &left[0], &right[0], &order[0],
                               use_bvh, P, D, va.shape[1], max_steps,
                               &grad_rad[r, 0], grad_cov[r],
                               &ws_prim[bucket, 0], &ws_t0[bucket, 0], &ws_t1[bucket, 0],
                               &ws_ax0[bucket, 0], &ws_ax1[bucket, 0], &ws_perm[bucket, 0],
                               &ws_bp[bucket, 0], &ws_bsrc[bucket, 0],
                               &ws_ht[bucket, 0], &ws_hid[bucket, 0],
                               &ws_st[bucket, 0], &ws_sti[bucket, 0],
                               &gR_buf[bucket, 0, 0, 0], &gt_buf[bucket, 0, 0],
                               &gs_buf[bucket, 0, 0], &gva_buf[bucket, 0, 0],
                               &gvc_buf[bucket, 0, 0], &g_o[r, 0], &g_d[r, 0])
    return None


cdef inline void route_boundary(real gtau, int src,
                                const int* iprim, const real* it0, const real* it1,
                                const int* iax0, const int* iax1,
                                const real* Rc, const real* tr, const real* sinv,
                                const real* o, const real* d,
                                real* gR, real* gt, real* gs,
                                real* go, real* gd) nogil:
    """Chain d(loss)/d(span endpoint) into slab-test inputs.

    src encodes 2*interval_index + (0 entry | 1 exit)."""
    cdef int k = src >> 1
    cdef int axis
    cdef real tau
    if src & 1:
        axis = iax1[k]
        tau = it1[k]
    else:
        axis = iax0[k]
        tau = it0[k]
    if axis < 0:
        return  # clipped by tmin/tmax: constant
    cdef int p = iprim[k]
    cdef real si = sinv[3 * p + axis]
    cdef real ra = Rc[9 * p + 3 * axis]
    cdef real rb = Rc[9 * p + 3 * axis + 1]
    cdef real rc = Rc[9 * p + 3 * axis + 2]
    cdef real rel0 = o[0] - tr[3 * p]
    cdef real rel1 = o[1] - tr[3 * p + 1]
    cdef real rel2 = o[2] - tr[3 * p + 2]
    cdef real ol = (ra * rel0 + rb * rel1 + rc * rel2) * si
    cdef real dl = (ra * d[0] + rb * d[1] + rc * d[2]) * si
    if fabs(dl) < 1e-12:
        return
    # tau = (face - ol) / dl
    cdef real gol = -gtau / dl
    cdef real gdl = -gtau * tau / dl
    go[0] += gol * ra * si
    go[1] += gol * rb * si
    go[2] += gol * rc * si
    gt[3 * p] -= gol * ra * si
    gt[3 * p + 1] -= gol * rb * si
    gt[3 * p + 2] -= gol * rc * si
    gd[0] += gdl * ra * si
    gd[1] += gdl * rb * si
    gd[2] += gdl * rc * si
    gR[9 * p + 3 * axis] += (gol * rel0 + gdl * d[0]) * si
    gR[9 * p + 3 * axis + 1] += (gol * rel1 + gdl * d[1]) * si
    gR[9 * p + 3 * axis + 2] += (gol * rel2 + gdl * d[2]) * si
    # d(ol)/d(s_axis) = -ol/s ; d(dl)/d(s_axis) = -dl/s ; si = 1/s
    gs[3 * p + axis] -= (gol * ol + gdl * dl) * si


cdef void _march_adj_one(const real* o, const real* d, real tmin, real tmax, real dt,
                         const real* Rc, const real* tr, const real* sinv,
                         const real* va, const real* vc,
                         const double* bbmin, const double* bbmax,
                         const int* left, const int* right, const int* order,
                         int use_bvh, int P, int D, int vox, int max_steps,
                         const real* gI, real gA,
                         int* iprim, real* it0, real* it1, int* iax0, int* iax1,
                         int* perm, real* bp, int* bsrc,
                         double* heap_t, int* heap_id,
                         real* st, int* sti,
                         real* gR, real* gt, real* gs, real* gva, real* gvc,
                         real* go, real* gd) nogil:
    cdef RayState rs
    cdef int n = _trace_ray(o, d, tmin, tmax, dt, Rc, tr, sinv, va, vc,
                            bbmin, bbmax, left, right, order, use_bvh,
                            P, D, vox, max_steps,
                            iprim, it0, it1, iax0, iax1, perm, bp, bsrc,
                            heap_t, heap_id, &rs, 1, st, sti)
    cdef int nrec = rs.nrec
    cdef int saturated = rs.saturated
    # reverse sweep
    cdef real lam = gA
    cdef real g_alpha, dotIe, wgt, dLdt, dLdh, kfrac, ga_s, gb_s
    cdef real t, h, alpha, rem, ap
    cdef real e0, e1, e2
    cdef real x[3]
    cdef real u[3]
    cdef real gu[3]
    cdef real cp[3]
    cdef real ge[3]
    cdef real gx[3]
    cdef real rel[3]
    cdef int rec, i, k, kk, p, is_sat
    cdef real gap, gcomp
    for rec in range(nrec - 1, -1, -1):
        t = st[7 * rec]
        h = st[7 * rec + 1]
        alpha = st[7 * rec + 2]
        e0 = st[7 * rec + 3]
        e1 = st[7 * rec + 4]
        e2 = st[7 * rec + 5]
        rem = 1.0 - st[7 * rec + 6]
        is_sat = saturated and rec == nrec - 1
        if is_sat:
            dotIe = gI[0] * e0 + gI[1] * e1 + gI[2] * e2
            wgt = rem / alpha
            ge[0] = gI[0] * wgt
            ge[1] = gI[1] * wgt
            ge[2] = gI[2] * wgt
            g_alpha = -dotIe * rem / (alpha * alpha)
            lam = -dotIe / alpha
            dLdh = 0.0
        else:
            ge[0] = gI[0] * h
            ge[1] = gI[1] * h
            ge[2] = gI[2] * h
            g_alpha = lam * h
            dLdh = lam * alpha + gI[0] * e0 + gI[1] * e1 + gI[2] * e2
        # distribute to the primitives active at this sample
        x[0] = o[0] + t * d[0]
        x[1] = o[1] + t * d[1]
        x[2] = o[2] + t * d[2]
        gx[0] = 0.0; gx[1] = 0.0; gx[2] = 0.0
        for kk in range(n):
            k = perm[kk]
            if it0[k] <= t and t < it1[k]:
                p = iprim[k]
                local_coords(x, Rc + 9 * p, tr + 3 * p, sinv + 3 * p, u)
                trilinear(va + vox * p, vc + 3 * vox * p, D, u, &ap, cp)
                # alpha += a_p ; e += a_p * c_p
                gap = g_alpha + ge[0] * cp[0] + ge[1] * cp[1] + ge[2] * cp[2]
                cp[0] = ge[0] * ap
                cp[1] = ge[1] * ap
                cp[2] = ge[2] * ap
                trilinear_adj(va + vox * p, vc + 3 * vox * p, D, u,
                              gap, cp, gva + vox * p, gvc + 3 * vox * p, gu)
                rel[0] = x[0] - tr[3 * p]
                rel[1] = x[1] - tr[3 * p + 1]
                rel[2] = x[2] - tr[3 * p + 2]
                for i in range(3):
                    # u_i = sinv_i * sum_a Rc[i,a] * rel_a
                    gcomp = gu[i] * sinv[3 * p + i]
                    gx[0] += gcomp * Rc[9 * p + 3 * i]
                    gx[1] += gcomp * Rc[9 * p + 3 * i + 1]
                    gx[2] += gcomp * Rc[9 * p + 3 * i + 2]
                    gt[3 * p] -= gcomp * Rc[9 * p + 3 * i]
                    gt[3 * p + 1] -= gcomp * Rc[9 * p + 3 * i + 1]
                    gt[3 * p + 2] -= gcomp * Rc[9 * p + 3 * i + 2]
                    gR[9 * p + 3 * i] += gcomp * rel[0]
                    gR[9 * p + 3 * i + 1] += gcomp * rel[1]
                    gR[9 * p + 3 * i + 2] += gcomp * rel[2]
                    gs[3 * p + i] -= gu[i] * u[i] * sinv[3 * p + i]
        go[0] += gx[0]
        go[1] += gx[1]
        go[2] += gx[2]
        gd[0] += gx[0] * t
        gd[1] += gx[1] * t
        gd[2] += gx[2] * t
        # schedule adjoint: t = a + (step + 0.5) * h, h = (b - a) / n_span
        dLdt = gx[0] * d[0] + gx[1] * d[1] + gx[2] * d[2]
        kfrac = (sti[4 * rec] + 0.5) / sti[4 * rec + 1]
        ga_s = dLdt * (1.0 - kfrac) + dLdh * (-1.0 / sti[4 * rec + 1])
        gb_s = dLdt * kfrac + dLdh * (1.0 / sti[4 * rec + 1])
        route_boundary(ga_s, sti[4 * rec + 2], iprim, it0, it1, iax0, iax1,
                       Rc, tr, sinv, o, d, gR, gt, gs, go, gd)
        route_boundary(gb_s, sti[4 * rec + 3], iprim, it0, it1, iax0, iax1,
                       Rc, tr, sinv, o, d, gR, gt, gs, go, gd)
