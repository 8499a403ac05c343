"""Pure-numpy fallback for the march kernels.

Implements the same span-based discretization as the compiled extension
(midpoint samples per constant-overlap span, saturating accumulation,
left subgradient at the saturation kink), vectorized over the steps of
each ray, including the adjoint through the sample schedule. Much
slower than the extension; used when the build lacks the compiled
module and as a cross-check in the benchmark.
"""

from __future__ import annotations

import numpy as np

from .. import bvh as bvh_mod

AVAILABLE = True
NAME = "numpy"


def _obb_axes(o, d, R, tr, sc, tmin, tmax):
    """Slab test returning (hit, lo, hi, axis_lo, axis_hi); axes -1 if clipped."""
    ol = R.T @ (o - tr) / sc
    dl = R.T @ d / sc
    lo, hi = tmin, tmax
    alo = ahi = -1
    for i in range(3):
        if abs(dl[i]) < 1e-12:
            if ol[i] < -1.0 or ol[i] > 1.0:
                return False, 0.0, 0.0, -1, -1
            continue
        a = (-1.0 - ol[i]) / dl[i]
        b = (1.0 - ol[i]) / dl[i]
        if a > b:
            a, b = b, a
        if a > lo:
            lo, alo = a, i
        if b < hi:
            hi, ahi = b, i
        if lo >= hi:
            return False, 0.0, 0.0, -1, -1
    return True, lo, hi, alo, ahi


def _ray_intervals(o, d, tmin, tmax, R, tr, sc, tree, use_bvh):
    """Sorted (prim, t0, t1, ax0, ax1) records for one ray."""
    if use_bvh and tree is not None:
        cand = [p for p, _, _ in bvh_mod.query(tree, o, d, R, tr, sc, tmin, tmax)]
    else:
        cand = range(len(tr))
    out = []
    for p in cand:
        hit, lo, hi, a0, a1 = _obb_axes(o, d, R[p], tr[p], sc[p], tmin, tmax)
        if hit:
            out.append((int(p), lo, hi, a0, a1))
    out.sort(key=lambda r: (r[1], r[0]))
    return out


def _spans(iv, dt, max_steps):
    """Yield (a, h, n_steps, src_a, src_b) per marching span.

    Sources encode 2*interval_index + (0 enter | 1 exit)."""
    bps = []
    for k, (_, a, b, _, _) in enumerate(iv):
        bps.append((a, 2 * k))
        bps.append((b, 2 * k + 1))
    bps.sort(key=lambda x: x[0])
    total = 0
    for (a, sa), (b, sb) in zip(bps[:-1], bps[1:]):
        if b - a < 1e-9:
            continue
        mid = 0.5 * (a + b)
        if not any(t0 <= mid < t1 for _, t0, t1, _, _ in iv):
            continue
        n_full = max(1, int(np.ceil((b - a) / dt)))
        h = (b - a) / n_full
        n = n_full
        if total + n > max_steps:
            n = max_steps - total
            if n <= 0:
                return
        total += n
        yield a, h, n, n_full, sa, sb


def _trilinear(vol, u):
    """vol: (D,D,D) or (D,D,D,C); u: (S,3) in [-1,1]. Returns (S,) or (S,C)."""
    D = vol.shape[0]
    g = np.clip((u + 1.0) * 0.5 * (D - 1), 0, D - 1)
    i0 = np.minimum(g.astype(np.int64), D - 2)
    w = g - i0
    out = 0.0
    for cx in range(2):
        wx = w[:, 0] if cx else 1 - w[:, 0]
        for cy in range(2):
            wy = w[:, 1] if cy else 1 - w[:, 1]
            for cz in range(2):
                wz = w[:, 2] if cz else 1 - w[:, 2]
                wt = wx * wy * wz
                vals = vol[i0[:, 0] + cx, i0[:, 1] + cy, i0[:, 2] + cz]
                out = out + (wt[:, None] * vals if vals.ndim > 1 else wt * vals)
    return out


def _sample(x, ts, iv, R, tr, sc, va3, vc3):
    """Summed density/emission at samples x (S,3) over the ray's intervals."""
    S = len(x)
    alpha = np.zeros(S)
    e = np.zeros((S, 3))
    per_prim = []
    for p, t0, t1, _, _ in iv:
        m = (ts >= t0) & (ts < t1)
        if not m.any():
            continue
        u = ((x - tr[p]) @ R[p]) / sc[p]
        a = _trilinear(va3[p], u) * m
        c = _trilinear(vc3[p], u)
        alpha += a
        e += a[:, None] * c
        per_prim.append((p, m, u, a, c))
    return alpha, e, per_prim


def march_forward(o, d, tmin, tmax, dt, R, tr, sc, va, vc,
                  tree, use_bvh, max_steps, num_threads=1):
    """Returns (radiance (N,3), coverage (N,)) as float64 arrays."""
    N = len(o)
    P, vox = va.shape
    D = round(vox ** (1 / 3))
    va3 = va.reshape(P, D, D, D)
    vc3 = vc.reshape(P, D, D, D, 3)
    rad = np.zeros((N, 3))
    cov = np.zeros(N)
    for r in range(N):
        iv = _ray_intervals(o[r], d[r], tmin, tmax, R, tr, sc, tree, use_bvh)
        if not iv:
            continue
        A = 0.0
        I = np.zeros(3)
        for a, h, n, n_full, sa, sb in _spans(iv, dt, max_steps):
            ts = a + (np.arange(n) + 0.5) * h
            x = o[r][None, :] + ts[:, None] * d[r][None, :]
            alpha, e, _ = _sample(x, ts, iv, R, tr, sc, va3, vc3)
            q = alpha * h
            cums = A + np.cumsum(q)
            prev = np.concatenate([[A], cums[:-1]])
            sat = cums >= 1.0
            if sat.any():
                s = int(np.argmax(sat))
                I += (e[:s] * h).sum(axis=0)
                if alpha[s] > 0:
                    I += e[s] * min(h, (1.0 - prev[s]) / alpha[s])
                A = 1.0
                break
            I += (e * h).sum(axis=0)
            A = cums[-1]
        rad[r] = I
        cov[r] = min(A, 1.0)
    return rad, cov


def march_backward(o, d, tmin, tmax, dt, R, tr, sc, va, vc,
                   tree, use_bvh, max_steps, grad_rad, grad_cov, num_threads=1):
    """Adjoint of march_forward. Returns dict of gradients."""
    N = len(o)
    P, vox = va.shape
    D = round(vox ** (1 / 3))
    va3 = va.reshape(P, D, D, D)
    vc3 = vc.reshape(P, D, D, D, 3)
    gR = np.zeros_like(R)
    gt = np.zeros_like(tr)
    gs = np.zeros_like(sc)
    gva3 = np.zeros_like(va3)
    gvc3 = np.zeros_like(vc3)
    go = np.zeros_like(o)
    gd = np.zeros_like(d)

    def route(r, gtau, src, iv):
        k, end = src >> 1, src & 1
        p, t0, t1, a0, a1 = iv[k]
        axis = a1 if end else a0
        tau = t1 if end else t0
        if axis < 0:
            return
        col = R[p][:, axis]
        si = 1.0 / sc[p][axis]
        rel = o[r] - tr[p]
        ol = (col @ rel) * si
        dl = (col @ d[r]) * si
        if abs(dl) < 1e-12:
            return
        gol = -gtau / dl
        gdl = -gtau * tau / dl
        go[r] += gol * col * si
        gt[p] -= gol * col * si
        gd[r] += gdl * col * si
        gR[p][:, axis] += (gol * rel + gdl * d[r]) * si
        gs[p][axis] -= (gol * ol + gdl * dl) * si

    for r in range(N):
        iv = _ray_intervals(o[r], d[r], tmin, tmax, R, tr, sc, tree, use_bvh)
        if not iv:
            continue
        gI = grad_rad[r]
        gA = grad_cov[r]
        # forward replay, collecting per-span records
        recs = []
        A = 0.0
        strict_sat = False
        for a, h, n, n_full, sa, sb in _spans(iv, dt, max_steps):
            ts = a + (np.arange(n) + 0.5) * h
            x = o[r][None, :] + ts[:, None] * d[r][None, :]
            alpha, e, per_prim = _sample(x, ts, iv, R, tr, sc, va3, vc3)
            q = alpha * h
            cums = A + np.cumsum(q)
            prev = np.concatenate([[A], cums[:-1]])
            sat = cums >= 1.0
            stop = int(np.argmax(sat)) if sat.any() else n - 1
            keep = np.ones(n, dtype=bool)
            if sat.any():
                keep[stop + 1 :] = False
                strict_sat = prev[stop] + q[stop] > 1.0
            recs.append((ts, h, n_full, sa, sb, alpha, e, prev, per_prim, keep, stop))
            if sat.any():
                A = 1.0
                break
            A = cums[-1]
        # lambda (adjoint of accumulated coverage) is gA everywhere except
        # before a strictly saturated final step, where the radiance term
        # e*rem/alpha couples earlier coverage in.
        lam = gA
        if strict_sat:
            _, _, _, _, _, alpha_l, e_l, _, _, _, stop_l = recs[-1]
            lam = -(gI @ e_l[stop_l]) / alpha_l[stop_l]
        last = len(recs) - 1
        for ri, (ts, h, n_full, sa, sb, alpha, e, prev, per_prim, keep, stop) in enumerate(recs):
            n = len(ts)
            galpha = np.where(keep, lam * h, 0.0)
            ge = np.where(keep[:, None], gI[None, :] * h, 0.0)
            dLdh = np.where(keep, lam * alpha + e @ gI, 0.0)
            if strict_sat and ri == last:
                rem = 1.0 - prev[stop]
                ge[stop] = gI * (rem / alpha[stop])
                galpha[stop] = -(gI @ e[stop]) * rem / alpha[stop] ** 2
                dLdh[stop] = 0.0
            gx = np.zeros((n, 3))
            for p, m, u, a_s, c_s in per_prim:
                ga_p = (galpha + (ge * c_s).sum(axis=1)) * m
                gc_p = ge * (a_s * m)[:, None]
                gu = _trilinear_adj(va3[p], vc3[p], u, ga_p, gc_p, gva3[p], gvc3[p])
                gu *= m[:, None]
                gcomp = gu / sc[p][None, :]
                gx += gcomp @ R[p].T
                gt[p] -= gcomp.sum(axis=0) @ R[p].T
                rel = o[r][None, :] + ts[:, None] * d[r][None, :] - tr[p][None, :]
                gR[p] += rel.T @ gcomp
                gs[p] -= (gu * u / sc[p][None, :]).sum(axis=0)
            go[r] += gx.sum(axis=0)
            gd[r] += (gx * ts[:, None]).sum(axis=0)
            # schedule adjoint
            dLdt = gx @ d[r]
            kfrac = (np.arange(n) + 0.5) / n_full
            ga_span = float((dLdt * (1 - kfrac)).sum() - dLdh.sum() / n_full)
            gb_span = float((dLdt * kfrac).sum() + dLdh.sum() / n_full)
            route(r, ga_span, sa, iv)
            route(r, gb_span, sb, iv)
    return {
        "R": gR, "t": gt, "s": gs,
        "va": gva3.reshape(P, vox), "vc": gvc3.reshape(P, vox * 3),
        "o": go, "d": gd,
    }


def _trilinear_adj(va3, vc3, u, ga, gc, gva3, gvc3):
    """Accumulate voxel grads; return du (S,3)."""
    D = va3.shape[0]
    graw = (u + 1.0) * 0.5 * (D - 1)
    inside = (graw >= 0) & (graw <= D - 1)
    g = np.clip(graw, 0, D - 1)
    i0 = np.minimum(g.astype(np.int64), D - 2)
    w = g - i0
    gu = np.zeros_like(u)
    for cx in range(2):
        wx = w[:, 0] if cx else 1 - w[:, 0]
        dwx = 1.0 if cx else -1.0
        for cy in range(2):
            wy = w[:, 1] if cy else 1 - w[:, 1]
            dwy = 1.0 if cy else -1.0
            for cz in range(2):
                wz = w[:, 2] if cz else 1 - w[:, 2]
                dwz = 1.0 if cz else -1.0
                wt = wx * wy * wz
                ix, iy, iz = i0[:, 0] + cx, i0[:, 1] + cy, i0[:, 2] + cz
                np.add.at(gva3, (ix, iy, iz), ga * wt)
                np.add.at(gvc3, (ix, iy, iz), gc * wt[:, None])
                corner = ga * va3[ix, iy, iz] + (gc * vc3[ix, iy, iz]).sum(axis=1)
                gu[:, 0] += corner * dwx * wy * wz
                gu[:, 1] += corner * wx * dwy * wz
                gu[:, 2] += corner * wx * wy * dwz
    return gu * (0.5 * (D - 1)) * inside
