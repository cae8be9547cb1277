"""Numba kernels for the adjacency walk, compositing and its adjoint.

Gradients are accumulated into a fixed number of pixel chunks and reduced in
chunk order, so results do not depend on the thread count.
"""

import math

import numpy as np
from numba import njit, prange

N_CHUNKS = 8
T_MIN = 1e-4
GRAD_EPS = 1e-12
MAX_ZERO_STEPS = 64

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


@njit(cache=True)
def sh_basis(d, degree, out):
    out[0] = SH_C0
    if degree >= 1:
        x, y, z = d[0], d[1], d[2]
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
        if degree >= 2:
            out[4] = SH_C2[0] * x * y
            out[5] = SH_C2[1] * y * z
            out[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y)
            out[7] = SH_C2[3] * x * z
            out[8] = SH_C2[4] * (x * x - y * y)


@njit(cache=True)
def softplus(x):
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


@njit(cache=True)
def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def log_alpha_ratio(f_in, f_out, s):
    """log(Phi(f_out) / Phi(f_in)) for the logistic CDF of sharpness s."""
    return softplus(-s * f_in) - softplus(-s * f_out)


@njit(cache=True)
def segment_alpha(f_in, f_out, s):
    if f_out >= f_in:
        return 0.0
    a = -math.expm1(log_alpha_ratio(f_in, f_out, s))
    return a if a > 0.0 else 0.0


@njit(cache=True)
def _lam(A, k, i, x0, x1, x2):
    return A[k, i, 0] * x0 + A[k, i, 1] * x1 + A[k, i, 2] * x2 + A[k, i, 3]


@njit(cache=True)
def locate_points(pts, A, nbr, tol):
    n = pts.shape[0]
    m = A.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    tet = 0
    for p in range(n):
        if tet < 0:
            tet = 0
        steps = 0
        while True:
            worst = 0
            wv = 1e300
            for i in range(4):
                lv = _lam(A, tet, i, pts[p, 0], pts[p, 1], pts[p, 2])
                if lv < wv:
                    wv = lv
                    worst = i
            if wv >= -tol:
                out[p] = tet
                break
            nxt = nbr[tet, worst]
            if nxt < 0:
                out[p] = -1
                tet = 0
                break
            tet = nxt
            steps += 1
            if steps > 4 * m + 16:
                # visibility walks terminate on Delaunay complexes; scan as a fallback
                out[p] = -1
                for t in range(m):
                    ok = True
                    for i in range(4):
                        if _lam(A, t, i, pts[p, 0], pts[p, 1], pts[p, 2]) < -tol:
                            ok = False
                            break
                    if ok:
                        out[p] = t
                        break
                tet = max(out[p], 0)
                break
    return out


@njit(cache=True)
def enter_hull(o, d, A, hull, start_tet):
    """First tet along the ray: the origin's tet when inside, else the
    nearest hull face hit.  Returns (tet, t, entry face)."""
    if start_tet >= 0:
        return start_tet, 0.0, -1
    best_t = 1e300
    best_k = -1
    best_i = -1
    for h in range(hull.shape[0]):
        k = hull[h, 0]
        i = hull[h, 1]
        r = A[k, i, 0] * d[0] + A[k, i, 1] * d[1] + A[k, i, 2] * d[2]
        if r <= 0.0:
            continue
        t = -_lam(A, k, i, o[0], o[1], o[2]) / r
        if t < 0.0 or t >= best_t:
            continue
        x0 = o[0] + t * d[0]
        x1 = o[1] + t * d[1]
        x2 = o[2] + t * d[2]
        ok = True
        for j in range(4):
            if j != i and _lam(A, k, j, x0, x1, x2) < -1e-9:
                ok = False
                break
        if ok:
            best_t = t
            best_k = k
            best_i = i
    return best_k, best_t, best_i


@njit(cache=True)
def exit_face(o, d, A, k, entry, t_cur):
    best = 1e300
    face = -1
    for i in range(4):
        if i == entry:
            continue
        r = A[k, i, 0] * d[0] + A[k, i, 1] * d[1] + A[k, i, 2] * d[2]
        if r < 0.0:
            lv = _lam(A, k, i, o[0], o[1], o[2]) + t_cur * r
            if lv < 0.0:
                lv = 0.0
            tt = t_cur - lv / r
            if tt < best:
                best = tt
                face = i
    return best, face


@njit(cache=True)
def walk_ray(o, d, A, nbr, nbr_face, hull, start_tet, cap, stop, out_tet, out_tin, out_tout):
    """Fill segment buffers with up to ``stop`` steps (all when ``stop`` < 0).
    Returns the step count, or -1 on a stall or overflow."""
    k, t, entry = enter_hull(o, d, A, hull, start_tet)
    n = 0
    zero = 0
    while k >= 0:
        if n == stop:
            break
        if n >= cap:
            return -1
        t_out, face = exit_face(o, d, A, k, entry, t)
        if face < 0:
            return -1
        out_tet[n] = k
        out_tin[n] = t
        out_tout[n] = t_out
        n += 1
        if t_out <= t:
            zero += 1
            if zero > MAX_ZERO_STEPS:
                return -1
        else:
            zero = 0
        nk = nbr[k, face]
        if nk < 0:
            break
        entry = nbr_face[k, face]
        k = nk
        t = t_out
    return n


@njit(cache=True)
def offset_origin(o, d, scale):
    # deterministic nudge orthogonal to d
    ax, ay, az = 0.5773502691896258, 0.5773502691896258, -0.5773502691896258
    cx = d[1] * az - d[2] * ay
    cy = d[2] * ax - d[0] * az
    cz = d[0] * ay - d[1] * ax
    nrm = math.sqrt(cx * cx + cy * cy + cz * cz)
    if nrm < 1e-6:
        cx, cy, cz = d[1], d[2] - d[0], -d[1]
        nrm = math.sqrt(cx * cx + cy * cy + cz * cz)
    q = np.empty(3)
    q[0] = o[0] + scale * cx / nrm
    q[1] = o[1] + scale * cy / nrm
    q[2] = o[2] + scale * cz / nrm
    return q


@njit(cache=True)
def trace(o, d, A, nbr, nbr_face, hull, start_tet, cap):
    """Single-ray walk with one deterministic re-trace on stall."""
    bt = np.empty(cap, dtype=np.int64)
    bi = np.empty(cap)
    bo = np.empty(cap)
    n = walk_ray(o, d, A, nbr, nbr_face, hull, start_tet, cap, -1, bt, bi, bo)
    used = o.copy()
    if n < 0:
        used = offset_origin(o, d, 1e-12)
        n = walk_ray(used, d, A, nbr, nbr_face, hull, start_tet, cap, -1, bt, bi, bo)
    return bt[:max(n, 0)], bi[:max(n, 0)], bo[:max(n, 0)], n, used


@njit(cache=True)
def _chunk_bounds(c, n_pix, n_chunks):
    lo = (c * n_pix) // n_chunks
    hi = ((c + 1) * n_pix) // n_chunks
    return lo, hi


@njit(cache=True)
def _endpoint_color(k, o, d, t, c0, G, O, ch):
    px = o[0] + t * d[0] - O[k, 0]
    py = o[1] + t * d[1] - O[k, 1]
    pz = o[2] + t * d[2] - O[k, 2]
    return c0[ch] + G[k, ch, 0] * px + G[k, ch, 1] * py + G[k, ch, 2] * pz


@njit(cache=True)
def _base_color(k, sh, Y, nb, out_c0, out_x):
    for ch in range(3):
        x = 0.0
        for b in range(nb):
            x += sh[k, ch, b] * Y[b]
        out_x[ch] = x
        out_c0[ch] = softplus(x)


@njit(cache=True)
def _segment_sdf(k, tets, A, sdf, o, d, t0, t1):
    f0 = 0.0
    f1 = 0.0
    for j in range(4):
        fj = sdf[tets[k, j]]
        f0 += _lam(A, k, j, o[0] + t0 * d[0], o[1] + t0 * d[1], o[2] + t0 * d[2]) * fj
        f1 += _lam(A, k, j, o[0] + t1 * d[0], o[1] + t1 * d[1], o[2] + t1 * d[2]) * fj
    return f0, f1


@njit(cache=True)
def _forward_pixel(p, o, d, cosz, start_tet, A, nbr, nbr_face, hull, tets, sdf, sh, Y, nb,
                   G, O, tnorm, s, bg, cull, max_steps, want_peak, c, peak, c0, xs,
                   color, depth, normal, normal_len, opacity, steps,
                   m_depth, m_normal, m_tet):
    """Walk and composite one ray; returns False on a stall."""
    k, t, entry = enter_hull(o, d, A, hull, start_tet)
    T = 1.0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    dep = 0.0
    nx = 0.0
    ny = 0.0
    nz = 0.0
    done = False
    hit = False
    n = 0
    zero = 0
    m_tet[p] = -1
    m_depth[p] = 0.0
    for ax in range(3):
        m_normal[p, ax] = 0.0
    while k >= 0 and not (done and hit):
        if n >= max_steps:
            return False
        t1, face = exit_face(o, d, A, k, entry, t)
        if face < 0:
            return False
        n += 1
        t0 = t
        if t1 <= t0:
            zero += 1
            if zero > MAX_ZERO_STEPS:
                return False
        else:
            zero = 0
            f0, f1 = _segment_sdf(k, tets, A, sdf, o, d, t0, t1)
            if not done and not cull[k]:
                a = segment_alpha(f0, f1, s)
                w = T * a
                if w > 0.0:
                    _base_color(k, sh, Y, nb, c0, xs)
                    v0 = 0.5 * (max(_endpoint_color(k, o, d, t0, c0, G, O, 0), 0.0)
                                + max(_endpoint_color(k, o, d, t1, c0, G, O, 0), 0.0))
                    v1 = 0.5 * (max(_endpoint_color(k, o, d, t0, c0, G, O, 1), 0.0)
                                + max(_endpoint_color(k, o, d, t1, c0, G, O, 1), 0.0))
                    v2 = 0.5 * (max(_endpoint_color(k, o, d, t0, c0, G, O, 2), 0.0)
                                + max(_endpoint_color(k, o, d, t1, c0, G, O, 2), 0.0))
                    cr += w * v0
                    cg += w * v1
                    cb += w * v2
                    dep += w * 0.5 * (t0 + t1)
                    nx += w * tnorm[k, 0]
                    ny += w * tnorm[k, 1]
                    nz += w * tnorm[k, 2]
                    if want_peak and w > peak[c, k]:
                        peak[c, k] = w
                T *= 1.0 - a
                if T < T_MIN:
                    done = True
            if not hit and ((f0 < 0.0) != (f1 < 0.0)):
                hit = True
                u = f0 / (f0 - f1)
                m_depth[p] = (t0 + u * (t1 - t0)) * cosz
                m_tet[p] = k
                for ax in range(3):
                    m_normal[p, ax] = tnorm[k, ax]
        nk = nbr[k, face]
        if nk < 0:
            break
        entry = nbr_face[k, face]
        k = nk
        t = t1
    steps[p] = n
    color[p, 0] = cr + T * bg[0]
    color[p, 1] = cg + T * bg[1]
    color[p, 2] = cb + T * bg[2]
    depth[p] = dep * cosz
    nn = math.sqrt(nx * nx + ny * ny + nz * nz)
    normal_len[p] = nn
    for ax in range(3):
        normal[p, ax] = 0.0
    if nn > GRAD_EPS:
        normal[p, 0] = nx / nn
        normal[p, 1] = ny / nn
        normal[p, 2] = nz / nn
    opacity[p] = 1.0 - T
    return True


@njit(parallel=True, cache=True)
def render_forward(origin, dirs, cosz, start_tet, A, nbr, nbr_face, hull, tets,
                   sdf, sh, degree, G, O, tnorm, s, bg, cull, max_steps, want_peak):
    n_pix = dirs.shape[0]
    m = A.shape[0]
    nb = sh.shape[2]
    color = np.zeros((n_pix, 3))
    depth = np.zeros(n_pix)
    normal = np.zeros((n_pix, 3))
    normal_len = np.zeros(n_pix)
    opacity = np.zeros(n_pix)
    steps = np.zeros(n_pix, dtype=np.int64)
    status = np.zeros(n_pix, dtype=np.int64)
    m_depth = np.zeros(n_pix)
    m_normal = np.zeros((n_pix, 3))
    m_tet = np.full(n_pix, -1, dtype=np.int64)
    peak = np.zeros((N_CHUNKS if want_peak else 1, m if want_peak else 1))
    for c in prange(N_CHUNKS):
        lo, hi = _chunk_bounds(c, n_pix, N_CHUNKS)
        Y = np.zeros(9)
        c0 = np.zeros(3)
        xs = np.zeros(3)
        for p in range(lo, hi):
            d = dirs[p]
            sh_basis(d, degree, Y)
            ok = _forward_pixel(p, origin, d, cosz[p], start_tet, A, nbr, nbr_face, hull, tets,
                                sdf, sh, Y, nb, G, O, tnorm, s, bg, cull, max_steps, want_peak,
                                c, peak, c0, xs, color, depth, normal, normal_len, opacity,
                                steps, m_depth, m_normal, m_tet)
            if not ok:
                o2 = offset_origin(origin, d, 1e-12)
                ok = _forward_pixel(p, o2, d, cosz[p], start_tet, A, nbr, nbr_face, hull,
                                    tets, sdf, sh, Y, nb, G, O, tnorm, s, bg, cull, max_steps,
                                    want_peak, c, peak, c0, xs, color, depth, normal,
                                    normal_len, opacity, steps, m_depth, m_normal, m_tet)
                status[p] = 1 if ok else 2
                if not ok:
                    steps[p] = 0
                    for ax in range(3):
                        color[p, ax] = bg[ax]
    return (color, depth, normal, normal_len, opacity, steps, status,
            m_depth, m_normal, m_tet, peak)


@njit(cache=True)
def _scatter_f(k, tets, A, o, d, t, g, dsdf, c):
    for j in range(4):
        lj = _lam(A, k, j, o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2])
        dsdf[c, tets[k, j]] += g * lj


@njit(cache=True)
def _scatter_normal(k, tets, A, tgrad, tnorm, gx, gy, gz, dsdf, c):
    gl = math.sqrt(tgrad[k, 0] ** 2 + tgrad[k, 1] ** 2 + tgrad[k, 2] ** 2)
    if gl < GRAD_EPS:
        return
    nx, ny, nz = tnorm[k, 0], tnorm[k, 1], tnorm[k, 2]
    dot = nx * gx + ny * gy + nz * gz
    vx = (gx - dot * nx) / gl
    vy = (gy - dot * ny) / gl
    vz = (gz - dot * nz) / gl
    for j in range(4):
        dsdf[c, tets[k, j]] += A[k, j, 0] * vx + A[k, j, 1] * vy + A[k, j, 2] * vz


@njit(parallel=True, cache=True)
def render_backward(origin, dirs, cosz, start_tet, A, nbr, nbr_face, hull, tets,
                    sdf, sh, degree, G, O, tgrad, tnorm, s, bg, cull, steps, status,
                    normal_len, out_normal, m_tet,
                    g_color, g_depth, g_normal, g_opacity, g_mdepth, g_mnormal,
                    residual, want_stats):
    n_pix = dirs.shape[0]
    m = A.shape[0]
    nv = sdf.shape[0]
    nb = sh.shape[2]
    dsdf = np.zeros((N_CHUNKS, nv))
    dsh = np.zeros((N_CHUNKS, m, 3, nb))
    dG = np.zeros((N_CHUNKS, m, 3, 3))
    dlogs = np.zeros(N_CHUNKS)
    stats = np.zeros((N_CHUNKS if want_stats else 1, m if want_stats else 1, 6))
    cap = 1
    for p in range(n_pix):
        cap = max(cap, steps[p])
    for c in prange(N_CHUNKS):
        lo, hi = _chunk_bounds(c, n_pix, N_CHUNKS)
        Y = np.zeros(9)
        c0 = np.zeros(3)
        xs = np.zeros(3)
        gv = np.zeros(8)
        Q = np.zeros(8)
        v = np.zeros(8)
        ca = np.zeros(3)
        cc = np.zeros(3)
        bt = np.empty(cap, dtype=np.int64)
        bi = np.empty(cap)
        bo = np.empty(cap)
        seg_k = np.empty(cap, dtype=np.int64)
        seg_a = np.empty(cap)
        seg_T = np.empty(cap)
        seg_f0 = np.empty(cap)
        seg_f1 = np.empty(cap)
        seg_t0 = np.empty(cap)
        seg_t1 = np.empty(cap)
        for p in range(lo, hi):
            n_steps = steps[p]
            if n_steps == 0 or status[p] == 2:
                continue
            d = dirs[p]
            o = origin
            if status[p] == 1:
                o = offset_origin(origin, d, 1e-12)
            sh_basis(d, degree, Y)
            n = walk_ray(o, d, A, nbr, nbr_face, hull, start_tet, cap, n_steps, bt, bi, bo)
            if n < 0:
                continue
            # forward replay of the composited prefix
            K = 0
            T = 1.0
            hit_q = -1
            hf0 = 0.0
            hf1 = 0.0
            done = False
            for q in range(n):
                k = bt[q]
                t0 = bi[q]
                t1 = bo[q]
                if t1 <= t0:
                    continue
                f0, f1 = _segment_sdf(k, tets, A, sdf, o, d, t0, t1)
                if not done and not cull[k]:
                    a = segment_alpha(f0, f1, s)
                    seg_k[K] = k
                    seg_a[K] = a
                    seg_T[K] = T
                    seg_f0[K] = f0
                    seg_f1[K] = f1
                    seg_t0[K] = t0
                    seg_t1[K] = t1
                    K += 1
                    T *= 1.0 - a
                    if T < T_MIN:
                        done = True
                if hit_q < 0 and ((f0 < 0.0) != (f1 < 0.0)):
                    hit_q = q
                    hf0 = f0
                    hf1 = f1
            # upstream gradient per composited channel
            for ch in range(3):
                gv[ch] = g_color[p, ch]
            gv[3] = g_depth[p] * cosz[p]
            nl = normal_len[p]
            if nl > GRAD_EPS:
                dot = (out_normal[p, 0] * g_normal[p, 0] + out_normal[p, 1] * g_normal[p, 1]
                       + out_normal[p, 2] * g_normal[p, 2])
                for ax in range(3):
                    gv[4 + ax] = (g_normal[p, ax] - dot * out_normal[p, ax]) / nl
            else:
                for ax in range(3):
                    gv[4 + ax] = 0.0
            gv[7] = g_opacity[p]
            for ch in range(8):
                Q[ch] = 0.0
            for ch in range(3):
                Q[ch] = bg[ch]
            r = residual[p]
            for kk in range(K - 1, -1, -1):
                k = seg_k[kk]
                a = seg_a[kk]
                Tk = seg_T[kk]
                w = Tk * a
                t0 = seg_t0[kk]
                t1 = seg_t1[kk]
                f0 = seg_f0[kk]
                f1 = seg_f1[kk]
                _base_color(k, sh, Y, nb, c0, xs)
                for ch in range(3):
                    ca[ch] = _endpoint_color(k, o, d, t0, c0, G, O, ch)
                    cc[ch] = _endpoint_color(k, o, d, t1, c0, G, O, ch)
                    v[ch] = 0.5 * (max(ca[ch], 0.0) + max(cc[ch], 0.0))
                v[3] = 0.5 * (t0 + t1)
                for ax in range(3):
                    v[4 + ax] = tnorm[k, ax]
                v[7] = 1.0
                dl_da = 0.0
                for ch in range(8):
                    dl_da += gv[ch] * (v[ch] - Q[ch])
                dl_da *= Tk
                for ch in range(8):
                    Q[ch] = a * v[ch] + (1.0 - a) * Q[ch]
                if w > 0.0:
                    for ch in range(3):
                        gc = 0.5 * w * gv[ch]
                        if gc == 0.0:
                            continue
                        sg = sigmoid(xs[ch])
                        for e in range(2):
                            ce = ca[ch] if e == 0 else cc[ch]
                            if ce <= 0.0:
                                continue
                            te = t0 if e == 0 else t1
                            for b in range(nb):
                                dsh[c, k, ch, b] += gc * sg * Y[b]
                            dG[c, k, ch, 0] += gc * (o[0] + te * d[0] - O[k, 0])
                            dG[c, k, ch, 1] += gc * (o[1] + te * d[1] - O[k, 1])
                            dG[c, k, ch, 2] += gc * (o[2] + te * d[2] - O[k, 2])
                    _scatter_normal(k, tets, A, tgrad, tnorm, w * gv[4], w * gv[5], w * gv[6],
                                    dsdf, c)
                    if want_stats:
                        stats[c, k, 0] += w * r
                        stats[c, k, 1] += w * r * r
                        stats[c, k, 2] += w
                        stats[c, k, 3] += w * d[0]
                        stats[c, k, 4] += w * d[1]
                        stats[c, k, 5] += w * d[2]
                if a > 0.0 and dl_da != 0.0:
                    lr = log_alpha_ratio(f0, f1, s)
                    g_lr = -dl_da * math.exp(lr)
                    s0 = sigmoid(-s * f0)
                    s1 = sigmoid(-s * f1)
                    _scatter_f(k, tets, A, o, d, t0, g_lr * (-s * s0), dsdf, c)
                    _scatter_f(k, tets, A, o, d, t1, g_lr * (s * s1), dsdf, c)
                    dlogs[c] += g_lr * (-f0 * s0 + f1 * s1) * s
            # zero-crossing (mesh) maps
            if hit_q >= 0 and m_tet[p] >= 0:
                k = bt[hit_q]
                t0 = bi[hit_q]
                t1 = bo[hit_q]
                gdm = g_mdepth[p] * cosz[p]
                if gdm != 0.0:
                    den = hf0 - hf1
                    du0 = -hf1 / (den * den)
                    du1 = hf0 / (den * den)
                    _scatter_f(k, tets, A, o, d, t0, gdm * (t1 - t0) * du0, dsdf, c)
                    _scatter_f(k, tets, A, o, d, t1, gdm * (t1 - t0) * du1, dsdf, c)
                _scatter_normal(k, tets, A, tgrad, tnorm, g_mnormal[p, 0], g_mnormal[p, 1],
                                g_mnormal[p, 2], dsdf, c)
    return dsdf, dsh, dG, dlogs, stats


@njit(cache=True)
def bin_triangles(x0, x1, y0, y1, width, height):
    """CSR lists of candidate triangles per pixel from inclusive pixel ranges."""
    n_pix = width * height
    count = np.zeros(n_pix + 1, dtype=np.int64)
    for t in range(x0.shape[0]):
        for r in range(y0[t], y1[t] + 1):
            for c in range(x0[t], x1[t] + 1):
                count[r * width + c + 1] += 1
    for p in range(n_pix):
        count[p + 1] += count[p]
    idx = np.empty(count[n_pix], dtype=np.int64)
    fill = count[:-1].copy()
    for t in range(x0.shape[0]):
        for r in range(y0[t], y1[t] + 1):
            for c in range(x0[t], x1[t] + 1):
                p = r * width + c
                idx[fill[p]] = t
                fill[p] += 1
    return count, idx


@njit(parallel=True, cache=True)
def cast_triangles(origin, dirs, cosz, a, b, c_, ptr, cand):
    """Closest watertight ray/triangle hit per ray over its candidate list."""
    n_pix = dirs.shape[0]
    depth = np.zeros(n_pix)
    tri = np.full(n_pix, -1, dtype=np.int64)
    tmin_all = np.full(n_pix, np.inf)
    for p in prange(n_pix):
        d = dirs[p]
        kz = 0
        if abs(d[1]) > abs(d[kz]):
            kz = 1
        if abs(d[2]) > abs(d[kz]):
            kz = 2
        kx = (kz + 1) % 3
        ky = (kx + 1) % 3
        if d[kz] < 0.0:
            kx, ky = ky, kx
        sx = d[kx] / d[kz]
        sy = d[ky] / d[kz]
        sz = 1.0 / d[kz]
        best = np.inf
        bi = -1
        for j in range(ptr[p], ptr[p + 1]):
            t = cand[j]
            ax_ = a[t, kx] - origin[kx]
            ay_ = a[t, ky] - origin[ky]
            az_ = a[t, kz] - origin[kz]
            bx_ = b[t, kx] - origin[kx]
            by_ = b[t, ky] - origin[ky]
            bz_ = b[t, kz] - origin[kz]
            cx_ = c_[t, kx] - origin[kx]
            cy_ = c_[t, ky] - origin[ky]
            cz_ = c_[t, kz] - origin[kz]
            Ax = ax_ - sx * az_
            Ay = ay_ - sy * az_
            Bx = bx_ - sx * bz_
            By = by_ - sy * bz_
            Cx = cx_ - sx * cz_
            Cy = cy_ - sy * cz_
            U = Cx * By - Cy * Bx
            V = Ax * Cy - Ay * Cx
            W = Bx * Ay - By * Ax
            if (U < 0.0 or V < 0.0 or W < 0.0) and (U > 0.0 or V > 0.0 or W > 0.0):
                continue
            det = U + V + W
            if det == 0.0:
                continue
            T = U * sz * az_ + V * sz * bz_ + W * sz * cz_
            tt = T / det
            if tt > 0.0 and (tt < best or (tt == best and t < bi)):
                best = tt
                bi = t
        tri[p] = bi
        if bi >= 0:
            tmin_all[p] = best
            depth[p] = best * cosz[p]
    return depth, tri, tmin_all
