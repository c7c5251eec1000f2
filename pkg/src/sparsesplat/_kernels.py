"""Tile kernels for forward compositing and its adjoint.

Every (tile, splat) pair owns one slot in the pair arrays, so tiles write
disjoint memory and the per-splat reduction happens afterwards in a fixed
order.  Results are therefore independent of the thread count.
"""
import numpy as np
from numba import config, njit, prange

# the bundled TBB is too old for numba; never try it first
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# gradient slot layout per pair
G_P, G_A0, G_A1, G_A2 = 0, 3, 6, 9
G_SU, G_SV, G_O, G_C = 12, 13, 14, 15
G_ABS, G_SUM = 18, 19
N_SLOTS = 21


@njit(cache=True, inline="always")
def _intersect(i, rx, ry, P, A0, A1, A2, SU, SV, near, cut2):
    """Local splat coordinates hit by the ray (rx, ry, 1); ok=False if culled."""
    nd = A2[i, 0] * rx + A2[i, 1] * ry + A2[i, 2]
    if abs(nd) < 1e-12:
        return False, 0.0, 0.0, 0.0, nd
    npd = A2[i, 0] * P[i, 0] + A2[i, 1] * P[i, 1] + A2[i, 2] * P[i, 2]
    lam = npd / nd
    if lam <= near:
        return False, 0.0, 0.0, lam, nd
    qx = lam * rx - P[i, 0]
    qy = lam * ry - P[i, 1]
    qz = lam - P[i, 2]
    s1 = (A0[i, 0] * qx + A0[i, 1] * qy + A0[i, 2] * qz) / SU[i]
    s2 = (A1[i, 0] * qx + A1[i, 1] * qy + A1[i, 2] * qz) / SV[i]
    if s1 * s1 + s2 * s2 > cut2:
        return False, s1, s2, lam, nd
    return True, s1, s2, lam, nd


@njit(cache=True)
def _spread(zb, wb, cnt, sabs, ssg):
    """Per-entry ``sum_v w_v |z_u - z_v|`` and ``sum_v w_v sign(z_u - z_v)``.

    Sorting turns the quadratic pair sum into prefix sums.  Returns the
    total ``sum_{u<v} w_u w_v |z_u - z_v|``.
    """
    order = np.argsort(zb[:cnt], kind="mergesort")
    wt = 0.0
    zt = 0.0
    for r in range(cnt):
        wt += wb[order[r]]
        zt += wb[order[r]] * zb[order[r]]
    wb_ = 0.0  # weight strictly before the current run of equal depths
    zw_ = 0.0
    total = 0.0
    r = 0
    while r < cnt:
        e = r
        z = zb[order[r]]
        wrun = 0.0
        while e < cnt and zb[order[e]] == z:
            wrun += wb[order[e]]
            e += 1
        wa = wt - wb_ - wrun
        za = zt - zw_ - wrun * z
        s = z * wb_ - zw_ + za - z * wa
        g = wb_ - wa
        for q in range(r, e):
            sabs[order[q]] = s
            ssg[order[q]] = g
        total += wrun * (z * wb_ - zw_)
        wb_ += wrun
        zw_ += wrun * z
        r = e
    return total


@njit(parallel=True, cache=True)
def forward_tiles(tile_start, pair_splat, tiles_x, tile, W, H, f, cx, cy,
                  P, A0, A1, A2, SU, SV, OP, COL, NRM, bg,
                  near, cut2, alpha_min, alpha_max, t_min,
                  out_color, out_depth, out_normal, out_alpha, out_dist, out_T,
                  pair_w, pair_cnt):
    ntiles = tile_start.shape[0] - 1
    for t in prange(ntiles):
        k0 = tile_start[t]
        k1 = tile_start[t + 1]
        tx = t % tiles_x
        ty = t // tiles_x
        n = k1 - k0
        zb = np.empty(max(n, 1))
        wb = np.empty(max(n, 1))
        sabs = np.empty(max(n, 1))
        ssg = np.empty(max(n, 1))
        for py in range(ty * tile, min(H, (ty + 1) * tile)):
            ry = (py - cy) / f
            for px in range(tx * tile, min(W, (tx + 1) * tile)):
                rx = (px - cx) / f
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                sz = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                acc = 0.0
                cnt = 0
                for k in range(k0, k1):
                    i = pair_splat[k]
                    ok, s1, s2, lam, nd = _intersect(i, rx, ry, P, A0, A1, A2, SU, SV, near, cut2)
                    if not ok:
                        continue
                    a = OP[i] * np.exp(-0.5 * (s1 * s1 + s2 * s2))
                    if a > alpha_max:
                        a = alpha_max
                    if a < alpha_min:
                        continue
                    w = a * T
                    c0 += w * COL[i, 0]
                    c1 += w * COL[i, 1]
                    c2 += w * COL[i, 2]
                    sz += w * lam
                    n0 += w * NRM[i, 0]
                    n1 += w * NRM[i, 1]
                    n2 += w * NRM[i, 2]
                    acc += w
                    pair_w[k] += w
                    pair_cnt[k] += 1
                    zb[cnt] = lam
                    wb[cnt] = w
                    cnt += 1
                    T *= 1.0 - a
                    if T < t_min:
                        break
                dist = _spread(zb, wb, cnt, sabs, ssg) if cnt > 1 else 0.0
                out_dist[py, px] = 2.0 * dist
                out_color[py, px, 0] = c0 + T * bg[0]
                out_color[py, px, 1] = c1 + T * bg[1]
                out_color[py, px, 2] = c2 + T * bg[2]
                out_alpha[py, px] = acc
                out_T[py, px] = T
                if acc > 0.0:
                    out_depth[py, px] = sz / acc
                    out_normal[py, px, 0] = n0 / acc
                    out_normal[py, px, 1] = n1 / acc
                    out_normal[py, px, 2] = n2 / acc
                else:
                    out_depth[py, px] = 0.0
                    out_normal[py, px, 0] = 0.0
                    out_normal[py, px, 1] = 0.0
                    out_normal[py, px, 2] = 0.0


@njit(parallel=True, cache=True)
def backward_tiles(tile_start, pair_splat, tiles_x, tile, W, H, f, cx, cy,
                   P, A0, A1, A2, SU, SV, OP, COL, NRM, bg,
                   near, cut2, alpha_min, alpha_max, t_min,
                   d_color, d_depth, d_normal, d_alpha, d_dist,
                   pair_g):
    ntiles = tile_start.shape[0] - 1
    for t in prange(ntiles):
        k0 = tile_start[t]
        k1 = tile_start[t + 1]
        tx = t % tiles_x
        ty = t // tiles_x
        n = max(k1 - k0, 1)
        kb = np.empty(n, dtype=np.int64)
        ab = np.empty(n)
        tb = np.empty(n)
        zb = np.empty(n)
        wb = np.empty(n)
        gb = np.empty(n)  # opacity * G before the clamp
        s1b = np.empty(n)
        s2b = np.empty(n)
        ndb = np.empty(n)
        clb = np.empty(n, dtype=np.bool_)
        gw = np.empty(n)
        sabs = np.zeros(n)
        ssg = np.zeros(n)
        for py in range(ty * tile, min(H, (ty + 1) * tile)):
            ry = (py - cy) / f
            for px in range(tx * tile, min(W, (tx + 1) * tile)):
                rx = (px - cx) / f
                dc0 = d_color[py, px, 0]
                dc1 = d_color[py, px, 1]
                dc2 = d_color[py, px, 2]
                dD = d_depth[py, px]
                dn0 = d_normal[py, px, 0]
                dn1 = d_normal[py, px, 1]
                dn2 = d_normal[py, px, 2]
                dA = d_alpha[py, px]
                dd = d_dist[py, px]
                if (dc0 == 0.0 and dc1 == 0.0 and dc2 == 0.0 and dD == 0.0 and dn0 == 0.0
                        and dn1 == 0.0 and dn2 == 0.0 and dA == 0.0 and dd == 0.0):
                    continue
                # replay the forward pass
                T = 1.0
                cnt = 0
                sz = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                acc = 0.0
                for k in range(k0, k1):
                    i = pair_splat[k]
                    ok, s1, s2, lam, nd = _intersect(i, rx, ry, P, A0, A1, A2, SU, SV, near, cut2)
                    if not ok:
                        continue
                    g = OP[i] * np.exp(-0.5 * (s1 * s1 + s2 * s2))
                    a = g
                    clamped = False
                    if a > alpha_max:
                        a = alpha_max
                        clamped = True
                    if a < alpha_min:
                        continue
                    w = a * T
                    kb[cnt] = k
                    ab[cnt] = a
                    tb[cnt] = T
                    zb[cnt] = lam
                    wb[cnt] = w
                    gb[cnt] = g
                    s1b[cnt] = s1
                    s2b[cnt] = s2
                    ndb[cnt] = nd
                    clb[cnt] = clamped
                    sz += w * lam
                    n0 += w * NRM[i, 0]
                    n1 += w * NRM[i, 1]
                    n2 += w * NRM[i, 2]
                    acc += w
                    cnt += 1
                    T *= 1.0 - a
                    if T < t_min:
                        break
                if cnt == 0:
                    continue
                Dm = sz / acc
                N0 = n0 / acc
                N1 = n1 / acc
                N2 = n2 / acc
                inv = 1.0 / acc
                if dd != 0.0:
                    if cnt > 1:
                        _spread(zb, wb, cnt, sabs, ssg)
                    else:
                        sabs[0] = 0.0
                        ssg[0] = 0.0
                # dL/dw_j with all per-splat features held fixed
                for u in range(cnt):
                    i = pair_splat[kb[u]]
                    val = dc0 * COL[i, 0] + dc1 * COL[i, 1] + dc2 * COL[i, 2] + dA
                    val += dD * (zb[u] - Dm) * inv
                    val += (dn0 * (NRM[i, 0] - N0) + dn1 * (NRM[i, 1] - N1)
                            + dn2 * (NRM[i, 2] - N2)) * inv
                    if dd != 0.0:
                        val += dd * 2.0 * sabs[u]
                    gw[u] = val
                S = (dc0 * bg[0] + dc1 * bg[1] + dc2 * bg[2]) * T
                for u in range(cnt - 1, -1, -1):
                    k = kb[u]
                    i = pair_splat[k]
                    a = ab[u]
                    w = wb[u]
                    g_alpha = gw[u] * tb[u] - S / (1.0 - a)
                    S += gw[u] * w
                    # depth of the intersection
                    g_lam = dD * w * inv
                    if dd != 0.0:
                        g_lam += dd * 2.0 * w * ssg[u]
                    # colour and normal
                    pair_g[k, G_C + 0] += dc0 * w
                    pair_g[k, G_C + 1] += dc1 * w
                    pair_g[k, G_C + 2] += dc2 * w
                    sgn = NRM[i, 0] * A2[i, 0] + NRM[i, 1] * A2[i, 1] + NRM[i, 2] * A2[i, 2]
                    wn = w * inv * sgn
                    pair_g[k, G_A2 + 0] += dn0 * wn
                    pair_g[k, G_A2 + 1] += dn1 * wn
                    pair_g[k, G_A2 + 2] += dn2 * wn
                    # falloff
                    g_s1 = 0.0
                    g_s2 = 0.0
                    if not clb[u]:
                        G = gb[u] / OP[i]
                        pair_g[k, G_O] += g_alpha * G
                        g_s1 = -g_alpha * gb[u] * s1b[u]
                        g_s2 = -g_alpha * gb[u] * s2b[u]
                    su = SU[i]
                    sv = SV[i]
                    pair_g[k, G_SU] += -g_s1 * s1b[u] / su
                    pair_g[k, G_SV] += -g_s2 * s2b[u] / sv
                    g_u1 = g_s1 / su
                    g_u2 = g_s2 / sv
                    lam = zb[u]
                    qx = lam * rx - P[i, 0]
                    qy = lam * ry - P[i, 1]
                    qz = lam - P[i, 2]
                    pair_g[k, G_A0 + 0] += g_u1 * qx
                    pair_g[k, G_A0 + 1] += g_u1 * qy
                    pair_g[k, G_A0 + 2] += g_u1 * qz
                    pair_g[k, G_A1 + 0] += g_u2 * qx
                    pair_g[k, G_A1 + 1] += g_u2 * qy
                    pair_g[k, G_A1 + 2] += g_u2 * qz
                    gq0 = g_u1 * A0[i, 0] + g_u2 * A1[i, 0]
                    gq1 = g_u1 * A0[i, 1] + g_u2 * A1[i, 1]
                    gq2 = g_u1 * A0[i, 2] + g_u2 * A1[i, 2]
                    g_lam += gq0 * rx + gq1 * ry + gq2
                    nd = ndb[u]
                    cl = g_lam / nd
                    gp0 = -gq0 + cl * A2[i, 0]
                    gp1 = -gq1 + cl * A2[i, 1]
                    gp2 = -gq2 + cl * A2[i, 2]
                    pair_g[k, G_P + 0] += gp0
                    pair_g[k, G_P + 1] += gp1
                    pair_g[k, G_P + 2] += gp2
                    pair_g[k, G_A2 + 0] += -cl * qx
                    pair_g[k, G_A2 + 1] += -cl * qy
                    pair_g[k, G_A2 + 2] += -cl * qz
                    # screen-space gradient of this pixel w.r.t. the projected centre
                    zc = P[i, 2] / f
                    gx = gp0 * zc
                    gy = gp1 * zc
                    pair_g[k, G_ABS] += np.sqrt(gx * gx + gy * gy)
                    pair_g[k, G_SUM + 0] += gx
                    pair_g[k, G_SUM + 1] += gy
