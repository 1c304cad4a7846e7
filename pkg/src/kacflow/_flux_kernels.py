"""Hot loops for flux construction, grid dynamics, Dirichlet forms, and
martingale compensators (numba-compiled when available).

Same conventions as the engine kernels: scalar/loop style, ``math`` only,
no RNG, so the compiled and interpreted paths agree bitwise.  All sphere
quadratures here mirror the array-level quadrature in ``grids`` (Gauss-
Legendre nodes are precomputed by the caller and passed in as the
transformed half-interval nodes/weights).
"""

import math

import numpy as np

from .accel import maybe_njit
from ._kernels import KIND_HARD_SPHERE, KIND_MAXWELL


@maybe_njit(cache=True)
def axis_index_scalar(x, v_max, h, n_cells):
    """Per-axis cell index; -1 outside the box; both edges closed.

    Computed from |x| and the sign bit so that x and -x always land in
    mirrored cells, bitwise (matches GridSpec.axis_index).
    """
    y = abs(x)
    if y > v_max:
        return -1
    if n_cells % 2 == 0:
        m = int(math.floor(y / h))
        if math.copysign(1.0, x) < 0.0:
            ix = n_cells // 2 - 1 - m
        else:
            ix = n_cells // 2 + m
    else:
        m = int(math.floor(y / h + 0.5))
        if math.copysign(1.0, x) < 0.0:
            ix = (n_cells - 1) // 2 - m
        else:
            ix = (n_cells - 1) // 2 + m
    if ix > n_cells - 1:
        ix = n_cells - 1
    if ix < 0:
        ix = 0
    return ix


@maybe_njit(cache=True)
def flat_index_scalar(i0, i1, i2, d, n_cells):
    """Flat cell index from per-axis indices; -1 if any axis overflows."""
    if i0 < 0 or i1 < 0:
        return -1
    if d == 3:
        if i2 < 0:
            return -1
        return (i0 * n_cells + i1) * n_cells + i2
    return i0 * n_cells + i1


@maybe_njit(cache=True)
def cell_of_scalar(x0, x1, x2, d, v_max, h, n_cells):
    i0 = axis_index_scalar(x0, v_max, h, n_cells)
    i1 = axis_index_scalar(x1, v_max, h, n_cells)
    i2 = axis_index_scalar(x2, v_max, h, n_cells) if d == 3 else 0
    return flat_index_scalar(i0, i1, i2, d, n_cells)


@maybe_njit(cache=True)
def azimuth_fill(n_phi, cp_t, sp_t):
    """Uniform azimuth cos/sin tables with the mirror pairing
    l -> (n_phi/2 - l) mod n_phi enforced bitwise: cos -> -cos, sin -> sin
    (n_phi even; matches grids.azimuth_tables)."""
    for l in range(n_phi):
        ang = 2.0 * math.pi * l / n_phi
        cp_t[l] = math.cos(ang)
        sp_t[l] = math.sin(ang)
    for l in range(n_phi):
        l2 = (n_phi // 2 - l) % n_phi
        if l2 > l:
            cp_t[l2] = -cp_t[l]
            sp_t[l2] = sp_t[l]
        elif l2 == l:
            cp_t[l] = 0.0


@maybe_njit(cache=True)
def stencil_factor(src, tgt, n):
    """Per-axis [1/4, 1/2, 1/4] smoothing factor from source cell ``src`` to
    target ``tgt``, renormalized where the stencil would leave the box (the
    smoothing operator is then exactly mass-preserving)."""
    delta = tgt - src
    if delta < -1 or delta > 1:
        return 0.0
    w = 0.5 if delta == 0 else 0.25
    tot = 1.0
    if src == 0:
        tot -= 0.25
    if src == n - 1:
        tot -= 0.25
    return w / tot


@maybe_njit(cache=True)
def fill_nodes(ux, uy, uz, speed, d, kind, b, gl_c, gl_w, n_phi, omg, bw):
    """Quadrature nodes and B-weights of int_{S^{d-1}} B(u, omega) domega.

    Hard sphere d=3: Gauss-Legendre in |cos theta| (gl_c in (0,1), gl_w the
    matching half-interval weights) mirrored over both hemispheres about
    u-hat, times a uniform even azimuth grid; sum of bw is exactly
    (kappa_3/2)|u| and the node set is invariant under u -> -u.  d=2: sine
    substitution per sign quadrant, sum exactly 2|u|.  Constant kernel:
    fixed isotropic grid (u-independent), sum exactly b |S^{d-1}|.
    Fills ``omg`` (K, d) and ``bw`` (K,); returns K.
    """
    if kind == KIND_MAXWELL:
        if d == 3:
            n_half = gl_c.shape[0]
            cp_t = np.empty(n_phi)
            sp_t = np.empty(n_phi)
            azimuth_fill(n_phi, cp_t, sp_t)
            k = 0
            for sgn in range(2):
                sg = 1.0 if sgn == 0 else -1.0
                for m in range(n_half):
                    c = gl_c[m]
                    st = math.sqrt(max(0.0, 1.0 - c * c))
                    for l in range(n_phi):
                        omg[k, 0] = st * cp_t[l]
                        omg[k, 1] = st * sp_t[l]
                        omg[k, 2] = sg * c
                        bw[k] = b * gl_w[m] * (2.0 * math.pi / n_phi)
                        k += 1
            return k
        k = 0
        for l in range(n_phi):
            th = 2.0 * math.pi * l / n_phi
            omg[k, 0] = math.cos(th)
            omg[k, 1] = math.sin(th)
            bw[k] = b * 2.0 * math.pi / n_phi
            k += 1
        return k
    # hard sphere
    ux_h = ux / speed
    uy_h = uy / speed
    if d == 3:
        uz_h = uz / speed
        ax, ay, az = abs(ux_h), abs(uy_h), abs(uz_h)
        if ax <= ay and ax <= az:
            e1x, e1y, e1z = 0.0, -uz_h, uy_h
        elif ay <= az:
            e1x, e1y, e1z = -uz_h, 0.0, ux_h
        else:
            e1x, e1y, e1z = -uy_h, ux_h, 0.0
        nrm = math.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
        e1x /= nrm
        e1y /= nrm
        e1z /= nrm
        e2x = uy_h * e1z - uz_h * e1y
        e2y = uz_h * e1x - ux_h * e1z
        e2z = ux_h * e1y - uy_h * e1x
        n_half = gl_c.shape[0]
        cp_t = np.empty(n_phi)
        sp_t = np.empty(n_phi)
        azimuth_fill(n_phi, cp_t, sp_t)
        k = 0
        # Under u -> -u the frame maps bitwise to (-u_hat, -e1, e2), so with
        # the mirror-paired azimuth table node (sg, m, l) of u coincides
        # bitwise with node (-sg, m, (n_phi/2 - l) mod n_phi) of -u.
        for sgn in range(2):
            sg = 1.0 if sgn == 0 else -1.0
            for m in range(n_half):
                c = gl_c[m]
                st = math.sqrt(max(0.0, 1.0 - c * c))
                for l in range(n_phi):
                    cp = cp_t[l]
                    sp = sp_t[l]
                    omg[k, 0] = sg * c * ux_h + st * (cp * e1x + sp * e2x)
                    omg[k, 1] = sg * c * uy_h + st * (cp * e1y + sp * e2y)
                    omg[k, 2] = sg * c * uz_h + st * (cp * e1z + sp * e2z)
                    bw[k] = gl_w[m] * (2.0 * math.pi / n_phi) * 0.5 * speed * c
                    k += 1
        return k
    # d = 2: s = sin(theta) substitution absorbs B on each quadrant
    px = -uy_h
    py = ux_h
    n_q = gl_c.shape[0]
    k = 0
    for sc in range(2):
        sgc = 1.0 if sc == 0 else -1.0
        for ss in range(2):
            sgs = 1.0 if ss == 0 else -1.0
            for m in range(n_q):
                s = gl_c[m]
                cth = math.sqrt(max(0.0, 1.0 - s * s))
                omg[k, 0] = sgc * cth * ux_h + sgs * s * px
                omg[k, 1] = sgc * cth * uy_h + sgs * s * py
                bw[k] = 0.5 * speed * gl_w[m]
                k += 1
    return k


@maybe_njit(cache=True)
def flux_entries_kernel(centers, p, flat_idx, d, kind, b, gl_c, gl_w, n_phi,
                        v_max, h, n_cells, time_weight, omg, bw,
                        out_c, out_cs, out_cp, out_cps, out_w):
    """Materialize the product-measure collision flux over all ordered
    occupied cell pairs; one entry per (pair, node).  Returns the entry
    count.  The caller coalesces and symmetrizes."""
    M = centers.shape[0]
    K = 0
    if kind == KIND_MAXWELL:
        K = fill_nodes(0.0, 0.0, 0.0, 1.0, d, kind, b, gl_c, gl_w, n_phi,
                       omg, bw)
    k_out = 0
    for A in range(M):
        for B in range(M):
            ux = centers[B, 0] - centers[A, 0]
            uy = centers[B, 1] - centers[A, 1]
            uz = centers[B, 2] - centers[A, 2] if d == 3 else 0.0
            speed = math.sqrt(ux * ux + uy * uy + uz * uz)
            if kind == KIND_HARD_SPHERE:
                if speed <= 0.0:
                    continue
                K = fill_nodes(ux, uy, uz, speed, d, kind, b, gl_c, gl_w,
                               n_phi, omg, bw)
            base = 0.5 * p[A] * p[B] * time_weight
            for k in range(K):
                dot = omg[k, 0] * ux + omg[k, 1] * uy
                if d == 3:
                    dot += omg[k, 2] * uz
                vpx = centers[A, 0] + dot * omg[k, 0]
                vpy = centers[A, 1] + dot * omg[k, 1]
                vpz = (centers[A, 2] + dot * omg[k, 2]) if d == 3 else 0.0
                vsx = centers[B, 0] - dot * omg[k, 0]
                vsy = centers[B, 1] - dot * omg[k, 1]
                vsz = (centers[B, 2] - dot * omg[k, 2]) if d == 3 else 0.0
                cp = cell_of_scalar(vpx, vpy, vpz, d, v_max, h, n_cells)
                cps = cell_of_scalar(vsx, vsy, vsz, d, v_max, h, n_cells)
                out_c[k_out] = flat_idx[A]
                out_cs[k_out] = flat_idx[B]
                out_cp[k_out] = cp
                out_cps[k_out] = cps
                out_w[k_out] = base * bw[k]
                k_out += 1
    return k_out


@maybe_njit(cache=True)
def pair_flux_mass(centers, p, d, kind, rate_iso, kap_half, time_weight):
    """Closed-form total mass of the product-measure flux:
    time_weight * (1/2) sum_{A,B} p_A p_B * (int B domega), independent of
    the node count.  rate_iso = b |S^{d-1}| for the constant kernel."""
    M = centers.shape[0]
    tot = 0.0
    comp = 0.0
    for A in range(M):
        for B in range(M):
            if kind == KIND_MAXWELL:
                rate = rate_iso
            else:
                ux = centers[B, 0] - centers[A, 0]
                uy = centers[B, 1] - centers[A, 1]
                uz = centers[B, 2] - centers[A, 2] if d == 3 else 0.0
                rate = kap_half * math.sqrt(ux * ux + uy * uy + uz * uz)
            term = 0.5 * p[A] * p[B] * rate * time_weight
            y = term - comp
            t2 = tot + y
            comp = (t2 - tot) - y
            tot = t2
    return tot


@maybe_njit(cache=True)
def grid_step_kernel(centers, p, flat_idx, d, kind, b, gl_c, gl_w, n_phi,
                     v_max, h, n_cells, dt, omg, bw, dP):
    """Forward-Euler increment of the space-homogeneous collision dynamics
    on the grid.  For every ordered occupied pair and node: rate mass
    w = (1/2) p_A p_B b_k dt leaves cells A and B and arrives at the two
    post-collision cells.  Accumulates into dense dP; returns the mass
    leaking to overflow (post-collision velocity outside the box)."""
    M = centers.shape[0]
    K = 0
    if kind == KIND_MAXWELL:
        K = fill_nodes(0.0, 0.0, 0.0, 1.0, d, kind, b, gl_c, gl_w, n_phi,
                       omg, bw)
    overflow_gain = 0.0
    for A in range(M):
        for B in range(M):
            ux = centers[B, 0] - centers[A, 0]
            uy = centers[B, 1] - centers[A, 1]
            uz = centers[B, 2] - centers[A, 2] if d == 3 else 0.0
            speed = math.sqrt(ux * ux + uy * uy + uz * uz)
            if kind == KIND_HARD_SPHERE:
                if speed <= 0.0:
                    continue
                K = fill_nodes(ux, uy, uz, speed, d, kind, b, gl_c, gl_w,
                               n_phi, omg, bw)
            base = 0.5 * p[A] * p[B] * dt
            for k in range(K):
                w = base * bw[k]
                dot = omg[k, 0] * ux + omg[k, 1] * uy
                if d == 3:
                    dot += omg[k, 2] * uz
                vpx = centers[A, 0] + dot * omg[k, 0]
                vpy = centers[A, 1] + dot * omg[k, 1]
                vpz = (centers[A, 2] + dot * omg[k, 2]) if d == 3 else 0.0
                vsx = centers[B, 0] - dot * omg[k, 0]
                vsy = centers[B, 1] - dot * omg[k, 1]
                vsz = (centers[B, 2] - dot * omg[k, 2]) if d == 3 else 0.0
                cp = cell_of_scalar(vpx, vpy, vpz, d, v_max, h, n_cells)
                cps = cell_of_scalar(vsx, vsy, vsz, d, v_max, h, n_cells)
                dP[flat_idx[A]] -= w
                dP[flat_idx[B]] -= w
                if cp >= 0:
                    dP[cp] += w
                else:
                    overflow_gain += w
                if cps >= 0:
                    dP[cps] += w
                else:
                    overflow_gain += w
    return overflow_gain


@maybe_njit(cache=True)
def dirichlet_terms(centers, p, d, kind, b, gl_c, gl_w, n_phi, v_max, h,
                    n_cells, omg, bw, weights_flat, mode, beta, log_c):
    """Terms of the collisional Dirichlet-form functional:
    T1  = sum_{A,B} p_A p_B sum_k b_k        (pre-pair mass term),
    T2  = sum over post-collision geometric means,
    T1p = sum over post-collision products    (post-pair mass term),
    so (T1 + T1p)/2 - T2 = sum of (bw/2)(sqrt(p p*) - sqrt(p' p'*))^2 >= 0.

    mode 0: binned post weights, T2 term sqrt(p_A p_B p_cp p_cps) (zero on
    empty or overflow post cells).  mode 1: exact Gaussian density with
    log-density log_c - (beta/2)|v|^2, for which T2 = T1 up to roundoff on
    any measure whose weights are h^d times that density at cell centers.
    Returns (T1, T2, T1p)."""
    M = centers.shape[0]
    K = 0
    if kind == KIND_MAXWELL:
        K = fill_nodes(0.0, 0.0, 0.0, 1.0, d, kind, b, gl_c, gl_w, n_phi,
                       omg, bw)
    t1 = 0.0
    t2 = 0.0
    t1p = 0.0
    dlnh = d * math.log(h)
    for A in range(M):
        for B in range(M):
            ux = centers[B, 0] - centers[A, 0]
            uy = centers[B, 1] - centers[A, 1]
            uz = centers[B, 2] - centers[A, 2] if d == 3 else 0.0
            speed = math.sqrt(ux * ux + uy * uy + uz * uz)
            if kind == KIND_HARD_SPHERE:
                if speed <= 0.0:
                    continue
                K = fill_nodes(ux, uy, uz, speed, d, kind, b, gl_c, gl_w,
                               n_phi, omg, bw)
            pa_pb = p[A] * p[B]
            root_papb = math.sqrt(pa_pb)
            for k in range(K):
                t1 += bw[k] * pa_pb
                dot = omg[k, 0] * ux + omg[k, 1] * uy
                if d == 3:
                    dot += omg[k, 2] * uz
                vpx = centers[A, 0] + dot * omg[k, 0]
                vpy = centers[A, 1] + dot * omg[k, 1]
                vpz = (centers[A, 2] + dot * omg[k, 2]) if d == 3 else 0.0
                vsx = centers[B, 0] - dot * omg[k, 0]
                vsy = centers[B, 1] - dot * omg[k, 1]
                vsz = (centers[B, 2] - dot * omg[k, 2]) if d == 3 else 0.0
                if mode == 1:
                    e_post = (vpx * vpx + vpy * vpy + vpz * vpz
                              + vsx * vsx + vsy * vsy + vsz * vsz)
                    g_post = math.exp(dlnh + log_c - 0.25 * beta * e_post)
                    t2 += bw[k] * root_papb * g_post
                    t1p += bw[k] * g_post * g_post
                else:
                    cp = cell_of_scalar(vpx, vpy, vpz, d, v_max, h, n_cells)
                    cps = cell_of_scalar(vsx, vsy, vsz, d, v_max, h, n_cells)
                    if cp >= 0 and cps >= 0:
                        pp = weights_flat[cp] * weights_flat[cps]
                        t2 += bw[k] * root_papb * math.sqrt(pp)
                        t1p += bw[k] * pp
    return t1, t2, t1p


@maybe_njit(cache=True)
def ref_group_eval(vA0, vA1, vA2, vB0, vB1, vB2, factor, d, kind, b,
                   gl_c, gl_w, n_phi, v_max, h, n_cells, omg, bw,
                   q_cp_ax, q_cp_over, q_cps_ax, q_cps_over, out_r):
    """Smoothed reference-flux values at the query post-pairs of one
    pre-pair group.

    The reference is the product-measure flux of the pre-pair cell centers
    (vA, vB) with weight prefactor ``factor`` = (1/2) p_A p_B time_weight;
    each quadrature node's post-pair mass is spread over the neighboring
    cells by the separable boundary-renormalized [1/4, 1/2, 1/4] stencil
    (post slots only; overflow posts stay unsmoothed).  Both post orders are
    scored with weight 1/2 each, which together with the mirror-invariant
    node set realizes the full four-image symmetrization.  Adds into out_r.
    """
    ux = vB0 - vA0
    uy = vB1 - vA1
    uz = vB2 - vA2 if d == 3 else 0.0
    speed = math.sqrt(ux * ux + uy * uy + uz * uz)
    if kind == KIND_HARD_SPHERE and speed <= 0.0:
        return
    K = fill_nodes(ux, uy, uz, speed if speed > 0.0 else 1.0, d, kind, b,
                   gl_c, gl_w, n_phi, omg, bw)
    g = q_cp_over.shape[0]
    for k in range(K):
        dot = omg[k, 0] * ux + omg[k, 1] * uy
        if d == 3:
            dot += omg[k, 2] * uz
        vpx = vA0 + dot * omg[k, 0]
        vpy = vA1 + dot * omg[k, 1]
        vpz = (vA2 + dot * omg[k, 2]) if d == 3 else 0.0
        vsx = vB0 - dot * omg[k, 0]
        vsy = vB1 - dot * omg[k, 1]
        vsz = (vB2 - dot * omg[k, 2]) if d == 3 else 0.0
        p0 = axis_index_scalar(vpx, v_max, h, n_cells)
        p1 = axis_index_scalar(vpy, v_max, h, n_cells)
        p2 = axis_index_scalar(vpz, v_max, h, n_cells) if d == 3 else 0
        s0 = axis_index_scalar(vsx, v_max, h, n_cells)
        s1 = axis_index_scalar(vsy, v_max, h, n_cells)
        s2 = axis_index_scalar(vsz, v_max, h, n_cells) if d == 3 else 0
        p_over = p0 < 0 or p1 < 0 or (d == 3 and p2 < 0)
        s_over = s0 < 0 or s1 < 0 or (d == 3 and s2 < 0)
        wk = factor * bw[k]
        for q in range(g):
            # direct post order
            if p_over:
                f1 = 1.0 if q_cp_over[q] else 0.0
            elif q_cp_over[q]:
                f1 = 0.0
            else:
                f1 = stencil_factor(p0, q_cp_ax[q, 0], n_cells)
                if f1 > 0.0:
                    f1 *= stencil_factor(p1, q_cp_ax[q, 1], n_cells)
                if f1 > 0.0 and d == 3:
                    f1 *= stencil_factor(p2, q_cp_ax[q, 2], n_cells)
            if f1 > 0.0:
                if s_over:
                    f1 = f1 if q_cps_over[q] else 0.0
                elif q_cps_over[q]:
                    f1 = 0.0
                else:
                    f1 *= stencil_factor(s0, q_cps_ax[q, 0], n_cells)
                    if f1 > 0.0:
                        f1 *= stencil_factor(s1, q_cps_ax[q, 1], n_cells)
                    if f1 > 0.0 and d == 3:
                        f1 *= stencil_factor(s2, q_cps_ax[q, 2], n_cells)
            # swapped post order
            if p_over:
                f2 = 1.0 if q_cps_over[q] else 0.0
            elif q_cps_over[q]:
                f2 = 0.0
            else:
                f2 = stencil_factor(p0, q_cps_ax[q, 0], n_cells)
                if f2 > 0.0:
                    f2 *= stencil_factor(p1, q_cps_ax[q, 1], n_cells)
                if f2 > 0.0 and d == 3:
                    f2 *= stencil_factor(p2, q_cps_ax[q, 2], n_cells)
            if f2 > 0.0:
                if s_over:
                    f2 = f2 if q_cp_over[q] else 0.0
                elif q_cp_over[q]:
                    f2 = 0.0
                else:
                    f2 *= stencil_factor(s0, q_cp_ax[q, 0], n_cells)
                    if f2 > 0.0:
                        f2 *= stencil_factor(s1, q_cp_ax[q, 1], n_cells)
                    if f2 > 0.0 and d == 3:
                        f2 *= stencil_factor(s2, q_cp_ax[q, 2], n_cells)
            if f1 > 0.0 or f2 > 0.0:
                out_r[q] += wk * 0.5 * (f1 + f2)


@maybe_njit(cache=True)
def _phi_b(fid, x0, x1, x2):
    """Built-in test functions for the martingale diagnostics."""
    if fid == 0:
        return x0 * x0 - x1 * x1
    if fid == 1:
        return math.exp(-0.5 * (x0 * x0 + x1 * x1 + x2 * x2))
    return x0 * x1


@maybe_njit(cache=True)
def pair_g_both(vi0, vi1, vi2, vj0, vj1, vj2, d, kind, b, gl_c, gl_w, n_phi,
                fid, omg, bw):
    """(sum_k b_k F, sum_k b_k F^2) for one pair, F = increment of the
    built-in test function over the collision at node k."""
    ux = vj0 - vi0
    uy = vj1 - vi1
    uz = vj2 - vi2 if d == 3 else 0.0
    speed = math.sqrt(ux * ux + uy * uy + uz * uz)
    if kind == KIND_HARD_SPHERE and speed <= 0.0:
        return 0.0, 0.0
    K = fill_nodes(ux, uy, uz, speed if speed > 0.0 else 1.0, d, kind, b,
                   gl_c, gl_w, n_phi, omg, bw)
    phi_pre = _phi_b(fid, vi0, vi1, vi2) + _phi_b(fid, vj0, vj1, vj2)
    acc = 0.0
    acc2 = 0.0
    for k in range(K):
        dot = omg[k, 0] * ux + omg[k, 1] * uy
        if d == 3:
            dot += omg[k, 2] * uz
        vpx = vi0 + dot * omg[k, 0]
        vpy = vi1 + dot * omg[k, 1]
        vpz = (vi2 + dot * omg[k, 2]) if d == 3 else 0.0
        vsx = vj0 - dot * omg[k, 0]
        vsy = vj1 - dot * omg[k, 1]
        vsz = (vj2 - dot * omg[k, 2]) if d == 3 else 0.0
        F = (_phi_b(fid, vpx, vpy, vpz) + _phi_b(fid, vsx, vsy, vsz)
             - phi_pre)
        acc += bw[k] * F
        acc2 += bw[k] * F * F
    return acc, acc2


@maybe_njit(cache=True)
def total_g(v, d, kind, b, gl_c, gl_w, n_phi, fid, omg, bw):
    """(G, G2) = pairwise sums of pair_g_both over all unordered pairs."""
    n = v.shape[0]
    G = 0.0
    G2 = 0.0
    for i in range(n):
        xi2 = v[i, 2] if d == 3 else 0.0
        for j in range(i + 1, n):
            xj2 = v[j, 2] if d == 3 else 0.0
            gf, g2 = pair_g_both(v[i, 0], v[i, 1], xi2, v[j, 0], v[j, 1],
                                 xj2, d, kind, b, gl_c, gl_w, n_phi, fid,
                                 omg, bw)
            G += gf
            G2 += g2
    return G, G2


@maybe_njit(cache=True)
def martingale_replay(v, ev_t, ev_i, ev_j, ev_pre_i, ev_pre_j, ev_post_i,
                      ev_post_j, d, kind, b, gl_c, gl_w, n_phi, fid,
                      eval_times, omg, bw, out_M, out_QV):
    """Replay one event log, tracking the martingale residual.

    Maintains G = sum_{i<j} int B F domega incrementally (O(N) quadrature
    updates per event) and integrates the compensator exactly between
    events (G is piecewise constant along the path).  At each requested
    time: out_M = Q^N_{[0,t]}(F) - (1/N^2) int_0^t G ds, and out_QV = the
    predictable quadratic-variation estimate (1/N^3) int_0^t G_{F^2} ds.
    G is rebuilt from scratch every 4096 events to cap drift.
    """
    n = v.shape[0]
    m = ev_t.shape[0]
    n_eval = eval_times.shape[0]
    G, G2 = total_g(v, d, kind, b, gl_c, gl_w, n_phi, fid, omg, bw)
    comp_g = 0.0
    comp_g2 = 0.0
    qn = 0.0
    C = 0.0
    C2 = 0.0
    t_prev = 0.0
    ptr = 0
    nn = float(n) * float(n)
    nnn = nn * float(n)
    for k in range(m):
        tau = ev_t[k]
        # strict: an event landing exactly on an eval time is included in
        # that evaluation (right-continuous paths)
        while ptr < n_eval and eval_times[ptr] < tau:
            dt = eval_times[ptr] - t_prev
            C += (G / nn) * dt
            C2 += (G2 / nnn) * dt
            t_prev = eval_times[ptr]
            out_M[ptr] = qn - C
            out_QV[ptr] = C2
            ptr += 1
        dt = tau - t_prev
        C += (G / nn) * dt
        C2 += (G2 / nnn) * dt
        t_prev = tau
        i = ev_i[k]
        j = ev_j[k]
        pi2 = ev_pre_i[k, 2] if d == 3 else 0.0
        pj2 = ev_pre_j[k, 2] if d == 3 else 0.0
        qi2 = ev_post_i[k, 2] if d == 3 else 0.0
        qj2 = ev_post_j[k, 2] if d == 3 else 0.0
        F_ev = (_phi_b(fid, ev_post_i[k, 0], ev_post_i[k, 1], qi2)
                + _phi_b(fid, ev_post_j[k, 0], ev_post_j[k, 1], qj2)
                - _phi_b(fid, ev_pre_i[k, 0], ev_pre_i[k, 1], pi2)
                - _phi_b(fid, ev_pre_j[k, 0], ev_pre_j[k, 1], pj2))
        qn += F_ev / n
        for l in range(n):
            if l == i or l == j:
                continue
            xl2 = v[l, 2] if d == 3 else 0.0
            go_i, go2_i = pair_g_both(v[l, 0], v[l, 1], xl2,
                                      ev_pre_i[k, 0], ev_pre_i[k, 1], pi2,
                                      d, kind, b, gl_c, gl_w, n_phi, fid,
                                      omg, bw)
            go_j, go2_j = pair_g_both(v[l, 0], v[l, 1], xl2,
                                      ev_pre_j[k, 0], ev_pre_j[k, 1], pj2,
                                      d, kind, b, gl_c, gl_w, n_phi, fid,
                                      omg, bw)
            gn_i, gn2_i = pair_g_both(v[l, 0], v[l, 1], xl2,
                                      ev_post_i[k, 0], ev_post_i[k, 1], qi2,
                                      d, kind, b, gl_c, gl_w, n_phi, fid,
                                      omg, bw)
            gn_j, gn2_j = pair_g_both(v[l, 0], v[l, 1], xl2,
                                      ev_post_j[k, 0], ev_post_j[k, 1], qj2,
                                      d, kind, b, gl_c, gl_w, n_phi, fid,
                                      omg, bw)
            delta = (gn_i + gn_j) - (go_i + go_j)
            y = delta - comp_g
            t2 = G + y
            comp_g = (t2 - G) - y
            G = t2
            delta2 = (gn2_i + gn2_j) - (go2_i + go2_j)
            y = delta2 - comp_g2
            t2 = G2 + y
            comp_g2 = (t2 - G2) - y
            G2 = t2
        go_p, go2_p = pair_g_both(ev_pre_i[k, 0], ev_pre_i[k, 1], pi2,
                                  ev_pre_j[k, 0], ev_pre_j[k, 1], pj2,
                                  d, kind, b, gl_c, gl_w, n_phi, fid,
                                  omg, bw)
        gn_p, gn2_p = pair_g_both(ev_post_i[k, 0], ev_post_i[k, 1], qi2,
                                  ev_post_j[k, 0], ev_post_j[k, 1], qj2,
                                  d, kind, b, gl_c, gl_w, n_phi, fid,
                                  omg, bw)
        G += gn_p - go_p
        G2 += gn2_p - go2_p
        for a in range(d):
            v[i, a] = ev_post_i[k, a]
            v[j, a] = ev_post_j[k, a]
        if (k + 1) % 4096 == 0:
            G, G2 = total_g(v, d, kind, b, gl_c, gl_w, n_phi, fid, omg, bw)
            comp_g = 0.0
            comp_g2 = 0.0
    while ptr < n_eval:
        dt = eval_times[ptr] - t_prev
        C += (G / nn) * dt
        C2 += (G2 / nnn) * dt
        t_prev = eval_times[ptr]
        out_M[ptr] = qn - C
        out_QV[ptr] = C2
        ptr += 1
