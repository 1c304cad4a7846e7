"""Hot loops of the collision engine (numba-compiled when available).

All kernels are written in scalar/loop style with ``math`` functions and draw
randomness exclusively through ``rng.random()``; the compiled and interpreted
paths therefore consume identical RNG streams and produce bit-identical
event sequences.  No numpy reductions inside kernels (their summation order
differs between numba and numpy).

Status codes returned by the steppers:
  0  reached t_end
  1  event buffer full (caller re-enters)
  2  absorbing state (total rate zero)
  3  per-event conservation violation (engine bug guard)
"""

import math

from .accel import maybe_njit

KIND_HARD_SPHERE = 0
KIND_MAXWELL = 1

STATUS_DONE = 0
STATUS_FULL = 1
STATUS_ABSORBING = 2
STATUS_BROKEN = 3


@maybe_njit(cache=True)
def _pair_weight(v, i, j, d, kind):
    """Scheduler weight of pair (i, j): |v_i - v_j| (hard sphere) or 1."""
    if kind == KIND_MAXWELL:
        return 1.0
    s = 0.0
    for a in range(d):
        du = v[i, a] - v[j, a]
        s += du * du
    return math.sqrt(s)


@maybe_njit(cache=True)
def recompute_pair_sums(v, S, comp, kind):
    """S_i = sum_{j != i} weight(i, j), exact O(N^2) rebuild."""
    n, d = v.shape
    for i in range(n):
        S[i] = 0.0
        comp[i] = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            w = _pair_weight(v, i, j, d, kind)
            S[i] += w
            S[j] += w


@maybe_njit(cache=True)
def _sample_omega(u0, u1, u2, un, d, kind, rng, out):
    """Scattering direction into ``out``.

    Hard sphere: density ~ |u-hat . omega| (d=3: |cos| = sqrt(U); d=2:
    sin(theta) = U per sign quadrant).  Constant kernel: uniform sphere.
    """
    if kind == KIND_MAXWELL:
        if d == 3:
            c = 2.0 * rng.random() - 1.0
            phi = 2.0 * math.pi * rng.random()
            st = math.sqrt(max(0.0, 1.0 - c * c))
            out[0] = st * math.cos(phi)
            out[1] = st * math.sin(phi)
            out[2] = c
        else:
            th = 2.0 * math.pi * rng.random()
            out[0] = math.cos(th)
            out[1] = math.sin(th)
        return
    ux = u0 / un
    uy = u1 / un
    if d == 3:
        uz = u2 / un
        c = math.sqrt(rng.random())
        if rng.random() < 0.5:
            c = -c
        phi = 2.0 * math.pi * rng.random()
        # deterministic orthonormal frame, seeded from the smallest axis
        ax, ay, az = abs(ux), abs(uy), abs(uz)
        if ax <= ay and ax <= az:
            e1x, e1y, e1z = 0.0, -uz, uy
        elif ay <= az:
            e1x, e1y, e1z = -uz, 0.0, ux
        else:
            e1x, e1y, e1z = -uy, ux, 0.0
        nrm = math.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
        e1x /= nrm
        e1y /= nrm
        e1z /= nrm
        e2x = uy * e1z - uz * e1y
        e2y = uz * e1x - ux * e1z
        e2z = ux * e1y - uy * e1x
        st = math.sqrt(max(0.0, 1.0 - c * c))
        cp = math.cos(phi)
        sp = math.sin(phi)
        out[0] = c * ux + st * (cp * e1x + sp * e2x)
        out[1] = c * uy + st * (cp * e1y + sp * e2y)
        out[2] = c * uz + st * (cp * e1z + sp * e2z)
    else:
        s = rng.random()            # sin(theta) is uniform per quadrant
        c = math.sqrt(max(0.0, 1.0 - s * s))
        if rng.random() < 0.5:
            c = -c
        if rng.random() < 0.5:
            s = -s
        out[0] = c * ux - s * uy
        out[1] = c * uy + s * ux


@maybe_njit(cache=True)
def _apply_and_log(v, i, j, omega, t, k, d,
                   ev_t, ev_i, ev_j, ev_w, ev_pre_i, ev_pre_j,
                   ev_post_i, ev_post_j, tol):
    """Apply the collision, record the event at slot k, check conservation.

    Returns True iff pair momentum/energy are conserved to ``tol`` relative.
    """
    dot = 0.0
    for a in range(d):
        dot += omega[a] * (v[j, a] - v[i, a])
    e_pre = 0.0
    for a in range(d):
        e_pre += v[i, a] * v[i, a] + v[j, a] * v[j, a]
    ev_t[k] = t
    ev_i[k] = i
    ev_j[k] = j
    for a in range(d):
        ev_w[k, a] = omega[a]
        ev_pre_i[k, a] = v[i, a]
        ev_pre_j[k, a] = v[j, a]
    for a in range(d):
        v[i, a] += dot * omega[a]
        v[j, a] -= dot * omega[a]
        ev_post_i[k, a] = v[i, a]
        ev_post_j[k, a] = v[j, a]
    e_post = 0.0
    mom_err = 0.0
    for a in range(d):
        e_post += v[i, a] * v[i, a] + v[j, a] * v[j, a]
        dp = (ev_post_i[k, a] + ev_post_j[k, a]
              - ev_pre_i[k, a] - ev_pre_j[k, a])
        mom_err = max(mom_err, abs(dp))
    scale = max(e_pre, 1e-300)
    if abs(e_post - e_pre) > tol * scale:
        return False
    if mom_err > tol * (math.sqrt(scale) + 1.0):
        return False
    return True


@maybe_njit(cache=True)
def step_exact_chunk(v, S, comp, t_start, t_end, c_rate, kind, rng,
                     ev_t, ev_i, ev_j, ev_w, ev_pre_i, ev_pre_j,
                     ev_post_i, ev_post_j, cap, tol, omega_buf,
                     pre_i_buf, pre_j_buf):
    """Exact chained (Gillespie) stepping until t_end or a full buffer.

    The pair-weight sums S are maintained incrementally (2N-3 weights touched
    per event, compensated additions); the caller rebuilds them periodically.
    Returns (status, n_written, t_now, int_rate_dt) where int_rate_dt is the
    exact time integral of the total rate along the simulated segment.
    """
    n, d = v.shape
    t = t_start
    k = 0
    int_rate = 0.0
    while True:
        tot = 0.0
        cc = 0.0
        for i in range(n):
            y = S[i] - cc
            s2 = tot + y
            cc = (s2 - tot) - y
            tot = s2
        lam = 0.5 * c_rate * tot
        if lam <= 0.0:
            return STATUS_ABSORBING, k, t, int_rate
        dt = -math.log(1.0 - rng.random()) / lam
        if t + dt >= t_end:
            int_rate += lam * (t_end - t)
            return STATUS_DONE, k, t_end, int_rate
        int_rate += lam * dt
        t += dt
        # select i with probability S_i / sum_l S_l
        z = rng.random() * tot
        i = 0
        acc = S[0]
        while acc < z and i < n - 1:
            i += 1
            acc += S[i]
        # select j != i with probability w(i, j) / S_i
        z2 = rng.random() * S[i]
        j = -1
        acc2 = 0.0
        for jj in range(n):
            if jj == i:
                continue
            acc2 += _pair_weight(v, i, jj, d, kind)
            if acc2 >= z2:
                j = jj
                break
        if j < 0:
            j = n - 1 if i != n - 1 else n - 2
        if i > j:
            i, j = j, i
        un = 0.0
        for a in range(d):
            du = v[j, a] - v[i, a]
            pre_i_buf[a] = v[i, a]
            pre_j_buf[a] = v[j, a]
            un += du * du
        un = math.sqrt(un)
        if kind == KIND_HARD_SPHERE and un <= 0.0:
            # zero-weight pair reachable only through selection-walk rounding
            continue
        _sample_omega(v[j, 0] - v[i, 0], v[j, 1] - v[i, 1],
                      v[j, d - 1] - v[i, d - 1] if d == 3 else 0.0,
                      un, d, kind, rng, omega_buf)
        ok = _apply_and_log(v, i, j, omega_buf, t, k, d, ev_t, ev_i, ev_j,
                            ev_w, ev_pre_i, ev_pre_j, ev_post_i, ev_post_j,
                            tol)
        if not ok:
            return STATUS_BROKEN, k + 1, t, int_rate
        if kind == KIND_HARD_SPHERE:
            for l in range(n):
                if l == i or l == j:
                    continue
                w_old_i = 0.0
                w_old_j = 0.0
                w_new_i = 0.0
                w_new_j = 0.0
                for a in range(d):
                    dli = v[l, a] - pre_i_buf[a]
                    dlj = v[l, a] - pre_j_buf[a]
                    w_old_i += dli * dli
                    w_old_j += dlj * dlj
                    dni = v[l, a] - v[i, a]
                    dnj = v[l, a] - v[j, a]
                    w_new_i += dni * dni
                    w_new_j += dnj * dnj
                delta = (math.sqrt(w_new_i) + math.sqrt(w_new_j)
                         - math.sqrt(w_old_i) - math.sqrt(w_old_j))
                y = delta - comp[l]
                s2 = S[l] + y
                comp[l] = (s2 - S[l]) - y
                S[l] = s2
            si = 0.0
            sj = 0.0
            for l in range(n):
                if l != i:
                    si += _pair_weight(v, i, l, d, kind)
                if l != j:
                    sj += _pair_weight(v, j, l, d, kind)
            S[i] = si
            comp[i] = 0.0
            S[j] = sj
            comp[j] = 0.0
        k += 1
        if k >= cap:
            return STATUS_FULL, k, t, int_rate


@maybe_njit(cache=True)
def step_rejection_chunk(v, t_start, t_end, c2, kind, rng,
                         ev_t, ev_i, ev_j, ev_w, ev_pre_i, ev_pre_j,
                         ev_post_i, ev_post_j, cap, tol, omega_buf,
                         pre_i_buf, pre_j_buf, state):
    """Majorant/thinning stepping until t_end or a full buffer.

    Hard sphere: proposals arrive at rate c2 * V_max (relative speeds are
    bounded by 2 V_max), the pair is uniform, acceptance is |v_i - v_j| /
    (2 V_max).  The proposal rate tracks V_max: it is recomputed whenever the
    bound grows (a stale majorant under-simulates), and the bound itself is
    refreshed from scratch every 1e5 accepted events or once the window
    rejection rate exceeds 99%.  Constant kernel: c2 is the exact total rate
    and every proposal is accepted.

    ``state`` = [vmax, accepted_in_window, proposals_in_window] persists
    across re-entries.  Returns (status, n_written, t_now).
    """
    n, d = v.shape
    t = t_start
    k = 0
    vmax = state[0]
    acc_w = state[1]
    prop_w = state[2]
    while True:
        if kind == KIND_HARD_SPHERE and (
                acc_w >= 1.0e5 or (prop_w >= 1.0e4
                                   and acc_w < 0.01 * prop_w)):
            vmax = 0.0
            for i in range(n):
                s = 0.0
                for a in range(d):
                    s += v[i, a] * v[i, a]
                s = math.sqrt(s)
                if s > vmax:
                    vmax = s
            acc_w = 0.0
            prop_w = 0.0
        lam = c2 * vmax if kind == KIND_HARD_SPHERE else c2
        if lam <= 0.0:
            state[0] = vmax
            state[1] = acc_w
            state[2] = prop_w
            return STATUS_ABSORBING, k, t
        dt = -math.log(1.0 - rng.random()) / lam
        if t + dt >= t_end:
            state[0] = vmax
            state[1] = acc_w
            state[2] = prop_w
            return STATUS_DONE, k, t_end
        t += dt
        i = int(rng.random() * n)
        if i >= n:
            i = n - 1
        j = int(rng.random() * (n - 1))
        if j >= n - 1:
            j = n - 2
        if j >= i:
            j += 1
        prop_w += 1.0
        un = 0.0
        for a in range(d):
            du = v[j, a] - v[i, a]
            un += du * du
        un = math.sqrt(un)
        if kind == KIND_HARD_SPHERE:
            if rng.random() * (2.0 * vmax) > un:
                continue
            if un <= 0.0:
                continue
        acc_w += 1.0
        if i > j:
            i, j = j, i
        for a in range(d):
            pre_i_buf[a] = v[i, a]
            pre_j_buf[a] = v[j, a]
        _sample_omega(v[j, 0] - v[i, 0], v[j, 1] - v[i, 1],
                      v[j, d - 1] - v[i, d - 1] if d == 3 else 0.0,
                      un, d, kind, rng, omega_buf)
        ok = _apply_and_log(v, i, j, omega_buf, t, k, d, ev_t, ev_i, ev_j,
                            ev_w, ev_pre_i, ev_pre_j, ev_post_i, ev_post_j,
                            tol)
        if not ok:
            state[0] = vmax
            state[1] = acc_w
            state[2] = prop_w
            return STATUS_BROKEN, k + 1, t
        if kind == KIND_HARD_SPHERE:
            mi = 0.0
            mj = 0.0
            for a in range(d):
                mi += v[i, a] * v[i, a]
                mj += v[j, a] * v[j, a]
            m = math.sqrt(max(mi, mj))
            if m > vmax:
                vmax = m    # lam follows at the next loop head
        k += 1
        if k >= cap:
            state[0] = vmax
            state[1] = acc_w
            state[2] = prop_w
            return STATUS_FULL, k, t
