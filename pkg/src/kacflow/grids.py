"""Velocity-space grids, gridded measures, sparse flux measures, and the
hard-sphere-weighted sphere quadrature shared by every flux/entropy routine.

Grid conventions: the box [-v_max, v_max]^d is split into n_cells per axis;
cell centers are the representative velocities; points outside the box carry
index -1 ("overflow") and their mass is tracked, never dropped.

Quadrature conventions (hard sphere): nodes and B-weights (omega_k, b_k) with
sum_k b_k = (kappa_d / 2) |u| EXACTLY for any node count (Gauss-Legendre in
cos(theta) is exact for the degree-1 integrand |c| per half-interval; in d=2
the sine substitution absorbs B).  The node set is invariant under
u-hat -> -u-hat (mirrored polar nodes, even azimuth count), which makes the
binned flux of a sign-symmetric measure exactly inversion-equivariant.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import HARD_SPHERE, kappa, sphere_surface

OVERFLOW = -1


@dataclass(frozen=True)
class GridSpec:
    d: int
    v_max: float
    n_cells: int
    n_t: int = 1
    T: float = 1.0

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")
        if not (self.v_max > 0 and self.n_cells > 0 and self.n_t > 0
                and self.T > 0):
            raise ValueError("grid parameters must be positive")

    @property
    def h(self):
        return 2.0 * self.v_max / self.n_cells

    @property
    def n_flat(self):
        return self.n_cells ** self.d

    def axis_index(self, x):
        """Per-axis cell index of coordinates x; OVERFLOW outside the box.

        Sign-symmetric form: the cell comes from |x| and the sign bit, so
        bitwise-negated coordinates always land in mirrored cells (cell
        centers are computed to negate exactly, see centers()).  Both box
        edges are closed into their end cells.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.abs(x)
        n = self.n_cells
        if n % 2 == 0:
            m = np.floor(y / self.h).astype(np.int64)
            pos = n // 2 + m
            neg = n // 2 - 1 - m
        else:
            m = np.floor(y / self.h + 0.5).astype(np.int64)
            pos = (n - 1) // 2 + m
            neg = (n - 1) // 2 - m
        idx = np.where(np.signbit(x), neg, pos)
        idx = np.clip(idx, 0, n - 1)
        idx[y > self.v_max] = OVERFLOW
        return idx

    def flatten(self, axis_idx):
        """(m, d) per-axis indices -> flat indices; any OVERFLOW slot wins."""
        axis_idx = np.asarray(axis_idx, dtype=np.int64)
        flat = np.zeros(axis_idx.shape[0], dtype=np.int64)
        for a in range(self.d):
            flat = flat * self.n_cells + axis_idx[:, a]
        flat[(axis_idx == OVERFLOW).any(axis=1)] = OVERFLOW
        return flat

    def cell_of(self, points):
        """(m, d) velocities -> flat cell indices (OVERFLOW outside)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.flatten(self.axis_index(points))

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=np.int64)
        out = np.empty((flat.shape[0], self.d), dtype=np.int64)
        rem = flat.copy()
        for a in range(self.d - 1, -1, -1):
            out[:, a] = rem % self.n_cells
            rem //= self.n_cells
        out[flat == OVERFLOW] = OVERFLOW
        return out

    def centers(self, flat):
        """(m,) flat indices -> (m, d) cell centers; overflow rows are NaN.

        Computed as (2 i + 1 - n) * (h/2): the integer factor negates
        exactly under i -> n-1-i, so mirrored cells have bitwise-negated
        centers (the flux mirror identities rely on this).
        """
        ax = self.unflatten(np.asarray(flat, dtype=np.int64))
        c = (2 * ax + 1 - self.n_cells) * (0.5 * self.h)
        c[np.asarray(flat) == OVERFLOW] = np.nan
        return c

    def axis_centers(self):
        return (2 * np.arange(self.n_cells) + 1 - self.n_cells) \
            * (0.5 * self.h)

    def time_bin(self, t):
        t = np.asarray(t, dtype=np.float64)
        b = np.floor(t * self.n_t / self.T).astype(np.int64)
        return np.clip(b, 0, self.n_t - 1)

    def as_dict(self):
        return {"d": self.d, "v_max": float(self.v_max),
                "n_cells": int(self.n_cells), "n_t": int(self.n_t),
                "T": float(self.T)}


@dataclass
class GridMeasure:
    """Nonnegative weights on the grid plus explicitly tracked overflow mass.

    ``moments`` may carry raw (unbinned) moments attached by the producer;
    cell-based moments are always available from the centers.
    """

    grid: GridSpec
    weights: np.ndarray
    overflow_mass: float = 0.0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != self.grid.n_flat:
            raise ValueError("weight vector does not match the grid")
        if np.any(w < 0) or self.overflow_mass < 0:
            raise ValueError("measure weights must be nonnegative")
        self.weights = w

    def mass(self):
        return float(self.weights.sum() + self.overflow_mass)

    def is_probability(self, tol=1e-12):
        return abs(self.mass() - 1.0) <= tol

    def cell_moments(self):
        """Mean velocity and energy per particle computed from cell centers."""
        occ = np.nonzero(self.weights)[0]
        c = self.grid.centers(occ)
        w = self.weights[occ]
        tot = w.sum()
        if tot == 0:
            return np.zeros(self.grid.d), 0.0
        mean = (w[:, None] * c).sum(axis=0) / tot
        zeta0 = 0.5 * float((w * (c ** 2).sum(axis=1)).sum()) / tot
        return mean, zeta0

    def copy(self):
        return GridMeasure(self.grid, self.weights.copy(),
                           self.overflow_mass, dict(self.moments))

    def rows(self):
        """Sparse deterministic CSV rows: per-axis indices then weight."""
        occ = np.nonzero(self.weights)[0]
        ax = self.grid.unflatten(occ)
        for k in range(occ.shape[0]):
            yield list(ax[k]) + [float(self.weights[occ[k]])]

    def csv_header(self):
        return [f"c{a + 1}" for a in range(self.grid.d)] + ["weight"]


def bin_points(points, grid, point_mass):
    """Histogram points (m, d) into a GridMeasure with uniform point mass."""
    flat = grid.cell_of(points)
    inside = flat != OVERFLOW
    w = np.bincount(flat[inside], minlength=grid.n_flat).astype(np.float64)
    w *= point_mass
    overflow = float((~inside).sum()) * point_mass
    return GridMeasure(grid, w, overflow)


def total_variation(mu, nu):
    """TV distance of two gridded measures (overflow treated as one cell)."""
    if mu.grid != nu.grid:
        raise ValueError("grid mismatch")
    return 0.5 * (float(np.abs(mu.weights - nu.weights).sum())
                  + abs(mu.overflow_mass - nu.overflow_mass))


# ---------------------------------------------------------------------------
# sphere quadrature
# ---------------------------------------------------------------------------

def _frame(u_hat):
    """Deterministic orthonormal frame (e1, e2) completing u_hat (d=3)."""
    ux, uy, uz = u_hat
    if abs(ux) <= min(abs(uy), abs(uz)):
        e1 = np.array([0.0, -uz, uy])
    elif abs(uy) <= abs(uz):
        e1 = np.array([-uz, 0.0, ux])
    else:
        e1 = np.array([-uy, ux, 0.0])
    e1 /= math.sqrt(e1 @ e1)
    e2 = np.cross(u_hat, e1)
    return e1, e2


def quadrature_counts(n_omega, d):
    """Actual node counts for a requested budget n_omega (upper bound)."""
    if d == 3:
        n_half = max(1, int(round(math.sqrt(n_omega / 4.0))))
        return n_half, 2 * n_half
    n_q = max(1, n_omega // 4)
    return n_q, 4


def azimuth_tables(n_phi):
    """cos/sin tables of the uniform azimuth grid, built so that the mirror
    pairing l -> (n_phi/2 - l) mod n_phi satisfies cos -> -cos, sin -> sin
    bitwise (n_phi must be even).  This makes the full node set of
    sphere_b_quadrature an exact mirror image of itself under u -> -u, which
    in turn makes binned fluxes of sign-symmetric measures exactly
    inversion-equivariant."""
    cp = np.empty(n_phi)
    sp = np.empty(n_phi)
    filled = np.zeros(n_phi, dtype=bool)
    for l in range(n_phi):
        if filled[l]:
            continue
        l2 = (n_phi // 2 - l) % n_phi
        ang = 2.0 * math.pi * l / n_phi
        c = math.cos(ang)
        s = math.sin(ang)
        if l2 == l:
            c = 0.0
        cp[l] = c
        sp[l] = s
        filled[l] = True
        if l2 != l:
            cp[l2] = -c
            sp[l2] = s
            filled[l2] = True
    return cp, sp


def sphere_b_quadrature(u, n_omega, kernel):
    """Nodes and B-weights (omega_k, b_k) for int_{S^{d-1}} B(u, omega) domega.

    Hard sphere: sum_k b_k = (kappa_d / 2) |u| exactly; node set invariant
    under u -> -u.  Constant kernel: uniform nodes, sum_k b_k = b |S^{d-1}|.
    """
    u = np.asarray(u, dtype=np.float64)
    d = u.shape[0]
    speed = math.sqrt(float(u @ u))

    if kernel.kind != HARD_SPHERE:
        # isotropic: plain surface quadrature, constant B
        if d == 3:
            n_half, n_phi = quadrature_counts(n_omega, 3)
            x, wg = np.polynomial.legendre.leggauss(n_half)
            c = 0.5 * (x + 1.0)
            wc = 0.5 * wg
            cp, sp = azimuth_tables(n_phi)
            cs = np.concatenate([c, -c])
            ws = np.concatenate([wc, wc])
            s = np.sqrt(np.clip(1.0 - cs ** 2, 0.0, None))
            omegas = np.empty((cs.size * n_phi, 3))
            bw = np.empty(cs.size * n_phi)
            k = 0
            for m in range(cs.size):
                for l in range(n_phi):
                    omegas[k] = (cs[m] * np.array([0.0, 0.0, 1.0])
                                 + s[m] * np.array([cp[l], sp[l], 0.0]))
                    bw[k] = kernel.b * ws[m] * (2.0 * math.pi / n_phi)
                    k += 1
            return omegas, bw
        n = max(4, n_omega)
        th = 2.0 * math.pi * np.arange(n) / n
        omegas = np.stack([np.cos(th), np.sin(th)], axis=1)
        return omegas, np.full(n, kernel.b * 2.0 * math.pi / n)

    if speed == 0.0:
        raise ValueError("zero relative velocity has no scattering direction")
    u_hat = u / speed

    if d == 3:
        n_half, n_phi = quadrature_counts(n_omega, 3)
        x, wg = np.polynomial.legendre.leggauss(n_half)
        c = 0.5 * (x + 1.0)          # |cos theta| nodes in (0, 1)
        wc = 0.5 * wg                # weights for int_0^1 dc
        e1, e2 = _frame(u_hat)
        cp, sp = azimuth_tables(n_phi)
        n_nodes = 2 * n_half * n_phi
        omegas = np.empty((n_nodes, 3))
        bw = np.empty(n_nodes)
        k = 0
        # Node (sgn, m, l) for u coincides bitwise with node (-sgn, m,
        # (n_phi/2 - l) mod n_phi) for -u: the frame maps to (-e1, e2) and the
        # azimuth table is built mirror-paired, so the node set (with its
        # weights) is exactly invariant under u -> -u.
        for sgn in (1.0, -1.0):
            for m in range(n_half):
                st = math.sqrt(max(0.0, 1.0 - c[m] ** 2))
                for l in range(n_phi):
                    omegas[k] = (sgn * c[m] * u_hat
                                 + st * (cp[l] * e1 + sp[l] * e2))
                    # surface weight x B = (wc dcos)(2pi/n_phi dphi) x |u||c|/2
                    bw[k] = wc[m] * (2.0 * math.pi / n_phi) * 0.5 * speed * c[m]
                    k += 1
        return omegas, bw

    # d = 2: per-quadrant substitution s = sin(theta) absorbs B; each quadrant
    # carries mass |u|/2 exactly.
    n_q, _ = quadrature_counts(n_omega, 2)
    x, wg = np.polynomial.legendre.leggauss(n_q)
    s = 0.5 * (x + 1.0)
    ws = 0.5 * wg
    perp = np.array([-u_hat[1], u_hat[0]])
    omegas = np.empty((4 * n_q, 2))
    bw = np.empty(4 * n_q)
    k = 0
    for sc in (1.0, -1.0):
        for ss in (1.0, -1.0):
            for m in range(n_q):
                cth = math.sqrt(max(0.0, 1.0 - s[m] ** 2))
                omegas[k] = sc * cth * u_hat + ss * s[m] * perp
                bw[k] = 0.5 * speed * ws[m]
                k += 1
    return omegas, bw


def collide(v, w, omega):
    """Post-collision pair of (v, w) for scattering direction omega."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    dot = float(omega @ (w - v))
    return v + dot * omega, w - dot * omega


# ---------------------------------------------------------------------------
# sparse flux measures
# ---------------------------------------------------------------------------

def _coalesce(keys, w):
    """Sum weights of duplicate key rows; returns (unique_keys, summed_w)."""
    if keys.shape[0] == 0:
        return keys, w
    view = np.ascontiguousarray(keys).view(
        np.dtype((np.void, keys.dtype.itemsize * keys.shape[1])))
    order = np.argsort(view.ravel(), kind="stable")
    view_s = view.ravel()[order]
    starts = np.ones(order.shape[0], dtype=bool)
    starts[1:] = view_s[1:] != view_s[:-1]
    idx = np.nonzero(starts)[0]
    wsum = np.add.reduceat(w[order], idx)
    return keys[order[idx]], wsum


@dataclass
class FluxMeasure:
    """Sparse measure on (time-bin, pre-pair, post-pair) cell tuples.

    Stored as parallel arrays; cell indices are flat grid indices with -1 for
    overflow.  Construction symmetrizes over the pre-pair and post-pair
    orderings, so the invariances under (c <-> c*) and (c' <-> c'*) hold
    exactly by storage.
    """

    grid: GridSpec
    tbin: np.ndarray
    c: np.ndarray
    cs: np.ndarray
    cp: np.ndarray
    cps: np.ndarray
    w: np.ndarray

    @staticmethod
    def empty(grid):
        z = np.zeros(0, dtype=np.int64)
        return FluxMeasure(grid, z.copy(), z.copy(), z.copy(), z.copy(),
                           z.copy(), np.zeros(0))

    @staticmethod
    def from_entries(grid, tbin, c, cs, cp, cps, w, symmetrize=True):
        """Build with optional 4-image symmetrization and coalescing.

        Each input entry of weight w is split 1/4 onto the four images
        (c,cs|cp,cps), (cs,c|cps,cp), (c,cs|cps,cp), (cs,c|cp,cps); images
        that coincide recombine in the coalesce step.
        """
        tbin = np.asarray(tbin, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        cs = np.asarray(cs, dtype=np.int64)
        cp = np.asarray(cp, dtype=np.int64)
        cps = np.asarray(cps, dtype=np.int64)
        w = np.asarray(w, dtype=np.float64)
        if symmetrize:
            tbin = np.concatenate([tbin, tbin, tbin, tbin])
            c, cs = (np.concatenate([c, cs, c, cs]),
                     np.concatenate([cs, c, cs, c]))
            cp, cps = (np.concatenate([cp, cps, cps, cp]),
                       np.concatenate([cps, cp, cp, cps]))
            w = np.concatenate([w, w, w, w]) * 0.25
        keys = np.stack([tbin, c, cs, cp, cps], axis=1)
        keys, w = _coalesce(keys, w)
        return FluxMeasure(grid, keys[:, 0].copy(), keys[:, 1].copy(),
                           keys[:, 2].copy(), keys[:, 3].copy(),
                           keys[:, 4].copy(), w)

    def n_entries(self):
        return self.w.shape[0]

    def mass(self):
        return float(self.w.sum())

    def keys(self):
        return np.stack([self.tbin, self.c, self.cs, self.cp, self.cps],
                        axis=1)

    def upsilon(self):
        """Exchange incoming and outgoing pairs; mass preserved exactly."""
        return FluxMeasure.from_entries(
            self.grid, self.tbin, self.cp, self.cps, self.c, self.cs,
            self.w, symmetrize=False)

    def negate_cells(self):
        """Central inversion v -> -v applied to all four slots."""
        n3 = self.grid.n_flat - 1

        def neg(flat):
            out = n3 - flat
            out[flat == OVERFLOW] = OVERFLOW
            return out

        return FluxMeasure.from_entries(
            self.grid, self.tbin, neg(self.c), neg(self.cs), neg(self.cp),
            neg(self.cps), self.w, symmetrize=False)

    def rows(self):
        for k in range(self.n_entries()):
            yield (int(self.tbin[k]), int(self.c[k]), int(self.cs[k]),
                   int(self.cp[k]), int(self.cps[k]), float(self.w[k]))

    csv_header = ("tbin", "c", "cs", "cp", "cps", "weight")

    def check_symmetry(self, tol=0.0):
        """Max defect of the two pair-exchange symmetries (should be ~0)."""
        sym1 = FluxMeasure.from_entries(self.grid, self.tbin, self.cs, self.c,
                                        self.cp, self.cps, self.w,
                                        symmetrize=False)
        sym2 = FluxMeasure.from_entries(self.grid, self.tbin, self.c, self.cs,
                                        self.cps, self.cp, self.w,
                                        symmetrize=False)
        return max(flux_tv(self, sym1), max(flux_tv(self, sym2), tol))


def align_fluxes(a, b):
    """Union support of two flux measures -> (keys, wa, wb) aligned arrays."""
    ka, kb = a.keys(), b.keys()
    allk = np.concatenate([ka, kb], axis=0)
    view = np.ascontiguousarray(allk).view(
        np.dtype((np.void, allk.dtype.itemsize * allk.shape[1])))
    uniq, inv = np.unique(view.ravel(), return_inverse=True)
    wa = np.zeros(uniq.shape[0])
    wb = np.zeros(uniq.shape[0])
    np.add.at(wa, inv[:ka.shape[0]], a.w)
    np.add.at(wb, inv[ka.shape[0]:], b.w)
    return uniq, wa, wb


def flux_tv(a, b):
    _, wa, wb = align_fluxes(a, b)
    return 0.5 * float(np.abs(wa - wb).sum())
