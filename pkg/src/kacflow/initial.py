"""Initial data: the microcanonical sampler, chaotic (iid + conditioning)
samplers, the Maxwellian reference, and the built-in non-equilibrium presets.

Both samplers emit exact members of the constraint set (zero mean momentum,
mean kinetic energy exactly e) by construction.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .core import Configuration, sphere_surface
from .grids import GridMeasure, GridSpec

__all__ = [
    "maxwellian", "MaxwellianRef", "sample_microcanonical", "sample_chaotic",
    "ChaoticSample", "preset_sampler", "PRESETS", "shell_entropy_facts",
    "two_bump_sampler", "shell_sampler", "SHELL_WIDTH",
]


@dataclass(frozen=True)
class MaxwellianRef:
    """The d-dimensional Maxwellian of zero mean and energy e.

    Per-component variance theta = 2e/d (inverse temperature beta = d/(2e)
    in the convention density ~ exp(-beta |v|^2 / 2)).
    """

    e: float
    d: int

    @property
    def theta(self):
        return 2.0 * self.e / self.d

    @property
    def beta(self):
        return self.d / (2.0 * self.e)

    def density(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        z = (2.0 * math.pi * self.theta) ** (-0.5 * self.d)
        return z * np.exp(-0.5 * (points ** 2).sum(axis=1) / self.theta)

    def log_density(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (-0.5 * self.d * math.log(2.0 * math.pi * self.theta)
                - 0.5 * (points ** 2).sum(axis=1) / self.theta)

    def entropy(self):
        """H = int dM_e ln(dM_e/dv) = -(d/2)(ln(4 pi e / d) + 1)."""
        return -0.5 * self.d * (math.log(4.0 * math.pi * self.e / self.d) + 1.0)

    def sample(self, n, rng):
        return rng.normal(scale=math.sqrt(self.theta), size=(n, self.d))

    def speed_cdf(self, r):
        """CDF of |v| (chi law with d degrees of freedom, scale sqrt(theta))."""
        r = np.asarray(r, dtype=np.float64)
        x = r / math.sqrt(self.theta)
        if self.d == 3:
            return special.erf(x / math.sqrt(2.0)) - np.sqrt(2.0 / math.pi) \
                * x * np.exp(-0.5 * x ** 2)
        return 1.0 - np.exp(-0.5 * x ** 2)

    def binned_centers(self, grid):
        """Finite measure with cell weights density(center) * h^d.

        This center-evaluated reference is the one entering the gridded
        entropy functionals: against it the identity relating the entropy
        relative to the Maxwellian and the plain grid entropy cancels
        exactly, cell by cell (see entropy.h_e).  Mass is 1 - O(h^2 + tail).
        """
        occ = np.arange(grid.n_flat)
        centers = grid.centers(occ)
        w = self.density(centers) * grid.h ** grid.d
        return GridMeasure(grid, w, 0.0)

    def binned_exact(self, grid):
        """Probability with exact per-cell Gaussian masses (product of erfs)."""
        edges = -grid.v_max + grid.h * np.arange(grid.n_cells + 1)
        z = edges / math.sqrt(2.0 * self.theta)
        cdf = 0.5 * (1.0 + special.erf(z))
        per_axis = np.diff(cdf)
        w = per_axis.copy()
        for _ in range(grid.d - 1):
            w = np.multiply.outer(w, per_axis)
        w = w.reshape(-1)
        return GridMeasure(grid, w, max(0.0, 1.0 - float(w.sum())))


def maxwellian(e, d):
    if not e > 0:
        raise ValueError("energy per particle must be positive")
    return MaxwellianRef(float(e), int(d))


def _condition(samples, e):
    """Shift to zero mean and rescale to energy exactly e; return record."""
    n = samples.shape[0]
    shift = samples.mean(axis=0)
    v = samples - shift[None, :]
    ssq = float((v ** 2).sum())
    if ssq <= 0.0:
        raise ValueError("degenerate sample: zero energy after centering")
    scale = math.sqrt(2.0 * e * n / ssq)
    return v * scale, shift, scale


def sample_microcanonical(N, d, e, rng):
    """Uniform sample of the microcanonical set.

    An iid standard Gaussian cloud, centered and rescaled, is uniform on the
    energy sphere intersected with the zero-momentum plane (rotation
    invariance of the centered Gaussian).
    """
    if N < 2:
        raise ValueError("need at least two particles")
    g = rng.normal(size=(N, d))
    v, _, _ = _condition(g, e)
    return Configuration(v, e)


@dataclass
class ChaoticSample:
    cfg: Configuration
    shift: np.ndarray     # empirical mean removed (O(N^-1/2) per component)
    scale: float          # speed rescale factor applied (1 + O(N^-1/2))


def sample_chaotic(N, d, e, source_sampler, rng):
    """iid draws from a one-particle law, conditioned onto the constraint set.

    ``source_sampler(n, rng) -> (n, d)`` must have zero mean and energy e;
    the applied shift/scale (vanishing as N grows) is recorded.
    """
    samples = np.asarray(source_sampler(N, rng), dtype=np.float64)
    if samples.shape != (N, d):
        raise ValueError("source sampler returned wrong shape")
    v, shift, scale = _condition(samples, e)
    return ChaoticSample(Configuration(v, e), shift, scale)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

SHELL_WIDTH = 0.2


def two_bump_sampler(e, d):
    """Symmetric two-bump Gaussian mixture: centers +-sqrt(e) e1, it shares
    the Maxwellian's zero mean and energy e (per-component variance e/d)."""
    mu = math.sqrt(e)
    tau = math.sqrt(e / d)

    def sampler(n, rng):
        v = rng.normal(scale=tau, size=(n, d))
        sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        v[:, 0] += sign * mu
        return v

    return sampler


def _shell_radii(e, d, width):
    r0 = math.sqrt(2.0 * e / (1.0 + width ** 2 / 12.0))
    a = r0 * (1.0 - 0.5 * width)
    b = r0 * (1.0 + 0.5 * width)
    return r0, a, b


def shell_sampler(e, d, width=SHELL_WIDTH):
    """Thin spherical shell: speed uniform on [r0(1-w/2), r0(1+w/2)],
    direction uniform; strongly non-Maxwellian with closed-form entropy.

    r0 solves E|v|^2 = r0^2 (1 + w^2/12) = 2e, so the energy is exactly e in
    expectation (and exactly after conditioning).
    """
    _, a, b = _shell_radii(e, d, width)

    def sampler(n, rng):
        r = a + (b - a) * rng.random(n)
        g = rng.normal(size=(n, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return r[:, None] * g

    return sampler


def shell_entropy_facts(e, d, width=SHELL_WIDTH):
    """Closed forms for the shell preset: H(P) = int dP ln f and
    Ent(P | M_e), for exact moments (zero mean, energy e).

    f(v) = 1 / ((b - a) S_d |v|^{d-1}) on the shell, so
    H = -ln((b-a) S_d) - (d-1) E[ln r] with
    E[ln r] = (b ln b - a ln a)/(b - a) - 1, and
    Ent(P|M_e) = H + (d/2) ln(4 pi e / d) + d/2.
    """
    _, a, b = _shell_radii(e, d, width)
    e_logr = (b * math.log(b) - a * math.log(a)) / (b - a) - 1.0
    h = -math.log((b - a) * sphere_surface(d)) - (d - 1) * e_logr
    ent = h + 0.5 * d * math.log(4.0 * math.pi * e / d) + 0.5 * d
    return {"H": h, "ent_vs_maxwellian": ent, "r_lo": a, "r_hi": b}


def shell_speed_cdf(e, d, width=SHELL_WIDTH):
    _, a, b = _shell_radii(e, d, width)

    def cdf(r):
        r = np.asarray(r, dtype=np.float64)
        return np.clip((r - a) / (b - a), 0.0, 1.0)

    return cdf


def preset_sampler(name, e, d):
    """One-particle law samplers referenced by name in configs."""
    if name == "maxwellian":
        ref = maxwellian(e, d)
        return ref.sample
    if name == "two_bump":
        return two_bump_sampler(e, d)
    if name == "shell":
        return shell_sampler(e, d)
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("maxwellian", "two_bump", "shell")
