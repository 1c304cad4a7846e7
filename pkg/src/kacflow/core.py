"""Domain types and velocity-space geometry shared by all modules.

Conventions used throughout the package:

- a configuration is an (N, d) float64 array of velocities constrained to the
  microcanonical set {mean momentum 0, mean kinetic energy e per particle};
- the conserved pair is zeta(v) = (|v|^2 / 2, v);
- the hard-sphere collision kernel is B(u, omega) = |u . omega| / 2, whose
  sphere integral is (kappa_d / 2) |u| with kappa_3 = 2 pi, kappa_2 = 4;
- all reals are float64, entropies are in nats.
"""

import math
from dataclasses import dataclass, field

import numpy as np

# Relative tolerance for microcanonical membership; well above double noise
# for N <= 1e6, well below any physical signal.
TOL_CFG = 1e-10

SUPPORTED_DIMS = (2, 3)

HARD_SPHERE = "hard_sphere"
MAXWELL = "maxwell"


def kappa(d):
    """kappa_d = int_{S^{d-1}} |e . omega| domega (hard-sphere rate constant)."""
    if d == 3:
        return 2.0 * math.pi
    if d == 2:
        return 4.0
    raise ValueError(f"dimension must be one of {SUPPORTED_DIMS}, got {d}")


def sphere_surface(d):
    """|S^{d-1}|: surface measure of the unit sphere in R^d."""
    if d == 3:
        return 4.0 * math.pi
    if d == 2:
        return 2.0 * math.pi
    raise ValueError(f"dimension must be one of {SUPPORTED_DIMS}, got {d}")


def maxwell_mean_speed(e, d):
    """E|v| under the Maxwellian of energy e (per-component variance 2e/d)."""
    theta = 2.0 * e / d
    if d == 3:
        return math.sqrt(theta) * math.sqrt(8.0 / math.pi)
    return math.sqrt(theta) * math.sqrt(math.pi / 2.0)


def mean_free_time(e, d=3):
    """Equilibrium mean free time 1 / ((kappa_d / 2) E|v|).

    The collision frequency is evaluated with the Maxwellian mean speed
    (Clausius convention).  Study horizons are specified in these units.
    """
    if e <= 0:
        raise ValueError("energy per particle must be positive")
    return 1.0 / (0.5 * kappa(d) * maxwell_mean_speed(e, d))


@dataclass(frozen=True)
class KernelSpec:
    """Collision kernel selector.

    ``hard_sphere``: B(u, omega) = |u . omega| / 2 (the physical kernel).
    ``maxwell``: constant B = b, used only as a validation oracle (the
    constant-kernel equation has a closed-form relaxing solution family).
    """

    kind: str = HARD_SPHERE
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in (HARD_SPHERE, MAXWELL):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == MAXWELL and not self.b > 0:
            raise ValueError("constant kernel requires b > 0")

    def evaluate(self, u, omega):
        """Pointwise kernel value B(u, omega); u, omega are d-vectors."""
        if self.kind == HARD_SPHERE:
            return 0.5 * abs(float(np.dot(u, omega)))
        return self.b

    def as_dict(self):
        if self.kind == HARD_SPHERE:
            return {"kind": self.kind}
        return {"kind": self.kind, "b": self.b}


def hard_sphere_kernel():
    return KernelSpec(HARD_SPHERE)


def maxwell_kernel(b=1.0):
    return KernelSpec(MAXWELL, b)


def eval_zeta(v):
    """Conserved observables of one velocity: (|v|^2 / 2, v)."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("velocity has non-finite components")
    return 0.5 * float(v @ v), v


@dataclass
class Configuration:
    """N velocities on the microcanonical set of energy e per particle."""

    velocities: np.ndarray
    e: float
    # populated by __post_init__
    N: int = field(init=False)
    d: int = field(init=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.velocities, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("velocities must be an (N, d) array")
        self.velocities = v
        self.N, self.d = v.shape
        if self.d not in SUPPORTED_DIMS:
            raise ValueError(
                f"dimension must be one of {SUPPORTED_DIMS}, got {self.d}")
        if self.N < 2:
            raise ValueError("need at least two particles")
        if not self.e > 0:
            raise ValueError("energy per particle must be positive")
        if not np.all(np.isfinite(v)):
            raise ValueError("velocities contain non-finite values")

    def copy(self):
        return Configuration(self.velocities.copy(), self.e)

    def energy_per_particle(self):
        # fsum keeps the diagnostic itself free of naive-summation error
        return math.fsum((self.velocities ** 2).sum(axis=1).tolist()) / (2.0 * self.N)

    def mean_velocity(self):
        return np.array(
            [math.fsum(self.velocities[:, a].tolist()) / self.N
             for a in range(self.d)])


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    energy_drift: float     # |mean zeta0 - e| / e
    momentum_drift: float   # max_a |mean v_a| / sqrt(2 e)
    tol: float = TOL_CFG

    def as_dict(self):
        return {
            "ok": bool(self.ok),
            "energy_drift": float(self.energy_drift),
            "momentum_drift": float(self.momentum_drift),
            "tol": float(self.tol),
        }


def validate_configuration(cfg, tol=TOL_CFG):
    """Report relative energy drift and momentum drift; pass iff both <= tol.

    Pure and idempotent; signals (via ``ok=False``) that re-projection is
    needed, never mutates.
    """
    e_hat = cfg.energy_per_particle()
    mu = cfg.mean_velocity()
    energy_drift = abs(e_hat - cfg.e) / cfg.e
    momentum_drift = float(np.max(np.abs(mu))) / math.sqrt(2.0 * cfg.e)
    ok = energy_drift <= tol and momentum_drift <= tol
    return ValidationReport(ok, energy_drift, momentum_drift, tol)


def reproject(cfg):
    """Exact re-projection onto the microcanonical set.

    Subtracts the mean velocity, then rescales speeds so the mean kinetic
    energy is exactly e.  The per-component change is first-order in the
    pre-existing drift.
    """
    v = cfg.velocities - cfg.mean_velocity()[None, :]
    ssq = math.fsum((v ** 2).sum(axis=1).tolist())
    if ssq <= 0.0:
        raise ValueError("degenerate configuration: all velocities equal")
    v *= math.sqrt(2.0 * cfg.e * cfg.N / ssq)
    return Configuration(v, cfg.e)
