"""Flux laws sigma(xi) = phi(|xi|) xi and the four least-squares weighting schemes."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("convex-energy", "forchheimer", "linear-identity")

# Constitutive residual a*p - b*grad(u) per scheme, with w2 = Lambda2 / sqrt(Lambda1):
#   emphasized-gradient   p - w2^2 grad u
#   balanced              w2^-1 p - w2 grad u
#   downscaled-flux       w2^-2 p - grad u
#   split                 Lambda1 p - Lambda2^2 grad u
SCHEMES = ("emphasized-gradient", "balanced", "downscaled-flux", "split")

FORCHHEIMER_K1 = 0.2
FORCHHEIMER_K2 = 20.0
FORCHHEIMER_GRAD_BOUND = 1e-2


class Nonlinearity:
    """Scalar coefficient phi with bounds Lambda1 <= eigenvalues of Dsigma <= Lambda2."""

    def __init__(self, kind: str, phi: Callable, dphi: Callable, lambda1: float, lambda2: float,
                 k1: Optional[float] = None, k2: Optional[float] = None,
                 grad_bound: Optional[float] = None):
        _check_lambdas(lambda1, lambda2)
        self.kind = kind
        self.phi = phi
        self.dphi = dphi
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)
        self.k1 = k1
        self.k2 = k2
        self.grad_bound = grad_bound

    def __repr__(self) -> str:
        return f"Nonlinearity({self.kind}, lambda1={self.lambda1:.6g}, lambda2={self.lambda2:.6g})"

    def sigma(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        t = np.linalg.norm(xi, axis=-1)
        return self.phi(t)[..., None] * xi

    def dsigma(self, xi) -> np.ndarray:
        """phi(|xi|) I + phi'(|xi|) |xi| s s^T with s = xi/|xi|; phi(0) I at xi = 0."""
        xi = np.asarray(xi, dtype=float)
        t = np.linalg.norm(xi, axis=-1)
        s = xi / np.where(t > 0, t, 1.0)[..., None]
        outer = s[..., :, None] * s[..., None, :]
        radial = np.where(t > 0, self.dphi(t) * t, 0.0)
        return self.phi(t)[..., None, None] * np.eye(2) + radial[..., None, None] * outer


def sigma(nl: Nonlinearity, xi) -> np.ndarray:
    return nl.sigma(xi)


def dsigma(nl: Nonlinearity, xi) -> np.ndarray:
    return nl.dsigma(xi)


def convex_energy() -> Nonlinearity:
    """phi(t) = 2 + 1/(1 + t), the minimizer of the energy with density Phi(t) = int_0^t s phi(s) ds."""
    return Nonlinearity(
        "convex-energy",
        phi=lambda t: 2.0 + 1.0 / (1.0 + t),
        dphi=lambda t: -1.0 / (1.0 + t) ** 2,
        lambda1=2.0,
        lambda2=3.0,
    )


def forchheimer(k1: float = FORCHHEIMER_K1, k2: float = FORCHHEIMER_K2,
                grad_bound: float = FORCHHEIMER_GRAD_BOUND) -> Nonlinearity:
    """phi(t) = 2/(k1 + sqrt(k1^2 + k2 t)); Lambda1 = phi + t phi' at the gradient bound."""
    if k1 <= 0 or k2 < 0 or grad_bound <= 0:
        raise ValueError("forchheimer needs k1 > 0, k2 >= 0 and a positive gradient bound")

    def phi(t):
        return 2.0 / (k1 + np.sqrt(k1 * k1 + k2 * t))

    def dphi(t):
        root = np.sqrt(k1 * k1 + k2 * t)
        return -k2 / ((k1 + root) ** 2 * root)

    root = math.sqrt(k1 * k1 + k2 * grad_bound)
    lambda1 = 2.0 * k1 / ((k1 + root) * root)
    return Nonlinearity("forchheimer", phi, dphi, lambda1, 1.0 / k1,
                        k1=k1, k2=k2, grad_bound=grad_bound)


def linear_identity() -> Nonlinearity:
    return Nonlinearity(
        "linear-identity",
        phi=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        dphi=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        lambda1=1.0,
        lambda2=1.0,
    )


def make_nonlinearity(kind: str, **params) -> Nonlinearity:
    factories = {
        "convex-energy": convex_energy,
        "forchheimer": forchheimer,
        "linear-identity": linear_identity,
    }
    if kind not in factories:
        raise ValueError(f"unknown nonlinearity '{kind}' (expected one of {', '.join(KINDS)})")
    return factories[kind](**params)


def _check_lambdas(lambda1: float, lambda2: float) -> None:
    if not (lambda1 > 0 and lambda2 > 0):
        raise ValueError(f"Lambda values must be positive (got {lambda1}, {lambda2})")
    if lambda1 > lambda2:
        raise ValueError(f"Lambda1 = {lambda1} exceeds Lambda2 = {lambda2}")


def _check_scheme(scheme: str) -> None:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}' (expected one of {', '.join(SCHEMES)})")


@dataclass(frozen=True)
class WeightedScheme:
    """Unified weights: div weight w1 (stored squared) and residual a*p - b*grad(u)."""

    scheme: str
    w1_sq: float
    a: float
    b: float
    lambda1: float
    lambda2: float

    @property
    def w1(self) -> float:
        return math.sqrt(self.w1_sq)

    @property
    def omega2(self) -> float:
        return self.lambda2 / math.sqrt(self.lambda1)

    def equivalence_bounds(self) -> Tuple[float, float]:
        """(lower, upper) with lower |||.|||_w^2 <= |||.|||_A^2 <= upper |||.|||_w^2."""
        return min(0.5, 1.0 / (1.0 + 4.0 * self.a ** 2 / self.w1_sq)), 2.0


def compute_weights(scheme: str, lambda1: float, lambda2: float) -> WeightedScheme:
    _check_scheme(scheme)
    _check_lambdas(lambda1, lambda2)
    omega2_sq = lambda2 ** 2 / lambda1
    omega2 = math.sqrt(omega2_sq)
    if scheme == "emphasized-gradient":
        w1_sq, a, b = 2.0 * omega2_sq / lambda1, 1.0, omega2_sq
    elif scheme == "balanced":
        w1_sq, a, b = 2.0 * omega2 / lambda1, 1.0 / omega2, omega2
    elif scheme == "downscaled-flux":
        w1_sq, a, b = 2.0 / lambda1, 1.0 / omega2_sq, 1.0
    else:
        w1_sq, a, b = 2.0 * lambda2 ** 2 / lambda1, lambda1, lambda2 ** 2
    return WeightedScheme(scheme, w1_sq, a, b, float(lambda1), float(lambda2))


@dataclass(frozen=True)
class ContractionConstants:
    """Monotonicity alpha_ls and Lipschitz l_ls of the LS operator in the A-norm."""

    alpha_ls: float
    l_ls: float

    @property
    def delta_star(self) -> float:
        return 2.0 * self.alpha_ls / self.l_ls ** 2

    def in_range(self, delta: float) -> bool:
        return 0.0 < delta < self.delta_star

    def rho_z(self, delta: float) -> float:
        """sqrt(1 - 2 delta alpha + delta^2 L^2), clamped to [0, 1)."""
        if not self.in_range(delta):
            log.warning("damping %g outside (0, %.4g): no contraction guarantee", delta, self.delta_star)
        value = 1.0 - 2.0 * delta * self.alpha_ls + (delta * self.l_ls) ** 2
        return min(math.sqrt(max(value, 0.0)), math.nextafter(1.0, 0.0))


def contraction_constants(scheme: str, lambda1: float, lambda2: float) -> ContractionConstants:
    _check_scheme(scheme)
    _check_lambdas(lambda1, lambda2)
    l1, l2 = float(lambda1), float(lambda2)
    if scheme == "emphasized-gradient":
        alpha = l1 ** 2 / (8.0 * l2 ** 2)
        lip = 4.0 * max(2.0, 1.0 + 2.0 * l1 ** 2 / l2 ** 2)
    elif scheme == "balanced":
        alpha = 0.5 * min(0.5, l2 / l1 ** 0.5, l1 ** 1.5 / (4.0 * l2))
        lip = (4.0 * max(1.0, l2 / l1 ** 0.5, l1 ** 1.5 / (2.0 * l2))
               * max(2.0, 1.0 + 2.0 * l1 ** 2.5 / l2 ** 3))
    elif scheme == "downscaled-flux":
        alpha = 0.5 * min(0.5, l2 ** 2 / (2.0 * l1), l1 / 4.0)
        lip = (4.0 * max(1.0, l2 ** 2 / l1, l2, l1 ** 0.5 / math.sqrt(2.0))
               * max(2.0, 1.0 + 2.0 * l1 ** 3 / l2 ** 4))
    else:
        alpha = 0.5 * min(0.5, 1.0 / (2.0 * l1), l1 / (4.0 * l2 ** 2))
        lip = (4.0 * max(1.0, 1.0 / l1, 1.0 / l2, l1 / (2.0 * l2 ** 2))
               * max(2.0, 1.0 + 2.0 * l1 ** 3 / l2 ** 2))
    return ContractionConstants(alpha, lip)
