"""Branching mechanisms with local and non-local branching, and the backbone laws.

Lévy measures are restricted to finitely many atoms plus one exponential
density, which gives every integral used downstream a closed form.  All
scalar functions accept numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Literal

import numpy as np
from scipy import special, stats

from .errors import (
    GreyViolation,
    NoRoot,
    NotFinite,
    NotSupercritical,
    RepresentationMismatch,
    TailTooHeavy,
    ZeroProbabilityBranch,
)
from .motion import DisplacementKernel

__all__ = [
    "LevyMeasure",
    "Mechanism",
    "DerivedConstants",
    "OffspringLaws",
    "ImmigrationLaw",
    "eval_psi_bar",
    "derive_constants",
    "offspring_laws",
    "immigration_law",
    "subordinator_exponent",
    "subordinator_forms",
    "chi_derivatives",
    "chi_derivative_bound",
    "M0",
]

BranchType = Literal["local", "nonlocal"]


@dataclass(frozen=True)
class LevyMeasure:
    """``sum_i w_i delta_{y_i}(dy) + c exp(-rho y) dy`` on (0, inf)."""

    atoms: tuple = ()
    exp_coeff: float = 0.0
    exp_rate: float = 1.0

    def __post_init__(self):
        atoms = tuple((float(w), float(y)) for w, y in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        for w, y in atoms:
            if not (w > 0 and y > 0 and math.isfinite(w) and math.isfinite(y)):
                raise ValueError(f"Lévy atom ({w}, {y}) needs positive finite weight and location")
        if self.exp_coeff < 0:
            raise ValueError("exponential coefficient must be non-negative")
        if self.exp_coeff > 0 and not self.exp_rate > 0:
            raise ValueError("exponential rate must be positive")

    @property
    def is_zero(self) -> bool:
        return not self.atoms and self.exp_coeff == 0

    @property
    def _exp(self) -> bool:
        return self.exp_coeff > 0

    def moment(self, k: int) -> float:
        """Integral of y^k."""
        out = sum(w * y**k for w, y in self.atoms)
        if self._exp:
            out += self.exp_coeff * math.factorial(k) / self.exp_rate ** (k + 1)
        return out

    def total_mass(self) -> float:
        return self.moment(0)

    def small_jump_moment(self) -> float:
        """Integral of min(y, y^2); finite for every member of the family."""
        out = sum(w * min(y, y * y) for w, y in self.atoms)
        if self._exp:
            c, r = self.exp_coeff, self.exp_rate
            out += c * (2.0 / r**3 * special.gammainc(3, r) + special.gammaincc(2, r) / r**2)
        return out

    def laplace_moment(self, k: int, s):
        """Integral of y^k exp(-s y); requires s > -exp_rate."""
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape)
        for w, y in self.atoms:
            out = out + w * y**k * np.exp(-s * y)
        if self._exp:
            out = out + self.exp_coeff * math.factorial(k) / (self.exp_rate + s) ** (k + 1)
        return out if out.ndim else float(out)

    def poisson_tilt(self, n, lam: float):
        """Integral of (lam y)^n / n! exp(-lam y) Pi(dy) for integer n >= 0."""
        n = np.asarray(n)
        out = np.zeros(n.shape)
        for w, y in self.atoms:
            out = out + w * stats.poisson.pmf(n, lam * y)
        if self._exp:
            c, r = self.exp_coeff, self.exp_rate
            out = out + c / (lam + r) * (lam / (lam + r)) ** n
        return out if out.ndim else float(out)

    def poisson_tilt_tail(self, n_max: int, lam: float) -> float:
        """Sum of ``poisson_tilt(n, lam)`` over n > n_max, computed directly."""
        out = sum(w * stats.poisson.sf(n_max, lam * y) for w, y in self.atoms)
        if self._exp:
            c, r = self.exp_coeff, self.exp_rate
            out += c / r * (lam / (lam + r)) ** (n_max + 1)
        return float(out)

    def poisson_tilt_laplace(self, n: int, lam: float, s):
        """Integral of exp(-s y) (lam y)^n / n! exp(-lam y) Pi(dy)."""
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape)
        for w, y in self.atoms:
            out = out + w * stats.poisson.pmf(n, lam * y) * np.exp(-s * y)
        if self._exp:
            c, r = self.exp_coeff, self.exp_rate
            out = out + c * np.exp(n * math.log(lam) - (n + 1) * np.log(lam + r + s))
        return out if out.ndim else float(out)

    def tilted(self, lam: float) -> "LevyMeasure":
        """The measure exp(-lam y) Pi(dy)."""
        return LevyMeasure(
            atoms=tuple((w * math.exp(-lam * y), y) for w, y in self.atoms),
            exp_coeff=self.exp_coeff,
            exp_rate=self.exp_rate + lam,
        )

    def _mixture(self, n: int, lam: float):
        """Component weights of (lam y)^n/n! e^{-lam y} Pi(dy): atoms, then gamma."""
        atom_w = np.array([w * stats.poisson.pmf(n, lam * y) for w, y in self.atoms])
        gamma_w = 0.0
        if self._exp:
            c, r = self.exp_coeff, self.exp_rate
            gamma_w = c / (lam + r) * (lam / (lam + r)) ** n
        return atom_w, gamma_w

    def sample_jumps(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Jump sizes from the normalised measure."""
        atom_w = np.array([w for w, _ in self.atoms])
        gamma_w = self.exp_coeff / self.exp_rate if self._exp else 0.0
        return self._sample_mixture(atom_w, gamma_w, 1, self.exp_rate, rng, size)

    def sample_poisson_tilt(self, n: int, lam: float, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draws from the density proportional to (lam y)^n/n! e^{-lam y} Pi(dy)."""
        atom_w, gamma_w = self._mixture(n, lam)
        return self._sample_mixture(atom_w, gamma_w, n + 1, lam + self.exp_rate, rng, size)

    def _sample_mixture(self, atom_w, gamma_w, shape, rate, rng, size):
        weights = np.append(atom_w, gamma_w)
        total = weights.sum()
        if total <= 0:
            raise ValueError("cannot sample from a zero measure")
        locs = np.array([y for _, y in self.atoms] + [np.nan])
        comp = rng.choice(weights.size, size=size, p=weights / total)
        out = locs[comp]
        g = comp == weights.size - 1
        k = int(g.sum())
        if k:
            out[g] = rng.gamma(shape, 1.0 / rate, size=k)
        return out


@dataclass(frozen=True)
class Mechanism:
    """Spatially homogeneous local + non-local branching mechanism.

    psi^L(z) = alpha z + beta z^2 + int (e^{-zu} - 1 + zu) Pi^L(du)
    zeta(l)  = gamma l + int (1 - e^{-lu}) Pi^NL(du)
    psi^NL(x, f) = f(x) - zeta(pi(x, f))
    """

    alpha: float
    beta: float
    gamma: float
    pi_L: LevyMeasure = LevyMeasure()
    pi_NL: LevyMeasure = LevyMeasure()
    displacement: DisplacementKernel = DisplacementKernel()

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if not math.isfinite(self.pi_L.small_jump_moment()):
            raise ValueError("int (u ^ u^2) Pi^L(du) must be finite")
        nl_mean = self.pi_NL.moment(1)
        if not math.isfinite(nl_mean):
            raise ValueError("int u Pi^NL(du) must be finite")
        if self.gamma + nl_mean > 1 + 1e-12:
            raise ValueError(f"gamma + int u Pi^NL(du) = {self.gamma + nl_mean} exceeds 1")

    # local part ------------------------------------------------------------
    def psi_L(self, z):
        L = self.pi_L
        return (
            self.alpha * z
            + self.beta * np.square(z)
            + L.laplace_moment(0, z)
            - L.total_mass()
            + np.multiply(z, L.moment(1))
        )

    def phi_L(self, z):
        return self.psi_L(z) + z

    def dphi_L(self, z):
        L = self.pi_L
        return self.alpha + 1 + 2 * self.beta * np.asarray(z) + L.moment(1) - L.laplace_moment(1, z)

    # non-local part --------------------------------------------------------
    def zeta(self, lam):
        NL = self.pi_NL
        return self.gamma * np.asarray(lam) + NL.total_mass() - NL.laplace_moment(0, lam)

    def dzeta(self, lam):
        return self.gamma + self.pi_NL.laplace_moment(1, lam)

    # total mass ------------------------------------------------------------
    def psi_bar(self, lam):
        return self.phi_L(lam) - self.zeta(lam)

    def dpsi_bar(self, lam):
        return self.dphi_L(lam) - self.dzeta(lam)

    def conditioned(self, lambda_star: float) -> "Mechanism":
        """Mechanism of the process conditioned on extinction.

        Total mass of the result is governed by psi_bar(. + lambda_star).
        """
        return Mechanism(
            alpha=float(self.dphi_L(lambda_star)) - 1.0,
            beta=self.beta,
            gamma=self.gamma,
            pi_L=self.pi_L.tilted(lambda_star),
            pi_NL=self.pi_NL.tilted(lambda_star),
            displacement=self.displacement,
        )


M0 = Mechanism(alpha=-0.5, beta=1.0, gamma=1.0, displacement=DisplacementKernel.normal(0.0, 1.0))


def eval_psi_bar(mech: Mechanism, lam):
    lam_arr = np.asarray(lam)
    if np.any(lam_arr < 0):
        raise ValueError("lambda must be non-negative")
    return mech.psi_bar(lam)


@dataclass(frozen=True)
class DerivedConstants:
    lambda_star: float
    q: float
    mean_rate: float
    backbone_rate: float
    grey_lower_ok: bool
    grey_upper_ok: bool
    supercritical_ok: bool


def _find_lambda_star(mech: Mechanism, rtol: float) -> float:
    hi = 1.0
    for _ in range(200):
        if mech.psi_bar(hi) > 0:
            break
        hi *= 2.0
    else:
        raise NoRoot("psi_bar stays non-positive; no positive root bracketed")
    lo = hi
    for _ in range(200):
        lo *= 0.5
        if mech.psi_bar(lo) < 0:
            break
    else:
        raise NoRoot("could not bracket the positive root of psi_bar from below")
    if lo * 2 < hi:
        hi = lo * 2
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if mech.psi_bar(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def derive_constants(mech: Mechanism, tol: float = 1e-13, require_grey: bool = True) -> DerivedConstants:
    """lambda*, the backbone branching rate q and the criticality flags.

    With ``require_grey`` the non-explosion/extinction condition at
    infinity is enforced; within this Lévy family it holds iff beta > 0.
    """
    d0 = float(mech.dpsi_bar(0.0))
    if not math.isfinite(d0) or d0 >= 0:
        raise NotSupercritical(f"psi_bar'(0+) = {d0} is not negative")
    grey_upper = mech.beta > 0
    if require_grey and not grey_upper:
        raise GreyViolation("psi_bar grows linearly at infinity (beta = 0); int^inf 1/psi_bar diverges")
    lam = _find_lambda_star(mech, tol)
    q = float(mech.dphi_L(lam))
    return DerivedConstants(
        lambda_star=lam,
        q=q,
        mean_rate=-d0,
        backbone_rate=float(mech.dpsi_bar(lam)),
        grey_lower_ok=True,
        grey_upper_ok=grey_upper,
        supercritical_ok=True,
    )


@dataclass(frozen=True, eq=False)
class OffspringLaws:
    """Backbone offspring probabilities indexed by offspring number n."""

    p_local: np.ndarray
    p_nonlocal: np.ndarray
    tail_mass: float
    n_max: int

    @property
    def local_mass(self) -> float:
        return float(self.p_local.sum())

    @property
    def nonlocal_mass(self) -> float:
        return float(self.p_nonlocal.sum())

    @property
    def mean_offspring(self) -> float:
        n = np.arange(self.n_max + 1)
        return float(n @ (self.p_local + self.p_nonlocal))

    @cached_property
    def categories(self):
        """(is_local, n, probability) over all positive-probability outcomes."""
        n = np.arange(self.n_max + 1)
        loc = self.p_local > 0
        nl = self.p_nonlocal > 0
        is_local = np.concatenate([np.ones(loc.sum(), bool), np.zeros(nl.sum(), bool)])
        counts = np.concatenate([n[loc], n[nl]])
        probs = np.concatenate([self.p_local[loc], self.p_nonlocal[nl]])
        return is_local, counts, probs

    def sample(self, rng: np.random.Generator, size=None):
        """Inverse-CDF draws of (is_local, n), renormalised over the truncation."""
        is_local, counts, _ = self.categories
        idx = np.minimum(np.searchsorted(self._cdf, rng.random(size), side="right"), counts.size - 1)
        return is_local[idx], counts[idx]

    @cached_property
    def _cdf(self):
        cdf = np.cumsum(self.categories[2])
        return cdf / cdf[-1]


def offspring_laws(
    mech: Mechanism, consts: DerivedConstants, tail_tol: float = 1e-12, n_cap: int = 100_000
) -> OffspringLaws:
    lam, q = consts.lambda_star, consts.q
    norm = lam * q
    n_max = 2
    while True:
        tail = (mech.pi_L.poisson_tilt_tail(n_max, lam) + mech.pi_NL.poisson_tilt_tail(n_max, lam)) / norm
        if tail < tail_tol:
            break
        if n_max >= n_cap:
            raise TailTooHeavy(f"offspring tail mass {tail:.3g} still above {tail_tol:g} at n = {n_cap}")
        n_max = min(2 * n_max, n_cap)
    n = np.arange(n_max + 1)
    p_local = mech.pi_L.poisson_tilt(n, lam)
    p_local[2] += mech.beta * lam**2
    p_local[:2] = 0.0
    p_nonlocal = mech.pi_NL.poisson_tilt(n, lam)
    p_nonlocal[1] += lam * mech.gamma
    p_nonlocal[0] = 0.0
    return OffspringLaws(p_local / norm, p_nonlocal / norm, float(tail), n_max)


@dataclass(frozen=True)
class ImmigrationLaw:
    """Law of the mass immigrating at a branch point with n offspring.

    Mixture of an atom at zero, atoms at the Lévy-measure atoms, and a
    gamma component coming from the exponential density.
    """

    branch_type: str
    n: int
    atom_at_zero: float
    atom_probs: tuple
    atom_locs: tuple
    gamma_prob: float
    gamma_shape: float
    gamma_rate: float

    def laplace(self, s):
        """E exp(-s Y)."""
        s = np.asarray(s, dtype=float)
        out = np.full(s.shape, self.atom_at_zero)
        for p, y in zip(self.atom_probs, self.atom_locs):
            out = out + p * np.exp(-s * y)
        if self.gamma_prob > 0:
            out = out + self.gamma_prob * (self.gamma_rate / (self.gamma_rate + s)) ** self.gamma_shape
        return out if out.ndim else float(out)

    def mean(self) -> float:
        m = sum(p * y for p, y in zip(self.atom_probs, self.atom_locs))
        return m + self.gamma_prob * self.gamma_shape / self.gamma_rate

    @property
    def is_degenerate_zero(self) -> bool:
        return self.atom_at_zero == 1.0

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        probs = np.array((self.atom_at_zero,) + tuple(self.atom_probs) + (self.gamma_prob,))
        locs = np.array((0.0,) + tuple(self.atom_locs) + (np.nan,))
        n = 1 if size is None else size
        comp = rng.choice(probs.size, size=n, p=probs / probs.sum())
        out = locs[comp]
        g = comp == probs.size - 1
        if g.any():
            out[g] = rng.gamma(self.gamma_shape, 1.0 / self.gamma_rate, size=int(g.sum()))
        return out[0] if size is None else out


@lru_cache(maxsize=4096)
def immigration_law(mech: Mechanism, consts: DerivedConstants, branch_type: BranchType, n: int) -> ImmigrationLaw:
    lam = consts.lambda_star
    if branch_type == "local":
        if n < 2:
            raise ZeroProbabilityBranch("local branching needs n >= 2")
        levy, zero = mech.pi_L, (mech.beta * lam * lam if n == 2 else 0.0)
    elif branch_type == "nonlocal":
        if n < 1:
            raise ZeroProbabilityBranch("non-local branching needs n >= 1")
        levy, zero = mech.pi_NL, (lam * mech.gamma if n == 1 else 0.0)
    else:
        raise ValueError(f"unknown branch type {branch_type!r}")
    atom_w, gamma_w = levy._mixture(n, lam)
    total = zero + atom_w.sum() + gamma_w
    if not total > 0:
        raise ZeroProbabilityBranch(f"p^{branch_type}_{n} = 0; immigration law undefined")
    return ImmigrationLaw(
        branch_type=branch_type,
        n=n,
        atom_at_zero=float(zero / total),
        atom_probs=tuple(float(w / total) for w in atom_w),
        atom_locs=tuple(y for _, y in levy.atoms),
        gamma_prob=float(gamma_w / total),
        gamma_shape=n + 1.0,
        gamma_rate=lam + levy.exp_rate,
    )


def subordinator_forms(mech: Mechanism, consts: DerivedConstants, lam):
    """Phi(lam) computed as (phi^L)'(lam + lambda*) - (phi^L)'(lambda*) and in closed form."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("lambda must be non-negative")
    ls = consts.lambda_star
    via_derivative = mech.dphi_L(lam + ls) - mech.dphi_L(ls)
    L = mech.pi_L
    direct = 2 * mech.beta * lam + L.laplace_moment(1, ls) - L.laplace_moment(1, lam + ls)
    return via_derivative, direct


def subordinator_exponent(mech: Mechanism, consts: DerivedConstants, lam, rtol: float = 1e-10):
    """Laplace exponent of the immigration subordinator, checked two ways."""
    via_derivative, direct = subordinator_forms(mech, consts, lam)
    gap = np.abs(via_derivative - direct)
    if np.any(gap > rtol * (1 + np.abs(via_derivative))):
        raise RepresentationMismatch(f"subordinator exponent forms differ by {np.max(gap):.3g}")
    return via_derivative if np.ndim(via_derivative) else float(via_derivative)


def chi_derivatives(mech: Mechanism, consts: DerivedConstants, u, lam):
    """(chi^1_u)'(-lam) and (chi^2_u)'(-lam) for u >= 0, 0 <= lam <= lambda*."""
    ls, q = consts.lambda_star, consts.q
    u = np.asarray(u, dtype=float)
    lam = np.asarray(lam, dtype=float)
    d1 = q - 2 * mech.beta * lam + mech.pi_L.laplace_moment(1, ls + u) - mech.pi_L.laplace_moment(1, ls + u - lam)
    d2 = mech.gamma - mech.pi_NL.laplace_moment(1, ls + u - lam)
    return d1, d2


def chi_derivative_bound(mech: Mechanism, consts: DerivedConstants, u_bar: float, n_grid: int = 65) -> float:
    """Lipschitz constant K of the branch-point nonlinearity over [0, u_bar] x [0, lambda*]."""
    if u_bar < 0:
        raise ValueError("u_bar must be non-negative")
    u = np.linspace(0.0, u_bar, n_grid)[:, None]
    lam = np.linspace(0.0, consts.lambda_star, n_grid)[None, :]
    d1, d2 = chi_derivatives(mech, consts, u, lam)
    K = float(np.max(np.abs(d1) + np.abs(d2)))
    if not math.isfinite(K):
        raise NotFinite("chi derivative bound diverges")
    return K
