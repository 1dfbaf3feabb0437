"""Mixing thermodynamics of a ternary polymer blend.

Compositions are site fractions (a, b, c) with c = 1 - a - b.  The
homogeneous mixing energy per site, in thermal units, is

    g = a/n_a ln a + b/n_b ln b + c/n_c ln c
        + chi_ab a b + chi_ac a c + chi_bc b c

and spatial heterogeneity is penalized through squared-gradient terms with
coefficients derived from the interaction parameters.  Lengths are measured
in units of ``d_p`` (taken equal to the chain radius of gyration by
default), which makes the gradient coefficients dimensionless.

Logarithms are evaluated on compositions clamped to [1e-9, 1 - 1e-9]; the
clamp is applied inside the log only, so slight transient overshoots of the
fields stay finite without distorting the algebraic terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import FieldPair, lap_values

CLAMP_FLOOR = 1e-9
CLAMP_CEIL = 1.0 - 1e-9


@dataclass(frozen=True)
class BlendParams:
    """Chain lengths, interaction parameters, and physical scales."""

    chi_ab: float
    chi_ac: float
    chi_bc: float
    n_a: float = 1000.0
    n_b: float = 1000.0
    n_c: float = 1000.0
    r_g: float = 200e-10    # chain radius of gyration [m]
    d_p: float = 200e-10    # length unit [m]
    d_ab: float = 1e-11     # reference diffusivity [m^2/s], sets the clock

    def __post_init__(self):
        for name in ("chi_ab", "chi_ac", "chi_bc"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("n_a", "n_b", "n_c"):
            if getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be at least 1")
        for name in ("r_g", "d_p", "d_ab"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class KappaSet:
    """Dimensionless gradient-energy coefficients (units of d_p^2)."""

    k_a: float
    k_b: float
    k_ab: float


def kappa_from_chi(params: BlendParams) -> KappaSet:
    """Gradient coefficients from the interaction parameters.

    k_a and k_b penalize gradients of a and b individually; k_ab couples
    them.  All scale with (r_g / d_p)^2.
    """
    s = (params.r_g / params.d_p) ** 2
    k_a = (2.0 / 3.0) * s * params.chi_ac
    k_b = (2.0 / 3.0) * s * params.chi_bc
    k_ab = (1.0 / 3.0) * s * (params.chi_ac + params.chi_bc - params.chi_ab)
    return KappaSet(k_a=k_a, k_b=k_b, k_ab=k_ab)


def _cl(x):
    return np.clip(x, CLAMP_FLOOR, CLAMP_CEIL)


def homog_energy(a: np.ndarray, b: np.ndarray, params: BlendParams) -> np.ndarray:
    """Homogeneous mixing energy density g(a, b, 1-a-b), elementwise."""
    c = 1.0 - a - b
    g = a / params.n_a * np.log(_cl(a))
    g += b / params.n_b * np.log(_cl(b))
    g += c / params.n_c * np.log(_cl(c))
    g += params.chi_ab * a * b
    g += params.chi_ac * a * c
    g += params.chi_bc * b * c
    return g


def dg_partials(a: np.ndarray, b: np.ndarray, params: BlendParams):
    """Partials of g with respect to (a, b, c) treated as independent.

    Returns
    -------
    (dg_da, dg_db, dg_dc) : tuple of ndarray
        The material-balance reduction happens downstream, in the
        chemical-potential differences; here c = 1 - a - b is only used
        to evaluate the c-dependent terms.
    """
    c = 1.0 - a - b
    dg_da = (np.log(_cl(a)) + 1.0) / params.n_a + params.chi_ab * b + params.chi_ac * c
    dg_db = (np.log(_cl(b)) + 1.0) / params.n_b + params.chi_ab * a + params.chi_bc * c
    dg_dc = (np.log(_cl(c)) + 1.0) / params.n_c + params.chi_ac * a + params.chi_bc * b
    return dg_da, dg_db, dg_dc


def mu_differences(f: FieldPair, params: BlendParams, kappas: KappaSet):
    """Pairwise chemical-potential differences (mu_ab, mu_ac, mu_bc).

    Each difference combines the homogeneous partials with gradient-energy
    contributions; they are the discrete variational derivatives of
    :func:`gibbs_total` under the material balance (perturbing a at fixed b
    gives mu_ac, perturbing b at fixed a gives mu_bc).
    """
    g = f.grid
    la = lap_values(f.a, g.dx, g.dy)
    lb = lap_values(f.b, g.dx, g.dy)
    dg_da, dg_db, dg_dc = dg_partials(f.a, f.b, params)
    k_a, k_b, k_ab = kappas.k_a, kappas.k_b, kappas.k_ab
    mu_ab = dg_da - dg_db - (k_a - k_ab) * la + (k_b - k_ab) * lb
    mu_ac = dg_da - dg_dc - k_a * la - k_ab * lb
    mu_bc = dg_db - dg_dc - k_b * lb - k_ab * la
    return mu_ab, mu_ac, mu_bc


def gibbs_total(f: FieldPair, params: BlendParams, kappas: KappaSet) -> float:
    """Total Gibbs energy: mixing term plus squared-gradient penalty.

    The gradient terms are accumulated on cell faces (periodic in x,
    interior faces only in y, matching the mirrored walls), which makes
    this functional the exact discrete antiderivative of the potentials
    in :func:`mu_differences`.
    """
    g = f.grid
    total = float(homog_energy(f.a, f.b, params).sum())

    dax = (np.roll(f.a, -1, axis=1) - f.a) / g.dx
    dbx = (np.roll(f.b, -1, axis=1) - f.b) / g.dx
    day = (f.a[1:] - f.a[:-1]) / g.dy
    dby = (f.b[1:] - f.b[:-1]) / g.dy
    k_a, k_b, k_ab = kappas.k_a, kappas.k_b, kappas.k_ab
    total += float(
        (0.5 * k_a * dax * dax + 0.5 * k_b * dbx * dbx + k_ab * dax * dbx).sum()
    )
    total += float(
        (0.5 * k_a * day * day + 0.5 * k_b * dby * dby + k_ab * day * dby).sum()
    )
    return total * g.cell_area
