"""Structured 2-D grid, scalar fields, and discrete operators.

The domain is a rectangle of size ``lx``-by-``ly`` split into ``nx``-by-``ny``
uniform cells; fields live at cell centers.  Arrays are indexed ``[j, i]``
with row ``j`` the y index and column ``i`` the x index, so a row-major
flatten walks along x first.  The x axis is periodic; the y axis has
zero-flux walls realized by ghost-cell mirroring.  This is the only
boundary combination supported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell-centered grid on a periodic-x, walled-y rectangle."""

    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("domain lengths must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape (ny, nx) of fields on this grid."""
        return (self.ny, self.nx)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, y) center coordinate arrays, each of shape (ny, nx)."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y)


@dataclass(frozen=True)
class BoundarySpec:
    """Boundary handling per axis.  Only periodic-x with zero-flux-y exists."""

    x_axis: str = "periodic"
    y_axis: str = "zero-flux"

    def __post_init__(self):
        if (self.x_axis, self.y_axis) != ("periodic", "zero-flux"):
            raise ValueError(
                "unsupported boundary combination: "
                f"({self.x_axis!r}, {self.y_axis!r})"
            )


@dataclass
class ScalarField:
    """A float64 field on a :class:`GridSpec`, stored as a (ny, nx) array."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid {self.grid.shape}"
            )

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def mean(self) -> float:
        """Domain mean; cells are uniform so this is the plain average."""
        return float(self.values.mean())


@dataclass
class FieldPair:
    """Composition fields (a, b) sharing one grid; c follows from balance."""

    grid: GridSpec
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        for name, arr in (("a", self.a), ("b", self.b)):
            if arr.shape != self.grid.shape:
                raise ValueError(
                    f"{name} shape {arr.shape} does not match grid {self.grid.shape}"
                )

    @property
    def c(self) -> np.ndarray:
        """Third composition by material balance, c = 1 - a - b."""
        return 1.0 - self.a - self.b

    def copy(self) -> "FieldPair":
        return FieldPair(self.grid, self.a.copy(), self.b.copy())


# ---------------------------------------------------------------------------
# array kernels (hot path: plain ndarrays, spacing passed explicitly)

def lap_values(v: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """5-point Laplacian of a (..., ny, nx) array, periodic in x, mirrored in y.

    Leading axes are broadcast, so stacked fields transform in one call.
    """
    out = np.roll(v, -1, axis=-1)
    out += np.roll(v, 1, axis=-1)
    out -= 2.0 * v
    out /= dx * dx
    ypart = np.empty_like(v)
    ypart[..., 1:-1, :] = v[..., 2:, :] - 2.0 * v[..., 1:-1, :] + v[..., :-2, :]
    # ghost rows mirror the edge rows, so the wall-normal difference drops out
    ypart[..., 0, :] = v[..., 1, :] - v[..., 0, :]
    ypart[..., -1, :] = v[..., -2, :] - v[..., -1, :]
    ypart /= dy * dy
    out += ypart
    return out


def div_m_grad_values(m: np.ndarray, mu: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Conservative divergence of m * grad(mu) with face-averaged mobility.

    Fluxes are evaluated on cell faces with the arithmetic mean of the two
    adjacent mobility values; wall-normal fluxes at the y boundaries are
    exactly zero, and x faces wrap periodically.  Arrays are (..., ny, nx)
    with leading axes broadcast.
    """
    m_e = 0.5 * (m + np.roll(m, -1, axis=-1))
    fx = m_e * (np.roll(mu, -1, axis=-1) - mu)
    fx /= dx
    out = fx - np.roll(fx, 1, axis=-1)
    out /= dx
    m_n = 0.5 * (m[..., 1:, :] + m[..., :-1, :])
    fy = m_n * (mu[..., 1:, :] - mu[..., :-1, :])
    fy /= dy * dy
    out[..., :-1, :] += fy
    out[..., 1:, :] -= fy
    return out


# ---------------------------------------------------------------------------
# field-level wrappers

_DEFAULT_BC = BoundarySpec()


def laplacian(f: ScalarField, bc: BoundarySpec = _DEFAULT_BC) -> ScalarField:
    """Discrete Laplacian of ``f`` honoring the grid's boundary conditions.

    Parameters
    ----------
    f : ScalarField
        Input field.
    bc : BoundarySpec
        Boundary handling; only the default combination is valid.

    Returns
    -------
    ScalarField
        The 5-point Laplacian, second-order accurate in the cell size.
    """
    g = f.grid
    return ScalarField(g, lap_values(f.values, g.dx, g.dy))


def div_mobility_grad(m: ScalarField, mu: ScalarField,
                      bc: BoundarySpec = _DEFAULT_BC) -> ScalarField:
    """Conservative transport operator div(m grad mu).

    Parameters
    ----------
    m : ScalarField
        Cell-centered mobility, must be nonnegative everywhere.
    mu : ScalarField
        Potential whose gradient drives the flux.

    Returns
    -------
    ScalarField
        Net flux divergence per cell.  Its area-weighted sum telescopes to
        zero, which is what makes the time integration conservative.
    """
    if m.grid != mu.grid:
        raise ValueError("mobility and potential live on different grids")
    if m.values.min() < 0.0:
        raise ValueError("mobility must be nonnegative")
    g = m.grid
    return ScalarField(g, div_m_grad_values(m.values, mu.values, g.dx, g.dy))
