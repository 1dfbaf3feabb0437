"""Implicit time integration of ternary blend demixing.

The composition fields evolve by conservative fluxes driven by pairwise
chemical-potential differences,

    da/dt = div( a b grad mu_ab + a c grad mu_ac )
    db/dt = div( -a b grad mu_ab + b c grad mu_bc )

in dimensionless variables: lengths in units of d_p and time in units of
n d_p^2 / d_ab, with n the chain length.  That clock makes the mobility
products n * x_i * x_j, which is what sets the pattern-formation rate.

Each step solves the backward-Euler system with damped Picard sweeps.  A
sweep freezes the mobilities and the homogeneous part of the potentials at
the current iterate and solves the remaining linear system (identity plus
the fourth-order gradient-flux block) with BiCGStab, preconditioned by the
exact constant-mobility inverse in a mixed Fourier/cosine basis.  The
linear block also carries a constant-coefficient diffusive shift bounding
the stable part of the local-potential Jacobian; the shift appears on both
sides of the sweep equation, so it changes the iteration path but not the
converged step.  Without it the entropic stiffness near depleted phases
(1/(n x) for x near zero) stays explicit and stalls the iteration.  The
sweep converges when the max-norm backward-Euler defect falls below
``newton_tol``; the accepted update is then re-evaluated in conservative
flux form, so cell sums of a and b telescope to rounding error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.fft

from .energetics import (
    CLAMP_CEIL,
    CLAMP_FLOOR,
    BlendParams,
    KappaSet,
    dg_partials,
    gibbs_total,
    kappa_from_chi,
)
from .grid import FieldPair, GridSpec, div_m_grad_values, lap_values

SNAPSHOT_MAGIC = b"CHSNAP01"

# divergence bounds: transient overshoot beyond [0,1] is tolerated this far
FIELD_LO = -0.05
FIELD_HI = 1.05

# per-sweep relative target for the inner linear solve; the damped outer
# update cannot exploit anything tighter
_FORCING_ETA = 0.05


class ConfigError(ValueError):
    """Raised for simulation configs that cannot produce a valid run."""


class DivergenceError(RuntimeError):
    """Raised by :func:`step` when the implicit solve loses the solution."""

    def __init__(self, message: str, t: float = float("nan")):
        super().__init__(message)
        self.t = t


class StateID(str, Enum):
    """Outcome taxonomy of a run, decided from the Gibbs-energy trace."""

    STATE1 = "State1"   # completed, demixed, settled tail
    STATE2 = "State2"   # completed, no significant energy release
    STATE3A = "State3a"  # lost early, nothing usable
    STATE3B = "State3b"  # demixing underway but not settled / lost late


@dataclass(frozen=True)
class SimConfig:
    """Everything one run needs.  Time advances in units of n_a d_p^2 / d_ab."""

    grid: GridSpec
    params: BlendParams
    a0: float
    b0: float
    t_end: float = 50.0
    dt: float = 0.02
    noise_amp: float = 0.005
    rng_seed: int = 0
    snapshot_every: int = 0        # steps between stored snapshots; 0 = final only
    newton_tol: float = 1e-9
    newton_max_iter: int = 200
    picard_damping: float = 0.5
    lin_tol: float = 1e-10

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0:
            raise ConfigError("dt and t_end must be positive")
        n = self.t_end / self.dt
        if abs(n - round(n)) > 1e-9 * max(n, 1.0):
            raise ConfigError("t_end must be an integer multiple of dt")
        if self.noise_amp < 0:
            raise ConfigError("noise_amp must be nonnegative")
        if not (0.0 < self.a0 < 1.0 and 0.0 < self.b0 < 1.0):
            raise ConfigError("a0 and b0 must lie inside (0, 1)")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class SimResult:
    config: SimConfig
    fields: FieldPair                       # final usable fields
    snapshots: list                         # [(t, FieldPair), ...]
    gibbs_trace: list                       # [(t, G), ...], every step
    completed: bool
    diverged_at: float | None
    state: StateID
    wall_time: float


def physical_time_scale(params: BlendParams) -> float:
    """Seconds per dimensionless time unit, n_a * d_p^2 / d_ab."""
    return params.n_a * params.d_p**2 / params.d_ab


def initialize(cfg: SimConfig) -> FieldPair:
    """Uniform composition plus mean-free uniform noise on a and b.

    The noise draws come from one seeded generator (a first, then b) and
    are re-centered so the domain means equal a0 and b0 exactly.  Configs
    whose noise band could leave (0, 1), or push c nonpositive, are
    rejected.
    """
    amp = cfg.noise_amp
    c0 = 1.0 - cfg.a0 - cfg.b0
    if cfg.a0 - amp <= 0.0 or cfg.a0 + amp >= 1.0:
        raise ConfigError("noise band around a0 leaves (0, 1)")
    if cfg.b0 - amp <= 0.0 or cfg.b0 + amp >= 1.0:
        raise ConfigError("noise band around b0 leaves (0, 1)")
    if c0 - 2.0 * amp <= 0.0:
        raise ConfigError("noise band around c0 reaches zero")
    rng = np.random.default_rng(cfg.rng_seed)
    shape = cfg.grid.shape
    eta_a = rng.uniform(-amp, amp, size=shape)
    eta_b = rng.uniform(-amp, amp, size=shape)
    a = cfg.a0 + (eta_a - eta_a.mean())
    b = cfg.b0 + (eta_b - eta_b.mean())
    f = FieldPair(cfg.grid, a, b)
    if f.c.min() <= 0.0:
        raise ConfigError("initial c field is not strictly positive")
    return f


class _Stepper:
    """Backward-Euler stepper with per-config precomputed spectral data."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        g = cfg.grid
        self.dx, self.dy = g.dx, g.dy
        self.kap = kappa_from_chi(cfg.params)
        # the dimensionless clock absorbs one factor of chain length
        self.dtn = cfg.dt * cfg.params.n_a
        kx = np.arange(g.nx // 2 + 1)
        ky = np.arange(g.ny)
        sx = 2.0 * (np.cos(2.0 * np.pi * kx / g.nx) - 1.0) / (self.dx * self.dx)
        sy = 2.0 * (np.cos(np.pi * ky / g.ny) - 1.0) / (self.dy * self.dy)
        s = sy[:, None] + sx[None, :]          # symbol of the 5-point Laplacian
        self.s2 = s * s
        self.s_neg = -s

    # -- spectral helpers ---------------------------------------------------

    def _fwd(self, v):
        return scipy.fft.rfft(scipy.fft.dct(v, type=2, axis=-2, norm="ortho"), axis=-1)

    def _inv(self, vh):
        return scipy.fft.dct(
            scipy.fft.irfft(vh, n=self.cfg.grid.nx, axis=-1),
            type=3, axis=-2, norm="ortho",
        )

    def _precond_factors(self, mobs, sig_a, sig_b):
        """2x2 mode-wise inverse of the constant-mobility implicit block."""
        k = self.kap
        m_ab = float(mobs[0].mean())
        m_ac = float(mobs[1].mean())
        m_bc = float(mobs[2].mean())
        w = self.dtn * self.s2
        wl = self.dtn * self.s_neg
        p_aa = 1.0 + w * (m_ab * (k.k_a - k.k_ab) + m_ac * k.k_a) + wl * sig_a
        p_ab = -w * (m_ab * (k.k_b - k.k_ab) - m_ac * k.k_ab)
        p_ba = -w * (m_ab * (k.k_a - k.k_ab) - m_bc * k.k_ab)
        p_bb = 1.0 + w * (m_ab * (k.k_b - k.k_ab) + m_bc * k.k_b) + wl * sig_b
        det = p_aa * p_bb - p_ab * p_ba
        # keep the preconditioner invertible for exotic chi combinations
        tiny = np.abs(det) < 1e-12
        if tiny.any():
            det = np.where(tiny, 1.0, det)
            p_aa = np.where(tiny, 1.0, p_aa)
            p_bb = np.where(tiny, 1.0, p_bb)
            p_ab = np.where(tiny, 0.0, p_ab)
            p_ba = np.where(tiny, 0.0, p_ba)
        return p_aa, p_ab, p_ba, p_bb, det

    def _apply_precond(self, fac, ra, rb):
        p_aa, p_ab, p_ba, p_bb, det = fac
        h = self._fwd(np.stack((ra, rb)))
        ah, bh = h[0], h[1]
        out = self._inv(np.stack(((p_bb * ah - p_ab * bh) / det,
                                  (p_aa * bh - p_ba * ah) / det)))
        return out[0], out[1]

    # -- operators ----------------------------------------------------------

    def _grad_flux(self, a, b, mobs, sig_a=0.0, sig_b=0.0, laps=None):
        """Fluxes from the gradient-energy part of the potentials only.

        ``mobs`` is the stacked (3, ny, nx) mobility array in ab, ac, bc
        order.  Nonzero sig_a/sig_b add the constant-coefficient diffusive
        shift used inside the sweep's linear block.  Precomputed Laplacians
        of (a, b) can be passed to avoid recomputing them.
        """
        k = self.kap
        dx, dy = self.dx, self.dy
        if laps is None:
            laps = lap_values(np.stack((a, b)), dx, dy)
        la, lb = laps[0], laps[1]
        pots = np.stack((
            (k.k_ab - k.k_a) * la + (k.k_b - k.k_ab) * lb,
            -k.k_a * la - k.k_ab * lb,
            -k.k_b * lb - k.k_ab * la,
        ))
        d = div_m_grad_values(mobs, pots, dx, dy)
        fa = d[0] + d[1]
        fb = d[2] - d[0]
        if sig_a != 0.0:
            fa += sig_a * la
        if sig_b != 0.0:
            fb += sig_b * lb
        return fa, fb

    def _local_flux(self, a, b, mobs):
        """Fluxes from the homogeneous (local) part of the potentials."""
        dga, dgb, dgc = dg_partials(a, b, self.cfg.params)
        pots = np.stack((dga - dgb, dga - dgc, dgb - dgc))
        d = div_m_grad_values(mobs, pots, self.dx, self.dy)
        return d[0] + d[1], d[2] - d[0]

    @staticmethod
    def _mobilities(a, b):
        # products of clipped fractions keep face mobilities nonnegative
        ca = np.clip(a, 0.0, 1.0)
        cb = np.clip(b, 0.0, 1.0)
        cc = np.clip(1.0 - a - b, 0.0, 1.0)
        return np.stack((ca * cb, ca * cc, cb * cc))

    def _stab_coeffs(self, a, b, mobs):
        """Constant diffusive bounds on the local-potential Jacobian.

        The mobility-weighted second derivatives of the homogeneous energy
        stay bounded (each product is at most a fraction pair over a chain
        length), but near depleted phases they dominate the sweep error.
        Taking the cell maximum of the stable part gives a scalar shift per
        species that the linear block can absorb exactly.
        """
        p = self.cfg.params
        ca = np.clip(a, CLAMP_FLOOR, CLAMP_CEIL)
        cb = np.clip(b, CLAMP_FLOOR, CLAMP_CEIL)
        cc = np.clip(1.0 - a - b, CLAMP_FLOOR, CLAMP_CEIL)
        h_ab_a = 1.0 / (p.n_a * ca) + p.chi_bc - p.chi_ab - p.chi_ac
        h_ac_a = 1.0 / (p.n_a * ca) + 1.0 / (p.n_c * cc) - 2.0 * p.chi_ac
        h_ab_b = 1.0 / (p.n_b * cb) + p.chi_ac - p.chi_ab - p.chi_bc
        h_bc_b = 1.0 / (p.n_b * cb) + 1.0 / (p.n_c * cc) - 2.0 * p.chi_bc
        coef_a = mobs[0] * h_ab_a + mobs[1] * h_ac_a
        coef_b = mobs[0] * h_ab_b + mobs[2] * h_bc_b
        return max(0.0, float(coef_a.max())), max(0.0, float(coef_b.max()))

    # -- linear solve per sweep ----------------------------------------------

    def _bicgstab(self, apply_a, fac, r_a, r_b, floor):
        """Right-preconditioned BiCGStab in correction form.

        Solves A d = r for the sweep correction d from d = 0, so the
        iteration residual is the true linear residual and the stopping
        test is meaningful in defect units.  A sweep only needs a modest
        relative reduction (the damped outer update discards most of it
        anyway), so the target is forcing_eta times the entering norm,
        floored by the absolute bound the outer tolerance requires.
        """
        norm0 = float(np.sqrt((r_a * r_a).sum() + (r_b * r_b).sum()))
        tol = max(_FORCING_ETA * norm0, floor)
        d_a = np.zeros_like(r_a)
        d_b = np.zeros_like(r_b)
        if norm0 <= tol:
            return d_a, d_b
        r0a, r0b = r_a.copy(), r_b.copy()
        ra, rb = r_a.copy(), r_b.copy()
        pa, pb = r_a.copy(), r_b.copy()
        rho_old = norm0 * norm0
        for _ in range(200):
            pha, phb = self._apply_precond(fac, pa, pb)
            va, vb = apply_a(pha, phb)
            denom = float((r0a * va).sum() + (r0b * vb).sum())
            if denom == 0.0:
                break
            alpha = rho_old / denom
            sa = ra - alpha * va
            sb = rb - alpha * vb
            if float((sa * sa).sum() + (sb * sb).sum()) <= tol * tol:
                d_a += alpha * pha
                d_b += alpha * phb
                return d_a, d_b
            sha, shb = self._apply_precond(fac, sa, sb)
            ta, tb = apply_a(sha, shb)
            tt = float((ta * ta).sum() + (tb * tb).sum())
            if tt == 0.0:
                break
            omega = float((ta * sa).sum() + (tb * sb).sum()) / tt
            d_a += alpha * pha + omega * sha
            d_b += alpha * phb + omega * shb
            ra = sa - omega * ta
            rb = sb - omega * tb
            if float((ra * ra).sum() + (rb * rb).sum()) <= tol * tol:
                return d_a, d_b
            rho = float((r0a * ra).sum() + (r0b * rb).sum())
            if rho == 0.0 or omega == 0.0:
                break
            beta = (rho / rho_old) * (alpha / omega)
            pa = ra + beta * (pa - omega * va)
            pb = rb + beta * (pb - omega * vb)
            rho_old = rho
        raise DivergenceError("inner linear solve stalled")

    # -- one backward-Euler step ----------------------------------------------

    def advance(self, a_n, b_n, a_guess, b_guess, t_next):
        cfg = self.cfg
        dtn = self.dtn
        a_k, b_k = a_guess.copy(), b_guess.copy()

        for _ in range(cfg.newton_max_iter):
            if not (np.isfinite(a_k).all() and np.isfinite(b_k).all()):
                raise DivergenceError("fields lost finiteness", t=t_next)
            if (
                a_k.min() < FIELD_LO or a_k.max() > FIELD_HI
                or b_k.min() < FIELD_LO or b_k.max() > FIELD_HI
            ):
                raise DivergenceError("fields left the tolerated range", t=t_next)

            mobs = self._mobilities(a_k, b_k)
            sig_a, sig_b = self._stab_coeffs(a_k, b_k, mobs)

            def apply_a(za, zb, mobs=mobs, sig_a=sig_a, sig_b=sig_b):
                fa, fb = self._grad_flux(za, zb, mobs, sig_a=sig_a, sig_b=sig_b)
                return za - dtn * fa, zb - dtn * fb

            fl_a, fl_b = self._local_flux(a_k, b_k, mobs)
            ga, gb = self._grad_flux(a_k, b_k, mobs)
            # the backward-Euler defect doubles as the linear residual at the
            # iterate: the stabilizing shift enters both sides of the sweep
            # system, so it cancels identically here
            r_a = a_n + dtn * (fl_a + ga) - a_k
            r_b = b_n + dtn * (fl_b + gb) - b_k
            defect = max(np.abs(r_a).max(), np.abs(r_b).max())
            if defect < cfg.newton_tol:
                # conservative form of the accepted update: cell sums of the
                # flux divergences telescope to zero exactly
                a_new = a_n + dtn * (fl_a + ga)
                b_new = b_n + dtn * (fl_b + gb)
                if not (np.isfinite(a_new).all() and np.isfinite(b_new).all()):
                    raise DivergenceError("fields lost finiteness", t=t_next)
                if (
                    a_new.min() < FIELD_LO or a_new.max() > FIELD_HI
                    or b_new.min() < FIELD_LO or b_new.max() > FIELD_HI
                ):
                    raise DivergenceError("fields left the tolerated range", t=t_next)
                return a_new, b_new

            fac = self._precond_factors(mobs, sig_a, sig_b)
            try:
                d_a, d_b = self._bicgstab(
                    apply_a, fac, r_a, r_b, floor=cfg.lin_tol
                )
            except DivergenceError as err:
                raise DivergenceError(str(err), t=t_next) from None
            w = cfg.picard_damping
            a_k = a_k + w * d_a
            b_k = b_k + w * d_b

        raise DivergenceError(
            f"no convergence in {cfg.newton_max_iter} sweeps", t=t_next
        )


def step(f: FieldPair, cfg: SimConfig) -> FieldPair:
    """Advance the fields by one backward-Euler step of size cfg.dt."""
    st = _Stepper(cfg)
    a, b = st.advance(f.a, f.b, f.a, f.b, t_next=cfg.dt)
    return FieldPair(f.grid, a, b)


def classify_state(gibbs_trace, completed: bool, diverged_at, t_end: float) -> StateID:
    """Assign the run outcome from its Gibbs trace.

    The energy drop is measured relative to |G_first|; the tail slope is the
    least-squares slope over the final tenth of the trace, normalized by
    |G_first| / t_end.  A completed run that released energy but whose tail
    is still steep is binned with the late-loss runs: usable, not settled.
    """
    ts = np.array([t for t, _ in gibbs_trace])
    gs = np.array([g for _, g in gibbs_trace])
    denom = max(abs(gs[0]), 1e-300)
    drop = (gs[0] - gs[-1]) / denom
    if len(gs) >= 2:
        n_tail = max(2, int(np.ceil(0.1 * len(gs))))
        slope = np.polyfit(ts[-n_tail:], gs[-n_tail:], 1)[0]
        tail_slope = slope * t_end / denom
    else:
        # a trace cut at the first step has no usable tail
        tail_slope = 0.0
    if completed:
        if drop < 0.01:
            return StateID.STATE2
        if abs(tail_slope) <= 0.1:
            return StateID.STATE1
        return StateID.STATE3B
    if drop >= 0.01 and diverged_at is not None and diverged_at >= 0.25 * t_end:
        return StateID.STATE3B
    return StateID.STATE3A


def run(cfg: SimConfig, initial: FieldPair | None = None) -> SimResult:
    """Integrate a config to t_end, recording the Gibbs trace every step.

    Divergence is an outcome, not an error: the result carries the last
    usable fields, the time of loss, and the state classification.  An
    explicit ``initial`` field pair overrides the seeded noise initializer
    (it must match the config grid).
    """
    t0 = time.perf_counter()
    if initial is None:
        f = initialize(cfg)
    else:
        if initial.grid != cfg.grid:
            raise ConfigError("initial fields live on a different grid")
        f = initial.copy()
    kap = kappa_from_chi(cfg.params)
    stepper = _Stepper(cfg)

    trace = [(0.0, gibbs_total(f, cfg.params, kap))]
    snapshots = []
    a_cur, b_cur = f.a, f.b
    a_prev, b_prev = a_cur, b_cur
    completed = True
    diverged_at = None

    for istep in range(1, cfg.n_steps + 1):
        t_next = istep * cfg.dt
        a_guess = 2.0 * a_cur - a_prev
        b_guess = 2.0 * b_cur - b_prev
        try:
            a_new, b_new = stepper.advance(a_cur, b_cur, a_guess, b_guess, t_next)
        except DivergenceError:
            completed = False
            diverged_at = t_next
            break
        a_prev, b_prev = a_cur, b_cur
        a_cur, b_cur = a_new, b_new
        g_now = gibbs_total(FieldPair(cfg.grid, a_cur, b_cur), cfg.params, kap)
        if not np.isfinite(g_now):
            completed = False
            diverged_at = t_next
            break
        trace.append((t_next, g_now))
        if cfg.snapshot_every > 0 and istep % cfg.snapshot_every == 0:
            snapshots.append((t_next, FieldPair(cfg.grid, a_cur.copy(), b_cur.copy())))

    final = FieldPair(cfg.grid, a_cur.copy(), b_cur.copy())
    t_final = trace[-1][0]
    if not snapshots or snapshots[-1][0] != t_final:
        snapshots.append((t_final, final.copy()))
    state = classify_state(trace, completed, diverged_at, cfg.t_end)
    return SimResult(
        config=cfg,
        fields=final,
        snapshots=snapshots,
        gibbs_trace=trace,
        completed=completed,
        diverged_at=diverged_at,
        state=state,
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# snapshot and trace files

def write_snapshot(path, f: FieldPair) -> None:
    """Binary snapshot: magic, u32 nx, u32 ny, then a and b row-major f64.

    All integers and floats are little-endian; rows run along x.
    """
    g = f.grid
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(np.array([g.nx, g.ny], dtype="<u4").tobytes())
        fh.write(f.a.astype("<f8", copy=False).tobytes())
        fh.write(f.b.astype("<f8", copy=False).tobytes())


def read_snapshot(path):
    """Read a snapshot back as (a, b) arrays of shape (ny, nx)."""
    raw = Path(path).read_bytes()
    if raw[:8] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a snapshot file")
    nx, ny = np.frombuffer(raw[8:16], dtype="<u4")
    n = int(nx) * int(ny)
    body = np.frombuffer(raw[16:], dtype="<f8")
    if body.size != 2 * n:
        raise ValueError(f"{path}: truncated snapshot payload")
    a = body[:n].reshape(int(ny), int(nx)).copy()
    b = body[n:].reshape(int(ny), int(nx)).copy()
    return a, b


def write_gibbs_csv(path, gibbs_trace) -> None:
    """Gibbs trace as CSV with header step,t,gibbs (step 0 is the start)."""
    with open(path, "w") as fh:
        fh.write("step,t,gibbs\n")
        for i, (t, g) in enumerate(gibbs_trace):
            fh.write(f"{i},{t!r},{g!r}\n")
