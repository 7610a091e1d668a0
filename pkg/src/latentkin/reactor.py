"""Constant-pressure perfectly-mixed plug-flow reactor with a stiff
TR-BDF2 integrator.

The reactor follows a Lagrangian fluid parcel at constant pressure driven by
an imposed mass-specific heat input q_m(t) in W/kg:

    dY_k/dt = wdot_k(T, p, Y)
    dT/dt   = q_m(t)/c_p + wdot_T/(rho * c_p)

The integrator is the one-step L-stable TR-BDF2 scheme (trapezoidal stage
followed by a BDF2 stage, gamma = 2 - sqrt(2), both stages sharing the same
Newton iteration matrix) with an embedded third-order error estimate and PI
step-size control. The Newton iteration uses the analytic kinetics Jacobian
augmented with finite-difference temperature rows/columns; the Jacobian is
reused across steps while convergence stays fast. The driver restarts at
every heat-profile breakpoint so forcing discontinuities are never smeared
across a step.

The stage solver is batched: a leading batch dimension integrates many
independent cell states simultaneously (used by the channel solver's
operator-split chemistry substeps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kinetics as kin
from .kinetics import Mechanism, ThermoState

GAMMA = 2.0 - math.sqrt(2.0)
_D = GAMMA / 2.0  # shared implicit coefficient of both stages
# embedded third-order quadrature weights on nodes {0, gamma, 1}
_W0 = 0.5 - 1.0 / (6.0 * GAMMA)
_WG = 1.0 / (6.0 * GAMMA * (1.0 - GAMMA))
_W1 = (2.0 - 3.0 * GAMMA) / (6.0 * (1.0 - GAMMA))
# BDF2 stage combination coefficients
_AG = 1.0 / (GAMMA * (2.0 - GAMMA))
_AN = -((1.0 - GAMMA) ** 2) / (GAMMA * (2.0 - GAMMA))

_NEWTON_TOL = 1e-4  # scaled update norm; one polish iteration follows

COMPLETED = "completed"
T_MAX_SHUTDOWN = "T_max_shutdown"
STEP_FAILURE = "step_failure"


class StepFailure(RuntimeError):
    """Step size collapsed below the configured minimum."""


@dataclass(frozen=True)
class PfrOptions:
    """Tolerances and controls for plug-flow-reactor runs.

    Defaults are tight because the reactor is the ground-truth generator.
    """

    T_max: float = 1423.15  # K, early-shutdown temperature cap
    T_min: float = 200.0    # K, abort guard below any thermo validity range
    rtol: float = 1e-8
    atol_y: float = 1e-12
    atol_T: float = 1e-6
    max_step: float = 1e-2
    min_step: float = 1e-14
    subsample_stride: int = 3
    max_newton_iter: int = 10
    max_attempts: int = 500_000
    keep_step_log: bool = False

    def __post_init__(self):
        if not (self.min_step < self.max_step):
            raise ValueError("min_step must be smaller than max_step")
        if not (2 <= self.subsample_stride <= 4):
            raise ValueError("subsample_stride must lie in [2, 4]")
        if self.T_max <= 0:
            raise ValueError("T_max must be positive")


@dataclass
class Trajectory:
    """Snapshots of a PFR run; every derived column is recomputable from its
    (T, p, Y) row through the kinetics module."""

    t: np.ndarray          # (n,)
    T: np.ndarray          # (n,)
    p: np.ndarray          # (n,)
    Y: np.ndarray          # (n, K)
    wdot: np.ndarray       # (n, K)
    wdot_T: np.ndarray     # (n,)
    cp: np.ndarray         # (n,)
    cv: np.ndarray         # (n,)
    q_applied: np.ndarray  # (n,)
    termination_reason: str
    n_accepted: int = 0
    n_rejected: int = 0
    step_log: list = field(default_factory=list)  # (t, dt, err, accepted)

    def __len__(self):
        return len(self.t)


def trajectory_to_csv(traj: Trajectory, mech: Mechanism, path):
    """Debug dump with the documented header layout."""
    names = mech.species_names
    header = (
        "t,T,p,"
        + ",".join(f"Y_{n}" for n in names)
        + ","
        + ",".join(f"wdot_{n}" for n in names)
        + ",wdotT,cp,cv,q"
    )
    cols = np.column_stack(
        [traj.t, traj.T, traj.p, traj.Y, traj.wdot, traj.wdot_T, traj.cp, traj.cv,
         traj.q_applied]
    )
    np.savetxt(path, cols, delimiter=",", header=header, comments="")


# ---------------------------------------------------------------------------
# right-hand side and Jacobian of the coupled (Y, T) system
# ---------------------------------------------------------------------------

class _PfrSystem:
    """Coupled (Y, T) ODE system at constant pressure with heat forcing.

    The forcing is set piecewise as an affine function of time (the driver
    never steps across a profile breakpoint, inside which q is affine).
    """

    def __init__(self, mech: Mechanism, p: float):
        self.mech = mech
        self.p = p
        self.K = mech.n_species
        self.q0 = 0.0
        self.q_slope = 0.0
        self.q_t0 = 0.0

    def set_forcing(self, t0: float, q0: float, slope: float):
        self.q_t0 = t0
        self.q0 = q0
        self.q_slope = slope

    def q(self, t):
        return self.q0 + self.q_slope * (t - self.q_t0)

    def rhs(self, t, y):
        """y: (..., K+1) with Y in the first K slots and T last."""
        y = np.asarray(y, dtype=float)
        Y = y[..., : self.K]
        T = y[..., self.K]
        wdot, wT, cp, _, rho = kin.eval_rhs_terms(self.mech, T, self.p, Y)
        dT = self.q(t) / cp + wT / (rho * cp)
        return np.concatenate([wdot, np.asarray(dT)[..., None]], axis=-1)

    def jac(self, t, y):
        """(..., K+1, K+1): analytic species block, FD temperature row/column."""
        y = np.asarray(y, dtype=float)
        Y = y[..., : self.K]
        T = y[..., self.K]
        K = self.K
        batch = y.shape[:-1]
        J = np.zeros(batch + (K + 1, K + 1))
        J[..., :K, :K] = kin.species_jacobian(self.mech, T, self.p, Y, check_range=False)

        # one batched rhs call covers the T-column and the dT/dt-row FDs
        base = self.rhs(t, y)
        hT = 1e-6 * np.maximum(np.abs(T), 1.0)
        pert = np.repeat(y[..., None, :], K + 1, axis=-2)  # (..., K+1 probes, K+1)
        hY = 1e-7
        for j in range(K):
            pert[..., j, j] += hY
        pert[..., K, K] += hT
        f_pert = self.rhs(t, pert)  # (..., K+1 probes, K+1)
        J[..., :, K] = (f_pert[..., K, :] - base) / hT[..., None]
        for j in range(K):
            J[..., K, j] = (f_pert[..., j, K] - base[..., K]) / hY
        return J


# ---------------------------------------------------------------------------
# batched TR-BDF2 stage machinery
# ---------------------------------------------------------------------------

def _newton_solve(fun, M_inv, const, w0, dt, scale, floor, max_iter):
    """Solve w - d*dt*f(w) = const for a batch of systems with a frozen
    iteration-matrix inverse M_inv, M = I - d*dt*J (modified Newton).

    Returns (w, f_last, converged mask, iterations used).
    """
    w = w0.copy()
    converged = np.zeros(w.shape[:-1], dtype=bool)
    prev_norm = np.full(w.shape[:-1], np.inf)
    f_last = None
    for it in range(max_iter):
        f_last = fun(w)
        G = _D * dt * f_last + const - w  # -residual
        delta = (M_inv @ G[..., None])[..., 0]
        w = np.maximum(w + delta, floor)
        norm = np.sqrt(np.mean((delta / scale) ** 2, axis=-1))
        converged |= norm < _NEWTON_TOL
        if converged.all():
            # one polish iteration keeps conservation at roundoff level
            f_last = fun(w)
            G = _D * dt * f_last + const - w
            delta = (M_inv @ G[..., None])[..., 0]
            w = np.maximum(w + delta, floor)
            return w, f_last, converged, it + 2
        if it >= 2 and np.all(norm > 2.0 * prev_norm):
            break
        prev_norm = norm
    return w, f_last, converged, max_iter


def trbdf2_step(fun, jac, t, y, dt, scale, floor=None, max_newton_iter=10,
                jac_mat=None, f_n=None):
    """One TR-BDF2 step from (t, y) with step dt, batched over leading dims.

    Returns (y_new, err_norm, ok, f_1). ``err_norm`` is the scaled embedded
    error (accept when <= 1); ``ok`` flags Newton convergence of both stages;
    ``f_1`` approximates f(t+dt, y_new) for first-same-as-last reuse.
    ``jac_mat`` may carry a previously evaluated (possibly stale) Jacobian,
    ``f_n`` a previously evaluated f(t, y).
    """
    y = np.asarray(y, dtype=float)
    if floor is None:
        floor = np.full(y.shape[-1], -np.inf)
    if f_n is None:
        f_n = fun(t, y)
    if jac_mat is None:
        jac_mat = jac(t, y)

    n = y.shape[-1]
    # both stages share d = gamma/2, so one factorization serves the step;
    # the explicit inverse is reused across all Newton iterations
    M_inv = np.linalg.inv(np.eye(n) - _D * dt * jac_mat)

    tg = t + GAMMA * dt
    const1 = y + _D * dt * f_n
    w0 = np.maximum(y + GAMMA * dt * f_n, floor)
    yg, f_g, ok1, _ = _newton_solve(lambda w: fun(tg, w), M_inv, const1, w0, dt,
                                    scale, floor, max_newton_iter)

    t1 = t + dt
    const2 = _AG * yg + _AN * y
    w0 = np.maximum(yg + (1.0 - GAMMA) * dt * f_g, floor)
    y1, f_1, ok2, _ = _newton_solve(lambda w: fun(t1, w), M_inv, const2, w0, dt,
                                    scale, floor, max_newton_iter)

    # f_g / f_1 are the last Newton evaluations: converged-iterate residuals
    y_hat = y + dt * (_W0 * f_n + _WG * f_g + _W1 * f_1)
    # stiffness-filtered error estimate through the stage iteration matrix
    est = (M_inv @ (y_hat - y1)[..., None])[..., 0]
    err = np.sqrt(np.mean((est / scale) ** 2, axis=-1))
    return y1, err, ok1 & ok2, f_1


def implicit_step(rhs, t, state, dt, jac=None, rtol=1e-8, atol=1e-10,
                  max_newton_iter=10):
    """Single L-stable TR-BDF2 step of ``d state/dt = rhs(t, state)``.

    ``jac`` defaults to a dense forward-difference Jacobian. Returns
    ``(new_state, error_estimate)`` where the error estimate is the scaled
    embedded-error norm (values <= 1 mean the step meets tolerance).
    """
    state = np.asarray(state, dtype=float)

    if jac is None:
        def jac(tt, yy):
            n = yy.shape[-1]
            base = rhs(tt, yy)
            J = np.zeros((n, n))
            for j in range(n):
                h = 1e-7 * max(abs(float(yy[j])), 1.0)
                yp = yy.copy()
                yp[j] += h
                J[:, j] = (rhs(tt, yp) - base) / h
            return J

    scale = atol + rtol * np.abs(state)
    y1, err, ok, _ = trbdf2_step(rhs, jac, t, state, dt, scale,
                                 max_newton_iter=max_newton_iter)
    if not np.all(ok):
        raise StepFailure("Newton iteration failed to converge")
    return y1, float(np.max(err))


# ---------------------------------------------------------------------------
# adaptive PFR driver
# ---------------------------------------------------------------------------

_JAC_MAX_AGE = 25  # accepted steps before a cached Jacobian is refreshed


def _initial_step(sys_, t0, y0, scale, span, max_step):
    f0 = sys_.rhs(t0, y0)
    d0 = math.sqrt(float(np.mean((y0 / scale) ** 2)))
    d1 = math.sqrt(float(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d1 < 1e-12 else 0.01 * d0 / d1
    return min(h0, span, max_step)


def run_pfr(mech: Mechanism, initial: ThermoState, profile, opts: PfrOptions | None = None,
            t_end: float | None = None) -> Trajectory:
    """Integrate the constant-pressure PFR under the heat profile.

    ``profile`` must provide ``q(t)`` (W/kg, scalar or vectorized),
    ``breakpoints()`` (sorted knot times including 0 and t_end) and
    ``p_level``; see :mod:`latentkin.sampling`. ``t_end`` defaults to the
    profile duration.
    """
    opts = opts or PfrOptions()
    initial.validate()
    K = mech.n_species
    p = float(getattr(profile, "p_level", initial.p))
    sys_ = _PfrSystem(mech, p)

    if t_end is None:
        t_end = float(profile.breakpoints()[-1])
    knots = [b for b in np.asarray(profile.breakpoints(), dtype=float) if 0.0 < b < t_end]
    knots.append(t_end)

    y = np.concatenate([initial.Y, [initial.T]]).astype(float)
    atol = np.concatenate([np.full(K, opts.atol_y), [opts.atol_T]])
    # Newton iterates are floored at the step-acceptance threshold; a tighter
    # floor deadlocks the stage solver whenever a stage solution transiently
    # undershoots it
    floor = np.concatenate([np.full(K, -100.0 * opts.atol_y), [1.0]])

    snap_t = [0.0]
    snap_y = [y.copy()]
    termination = COMPLETED
    n_acc = 0
    n_rej = 0
    n_attempts = 0
    step_log: list = []
    err_prev = 1.0
    jac_mat = None
    jac_age = 0
    jac_fresh = False
    growth_hold = 0  # accepted steps with restrained growth after a failure
    dt = None

    t = 0.0
    for t_stop in knots:
        # q is affine within each breakpoint-delimited piece: sample it at two
        # interior points to recover (value, slope) in closed form
        span = t_stop - t
        ta, tb = t + 0.25 * span, t + 0.75 * span
        qa, qb = float(profile.q(ta)), float(profile.q(tb))
        slope = (qb - qa) / (tb - ta)
        sys_.set_forcing(t, qa - slope * (ta - t), slope)

        scale = atol + opts.rtol * np.abs(y)
        h0 = _initial_step(sys_, t, y, scale, span, opts.max_step)
        # controller suggestion carries across knots, capped by the new span
        dt = h0 if dt is None else min(dt, span)
        f_n = None  # forcing changed: first-same-as-last cache is invalid
        while t < t_stop - 1e-15 * max(1.0, t_stop):
            dt = min(dt, t_stop - t, opts.max_step)
            if dt < opts.min_step or n_attempts >= opts.max_attempts:
                termination = STEP_FAILURE
                break
            n_attempts += 1
            scale = atol + opts.rtol * np.abs(y)
            if jac_mat is None or jac_age >= _JAC_MAX_AGE:
                jac_mat = sys_.jac(t, y)
                jac_age = 0
                jac_fresh = True
            y_new, err, ok, f_last = trbdf2_step(
                sys_.rhs, sys_.jac, t, y, dt, scale, floor=floor,
                max_newton_iter=opts.max_newton_iter, jac_mat=jac_mat, f_n=f_n,
            )
            err = float(err)
            ok = bool(np.all(ok)) and bool(np.all(np.isfinite(y_new))) \
                and not bool(np.any(y_new[:K] < -100.0 * opts.atol_y))
            if not ok and not jac_fresh:
                # stale Jacobian is the usual suspect: refresh and retry
                jac_mat = sys_.jac(t, y)
                jac_age = 0
                jac_fresh = True
                continue
            accepted = ok and err <= 1.0
            if opts.keep_step_log:
                step_log.append((t, dt, err, accepted))
            if accepted:
                t += dt
                y = y_new
                f_n = f_last  # first-same-as-last reuse
                n_acc += 1
                jac_age += 1
                jac_fresh = False
                if n_acc % opts.subsample_stride == 0:
                    snap_t.append(t)
                    snap_y.append(y.copy())
                if y[K] > opts.T_max:
                    termination = T_MAX_SHUTDOWN
                    break
                if y[K] < opts.T_min:
                    # left the integrable envelope; treat as a failed run
                    termination = STEP_FAILURE
                    break
                # PI controller (embedded estimate has local order 3); growth
                # stays restrained for a few steps after a convergence failure
                if err < 1e-14:
                    fac = 5.0
                else:
                    fac = 0.9 * err ** (-0.7 / 3.0) * err_prev ** (0.4 / 3.0)
                    fac = min(5.0, max(0.2, fac))
                if growth_hold > 0:
                    fac = min(fac, 1.2)
                    growth_hold -= 1
                err_prev = max(err, 1e-14)
                dt *= fac
            else:
                n_rej += 1
                # force a fresh Jacobian on the retry
                jac_mat = None
                if not ok:
                    growth_hold = 5
                fac = 0.5 if not ok else min(0.5, max(0.1, 0.9 * err ** (-1.0 / 3.0)))
                dt *= fac
        if termination != COMPLETED:
            break

    # final state is always recorded
    if snap_t[-1] != t:
        snap_t.append(t)
        snap_y.append(y.copy())

    ts = np.array(snap_t)
    ys = np.array(snap_y)
    Y = ys[:, :K]
    T = ys[:, K]
    wdot, wT, cp, cv, _ = kin.eval_rhs_terms(mech, T, p, Y)
    q = np.asarray(profile.q(ts), dtype=float)

    return Trajectory(
        t=ts, T=T, p=np.full_like(ts, p), Y=Y, wdot=wdot, wdot_T=wT,
        cp=cp, cv=cv, q_applied=q, termination_reason=termination,
        n_accepted=n_acc, n_rejected=n_rej, step_log=step_log,
    )
