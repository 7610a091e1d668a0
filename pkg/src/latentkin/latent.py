"""Deployment-side latent operations: encode/decode, input clipping, explicit
adaptive Runge-Kutta integration of the latent reactor system, physical-space
reconstruction and latent stiffness analysis.

The latent reactor system is

    dZ/dt = wdot_Z(T, p, Z)
    dT/dt = q_m(t)/cp_hat + wdot_T_hat / (rho_hat * cp_hat)

integrated with the Dormand-Prince 5(4) embedded pair and PI step control.
Network inputs are clipped to the training ranges on every right-hand-side
evaluation. The density estimate uses the ideal-gas law with the specific gas
constant of the decoded composition, completed by the training-mean split of
the culled species over the residual mass; it is refreshed at accepted steps
and held constant within a step, which keeps trajectories deterministic and
cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kinetics import R_GAS, Mechanism, ThermoState, mixture_props, stiffness_spectrum
from .model import SurrogateModel, forward as model_forward
from .dataset import trans_inverse

__all__ = [
    "LatentState",
    "LatentTrajectory",
    "LatentIntegrationError",
    "encode",
    "decode",
    "decode_raw",
    "clip_inputs",
    "gas_constant_from_decoded",
    "integrate_latent",
    "latent_stiffness",
    "dynamics_jacobian_z",
    "rk45_step",
]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                187 / 2100, 1 / 40])


class LatentIntegrationError(RuntimeError):
    """Explicit latent integration failed (step collapse or non-finite state)."""


@dataclass(frozen=True)
class LatentState:
    Z: np.ndarray
    T: float
    p: float


@dataclass
class LatentTrajectory:
    """Accepted-step history of a latent integration with cubic-Hermite
    sampling and a reconstruction cache."""

    t: np.ndarray            # (n,)
    Z: np.ndarray            # (n, M)
    T: np.ndarray            # (n,)
    p: float
    wdot_z: np.ndarray       # (n, M) raw latent source terms
    wdot_T: np.ndarray       # (n,)
    cp: np.ndarray           # (n,)
    dT_dt: np.ndarray        # (n,) energy-equation derivative at the nodes
    termination_reason: str
    n_accepted: int = 0
    n_rejected: int = 0
    clip_events: int = 0
    min_accepted_step: float = math.inf
    _recon_cache: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def _hermite(self, values, derivs, times):
        times = np.asarray(times, dtype=float)
        idx = np.clip(np.searchsorted(self.t, times, side="right") - 1, 0, len(self.t) - 2)
        t0 = self.t[idx]
        h = self.t[idx + 1] - t0
        s = np.where(h > 0, (times - t0) / np.where(h > 0, h, 1.0), 0.0)
        h00 = 2 * s ** 3 - 3 * s ** 2 + 1
        h10 = s ** 3 - 2 * s ** 2 + s
        h01 = -2 * s ** 3 + 3 * s ** 2
        h11 = s ** 3 - s ** 2
        v0, v1 = values[idx], values[idx + 1]
        d0, d1 = derivs[idx], derivs[idx + 1]
        if values.ndim == 2:
            s_ = s[:, None]
            h00, h10, h01, h11 = (x[:, None] for x in (h00, h10, h01, h11))
            h_ = h[:, None]
        else:
            h_ = h
        return h00 * v0 + h10 * h_ * d0 + h01 * v1 + h11 * h_ * d1

    def sample(self, times):
        """(Z(t), T(t)) by cubic Hermite interpolation between accepted steps."""
        Z = self._hermite(self.Z, self.wdot_z, times)
        T = self._hermite(self.T, self.dT_dt, times)
        return Z, T

    def reconstruct(self, model: SurrogateModel, times, renormalize: bool = False):
        """Decoded mass fractions at the requested times (cached per key)."""
        key = (id(model), tuple(np.round(np.asarray(times, dtype=float), 15)), renormalize)
        if key not in self._recon_cache:
            Z, _ = self.sample(times)
            self._recon_cache[key] = decode(model, Z, renormalize=renormalize)
        return self._recon_cache[key]


# ---------------------------------------------------------------------------
# encode / decode / clip
# ---------------------------------------------------------------------------

def encode(model: SurrogateModel, Y) -> np.ndarray:
    """Z = J_phi Y over the retained components of the raw composition."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape[-1] != len(model.species_names):
        raise ValueError(
            f"expected composition of length {len(model.species_names)}, got {Y.shape[-1]}"
        )
    return Y[..., model.retained_idx] @ model.encoder.j_phi.T


def decode_raw(model: SurrogateModel, Z) -> np.ndarray:
    """Retained-species reconstruction (raw mass fractions, not renormalized)."""
    Z = np.asarray(Z, dtype=float)
    y_s = model.decoder.forward_np(Z)
    return model.scaler.unscale_Y(y_s, model.retained_idx)


def decode(model: SurrogateModel, Z, renormalize: bool = False) -> np.ndarray:
    """Full-length composition with zeros for culled species.

    ``renormalize`` rescales the reported vector to unit sum; it is a
    reporting option only and never feeds back into the dynamics.
    """
    y_ret = decode_raw(model, Z)
    out = np.zeros(y_ret.shape[:-1] + (len(model.species_names),))
    out[..., model.retained_idx] = y_ret
    if renormalize:
        out = out / out.sum(axis=-1, keepdims=True)
    return out


def clip_inputs(model: SurrogateModel, T, p, Z):
    """Componentwise clamp to the training ranges.

    Returns (T', p', Z', clipped) where ``clipped`` flags whether anything
    moved.
    """
    T = np.asarray(T, dtype=float)
    p = np.asarray(p, dtype=float)
    Z = np.asarray(Z, dtype=float)
    Tc = np.clip(T, model.clip_T[0], model.clip_T[1])
    pc = np.clip(p, model.clip_p[0], model.clip_p[1])
    Zc = np.clip(Z, model.clip_Z[:, 0], model.clip_Z[:, 1])
    clipped = bool(np.any(Tc != T) or np.any(pc != p) or np.any(Zc != Z))
    return Tc, pc, Zc, clipped


def gas_constant_from_decoded(model: SurrogateModel, y_ret_raw) -> np.ndarray:
    """Specific gas constant of the decoded composition, completing the
    culled species from their training-mean split over the residual mass."""
    y_ret = np.asarray(y_ret_raw, dtype=float)
    W = model.molar_masses
    ridx = model.retained_idx
    r = R_GAS * np.sum(np.maximum(y_ret, 0.0) / W[ridx], axis=-1)
    cidx = np.flatnonzero(~model.mask.retain)
    if len(cidx) and model.mask.train_means is not None:
        means = model.mask.train_means[cidx]
        tot = means.sum()
        residual = np.maximum(0.0, 1.0 - np.sum(y_ret, axis=-1))
        if tot > 0:
            r = r + R_GAS * residual * float(np.sum(means / (W[cidx] * tot)))
    return r


# ---------------------------------------------------------------------------
# explicit adaptive integration
# ---------------------------------------------------------------------------

def rk45_step(fun, t, y, dt):
    """One Dormand-Prince 5(4) step: returns (y5, error_estimate_vector)."""
    k = np.empty((7,) + y.shape)
    k[0] = fun(t, y)
    for i in range(1, 7):
        yi = y + dt * (_A[i][:i] @ k[:i])
        k[i] = fun(t + _C[i] * dt, yi)
    y5 = y + dt * (_B5 @ k.reshape(7, -1)).reshape(y.shape)
    err = dt * ((_B5 - _B4) @ k.reshape(7, -1)).reshape(y.shape)
    return y5, err


class _LatentRhs:
    """Latent reactor RHS with per-call input clipping and a density estimate
    held fixed between accepted steps."""

    def __init__(self, model: SurrogateModel, p_level: float, cp_floor=1e-3):
        self.model = model
        self.p = p_level
        self.m = model.latent_dim
        self.rho = None
        self.clip_events = 0
        self.cp_floor = cp_floor
        self.q0 = 0.0
        self.q_slope = 0.0
        self.q_t0 = 0.0

    def set_forcing(self, t0, q0, slope):
        self.q_t0, self.q0, self.q_slope = t0, q0, slope

    def q(self, t):
        return self.q0 + self.q_slope * (t - self.q_t0)

    def refresh_density(self, Z, T):
        y_ret = decode_raw(self.model, Z)
        r_spec = float(gas_constant_from_decoded(self.model, y_ret))
        self.rho = self.p / (r_spec * max(float(T), 1.0))

    def eval_outputs(self, t, Z, T):
        model = self.model
        Tc, pc, Zc, clipped = clip_inputs(model, T, self.p, Z)
        if clipped:
            self.clip_events += 1
        sc = model.scaler
        dyn_in = np.concatenate([
            np.atleast_1d(sc.scale_T(Tc)), np.atleast_1d(sc.scale_p(pc)), Zc
        ])
        out = model.dynamics.forward_np(dyn_in)
        m = self.m
        wdot_z = trans_inverse(out[:m], sc.trans_offset) / model.rate_time_scale
        wdot_T = float(sc.unscale_wdotT_trans(out[m]))
        cp = max(float(sc.unscale_cp(out[m + 1])), self.cp_floor)
        return wdot_z, wdot_T, cp

    def __call__(self, t, y):
        Z = y[:-1]
        T = y[-1]
        wdot_z, wdot_T, cp = self.eval_outputs(t, Z, T)
        dT = self.q(t) / cp + wdot_T / (self.rho * cp)
        return np.concatenate([wdot_z, [dT]])


def integrate_latent(model: SurrogateModel, initial: ThermoState, profile,
                     rtol: float = 1e-6, atol: float = 1e-9,
                     max_step: float = 1e-2, min_step: float = 1e-12,
                     t_end: float | None = None,
                     cp_source: str = "network",
                     mech: Mechanism | None = None) -> LatentTrajectory:
    """Integrate the latent reactor system under a heat-flux profile.

    ``cp_source='frozen'`` substitutes the kinetics-module heat capacity of
    the decoded composition for the network's prediction (ablation mode;
    requires ``mech``).
    """
    if cp_source not in ("network", "frozen"):
        raise ValueError("cp_source must be 'network' or 'frozen'")
    if cp_source == "frozen" and mech is None:
        raise ValueError("frozen cp ablation requires the mechanism")

    p_level = float(getattr(profile, "p_level", initial.p))
    rhs = _LatentRhs(model, p_level)
    z0 = encode(model, initial.Y)
    y = np.concatenate([z0, [initial.T]])
    m = model.latent_dim

    if cp_source == "frozen":
        base_eval = rhs.eval_outputs

        def eval_frozen(t, Z, T):
            wdot_z, wdot_T, _ = base_eval(t, Z, T)
            y_full = decode(model, Z, renormalize=True)
            cp, _, _, _, _ = mixture_props(mech, max(float(T), mech.t_low.min()),
                                           p_level, y_full, check_range=False)
            return wdot_z, wdot_T, float(cp)

        rhs.eval_outputs = eval_frozen

    if t_end is None:
        t_end = float(profile.breakpoints()[-1])
    knots = [b for b in np.asarray(profile.breakpoints(), dtype=float) if 0.0 < b < t_end]
    knots.append(t_end)

    ts = [0.0]
    ys = [y.copy()]
    rhs.refresh_density(y[:m], y[m])
    node_rhs = [rhs(0.0, y)]
    outs = [rhs.eval_outputs(0.0, y[:m], y[m])]
    n_acc = n_rej = 0
    min_acc_step = math.inf
    err_prev = 1.0
    termination = "completed"
    t = 0.0
    dt = None

    for t_stop in knots:
        span = t_stop - t
        ta, tb = t + 0.25 * span, t + 0.75 * span
        qa, qb = float(profile.q(ta)), float(profile.q(tb))
        slope = (qb - qa) / (tb - ta)
        rhs.set_forcing(t, qa - slope * (ta - t), slope)
        if dt is None:
            f0 = rhs(t, y)
            scale = atol + rtol * np.abs(y)
            d1 = math.sqrt(float(np.mean((f0 / scale) ** 2)))
            dt = min(span, max_step, 1e-6 if d1 < 1e-12 else 0.01 / d1)
        dt = min(dt, span)
        while t < t_stop - 1e-15 * max(1.0, t_stop):
            dt = min(dt, t_stop - t, max_step)
            if dt < min_step:
                termination = "step_failure"
                break
            y5, err_vec = rk45_step(rhs, t, y, dt)
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
            err = math.sqrt(float(np.mean((err_vec / scale) ** 2)))
            if not np.all(np.isfinite(y5)):
                err = math.inf
            if err <= 1.0:
                t += dt
                y = y5
                n_acc += 1
                min_acc_step = min(min_acc_step, dt)
                rhs.refresh_density(y[:m], y[m])
                ts.append(t)
                ys.append(y.copy())
                node_rhs.append(rhs(t, y))
                outs.append(rhs.eval_outputs(t, y[:m], y[m]))
                fac = 5.0 if err < 1e-14 else min(
                    5.0, max(0.2, 0.9 * err ** (-0.7 / 5.0) * err_prev ** (0.4 / 5.0)))
                err_prev = max(err, 1e-14)
                dt *= fac
            else:
                n_rej += 1
                dt *= min(0.5, max(0.1, 0.9 * err ** (-1.0 / 5.0)))
        if termination != "completed":
            break

    ts = np.array(ts)
    ys = np.array(ys)
    node_rhs = np.array(node_rhs)
    return LatentTrajectory(
        t=ts, Z=ys[:, :m], T=ys[:, m], p=p_level,
        wdot_z=np.array([o[0] for o in outs]),
        wdot_T=np.array([o[1] for o in outs]),
        cp=np.array([o[2] for o in outs]),
        dT_dt=node_rhs[:, m],
        termination_reason=termination,
        n_accepted=n_acc, n_rejected=n_rej, clip_events=rhs.clip_events,
        min_accepted_step=min_acc_step,
    )


# ---------------------------------------------------------------------------
# latent stiffness
# ---------------------------------------------------------------------------

def dynamics_jacobian_z(model: SurrogateModel, T, p, Z) -> np.ndarray:
    """Exact J_Z = d(wdot_Z)/dZ (M, M) through the dynamics network layers."""
    sc = model.scaler
    m = model.latent_dim
    Tc, pc, Zc, _ = clip_inputs(model, float(T), float(p), np.asarray(Z, dtype=float))
    x = np.concatenate([np.atleast_1d(sc.scale_T(Tc)), np.atleast_1d(sc.scale_p(pc)), Zc])
    J_full = model.dynamics.jacobian_np(x)        # (M+3, M+2)
    J_hz = J_full[:m, 2:]                          # d h_Z / d Z
    h_z = model.dynamics.forward_np(x)[:m]
    # wdot_Z = trans_inverse(h_Z) / s  =>  chain through d trans_inv/dy = 2|y|
    dinv = 2.0 * np.abs(h_z) / model.rate_time_scale
    return dinv[:, None] * J_hz


def latent_stiffness(model: SurrogateModel, state: LatentState,
                     tau_cutoff: float = 1000.0) -> float:
    """Stiffness ratio of the latent source-term Jacobian at a state."""
    J = dynamics_jacobian_z(model, state.T, state.p, state.Z)
    return stiffness_spectrum(J, tau_cutoff).ratio
