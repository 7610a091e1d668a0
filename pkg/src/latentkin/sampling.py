"""Quasi-random design of the training sample space.

Sobol low-discrepancy sequences (Gray-code construction over the published
Joe-Kuo direction numbers embedded in :mod:`latentkin._sobol_data`) map unit
hypercube points onto heat-flux profile realizations: per control point a
residence time, a signed enthalpy increment, a ramp-rate magnitude and a heat
loss level; one reserved coordinate carries the per-profile pressure level.

Profiles are piecewise in time: within each control segment the mass-specific
heat rate ramps linearly from its previous value toward the segment's hold
level and holds once reached (saturating at the segment end when the sampled
ramp rate is too slow), minus the segment's heat-loss level. Constant-flux
profiles vary only a log-scaled magnitude with alternating sign.

All generators are pure functions of (spec, seed): regeneration is
bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._sobol_data import DIRECTION_DATA

SOBOL_BITS = 52  # fits exactly in a float64 mantissa
SOBOL_MAX_DIM = len(DIRECTION_DATA)


class SobolDimensionError(ValueError):
    """Requested dimension exceeds the embedded direction-number table."""


# ---------------------------------------------------------------------------
# Sobol sequence
# ---------------------------------------------------------------------------

def _direction_integers(dim: int) -> np.ndarray:
    """V[j, k] direction integers, j < dim, k < SOBOL_BITS (uint64)."""
    V = np.zeros((dim, SOBOL_BITS), dtype=np.uint64)
    for j in range(dim):
        poly, m_init = DIRECTION_DATA[j]
        if j == 0:
            m = [1] * SOBOL_BITS  # van der Corput
        else:
            s = poly.bit_length() - 1
            m = list(m_init)
            for k in range(s, SOBOL_BITS):
                new = m[k - s] ^ (m[k - s] << s)
                for i in range(1, s):
                    if (poly >> (s - i)) & 1:
                        new ^= m[k - i] << i
                m.append(new)
        for k in range(SOBOL_BITS):
            V[j, k] = np.uint64(m[k] << (SOBOL_BITS - 1 - k))
    return V


_V_CACHE: dict[int, np.ndarray] = {}


def _directions(dim: int) -> np.ndarray:
    if dim > SOBOL_MAX_DIM:
        raise SobolDimensionError(
            f"dim={dim} exceeds the embedded direction-number table ({SOBOL_MAX_DIM})"
        )
    if dim not in _V_CACHE:
        _V_CACHE[dim] = _direction_integers(dim)
    return _V_CACHE[dim]


def sobol_sequence(dim: int, n: int, skip: int = 0) -> np.ndarray:
    """n Sobol points in [0,1)^dim, starting at sequence index ``skip``.

    Index 0 is the all-zeros point; points follow the standard Gray-code
    ordering of the reference sequence.
    """
    if n < 0 or skip < 0:
        raise ValueError("n and skip must be non-negative")
    V = _directions(dim)
    idx = np.arange(skip, skip + n, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    X = np.zeros((n, dim), dtype=np.uint64)
    maxbit = int(gray.max()).bit_length() if n else 0
    for k in range(maxbit):
        mask = (gray >> np.uint64(k)) & np.uint64(1)
        X ^= mask[:, None] * V[None, :, k]
    return X.astype(np.float64) / float(1 << SOBOL_BITS)


# ---------------------------------------------------------------------------
# sample-space specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleSpaceSpec:
    """Bounds and sizes of the heat-flux-profile sample space.

    Five coordinates per control point (residence time, enthalpy increment,
    ramp-rate magnitude, heat loss, reserved); the first control point's
    reserved coordinate carries the pressure level. Residence time and ramp
    rate are sampled on a log scale, enthalpy increment and heat loss
    linearly.
    """

    n_control: int = 15
    dt_bounds: tuple[float, float] = (1e-5, 1e-1)        # s, log-scaled
    dh_max: float = 1.2e6                                # J/kg, signed linear
    ramp_bounds: tuple[float, float] = (1e9, 1e13)       # W/kg/s magnitude, log
    loss_bounds: tuple[float, float] = (0.0, 1e6)        # W/kg, linear
    pressure_bounds: tuple[float, float] = (1.8e5, 2.2e5)  # Pa, linear
    q_cap: float = 1.0e8                                 # W/kg hold-level cap
    enthalpy_budget: float = 2.5e6                       # J/kg positive-heat cap
    cooling_budget: float = 8.0e5                        # J/kg negative-heat cap
    n_profiles: int = 7500
    n_constant_flux: int = 2500
    const_q_bounds: tuple[float, float] = (1e4, 1e8)     # W/kg magnitude, log
    const_duration: float = 0.02                         # s
    seed: int = 0

    def __post_init__(self):
        for lo, hi, name in (
            (*self.dt_bounds, "dt_bounds"),
            (*self.ramp_bounds, "ramp_bounds"),
            (*self.const_q_bounds, "const_q_bounds"),
            (*self.pressure_bounds, "pressure_bounds"),
        ):
            if not (0 < lo < hi) or not math.isfinite(hi):
                raise ValueError(f"{name} must be finite with 0 < min < max")
        if not (self.loss_bounds[0] < self.loss_bounds[1]):
            raise ValueError("loss_bounds must satisfy min < max")
        if self.dh_max <= 0 or not math.isfinite(self.dh_max):
            raise ValueError("dh_max must be positive and finite")
        if self.n_control < 1:
            raise ValueError("n_control must be >= 1")

    @property
    def dimension(self) -> int:
        return 5 * self.n_control


@dataclass(frozen=True)
class HeatFluxProfile:
    """Resolved piecewise heat-rate forcing q_m(t) in W/kg at fixed pressure."""

    profile_id: int
    kind: str                 # "sobol" or "constant"
    p_level: float            # Pa
    t_knots: np.ndarray       # (n_seg + 1,), t_knots[0] == 0
    q_start: np.ndarray       # (n_seg,) generation level entering the segment
    q_hold: np.ndarray        # (n_seg,) target hold level
    ramp_end: np.ndarray      # (n_seg,) absolute time the ramp stops
    ramp_rate: np.ndarray     # (n_seg,) signed actual slope, W/kg/s
    heat_loss: np.ndarray     # (n_seg,) constant subtraction per segment

    @property
    def t_end(self) -> float:
        return float(self.t_knots[-1])

    def breakpoints(self) -> np.ndarray:
        """Times where q_m(t) is non-smooth (knots and in-segment ramp ends)."""
        pts = set(float(t) for t in self.t_knots)
        for te, t0, t1 in zip(self.ramp_end, self.t_knots[:-1], self.t_knots[1:]):
            if t0 < te < t1:
                pts.add(float(te))
        return np.array(sorted(pts))

    def q(self, t):
        """Mass-specific heat rate (W/kg); scalar or vectorized in t."""
        t_arr = np.asarray(t, dtype=float)
        seg = np.clip(np.searchsorted(self.t_knots, t_arr, side="right") - 1,
                      0, len(self.q_start) - 1)
        t0 = self.t_knots[seg]
        ramping = t_arr < self.ramp_end[seg]
        q_gen = np.where(
            ramping,
            self.q_start[seg] + self.ramp_rate[seg] * (t_arr - t0),
            np.where(
                self.ramp_end[seg] >= self.t_knots[seg + 1],
                self.q_start[seg] + self.ramp_rate[seg] * (self.ramp_end[seg] - t0),
                self.q_hold[seg],
            ),
        )
        out = q_gen - self.heat_loss[seg]
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def _log_interp(u, lo, hi):
    return lo * (hi / lo) ** u


def make_profile(u: np.ndarray, spec: SampleSpaceSpec, profile_id: int = 0) -> HeatFluxProfile:
    """Map one unit-hypercube point (length 5 * n_control) to a profile."""
    u = np.asarray(u, dtype=float)
    if u.shape != (spec.dimension,):
        raise ValueError(f"expected a point of dimension {spec.dimension}, got {u.shape}")
    cols = u.reshape(spec.n_control, 5)
    u_dt, u_dh, u_ramp, u_loss, u_res = cols.T

    dt = _log_interp(u_dt, *spec.dt_bounds)
    dh = -spec.dh_max + u_dh * (2.0 * spec.dh_max)
    ramp_mag = _log_interp(u_ramp, *spec.ramp_bounds)
    loss = spec.loss_bounds[0] + u_loss * (spec.loss_bounds[1] - spec.loss_bounds[0])
    p_level = spec.pressure_bounds[0] + u_res[0] * (
        spec.pressure_bounds[1] - spec.pressure_bounds[0]
    )

    n = spec.n_control
    t_knots = np.concatenate([[0.0], np.cumsum(dt)])
    q_hold = np.clip(dh / dt, -spec.q_cap, spec.q_cap)
    q_start = np.zeros(n)
    ramp_end = np.zeros(n)
    ramp_rate = np.zeros(n)
    q_prev = 0.0
    for i in range(n):
        q_start[i] = q_prev
        delta = q_hold[i] - q_prev
        rate = math.copysign(ramp_mag[i], delta) if delta != 0.0 else 0.0
        ramp_rate[i] = rate
        if delta == 0.0:
            ramp_end[i] = t_knots[i]
            q_end = q_prev
        else:
            t_reach = t_knots[i] + delta / rate
            if t_reach >= t_knots[i + 1]:
                ramp_end[i] = t_knots[i + 1]  # saturates at segment end
                q_end = q_prev + rate * dt[i]
            else:
                ramp_end[i] = t_reach
                q_end = q_hold[i]
        q_prev = q_end
    prof = HeatFluxProfile(
        profile_id=profile_id, kind="sobol", p_level=float(p_level),
        t_knots=t_knots, q_start=q_start, q_hold=q_hold,
        ramp_end=ramp_end, ramp_rate=ramp_rate, heat_loss=loss,
    )
    # enthalpy guards on the REALIZED forcing: cap the positive and negative
    # integrals of q_m(t) so runs neither hit the temperature cap instantly
    # nor leave the thermo envelope. A uniform rescale of all heat levels
    # leaves the piecewise ramp/hold structure exactly intact (rates and
    # targets scale together, so every ramp-end time is unchanged).
    pos, neg = _realized_enthalpy(prof)
    f = 1.0
    if pos > spec.enthalpy_budget:
        f = min(f, spec.enthalpy_budget / pos)
    if neg > spec.cooling_budget:
        f = min(f, spec.cooling_budget / neg)
    if f < 1.0:
        prof = HeatFluxProfile(
            profile_id=profile_id, kind="sobol", p_level=float(p_level),
            t_knots=t_knots, q_start=q_start * f, q_hold=q_hold * f,
            ramp_end=ramp_end, ramp_rate=ramp_rate * f, heat_loss=loss * f,
        )
    return prof


def _realized_enthalpy(prof: HeatFluxProfile) -> tuple[float, float]:
    """Exact positive and negative integrals of q_m(t) over the profile
    (piecewise affine; zero crossings handled analytically)."""
    pts = prof.breakpoints()
    pos = neg = 0.0
    for t0, t1 in zip(pts[:-1], pts[1:]):
        if t1 <= t0:
            continue
        qa = float(prof.q(t0 + 1e-12 * (t1 - t0)))
        qb = float(prof.q(t1 - 1e-12 * (t1 - t0)))
        h = t1 - t0
        if qa >= 0 and qb >= 0:
            pos += 0.5 * (qa + qb) * h
        elif qa <= 0 and qb <= 0:
            neg += -0.5 * (qa + qb) * h
        else:
            tc = h * abs(qa) / (abs(qa) + abs(qb))  # zero crossing
            if qa > 0:
                pos += 0.5 * qa * tc
                neg += -0.5 * qb * (h - tc)
            else:
                neg += -0.5 * qa * tc
                pos += 0.5 * qb * (h - tc)
    return pos, neg


def make_constant_profile(index: int, spec: SampleSpaceSpec) -> HeatFluxProfile:
    """Constant-flux diversity sample: log-uniform magnitude, alternating sign.
    The heating/cooling enthalpy budgets cap the magnitude so the run stays in
    the thermo envelope."""
    rng = np.random.default_rng([spec.seed, 0x5EED, index])
    mag = _log_interp(rng.random(), *spec.const_q_bounds)
    sign = 1.0 if index % 2 == 0 else -1.0
    budget = spec.enthalpy_budget if sign > 0 else spec.cooling_budget
    mag = min(mag, budget / spec.const_duration)
    q = sign * mag
    p_level = spec.pressure_bounds[0] + rng.random() * (
        spec.pressure_bounds[1] - spec.pressure_bounds[0]
    )
    one = np.ones(1)
    return HeatFluxProfile(
        profile_id=index, kind="constant", p_level=float(p_level),
        t_knots=np.array([0.0, spec.const_duration]),
        q_start=q * one, q_hold=q * one, ramp_end=np.zeros(1),
        ramp_rate=np.zeros(1), heat_loss=np.zeros(1),
    )


# ---------------------------------------------------------------------------
# profile set generation
# ---------------------------------------------------------------------------

def generate_profiles(spec: SampleSpaceSpec) -> list[HeatFluxProfile]:
    """The full training profile set: Sobol-shaped plus constant-flux samples.

    Sobol profiles use sequence indices [1, n_profiles]; the zero point is
    skipped. Profile ids: sobol profiles get 0..n_profiles-1, constant
    profiles continue after them.
    """
    pts = sobol_sequence(spec.dimension, spec.n_profiles, skip=1)
    profiles = [make_profile(pts[i], spec, profile_id=i) for i in range(spec.n_profiles)]
    for j in range(spec.n_constant_flux):
        prof = make_constant_profile(j, spec)
        profiles.append(
            HeatFluxProfile(
                profile_id=spec.n_profiles + j, kind="constant",
                p_level=prof.p_level, t_knots=prof.t_knots,
                q_start=prof.q_start, q_hold=prof.q_hold,
                ramp_end=prof.ramp_end, ramp_rate=prof.ramp_rate,
                heat_loss=prof.heat_loss,
            )
        )
    return profiles


def generate_holdout_profiles(spec: SampleSpaceSpec, n_holdout: int) -> list[HeatFluxProfile]:
    """Held-out verification profiles, disjoint from training by construction:
    Sobol indices beyond the training range."""
    skip = 1 + spec.n_profiles
    pts = sobol_sequence(spec.dimension, n_holdout, skip=skip)
    base = spec.n_profiles + spec.n_constant_flux
    return [make_profile(pts[i], spec, profile_id=base + i) for i in range(n_holdout)]


def write_profile_manifest(profiles, spec: SampleSpaceSpec, path):
    """Audit manifest: one block per profile with its resolved knot table."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# profile manifest, seed={spec.seed}\n")
        f.write("# profile_id kind p_level t_end\n")
        f.write("#   segment t0 t1 q_start q_hold ramp_rate ramp_end heat_loss\n")
        for p in profiles:
            f.write(f"profile {p.profile_id} {p.kind} {p.p_level!r} {p.t_end!r}\n")
            for i in range(len(p.q_start)):
                f.write(
                    f"  seg {i} {p.t_knots[i]!r} {p.t_knots[i+1]!r} {p.q_start[i]!r} "
                    f"{p.q_hold[i]!r} {p.ramp_rate[i]!r} {p.ramp_end[i]!r} "
                    f"{p.heat_loss[i]!r}\n"
                )
