"""Finite-volume heated-channel solver with interchangeable chemistry
backends: full-order (all species, operator-split implicit chemistry) and
latent (metaspecies, explicit network source terms) on identical meshes.

The hydrodynamics are prescribed, not solved: a fixed mass-flux profile G(y)
(plug or parabolic) carries the scalars downstream, so the comparison between
backends isolates chemistry cost and reconstruction accuracy. All scalars
(temperature and species or metaspecies) share one transport kernel:
first-order upwind convection, central diffusion with a single effective
exchange coefficient, zero diffusive flux on walls and at the inlet/outlet
faces, Dirichlet inlet values carried by the convective flux, and the wall
heat flux entering the boundary cells of the energy equation as a volumetric
source. Chemistry is Strang-split between two half-steps of transport: the
full-order backend advances each cell with one L-stable TR-BDF2 substep
(batched over the mesh), the latent backend applies the network source terms
explicitly. With chemistry disabled both backends run the identical transport
path with frozen properties, so their fields agree bitwise.

Pressure is prescribed as a linear profile from the inlet total pressure to
the outlet static pressure (a stated approximation; the solver never solves a
momentum equation).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kinetics as kin
from . import reactor as rx
from .kinetics import Mechanism
from .model import SurrogateModel
from .dataset import trans_inverse
from .latent import clip_inputs, decode_raw, gas_constant_from_decoded

__all__ = [
    "ChannelCase",
    "FieldSolution",
    "BenchmarkReport",
    "ChannelDivergence",
    "solve_channel",
    "benchmark",
    "nn_source_batch_scaling",
    "outlet_dry_yields",
]


class ChannelDivergence(RuntimeError):
    """Residuals grew for too many consecutive steps."""


@dataclass(frozen=True)
class ChannelCase:
    """Desk-scale planar heated channel (2-D; ny=1 collapses to 1-D)."""

    length: float = 1.0              # m
    height: float = 0.02             # m
    nx: int = 200
    ny: int = 16
    inlet_temperature: float = 923.15          # K (650 C)
    inlet_composition: tuple[tuple[str, float], ...] = (("C3H8", 0.7), ("H2O", 0.3))
    mass_flux: float = 11.0          # kg/m^2/s, mean over the section
    inlet_total_pressure: float = 2.1e5        # Pa
    outlet_pressure: float = 2.0e5   # Pa
    wall_heat_flux: float = 1.0e5    # W/m^2 on both walls
    velocity_profile: str = "plug"   # "plug" | "parabolic"
    gamma_eff: float = 5e-3          # kg/m/s effective exchange coefficient
    cfl: float = 0.4
    residual_tol: float = 1e-6
    max_steps: int = 200_000
    chemistry: bool = True
    divergence_window: int = 500

    def __post_init__(self):
        if min(self.length, self.height) <= 0 or self.nx < 1 or self.ny < 1:
            raise ValueError("geometry and mesh must be positive")
        if not math.isfinite(self.wall_heat_flux):
            raise ValueError("wall heat flux must be finite")
        if self.velocity_profile not in ("plug", "parabolic"):
            raise ValueError("velocity_profile must be 'plug' or 'parabolic'")


@dataclass
class FieldSolution:
    backend: str
    T: np.ndarray                    # (ny, nx)
    p: np.ndarray                    # (nx,)
    composition: np.ndarray          # (ny, nx, K) for fom, (ny, nx, M) for latent
    residual_history: list
    timings: dict
    n_steps: int
    converged: bool
    outlet_dry_yields: dict
    clip_events: int = 0


@dataclass
class BenchmarkReport:
    case: ChannelCase
    wall_clock: dict
    speedup: float
    phase_breakdown: dict
    n_steps: dict
    batch_scaling: list          # (batch_size, seconds per cell)


def _mass_flux_profile(case: ChannelCase) -> np.ndarray:
    if case.velocity_profile == "plug" or case.ny == 1:
        return np.full(case.ny, case.mass_flux)
    yc = (np.arange(case.ny) + 0.5) / case.ny          # 0..1 across the gap
    shape = 6.0 * yc * (1.0 - yc)                      # parabola, mean 1
    return case.mass_flux * shape / shape.mean()


def _transport_rhs(F, F_in, G, rho, gamma, dx, dy):
    """Shared transport kernel for stacked scalars F (nf, ny, nx).

    Returns dF/dt from upwind convection and central diffusion; inlet values
    enter through the convective flux, walls and the inlet/outlet faces carry
    zero diffusive flux.
    """
    conv = np.empty_like(F)
    conv[:, :, 0] = (F_in[:, None] - F[:, :, 0]) * G[None, :] / dx
    conv[:, :, 1:] = (F[:, :, :-1] - F[:, :, 1:]) * G[None, :, None] / dx

    lap = np.zeros_like(F)
    lap[:, :, 1:-1] += F[:, :, 2:] - 2 * F[:, :, 1:-1] + F[:, :, :-2]
    lap[:, :, 0] += F[:, :, 1] - F[:, :, 0]
    lap[:, :, -1] += F[:, :, -2] - F[:, :, -1]
    lap /= dx * dx
    if F.shape[1] > 1:
        lap_y = np.zeros_like(F)
        lap_y[:, 1:-1, :] += F[:, 2:, :] - 2 * F[:, 1:-1, :] + F[:, :-2, :]
        lap_y[:, 0, :] += F[:, 1, :] - F[:, 0, :]
        lap_y[:, -1, :] += F[:, -2, :] - F[:, -1, :]
        lap += lap_y / (dy * dy)
    return (conv + gamma * lap) / rho[None, :, :]


class _FomChemistry:
    """Batched one-step TR-BDF2 chemistry substep over all mesh cells."""

    def __init__(self, mech: Mechanism, p_cells: np.ndarray, atol_y=1e-10, atol_T=1e-4,
                 rtol=1e-6):
        self.mech = mech
        self.p = p_cells          # (ncell,)
        self.K = mech.n_species
        self.scale_proto = (atol_y, atol_T, rtol)
        self.floor = np.concatenate([np.full(self.K, -atol_y), [1.0]])

    def rhs(self, t, y):
        Y = y[..., : self.K]
        T = y[..., self.K]
        wdot, wT, cp, _, rho = kin.eval_rhs_terms(self.mech, T, self.p_broadcast(y), Y)
        dT = wT / (rho * cp)
        return np.concatenate([wdot, dT[..., None]], axis=-1)

    def p_broadcast(self, y):
        # y may carry probe axes (..., ncell, K+1); align p over the cell axis
        extra = y.ndim - 2
        p = self.p
        if extra == 1:
            p = p[:, None] if y.shape[0] == len(self.p) else p[None, :]
        return p

    def jac(self, t, y):
        Y = y[..., : self.K]
        T = y[..., self.K]
        K = self.K
        J = np.zeros(y.shape[:-1] + (K + 1, K + 1))
        J[..., :K, :K] = kin.species_jacobian(self.mech, T, self.p, Y, check_range=False)
        base = self.rhs(t, y)
        hT = 1e-6 * np.maximum(np.abs(T), 1.0)
        pert = np.repeat(y[..., None, :], K + 1, axis=-2)
        hY = 1e-7
        for j in range(K):
            pert[..., j, j] += hY
        pert[..., K, K] += hT
        f_pert = self.rhs(t, np.swapaxes(pert, 0, 1))  # (probe, ncell, K+1)
        f_pert = np.swapaxes(f_pert, 0, 1)
        J[..., :, K] = (f_pert[..., K, :] - base) / hT[..., None]
        for j in range(K):
            J[..., K, j] = (f_pert[..., j, K] - base[..., K]) / hY
        return J

    def advance(self, Y, T, dt):
        """One implicit substep for every cell; returns (Y', T')."""
        atol_y, atol_T, rtol = self.scale_proto
        y = np.concatenate([Y, T[:, None]], axis=-1)
        atol = np.concatenate([np.full(self.K, atol_y), [atol_T]])
        scale = atol + rtol * np.abs(y)
        y1, err, ok = rx.trbdf2_step(self.rhs, self.jac, 0.0, y, dt, scale,
                                     floor=self.floor)[:3]
        if not np.all(ok) or not np.all(np.isfinite(y1)):
            raise ChannelDivergence("chemistry substep failed to converge")
        return y1[:, : self.K], y1[:, self.K]


class _LatentChemistry:
    """Explicit network source terms batched over all mesh cells."""

    def __init__(self, model: SurrogateModel, p_cells: np.ndarray):
        self.model = model
        self.p = p_cells
        self.m = model.latent_dim
        self.clip_events = 0

    def sources(self, Z, T):
        """(wdot_Z, wdot_T, cp, rho) per cell."""
        model = self.model
        sc = model.scaler
        Tc, pc, Zc, clipped = clip_inputs(model, T, self.p, Z)
        if clipped:
            self.clip_events += 1
        dyn_in = np.concatenate(
            [np.asarray(sc.scale_T(Tc))[:, None], np.asarray(sc.scale_p(pc))[:, None], Zc],
            axis=-1)
        out = model.dynamics.forward_np(dyn_in)
        m = self.m
        wdot_z = trans_inverse(out[:, :m], sc.trans_offset) / model.rate_time_scale
        wdot_T = sc.unscale_wdotT_trans(out[:, m])
        cp = np.maximum(sc.unscale_cp(out[:, m + 1]), 1e-3)
        y_ret = decode_raw(model, Zc)
        rho = self.p / (gas_constant_from_decoded(model, y_ret) * np.maximum(T, 1.0))
        return wdot_z, wdot_T, cp, rho


def _inlet_vector(case: ChannelCase, mech: Mechanism) -> np.ndarray:
    Y = np.zeros(mech.n_species)
    for name, frac in case.inlet_composition:
        Y[mech.index(name)] = frac
    if abs(Y.sum() - 1.0) > 1e-10:
        raise ValueError("inlet composition must sum to 1")
    return Y


def outlet_dry_yields(names, Y_outlet, G, inert=("H2O",)) -> dict:
    """Mass-flux-weighted outlet dry yields (diluent excluded, renormalized)."""
    w = G / G.sum()
    mean_y = (Y_outlet * w[:, None]).sum(axis=0)
    keep = [i for i, n in enumerate(names) if n not in inert]
    tot = mean_y[keep].sum()
    return {names[i]: float(mean_y[i] / tot) for i in keep}


def solve_channel(case: ChannelCase, mech: Mechanism, backend: str = "fom",
                  model: SurrogateModel | None = None) -> FieldSolution:
    """March the channel to steady state with the requested chemistry backend.

    ``backend='fom'`` transports every species with implicit per-cell
    chemistry; ``backend='latent'`` transports the metaspecies with explicit
    network sources (requires a trained model with a matching mechanism
    fingerprint).
    """
    if backend not in ("fom", "latent"):
        raise ValueError("backend must be 'fom' or 'latent'")
    if backend == "latent":
        if model is None:
            raise ValueError("latent backend requires a model")
        if model.mech_fingerprint != mech.fingerprint:
            raise ValueError("model fingerprint does not match the mechanism")

    nx, ny = case.nx, case.ny
    dx = case.length / nx
    dy = case.height / ny
    G = _mass_flux_profile(case)
    Y_in = _inlet_vector(case, mech)
    T_in = case.inlet_temperature
    p_x = np.linspace(case.inlet_total_pressure, case.outlet_pressure, nx)
    p_cells = np.broadcast_to(p_x, (ny, nx)).ravel()

    cp_in, _, r_in, _, rho_in = kin.mixture_props(mech, T_in, p_x[0], Y_in)
    q_wall_vol = np.zeros((ny, nx))
    q_wall_vol[0, :] += case.wall_heat_flux / dy
    q_wall_vol[-1, :] += case.wall_heat_flux / dy

    timings = {"transport": 0.0, "chemistry": 0.0, "properties": 0.0, "total": 0.0}
    t_start = time.perf_counter()

    # state fields
    T = np.full((ny, nx), T_in)
    if backend == "fom":
        comp = np.broadcast_to(Y_in, (ny, nx, mech.n_species)).copy()
        comp_in = Y_in.copy()
        chem = _FomChemistry(mech, p_cells) if case.chemistry else None
    else:
        from .latent import encode
        z_in = encode(model, Y_in)
        comp = np.broadcast_to(z_in, (ny, nx, model.latent_dim)).copy()
        comp_in = z_in.copy()
        chem = _LatentChemistry(model, p_cells) if case.chemistry else None

    nf = comp.shape[-1]
    residual_history = []
    res0 = None
    converged = False
    grow = 0
    best_res = math.inf
    n_steps = 0

    while n_steps < case.max_steps:
        t0 = time.perf_counter()
        # properties and stable step size
        if case.chemistry:
            if backend == "fom":
                cp_c, _, r_spec, _, rho = kin.mixture_props(
                    mech, T, p_x[None, :], comp, check_range=False)
            else:
                flatZ = comp.reshape(-1, nf)
                wdot_z_f, wdot_T_f, cp_f, rho_f = chem.sources(flatZ, T.ravel())
                cp_c = cp_f.reshape(ny, nx)
                rho = rho_f.reshape(ny, nx)
        else:
            cp_c = np.full((ny, nx), cp_in)
            rho = np.full((ny, nx), rho_in)
        timings["properties"] += time.perf_counter() - t0

        rho_min = float(rho.min())
        dt = case.cfl * min(dx * rho_min / G.max(),
                            0.25 * rho_min * min(dx, dy) ** 2 / case.gamma_eff)

        t0 = time.perf_counter()
        F = np.concatenate([np.moveaxis(comp, -1, 0), T[None]], axis=0)
        F_in = np.concatenate([comp_in, [T_in]])
        F_prev = F.copy()

        half = 0.5 * dt
        F = F + half * _transport_rhs(F, F_in, G, rho, case.gamma_eff, dx, dy)
        F[-1] += half * q_wall_vol / (rho * cp_c)
        timings["transport"] += time.perf_counter() - t0

        if case.chemistry:
            t0 = time.perf_counter()
            if backend == "fom":
                Yf = np.moveaxis(F[:nf], 0, -1).reshape(-1, nf)
                Tf = F[-1].ravel()
                Yn, Tn = chem.advance(Yf, Tf, dt)
                F[:nf] = np.moveaxis(Yn.reshape(ny, nx, nf), -1, 0)
                F[-1] = Tn.reshape(ny, nx)
            else:
                flatZ = np.moveaxis(F[:nf], 0, -1).reshape(-1, nf)
                Tf = F[-1].ravel()
                wdot_z_f, wdot_T_f, cp_f, rho_f = chem.sources(flatZ, Tf)
                flatZ = flatZ + dt * wdot_z_f
                Tf = Tf + dt * wdot_T_f / (rho_f * cp_f)
                F[:nf] = np.moveaxis(flatZ.reshape(ny, nx, nf), -1, 0)
                F[-1] = Tf.reshape(ny, nx)
            timings["chemistry"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        F = F + half * _transport_rhs(F, F_in, G, rho, case.gamma_eff, dx, dy)
        F[-1] += half * q_wall_vol / (rho * cp_c)
        timings["transport"] += time.perf_counter() - t0

        comp = np.moveaxis(F[:nf], 0, -1)
        T = F[-1]
        n_steps += 1

        res = float(np.sqrt(np.mean((F - F_prev) ** 2)) / dt)
        if res0 is None and res > 0:
            res0 = res
        rel = res / res0 if res0 else 0.0
        residual_history.append(rel)
        if rel < case.residual_tol:
            converged = True
            break
        if rel < best_res:
            best_res = rel
            grow = 0
        else:
            grow += 1
            if grow >= case.divergence_window:
                raise ChannelDivergence(
                    f"residual grew for {grow} consecutive steps at step {n_steps}"
                )

    timings["total"] = time.perf_counter() - t_start

    # outlet yields
    if backend == "fom":
        yields = outlet_dry_yields(mech.species_names, comp[:, -1, :], G)
        clip_events = 0
    else:
        from .latent import decode
        y_out = decode(model, comp[:, -1, :])
        yields = outlet_dry_yields(mech.species_names, y_out, G)
        clip_events = chem.clip_events if chem else 0

    return FieldSolution(
        backend=backend, T=T, p=p_x, composition=comp,
        residual_history=residual_history, timings=timings, n_steps=n_steps,
        converged=converged, outlet_dry_yields=yields, clip_events=clip_events,
    )


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------

def nn_source_batch_scaling(model: SurrogateModel, mech: Mechanism,
                            batch_sizes=(1, 2, 4, 8, 16, 32, 64, 128, 256, 512,
                                         1024, 2048, 4096),
                            repeats: int = 5, seed: int = 0):
    """Per-cell cost of one NN source evaluation vs batch size (the
    amortization curve). Returns [(batch, sec_per_cell), ...]."""
    rng = np.random.default_rng(seed)
    lo, hi = model.clip_T
    chem = _LatentChemistry(model, np.full(max(batch_sizes), 2.0e5))
    out = []
    for b in batch_sizes:
        Z = rng.uniform(model.clip_Z[:, 0], model.clip_Z[:, 1], size=(b, model.latent_dim))
        T = rng.uniform(lo, hi, size=b)
        chem.p = np.full(b, 2.0e5)
        chem.sources(Z, T)  # warm up
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            chem.sources(Z, T)
            times.append(time.perf_counter() - t0)
        out.append((int(b), float(np.median(times)) / b))
    return out


def benchmark(case: ChannelCase, mech: Mechanism, model: SurrogateModel,
              backends=("fom", "latent")) -> BenchmarkReport:
    """Wall-clock-to-steady-state comparison on the identical case."""
    wall = {}
    phases = {}
    steps = {}
    for be in backends:
        sol = solve_channel(case, mech, backend=be, model=model)
        wall[be] = sol.timings["total"]
        phases[be] = dict(sol.timings)
        steps[be] = sol.n_steps
    speedup = wall.get("fom", float("nan")) / wall.get("latent", float("nan")) \
        if "fom" in wall and "latent" in wall else float("nan")
    return BenchmarkReport(
        case=case, wall_clock=wall, speedup=float(speedup),
        phase_breakdown=phases, n_steps=steps,
        batch_scaling=nn_source_batch_scaling(model, mech),
    )
