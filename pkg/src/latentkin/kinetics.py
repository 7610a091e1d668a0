"""Finite-rate gas-phase chemistry for small pyrolysis-style mechanisms.

Provides the mechanism representation (species with two-range NASA-7 thermo,
Arrhenius reactions), mass-fraction-basis net production rates, reaction heat
release, mixture thermodynamic properties, the analytic species Jacobian and
an eigenvalue-based stiffness ratio.

Conventions
-----------
* Rates are on a mass-fraction basis: ``dY_k/dt = wdot_k`` with units 1/s.
  Conversion from molar rates (mol/m^3/s) happens inside this module.
* Arrhenius ``A`` is in SI concentration units (mol, m^3, s), ``Ea`` in J/mol.
* Reverse rates of reversible reactions come from the equilibrium constant
  computed from the thermo polynomials, so they are thermodynamically
  consistent by construction.
* All evaluation routines accept batched states: ``T``/``p`` with any leading
  shape ``(...,)`` and ``Y`` with shape ``(..., K)``.

Mechanism file format (UTF-8 text, ``#`` comments)::

    mechanism <name>
    version 1

    species <name>
      molar_mass <kg/mol>
      elements C:3 H:8
      thermo_ranges <T_low> <T_mid> <T_high>
      coeffs_low  a1 a2 a3 a4 a5 a6 a7
      coeffs_high a1 a2 a3 a4 a5 a6 a7

    reaction <equation>      # "A + B => C" or "A <=> B + C", "2 C3H6 => 3 C2H4"
      arrhenius <A> <b> <Ea>

Element-imbalanced reactions are rejected with a line-numbered error.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

R_GAS = 8.314462618  # J/mol/K
P_REF = 1.0e5  # Pa, reference pressure for equilibrium constants

__all__ = [
    "R_GAS",
    "MechanismError",
    "StateError",
    "NasaPoly",
    "Species",
    "Reaction",
    "Mechanism",
    "ThermoState",
    "parse_mechanism",
    "load_mechanism",
    "load_builtin_mechanism",
    "net_production_rates",
    "heat_release_rate",
    "eval_rhs_terms",
    "thermo_props",
    "species_jacobian",
    "stiffness_ratio",
    "stiffness_spectrum",
    "StiffnessSpectrum",
]


class MechanismError(ValueError):
    """Raised for malformed mechanism files or inconsistent mechanisms."""


class StateError(ValueError):
    """Raised when a thermochemical state violates its invariants."""


@dataclass(frozen=True)
class NasaPoly:
    """Two-range NASA-7 polynomial set for one species (molar basis).

    cp/R = a1 + a2*T + a3*T^2 + a4*T^3 + a5*T^4
    h/(R*T) = a1 + a2/2*T + a3/3*T^2 + a4/4*T^3 + a5/5*T^4 + a6/T
    s/R = a1*ln(T) + a2*T + a3/2*T^2 + a4/3*T^3 + a5/4*T^4 + a7
    """

    t_low: float
    t_mid: float
    t_high: float
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        if not (self.t_low < self.t_mid < self.t_high):
            raise MechanismError(
                f"thermo ranges must satisfy t_low < t_mid < t_high, got "
                f"{self.t_low}, {self.t_mid}, {self.t_high}"
            )
        if len(self.low) != 7 or len(self.high) != 7:
            raise MechanismError("NASA-7 polynomial needs exactly 7 coefficients per range")
        # cp continuity at the midpoint within 0.1% relative
        cl = _poly_cp_molar(np.array(self.low), self.t_mid)
        ch = _poly_cp_molar(np.array(self.high), self.t_mid)
        if abs(cl - ch) > 1e-3 * max(abs(cl), abs(ch)):
            raise MechanismError(
                f"cp discontinuity at T_mid={self.t_mid}: {cl} vs {ch} (>0.1% relative)"
            )


def _poly_cp_molar(a, T):
    return R_GAS * (a[0] + T * (a[1] + T * (a[2] + T * (a[3] + T * a[4]))))


@dataclass(frozen=True)
class Species:
    name: str
    molar_mass: float  # kg/mol
    thermo: NasaPoly
    elements: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.molar_mass <= 0:
            raise MechanismError(f"species {self.name}: molar_mass must be positive")
        for el, n in self.elements.items():
            if n < 0 or int(n) != n:
                raise MechanismError(
                    f"species {self.name}: element count {el}:{n} must be a non-negative integer"
                )


@dataclass(frozen=True)
class Reaction:
    """Elementary (law of mass action) reaction with Arrhenius kinetics."""

    reactants: dict[str, float]
    products: dict[str, float]
    A: float
    b: float
    Ea: float  # J/mol
    reversible: bool = False
    equation: str = ""

    def __post_init__(self):
        if self.A <= 0:
            raise MechanismError(f"reaction '{self.equation}': A must be positive")


class Mechanism:
    """Immutable mechanism: ordered species plus reactions, with precomputed
    arrays for vectorized evaluation.

    Safe for unrestricted concurrent use once constructed.
    """

    def __init__(self, name: str, species: list[Species], reactions: list[Reaction]):
        names = [s.name for s in species]
        if len(set(names)) != len(names):
            raise MechanismError("species names must be unique")
        self.name = name
        self.species = tuple(species)
        self.reactions = tuple(reactions)
        self.species_names = tuple(names)
        self._index = {n: i for i, n in enumerate(names)}
        K = len(species)
        R = len(reactions)
        self.n_species = K
        self.n_reactions = R

        self.molar_masses = np.array([s.molar_mass for s in species])
        # stoichiometry matrices (R, K)
        self.stoich_r = np.zeros((R, K))
        self.stoich_p = np.zeros((R, K))
        for j, rxn in enumerate(reactions):
            for side, mat in ((rxn.reactants, self.stoich_r), (rxn.products, self.stoich_p)):
                for sp, nu in side.items():
                    if sp not in self._index:
                        raise MechanismError(
                            f"reaction '{rxn.equation}': unknown species '{sp}'"
                        )
                    mat[j, self._index[sp]] += nu
        self.net_stoich = self.stoich_p - self.stoich_r
        self._check_element_balance()

        self.arrh_A = np.array([r.A for r in reactions])
        self.arrh_b = np.array([r.b for r in reactions])
        self.arrh_Ea = np.array([r.Ea for r in reactions])
        self.reversible = np.array([r.reversible for r in reactions], dtype=bool)
        self.delta_nu = self.net_stoich.sum(axis=1)  # mole change per reaction

        # thermo coefficient tables for vectorized evaluation
        self.coeffs_low = np.array([s.thermo.low for s in species])
        self.coeffs_high = np.array([s.thermo.high for s in species])
        self.t_mid = np.array([s.thermo.t_mid for s in species])
        self.t_low = np.array([s.thermo.t_low for s in species])
        self.t_high = np.array([s.thermo.t_high for s in species])

        elements = sorted({el for s in species for el in s.elements})
        self.element_names = tuple(elements)
        self.element_matrix = np.array(
            [[s.elements.get(el, 0) for el in elements] for s in species], dtype=float
        )  # (K, n_el)

        self.net_stoich_T = np.ascontiguousarray(self.net_stoich.T)  # (K, R)
        self.any_reversible = bool(self.reversible.any())
        self.all_b_zero = bool(np.all(self.arrh_b == 0.0))

        # property-matrix form of the NASA polynomials against the basis
        # [1, T, T^2, T^3, T^4, T^5, ln T]: rows give molar cp, h, s
        def prop_rows(c):
            a1, a2, a3, a4, a5, a6, a7 = c
            return R_GAS * np.array([
                [a1, a2, a3, a4, a5, 0.0, 0.0],                      # cp
                [a6, a1, a2 / 2, a3 / 3, a4 / 4, a5 / 5, 0.0],       # h
                [a7, a2, a3 / 2, a4 / 3, a5 / 4, 0.0, a1],           # s
            ])

        self._prop_low = np.array([prop_rows(s.thermo.low) for s in species])   # (K,3,7)
        self._prop_high = np.array([prop_rows(s.thermo.high) for s in species])
        self.fingerprint = self._fingerprint()

    def _check_element_balance(self):
        elements = sorted({e for sp in self.species for e in sp.elements})
        el_mat = np.array(
            [[s.elements.get(el, 0) for el in elements] for s in self.species], dtype=float
        )
        for j, rxn in enumerate(self.reactions):
            lhs = self.stoich_r[j] @ el_mat
            rhs = self.stoich_p[j] @ el_mat
            if not np.allclose(lhs, rhs, rtol=0, atol=1e-9):
                raise MechanismError(f"reaction '{rxn.equation}' is element-imbalanced")
            # molar masses must be consistent with the stoichiometry, otherwise
            # mass conservation of the rates degrades silently
            dm = float(self.net_stoich[j] @ self.molar_masses)
            scale = float(self.stoich_r[j] @ self.molar_masses)
            if abs(dm) > 1e-9 * scale:
                raise MechanismError(
                    f"reaction '{rxn.equation}' does not conserve mass: "
                    f"net molar-mass imbalance {dm:g} kg/mol"
                )

    def _fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.name.encode())
        for s in self.species:
            h.update(s.name.encode())
            h.update(repr(s.molar_mass).encode())
            h.update(repr(sorted(s.elements.items())).encode())
            h.update(repr((s.thermo.t_low, s.thermo.t_mid, s.thermo.t_high)).encode())
            h.update(repr(s.thermo.low).encode())
            h.update(repr(s.thermo.high).encode())
        for r in self.reactions:
            h.update(repr(sorted(r.reactants.items())).encode())
            h.update(repr(sorted(r.products.items())).encode())
            h.update(repr((r.A, r.b, r.Ea, r.reversible)).encode())
        return h.hexdigest()

    def index(self, name: str) -> int:
        return self._index[name]

    def __repr__(self):
        return (
            f"Mechanism({self.name!r}, K={self.n_species}, R={self.n_reactions}, "
            f"fingerprint={self.fingerprint[:12]}...)"
        )


@dataclass(frozen=True)
class ThermoState:
    """Full-order thermochemical state (T in K, p in Pa, Y mass fractions)."""

    T: float
    p: float
    Y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Y", np.asarray(self.Y, dtype=float))
        self.validate()

    def validate(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise StateError(f"T must be positive and finite, got {self.T}")
        if not np.isfinite(self.p) or self.p <= 0:
            raise StateError(f"p must be positive and finite, got {self.p}")
        Y = self.Y
        if Y.ndim != 1:
            raise StateError("Y must be a 1-D vector")
        if np.any(Y < 0) or np.any(Y > 1):
            raise StateError("all mass fractions must lie in [0, 1]")
        if abs(float(Y.sum()) - 1.0) > 1e-10:
            raise StateError(f"mass fractions must sum to 1 within 1e-10, got {Y.sum()!r}")


# ---------------------------------------------------------------------------
# mechanism file parsing
# ---------------------------------------------------------------------------

_TERM_RE = re.compile(r"^(\d+(?:\.\d+)?)?\s*([A-Za-z][A-Za-z0-9_]*)$")


def _parse_equation(eq: str, lineno: int):
    if "<=>" in eq:
        lhs, rhs = eq.split("<=>")
        reversible = True
    elif "=>" in eq:
        lhs, rhs = eq.split("=>")
        reversible = False
    else:
        raise MechanismError(f"line {lineno}: reaction equation needs '=>' or '<=>': {eq!r}")

    def side(expr):
        out: dict[str, float] = {}
        for term in expr.split("+"):
            term = term.strip()
            m = _TERM_RE.match(term)
            if not m:
                raise MechanismError(f"line {lineno}: cannot parse reaction term {term!r}")
            coef = float(m.group(1)) if m.group(1) else 1.0
            sp = m.group(2)
            out[sp] = out.get(sp, 0.0) + coef
        return out

    return side(lhs), side(rhs), reversible


def parse_mechanism(text: str, source: str = "<string>") -> Mechanism:
    """Parse a mechanism from its text form. Errors carry line numbers."""
    name = None
    version = None
    species: list[Species] = []
    reactions: list[Reaction] = []

    cur: dict | None = None  # species block under construction
    cur_rxn: dict | None = None

    def flush_species(lineno):
        nonlocal cur
        if cur is None:
            return
        missing = [k for k in ("molar_mass", "elements", "ranges", "low", "high") if k not in cur]
        if missing:
            raise MechanismError(
                f"{source}:{lineno}: species '{cur['name']}' missing fields: {missing}"
            )
        poly = NasaPoly(cur["ranges"][0], cur["ranges"][1], cur["ranges"][2],
                        tuple(cur["low"]), tuple(cur["high"]))
        species.append(Species(cur["name"], cur["molar_mass"], poly, cur["elements"]))
        cur = None

    def flush_reaction(lineno):
        nonlocal cur_rxn
        if cur_rxn is None:
            return
        if "arrhenius" not in cur_rxn:
            raise MechanismError(
                f"{source}:{lineno}: reaction '{cur_rxn['equation']}' missing arrhenius line"
            )
        A, b, Ea = cur_rxn["arrhenius"]
        reactants, products, reversible = cur_rxn["sides"]
        reactions.append(Reaction(reactants, products, A, b, Ea, reversible,
                                  cur_rxn["equation"]))
        cur_rxn = None

    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        key = tokens[0]
        try:
            if key == "mechanism":
                name = " ".join(tokens[1:])
            elif key == "version":
                version = int(tokens[1])
            elif key == "species":
                flush_species(lineno)
                flush_reaction(lineno)
                cur = {"name": tokens[1]}
            elif key == "reaction":
                flush_species(lineno)
                flush_reaction(lineno)
                eq = line[len("reaction"):].strip()
                cur_rxn = {"equation": eq, "sides": _parse_equation(eq, lineno)}
            elif key == "molar_mass":
                cur["molar_mass"] = float(tokens[1])
            elif key == "elements":
                els = {}
                for tok in tokens[1:]:
                    el, n = tok.split(":")
                    els[el] = int(n)
                cur["elements"] = els
            elif key == "thermo_ranges":
                cur["ranges"] = tuple(float(t) for t in tokens[1:4])
            elif key == "coeffs_low":
                cur["low"] = [float(t) for t in tokens[1:8]]
            elif key == "coeffs_high":
                cur["high"] = [float(t) for t in tokens[1:8]]
            elif key == "arrhenius":
                cur_rxn["arrhenius"] = (float(tokens[1]), float(tokens[2]), float(tokens[3]))
            else:
                raise MechanismError(f"{source}:{lineno}: unknown directive {key!r}")
        except MechanismError:
            raise
        except Exception as exc:  # malformed numbers, wrong block, ...
            raise MechanismError(f"{source}:{lineno}: {exc}") from exc

    flush_species(len(lines))
    flush_reaction(len(lines))
    if name is None:
        raise MechanismError(f"{source}: missing 'mechanism <name>' header")
    if version != 1:
        raise MechanismError(f"{source}: unsupported or missing version (expected 1)")
    try:
        return Mechanism(name, species, reactions)
    except MechanismError as exc:
        # attach the offending reaction's line number where possible
        msg = str(exc)
        for lineno, raw in enumerate(lines, start=1):
            stripped = raw.split("#", 1)[0].strip()
            if stripped.startswith("reaction") and stripped[len("reaction"):].strip() in msg:
                raise MechanismError(f"{source}:{lineno}: {msg}") from exc
        raise


def load_mechanism(path) -> Mechanism:
    with open(path, "r", encoding="utf-8") as f:
        return parse_mechanism(f.read(), source=str(path))


def load_builtin_mechanism(name: str = "toy_propane") -> Mechanism:
    """Load one of the mechanisms shipped with the package."""
    from importlib import resources

    ref = resources.files("latentkin").joinpath(f"data/{name}.mech")
    return parse_mechanism(ref.read_text(encoding="utf-8"), source=f"builtin:{name}")


# ---------------------------------------------------------------------------
# vectorized thermo evaluation
# ---------------------------------------------------------------------------

def _select_coeffs(mech: Mechanism, T):
    """Per-species NASA coefficients at temperature(s) T: (..., K, 7)."""
    T = np.asarray(T, dtype=float)
    use_high = T[..., None] > mech.t_mid  # (..., K)
    return np.where(use_high[..., None], mech.coeffs_high, mech.coeffs_low)


def _check_T_range(mech: Mechanism, T):
    T = np.asarray(T, dtype=float)
    tlo, thi = mech.t_low.min(), mech.t_high.max()
    if np.any(T < tlo) or np.any(T > thi):
        bad = float(np.min(T)) if np.any(T < tlo) else float(np.max(T))
        raise StateError(
            f"temperature {bad} K outside thermo polynomial range [{tlo}, {thi}] K"
        )


def species_cp_h_s(mech: Mechanism, T, check_range: bool = True):
    """Molar cp (J/mol/K), h (J/mol) and s (J/mol/K) per species at T."""
    if check_range:
        _check_T_range(mech, T)
    T = np.asarray(T, dtype=float)
    a = _select_coeffs(mech, T)
    Tx = T[..., None]
    a1, a2, a3, a4, a5, a6, a7 = (a[..., i] for i in range(7))
    cp = R_GAS * (a1 + Tx * (a2 + Tx * (a3 + Tx * (a4 + Tx * a5))))
    h = R_GAS * Tx * (a1 + Tx * (a2 / 2 + Tx * (a3 / 3 + Tx * (a4 / 4 + Tx * a5 / 5)))) \
        + R_GAS * a6
    s = R_GAS * (a1 * np.log(Tx) + Tx * (a2 + Tx * (a3 / 2 + Tx * (a4 / 3 + Tx * a5 / 4))) + a7)
    return cp, h, s


def mixture_props(mech: Mechanism, T, p, Y, check_range: bool = True):
    """Mass-weighted mixture properties.

    Returns (cp, cv, R_specific, h, rho) with cp/cv/R_specific/h in J/kg(/K)
    and rho from the ideal-gas law. Batched over leading dimensions.
    """
    T = np.asarray(T, dtype=float)
    p = np.asarray(p, dtype=float)
    Y = np.asarray(Y, dtype=float)
    cp_mol, h_mol, _ = species_cp_h_s(mech, T, check_range)
    W = mech.molar_masses
    cp = np.sum(Y * cp_mol / W, axis=-1)
    h = np.sum(Y * h_mol / W, axis=-1)
    r_spec = R_GAS * np.sum(Y / W, axis=-1)
    cv = cp - r_spec
    rho = p / (r_spec * T)
    return cp, cv, r_spec, h, rho


# ---------------------------------------------------------------------------
# reaction rates
# ---------------------------------------------------------------------------

def rate_constants(mech: Mechanism, T, check_range: bool = True):
    """Forward and reverse rate constants at T. Reverse from equilibrium."""
    T = np.asarray(T, dtype=float)
    Tx = T[..., None]  # (..., R)
    kf = mech.arrh_A * Tx ** mech.arrh_b * np.exp(-mech.arrh_Ea / (R_GAS * Tx))
    if not mech.reversible.any():
        return kf, np.zeros_like(kf)
    _, h_mol, s_mol = species_cp_h_s(mech, T, check_range)
    # delta G0 per reaction: (..., R)
    dh = np.einsum("rk,...k->...r", mech.net_stoich, h_mol)
    ds = np.einsum("rk,...k->...r", mech.net_stoich, s_mol)
    dg = dh - Tx * ds
    # Kp = exp(-dG/RT); Kc = Kp * (p_ref/(R T))^delta_nu
    log_kc = -dg / (R_GAS * Tx) + mech.delta_nu * np.log(P_REF / (R_GAS * Tx))
    # exponent clipped purely as an overflow guard far outside the working range
    kr = np.where(mech.reversible, kf * np.exp(np.clip(-log_kc, -600.0, 600.0)), 0.0)
    return kf, kr


def _concentrations(mech: Mechanism, T, p, Y):
    """Molar concentrations (mol/m^3).

    Uses the smooth continuation for tiny negative mass fractions (no
    clamping) so that central finite differences of the rates are exact
    across Y = 0; validity of the state is the caller's contract.
    """
    Y = np.asarray(Y, dtype=float)
    r_spec = R_GAS * np.sum(Y / mech.molar_masses, axis=-1)
    rho = np.asarray(p, dtype=float) / (r_spec * np.asarray(T, dtype=float))
    return rho[..., None] * Y / mech.molar_masses, rho


def _rates_of_progress(mech: Mechanism, C, kf, kr):
    powr = C[..., None, :] ** mech.stoich_r  # (..., R, K)
    prog = kf * powr.prod(axis=-1)
    if mech.reversible.any():
        powp = C[..., None, :] ** mech.stoich_p
        prog = prog - kr * powp.prod(axis=-1)
    return prog


def net_production_rates(mech: Mechanism, T, p, Y, check_range: bool = True):
    """Mass-fraction-basis net production rates wdot (1/s): dY_k/dt = wdot_k.

    Tiny negative mass fractions (>= -1e-6, as produced by finite-difference
    probing or implicit-integrator iterates) are clamped to zero for the
    concentration evaluation; genuinely negative compositions raise.
    """
    Y = np.asarray(Y, dtype=float)
    if np.any(Y < -1e-6):
        raise StateError("negative mass fraction in rate evaluation")
    C, rho = _concentrations(mech, T, p, Y)
    kf, kr = rate_constants(mech, T, check_range)
    prog = _rates_of_progress(mech, C, kf, kr)  # (..., R)
    wdot_molar = np.einsum("...r,rk->...k", prog, mech.net_stoich)
    return wdot_molar * mech.molar_masses / rho[..., None]


def heat_release_rate(mech: Mechanism, T, p, Y, wdot=None, check_range: bool = True):
    """Reaction heat absorption rate wdot_T = -rho * sum_k h_k * wdot_k (W/m^3).

    Net-endothermic states yield negative values.
    """
    if wdot is None:
        wdot = net_production_rates(mech, T, p, Y, check_range)
    _, h_mol, _ = species_cp_h_s(mech, T, check_range)
    h_mass = h_mol / mech.molar_masses
    _, rho = _concentrations(mech, T, p, Y)
    return -rho * np.sum(h_mass * wdot, axis=-1)


def thermo_props(mech: Mechanism, state: ThermoState):
    """(cp, cv, R_specific, h, rho) of a validated state."""
    cp, cv, r, h, rho = mixture_props(mech, state.T, state.p, state.Y)
    return float(cp), float(cv), float(r), float(h), float(rho)


def rates_for_state(mech: Mechanism, state: ThermoState):
    """Convenience: (wdot, wdot_T) for a validated state."""
    wdot = net_production_rates(mech, state.T, state.p, state.Y)
    wT = heat_release_rate(mech, state.T, state.p, state.Y, wdot=wdot)
    return wdot, float(wT)


def eval_rhs_terms(mech: Mechanism, T, p, Y):
    """Single-pass fused evaluation of everything the reactor RHS needs.

    Returns (wdot, wdot_T, cp, cv, rho). Equivalent to composing
    net_production_rates / heat_release_rate / mixture_props but with one
    thermo-polynomial pass; this is the hot path of the integrators.
    """
    T = np.asarray(T, dtype=float)
    p = np.asarray(p, dtype=float)
    Y = np.asarray(Y, dtype=float)
    W = mech.molar_masses
    Tx = T[..., None]

    lnT = np.log(T)
    T2 = T * T
    T3 = T2 * T
    basis = np.stack(
        [np.ones_like(T), T, T2, T3, T2 * T2, T2 * T3, lnT], axis=-1
    )  # (..., 7)
    prop = np.where(
        (Tx > mech.t_mid)[..., None, None], mech._prop_high, mech._prop_low
    )  # (..., K, 3, 7)
    props = prop @ basis[..., None, :, None]  # (..., K, 3, 1)
    cp_mol = props[..., 0, 0]
    h_mol = props[..., 1, 0]

    rt_inv = 1.0 / (R_GAS * T)
    if mech.all_b_zero:
        kf = mech.arrh_A * np.exp(-mech.arrh_Ea * rt_inv[..., None])
    else:
        kf = mech.arrh_A * Tx ** mech.arrh_b * np.exp(-mech.arrh_Ea * rt_inv[..., None])
    if mech.any_reversible:
        s_mol = props[..., 2, 0]
        dg = (h_mol - Tx * s_mol) @ mech.net_stoich_T
        log_kc = -dg * rt_inv[..., None] + mech.delta_nu * (
            math.log(P_REF / R_GAS) - lnT[..., None]
        )
        arg = np.minimum(600.0, np.maximum(-600.0, -log_kc))
        kr = np.where(mech.reversible, kf * np.exp(arg), 0.0)
    else:
        kr = None

    yw = Y / W
    r_spec = R_GAS * np.sum(yw, axis=-1)
    rho = p / (r_spec * T)
    C = rho[..., None] * yw
    prog = kf * (C[..., None, :] ** mech.stoich_r).prod(axis=-1)
    if kr is not None:
        prog = prog - kr * (C[..., None, :] ** mech.stoich_p).prod(axis=-1)
    wdot = (prog @ mech.net_stoich) * W / rho[..., None]

    cp = np.sum(Y * (cp_mol / W), axis=-1)
    cv = cp - r_spec
    wdot_T = -rho * np.sum((h_mol / W) * wdot, axis=-1)
    return wdot, wdot_T, cp, cv, rho


# ---------------------------------------------------------------------------
# analytic species Jacobian
# ---------------------------------------------------------------------------

def species_jacobian(mech: Mechanism, T, p, Y, check_range: bool = True):
    """J_ij = d wdot_i / d Y_j at fixed (T, p), shape (..., K, K).

    Includes the density dependence rho(Y) at fixed T, p through the
    ideal-gas law.
    """
    T = np.asarray(T, dtype=float)
    p = np.asarray(p, dtype=float)
    Y = np.asarray(Y, dtype=float)
    K = mech.n_species
    W = mech.molar_masses
    C, rho = _concentrations(mech, T, p, Y)
    kf, kr = rate_constants(mech, T, check_range)

    # d(progress_j)/d(C_m): (..., R, K)
    def dprog(stoich, k):
        powC = C[..., None, :] ** stoich  # (..., R, K)
        dP = np.zeros(np.broadcast_shapes(C.shape[:-1] + stoich.shape, powC.shape))
        expm1 = np.maximum(stoich - 1.0, 0.0)
        base = stoich * C[..., None, :] ** expm1  # nu * C^(nu-1), safe at C=0
        for m in range(K):
            tmp = powC.copy()
            tmp[..., m] = 1.0
            excl = tmp.prod(axis=-1)  # (..., R)
            dP[..., m] = base[..., m] * excl
        return k[..., None] * dP

    dprog_dC = dprog(mech.stoich_r, kf)
    if mech.reversible.any():
        dprog_dC = dprog_dC - dprog(mech.stoich_p, kr)

    # d(molar rate_i)/d(C_m): (..., K, K)
    dn_dC = np.einsum("rk,...rm->...km", mech.net_stoich, dprog_dC)

    # dC_m/dY_l = delta(rho/W_m) + (Y_m/W_m) * drho/dY_l ; drho/dY_l = -rho*Wbar/W_l
    wbar = 1.0 / np.sum(Y / W, axis=-1)  # mean molar mass
    drho_dY = -(rho * wbar)[..., None] / W  # (..., K) over l
    dC_dY = (rho[..., None, None] * np.eye(K) / W[:, None]
             + (Y / W)[..., :, None] * drho_dY[..., None, :])  # (..., m, l)

    prog = _rates_of_progress(mech, C, kf, kr)
    n_molar = np.einsum("...r,rk->...k", prog, mech.net_stoich)

    term1 = np.einsum("...km,...ml->...kl", dn_dC, dC_dY)
    jac = (W[:, None] / rho[..., None, None]) * term1 \
        - (W[:, None] * n_molar[..., :, None]) * drho_dY[..., None, :] / (rho ** 2)[..., None, None]
    return jac


# ---------------------------------------------------------------------------
# stiffness analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StiffnessSpectrum:
    """Eigenvalue timescale analysis of a chemistry Jacobian."""

    taus: np.ndarray       # all finite timescales 1/|Re lambda|
    kept: np.ndarray       # mask of timescales surviving the cutoff filter
    ratio: float
    all_filtered: bool

    @property
    def tau_min(self) -> float:
        return float(self.taus[self.kept].min()) if self.kept.any() else float("nan")

    @property
    def tau_max(self) -> float:
        return float(self.taus[self.kept].max()) if self.kept.any() else float("nan")


def stiffness_spectrum(J, tau_cutoff: float = 1000.0) -> StiffnessSpectrum:
    """Timescale spectrum of J. Eigenvalues with tau > tau_cutoff (including
    zero real parts, i.e. infinite tau) are filtered out."""
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError("J must be a square matrix")
    lam = np.linalg.eigvals(J)
    re = np.abs(lam.real)
    with np.errstate(divide="ignore"):
        taus = np.where(re > 0, 1.0 / re, np.inf)
    kept = taus <= tau_cutoff
    if kept.sum() <= 1:
        return StiffnessSpectrum(taus, kept, 1.0, all_filtered=not kept.any())
    tk = taus[kept]
    return StiffnessSpectrum(taus, kept, float(tk.max() / tk.min()), all_filtered=False)


def stiffness_ratio(J, tau_cutoff: float = 1000.0) -> float:
    """max(tau)/min(tau) over Jacobian eigenvalue timescales below the cutoff.

    Returns 1.0 when one or zero eigenvalues survive the filter.
    """
    return stiffness_spectrum(J, tau_cutoff).ratio
