"""Error metrics, verification reports and histogram constructs.

The three goodness-of-fit metrics follow their printed definitions exactly:

    R^2    = 1 - sum (y - y_hat)^2 / sum (y - mean(y))^2
    NMdAE  = median(|y - y_hat|) / |mean(y)|
    NRMSE  = sqrt(sum (y - y_hat)^2) / (|mean(y)| * N)

Note the NRMSE normalization divides by N outside the square root, so it
scales as 1/sqrt(N) for i.i.d. errors; cross-N comparisons must use the
recorded N. A conventional variant (root *mean* square error over |mean|) is
exposed separately as nrmse_conventional to avoid silent metric drift.

verify_0d runs the full-order and latent models over a held-out profile
suite and reports a-priori (single-step source predictions on full-order
states) and a-posteriori (fully time-integrated) metrics, parity data and
log-binned relative-error histograms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kinetics as kin
from . import reactor as rx
from .kinetics import Mechanism, ThermoState
from .model import SurrogateModel, forward as model_forward, predict_species_rates
from . import latent as lat

__all__ = [
    "r2",
    "nmdae",
    "nrmse",
    "nrmse_conventional",
    "RelErrorHistogram",
    "rel_error_histogram",
    "joint_error_magnitude_histogram",
    "MetricReport",
    "Verify0dResult",
    "verify_0d",
]


def r2(truth, prediction) -> float:
    """Coefficient of determination; 1.0 for a perfect prediction.

    Returns NaN (flagged, not raised) when the truth is constant.
    """
    t = np.asarray(truth, dtype=float)
    p = np.asarray(prediction, dtype=float)
    if t.shape != p.shape or t.size < 2:
        raise ValueError("truth and prediction must be equal-length, size >= 2")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(((t - p) ** 2).sum()) / ss_tot


def nmdae(truth, prediction) -> float:
    """Normalized median absolute error: median |err| / |mean(truth)|."""
    t = np.asarray(truth, dtype=float)
    p = np.asarray(prediction, dtype=float)
    denom = abs(float(t.mean()))
    if denom == 0.0:
        return float("nan")
    return float(np.median(np.abs(t - p))) / denom


def nrmse(truth, prediction) -> float:
    """Normalized root-sum-square error as printed: sqrt(sum err^2)/(|mean|*N)."""
    t = np.asarray(truth, dtype=float)
    p = np.asarray(prediction, dtype=float)
    denom = abs(float(t.mean()))
    if denom == 0.0:
        return float("nan")
    return math.sqrt(float(((t - p) ** 2).sum())) / (denom * t.size)


def nrmse_conventional(truth, prediction) -> float:
    """Conventional variant: sqrt(mean err^2) / |mean(truth)|."""
    t = np.asarray(truth, dtype=float)
    p = np.asarray(prediction, dtype=float)
    denom = abs(float(t.mean()))
    if denom == 0.0:
        return float("nan")
    return math.sqrt(float(((t - p) ** 2).mean())) / denom


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------

@dataclass
class RelErrorHistogram:
    """Log-binned |x - x_hat| / |x| distribution with an undefined bucket for
    zero-truth samples (where the relative error is ill-conditioned)."""

    bin_edges: np.ndarray
    counts: np.ndarray
    n_undefined: int
    n_below: int
    n_above: int
    median: float

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.n_undefined + self.n_below + self.n_above


def rel_error_histogram(truth, prediction, n_bins: int = 64,
                        lo: float = 1e-6, hi: float = 1e2) -> RelErrorHistogram:
    t = np.asarray(truth, dtype=float).ravel()
    p = np.asarray(prediction, dtype=float).ravel()
    defined = t != 0.0
    rel = np.abs(t[defined] - p[defined]) / np.abs(t[defined])
    edges = np.logspace(math.log10(lo), math.log10(hi), n_bins + 1)
    counts, _ = np.histogram(rel, bins=edges)
    return RelErrorHistogram(
        bin_edges=edges, counts=counts, n_undefined=int((~defined).sum()),
        n_below=int((rel < lo).sum()), n_above=int((rel > hi).sum()),
        median=float(np.median(rel)) if rel.size else float("nan"),
    )


def joint_error_magnitude_histogram(truth, prediction, magnitude,
                                    n_bins: int = 32,
                                    rel_range=(1e-6, 1e2),
                                    mag_range=None):
    """2-D histogram of (|relative error|, |magnitude|), both log-binned.

    Returns (rel_edges, mag_edges, counts)."""
    t = np.asarray(truth, dtype=float).ravel()
    p = np.asarray(prediction, dtype=float).ravel()
    m = np.abs(np.asarray(magnitude, dtype=float).ravel())
    defined = (t != 0.0) & (m > 0.0)
    rel = np.abs(t[defined] - p[defined]) / np.abs(t[defined])
    m = m[defined]
    if mag_range is None:
        mag_range = (max(m.min(), 1e-30), m.max()) if m.size else (1e-30, 1.0)
    rel_edges = np.logspace(math.log10(rel_range[0]), math.log10(rel_range[1]), n_bins + 1)
    mag_edges = np.logspace(math.log10(mag_range[0]), math.log10(mag_range[1]), n_bins + 1)
    counts, _, _ = np.histogram2d(rel, m, bins=[rel_edges, mag_edges])
    return rel_edges, mag_edges, counts


# ---------------------------------------------------------------------------
# verification report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-quantity metric table plus error distributions."""

    quantities: dict                    # name -> {"r2":..., "nmdae":..., "nrmse":..., "n":...}
    histograms: dict                    # name -> RelErrorHistogram
    joint: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("quantity,r2,nmdae,nrmse,nrmse_conventional,n,median_rel_error\n")
            for name, row in sorted(self.quantities.items()):
                hist = self.histograms.get(name)
                med = hist.median if hist else float("nan")
                f.write(f"{name},{row['r2']!r},{row['nmdae']!r},{row['nrmse']!r},"
                        f"{row['nrmse_conventional']!r},{row['n']},{med!r}\n")


@dataclass
class Verify0dResult:
    a_priori: MetricReport
    a_posteriori: MetricReport
    n_profiles: int
    n_failed: int
    n_points: int
    min_accepted_step: float
    failed_profiles: list = field(default_factory=list)


def _dry_yields(Y, names, inert):
    keep = [i for i, n in enumerate(names) if n not in inert]
    sub = Y[..., keep]
    tot = np.maximum(sub.sum(axis=-1, keepdims=True), 1e-300)
    return sub / tot, [names[i] for i in keep]


def verify_0d(model: SurrogateModel, mech: Mechanism, profiles,
              initial_Y: np.ndarray, initial_T: float,
              pfr_opts: rx.PfrOptions | None = None,
              majors: tuple[str, ...] = ("C3H8", "C2H4"),
              inert: tuple[str, ...] = ("H2O",),
              latent_rtol: float = 1e-6, latent_atol: float = 1e-9,
              self_test: bool = False,
              parity_path=None) -> Verify0dResult:
    """Run the held-out verification suite.

    For every profile the full-order trajectory is the ground truth. A-priori
    metrics evaluate single-step network predictions on the full-order states;
    a-posteriori metrics evaluate the fully integrated latent trajectory
    sampled at the full-order snapshot times. ``self_test=True`` substitutes
    the ground truth for the predictions (the report must then be exactly
    zero-error; used to validate the harness itself).

    Failed trajectories are excluded and counted.
    """
    pfr_opts = pfr_opts or rx.PfrOptions()
    names = list(mech.species_names)
    rows_truth = {"wdot_T": [], "T": []}
    rows_ap = {"wdot_T": [], "T": []}
    rows_apost = {"wdot_T": [], "T": []}
    dry_names = [n for n in names if n not in inert]
    for n in dry_names:
        rows_truth[f"yield_{n}"] = []
        rows_apost[f"yield_{n}"] = []
    for n in majors:
        rows_truth[f"wdot_{n}"] = []
        rows_ap[f"wdot_{n}"] = []
        rows_apost[f"wdot_{n}"] = []

    n_failed = 0
    failed = []
    min_step = math.inf
    n_points = 0

    for prof in profiles:
        try:
            st = ThermoState(initial_T, prof.p_level, initial_Y)
            fom = rx.run_pfr(mech, st, prof, pfr_opts)
            if fom.termination_reason == rx.STEP_FAILURE:
                raise rx.StepFailure("full-order trajectory failed")
            if self_test:
                ltr = None
            else:
                ltr = lat.integrate_latent(model, st, prof, rtol=latent_rtol,
                                           atol=latent_atol,
                                           t_end=float(fom.t[-1]))
                if ltr.termination_reason != "completed":
                    raise lat.LatentIntegrationError(ltr.termination_reason)
                min_step = min(min_step, ltr.min_accepted_step)
        except Exception as exc:  # noqa: BLE001 - any failed trajectory is logged
            n_failed += 1
            failed.append((prof.profile_id, repr(exc)))
            continue

        n_points += len(fom)
        truth_dry, _ = _dry_yields(fom.Y, names, inert)

        # ---- a priori: single-step predictions on the FOM states
        if self_test:
            wdot_pred_ret = fom.wdot[:, model.retained_idx]
            wdotT_pred = fom.wdot_T
        else:
            res = model_forward(model, fom.T, fom.p, fom.Y)
            wdot_pred_ret = predict_species_rates(model, res.z, res.wdot_z)
            wdotT_pred = res.wdot_T
        rows_ap["wdot_T"].append(wdotT_pred)
        rows_truth["wdot_T"].append(fom.wdot_T)
        rows_truth["T"].append(fom.T)
        ridx_names = [names[i] for i in model.retained_idx]
        for n in majors:
            col = ridx_names.index(n)
            rows_ap[f"wdot_{n}"].append(wdot_pred_ret[:, col])
            rows_truth[f"wdot_{n}"].append(fom.wdot[:, names.index(n)])

        # ---- a posteriori: integrated latent trajectory at the FOM times
        if self_test:
            pos_dry = truth_dry
            T_pos = fom.T
            wdotT_pos = fom.wdot_T
            wdot_pos_ret = fom.wdot[:, model.retained_idx]
        else:
            Y_hat = ltr.reconstruct(model, fom.t)
            pos_dry, _ = _dry_yields(Y_hat, names, inert)
            Z_s, T_pos = ltr.sample(fom.t)
            resp = model_forward(model, T_pos, fom.p, Y_hat)
            # evaluate the latent sources at the integrated state
            sc = model.scaler
            dyn_in = np.concatenate([np.asarray(sc.scale_T(np.clip(T_pos, *model.clip_T)))[:, None],
                                     np.asarray(sc.scale_p(np.clip(fom.p, *model.clip_p)))[:, None],
                                     np.clip(Z_s, model.clip_Z[:, 0], model.clip_Z[:, 1])], axis=-1)
            out = model.dynamics.forward_np(dyn_in)
            m = model.latent_dim
            from .dataset import trans_inverse as _tinv
            wdot_z_pos = _tinv(out[:, :m], sc.trans_offset) / model.rate_time_scale
            wdotT_pos = sc.unscale_wdotT_trans(out[:, m])
            wdot_pos_ret = predict_species_rates(model, Z_s, wdot_z_pos)
        for j, n in enumerate(dry_names):
            rows_truth[f"yield_{n}"].append(truth_dry[:, j])
            rows_apost[f"yield_{n}"].append(pos_dry[:, j])
        rows_apost["T"].append(T_pos)
        rows_apost["wdot_T"].append(wdotT_pos)
        for n in majors:
            col = ridx_names.index(n)
            rows_apost[f"wdot_{n}"].append(wdot_pos_ret[:, col])

    def _metric_table(pred_rows, subset):
        quantities = {}
        hists = {}
        for name in subset:
            if name not in pred_rows or not pred_rows[name]:
                continue
            t = np.concatenate(rows_truth[name])
            p = np.concatenate(pred_rows[name])
            quantities[name] = {
                "r2": r2(t, p), "nmdae": nmdae(t, p), "nrmse": nrmse(t, p),
                "nrmse_conventional": nrmse_conventional(t, p), "n": int(t.size),
            }
            hists[name] = rel_error_histogram(t, p)
        return quantities, hists

    ap_q, ap_h = _metric_table(rows_ap, ["wdot_T"] + [f"wdot_{n}" for n in majors])
    pos_q, pos_h = _metric_table(
        rows_apost,
        ["T", "wdot_T"] + [f"yield_{n}" for n in dry_names] + [f"wdot_{n}" for n in majors],
    )

    joint = {}
    if rows_ap["wdot_T"]:
        t = np.concatenate(rows_truth["wdot_T"])
        p = np.concatenate(rows_ap["wdot_T"])
        joint["wdot_T"] = joint_error_magnitude_histogram(t, p, t)

    if parity_path is not None:
        _write_parity(parity_path, rows_truth, rows_ap, rows_apost)

    return Verify0dResult(
        a_priori=MetricReport(ap_q, ap_h, joint=joint,
                              meta={"n_profiles": len(profiles), "kind": "a_priori"}),
        a_posteriori=MetricReport(pos_q, pos_h,
                                  meta={"n_profiles": len(profiles), "kind": "a_posteriori"}),
        n_profiles=len(profiles), n_failed=n_failed, n_points=n_points,
        min_accepted_step=min_step, failed_profiles=failed,
    )


def _write_parity(path, rows_truth, rows_ap, rows_apost):
    """Parity CSV: quantity, kind, truth, prediction (long format)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("quantity,kind,truth,prediction\n")
        for kind, rows in (("a_priori", rows_ap), ("a_posteriori", rows_apost)):
            for name, chunks in rows.items():
                if not chunks or name not in rows_truth or not rows_truth[name]:
                    continue
                t = np.concatenate(rows_truth[name])
                p = np.concatenate(chunks)
                for tv, pv in zip(t, p):
                    f.write(f"{name},{kind},{tv!r},{pv!r}\n")
