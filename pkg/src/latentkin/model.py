"""The chemistry surrogate: linear encoder, nonlinear decoder and latent
dynamics regressor, trained jointly with a combined chemistry/thermo loss.

Structure
---------
* Encoder: bias-free linear map Z = J_phi Y over the retained (unculled) raw
  mass fractions, so encoding commutes with the transport operators.
* Decoder: dense ELU stack with sigmoid output reconstructing the retained
  mass fractions from Z (sigmoid keeps them inside (0, 1)).
* Dynamics: dense GELU stack with linear output mapping (T_s, p_s, Z) to
  [h_Z (M), h_T, h_cp, h_cv]. h_Z is the power-transformed, time-rescaled
  latent rate: h_Z = trans(rate_time_scale * wdot_Z); h_T the
  power-transformed min-max-scaled heat absorption rate; h_cp/h_cv min-max
  scaled heat capacities.

``rate_time_scale`` is a per-model scalar time unit chosen from the training
rates so the transformed latent-rate targets are O(1); it is a pure units
choice (a uniform rescale commutes with the linear encoder) and is undone at
deployment.

The combined loss is

    L = w1 * [ lam1 * logcosh(Y_hat - Y)
             + lam2 * logcosh(h_Z - trans(s * (wdot @ J_phi^T)))
             + lam3 * logcosh(sc(trans(wdot)) - sc(trans(J_psi wdot_Z_hat))) ]
      + w2 * [ MSE(h_cp - cp_s) + MSE(h_cv - cv_s) + logcosh(h_T - wdotT_ts) ]

with logcosh(v) = sum log cosh(v_i) / count. The decoded-dynamics term runs
the exact decoder Jacobian-vector product J_psi * wdot_Z_hat at the batch's
Z through the tape, so its gradient reaches the decoder weights.

Training uses AdamW (decoupled weight decay), global-norm gradient clipping,
per-epoch reshuffling, an 80/10/10 split, and early stopping on the mean
per-output validation R^2 with best-checkpoint restore. Everything is
deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import (CullMask, Scaler, TrainingDatabase, trans, trans_inverse,
                      effective_retain)

__all__ = [
    "TrainConfig",
    "EncoderParams",
    "MLPParams",
    "SurrogateModel",
    "ForwardResult",
    "TrainingLog",
    "ModelError",
    "TrainingDiverged",
    "build_model",
    "forward",
    "loss_terms",
    "loss",
    "gradients",
    "train",
    "save_model",
    "load_model",
]


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last good checkpoint."""

    def __init__(self, message, model=None, log=None):
        super().__init__(message)
        self.model = model
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    w1: float = 1.0
    w2: float = 1.0
    lam1: float = 1.0
    lam2: float = 1.0
    lam3: float = 1.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 1024
    clip_norm: float = 1.0
    max_epochs: int = 200
    early_stop_window: int = 10
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    latent_dim: int = 3
    decoder_hidden: tuple[int, ...] = (4, 7, 10, 20)
    dynamics_hidden: tuple[int, ...] = (48, 32, 28, 24, 20)

    def __post_init__(self):
        if any(w < 0 for w in (self.w1, self.w2, self.lam1, self.lam2, self.lam3)):
            raise ModelError("loss weights must be non-negative")
        if abs(sum(self.split) - 1.0) > 1e-12:
            raise ModelError("split fractions must sum to 1")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class EncoderParams:
    """Bias-free linear projection Z = Y @ j_phi.T, j_phi of shape (M, K')."""

    j_phi: np.ndarray

    def __post_init__(self):
        m, kp = self.j_phi.shape
        if m >= kp:
            raise ModelError(f"latent dimension {m} must be smaller than K'={kp}")


_ACTIVATIONS = {
    "linear": (lambda x: x, lambda x: np.ones_like(x)),
    "elu": (ad._elu, ad._elu_p),
    "gelu": (ad._gelu, ad._gelu_p),
    "sigmoid": (ad._sigmoid, lambda x: ad._sigmoid(x) * (1 - ad._sigmoid(x))),
}

_TAPE_ACT = {"linear": None, "elu": ad.elu, "gelu": ad.gelu, "sigmoid": ad.sigmoid}


@dataclass
class MLPParams:
    """Dense stack: weights[i] has shape (n_in, n_out); activations per layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ModelError("layer lists must have equal length")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ModelError("layer shapes are not chain-consistent")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ModelError("bias shape mismatch")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ModelError(f"unknown activation {a!r}")

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = _ACTIVATIONS[act][0](x @ w + b)
        return x

    def forward_with_pre(self, x: np.ndarray):
        """Returns (output, pre-activations per layer) for Jacobian work."""
        pres = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = x @ w + b
            pres.append(z)
            x = _ACTIVATIONS[act][0](z)
        return x, pres

    def jvp_np(self, x: np.ndarray, v: np.ndarray):
        """(output, J @ v): forward-mode directional derivative at x."""
        u = v
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = x @ w + b
            u = (u @ w) * _ACTIVATIONS[act][1](z)
            x = _ACTIVATIONS[act][0](z)
        return x, u

    def jacobian_np(self, x: np.ndarray) -> np.ndarray:
        """Full input-output Jacobian at a single input x (n_in,) ->
        (n_out, n_in), via the per-layer chain product."""
        J = np.eye(self.weights[0].shape[0])
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = x @ w + b
            J = (w.T @ J) * _ACTIVATIONS[act][1](z)[:, None]
            x = _ACTIVATIONS[act][0](z)
        return J


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)  # dict rows
    best_epoch: int = -1
    best_val_r2: float = -np.inf
    stopped_reason: str = ""
    param_counts: dict = field(default_factory=dict)

    def to_csv(self, path):
        if not self.epochs:
            with open(path, "w") as f:
                f.write("epoch,train_loss,val_loss\n")
            return
        keys = list(self.epochs[0].keys())
        with open(path, "w") as f:
            f.write(",".join(keys) + "\n")
            for row in self.epochs:
                f.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                                 for k in keys) + "\n")


@dataclass
class SurrogateModel:
    """The deployable artifact: all three parameter blocks plus the
    preprocessing state and input-clip ranges harvested from training."""

    encoder: EncoderParams
    decoder: MLPParams
    dynamics: MLPParams
    scaler: Scaler
    mask: CullMask
    mech_fingerprint: str
    species_names: tuple[str, ...]
    molar_masses: np.ndarray
    rate_time_scale: float
    clip_T: tuple[float, float]
    clip_p: tuple[float, float]
    clip_Z: np.ndarray              # (M, 2)
    latent_dim: int
    meta: dict = field(default_factory=dict)

    @property
    def retained_idx(self) -> np.ndarray:
        return np.flatnonzero(self.mask.retain)

    @property
    def n_params(self) -> int:
        return self.encoder.j_phi.size + self.decoder.n_params + self.dynamics.n_params


@dataclass(frozen=True)
class ForwardResult:
    z: np.ndarray
    y_hat: np.ndarray        # retained-species reconstruction, raw mass fractions
    wdot_z: np.ndarray       # latent source terms, 1/s time base
    wdot_T: np.ndarray       # W/m^3
    cp: np.ndarray           # J/kg/K
    cv: np.ndarray           # J/kg/K


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _glorot(rng, n_in, n_out):
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def _build_mlp(rng, widths, hidden_act, out_act):
    weights, biases, acts = [], [], []
    for i in range(len(widths) - 1):
        weights.append(_glorot(rng, widths[i], widths[i + 1]))
        biases.append(np.zeros(widths[i + 1]))
        acts.append(hidden_act if i < len(widths) - 2 else out_act)
    return MLPParams(weights, biases, acts)


def build_model(k_prime: int, config: TrainConfig, rng=None) -> tuple[EncoderParams, MLPParams, MLPParams]:
    """Fresh parameter blocks for K' retained species."""
    rng = rng or np.random.default_rng(config.seed)
    m = config.latent_dim
    enc = EncoderParams(_glorot(rng, k_prime, m).T.copy())
    dec = _build_mlp(rng, (m, *config.decoder_hidden, k_prime), "elu", "sigmoid")
    dyn = _build_mlp(rng, (m + 2, *config.dynamics_hidden, m + 3), "gelu", "linear")
    return enc, dec, dyn


# ---------------------------------------------------------------------------
# inference forward pass (plain numpy, raw physical units in and out)
# ---------------------------------------------------------------------------

def forward(model: SurrogateModel, T, p, Y) -> ForwardResult:
    """End-to-end evaluation from raw (T, p, Y): encode, decode, predict the
    latent dynamics, and undo every output transform. Batched over leading
    dimensions. No input clipping is applied here; deployment-side callers
    clip first (see latent.clip_inputs)."""
    T = np.asarray(T, dtype=float)
    p = np.asarray(p, dtype=float)
    Y = np.asarray(Y, dtype=float)
    ridx = model.retained_idx
    y_ret = Y[..., ridx]
    z = y_ret @ model.encoder.j_phi.T
    y_hat = model.scaler.unscale_Y(model.decoder.forward_np(z), ridx)
    dyn_in = np.concatenate(
        [np.asarray(model.scaler.scale_T(T))[..., None],
         np.asarray(model.scaler.scale_p(p))[..., None], z], axis=-1
    )
    out = model.dynamics.forward_np(dyn_in)
    m = model.latent_dim
    wdot_z = trans_inverse(out[..., :m], model.scaler.trans_offset) / model.rate_time_scale
    wdot_T = model.scaler.unscale_wdotT_trans(out[..., m])
    cp = model.scaler.unscale_cp(out[..., m + 1])
    cv = model.scaler.unscale_cv(out[..., m + 2])
    return ForwardResult(z=z, y_hat=y_hat, wdot_z=wdot_z, wdot_T=wdot_T, cp=cp, cv=cv)


def predict_species_rates(model: SurrogateModel, z: np.ndarray, wdot_z: np.ndarray):
    """Decoded-dynamics route: wdot_hat = J_psi(z) wdot_z, raw 1/s over the
    retained species (the decoder emits scaled fractions, so its Jacobian is
    rescaled by the column spans)."""
    ridx = model.retained_idx
    span = model.scaler.x_max[ridx] - model.scaler.x_min[ridx]
    _, jv = model.decoder.jvp_np(z, wdot_z * model.rate_time_scale)
    return jv * span / model.rate_time_scale


# ---------------------------------------------------------------------------
# training batch preparation
# ---------------------------------------------------------------------------

@dataclass
class _TrainArrays:
    y: np.ndarray          # (N, K') raw retained mass fractions (encoder input)
    y_s: np.ndarray        # (N, K') min-max scaled (reconstruction target)
    t_s: np.ndarray        # (N,) scaled temperature
    p_s: np.ndarray        # (N,) scaled pressure
    wdot: np.ndarray       # (N, K') raw retained rates
    wdot_trans_sc: np.ndarray   # (N, K') scaler trans+minmax of rates (term 3 target)
    wdot_t_ts: np.ndarray  # (N,) trans+minmax heat absorption rate
    cp_s: np.ndarray       # (N,)
    cv_s: np.ndarray       # (N,)


_ARRAY_FIELDS = ("y", "y_s", "t_s", "p_s", "wdot", "wdot_trans_sc",
                 "wdot_t_ts", "cp_s", "cv_s")


def _prepare_arrays(db: TrainingDatabase, mask: CullMask, scaler: Scaler) -> _TrainArrays:
    K = db.n_species
    retain = effective_retain(mask, scaler)
    ridx = np.flatnonzero(retain)
    y = db.x[:, ridx]
    y_s = scaler.scale_Y(y, ridx)
    t_s = scaler.scale_T(db.x[:, K])
    p_s = scaler.scale_p(db.x[:, K + 1])
    wdot = db.w[:, ridx]
    wdot_trans_sc = scaler.scale_wdot_trans(wdot, ridx)
    wdot_t_ts = scaler.scale_wdotT_trans(db.w[:, K])
    cp_s = scaler.scale_cp(db.w[:, K + 1])
    cv_s = scaler.scale_cv(db.w[:, K + 2])
    return _TrainArrays(y, y_s, t_s, p_s, wdot, wdot_trans_sc, wdot_t_ts, cp_s, cv_s)


def _batch_slice(arr: _TrainArrays, idx) -> _TrainArrays:
    return _TrainArrays(*(getattr(arr, f)[idx] for f in _ARRAY_FIELDS))


# ---------------------------------------------------------------------------
# loss graph
# ---------------------------------------------------------------------------

def _wrap_params(enc: EncoderParams, dec: MLPParams, dyn: MLPParams):
    """Tape nodes for every trainable parameter, in deterministic order."""
    params = {"encoder.j_phi": ad.Var(enc.j_phi)}
    for tag, mlp in (("decoder", dec), ("dynamics", dyn)):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            params[f"{tag}.w{i}"] = ad.Var(w)
            params[f"{tag}.b{i}"] = ad.Var(b)
    return params


def _mlp_tape(params, tag, mlp: MLPParams, x: ad.Var):
    """Tape forward pass; returns (output, pre-activation nodes)."""
    pres = []
    for i, act in enumerate(mlp.activations):
        z = ad.add(ad.matmul(x, params[f"{tag}.w{i}"]), params[f"{tag}.b{i}"])
        pres.append(z)
        fn = _TAPE_ACT[act]
        x = z if fn is None else fn(z)
    return x, pres


def _decoder_jvp_tape(params, mlp: MLPParams, pres, v: ad.Var) -> ad.Var:
    """J_psi(z) @ v through the tape, reusing the decoder's pre-activations;
    differentiable w.r.t. the decoder weights, the inputs and v."""
    u = v
    for i, act in enumerate(mlp.activations):
        u = ad.matmul(u, params[f"decoder.w{i}"])
        if act == "elu":
            u = ad.mul(u, ad.elu_prime(pres[i]))
        elif act == "sigmoid":
            u = ad.mul(u, ad.sigmoid_prime(pres[i]))
        elif act == "linear":
            pass
        else:
            raise ModelError(f"decoder activation {act!r} not supported in JVP")
    return u


def loss_terms(params, config: TrainConfig, batch: _TrainArrays, scaler: Scaler,
               dec: MLPParams, dyn: MLPParams, rate_time_scale: float,
               retained_idx: np.ndarray):
    """The full loss graph. Returns (loss Var, component floats dict)."""
    c = config
    offset = scaler.trans_offset
    j_phi = params["encoder.j_phi"]

    y_in = ad.constant(batch.y)

    # Z = Y @ J_phi^T keeping a single tape node for the encoder matrix
    def matmul_T(a: ad.Var, w: ad.Var) -> ad.Var:
        return ad.Var(a.value @ w.value.T, (a, w),
                      lambda g: (g @ w.value, g.swapaxes(-1, -2) @ a.value))

    z = matmul_T(y_in, j_phi)
    y_hat_s, dec_pres = _mlp_tape(params, "decoder", dec, z)  # scaled reconstruction

    dyn_in = ad.concat([ad.constant(batch.t_s[:, None]),
                        ad.constant(batch.p_s[:, None]), z], axis=-1)
    dyn_out, _ = _mlp_tape(params, "dynamics", dyn, dyn_in)
    m = c.latent_dim
    h_z = ad.getcols(dyn_out, 0, m)
    h_t = ad.getcols(dyn_out, m, m + 1)
    h_cp = ad.getcols(dyn_out, m + 1, m + 2)
    h_cv = ad.getcols(dyn_out, m + 2, m + 3)

    # term 1: reconstruction, in scaled space so every species carries weight
    t1 = ad.logcosh_mean(ad.sub(y_hat_s, ad.constant(batch.y_s)))

    # term 2: encoded dynamics; target trans(s * (wdot @ J_phi^T))
    wdot_in = ad.constant(batch.wdot * rate_time_scale)
    wdot_z_target = ad.trans(matmul_T(wdot_in, j_phi), offset)
    t2 = ad.logcosh_mean(ad.sub(h_z, wdot_z_target))

    # term 3: decoded dynamics; the decoder Jacobian maps latent rates to
    # scaled-Y rates, the column spans convert those to physical rates, and
    # the comparison runs in the scaler's trans+minmax space
    wdot_z_hat = ad.trans_inverse(h_z, offset)  # time-rescaled latent rate
    jv = _decoder_jvp_tape(params, dec, dec_pres, wdot_z_hat)
    y_lo = scaler.x_min[retained_idx]
    y_hi = scaler.x_max[retained_idx]
    lo = scaler.w_min[retained_idx]
    hi = scaler.w_max[retained_idx]
    jv_phys = ad.scale(jv, (y_hi - y_lo) / rate_time_scale)
    jv_trans_sc = ad.scale(ad.shift(ad.trans(jv_phys, offset), -lo), 1.0 / (hi - lo))
    t3 = ad.logcosh_mean(ad.sub(ad.constant(batch.wdot_trans_sc), jv_trans_sc))

    # thermo terms
    mse_cp = ad.mse(ad.sub(h_cp, ad.constant(batch.cp_s[:, None])))
    mse_cv = ad.mse(ad.sub(h_cv, ad.constant(batch.cv_s[:, None])))
    lc_t = ad.logcosh_mean(ad.sub(h_t, ad.constant(batch.wdot_t_ts[:, None])))

    chem = ad.add(ad.add(ad.scale(t1, c.lam1), ad.scale(t2, c.lam2)), ad.scale(t3, c.lam3))
    thermo = ad.add(ad.add(mse_cp, mse_cv), lc_t)
    total = ad.add(ad.scale(chem, c.w1), ad.scale(thermo, c.w2))
    comps = {
        "reconstruction": float(t1.value), "encoded_dynamics": float(t2.value),
        "decoded_dynamics": float(t3.value), "mse_cp": float(mse_cp.value),
        "mse_cv": float(mse_cv.value), "logcosh_wdotT": float(lc_t.value),
    }
    return total, comps


def _model_blocks(model: SurrogateModel):
    return model.encoder, model.decoder, model.dynamics


def _batch_from_model(model: SurrogateModel, T, p, Y, wdot, wdot_T, cp, cv) -> _TrainArrays:
    """Assemble a loss batch from raw physical arrays (test/diagnostic use)."""
    sc = model.scaler
    ridx = model.retained_idx
    y = np.asarray(Y, dtype=float)[:, ridx]
    w = np.asarray(wdot, dtype=float)[:, ridx]
    return _TrainArrays(
        y=y, y_s=sc.scale_Y(y, ridx),
        t_s=np.asarray(sc.scale_T(T)), p_s=np.asarray(sc.scale_p(p)),
        wdot=w, wdot_trans_sc=sc.scale_wdot_trans(w, ridx),
        wdot_t_ts=np.asarray(sc.scale_wdotT_trans(wdot_T)),
        cp_s=np.asarray(sc.scale_cp(cp)), cv_s=np.asarray(sc.scale_cv(cv)),
    )


def loss(model: SurrogateModel, batch: _TrainArrays, config: TrainConfig | None = None):
    """Scalar loss of a prepared batch under the model's parameters."""
    config = config or TrainConfig(latent_dim=model.latent_dim)
    enc, dec, dyn = _model_blocks(model)
    params = _wrap_params(enc, dec, dyn)
    total, comps = loss_terms(params, config, batch, model.scaler, dec, dyn,
                              model.rate_time_scale, model.retained_idx)
    return float(total.value), comps


def gradients(model: SurrogateModel, batch: _TrainArrays,
              config: TrainConfig | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the loss w.r.t. every parameter."""
    config = config or TrainConfig(latent_dim=model.latent_dim)
    enc, dec, dyn = _model_blocks(model)
    params = _wrap_params(enc, dec, dyn)
    total, _ = loss_terms(params, config, batch, model.scaler, dec, dyn,
                          model.rate_time_scale, model.retained_idx)
    ad.backward(total)
    out = {}
    for name, var in params.items():
        g = var.grad if var.grad is not None else np.zeros_like(var.value)
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for parameter {name}")
        out[name] = np.asarray(g)
    return out


# ---------------------------------------------------------------------------
# validation metrics
# ---------------------------------------------------------------------------

def _r2(truth: np.ndarray, pred: np.ndarray) -> float:
    ss = float(((truth - truth.mean()) ** 2).sum())
    if ss == 0.0:
        return float("nan")
    return 1.0 - float(((truth - pred) ** 2).sum()) / ss


def _validation_outputs(enc, dec, dyn, batch: _TrainArrays, rate_time_scale, offset, m):
    z = batch.y @ enc.j_phi.T
    y_hat_s = dec.forward_np(z)
    dyn_in = np.concatenate([batch.t_s[:, None], batch.p_s[:, None], z], axis=-1)
    out = dyn.forward_np(dyn_in)
    h_z = out[:, :m]
    target_hz = trans((batch.wdot * rate_time_scale) @ enc.j_phi.T, offset)
    return z, y_hat_s, h_z, target_hz, out[:, m], out[:, m + 1], out[:, m + 2]


def _val_r2_row(enc, dec, dyn, batch: _TrainArrays, rate_time_scale, offset, m,
                retained_names):
    z, y_hat_s, h_z, t_hz, h_t, h_cp, h_cv = _validation_outputs(
        enc, dec, dyn, batch, rate_time_scale, offset, m)
    row = {}
    for j, name in enumerate(retained_names):
        row[f"r2_Y_{name}"] = _r2(batch.y_s[:, j], y_hat_s[:, j])
    for j in range(m):
        row[f"r2_hZ_{j}"] = _r2(t_hz[:, j], h_z[:, j])
    row["r2_wdotT"] = _r2(batch.wdot_t_ts, h_t)
    row["r2_cp"] = _r2(batch.cp_s, h_cp)
    row["r2_cv"] = _r2(batch.cv_s, h_cv)
    finite = [v for v in row.values() if np.isfinite(v)]
    mean_r2 = float(np.mean(finite)) if finite else float("nan")
    return row, mean_r2


# ---------------------------------------------------------------------------
# AdamW training loop
# ---------------------------------------------------------------------------

class _AdamW:
    """Decoupled-weight-decay Adam: theta <- theta - lr * m_hat/(sqrt(v_hat)+eps)
    - lr * wd * theta."""

    def __init__(self, names, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for n, g in grads.items():
            if self.m[n] is None:
                self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            m_hat = self.m[n] / b1t
            v_hat = self.v[n] / b2t
            values[n] = values[n] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps) \
                - self.lr * self.wd * values[n]


def _clip_global(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if clip_norm > 0 and total > clip_norm:
        f = clip_norm / total
        for n in grads:
            grads[n] = grads[n] * f
    return total


def _values_to_blocks(values, dec: MLPParams, dyn: MLPParams):
    enc = EncoderParams(values["encoder.j_phi"].copy())
    d = MLPParams([values[f"decoder.w{i}"].copy() for i in range(len(dec.weights))],
                  [values[f"decoder.b{i}"].copy() for i in range(len(dec.weights))],
                  list(dec.activations))
    y = MLPParams([values[f"dynamics.w{i}"].copy() for i in range(len(dyn.weights))],
                  [values[f"dynamics.b{i}"].copy() for i in range(len(dyn.weights))],
                  list(dyn.activations))
    return enc, d, y


def train(db: TrainingDatabase, config: TrainConfig, progress=None):
    """Train a surrogate on a culled+scaled database (db.mask and db.scaler
    must be attached). Returns (SurrogateModel, TrainingLog)."""
    if db.mask is None or db.scaler is None:
        raise ModelError("database must carry a cull mask and scaler before training")
    mask, scaler = db.mask, db.scaler
    retain = effective_retain(mask, scaler)
    ridx = np.flatnonzero(retain)
    retained_names = tuple(np.array(db.species_names)[ridx])
    k_prime = len(ridx)
    m = config.latent_dim
    if m >= k_prime:
        raise ModelError(f"latent_dim {m} must be < retained species {k_prime}")

    arrays = _prepare_arrays(db, mask, scaler)
    n = arrays.y.shape[0]
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_train = int(round(config.split[0] * n))
    n_val = int(round(config.split[1] * n))
    idx_train = perm[:n_train]
    idx_val = perm[n_train:n_train + n_val]
    idx_test = perm[n_train + n_val:]
    tr = _batch_slice(arrays, idx_train)
    va = _batch_slice(arrays, idx_val)

    # fixed time unit making transformed latent-rate targets O(1)
    rate_mag = np.abs(tr.wdot)
    q = float(np.quantile(rate_mag, 0.999)) if rate_mag.size else 1.0
    rate_time_scale = 1.0 / max(q, 1e-30)

    enc, dec, dyn = build_model(k_prime, config, rng)
    values = {"encoder.j_phi": enc.j_phi.copy()}
    for tag, mlp in (("decoder", dec), ("dynamics", dyn)):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            values[f"{tag}.w{i}"] = w.copy()
            values[f"{tag}.b{i}"] = b.copy()
    opt = _AdamW(values.keys(), config.learning_rate, config.weight_decay)

    log = TrainingLog(param_counts={
        "encoder": enc.j_phi.size, "decoder": dec.n_params, "dynamics": dyn.n_params,
    })
    best_values = {k: v.copy() for k, v in values.items()}
    best_r2 = -np.inf
    best_epoch = -1
    diverged = False

    n_batches = max(1, math.ceil(len(idx_train) / config.batch_size))
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(idx_train))
        train_loss = 0.0
        for bi in range(n_batches):
            sel = order[bi * config.batch_size:(bi + 1) * config.batch_size]
            if len(sel) == 0:
                continue
            batch = _batch_slice(tr, sel)
            cur_enc, cur_dec, cur_dyn = _values_to_blocks(values, dec, dyn)
            params = _wrap_params(cur_enc, cur_dec, cur_dyn)
            total, _ = loss_terms(params, config, batch, scaler, cur_dec, cur_dyn,
                                  rate_time_scale, ridx)
            lv = float(total.value)
            if not np.isfinite(lv):
                diverged = True
                break
            ad.backward(total)
            grads = {nm: np.asarray(v.grad) if v.grad is not None
                     else np.zeros_like(v.value) for nm, v in params.items()}
            _clip_global(grads, config.clip_norm)
            opt.step(values, grads)
            train_loss += lv * len(sel)
        if diverged:
            log.stopped_reason = "diverged"
            break
        train_loss /= len(idx_train)

        cur_enc, cur_dec, cur_dyn = _values_to_blocks(values, dec, dyn)
        val_params = _wrap_params(cur_enc, cur_dec, cur_dyn)
        val_total, _ = loss_terms(val_params, config, va, scaler, cur_dec, cur_dyn,
                                  rate_time_scale, ridx)
        r2_row, mean_r2 = _val_r2_row(cur_enc, cur_dec, cur_dyn, va,
                                      rate_time_scale, scaler.trans_offset, m,
                                      retained_names)
        row = {"epoch": epoch, "train_loss": train_loss,
               "val_loss": float(val_total.value), "val_r2_mean": mean_r2}
        row.update(r2_row)
        log.epochs.append(row)
        if progress:
            progress(row)

        if np.isfinite(mean_r2) and mean_r2 > best_r2:
            best_r2 = mean_r2
            best_epoch = epoch
            best_values = {k: v.copy() for k, v in values.items()}
        if epoch - best_epoch >= config.early_stop_window:
            log.stopped_reason = "early_stop"
            break
    else:
        log.stopped_reason = log.stopped_reason or "max_epochs"

    log.best_epoch = best_epoch
    log.best_val_r2 = float(best_r2)

    enc_b, dec_b, dyn_b = _values_to_blocks(best_values, dec, dyn)
    del values

    # clip ranges harvested from the training split
    z_train = tr.y @ enc_b.j_phi.T
    clip_Z = np.column_stack([z_train.min(axis=0), z_train.max(axis=0)])
    K = db.n_species
    T_train = db.x[idx_train, K]
    p_train = db.x[idx_train, K + 1]

    # training-time caches for downstream consistency checks
    z_first = arrays.y[:1] @ enc_b.j_phi.T
    y_hat_tr = dec_b.forward_np(z_train)
    recon_r2 = float(np.mean([_r2(tr.y_s[:, j], y_hat_tr[:, j]) for j in range(k_prime)]))

    if "molar_masses" not in db.meta:
        raise ModelError(
            "database lacks molar masses in meta; assemble it via dataset.assemble"
        )
    model = SurrogateModel(
        encoder=enc_b, decoder=dec_b, dynamics=dyn_b, scaler=scaler, mask=mask,
        mech_fingerprint=db.mech_fingerprint, species_names=tuple(db.species_names),
        molar_masses=np.array(db.meta["molar_masses"]),
        rate_time_scale=rate_time_scale,
        clip_T=(float(T_train.min()), float(T_train.max())),
        clip_p=(float(p_train.min()), float(p_train.max())),
        clip_Z=clip_Z, latent_dim=m,
        meta={
            "seed": config.seed,
            "best_epoch": best_epoch,
            "best_val_r2": float(best_r2),
            "z_first_train_row": [float(v) for v in z_first[0]],
            "train_reconstruction_r2": recon_r2,
            "n_rows": int(n),
            "split_sizes": [int(len(idx_train)), int(len(idx_val)), int(len(idx_test))],
        },
    )
    if diverged:
        raise TrainingDiverged("training loss became non-finite", model=model, log=log)
    return model, log


# ---------------------------------------------------------------------------
# checkpoint I/O (structured text, exact round trip)
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "latentkin-checkpoint"
CHECKPOINT_VERSION = 1


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_matrix(f, name, a):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    f.write(f"{name} {a.shape[0]} {a.shape[1]}\n")
    for row in a:
        f.write(" ".join(_fmt(v) for v in row) + "\n")


def _read_matrix(lines, i, expected_name):
    parts = lines[i].split()
    if parts[0] != expected_name:
        raise ModelError(f"checkpoint line {i + 1}: expected {expected_name}, got {parts[0]}")
    r, c = int(parts[1]), int(parts[2])
    rows = [[float(v) for v in lines[i + 1 + j].split()] for j in range(r)]
    return np.array(rows).reshape(r, c), i + 1 + r


def save_model(model: SurrogateModel, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
        f.write(f"fingerprint {model.mech_fingerprint}\n")
        f.write(f"latent_dim {model.latent_dim}\n")
        f.write(f"rate_time_scale {_fmt(model.rate_time_scale)}\n")
        f.write(f"species {' '.join(model.species_names)}\n")
        f.write(f"molar_masses {' '.join(_fmt(v) for v in model.molar_masses)}\n")
        f.write(f"retain {' '.join(str(int(b)) for b in model.mask.retain)}\n")
        f.write(f"whitelist {' '.join(model.mask.whitelist)}\n")
        tm = model.mask.train_means
        f.write(f"train_means {' '.join(_fmt(v) for v in tm)}\n" if tm is not None
                else "train_means -\n")
        sc = model.scaler
        for nm, arr in (("x_min", sc.x_min), ("x_max", sc.x_max),
                        ("w_min", sc.w_min), ("w_max", sc.w_max)):
            f.write(f"scaler_{nm} {' '.join(_fmt(v) for v in arr)}\n")
        f.write(f"scaler_trans_offset {_fmt(sc.trans_offset)}\n")
        f.write(f"clip_T {_fmt(model.clip_T[0])} {_fmt(model.clip_T[1])}\n")
        f.write(f"clip_p {_fmt(model.clip_p[0])} {_fmt(model.clip_p[1])}\n")
        _write_matrix(f, "clip_Z", model.clip_Z)
        _write_matrix(f, "encoder", model.encoder.j_phi)
        for tag, mlp in (("decoder", model.decoder), ("dynamics", model.dynamics)):
            f.write(f"{tag} {len(mlp.weights)} {' '.join(mlp.activations)}\n")
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                _write_matrix(f, f"{tag}_w{i}", w)
                _write_matrix(f, f"{tag}_b{i}", b.reshape(1, -1))
        meta_items = sorted(model.meta.items())
        f.write(f"meta {len(meta_items)}\n")
        for k, v in meta_items:
            if isinstance(v, (list, tuple)):
                f.write(f"  {k} [{' '.join(_fmt(float(x)) for x in v)}]\n")
            elif isinstance(v, float):
                f.write(f"  {k} {_fmt(v)}\n")
            else:
                f.write(f"  {k} {v}\n")


def load_model(path, mech=None) -> SurrogateModel:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    head = lines[0].split()
    if head[0] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {head[1]}")

    def field_line(i, name):
        parts = lines[i].split()
        if parts[0] != name:
            raise ModelError(f"{path}:{i + 1}: expected {name}")
        return parts[1:]

    fingerprint = field_line(1, "fingerprint")[0]
    latent_dim = int(field_line(2, "latent_dim")[0])
    rate_time_scale = float(field_line(3, "rate_time_scale")[0])
    species = tuple(field_line(4, "species"))
    molar_masses = np.array([float(v) for v in field_line(5, "molar_masses")])
    retain = np.array([bool(int(v)) for v in field_line(6, "retain")])
    whitelist = tuple(field_line(7, "whitelist"))
    tm_parts = field_line(8, "train_means")
    train_means = None if tm_parts == ["-"] else np.array([float(v) for v in tm_parts])
    scaler = Scaler(
        x_min=np.array([float(v) for v in field_line(9, "scaler_x_min")]),
        x_max=np.array([float(v) for v in field_line(10, "scaler_x_max")]),
        w_min=np.array([float(v) for v in field_line(11, "scaler_w_min")]),
        w_max=np.array([float(v) for v in field_line(12, "scaler_w_max")]),
        trans_offset=float(field_line(13, "scaler_trans_offset")[0]),
    )
    clip_T = tuple(float(v) for v in field_line(14, "clip_T"))
    clip_p = tuple(float(v) for v in field_line(15, "clip_p"))
    clip_Z, i = _read_matrix(lines, 16, "clip_Z")
    j_phi, i = _read_matrix(lines, i, "encoder")

    def read_mlp(i, tag):
        parts = lines[i].split()
        if parts[0] != tag:
            raise ModelError(f"{path}:{i + 1}: expected {tag} block")
        n_layers = int(parts[1])
        acts = parts[2:]
        i += 1
        ws, bs = [], []
        for li in range(n_layers):
            w, i = _read_matrix(lines, i, f"{tag}_w{li}")
            b, i = _read_matrix(lines, i, f"{tag}_b{li}")
            ws.append(w)
            bs.append(b.ravel())
        return MLPParams(ws, bs, acts), i

    decoder, i = read_mlp(i, "decoder")
    dynamics, i = read_mlp(i, "dynamics")
    n_meta = int(field_line(i, "meta")[0])
    meta = {}
    for j in range(n_meta):
        ln = lines[i + 1 + j].strip()
        key, _, rest = ln.partition(" ")
        rest = rest.strip()
        if rest.startswith("["):
            meta[key] = [float(v) for v in rest[1:-1].split()] if rest != "[]" else []
        else:
            try:
                meta[key] = int(rest)
            except ValueError:
                try:
                    meta[key] = float(rest)
                except ValueError:
                    meta[key] = rest

    if len(retain) != len(species):
        raise ModelError(f"{path}: retain mask length != species count")
    mask = CullMask(retain=retain, species_names=species, whitelist=whitelist,
                    train_means=train_means)
    model = SurrogateModel(
        encoder=EncoderParams(j_phi), decoder=decoder, dynamics=dynamics,
        scaler=scaler, mask=mask, mech_fingerprint=fingerprint,
        species_names=species, molar_masses=molar_masses,
        rate_time_scale=rate_time_scale, clip_T=clip_T, clip_p=clip_p,
        clip_Z=clip_Z, latent_dim=latent_dim, meta=meta,
    )
    if mech is not None:
        if len(species) != mech.n_species or len(mask.retain) != mech.n_species:
            raise ModelError(
                f"{path}: checkpoint species count {len(species)} does not match "
                f"mechanism ({mech.n_species})"
            )
        if fingerprint != mech.fingerprint:
            raise ModelError(f"{path}: mechanism fingerprint mismatch")
    return model
