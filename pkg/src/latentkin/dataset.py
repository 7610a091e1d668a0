"""Training database assembly, species culling, scaling and persistence.

The database pairs the thermochemical input state X = [Y_1..Y_K, T, p] with
the dynamic response W = [wdot_1..wdot_K, wdot_T, cp, cv, reserved] row by
row. Rate columns are stored raw; the signed square-root power transform and
min-max scaling are applied lazily at training time so one database serves
multiple transform experiments. The reserved column carries an optional
viscosity output and is NaN when absent.

Persistence is a self-describing little-endian binary container:

    magic "CZDB" | u32 version | u64 header_len | header JSON (UTF-8)
    | X rows (row-major float64) | W rows | profile_id (int64) | t (float64)
    | footer: one CRC-64/XZ (u64) per array, in the same order

The header JSON stores N, K, column names, the mechanism fingerprint, the
cull mask and scaler when attached, and is canonicalized (sorted keys) so a
save -> load -> save round trip is byte-identical.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .kinetics import Mechanism

MAGIC = b"CZDB"
VERSION = 1
TRANS_OFFSET = 1e-4

__all__ = [
    "TrainingDatabase",
    "Scaler",
    "CullMask",
    "DatasetError",
    "IntegrityError",
    "assemble",
    "cull_species",
    "trans",
    "trans_inverse",
    "fit_scaler",
    "save",
    "load",
    "crc64",
]


class DatasetError(ValueError):
    pass


class IntegrityError(DatasetError):
    """Corrupted, truncated or mismatched container."""


# ---------------------------------------------------------------------------
# power transform
# ---------------------------------------------------------------------------

def trans(x, offset: float = TRANS_OFFSET):
    """Signed square-root power transform y = sign(x + c) * sqrt(|x + c|).

    Strictly increasing; stabilizes the variance of rate-like quantities
    spanning many orders of magnitude. trans(0) = +sqrt(c), trans(-c) = 0.
    """
    x = np.asarray(x, dtype=float)
    shifted = x + offset
    out = np.sign(shifted) * np.sqrt(np.abs(shifted))
    return float(out) if out.ndim == 0 else out


def trans_inverse(y, offset: float = TRANS_OFFSET):
    """Exact inverse of :func:`trans`: x = sign(y) * y^2 - c."""
    y = np.asarray(y, dtype=float)
    out = np.sign(y) * y * y - offset
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# cull mask
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CullMask:
    """Retained-species selection with the training means of culled species
    (used downstream to complete decoded compositions for gas-constant
    estimates)."""

    retain: np.ndarray            # (K,) bool
    species_names: tuple[str, ...]
    whitelist: tuple[str, ...] = ()
    train_means: np.ndarray | None = None  # (K,) mean mass fraction per species

    def __post_init__(self):
        object.__setattr__(self, "retain", np.asarray(self.retain, dtype=bool))
        if self.retain.shape != (len(self.species_names),):
            raise DatasetError("retain mask length must equal species count")
        if int(self.retain.sum()) < 2:
            raise DatasetError("at least 2 species must be retained")

    @property
    def k_prime(self) -> int:
        return int(self.retain.sum())

    @property
    def retained_names(self) -> tuple[str, ...]:
        return tuple(n for n, r in zip(self.species_names, self.retain) if r)

    @property
    def culled_names(self) -> tuple[str, ...]:
        return tuple(n for n, r in zip(self.species_names, self.retain) if not r)


# ---------------------------------------------------------------------------
# scaler
# ---------------------------------------------------------------------------

@dataclass
class Scaler:
    """Per-column min-max scaling to [0, 1]; rate-family columns (species
    rates and wdot_T) are power-transformed before the min-max fit."""

    x_min: np.ndarray
    x_max: np.ndarray
    w_min: np.ndarray
    w_max: np.ndarray
    trans_offset: float = TRANS_OFFSET

    def _affine(self, v, lo, hi):
        return (v - lo) / (hi - lo)

    def _affine_inv(self, s, lo, hi):
        return lo + s * (hi - lo)

    # --- scalar channels -------------------------------------------------
    def scale_T(self, T):
        return self._affine(np.asarray(T, dtype=float), self.x_min[-2], self.x_max[-2])

    def unscale_T(self, s):
        return self._affine_inv(np.asarray(s, dtype=float), self.x_min[-2], self.x_max[-2])

    def scale_p(self, p):
        return self._affine(np.asarray(p, dtype=float), self.x_min[-1], self.x_max[-1])

    def unscale_p(self, s):
        return self._affine_inv(np.asarray(s, dtype=float), self.x_min[-1], self.x_max[-1])

    # --- species channels --------------------------------------------------
    def scale_Y(self, y_retained, retained_idx):
        """Min-max scaling of retained mass-fraction columns."""
        return self._affine(np.asarray(y_retained, dtype=float),
                            self.x_min[retained_idx], self.x_max[retained_idx])

    def unscale_Y(self, s, retained_idx):
        return self._affine_inv(np.asarray(s, dtype=float),
                                self.x_min[retained_idx], self.x_max[retained_idx])

    # --- W channels -------------------------------------------------------
    def scale_wdot_trans(self, wdot_retained, retained_idx):
        """trans + min-max for retained species-rate columns.

        ``retained_idx``: indices of the retained species among the K species
        (the scaler stores full-width parameters).
        """
        tv = trans(wdot_retained, self.trans_offset)
        return self._affine(tv, self.w_min[retained_idx], self.w_max[retained_idx])

    def scale_wdotT_trans(self, wdot_T):
        k4 = len(self.w_min) - 4
        tv = trans(np.asarray(wdot_T, dtype=float), self.trans_offset)
        return self._affine(tv, self.w_min[k4], self.w_max[k4])

    def unscale_wdotT_trans(self, s):
        k4 = len(self.w_min) - 4
        tv = self._affine_inv(np.asarray(s, dtype=float), self.w_min[k4], self.w_max[k4])
        return trans_inverse(tv, self.trans_offset)

    def scale_cp(self, cp):
        k = len(self.w_min) - 3
        return self._affine(np.asarray(cp, dtype=float), self.w_min[k], self.w_max[k])

    def unscale_cp(self, s):
        k = len(self.w_min) - 3
        return self._affine_inv(np.asarray(s, dtype=float), self.w_min[k], self.w_max[k])

    def scale_cv(self, cv):
        k = len(self.w_min) - 2
        return self._affine(np.asarray(cv, dtype=float), self.w_min[k], self.w_max[k])

    def unscale_cv(self, s):
        k = len(self.w_min) - 2
        return self._affine_inv(np.asarray(s, dtype=float), self.w_min[k], self.w_max[k])

    # --- whole-matrix application (analysis convenience) ------------------
    def apply(self, db: "TrainingDatabase"):
        """Scaled copies (X_s, W_s) of the database matrices. Culled/inactive
        columns come back as NaN."""
        X_s = np.full_like(db.x, np.nan)
        W_s = np.full_like(db.w, np.nan)
        K = db.n_species
        for j in range(K + 2):
            lo, hi = self.x_min[j], self.x_max[j]
            if np.isfinite(lo) and hi > lo:
                X_s[:, j] = self._affine(db.x[:, j], lo, hi)
        for j in range(K + 4):
            lo, hi = self.w_min[j], self.w_max[j]
            if not (np.isfinite(lo) and hi > lo):
                continue
            col = db.w[:, j]
            if j < K or j == K:  # rate family: species rates and wdot_T
                col = trans(col, self.trans_offset)
            W_s[:, j] = self._affine(col, lo, hi)
        return X_s, W_s

    def invert(self, db: "TrainingDatabase", X_s, W_s):
        """Inverse of :meth:`apply` on the active columns."""
        X = np.full_like(X_s, np.nan)
        W = np.full_like(W_s, np.nan)
        K = db.n_species
        for j in range(K + 2):
            lo, hi = self.x_min[j], self.x_max[j]
            if np.isfinite(lo) and hi > lo:
                X[:, j] = self._affine_inv(X_s[:, j], lo, hi)
        for j in range(K + 4):
            lo, hi = self.w_min[j], self.w_max[j]
            if not (np.isfinite(lo) and hi > lo):
                continue
            col = self._affine_inv(W_s[:, j], lo, hi)
            if j < K or j == K:
                col = trans_inverse(col, self.trans_offset)
            W[:, j] = col
        return X, W


# ---------------------------------------------------------------------------
# the database
# ---------------------------------------------------------------------------

@dataclass
class TrainingDatabase:
    """Stacked snapshot matrices with provenance, plus optional scaler/mask."""

    x: np.ndarray                 # (N, K+2): Y_1..Y_K, T, p
    w: np.ndarray                 # (N, K+4): wdot_1..K, wdot_T, cp, cv, reserved
    species_names: tuple[str, ...]
    mech_fingerprint: str
    profile_ids: np.ndarray       # (N,) int64
    times: np.ndarray             # (N,) float64
    seed: int = 0
    mask: CullMask | None = None
    scaler: Scaler | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def n_species(self) -> int:
        return len(self.species_names)

    @property
    def x_columns(self) -> list[str]:
        return [f"Y_{n}" for n in self.species_names] + ["T", "p"]

    @property
    def w_columns(self) -> list[str]:
        return [f"wdot_{n}" for n in self.species_names] + ["wdot_T", "cp", "cv", "reserved"]

    def validate_rows(self, atol_sum: float = 1e-9):
        K = self.n_species
        Y = self.x[:, :K]
        if self.n_rows and (np.any(Y < -1e-10) or np.any(Y > 1 + 1e-10)):
            raise DatasetError("mass-fraction column outside [0, 1]")
        if self.n_rows and np.any(np.abs(Y.sum(axis=1) - 1.0) > atol_sum):
            raise DatasetError("mass fractions do not sum to 1 within tolerance")


def assemble(runs, mech: Mechanism, seed: int = 0) -> TrainingDatabase:
    """Stack (profile_id, Trajectory) pairs into a database.

    Rows are ordered deterministically by (profile_id, t). All trajectories
    must come from the same mechanism (the caller guarantees provenance; the
    row width is checked here).
    """
    K = mech.n_species
    runs = sorted(runs, key=lambda it: it[0])
    xs, ws, pids, ts = [], [], [], []
    for pid, traj in runs:
        n = len(traj)
        if traj.Y.shape[1] != K:
            raise DatasetError(
                f"trajectory for profile {pid} has {traj.Y.shape[1]} species, mechanism has {K}"
            )
        x = np.column_stack([traj.Y, traj.T, traj.p])
        w = np.column_stack([traj.wdot, traj.wdot_T, traj.cp, traj.cv,
                             np.full(n, np.nan)])
        order = np.argsort(traj.t, kind="stable")
        xs.append(x[order])
        ws.append(w[order])
        pids.append(np.full(n, pid, dtype=np.int64))
        ts.append(traj.t[order])
    if xs:
        x = np.vstack(xs)
        w = np.vstack(ws)
        pid = np.concatenate(pids)
        t = np.concatenate(ts)
    else:
        x = np.zeros((0, K + 2))
        w = np.zeros((0, K + 4))
        pid = np.zeros(0, dtype=np.int64)
        t = np.zeros(0)
    return TrainingDatabase(
        x=x, w=w, species_names=mech.species_names,
        mech_fingerprint=mech.fingerprint, profile_ids=pid, times=t, seed=seed,
        meta={"molar_masses": [float(v) for v in mech.molar_masses]},
    )


def cull_species(db: TrainingDatabase, rel_variance_threshold: float = 1e-6,
                 whitelist: tuple[str, ...] = ()) -> CullMask:
    """Retain species whose mass-fraction column variance, normalized by the
    largest species-column variance, exceeds the threshold; whitelisted
    species are always retained."""
    if db.n_rows < 2:
        raise DatasetError("culling needs at least 2 rows")
    K = db.n_species
    Y = db.x[:, :K]
    var = Y.var(axis=0)
    vmax = var.max()
    if vmax == 0.0:
        raise DatasetError("all species columns are constant; nothing to learn")
    retain = var / vmax > rel_variance_threshold
    for name in whitelist:
        if name not in db.species_names:
            raise DatasetError(f"whitelisted species {name!r} not in mechanism")
        retain[db.species_names.index(name)] = True
    if int(retain.sum()) < 2:
        raise DatasetError(
            f"threshold {rel_variance_threshold} leaves fewer than 2 species"
        )
    return CullMask(
        retain=retain, species_names=db.species_names,
        whitelist=tuple(whitelist), train_means=Y.mean(axis=0),
    )


def fit_scaler(db: TrainingDatabase, mask: CullMask) -> Scaler:
    """Min-max parameters over the database; rate-family columns are fit on
    their power-transformed values. Culled species columns are left inactive
    (NaN); a constant retained species column is dropped (folded out of the
    active set) with a warning, a constant non-species column is an error."""
    K = db.n_species
    x_min = np.full(K + 2, np.nan)
    x_max = np.full(K + 2, np.nan)
    w_min = np.full(K + 4, np.nan)
    w_max = np.full(K + 4, np.nan)

    for j in range(K):
        if not mask.retain[j]:
            continue
        col = db.x[:, j]
        lo, hi = float(col.min()), float(col.max())
        if hi <= lo:
            warnings.warn(
                f"species column {db.species_names[j]} is constant; dropped from scaling"
            )
            continue
        x_min[j], x_max[j] = lo, hi
        wcol = trans(db.w[:, j], TRANS_OFFSET)
        wlo, whi = float(wcol.min()), float(wcol.max())
        if whi <= wlo:
            warnings.warn(
                f"rate column wdot_{db.species_names[j]} is constant; dropped from scaling"
            )
        else:
            w_min[j], w_max[j] = wlo, whi

    for j, name in ((K, "T"), (K + 1, "p")):
        col = db.x[:, j]
        lo, hi = float(col.min()), float(col.max())
        if hi <= lo:
            raise DatasetError(f"column {name} is constant; cannot scale")
        x_min[j], x_max[j] = lo, hi

    for j, name in ((K, "wdot_T"), (K + 1, "cp"), (K + 2, "cv")):
        col = db.w[:, j]
        if j == K:
            col = trans(col, TRANS_OFFSET)
        lo, hi = float(col.min()), float(col.max())
        if hi <= lo:
            raise DatasetError(f"column {name} is constant; cannot scale")
        w_min[j], w_max[j] = lo, hi

    return Scaler(x_min=x_min, x_max=x_max, w_min=w_min, w_max=w_max)


def effective_retain(mask: CullMask, scaler: Scaler) -> np.ndarray:
    """Mask of species both retained by culling and active in the scaler."""
    K = len(mask.species_names)
    return mask.retain & np.isfinite(scaler.x_min[:K])


# ---------------------------------------------------------------------------
# CRC-64/XZ
# ---------------------------------------------------------------------------

_CRC64_POLY_REFLECTED = 0xC96C5795D7870F42  # ECMA-182, reflected

def _crc64_table():
    table = np.zeros(256, dtype=np.uint64)
    for b in range(256):
        crc = b
        for _ in range(8):
            crc = (crc >> 1) ^ (_CRC64_POLY_REFLECTED if crc & 1 else 0)
        table[b] = crc
    return table


_TABLE = _crc64_table()
_TABLE_PY = [int(v) for v in _TABLE]

# GF(2) operator advancing a CRC register over one zero byte, as a 64x64
# bit matrix in packed rows; used by the block-combine fast path
def _shift_matrix_one_byte():
    rows = np.zeros(64, dtype=np.uint64)
    for bit in range(64):
        rows[bit] = _TABLE_PY[(1 << bit) & 0xFF] ^ ((1 << bit) >> 8)
    return rows


def _mat_apply(rows: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Apply the packed GF(2) matrix to a batch of uint64 registers."""
    out = np.zeros_like(vec)
    for bit in range(64):
        mask = (vec >> np.uint64(bit)) & np.uint64(1)
        out ^= mask * rows[bit]
    return out


def _mat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Compose packed GF(2) matrices: (a after b)."""
    return _mat_apply(a, b)


_SHIFT_POWERS: list[np.ndarray] = []  # _SHIFT_POWERS[k] advances 8 * 2^k bytes
_LEVEL_TABLES: dict[int, np.ndarray] = {}  # (8, 256) byte tables per level


def _shift_power(k: int) -> np.ndarray:
    while len(_SHIFT_POWERS) <= k:
        if not _SHIFT_POWERS:
            m = _shift_matrix_one_byte()
            for _ in range(3):  # one byte -> 8 bytes by squaring
                m = _mat_mul(m, m)
            _SHIFT_POWERS.append(m)
        else:
            prev = _SHIFT_POWERS[-1]
            _SHIFT_POWERS.append(_mat_mul(prev, prev))
    return _SHIFT_POWERS[k]


def _level_tables(k: int) -> np.ndarray:
    """Byte-indexed advance tables for level k: 8 gathers replace the 64
    bit-mask operations of a packed-matrix apply."""
    if k not in _LEVEL_TABLES:
        rows = _shift_power(k)
        tabs = np.empty((8, 256), dtype=np.uint64)
        vals = np.arange(256, dtype=np.uint64)
        for j in range(8):
            tabs[j] = _mat_apply(rows, vals << np.uint64(8 * j))
        _LEVEL_TABLES[k] = tabs
    return _LEVEL_TABLES[k]


def _apply_level(k: int, vec: np.ndarray) -> np.ndarray:
    tabs = _level_tables(k)
    out = tabs[0][vec & np.uint64(0xFF)]
    for j in range(1, 8):
        out ^= tabs[j][(vec >> np.uint64(8 * j)) & np.uint64(0xFF)]
    return out


def _crc64_raw_numpy(data: np.ndarray) -> int:
    """Raw (init=0, no final xor) CRC of data whose byte length is a power of
    two times 8, via per-word table gathers and a logarithmic GF(2) combine."""
    words = data.view("<u8")
    # per-word raw CRC, bytes consumed in message (little-endian) order
    contrib = np.zeros(len(words), dtype=np.uint64)
    tmp = words.copy()
    for _ in range(8):
        contrib = _TABLE[(contrib ^ tmp) & np.uint64(0xFF)] ^ (contrib >> np.uint64(8))
        tmp = tmp >> np.uint64(8)
    # fold pairs: crc(A || B) = advance(crc(A), len(B)) ^ crc(B)
    level = 0
    while len(contrib) > 1:
        left = contrib[0::2]
        right = contrib[1::2]
        contrib = _apply_level(level, left) ^ right
        level += 1
    return int(contrib[0])


def _advance(reg: int, n_bytes: int) -> int:
    """Advance a CRC register over n zero bytes."""
    v = np.array([reg], dtype=np.uint64)
    whole, rem = divmod(n_bytes, 8)
    m1 = _shift_matrix_one_byte()
    for _ in range(rem):
        v = _mat_apply(m1, v)
    bit = 0
    while whole:
        if whole & 1:
            v = _mat_apply(_shift_power(bit), v)
        whole >>= 1
        bit += 1
    return int(v[0])


def crc64(data) -> int:
    """CRC-64/XZ (reflected ECMA-182 polynomial, init and xorout all-ones)."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).ravel()
    else:
        buf = np.frombuffer(memoryview(data), dtype=np.uint8)
    n = len(buf)
    if n < 4096:
        crc = 0xFFFFFFFFFFFFFFFF
        for byte in buf.tobytes():
            crc = _TABLE_PY[(crc ^ byte) & 0xFF] ^ (crc >> 8)
        return crc ^ 0xFFFFFFFFFFFFFFFF

    # front-pad with zeros to a power-of-two multiple of 8 bytes; leading
    # zero bytes leave the raw (init=0) CRC unchanged
    target = max(8, 1 << (n - 1).bit_length())
    padded = np.zeros(target, dtype=np.uint8)
    padded[target - n:] = buf
    raw = _crc64_raw_numpy(padded)
    # fold in the all-ones init advanced over the true message length
    init = _advance(0xFFFFFFFFFFFFFFFF, n)
    return (raw ^ init) ^ 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------

def _mask_to_json(mask: CullMask | None):
    if mask is None:
        return None
    return {
        "retain": [int(b) for b in mask.retain],
        "species_names": list(mask.species_names),
        "whitelist": list(mask.whitelist),
        "train_means": None if mask.train_means is None
        else [float(v) for v in mask.train_means],
    }


def _mask_from_json(d):
    if d is None:
        return None
    return CullMask(
        retain=np.array(d["retain"], dtype=bool),
        species_names=tuple(d["species_names"]),
        whitelist=tuple(d["whitelist"]),
        train_means=None if d["train_means"] is None else np.array(d["train_means"]),
    )


def _scaler_to_json(sc: Scaler | None):
    if sc is None:
        return None
    return {
        "x_min": [float(v) for v in sc.x_min],
        "x_max": [float(v) for v in sc.x_max],
        "w_min": [float(v) for v in sc.w_min],
        "w_max": [float(v) for v in sc.w_max],
        "trans_offset": sc.trans_offset,
    }


def _scaler_from_json(d):
    if d is None:
        return None
    return Scaler(
        x_min=np.array(d["x_min"]), x_max=np.array(d["x_max"]),
        w_min=np.array(d["w_min"]), w_max=np.array(d["w_max"]),
        trans_offset=d["trans_offset"],
    )


def save(db: TrainingDatabase, path):
    """Write the container; deterministic byte layout."""
    header = {
        "n_rows": int(db.n_rows),
        "n_species": int(db.n_species),
        "species_names": list(db.species_names),
        "x_columns": db.x_columns,
        "w_columns": db.w_columns,
        "mech_fingerprint": db.mech_fingerprint,
        "seed": int(db.seed),
        "mask": _mask_to_json(db.mask),
        "scaler": _scaler_to_json(db.scaler),
        "meta": db.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    arrays = [
        np.ascontiguousarray(db.x, dtype="<f8"),
        np.ascontiguousarray(db.w, dtype="<f8"),
        np.ascontiguousarray(db.profile_ids, dtype="<i8"),
        np.ascontiguousarray(db.times, dtype="<f8"),
    ]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([VERSION], dtype="<u4").tobytes())
        f.write(np.array([len(hbytes)], dtype="<u8").tobytes())
        f.write(hbytes)
        crcs = []
        for a in arrays:
            raw = a.tobytes()
            f.write(raw)
            crcs.append(crc64(raw))
        f.write(np.array(crcs, dtype="<u8").tobytes())


def load(path, mech: Mechanism | None = None) -> TrainingDatabase:
    """Read a container; verifies magic, version, CRCs and, when a mechanism
    is supplied, its fingerprint."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise IntegrityError(f"{path}: bad magic bytes {blob[:4]!r}")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported version {version}")
    hlen = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    try:
        header = json.loads(blob[16:16 + hlen].decode())
    except Exception as exc:
        raise IntegrityError(f"{path}: corrupt header: {exc}") from exc
    n = header["n_rows"]
    K = header["n_species"]
    off = 16 + hlen
    sizes = [n * (K + 2) * 8, n * (K + 4) * 8, n * 8, n * 8]
    if len(blob) != off + sum(sizes) + 4 * 8:
        raise IntegrityError(f"{path}: truncated or oversized container")
    arrays = []
    for sz in sizes:
        arrays.append(blob[off:off + sz])
        off += sz
    crcs = np.frombuffer(blob[off:off + 32], dtype="<u8")
    for i, raw in enumerate(arrays):
        if crc64(raw) != int(crcs[i]):
            raise IntegrityError(f"{path}: CRC mismatch on array {i}")
    x = np.frombuffer(arrays[0], dtype="<f8").reshape(n, K + 2).copy()
    w = np.frombuffer(arrays[1], dtype="<f8").reshape(n, K + 4).copy()
    pid = np.frombuffer(arrays[2], dtype="<i8").copy()
    t = np.frombuffer(arrays[3], dtype="<f8").copy()
    if mech is not None and header["mech_fingerprint"] != mech.fingerprint:
        raise IntegrityError(
            f"{path}: mechanism fingerprint mismatch "
            f"(database {header['mech_fingerprint'][:12]}..., "
            f"mechanism {mech.fingerprint[:12]}...)"
        )
    return TrainingDatabase(
        x=x, w=w, species_names=tuple(header["species_names"]),
        mech_fingerprint=header["mech_fingerprint"], profile_ids=pid, times=t,
        seed=header["seed"], mask=_mask_from_json(header["mask"]),
        scaler=_scaler_from_json(header["scaler"]), meta=header["meta"],
    )
