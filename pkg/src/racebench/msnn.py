"""Model-structured neural steering controller.

The network is small enough to write out by hand. Each of the ``w + 1``
preview samples gets a quasi-steady-state steering value

    dss_j = rho_j L + Q(v_j, ax_j) ay_j + S(v_j, ax_j) ay_j^2
    Q = q0 + qv v + qx ax,    S = s0 + sv v + sx ax

and the command is a velocity-gated linear filter over those values,

    delta = sum_i sum_j dss_j psi_i(v_j) F_ij

with triangular gates psi_i that sum to one. The baseline variant uses a
single linear slope (dss_j = rho_j L + A ay_j) and gates on the current speed
only. The model is linear in the filters and in the physics coefficients
separately, so every gradient is a short closed form; training is Adam on the
RMSE loss with early stopping on the validation RMSE.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

EXTENDED = "extended"
BASELINE = "baseline"
PHYS_NAMES = ("q0", "qv", "qx", "s0", "sv", "sx")


class TrainingError(RuntimeError):
    def __init__(self, message, batch_index):
        super().__init__(f"{message} (batch {batch_index})")
        self.batch_index = batch_index


@dataclass(frozen=True)
class ReferenceWindow:
    rho: np.ndarray
    v: np.ndarray
    ay: np.ndarray
    ax: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, f), dtype=float) for f in ("rho", "v", "ay", "ax")]
        n = len(arrs[0])
        if n < 1 or any(a.shape != (n,) for a in arrs):
            raise ValueError("window vectors must be 1-D and of equal length")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("window entries must be finite")
        if np.any(arrs[1] < 0):
            raise ValueError("window speeds must be non-negative")
        for f, a in zip(("rho", "v", "ay", "ax"), arrs):
            object.__setattr__(self, f, a)

    @property
    def w(self) -> int:
        return len(self.rho) - 1


# --------------------------------------------------------------------------
# Data


@dataclass
class SteerDataset:
    """Windows stacked row-wise: every array is (M, w+1) except ``delta`` (M,)."""

    rho: np.ndarray
    v: np.ndarray
    ay: np.ndarray
    ax: np.ndarray
    delta: np.ndarray
    split: str = "train"
    T_s: float = 0.05

    def __post_init__(self):
        for f in ("rho", "v", "ay", "ax"):
            setattr(self, f, np.atleast_2d(np.asarray(getattr(self, f), dtype=float)))
        self.delta = np.asarray(self.delta, dtype=float).reshape(-1)
        m = len(self.delta)
        shape = self.rho.shape
        if any(getattr(self, f).shape != shape for f in ("v", "ay", "ax")) or (m and shape[0] != m):
            raise ValueError("dataset arrays have inconsistent shapes")

    def __len__(self):
        return len(self.delta)

    @property
    def w(self) -> int:
        return self.rho.shape[1] - 1

    def window(self, k: int) -> ReferenceWindow:
        return ReferenceWindow(self.rho[k], self.v[k], self.ay[k], self.ax[k])

    def pairs(self):
        for k in range(len(self)):
            yield self.window(k), float(self.delta[k])

    @classmethod
    def from_pairs(cls, pairs, split="train", T_s=0.05):
        pairs = list(pairs)
        if not pairs:
            raise ValueError("no windows")
        ws = [p[0] for p in pairs]
        return cls(np.array([w.rho for w in ws]), np.array([w.v for w in ws]),
                   np.array([w.ay for w in ws]), np.array([w.ax for w in ws]),
                   np.array([p[1] for p in pairs]), split, T_s)

    def subset(self, idx) -> "SteerDataset":
        return SteerDataset(self.rho[idx], self.v[idx], self.ay[idx], self.ax[idx], self.delta[idx],
                            self.split, self.T_s)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.rho, self.v, self.ay, self.ax, self.delta):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


DATASET_PREFIXES = ("rho", "v", "ay", "ax")


def write_dataset(data, path) -> None:
    """Write one dataset, or several splits sharing T_s and w, to one file."""
    parts = [data] if isinstance(data, SteerDataset) else list(data)
    if not parts:
        raise ValueError("nothing to write")
    first = parts[0]
    if any(d.w != first.w or d.T_s != first.T_s for d in parts):
        raise ValueError("splits disagree on window length or sample time")
    J = first.w + 1
    cols = ["split"] + [f"{p}_{j}" for p in DATASET_PREFIXES for j in range(J)] + ["delta"]
    with open(path, "w") as fh:
        fh.write(f"# T_s={first.T_s!r}\n")
        fh.write(",".join(cols) + "\n")
        for d in parts:
            for k in range(len(d)):
                vals = np.concatenate([d.rho[k], d.v[k], d.ay[k], d.ax[k], [d.delta[k]]])
                fh.write(d.split + "," + ",".join(repr(float(v)) for v in vals) + "\n")


def read_dataset(path):
    """Returns a dict split name -> SteerDataset (in file order)."""
    T_s = 0.05
    rows = {}
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition("=")
                if key.strip() == "T_s":
                    T_s = float(val)
                continue
            if header is None:
                header = line.split(",")
                continue
            parts = line.split(",")
            rows.setdefault(parts[0], []).append([float(v) for v in parts[1:]])
    if header is None:
        raise ValueError("dataset file has no header")
    J = (len(header) - 2) // 4
    out = {}
    for split, r in rows.items():
        a = np.array(r)
        out[split] = SteerDataset(a[:, :J], a[:, J:2 * J], a[:, 2 * J:3 * J], a[:, 3 * J:4 * J], a[:, -1],
                                  split, T_s)
    return out


# --------------------------------------------------------------------------
# Gates


def gate_knots(v_min: float, v_max: float, n: int) -> tuple:
    """``n`` triangle centres spread uniformly over [v_min, v_max]."""
    if n < 1:
        raise ValueError("need at least one gate")
    if n == 1:
        return (0.5 * (v_min + v_max),)
    return tuple(float(c) for c in np.linspace(v_min, v_max, n))


def gates(knots, v) -> np.ndarray:
    """Triangular memberships, shape ``v.shape + (n,)``; they sum to one.

    Outside the knot range the end triangles saturate at one.
    """
    v = np.asarray(v, dtype=float)
    c = np.asarray(knots, dtype=float)
    n = len(c)
    if n == 1:
        return np.ones(v.shape + (1,))
    # piecewise-linear interpolation of the identity basis is exactly the
    # triangle family, and it sums to one by construction
    vc = np.clip(v, c[0], c[-1])
    k = np.clip(np.searchsorted(c, vc, side="right") - 1, 0, n - 2)
    t = (vc - c[k]) / (c[k + 1] - c[k])
    out = np.zeros(v.shape + (n,))
    np.put_along_axis(out, k[..., None], (1.0 - t)[..., None], axis=-1)
    np.put_along_axis(out, (k + 1)[..., None], t[..., None], axis=-1)
    return out


# --------------------------------------------------------------------------
# Model


@dataclass
class MsnnModel:
    L: float
    w: int
    n: int = 1
    variant: str = EXTENDED
    knots: tuple = (0.0,)
    phys: np.ndarray = field(default_factory=lambda: np.array([0.01, 0, 0, 0, 0, 0], dtype=float))
    A: float = 0.01
    filters: np.ndarray | None = None
    T_s: float = 0.05
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in (EXTENDED, BASELINE):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n < 1 or self.w < 0:
            raise ValueError("need n >= 1 and w >= 0")
        if len(self.knots) != self.n:
            raise ValueError("need one gate knot per channel")
        self.knots = tuple(float(k) for k in self.knots)
        self.phys = np.asarray(self.phys, dtype=float).copy()
        if self.filters is None:
            self.filters = np.full((self.n, self.w + 1), 1.0 / (self.w + 1))
        self.filters = np.asarray(self.filters, dtype=float).reshape(self.n, self.w + 1).copy()
        if not np.all(np.isfinite(self.filters)):
            raise ValueError("filters must be finite")

    @classmethod
    def initial(cls, L, w, n, variant, v_range, T_s=0.05):
        """Fresh model: mild understeer prior, uniform filters, gates over ``v_range``."""
        return cls(L, w, n, variant, gate_knots(v_range[0], v_range[1], n), T_s=T_s)

    # parameter vector: extended [q0..sx, F], baseline [A, F]
    def params(self) -> np.ndarray:
        head = self.phys if self.variant == EXTENDED else np.array([self.A])
        return np.concatenate([head, self.filters.ravel()])

    def with_params(self, theta) -> "MsnnModel":
        theta = np.asarray(theta, dtype=float)
        h = 6 if self.variant == EXTENDED else 1
        m = replace(self, filters=theta[h:].reshape(self.n, self.w + 1).copy())
        if self.variant == EXTENDED:
            m.phys = theta[:6].copy()
        else:
            m.A = float(theta[0])
        return m

    @property
    def n_params(self) -> int:
        return (6 if self.variant == EXTENDED else 1) + self.filters.size

    def to_dict(self) -> dict:
        d = {
            "variant": self.variant, "L": self.L, "w": self.w, "n": self.n, "T_s": self.T_s,
            "gate_knots": list(self.knots), "filters": self.filters.tolist(),
            "provenance": self.provenance,
        }
        if self.variant == EXTENDED:
            d.update({k: float(v) for k, v in zip(PHYS_NAMES, self.phys)})
        else:
            d["A"] = self.A
        return d

    @classmethod
    def from_dict(cls, d) -> "MsnnModel":
        phys = [d.get(k, 0.0) for k in PHYS_NAMES]
        return cls(float(d["L"]), int(d["w"]), int(d["n"]), d["variant"], tuple(d["gate_knots"]),
                   np.array(phys, dtype=float), float(d.get("A", 0.0)), np.array(d["filters"]),
                   float(d.get("T_s", 0.05)), dict(d.get("provenance", {})))


def save_model(model: MsnnModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)
        fh.write("\n")


def load_model(path) -> MsnnModel:
    with open(path) as fh:
        return MsnnModel.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# Forward pass


def _qss(model, rho, v, ay, ax):
    if model.variant == EXTENDED:
        q0, qv, qx, s0, sv, sx = model.phys
        Q = q0 + qv * v + qx * ax
        S = s0 + sv * v + sx * ax
        return rho * model.L + Q * ay + S * ay * ay
    return rho * model.L + model.A * ay


def _gain(model, v):
    """Effective per-sample filter G_j = sum_i psi_i F_ij, shape like ``v``."""
    if model.variant == EXTENDED:
        psi = gates(model.knots, v)  # (..., J, n)
        return np.einsum("...jn,nj->...j", psi, model.filters), psi
    psi = gates(model.knots, v[..., 0])  # current speed only: (..., n)
    return psi @ model.filters, psi


def qss_vector(model: MsnnModel, window: ReferenceWindow) -> np.ndarray:
    return _qss(model, window.rho, window.v, window.ay, window.ax)


def msnn_forward(model: MsnnModel, window: ReferenceWindow) -> float:
    if window.w != model.w:
        raise ValueError(f"window has w={window.w}, model expects {model.w}")
    d = _qss(model, window.rho, window.v, window.ay, window.ax)
    G, _ = _gain(model, window.v)
    return float(np.dot(d, G))


def predict(model: MsnnModel, data: SteerDataset) -> np.ndarray:
    d = _qss(model, data.rho, data.v, data.ay, data.ax)
    G, _ = _gain(model, data.v)
    return np.sum(d * G, axis=1)


def gradient(model: MsnnModel, data: SteerDataset, weights=None) -> np.ndarray:
    """d(sum_m weights_m * delta_m) / d(params); ``weights`` default to ones."""
    rho, v, ay, ax = data.rho, data.v, data.ay, data.ax
    g = np.ones(len(data)) if weights is None else np.asarray(weights, dtype=float)
    d = _qss(model, rho, v, ay, ax)
    G, psi = _gain(model, v)
    if model.variant == EXTENDED:
        gF = np.einsum("m,mj,mjn->nj", g, d, psi)
        gG = g[:, None] * G
        ay2 = ay * ay
        head = np.array([
            np.sum(gG * ay), np.sum(gG * v * ay), np.sum(gG * ax * ay),
            np.sum(gG * ay2), np.sum(gG * v * ay2), np.sum(gG * ax * ay2),
        ])
    else:
        gF = np.einsum("m,mj,mn->nj", g, d, psi)
        head = np.array([np.sum(g[:, None] * G * ay)])
    return np.concatenate([head, gF.ravel()])


def rmse_and_grad(model: MsnnModel, data: SteerDataset):
    err = predict(model, data) - data.delta
    loss = math.sqrt(float(np.mean(err * err)))
    if loss == 0.0:
        return 0.0, np.zeros(model.n_params)
    if not math.isfinite(loss):
        return loss, np.full(model.n_params, np.nan)
    return loss, gradient(model, data, err / (len(data) * loss))


# --------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class Evaluation:
    rmse: float
    fvu: float
    fvu_defined: bool = True


def evaluate(model: MsnnModel, data: SteerDataset) -> Evaluation:
    if len(data) == 0:
        raise ValueError("empty dataset")
    err = predict(model, data) - data.delta
    sse = float(np.sum(err * err))
    var = float(np.sum((data.delta - data.delta.mean()) ** 2))
    rmse = math.sqrt(sse / len(data))
    if var == 0.0 or np.all(data.delta == data.delta[0]):
        return Evaluation(rmse, math.nan, False)
    return Evaluation(rmse, sse / var)


def aic(model: MsnnModel, data: SteerDataset) -> float:
    """N ln(MSE) + 2k; ``-inf`` when the fit is exact."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    err = predict(model, data) - data.delta
    mse = float(np.mean(err * err))
    if mse == 0.0:
        return -math.inf
    return len(data) * math.log(mse) + 2 * model.n_params


@dataclass(frozen=True)
class WeightReport:
    times: np.ndarray  # look-ahead time of each filter tap
    weights: np.ndarray  # (n, w+1)
    peak_index: tuple
    implied_delay: tuple
    flat: tuple


def interpret_weights(model: MsnnModel) -> WeightReport:
    """Per-channel filter curves, argmax tap and the delay it implies."""
    F = model.filters
    peaks, delays, flat = [], [], []
    for row in F:
        k = int(np.argmax(row))  # ties resolve to the smallest index
        peaks.append(k)
        delays.append(k * model.T_s)
        flat.append(bool(np.sum(row == row[k]) > 1))
    return WeightReport(np.arange(model.w + 1) * model.T_s, F.copy(), tuple(peaks), tuple(delays), tuple(flat))


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 200
    epochs: int = 6000
    patience: int = 400
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainHistory:
    train_rmse: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def train(model: MsnnModel, train_data: SteerDataset, val_data: SteerDataset,
          cfg: TrainConfig = TrainConfig()):
    """Adam on the RMSE loss. Returns (best model, history)."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    theta = model.params()
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    t = 0
    hist = TrainHistory()
    best = (math.inf, theta.copy())
    since_best = 0
    M = len(train_data)
    batch_no = 0
    cur = model
    for epoch in range(cfg.epochs):
        order = rng.permutation(M)
        for start in range(0, M, cfg.batch_size):
            batch = train_data.subset(order[start:start + cfg.batch_size])
            loss, g = rmse_and_grad(cur, batch)
            if not math.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingError("non-finite loss", batch_no)
            t += 1
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            s = cfg.beta2 * s + (1 - cfg.beta2) * g * g
            mh = m / (1 - cfg.beta1 ** t)
            sh = s / (1 - cfg.beta2 ** t)
            theta = theta - cfg.lr * mh / (np.sqrt(sh) + cfg.eps)
            cur = cur.with_params(theta)
            batch_no += 1
        tr = evaluate(cur, train_data).rmse
        va = evaluate(cur, val_data).rmse
        hist.train_rmse.append(tr)
        hist.val_rmse.append(va)
        if va < best[0]:
            best = (va, theta.copy())
            hist.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                hist.stopped_early = True
                break
    out = model.with_params(best[1])
    out.provenance = {"seed": cfg.seed, "train_digest": train_data.digest(), "val_digest": val_data.digest(),
                      "best_epoch": hist.best_epoch, "epochs_run": len(hist.val_rmse)}
    return out, hist


@dataclass(frozen=True)
class SelectionRow:
    n: int
    w: int
    k: int
    aic: float
    val_rmse: float


def select_structure(datasets, ns, ws, L, cfg: TrainConfig = TrainConfig(), variant=EXTENDED):
    """Train every (n, w) pair and rank by AIC on the training split.

    ``datasets(w)`` returns a (train, val) pair for window length ``w``.
    Returns (rows, best_row).
    """
    rows = []
    for n in ns:
        for w in ws:
            tr, va = datasets(w)
            vr = (float(tr.v.min()), float(tr.v.max()))
            m0 = MsnnModel.initial(L, w, n, variant, vr, tr.T_s)
            m, _ = train(m0, tr, va, cfg)
            rows.append(SelectionRow(n, w, m.n_params, aic(m, tr), evaluate(m, va).rmse))
    best = min(rows, key=lambda r: r.aic)
    return rows, best
