"""Small feedforward classifier mapping Euler solutions to structural-index classes.

One tanh hidden layer, softmax output, summed cross-entropy loss. Training is
full-batch and single-threaded so a fixed seed reproduces the weights bit for
bit.
"""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    DegenerateFeatures,
    EmptySolutionSet,
    GeorefMismatch,
    LabelOutOfRange,
    ShapeMismatch,
    TooFewPoints,
)
from .euler import DEFAULT_SI_SET

log = logging.getLogger(__name__)

N_FEATURES = 6
N_HIDDEN = 100
N_CLASSES = 6
FEATURE_NAMES = ("x0_norm", "y0_norm", "z0", "rms", "abs_base", "horizontal_gradient")
OPTIMIZERS = ("scaled_conjugate_gradient", "gradient_descent_momentum")


@dataclass
class MlpModel:
    w1: np.ndarray                 # (hidden, inputs)
    b1: np.ndarray
    w2: np.ndarray                 # (classes, hidden)
    b2: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    constant_features: list = field(default_factory=list)
    si_set: tuple = DEFAULT_SI_SET

    @property
    def n_inputs(self):
        return self.w1.shape[1]

    @property
    def n_hidden(self):
        return self.w1.shape[0]

    @property
    def n_classes(self):
        return self.w2.shape[0]

    @property
    def n_params(self):
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def flat(self):
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_flat(self, theta):
        h, d, c = self.n_hidden, self.n_inputs, self.n_classes
        theta = np.asarray(theta, dtype=float)
        a = h * d
        b = a + h
        e = b + c * h
        return MlpModel(
            theta[:a].reshape(h, d).copy(), theta[a:b].copy(),
            theta[b:e].reshape(c, h).copy(), theta[e:].copy(),
            self.feature_mean, self.feature_std, list(self.constant_features), self.si_set,
        )

    def to_dict(self):
        return {
            "dimensions": [self.n_inputs, self.n_hidden, self.n_classes],
            "hidden_activation": "tanh",
            "output": "softmax",
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "constant_features": list(self.constant_features),
            "si_set": list(self.si_set),
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w", encoding="utf-8") as f:
                f.write(text)
        return text

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["w1"], dtype=float), np.asarray(d["b1"], dtype=float),
            np.asarray(d["w2"], dtype=float), np.asarray(d["b2"], dtype=float),
            np.asarray(d["feature_mean"], dtype=float), np.asarray(d["feature_std"], dtype=float),
            list(d.get("constant_features", [])), tuple(d.get("si_set", DEFAULT_SI_SET)),
        )

    @classmethod
    def from_json(cls, source):
        if hasattr(source, "read"):
            return cls.from_dict(json.load(source))
        text = str(source)
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        with open(text, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def init_model(rng, n_inputs=N_FEATURES, n_hidden=N_HIDDEN, n_classes=N_CLASSES,
               feature_mean=None, feature_std=None, si_set=DEFAULT_SI_SET):
    """Glorot-uniform weights, zero biases."""
    a1 = math.sqrt(6.0 / (n_inputs + n_hidden))
    a2 = math.sqrt(6.0 / (n_hidden + n_classes))
    w1 = rng.uniform(-a1, a1, size=(n_hidden, n_inputs))
    w2 = rng.uniform(-a2, a2, size=(n_classes, n_hidden))
    mean = np.zeros(n_inputs) if feature_mean is None else np.asarray(feature_mean, dtype=float)
    std = np.ones(n_inputs) if feature_std is None else np.asarray(feature_std, dtype=float)
    return MlpModel(w1, np.zeros(n_hidden), w2, np.zeros(n_classes), mean, std, [], tuple(si_set))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

ROW_BLOCK = 1024


def _dense(A, W):
    """``A @ W.T`` with each output row computed independently of the batch.

    A plain matrix product lets BLAS pick kernels by batch size, so a row's
    result could change with the rows around it. A stacked product runs the
    same (1 x k) @ (k x m) kernel for every row.
    """
    return np.matmul(A[:, None, :], np.ascontiguousarray(W.T))[:, 0, :]


def _outer_sum(D, A):
    """``D.T @ A`` accumulated sample by sample in a fixed order."""
    out = np.zeros((D.shape[1], A.shape[1]), dtype=np.result_type(D, A))
    for a in range(0, D.shape[0], ROW_BLOCK):
        out += (D[a:a + ROW_BLOCK, :, None] * A[a:a + ROW_BLOCK, None, :]).sum(axis=0)
    return out


def _normalize(model, X):
    return (X - model.feature_mean) / model.feature_std


def _log_softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    s = z - zmax
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _check_features(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_inputs:
        raise ShapeMismatch(f"expected (n, {model.n_inputs}) features, got {X.shape}")
    return X


def predict(model, features):
    """Class probabilities, one row per sample."""
    X = _check_features(model, features)
    H = np.tanh(_dense(_normalize(model, X), model.w1) + model.b1)
    z = _dense(H, model.w2) + model.b2
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_and_gradient(model, X, y):
    """Summed cross-entropy and its gradient as a flat vector (same layout as ``flat``)."""
    Xn = _normalize(model, X)
    H = np.tanh(_dense(Xn, model.w1) + model.b1)
    logp = _log_softmax(_dense(H, model.w2) + model.b2)
    n = X.shape[0]
    loss = -float(np.sum(logp[np.arange(n), y]))
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    gw2 = _outer_sum(dz, H)
    gb2 = dz.sum(axis=0)
    da = _dense(dz, model.w2.T) * (1.0 - H * H)
    gw1 = _outer_sum(da, Xn)
    gb1 = da.sum(axis=0)
    return loss, np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def loss_value(model, X, y, dtype=float):
    """Summed cross-entropy, evaluated in ``dtype`` arithmetic."""
    cast = lambda a: np.asarray(a, dtype=dtype)
    Xn = (cast(X) - cast(model.feature_mean)) / cast(model.feature_std)
    H = np.tanh(_dense(Xn, cast(model.w1)) + cast(model.b1))
    logp = _log_softmax(_dense(H, cast(model.w2)) + cast(model.b2))
    return -np.sum(logp[np.arange(X.shape[0]), y])


def gradient_check(model, features, labels, h=1e-6):
    """Max over parameters of |g_bp - g_fd| / max(|g_bp| + |g_fd|, 1e-8).

    ``g_fd`` is the central difference (L(p + h) - L(p - h)) / 2h of the
    summed loss. Parameters and steps are binary64; the two loss values are
    evaluated in extended precision where the platform has it, because in
    binary64 their rounding error (about eps * L / h) is the same size as the
    tolerance for parameters with small gradients.
    """
    X = _check_features(model, features)
    y = np.asarray(labels, dtype=int)
    if X.shape[0] == 0:
        raise ValueError("gradient_check needs a non-empty batch")
    _, g = loss_and_gradient(model, X, y)
    theta = model.flat()
    worst = 0.0
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        diff = (loss_value(model.with_flat(tp), X, y, np.longdouble)
                - loss_value(model.with_flat(tm), X, y, np.longdouble))
        fd = float(diff / (np.longdouble(tp[i]) - np.longdouble(tm[i])))
        err = abs(g[i] - fd) / max(abs(g[i]) + abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingConfig:
    optimizer: str = "scaled_conjugate_gradient"
    max_epochs: int = 1000
    tolerance: float = 1e-9
    seed: int = 0
    validation_fraction: float = 0.2
    learning_rate: float = 0.1
    momentum: float = 0.9
    n_hidden: int = N_HIDDEN

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)       # mean cross-entropy per epoch
    validation_loss: list = field(default_factory=list)
    validation_accuracy: float = float("nan")
    train_index: np.ndarray | None = None
    validation_index: np.ndarray | None = None
    stopped: str = ""

    def to_dict(self):
        return {
            "train_loss": self.train_loss,
            "validation_loss": self.validation_loss,
            "validation_accuracy": self.validation_accuracy,
            "n_train": 0 if self.train_index is None else int(self.train_index.size),
            "n_validation": 0 if self.validation_index is None else int(self.validation_index.size),
            "stopped": self.stopped,
        }


def stratified_split(labels, fraction, rng):
    """Per-class random split; classes with >= 2 samples keep at least one on each side."""
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        if idx.size >= 2:
            k = min(max(k, 1), idx.size - 1)
        else:
            k = 0
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _fit_normalization(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = [int(i) for i in np.flatnonzero(~(std > 0))]
    std = np.where(std > 0, std, 1.0)
    return mean, std, constant


def _gd_momentum(model, X, y, config, history, record):
    n = X.shape[0]
    theta = model.flat()
    velocity = np.zeros_like(theta)
    lr = config.learning_rate
    loss, g = loss_and_gradient(model, X, y)
    loss /= n
    for _ in range(config.max_epochs):
        step = config.momentum * velocity - lr * g / n
        trial = model.with_flat(theta + step)
        new_loss, new_g = loss_and_gradient(trial, X, y)
        new_loss /= n
        if new_loss > loss:
            # reject: drop the momentum and shrink the step
            velocity[:] = 0.0
            lr *= 0.5
            record(model)
            if lr < 1e-12:
                history.stopped = "step_underflow"
                break
            continue
        improvement = loss - new_loss
        theta = theta + step
        velocity = step
        model, loss, g = trial, new_loss, new_g
        lr *= 1.05
        record(model)
        if improvement < config.tolerance:
            history.stopped = "tolerance"
            break
    else:
        history.stopped = "max_epochs"
    return model


def _scg(model, X, y, config, history, record):
    """Scaled conjugate gradient on the mean loss."""
    n = X.shape[0]

    def f(t):
        return float(loss_value(model.with_flat(t), X, y)) / n

    def fg(t):
        v, g = loss_and_gradient(model.with_flat(t), X, y)
        return v / n, g / n

    w = model.flat()
    N = w.size
    sigma0, lam, lam_bar = 5e-5, 5e-7, 0.0
    fw, gw = fg(w)
    r = -gw
    p = r.copy()
    success = True
    delta = 0.0
    s = None
    for k in range(1, config.max_epochs + 1):
        p2 = float(p @ p)
        if p2 == 0.0:
            history.stopped = "zero_gradient"
            break
        if success:
            sig = sigma0 / math.sqrt(p2)
            _, g_sig = fg(w + sig * p)
            s = (g_sig - gw) / sig
            delta = float(p @ s)
        delta_k = delta + (lam - lam_bar) * p2
        if delta_k <= 0:
            lam_bar = 2.0 * (lam - delta_k / p2)
            delta_k = -delta_k + lam * p2
            lam = lam_bar
        mu = float(p @ r)
        alpha = mu / delta_k
        w_new = w + alpha * p
        f_new = f(w_new)
        cmp = 2.0 * delta_k * (fw - f_new) / (mu * mu)
        if cmp >= 0:
            improvement = fw - f_new
            w = w_new
            fw, gw = fg(w)
            r_new = -gw
            lam_bar = 0.0
            success = True
            if k % N == 0:
                p = r_new.copy()
            else:
                beta = (float(r_new @ r_new) - float(r_new @ r)) / mu
                p = r_new + beta * p
            r = r_new
            if cmp >= 0.75:
                lam = lam / 4.0
        else:
            lam_bar = lam
            success = False
            improvement = None
        if cmp < 0.25:
            lam = lam + delta_k * (1.0 - cmp) / p2
        lam = min(lam, 1e100)
        record(model.with_flat(w))
        if improvement is not None and improvement < config.tolerance:
            history.stopped = "tolerance"
            break
        if not np.any(r):
            history.stopped = "zero_gradient"
            break
    else:
        history.stopped = "max_epochs"
    return model.with_flat(w)


def train_mlp(features, labels, config=None, si_set=DEFAULT_SI_SET):
    """Train on a stratified split; returns ``(model, history)``.

    The history holds the mean training and validation cross-entropy after
    every epoch. Constant feature columns are normalized with stddev 1 and
    listed in ``model.constant_features``.
    """
    config = config or TrainingConfig()
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    n_classes = len(si_set)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ShapeMismatch(f"features {X.shape} do not match {y.size} labels")
    if X.shape[0] < 2 * n_classes:
        raise TooFewPoints(f"need at least {2 * n_classes} samples, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if not np.all(np.equal(np.mod(y, 1), 0)) or y.min() < 0 or y.max() >= n_classes:
        raise LabelOutOfRange(f"labels must be integers in [0, {n_classes - 1}]")
    y = y.astype(int)

    rng = np.random.Generator(np.random.Philox(key=int(config.seed) & (2**64 - 1)))
    tr, va = stratified_split(y, config.validation_fraction, rng)
    mean, std, constant = _fit_normalization(X[tr])
    if constant:
        log.warning("%s", DegenerateFeatures(f"constant feature columns {constant}; using stddev 1"))
    model = init_model(rng, X.shape[1], config.n_hidden, n_classes, mean, std, si_set)
    model.constant_features = constant

    history = TrainingHistory(train_index=tr, validation_index=va)
    Xtr, ytr, Xva, yva = X[tr], y[tr], X[va], y[va]

    def record(m):
        history.train_loss.append(float(loss_value(m, Xtr, ytr)) / Xtr.shape[0])
        if Xva.shape[0]:
            history.validation_loss.append(float(loss_value(m, Xva, yva)) / Xva.shape[0])

    if config.optimizer == "gradient_descent_momentum":
        model = _gd_momentum(model, Xtr, ytr, config, history, record)
    else:
        model = _scg(model, Xtr, ytr, config, history, record)
    if Xva.shape[0]:
        history.validation_accuracy = float(np.mean(np.argmax(predict(model, Xva), axis=1) == yva))
    log.info("training stopped (%s) after %d epochs", history.stopped, len(history.train_loss))
    return model, history


# ---------------------------------------------------------------------------
# Features, labels and reports
# ---------------------------------------------------------------------------

def si_labels(si_values, si_set=DEFAULT_SI_SET):
    si_sorted = np.asarray(sorted(si_set), dtype=float)
    si_values = np.asarray(si_values, dtype=float)
    idx = np.searchsorted(si_sorted, si_values)
    idx = np.clip(idx, 0, si_sorted.size - 1)
    bad = si_sorted[idx] != si_values
    if np.any(bad):
        raise LabelOutOfRange(f"si values {np.unique(si_values[bad]).tolist()} not in {list(si_sorted)}")
    return idx


def build_features(solutions, Tx, Ty, si_set=DEFAULT_SI_SET):
    """Six features per solution plus the SI class label.

    Features: x0 and y0 scaled to [0, 1] over the grid extent, z0, rms,
    |base| and the horizontal gradient magnitude at the window centre.
    """
    if len(solutions) == 0:
        raise EmptySolutionSet("no solutions to build features from")
    georef = Tx.georef
    if Ty.georef != georef:
        raise GeorefMismatch("Tx and Ty grids differ in georef")
    sweep_ref = solutions.provenance.get("georef")
    if sweep_ref is not None and sweep_ref != georef.to_dict():
        raise GeorefMismatch("gradient grids do not match the sweep georef")
    r, c = solutions.window_row, solutions.window_col
    nr, nc = georef.shape
    if r.min() < 0 or c.min() < 0 or r.max() >= nr or c.max() >= nc:
        raise GeorefMismatch("window indices fall outside the gradient grids")
    xmin, xmax, ymin, ymax = georef.extent()
    hg = np.hypot(Tx.values[r, c], Ty.values[r, c])
    F = np.column_stack([
        (solutions.x0 - xmin) / (xmax - xmin),
        (solutions.y0 - ymin) / (ymax - ymin),
        solutions.z0,
        solutions.rms,
        np.abs(solutions.base),
        hg,
    ])
    return F, si_labels(solutions.si, si_set)


def confusion_matrix(true, pred, n_classes=N_CLASSES):
    m = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(m, (np.asarray(true, dtype=int), np.asarray(pred, dtype=int)), 1)
    return m


def confusion_csv(matrix, si_set=DEFAULT_SI_SET):
    """Rows are true classes, columns predicted classes, both labelled by SI."""
    names = [f"{s:g}" for s in sorted(si_set)]
    buf = io.StringIO()
    buf.write("true\\predicted," + ",".join(names) + "\n")
    for name, row in zip(names, matrix):
        buf.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
    return buf.getvalue()


def make_blobs(n_per_class, seed, separation=10.0, n_features=N_FEATURES, n_classes=N_CLASSES):
    """Unit-variance Gaussian blobs whose centres are ``separation`` apart on distinct axes."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    centers = np.zeros((n_classes, n_features))
    for k in range(n_classes):
        centers[k, k % n_features] = separation / math.sqrt(2.0)
    X = np.concatenate([centers[k] + rng.standard_normal((n_per_class, n_features)) for k in range(n_classes)])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return X, y
