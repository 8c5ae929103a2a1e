"""Two-layer stacked LSTM regressor trained with BPTT and RMSprop.

Per layer the four gate blocks are stored stacked in the order
``i, f, o, g``: ``Wx`` is ``(4, u, d)``, ``Wh`` is ``(4, u, u)`` and ``b`` is
``(4, u)``. One cell step is::

    i = sigmoid(Wx_i x + Wh_i h + b_i)      f, o likewise
    g = tanh(Wx_g x + Wh_g h + b_g)
    c = f * c_prev + i * g
    h = o * tanh(c)

The network runs layer 1 over the whole window, applies inverted dropout to
every layer-1 output, feeds that sequence to layer 2, applies dropout to the
final layer-2 state, then ``relu`` and an affine head give a scalar.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as _rng
from .errors import ArgumentError, FormatError, TrainingError, ValidationError
from .preprocess import WindowedDataset

log = logging.getLogger(__name__)

MODEL_FORMAT = "soilwave.lstm/1"
GATES = ("i", "f", "o", "g")
CLIP_NORM = 5.0


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LstmLayerParams:
    Wx: np.ndarray  # (4, u, d)
    Wh: np.ndarray  # (4, u, u)
    b: np.ndarray  # (4, u)

    def __post_init__(self):
        self.Wx = np.asarray(self.Wx, dtype=float)
        self.Wh = np.asarray(self.Wh, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.Wx.ndim != 3 or self.Wx.shape[0] != 4:
            raise ArgumentError(f"Wx must be (4, u, d), got {self.Wx.shape}")
        u = self.Wx.shape[1]
        if self.Wh.shape != (4, u, u) or self.b.shape != (4, u):
            raise ArgumentError("Wh must be (4, u, u) and b (4, u)")

    @property
    def units(self) -> int:
        return self.Wx.shape[1]

    @property
    def input_width(self) -> int:
        return self.Wx.shape[2]

    def gate(self, q: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = GATES.index(q)
        return self.Wx[k], self.Wh[k], self.b[k]

    @classmethod
    def zeros(cls, units: int, input_width: int) -> "LstmLayerParams":
        return cls(np.zeros((4, units, input_width)), np.zeros((4, units, units)), np.zeros((4, units)))


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class LstmModel:
    layer1: LstmLayerParams
    layer2: LstmLayerParams
    head_w: np.ndarray
    head_b: float = 0.0
    dropout_p: float = 0.2

    def __post_init__(self):
        self.head_w = np.asarray(self.head_w, dtype=float)
        self.head_b = float(self.head_b)
        if self.layer2.input_width != self.layer1.units:
            raise ArgumentError("layer 2 input width must equal layer 1 units")
        if self.head_w.shape != (self.layer2.units,):
            raise ArgumentError("head_w must have one weight per layer-2 unit")
        if not 0 <= self.dropout_p < 1:
            raise ValidationError("dropout_p must lie in [0, 1)")

    @property
    def input_width(self) -> int:
        return self.layer1.input_width

    def params(self) -> dict[str, np.ndarray]:
        return {
            "layer1.Wx": self.layer1.Wx, "layer1.Wh": self.layer1.Wh, "layer1.b": self.layer1.b,
            "layer2.Wx": self.layer2.Wx, "layer2.Wh": self.layer2.Wh, "layer2.b": self.layer2.b,
            "head.w": self.head_w, "head.b": np.asarray(self.head_b),
        }

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        self.layer1 = LstmLayerParams(p["layer1.Wx"], p["layer1.Wh"], p["layer1.b"])
        self.layer2 = LstmLayerParams(p["layer2.Wx"], p["layer2.Wh"], p["layer2.b"])
        self.head_w = np.array(p["head.w"], dtype=float)
        self.head_b = float(p["head.b"])

    def copy(self) -> "LstmModel":
        m = LstmModel(self.layer1, self.layer2, self.head_w, self.head_b, self.dropout_p)
        m.set_params({k: np.array(v, copy=True) for k, v in self.params().items()})
        return m

    def predict(self, windows) -> np.ndarray:
        return predict(self, windows)

    def to_dict(self, train_config: Optional["TrainConfig"] = None) -> dict:
        def layer(p: LstmLayerParams):
            d = {"units": p.units, "input_width": p.input_width}
            for k, q in enumerate(GATES):
                d[f"W_x_{q}"] = p.Wx[k].tolist()
                d[f"W_h_{q}"] = p.Wh[k].tolist()
                d[f"b_{q}"] = p.b[k].tolist()
            return d

        doc = {
            "format": MODEL_FORMAT,
            "dropout_p": self.dropout_p,
            "head_activation": "relu",
            "layer1": layer(self.layer1),
            "layer2": layer(self.layer2),
            "head_w": self.head_w.tolist(),
            "head_b": self.head_b,
        }
        if train_config is not None:
            doc["train_config"] = train_config.to_dict()
        return doc

    @classmethod
    def from_dict(cls, d: dict) -> "LstmModel":
        if d.get("format") != MODEL_FORMAT:
            raise FormatError(f"not an LSTM model document: format={d.get('format')!r}")

        def layer(ld):
            u, w = int(ld["units"]), int(ld["input_width"])
            Wx = np.array([ld[f"W_x_{q}"] for q in GATES], dtype=float).reshape(4, u, w)
            Wh = np.array([ld[f"W_h_{q}"] for q in GATES], dtype=float).reshape(4, u, u)
            b = np.array([ld[f"b_{q}"] for q in GATES], dtype=float).reshape(4, u)
            return LstmLayerParams(Wx, Wh, b)

        return cls(layer(d["layer1"]), layer(d["layer2"]), d["head_w"], d["head_b"], d["dropout_p"])


@dataclass(frozen=True)
class LstmSpec:
    units1: int = 32
    units2: int = 32
    dropout_p: float = 0.2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    clip_norm: Optional[float] = CLIP_NORM

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("lr must be > 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
                "rms_decay": self.rms_decay, "rms_eps": self.rms_eps, "clip_norm": self.clip_norm}


def _glorot(rng: np.random.Generator, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(input_width: int, spec: LstmSpec = LstmSpec(), seed: int = 0) -> LstmModel:
    """Glorot-uniform weights, forget-gate bias 1, other biases 0."""
    rng = _rng.stream(seed, _rng.LSTM_INIT)

    def layer(u, d):
        Wx = _glorot(rng, (4, u, d), d, u)
        Wh = _glorot(rng, (4, u, u), u, u)
        b = np.zeros((4, u))
        b[GATES.index("f")] = 1.0
        return LstmLayerParams(Wx, Wh, b)

    l1 = layer(spec.units1, input_width)
    l2 = layer(spec.units2, spec.units1)
    head_w = _glorot(rng, (spec.units2,), spec.units2, 1)
    return LstmModel(l1, l2, head_w, 0.0, spec.dropout_p)


# -- forward ---------------------------------------------------------------


def lstm_cell_forward(params: LstmLayerParams, x, prev: LstmState):
    """One cell step. Works on a single vector or a leading batch axis.

    Returns ``(LstmState, {"i": .., "f": .., "o": .., "g": ..})``.
    """
    x = np.asarray(x, dtype=float)
    h_prev = np.asarray(prev.h, dtype=float)
    c_prev = np.asarray(prev.c, dtype=float)
    u, d = params.units, params.input_width
    if x.shape[-1] != d or h_prev.shape[-1] != u or c_prev.shape != h_prev.shape:
        raise ArgumentError(f"shape mismatch: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} for u={u}, d={d}")
    if not (np.isfinite(x).all() and np.isfinite(h_prev).all() and np.isfinite(c_prev).all()):
        raise ValidationError("non-finite cell input")
    z = (np.einsum("kud,...d->...ku", params.Wx, x)
         + np.einsum("kuv,...v->...ku", params.Wh, h_prev) + params.b)
    i = sigmoid(z[..., 0, :])
    f = sigmoid(z[..., 1, :])
    o = sigmoid(z[..., 2, :])
    g = np.tanh(z[..., 3, :])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return LstmState(h, c), {"i": i, "f": f, "o": o, "g": g}


def _layer_forward(p: LstmLayerParams, xs: np.ndarray):
    """Unroll one layer over ``xs`` (B, T, d) from a zero state."""
    B, T, _ = xs.shape
    u = p.units
    Wx = p.Wx.reshape(4 * u, -1)
    Wh = p.Wh.reshape(4 * u, u)
    bias = p.b.reshape(4 * u)
    # input projections for all steps at once
    zx = xs @ Wx.T + bias
    hs = np.zeros((T + 1, B, u))
    cs = np.zeros((T + 1, B, u))
    acts = np.empty((T, B, 4 * u))
    tcs = np.empty((T, B, u))
    for t in range(T):
        z = zx[:, t] + hs[t] @ Wh.T
        a = acts[t]
        a[:, :3 * u] = sigmoid(z[:, :3 * u])
        a[:, 3 * u:] = np.tanh(z[:, 3 * u:])
        i, f, o, g = a[:, :u], a[:, u:2 * u], a[:, 2 * u:3 * u], a[:, 3 * u:]
        cs[t + 1] = f * cs[t] + i * g
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = o * tcs[t]
    return {"xs": xs, "hs": hs, "cs": cs, "acts": acts, "tanh_c": tcs}


def _dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


@dataclass
class ForwardCache:
    windows: np.ndarray
    l1: dict
    l2: dict
    mask1: np.ndarray  # (B, T, u1)
    mask2: np.ndarray  # (B, u2)
    head_in: np.ndarray  # (B, u2) = h2_last * mask2 before relu
    shapes: tuple = field(default=())


def forward_batch(model: LstmModel, windows, train: bool = False,
                  rng: Optional[np.random.Generator] = None,
                  masks: Optional[tuple[np.ndarray, np.ndarray]] = None):
    """Predictions for ``windows`` (B, T, d) and the cache for :func:`backward_batch`.

    In train mode dropout masks are drawn from ``rng`` unless ``masks`` is
    given; in eval mode all masks are ones.
    """
    w = np.asarray(windows, dtype=float)
    if w.ndim != 3 or w.shape[2] != model.input_width:
        raise ArgumentError(f"windows must be (B, T, {model.input_width}), got {w.shape}")
    B, T, _ = w.shape
    u1, u2 = model.layer1.units, model.layer2.units
    if masks is not None:
        m1, m2 = masks
        if m1.shape != (B, T, u1) or m2.shape != (B, u2):
            raise ArgumentError("dropout masks do not match the batch")
    elif train and model.dropout_p > 0:
        if rng is None:
            raise ArgumentError("train mode with dropout needs an rng")
        m1 = _dropout_mask(rng, (B, T, u1), model.dropout_p)
        m2 = _dropout_mask(rng, (B, u2), model.dropout_p)
    else:
        m1 = np.ones((B, T, u1))
        m2 = np.ones((B, u2))
    c1 = _layer_forward(model.layer1, w)
    h1 = np.transpose(c1["hs"][1:], (1, 0, 2)) * m1
    c2 = _layer_forward(model.layer2, h1)
    head_in = c2["hs"][-1] * m2
    pred = np.maximum(head_in, 0.0) @ model.head_w + model.head_b
    cache = ForwardCache(w, c1, c2, m1, m2, head_in, (B, T, u1, u2))
    return pred, cache


def lstm_forward(model: LstmModel, window, mode: str = "eval",
                 rng: Optional[np.random.Generator] = None):
    """Scalar prediction for one ``(steps, d)`` window plus its BPTT cache."""
    if mode not in ("train", "eval"):
        raise ArgumentError("mode must be 'train' or 'eval'")
    w = np.asarray(window, dtype=float)
    if w.ndim != 2:
        raise ArgumentError("window must be (steps, d)")
    pred, cache = forward_batch(model, w[None], train=(mode == "train"), rng=rng)
    return float(pred[0]), cache


def predict(model: LstmModel, windows, chunk: int = 4096) -> np.ndarray:
    w = np.asarray(windows, dtype=float)
    out = [forward_batch(model, w[s:s + chunk])[0] for s in range(0, w.shape[0], chunk)]
    return np.concatenate(out) if out else np.empty(0)


# -- backward --------------------------------------------------------------


def _layer_backward(p: LstmLayerParams, c: dict, dhs: np.ndarray):
    """BPTT through one layer. ``dhs`` (T, B, u) is the gradient on each output h."""
    xs, hs, cs, acts, tcs = c["xs"], c["hs"], c["cs"], c["acts"], c["tanh_c"]
    B, T, d = xs.shape
    u = p.units
    Wx = p.Wx.reshape(4 * u, d)
    Wh = p.Wh.reshape(4 * u, u)
    dz_all = np.empty((T, B, 4 * u))
    dh_next = np.zeros((B, u))
    dc_next = np.zeros((B, u))
    for t in range(T - 1, -1, -1):
        a = acts[t]
        i, f, o, g = a[:, :u], a[:, u:2 * u], a[:, 2 * u:3 * u], a[:, 3 * u:]
        dh = dhs[t] + dh_next
        tc = tcs[t]
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[t]
        dz[:, :u] = dc * g * i * (1.0 - i)
        dz[:, u:2 * u] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * u:3 * u] = dh * tc * o * (1.0 - o)
        dz[:, 3 * u:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz @ Wh
    dz_flat = dz_all.reshape(T * B, 4 * u)
    x_flat = np.transpose(xs, (1, 0, 2)).reshape(T * B, d)
    dWx = dz_flat.T @ x_flat
    dWh = dz_flat.T @ hs[:-1].reshape(T * B, u)
    db = dz_flat.sum(axis=0)
    dxs = np.transpose((dz_flat @ Wx).reshape(T, B, d), (1, 0, 2))
    grads = LstmLayerParams(dWx.reshape(4, u, d), dWh.reshape(4, u, u), db.reshape(4, u))
    return grads, dxs


def backward_batch(model: LstmModel, cache: ForwardCache, d_pred) -> dict[str, np.ndarray]:
    """Gradients of ``sum_b d_pred[b] * pred[b]`` with respect to every parameter."""
    d_pred = np.asarray(d_pred, dtype=float).reshape(-1)
    B, T, u1, u2 = cache.shapes
    if d_pred.size != B or model.layer1.units != u1 or model.layer2.units != u2 \
            or cache.windows.shape[2] != model.input_width:
        raise ArgumentError("cache does not match model / d_pred")
    relu = np.maximum(cache.head_in, 0.0)
    g_head_w = relu.T @ d_pred
    g_head_b = d_pred.sum()
    d_head_in = np.outer(d_pred, model.head_w) * (cache.head_in > 0)
    dh2 = np.zeros((T, B, u2))
    dh2[-1] = d_head_in * cache.mask2
    g2, dx2 = _layer_backward(model.layer2, cache.l2, dh2)
    dh1 = np.transpose(dx2 * cache.mask1, (1, 0, 2))
    g1, _ = _layer_backward(model.layer1, cache.l1, dh1)
    return {
        "layer1.Wx": g1.Wx, "layer1.Wh": g1.Wh, "layer1.b": g1.b,
        "layer2.Wx": g2.Wx, "layer2.Wh": g2.Wh, "layer2.b": g2.b,
        "head.w": g_head_w, "head.b": np.asarray(g_head_b),
    }


def lstm_backward(model: LstmModel, cache: ForwardCache, d_prediction: float) -> dict[str, np.ndarray]:
    """Gradients for a single-window cache from :func:`lstm_forward`."""
    if cache.shapes[0] != 1:
        raise ArgumentError("lstm_backward expects a single-window cache")
    return backward_batch(model, cache, np.array([d_prediction]))


# -- optimisation ----------------------------------------------------------


def rmsprop_step(params: dict, grads: dict, state: Optional[dict], cfg: TrainConfig):
    """``s = rho*s + (1-rho)*g^2``; ``theta -= lr * g / (sqrt(s) + eps)``.

    Returns new ``(params, state)``; the inputs are not modified.
    """
    if state is None:
        state = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()}
    if params.keys() != grads.keys() or params.keys() != state.keys():
        raise ArgumentError("params, grads and state must share keys")
    rho = cfg.rms_decay
    new_p, new_s = {}, {}
    for k, theta in params.items():
        g = np.asarray(grads[k], dtype=float)
        theta = np.asarray(theta, dtype=float)
        if g.shape != theta.shape or state[k].shape != theta.shape:
            raise ArgumentError(f"shape mismatch for {k}: {theta.shape} vs {g.shape}")
        s = rho * state[k] + (1.0 - rho) * g * g
        new_s[k] = s
        new_p[k] = theta - cfg.lr * g / (np.sqrt(s) + cfg.rms_eps)
    return new_p, new_s


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_grads(grads: dict, max_norm: Optional[float]) -> tuple[dict, bool]:
    if max_norm is None:
        return grads, False
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, False
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, True


def loss_half_mse(pred, target) -> float:
    d = np.asarray(pred) - np.asarray(target)
    return float(d @ d) / (2.0 * d.size)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: Optional[float]


def history_csv(history) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss)])
    return out.getvalue()


def train_lstm(train: WindowedDataset, val: Optional[WindowedDataset] = None,
               spec: LstmSpec = LstmSpec(), cfg: TrainConfig = TrainConfig(),
               model: Optional[LstmModel] = None) -> tuple[LstmModel, list[EpochRecord]]:
    """Mini-batch RMSprop on the half-MSE loss.

    Each epoch reshuffles the training windows with the seeded shuffle
    stream. ``history`` holds one record per epoch: the size-weighted mean of
    the batch losses (train mode) and the eval-mode loss on ``val``.
    """
    if len(train) == 0:
        raise ArgumentError("training set is empty")
    X, y = train.windows, train.targets
    if model is None:
        model = init_model(X.shape[2], spec, cfg.seed)
    else:
        model = model.copy()
    shuffle_rng = _rng.stream(cfg.seed, _rng.LSTM_SHUFFLE)
    drop_rng = _rng.stream(cfg.seed, _rng.LSTM_DROPOUT)
    params = model.params()
    state = None
    clipped = 0
    history = []
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        # divergence surfaces as a non-finite epoch loss below
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                pred, cache = forward_batch(model, X[idx], train=True, rng=drop_rng)
                resid = pred - y[idx]
                total += float(resid @ resid) / 2.0
                grads = backward_batch(model, cache, resid / idx.size)
                grads, hit = clip_grads(grads, cfg.clip_norm)
                clipped += hit
                params, state = rmsprop_step(params, grads, state, cfg)
                model.set_params(params)
                params = model.params()
        train_loss = total / n
        with np.errstate(over="ignore", invalid="ignore"):
            val_loss = loss_half_mse(predict(model, val.windows), val.targets) if val is not None and len(val) else None
        if not math.isfinite(train_loss) or (val_loss is not None and not math.isfinite(val_loss)):
            raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
        history.append(EpochRecord(epoch, train_loss, val_loss))
    if clipped:
        log.info("gradient norm clipped in %d batches", clipped)
    return model, history
