"""A small multi-task convolutional network in numpy, with its training recipe.

The network is a plain stack of ``conv -> ReLU -> 2x2 max-pool`` blocks,
global average pooling, dropout and one dense layer producing three sigmoid
heads (ci-DME, SRF, IRF). Gradients are exact backpropagation. Training uses
Adam, an L2 weight penalty on weights (not biases) and an exponential moving
average of the parameters, which is what gets evaluated.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imageops import AugmentConfig, augment

logger = logging.getLogger(__name__)

HEADS = ("cidme", "srf", "irf")
CHECKPOINT_VERSION = 1

Params = dict  # layer name -> ndarray, insertion-ordered


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 128
    blocks: tuple = ((16, 3, 1), (32, 3, 1), (32, 3, 1), (32, 3, 1))
    global_average_pool: bool = True
    dropout_keep_prob: float = 0.8
    heads: int = 3

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        if not self.blocks:
            raise ValueError("at least one convolution block is required")
        if not 0.0 < self.dropout_keep_prob <= 1.0:
            raise ValueError("dropout_keep_prob must be in (0, 1]")
        for out_ch, kernel, stride in self.blocks:
            if out_ch < 1 or kernel < 1 or kernel % 2 == 0 or stride < 1:
                raise ValueError(f"bad block {(out_ch, kernel, stride)}: kernel must be odd, all positive")
        if self.feature_shape()[0] < 1:
            raise ValueError("input_size too small for the number of blocks")

    def feature_shape(self) -> tuple[int, int, int]:
        size = self.input_size
        for _, _, stride in self.blocks:
            size = ((size - 1) // stride + 1) // 2
        return size, size, self.blocks[-1][0]

    @property
    def feature_dim(self) -> int:
        h, w, c = self.feature_shape()
        return c if self.global_average_pool else h * w * c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    weight_decay: float = 4e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 0.1
    ema_decay: float = 0.9999
    total_steps: int = 2000
    seed: int = 0
    tune_every: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.adam_epsilon <= 0:
            raise ValueError("learning_rate and adam_epsilon must be > 0, weight_decay >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must be in (0, 1)")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class PredictionTriple(NamedTuple):
    cidme_confidence: float
    srf_confidence: float
    irf_confidence: float


def init_params(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng([seed, 0])
    params = {}
    in_ch = 3
    for i, (out_ch, k, _) in enumerate(config.blocks):
        fan_in = k * k * in_ch
        limit = np.sqrt(6.0 / fan_in)
        params[f"conv{i}/w"] = rng.uniform(-limit, limit, (k, k, in_ch, out_ch)).astype(dtype)
        params[f"conv{i}/b"] = np.zeros(out_ch, dtype)
        in_ch = out_ch
    limit = np.sqrt(3.0 / config.feature_dim)
    params["head/w"] = rng.uniform(-limit, limit, (config.feature_dim, config.heads)).astype(dtype)
    params["head/b"] = np.zeros(config.heads, dtype)
    return params


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


# -- layers -------------------------------------------------------------------

def _conv_forward(x, w, b, stride):
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    y = cols @ w.reshape(-1, w.shape[-1]) + b
    return y.reshape(n, ho, wo, -1), cols


def _conv_backward(dy, cols, w, x_shape, stride, need_dx=True):
    k = w.shape[0]
    p = k // 2
    out_ch = w.shape[-1]
    dy2 = dy.reshape(-1, out_ch)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    n, h, wd, c = x_shape
    _, ho, wo, _ = dy.shape
    dcols = (dy2 @ w.reshape(-1, out_ch).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
    return dxp[:, p:p + h, p:p + wd], dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, :2 * ho, :2 * wo].reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, h, w, c = x_shape
    ho, wo = h // 2, w // 2
    g = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    if (2 * ho, 2 * wo) != (h, w):
        g = np.pad(g, ((0, 0), (0, h - 2 * ho), (0, w - 2 * wo), (0, 0)))
    return g


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(params: Params, config: NetworkConfig, images: np.ndarray, train_mode: bool = False,
            rng: Optional[np.random.Generator] = None, dropout_mask: Optional[np.ndarray] = None):
    """Return ``(probabilities (N, 3), cache)``.

    In train mode inverted dropout is applied to the pooled features, with the
    mask taken from ``dropout_mask`` if given, otherwise drawn from ``rng``.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    s = config.input_size
    if images.shape[1:] != (s, s, 3):
        raise ValueError(f"expected images of shape ({s}, {s}, 3), got {images.shape[1:]}")
    dtype = params["head/w"].dtype
    x = images.astype(dtype) * 2 - 1
    cache = {"layers": []}
    for i, (_, _, stride) in enumerate(config.blocks):
        y, cols = _conv_forward(x, params[f"conv{i}/w"], params[f"conv{i}/b"], stride)
        # pooling before the rectifier gives the same output and is 4x cheaper
        pooled, idx = _pool_forward(y)
        a = np.maximum(pooled, 0)
        cache["layers"].append((x.shape, cols, y.shape, idx, pooled))
        x = a
    cache["feature_map_shape"] = x.shape
    f = x.mean(axis=(1, 2)) if config.global_average_pool else x.reshape(len(x), -1)
    mask = None
    if train_mode and config.dropout_keep_prob < 1.0:
        if dropout_mask is None:
            if rng is None:
                raise ValueError("train_mode with dropout needs an rng or an explicit mask")
            keep = config.dropout_keep_prob
            dropout_mask = (rng.random(f.shape) < keep).astype(dtype) / dtype.type(keep)
        mask = dropout_mask
        f = f * mask
    z = f @ params["head/w"] + params["head/b"]
    cache.update(features=f, mask=mask, logits=z)
    return sigmoid(z), cache


def backward(params: Params, config: NetworkConfig, cache: dict, dlogits: np.ndarray) -> Params:
    grads = {}
    f = cache["features"]
    grads["head/w"] = f.T @ dlogits
    grads["head/b"] = dlogits.sum(axis=0)
    df = dlogits @ params["head/w"].T
    if cache["mask"] is not None:
        df = df * cache["mask"]
    n, h, w, c = cache["feature_map_shape"]
    if config.global_average_pool:
        dx = np.broadcast_to(df[:, None, None, :] / (h * w), (n, h, w, c))
    else:
        dx = df.reshape(n, h, w, c)
    for i in reversed(range(len(config.blocks))):
        x_shape, cols, y_shape, idx, pooled = cache["layers"][i]
        dpooled = dx * (pooled > 0)
        dy = _pool_backward(dpooled, idx, y_shape)
        dx, grads[f"conv{i}/w"], grads[f"conv{i}/b"] = _conv_backward(
            dy, cols, params[f"conv{i}/w"], x_shape, config.blocks[i][2], need_dx=i > 0
        )
    return {k: grads[k] for k in params}


# -- loss ---------------------------------------------------------------------

def weight_penalty(params: Params, weight_decay: float) -> float:
    return 0.5 * weight_decay * sum(float(np.sum(v.astype(np.float64) ** 2)) for k, v in params.items() if k.endswith("/w"))


def _label_mask(labels):
    labels = np.asarray(labels, dtype=np.float64)
    present = ~np.isnan(labels)
    if not present.any():
        raise ValueError("no labels present in the batch")
    return np.where(present, labels, 0.0), present


def multitask_loss(preds, labels, params: Optional[Params] = None, weight_decay: float = 0.0) -> float:
    """Mean over examples of summed binary cross-entropy over labelled heads, plus the L2 weight term.

    ``labels`` uses NaN for an absent label; that head contributes nothing for that example.
    """
    p = np.asarray(preds, dtype=np.float64)
    y, present = _label_mask(labels)
    eps = 1e-12
    bce = -(y * np.log(np.maximum(p, eps)) + (1 - y) * np.log(np.maximum(1 - p, eps)))
    loss = float(np.sum(bce * present) / len(p))
    if params is not None and weight_decay:
        loss += weight_penalty(params, weight_decay)
    return loss


def loss_and_gradients(params: Params, config: NetworkConfig, images, labels, weight_decay: float = 0.0,
                       train_mode: bool = False, rng=None, dropout_mask=None):
    """Loss and its exact gradient for one batch (dropout mask held fixed)."""
    _, cache = forward(params, config, images, train_mode, rng, dropout_mask)
    z = cache["logits"]
    y, present = _label_mask(labels)
    n = len(z)
    # BCE from logits: softplus(z) - y z
    zd = z.astype(np.float64)
    bce = np.logaddexp(0.0, zd) - y * zd
    loss = float(np.sum(bce * present) / n) + weight_penalty(params, weight_decay)
    dlogits = ((sigmoid(zd) - y) * present / n).astype(z.dtype)
    grads = backward(params, config, cache, dlogits)
    if weight_decay:
        for k in grads:
            if k.endswith("/w"):
                grads[k] = grads[k] + weight_decay * params[k]
    return loss, grads


def gradients(params: Params, config: NetworkConfig, images, labels, weight_decay: float = 0.0, **kw) -> Params:
    return loss_and_gradients(params, config, images, labels, weight_decay, **kw)[1]


# -- optimisation -------------------------------------------------------------

def adam_init(params: Params) -> dict:
    return {"m": zeros_like_params(params), "v": zeros_like_params(params)}


def adam_step(params: Params, grads: Params, state: dict, config: TrainConfig, step: int):
    """One bias-corrected Adam update; ``step`` counts from 1. Returns ``(params, state)``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for k, theta in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {k!r}")
        m = b1 * state["m"][k] + (1 - b1) * g
        v = b2 * state["v"][k] + (1 - b2) * g * g
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)
        new_params[k] = (theta - update).astype(theta.dtype)
        new_m[k] = m.astype(theta.dtype)
        new_v[k] = v.astype(theta.dtype)
    return new_params, {"m": new_m, "v": new_v}


def ema_update(ema: Params, params: Params, decay: float = 0.9999) -> Params:
    out = {}
    for k, e in ema.items():
        p = params[k]
        if e.shape != p.shape:
            raise ValueError(f"shape mismatch for {k!r}: {e.shape} vs {p.shape}")
        out[k] = (decay * e + (1 - decay) * p).astype(e.dtype)
    return out


@dataclass
class TrainResult:
    params: Params
    ema_params: Params
    loss_history: list = field(default_factory=list)
    tune_history: list = field(default_factory=list)
    optimizer_state: Optional[dict] = None
    step: int = 0


def _batches(n: int, batch_size: int, seed: int):
    """Endless stream of index batches from per-epoch seeded shuffles."""
    epoch = 0
    buf = np.empty(0, dtype=int)
    while True:
        while len(buf) < min(batch_size, n):
            buf = np.concatenate([buf, np.random.default_rng([seed, 1, epoch]).permutation(n)])
            epoch += 1
        take = min(batch_size, n)
        yield buf[:take]
        buf = buf[take:]


def evaluate_loss(params: Params, config: NetworkConfig, images, labels, batch_size: int = 128) -> float:
    probs = predict_batch(params, config, images, batch_size)
    return multitask_loss(probs, labels)


def train(train_images: np.ndarray, train_labels: np.ndarray, net_config: NetworkConfig, train_config: TrainConfig,
          augment_config: Optional[AugmentConfig] = AugmentConfig(), tune_images=None, tune_labels=None,
          params: Optional[Params] = None, callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Run ``total_steps`` steps of augment -> forward -> loss -> backprop -> Adam -> EMA.

    ``train_labels`` is ``(N, 3)`` with NaN for absent labels. Augmentation of
    each image uses its own stream derived from ``(seed, step, slot)``.
    ``augment_config=None`` disables augmentation.
    """
    n = len(train_images)
    if n == 0:
        raise ValueError("empty training set")
    cfg = train_config
    if params is None:
        params = init_params(net_config, cfg.seed)
    ema = {k: v.copy() for k, v in params.items()}
    state = adam_init(params)
    result = TrainResult(params, ema, optimizer_state=state)
    batches = _batches(n, cfg.batch_size, cfg.seed)
    has_tune = tune_images is not None and len(tune_images) > 0

    for step in range(1, cfg.total_steps + 1):
        idx = next(batches)
        if augment_config is None:
            batch = train_images[idx]
        else:
            batch = np.stack([
                augment(train_images[i], augment_config, np.random.default_rng([cfg.seed, 2, step, slot]))
                for slot, i in enumerate(idx)
            ])
        loss, grads = loss_and_gradients(params, net_config, batch, train_labels[idx], cfg.weight_decay,
                                         train_mode=True, rng=np.random.default_rng([cfg.seed, 3, step]))
        if not np.isfinite(loss):
            raise FloatingPointError(f"training diverged: non-finite loss at step {step}")
        params, state = adam_step(params, grads, state, cfg, step)
        ema = ema_update(ema, params, cfg.ema_decay)
        result.loss_history.append(loss)
        if has_tune and (step % cfg.tune_every == 0 or step == cfg.total_steps):
            result.tune_history.append((step, evaluate_loss(ema, net_config, tune_images, tune_labels)))
        if callback is not None:
            callback(step, loss)

    result.params, result.ema_params, result.optimizer_state, result.step = params, ema, state, cfg.total_steps
    return result


# -- inference ----------------------------------------------------------------

def predict_batch(params: Params, config: NetworkConfig, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Eval-mode probabilities, shape ``(N, 3)``, computed in chunks."""
    out = [forward(params, config, images[i:i + batch_size])[0] for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, config.heads))
    return np.concatenate(out).astype(np.float64)


def predict(params: Params, config: NetworkConfig, image: np.ndarray) -> PredictionTriple:
    probs, _ = forward(params, config, image)
    return PredictionTriple(*(float(v) for v in probs[0]))


# -- checkpoints --------------------------------------------------------------

def _encode(arrays: Params) -> dict:
    return {
        k: {"shape": list(v.shape), "data": base64.b64encode(np.ascontiguousarray(v, dtype="<f4").tobytes()).decode()}
        for k, v in arrays.items()
    }


def _decode(blob: dict, expected: Params) -> Params:
    out = {}
    for k, ref in expected.items():
        if k not in blob:
            raise ValueError(f"checkpoint lacks array {k!r}")
        shape = tuple(blob[k]["shape"])
        if shape != ref.shape:
            raise ValueError(f"checkpoint array {k!r} has shape {shape}, config expects {ref.shape}")
        out[k] = np.frombuffer(base64.b64decode(blob[k]["data"]), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def save_checkpoint(path, net_config: NetworkConfig, result: TrainResult, train_config: Optional[TrainConfig] = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "network": net_config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
        "step": result.step,
        "params": _encode(result.params),
        "ema": _encode(result.ema_params),
        "adam_m": _encode(result.optimizer_state["m"]) if result.optimizer_state else None,
        "adam_v": _encode(result.optimizer_state["v"]) if result.optimizer_state else None,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path):
    """Return ``(net_config, TrainResult, train_config or None)``; array shapes are validated."""
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    net = NetworkConfig.from_dict(doc["network"])
    ref = init_params(net)
    state = None
    if doc.get("adam_m") is not None:
        state = {"m": _decode(doc["adam_m"], ref), "v": _decode(doc["adam_v"], ref)}
    result = TrainResult(_decode(doc["params"], ref), _decode(doc["ema"], ref), optimizer_state=state, step=doc["step"])
    train_cfg = TrainConfig.from_dict(doc["train"]) if doc.get("train") else None
    return net, result, train_cfg
