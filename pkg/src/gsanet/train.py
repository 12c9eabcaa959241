"""Training loop (pixel cross-entropy, momentum SGD, poly decay) and mIoU evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .dataset import IGNORE_LABEL, SegSample, stack
from .rng import stream
from .segnet import ModelConfig, gsanet_forward, init_params
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    power: float = 0.9
    max_iter: int = 2000
    batch_size: int = 4
    crop: tuple[int, int] = (64, 64)
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10

    def __post_init__(self):
        self.crop = tuple(int(c) for c in self.crop)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        self.validate()

    def validate(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ContractError(f"scale_range needs 0 < lo <= hi, got {list(self.scale_range)}")
        if not 0 <= self.flip_prob <= 1:
            raise ContractError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.base_lr <= 0:
            raise ContractError(f"base_lr must be positive, got {self.base_lr}")
        if self.max_iter < 1 or self.batch_size < 1:
            raise ContractError("max_iter and batch_size must be positive")
        if len(self.crop) != 2 or min(self.crop) < 1:
            raise ContractError(f"crop must be two positive extents, got {self.crop}")
        if self.power <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ContractError("power must be positive, momentum in [0, 1), weight_decay >= 0")


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """``base_lr * (1 - iter / max_iter) ** power``."""
    if not 0 <= iteration <= cfg.max_iter:
        raise ContractError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.power


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             state: dict[str, np.ndarray], momentum: float = 0.9, weight_decay: float = 0.0) -> dict[str, np.ndarray]:
    """Classical momentum: ``v <- m v + g``, ``p <- p - lr v``. ``state`` holds ``v`` and is updated in place."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        v = state.get(name)
        v = g.copy() if v is None else momentum * v + g
        state[name] = v
        out[name] = (p - lr * v).astype(p.dtype)
    return out


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean over scored pixels of ``-log softmax(logits)[label]``."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    scored = labels != ignore_label
    bad = scored & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ContractError(f"label {int(labels[bad][0])} outside [0, {k}) and not ignore_label={ignore_label}")
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(s)
    safe = np.where(scored, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    n = int(scored.sum())
    dt = z.dtype.type
    loss = -(picked * scored).sum() / max(n, 1)

    def vjp(g):
        grad = e / s
        grad[..., :] -= np.eye(k, dtype=z.dtype)[safe]
        grad *= scored[..., None] * (g / dt(max(n, 1)))
        return (grad,)

    return T._record("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), vjp)


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------

def _resize_image(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ah = T.interp_matrix(img.shape[0], h, np.float32)
    aw = T.interp_matrix(img.shape[1], w, np.float32)
    rows = np.tensordot(ah, img, axes=(1, 0))
    return np.ascontiguousarray(np.tensordot(aw, rows, axes=(1, 1)).transpose(1, 0, 2), dtype=np.float32)


def _resize_nearest(lab: np.ndarray, h: int, w: int) -> np.ndarray:
    iy = np.minimum(((np.arange(h) + 0.5) * lab.shape[0] / h).astype(np.int64), lab.shape[0] - 1)
    ix = np.minimum(((np.arange(w) + 0.5) * lab.shape[1] / w).astype(np.int64), lab.shape[1] - 1)
    return lab[iy][:, ix]


def augment(sample: SegSample, cfg: TrainConfig, rng: np.random.Generator,
            ignore_label: int = IGNORE_LABEL) -> SegSample:
    """Random scale, horizontal flip and crop (padding with zeros / ignore_label)."""
    img, lab = sample.image, sample.label
    lo, hi = cfg.scale_range
    s = rng.uniform(lo, hi)
    flip = rng.random() < cfg.flip_prob
    uy, ux = rng.random(2)
    h, w = img.shape[:2]
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (nh, nw) != (h, w):
        img, lab = _resize_image(img, nh, nw), _resize_nearest(lab, nh, nw)
    if flip:
        img, lab = img[:, ::-1], lab[:, ::-1]
    ch, cw = cfg.crop
    ph, pw = max(ch - nh, 0), max(cw - nw, 0)
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)))
        lab = np.pad(lab, ((0, ph), (0, pw)), constant_values=ignore_label)
    oy = int(uy * (img.shape[0] - ch + 1))
    ox = int(ux * (img.shape[1] - cw + 1))
    return SegSample(np.ascontiguousarray(img[oy:oy + ch, ox:ox + cw], dtype=np.float32),
                     np.ascontiguousarray(lab[oy:oy + ch, ox:ox + cw]))


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""
    num_classes: int
    ignore_label: int = IGNORE_LABEL
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.ignore_label, self.counts.copy())


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, cm: ConfusionMatrix) -> ConfusionMatrix:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    k = cm.num_classes
    keep = gt != cm.ignore_label
    g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k):
        raise ContractError(f"class ids must lie in [0, {k})")
    cm.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean IoU over classes present in prediction or ground truth; absent classes are NaN."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ContractError("no class occurs in either prediction or ground truth")
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return float(iou[present].mean()), iou


def predict(params: Mapping[str, np.ndarray], cfg: ModelConfig, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits = gsanet_forward(Tensor(images[i:i + batch_size]), cfg, params)
        out.append(logits.data.argmax(axis=-1).astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3], dtype=np.uint8)


def evaluate(params, cfg: ModelConfig, samples: Sequence[SegSample], batch_size: int = 8) -> ConfusionMatrix:
    """Single-scale inference over ``samples``."""
    cm = ConfusionMatrix(cfg.num_classes)
    if not samples:
        return cm
    images, labels = stack(samples)
    return accumulate_confusion(predict(params, cfg, images, batch_size), labels, cm)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_miou: float | None
    losses: list[float] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)


def batch_order(seed: int, n: int, iteration: int, batch_size: int) -> np.ndarray:
    """Sample indices for one iteration: epoch-wise permutations of ``range(n)``."""
    start = iteration * batch_size
    idx = []
    while len(idx) < batch_size:
        epoch, pos = divmod(start + len(idx), n)
        perm = stream(seed, "order", epoch).permutation(n)
        idx.extend(perm[pos:pos + batch_size - len(idx)])
    return np.asarray(idx)


def train_step(params, cfg: ModelConfig, images: np.ndarray, labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    tape = T.GradTape()
    watched = {k: tape.watch(v) for k, v in params.items()}
    loss = pixel_cross_entropy(gsanet_forward(Tensor(images), cfg, watched), labels)
    tape.backward(loss)
    return float(loss.data), {k: tape.gradient(t) for k, t in watched.items()}


def train(cfg: ModelConfig, tcfg: TrainConfig, train_set: Sequence[SegSample],
          eval_set: Sequence[SegSample] | None = None, params: dict[str, np.ndarray] | None = None,
          on_log: Callable[[str], None] | None = None) -> TrainResult:
    """Run ``tcfg.max_iter`` SGD iterations; deterministic for a fixed seed."""
    if not train_set:
        raise ContractError("training set is empty")
    params = init_params(cfg, tcfg.seed) if params is None else dict(params)
    eval_set = train_set if eval_set is None else eval_set
    state: dict[str, np.ndarray] = {}
    result = TrainResult(params, params, None)

    def emit(line):
        result.log_lines.append(line)
        log.info(line)
        if on_log:
            on_log(line)

    for it in range(tcfg.max_iter):
        idx = batch_order(tcfg.seed, len(train_set), it, tcfg.batch_size)
        batch = [augment(train_set[i], tcfg, stream(tcfg.seed, "augment", it, slot)) for slot, i in enumerate(idx)]
        images, labels = stack(batch)
        loss, grads = train_step(params, cfg, images, labels)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it + 1}")
        lr = poly_lr(it, tcfg)
        params = sgd_step(params, grads, lr, state, tcfg.momentum, tcfg.weight_decay)
        result.losses.append(loss)
        done = it + 1
        do_eval = (tcfg.eval_every and done % tcfg.eval_every == 0) or done == tcfg.max_iter
        if do_eval or (tcfg.log_every and done % tcfg.log_every == 0) or done == 1:
            line = f"iter={done} lr={lr:.6g} loss={loss:.6f}"
            if do_eval:
                score, _ = miou(evaluate(params, cfg, eval_set))
                line += f" miou={score:.6f}"
                if result.best_miou is None or score > result.best_miou:
                    result.best_miou, result.best_params = score, params
            emit(line)
    result.params = params
    return result
