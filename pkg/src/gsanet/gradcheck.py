"""Central finite-difference checks of the taped gradients.

Each check contracts the op output with a fixed random cotangent, compares
the tape gradient against ``(L(x + eps) - L(x - eps)) / (2 eps)`` at random
input coordinates, and skips probes whose stencil crosses a kink (a relu
mask or sparsemax support differing between ``x - eps`` and ``x + eps``).
Everything runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import attention as A
from . import segnet as S
from . import sparsemax as SM
from . import tensor as T
from .rng import stream
from .train import pixel_cross_entropy

EPS = 1e-3
TOL = 1e-3
# denominators below this are treated as absolute error
FLOOR = 1e-6


@dataclass
class GradReport:
    name: str
    worst: float
    probes: int
    skipped: int

    @property
    def ok(self) -> bool:
        return self.probes > 0 and self.worst < TOL


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


def _patterns_equal(p: list, q: list) -> bool:
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


def check(name: str, fn: Callable[[Mapping[str, T.Tensor]], T.Tensor], inputs: Mapping[str, np.ndarray],
          probes: int = 64, eps: float = EPS, seed: int = 0, max_attempts: int | None = None) -> GradReport:
    rng = stream(seed, "gradcheck", len(name))
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    out = fn({k: T.Tensor(v) for k, v in inputs.items()})
    cot = rng.uniform(-1, 1, out.shape)

    def loss(vals) -> tuple[float, list]:
        with T.record_kinks() as kinks:
            o = fn({k: T.Tensor(v) for k, v in vals.items()})
        return float(np.sum(o.data * cot)), kinks

    tape = T.GradTape()
    watched = {k: tape.watch(v) for k, v in inputs.items()}
    root = T.sum_all(T.mul(fn(watched), T.Tensor(cot)))
    tape.backward(root)
    grads = {k: tape.gradient(t) for k, t in watched.items()}

    coords = [(k, i) for k, v in inputs.items() for i in range(v.size)]
    order = rng.permutation(len(coords))
    max_attempts = max_attempts or 8 * probes
    worst, used, skipped = 0.0, 0, 0
    for j in order[:max_attempts]:
        if used >= probes:
            break
        key, flat = coords[j]
        plus = dict(inputs)
        minus = dict(inputs)
        plus[key] = inputs[key].copy()
        minus[key] = inputs[key].copy()
        plus[key].flat[flat] += eps
        minus[key].flat[flat] -= eps
        lp, kp = loss(plus)
        lm, km = loss(minus)
        if not _patterns_equal(kp, km):
            skipped += 1
            continue
        num = (lp - lm) / (2 * eps)
        worst = max(worst, rel_error(float(grads[key].flat[flat]), num))
        used += 1
    return GradReport(name, worst, used, skipped)


# ----------------------------------------------------------------------------
# suites
# ----------------------------------------------------------------------------

def _u(rng, *shape):
    return rng.uniform(-1, 1, shape)


def _sa_inputs(rng, variant, channels=(3, 5, 4), hw=(3, 3), batch=2):
    shapes = A.sa_param_shapes(channels, variant, gamma=4)
    vals = {f"p.{k}": _u(rng, *s) for k, s in shapes.items()}
    for i, c in enumerate(channels):
        vals[f"b{i}"] = _u(rng, batch, *hw, c)
    return vals


def _sa_fn(variant, n):
    cls = A.SA_PARAM_TYPES[variant]

    def fn(t):
        bs = [t[f"b{i}"] for i in range(n)]
        return A.apply_attentions(bs, A.attention_vectors(bs, cls.take(t, "p", n)))

    return fn


def _gaf_fn(mode):
    return lambda t: A.gaf(t["x"], mode, A.GAFParams.take(t, "p"))


def _gaf_inputs(rng, c=6, hw=(3, 4), batch=2):
    vals = {f"p.{k}": _u(rng, *s) for k, s in A.gaf_param_shapes(c).items()}
    vals["x"] = _u(rng, batch, *hw, c)
    return vals


def _e2e(head, decoder):
    cfg = S.ModelConfig(head=head, decoder=decoder, head_channels=8, fxn_channels=(4, 6, 8, 8),
                        low_level_channels=6, decoder_channels=6, num_classes=3, dilations=(1, 2))

    def fn(t):
        return S.gsanet_forward(t["image"], cfg, t)

    def inputs(rng):
        vals = {k: v.astype(np.float64) for k, v in S.init_params(cfg, seed=3).items()}
        for k in vals:
            if k.endswith(".b"):
                vals[k] = 0.1 * _u(rng, *vals[k].shape)
        vals["image"] = rng.uniform(0, 1, (1, 32, 32, 3))
        return vals

    return fn, inputs


def _ce_inputs(rng):
    return {"logits": rng.normal(0, 1, (2, 4, 5, 3))}


def _ce_labels():
    lab = stream(0, "ce-labels").integers(0, 3, (2, 4, 5))
    lab[0, 0, :2] = 255
    return lab


SUITES: dict[str, tuple[Callable, Callable]] = {
    "conv2d": (lambda t: T.conv2d(t["x"], t["w"], t["b"], dilation=2),
               lambda r: {"x": _u(r, 2, 5, 6, 3), "w": _u(r, 3, 3, 3, 4), "b": _u(r, 4)}),
    "conv2d_stride2": (lambda t: T.conv2d(t["x"], t["w"], t["b"], stride=2),
                       lambda r: {"x": _u(r, 2, 6, 6, 3), "w": _u(r, 3, 3, 3, 4), "b": _u(r, 4)}),
    "fully_connected": (lambda t: T.fully_connected(t["x"], t["w"], t["b"]),
                        lambda r: {"x": _u(r, 6, 8), "w": _u(r, 8, 5), "b": _u(r, 5)}),
    "matmul": (lambda t: T.matmul(t["a"], t["b"]), lambda r: {"a": _u(r, 2, 5, 4), "b": _u(r, 2, 4, 6)}),
    "global_avg_pool": (lambda t: T.global_avg_pool(t["x"]), lambda r: {"x": _u(r, 2, 4, 5, 8)}),
    "bilinear_upsample": (lambda t: T.resize_bilinear(t["x"], (7, 9)), lambda r: {"x": _u(r, 2, 3, 4, 5)}),
    "relu": (lambda t: T.relu(t["x"]), lambda r: {"x": _u(r, 4, 20)}),
    "sigmoid": (lambda t: T.sigmoid(t["x"]), lambda r: {"x": _u(r, 4, 20)}),
    "elementwise_mul": (lambda t: T.mul(t["a"], t["b"]), lambda r: {"a": _u(r, 2, 3, 3, 8), "b": _u(r, 2, 1, 1, 8)}),
    "concat_channels": (lambda t: T.mul(T.concat_channels([t["a"], t["b"]]), T.concat_channels([t["b"], t["a"]])),
                        lambda r: {"a": _u(r, 2, 3, 3, 4), "b": _u(r, 2, 3, 3, 4)}),
    "softmax_rows": (lambda t: SM.softmax_rows(t["m"]), lambda r: {"m": _u(r, 8, 12)}),
    "sparsemax_rows": (lambda t: SM.sparsemax_rows(t["m"]), lambda r: {"m": 2 * _u(r, 8, 12)}),
    "selective_attention": (_sa_fn("full", 3), lambda r: _sa_inputs(r, "full")),
    "sa_condense_only": (_sa_fn("condense_only", 3), lambda r: _sa_inputs(r, "condense_only")),
    "sa_diffuse_only": (_sa_fn("diffuse_only", 3), lambda r: _sa_inputs(r, "diffuse_only")),
    "gaf_softmax": (_gaf_fn("softmax"), _gaf_inputs),
    "gaf_sparsemax": (_gaf_fn("sparsemax"), _gaf_inputs),
    "cross_entropy": (lambda t: pixel_cross_entropy(t["logits"], _ce_labels()), _ce_inputs),
    "end_to_end_gsanet": _e2e("gsa_aspp", "sa_dec"),
    "end_to_end_aspp": _e2e("aspp", "plain"),
}


def run_suite(name: str, probes: int = 64, seed: int = 0) -> GradReport:
    fn, make = SUITES[name]
    return check(name, fn, make(stream(seed, "gradcheck-inputs", _index(name))), probes=probes, seed=seed)


def _index(name: str) -> int:
    return list(SUITES).index(name)


def run_all(names=None, probes: int = 64, seed: int = 0) -> list[GradReport]:
    return [run_suite(n, probes, seed) for n in (names or SUITES)]


def worst_summary(reports) -> float:
    return max((r.worst for r in reports), default=math.nan)
