"""Selective attention (condensation + diffusion) and global attention features.

Parameter tensors live in flat ``name -> array`` dicts; the ``*_shapes``
helpers describe which names a block expects under a given prefix and the
``*Params.take`` constructors pull them back out as tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from . import tensor as T
from .sparsemax import softmax_rows, sparsemax_rows
from .tensor import ContractError, Tensor

Mode = Literal["softmax", "sparsemax"]
SAVariant = Literal["full", "condense_only", "diffuse_only"]


def gamma_for(channels: Sequence[int], policy: str | int = "auto") -> int:
    """Condensate width; ``auto`` is ``max(4, sum(C) // 4)``."""
    if policy == "auto":
        return max(4, sum(channels) // 4)
    gamma = int(policy)
    if gamma < 1:
        raise ContractError(f"gamma must be positive, got {gamma}")
    return gamma


def se_width(c: int) -> int:
    return max(4, c // 4)


def sa_param_shapes(channels: Sequence[int], variant: SAVariant = "full",
                    gamma: str | int = "auto") -> dict[str, tuple[int, ...]]:
    channels = list(channels)
    total = sum(channels)
    shapes: dict[str, tuple[int, ...]] = {}
    if variant == "diffuse_only":
        for i, c in enumerate(channels):
            r = se_width(c)
            shapes.update({f"se{i}.fc1.w": (c, r), f"se{i}.fc1.b": (r,),
                           f"se{i}.fc2.w": (r, c), f"se{i}.fc2.b": (c,)})
        return shapes
    g = gamma_for(channels, gamma)
    hidden = g
    shapes.update({"fc1.w": (total, hidden), "fc1.b": (hidden,),
                   "fc2.w": (hidden, g), "fc2.b": (g,)})
    if variant == "full":
        for i, c in enumerate(channels):
            shapes[f"diffuse{i}.w"] = (g, c)
            shapes[f"diffuse{i}.b"] = (c,)
    elif variant == "condense_only":
        shapes["joint.w"] = (g, total)
        shapes["joint.b"] = (total,)
    else:
        raise ContractError(f"unknown selective-attention variant {variant!r}")
    return shapes


def sa_param_count(channels: Sequence[int], variant: SAVariant = "full", gamma: str | int = "auto") -> int:
    """Closed-form parameter count of a selective-attention block."""
    channels = list(channels)
    total = sum(channels)
    if variant == "diffuse_only":
        return sum(2 * c * se_width(c) + se_width(c) + c for c in channels)
    g = gamma_for(channels, gamma)
    h = g
    condense = total * h + h + h * g + g
    if variant == "full":
        return condense + sum(g * c + c for c in channels)
    return condense + g * total + total


def _take(params: Mapping[str, object], name: str) -> Tensor:
    try:
        return T.as_tensor(params[name])
    except KeyError:
        raise ContractError(f"missing parameter {name!r}") from None


@dataclass
class SAParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    diffusion: list[tuple[Tensor, Tensor]]

    @property
    def gamma(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def take(cls, params, prefix: str, n: int) -> "SAParams":
        p = lambda k: _take(params, f"{prefix}.{k}")  # noqa: E731
        return cls(p("fc1.w"), p("fc1.b"), p("fc2.w"), p("fc2.b"),
                   [(p(f"diffuse{i}.w"), p(f"diffuse{i}.b")) for i in range(n)])


@dataclass
class CondenseOnlyParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    joint_w: Tensor
    joint_b: Tensor

    @classmethod
    def take(cls, params, prefix: str, n: int = 0) -> "CondenseOnlyParams":
        p = lambda k: _take(params, f"{prefix}.{k}")  # noqa: E731
        return cls(p("fc1.w"), p("fc1.b"), p("fc2.w"), p("fc2.b"), p("joint.w"), p("joint.b"))


@dataclass
class DiffuseOnlyParams:
    excite: list[tuple[Tensor, Tensor, Tensor, Tensor]]

    @classmethod
    def take(cls, params, prefix: str, n: int) -> "DiffuseOnlyParams":
        p = lambda k: _take(params, f"{prefix}.{k}")  # noqa: E731
        return cls([(p(f"se{i}.fc1.w"), p(f"se{i}.fc1.b"), p(f"se{i}.fc2.w"), p(f"se{i}.fc2.b"))
                    for i in range(n)])


SA_PARAM_TYPES = {"full": SAParams, "condense_only": CondenseOnlyParams, "diffuse_only": DiffuseOnlyParams}


def check_branches(bs: Sequence[Tensor]) -> list[Tensor]:
    bs = [T.as_tensor(b) for b in bs]
    if len(bs) < 2:
        raise ContractError(f"selective attention needs at least 2 branches, got {len(bs)}")
    lead = bs[0].shape[:3]
    for b in bs:
        if b.data.ndim != 4 or b.shape[:3] != lead:
            raise ContractError(f"branch shapes disagree: {bs[0].shape} vs {b.shape}")
    return bs


def _pooled(b: Tensor) -> Tensor:
    return T.reshape(T.global_avg_pool(b), (b.shape[0], b.shape[-1]))


def _condense(bs: list[Tensor], w1, b1, w2, b2) -> Tensor:
    total = sum(b.shape[-1] for b in bs)
    if w1.shape[0] != total:
        raise ContractError(f"condensation expects {w1.shape[0]} input channels, branches provide {total}")
    pooled = T.concat_channels([_pooled(b) for b in bs])
    return T.fully_connected(T.relu(T.fully_connected(pooled, w1, b1)), w2, b2)


def sa_condense(bs: Sequence[Tensor], p: SAParams | CondenseOnlyParams) -> Tensor:
    """Concat -> GAP -> FC -> ReLU -> FC, giving a (batch, gamma) condensate."""
    return _condense(check_branches(bs), p.w1, p.b1, p.w2, p.b2)


def sa_diffuse(condensate: Tensor, p: SAParams) -> list[Tensor]:
    """One sigmoid-gated FC head per branch."""
    if condensate.shape[-1] != p.gamma:
        raise ContractError(f"condensate width {condensate.shape[-1]} != gamma {p.gamma}")
    return [T.sigmoid(T.fully_connected(condensate, w, b)) for w, b in p.diffusion]


def attention_vectors(bs: Sequence[Tensor], p) -> list[Tensor]:
    """Per-branch channel attentions, each (batch, C_i), for any SA variant."""
    bs = check_branches(bs)
    if isinstance(p, SAParams):
        if len(p.diffusion) != len(bs):
            raise ContractError(f"{len(p.diffusion)} diffusion heads for {len(bs)} branches")
        return sa_diffuse(sa_condense(bs, p), p)
    if isinstance(p, CondenseOnlyParams):
        joint = T.sigmoid(T.fully_connected(sa_condense(bs, p), p.joint_w, p.joint_b))
        out, start = [], 0
        for b in bs:
            c = b.shape[-1]
            out.append(T.slice_channels(joint, start, start + c))
            start += c
        return out
    if isinstance(p, DiffuseOnlyParams):
        if len(p.excite) != len(bs):
            raise ContractError(f"{len(p.excite)} excitation heads for {len(bs)} branches")
        return [T.sigmoid(T.fully_connected(T.relu(T.fully_connected(_pooled(b), w1, b1)), w2, b2))
                for b, (w1, b1, w2, b2) in zip(bs, p.excite)]
    raise ContractError(f"unsupported attention parameters {type(p).__name__}")


def apply_attentions(bs: Sequence[Tensor], atts: Sequence[Tensor]) -> Tensor:
    weighted = []
    for b, a in zip(bs, atts):
        if a.shape != (b.shape[0], b.shape[-1]):
            raise ContractError(f"attention {a.shape} does not fit branch {b.shape}")
        weighted.append(T.mul(b, T.reshape(a, (b.shape[0], 1, 1, b.shape[-1]))))
    return T.concat_channels(weighted)


def selective_attention(bs: Sequence[Tensor], p: SAParams) -> Tensor:
    """Scale every branch by its channel attention, then concatenate."""
    bs = check_branches(bs)
    return apply_attentions(bs, attention_vectors(bs, p))


def selective_attention_condense_only(bs: Sequence[Tensor], p: CondenseOnlyParams) -> Tensor:
    bs = check_branches(bs)
    return apply_attentions(bs, attention_vectors(bs, p))


def selective_attention_diffuse_only(bs: Sequence[Tensor], p: DiffuseOnlyParams) -> Tensor:
    bs = check_branches(bs)
    return apply_attentions(bs, attention_vectors(bs, p))


# ----------------------------------------------------------------------------
# global attention feature
# ----------------------------------------------------------------------------

def embed_width(c: int) -> int:
    return max(4, c // 2)


def gaf_param_shapes(c: int) -> dict[str, tuple[int, ...]]:
    ce = embed_width(c)
    return {"embed.w": (1, 1, c, ce), "embed.b": (ce,), "value.w": (1, 1, c, c), "value.b": (c,)}


@dataclass
class GAFParams:
    embed_w: Tensor
    embed_b: Tensor
    value_w: Tensor
    value_b: Tensor

    @classmethod
    def take(cls, params, prefix: str) -> "GAFParams":
        p = lambda k: _take(params, f"{prefix}.{k}")  # noqa: E731
        return cls(p("embed.w"), p("embed.b"), p("value.w"), p("value.b"))


@dataclass
class AttentionMap:
    raw: Tensor
    normalized: Tensor
    mode: str


def gaf(x: Tensor, mode: Mode, p: GAFParams, return_map: bool = False):
    """Pairwise-correlation self-attention with a residual shortcut.

    Pixel embeddings ``e = conv1x1(x)`` give ``raw = e e^T / sqrt(C_e)``;
    rows are normalized by softmax or sparsemax and used to mix a value
    embedding of ``x``. The result is added back onto ``x``.
    """
    x = T.as_tensor(x)
    if x.data.ndim != 4:
        raise ContractError(f"gaf expects a (B, H, W, C) map, got {x.shape}")
    b, h, w, c = x.shape
    n = h * w
    if n == 0:
        raise ContractError("gaf on an empty feature map")
    if mode not in ("softmax", "sparsemax"):
        raise ContractError(f"unknown normalization {mode!r}")
    ce = p.embed_w.shape[-1]
    e = T.reshape(T.conv2d(x, p.embed_w, p.embed_b), (b, n, ce))
    raw = T.scale(T.matmul(e, T.transpose(e, (0, 2, 1))), 1.0 / math.sqrt(ce))
    normalized = sparsemax_rows(raw) if mode == "sparsemax" else softmax_rows(raw)
    v = T.reshape(T.conv2d(x, p.value_w, p.value_b), (b, n, c))
    attended = T.reshape(T.matmul(normalized, v), (b, h, w, c))
    out = T.add(x, attended)
    if return_map:
        return out, AttentionMap(raw, normalized, mode)
    return out


def gaf_attention_macs(n: int, ce: int, c: int) -> int:
    """Multiply-accumulates of the two N x N products inside one GAF call."""
    return n * n * ce + n * n * c


def he_init(rng: np.random.Generator, shapes: Mapping[str, tuple[int, ...]], prefix: str = "") -> dict[str, np.ndarray]:
    """He-normal weights for ``*.w`` entries, zeros for biases."""
    out = {}
    for name, shape in shapes.items():
        key = f"{prefix}.{name}" if prefix else name
        if name.endswith(".b"):
            out[key] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[:-1]))
            out[key] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
    return out
