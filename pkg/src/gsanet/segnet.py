"""GSANet assembly: toy backbone, ASPP head variants, decoders and cost counting.

Layout of the flat parameter dict (``block`` is the first two name parts,
except for the backbone which is all of ``fxn``)::

    fxn.conv{i}                    3x3 stride-2 conv opening stage i
    fxn.conv{i}_{j}                3x3 stride-1 convs, j = 1 .. fxn_depth - 1
    head.branches.aspp0            1x1 branch
    head.branches.atrous{k}        3x3 dilated branches
    head.global.conv (+ .gaf.*)    global branch: GAP or GAF, then 1x1 conv
    head.fusion.*                  selective attention over the branches
    head.project                   1x1 projection back to head_channels
    decoder.reduce / .sa / .fuse / .classifier
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import attention as A
from . import tensor as T
from .rng import stream
from .tensor import ContractError, ConvSpec, Tensor

HEADS = (
    "aspp",
    "sa_aspp",
    "sa_aspp_condense_only",
    "sa_aspp_diffuse_only",
    "gaf_aspp_softmax",
    "gaf_aspp_sparsemax",
    "gsa_aspp",
)
DECODERS = ("plain", "sa_dec")

_FUSION = {
    "aspp": None,
    "sa_aspp": "full",
    "sa_aspp_condense_only": "condense_only",
    "sa_aspp_diffuse_only": "diffuse_only",
    "gaf_aspp_softmax": None,
    "gaf_aspp_sparsemax": None,
    "gsa_aspp": "full",
}
_GLOBAL = {
    "aspp": "gap",
    "sa_aspp": "gap",
    "sa_aspp_condense_only": "gap",
    "sa_aspp_diffuse_only": "gap",
    "gaf_aspp_softmax": "softmax",
    "gaf_aspp_sparsemax": "sparsemax",
    "gsa_aspp": "sparsemax",
}
LOW_LEVEL_STRIDE = 4


@dataclass
class ModelConfig:
    head: str = "gsa_aspp"
    decoder: str = "sa_dec"
    dilations: tuple[int, ...] = (6, 12, 18)
    head_channels: int = 64
    num_classes: int = 4
    output_stride: int = 16
    gamma_policy: str = "auto"
    seed: int = 0
    fxn_channels: tuple[int, ...] = (16, 32, 48, 64)
    fxn_depth: int = 2
    low_level_channels: int = 48
    decoder_channels: int = 64

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        self.fxn_channels = tuple(int(c) for c in self.fxn_channels)
        self.gamma_policy = str(self.gamma_policy)
        self.validate()

    def validate(self):
        if self.head not in HEADS:
            raise ContractError(f"unknown head {self.head!r}; choose from {', '.join(HEADS)}")
        if self.decoder not in DECODERS:
            raise ContractError(f"unknown decoder {self.decoder!r}; choose from {', '.join(DECODERS)}")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ContractError("dilations must be a nonempty list of positive integers")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ContractError(f"dilations must be strictly increasing, got {list(self.dilations)}")
        os_ = self.output_stride
        if os_ < LOW_LEVEL_STRIDE or os_ & (os_ - 1):
            raise ContractError(f"output_stride must be a power of two >= {LOW_LEVEL_STRIDE}, got {os_}")
        if len(self.fxn_channels) != int(math.log2(os_)):
            raise ContractError(f"output_stride {os_} needs {int(math.log2(os_))} backbone widths, "
                                f"got {len(self.fxn_channels)}")
        for name in ("fxn_depth", "head_channels", "num_classes", "low_level_channels", "decoder_channels"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.num_classes < 2:
            raise ContractError("num_classes must be at least 2")
        if self.gamma_policy != "auto":
            try:
                if int(self.gamma_policy) < 1:
                    raise ValueError
            except ValueError:
                raise ContractError(f"gamma_policy must be 'auto' or a positive integer, got {self.gamma_policy!r}") from None

    @property
    def fusion(self) -> str | None:
        return _FUSION[self.head]

    @property
    def global_kind(self) -> str:
        return _GLOBAL[self.head]

    @property
    def n_branches(self) -> int:
        return len(self.dilations) + 2

    @property
    def deep_channels(self) -> int:
        return self.fxn_channels[-1]

    @property
    def low_tap(self) -> int:
        # index of the backbone block whose output is at stride 4
        return int(math.log2(LOW_LEVEL_STRIDE)) - 1

    def check_extent(self, h: int, w: int):
        if h % self.output_stride or w % self.output_stride:
            raise ContractError(f"input {h}x{w} is not divisible by output_stride {self.output_stride}")


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, k, cin, cout):
        shapes[f"{name}.w"] = (k, k, cin, cout)
        shapes[f"{name}.b"] = (cout,)

    cin = 3
    for i, c in enumerate(cfg.fxn_channels):
        conv(f"fxn.conv{i}", 3, cin, c)
        for j in range(1, cfg.fxn_depth):
            conv(f"fxn.conv{i}_{j}", 3, c, c)
        cin = c
    cd, ch = cfg.deep_channels, cfg.head_channels
    conv("head.branches.aspp0", 1, cd, ch)
    for k, _ in enumerate(cfg.dilations):
        conv(f"head.branches.atrous{k}", 3, cd, ch)
    if cfg.global_kind != "gap":
        shapes.update({f"head.global.gaf.{k}": s for k, s in A.gaf_param_shapes(cd).items()})
    conv("head.global.conv", 1, cd, ch)
    if cfg.fusion is not None:
        sa = A.sa_param_shapes([ch] * cfg.n_branches, cfg.fusion, cfg.gamma_policy)
        shapes.update({f"head.fusion.{k}": s for k, s in sa.items()})
    conv("head.project", 1, cfg.n_branches * ch, ch)
    low = cfg.fxn_channels[cfg.low_tap]
    conv("decoder.reduce", 1, low, cfg.low_level_channels)
    if cfg.decoder == "sa_dec":
        sa = A.sa_param_shapes([cfg.low_level_channels, ch], "full", cfg.gamma_policy)
        shapes.update({f"decoder.sa.{k}": s for k, s in sa.items()})
    conv("decoder.fuse.conv1", 3, cfg.low_level_channels + ch, cfg.decoder_channels)
    conv("decoder.fuse.conv2", 3, cfg.decoder_channels, cfg.decoder_channels)
    conv("decoder.classifier", 1, cfg.decoder_channels, cfg.num_classes)
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = stream(cfg.seed if seed is None else seed, "init")
    return A.he_init(rng, param_shapes(cfg))


def block_of(name: str) -> str:
    parts = name.split(".")
    return "fxn" if parts[0] == "fxn" else ".".join(parts[:2])


# ----------------------------------------------------------------------------
# forward pieces
# ----------------------------------------------------------------------------

def _conv(x, params, name, dilation=1, stride=1):
    return T.conv2d(x, A._take(params, f"{name}.w"), A._take(params, f"{name}.b"), dilation=dilation, stride=stride)


def toy_fxn(image: Tensor, cfg: ModelConfig, params: Mapping) -> tuple[Tensor, Tensor]:
    """Stages of one stride-2 conv and ``fxn_depth - 1`` stride-1 convs.

    Returns (deep features at output_stride, stride-4 features).
    """
    image = T.as_tensor(image)
    if image.data.ndim != 4 or image.shape[-1] != 3:
        raise ContractError(f"expected a (B, H, W, 3) image batch, got {image.shape}")
    cfg.check_extent(*image.shape[1:3])
    # [0, 1] pixels -> [-1, 1]; there are no normalization layers downstream
    x, low = T.add(T.scale(image, 2.0), -1.0), None
    for i in range(len(cfg.fxn_channels)):
        x = T.relu(_conv(x, params, f"fxn.conv{i}", stride=2))
        for j in range(1, cfg.fxn_depth):
            x = T.relu(_conv(x, params, f"fxn.conv{i}_{j}"))
        if i == cfg.low_tap:
            low = x
    return x, low


def global_branch(deep: Tensor, cfg: ModelConfig, params: Mapping) -> Tensor:
    h, w = deep.shape[1:3]
    if cfg.global_kind == "gap":
        pooled = T.relu(_conv(T.global_avg_pool(deep), params, "head.global.conv"))
        return T.resize_bilinear(pooled, (h, w))
    g = A.gaf(deep, cfg.global_kind, A.GAFParams.take(params, "head.global.gaf"))
    return T.relu(_conv(g, params, "head.global.conv"))


def aspp_branches(deep: Tensor, cfg: ModelConfig, params: Mapping) -> list[Tensor]:
    branches = [T.relu(_conv(deep, params, "head.branches.aspp0"))]
    for k, d in enumerate(cfg.dilations):
        branches.append(T.relu(_conv(deep, params, f"head.branches.atrous{k}", dilation=d)))
    branches.append(global_branch(deep, cfg, params))
    return branches


def fusion_params(cfg: ModelConfig, params: Mapping, prefix: str = "head.fusion", variant: str | None = None,
                  n: int | None = None):
    variant = variant or cfg.fusion
    return A.SA_PARAM_TYPES[variant].take(params, prefix, cfg.n_branches if n is None else n)


def head_forward(deep: Tensor, cfg: ModelConfig, params: Mapping) -> Tensor:
    branches = aspp_branches(deep, cfg, params)
    if cfg.fusion is None:
        fused = T.concat_channels(branches)
    else:
        fused = A.apply_attentions(branches, A.attention_vectors(branches, fusion_params(cfg, params)))
    return T.relu(_conv(fused, params, "head.project"))


def _decode(fused: Tensor, params: Mapping, out_size) -> Tensor:
    x = T.relu(_conv(fused, params, "decoder.fuse.conv1"))
    x = T.relu(_conv(x, params, "decoder.fuse.conv2"))
    logits = _conv(x, params, "decoder.classifier")
    return T.resize_bilinear(logits, out_size)


def _decoder_inputs(head_out, low_level, params):
    low = T.relu(_conv(low_level, params, "decoder.reduce"))
    up = T.resize_bilinear(head_out, low.shape[1:3])
    return low, up


def plain_decoder(head_out: Tensor, low_level: Tensor, params: Mapping, out_size) -> Tensor:
    low, up = _decoder_inputs(head_out, low_level, params)
    return _decode(T.concat_channels([low, up]), params, out_size)


def sa_decoder(head_out: Tensor, low_level: Tensor, params: Mapping, out_size) -> Tensor:
    """Decoder that reweights (reduced low-level, upsampled head) by selective attention."""
    low, up = _decoder_inputs(head_out, low_level, params)
    fused = A.selective_attention([low, up], A.SAParams.take(params, "decoder.sa", 2))
    return _decode(fused, params, out_size)


def gsanet_forward(image: Tensor, cfg: ModelConfig, params: Mapping) -> Tensor:
    """Full network: (B, H, W, 3) image -> (B, H, W, num_classes) logits."""
    image = T.as_tensor(image)
    deep, low = toy_fxn(image, cfg, params)
    head = head_forward(deep, cfg, params)
    dec = sa_decoder if cfg.decoder == "sa_dec" else plain_decoder
    return dec(head, low, params, image.shape[1:3])


# ----------------------------------------------------------------------------
# cost accounting
# ----------------------------------------------------------------------------

@dataclass
class BlockCost:
    params: int = 0
    flops: int = 0


@dataclass
class CostReport:
    """Parameter count and multiply-accumulates for one image at ``resolution``."""
    resolution: tuple[int, int]
    params: int
    flops: int
    per_block: dict[str, BlockCost] = field(default_factory=dict)

    def as_table(self) -> str:
        h, w = self.resolution
        lines = [f"{'block':<22}{'params':>12}{'MACs':>16}"]
        for name, c in self.per_block.items():
            lines.append(f"{name:<22}{c.params:>12,}{c.flops:>16,}")
        lines.append(f"{'total':<22}{self.params:>12,}{self.flops:>16,}")
        lines.append(f"params {self.params / 1e6:.4f} M, FLOPs {self.flops / 1e9:.4f} B (MACs at {h}x{w})")
        return "\n".join(lines)

    def as_kv(self) -> str:
        h, w = self.resolution
        lines = [f"resolution={h}x{w}", f"params={self.params}", f"flops={self.flops}"]
        for name, c in self.per_block.items():
            lines.append(f"block.{name}.params={c.params}")
            lines.append(f"block.{name}.flops={c.flops}")
        return "\n".join(lines)


def _sa_macs(channels, variant, gamma_policy) -> int:
    total = sum(channels)
    if variant == "diffuse_only":
        return sum(2 * c * A.se_width(c) for c in channels)
    g = A.gamma_for(channels, gamma_policy)
    condense = total * g + g * g
    return condense + g * total


def count_cost(cfg: ModelConfig, height: int = 512, width: int = 1024) -> CostReport:
    """Exact parameter count and MACs of convs, FCs and matmuls for one image."""
    cfg.check_extent(height, width)
    shapes = param_shapes(cfg)
    blocks: dict[str, BlockCost] = {}
    for name, shape in shapes.items():
        blocks.setdefault(block_of(name), BlockCost()).params += int(np.prod(shape, dtype=np.int64))

    def add(block, macs):
        blocks.setdefault(block, BlockCost()).flops += int(macs)

    def conv_macs(name, h, w, stride=1, dilation=1):
        kh, kw, cin, cout = shapes[f"{name}.w"]
        return ConvSpec((kh, kw), cin, cout, dilation, stride).macs(h, w)

    h, w = height, width
    for i in range(len(cfg.fxn_channels)):
        add("fxn", conv_macs(f"fxn.conv{i}", h, w, stride=2))
        h, w = (h + 1) // 2, (w + 1) // 2
        for j in range(1, cfg.fxn_depth):
            add("fxn", conv_macs(f"fxn.conv{i}_{j}", h, w))
        if i == cfg.low_tap:
            lh, lw = h, w
    n = h * w
    cd, ch = cfg.deep_channels, cfg.head_channels
    add("head.branches", conv_macs("head.branches.aspp0", h, w))
    for k, d in enumerate(cfg.dilations):
        add("head.branches", conv_macs(f"head.branches.atrous{k}", h, w, dilation=d))
    if cfg.global_kind == "gap":
        add("head.global", conv_macs("head.global.conv", 1, 1))
    else:
        ce = A.embed_width(cd)
        add("head.global", n * cd * ce + n * cd * cd + A.gaf_attention_macs(n, ce, cd))
        add("head.global", conv_macs("head.global.conv", h, w))
    if cfg.fusion is not None:
        add("head.fusion", _sa_macs([ch] * cfg.n_branches, cfg.fusion, cfg.gamma_policy))
    add("head.project", conv_macs("head.project", h, w))
    add("decoder.reduce", conv_macs("decoder.reduce", lh, lw))
    if cfg.decoder == "sa_dec":
        add("decoder.sa", _sa_macs([cfg.low_level_channels, ch], "full", cfg.gamma_policy))
    add("decoder.fuse", conv_macs("decoder.fuse.conv1", lh, lw) + conv_macs("decoder.fuse.conv2", lh, lw))
    add("decoder.classifier", conv_macs("decoder.classifier", lh, lw))
    total_params = sum(b.params for b in blocks.values())
    total_flops = sum(b.flops for b in blocks.values())
    return CostReport((height, width), total_params, total_flops, blocks)
