"""Symmetric encoder-decoder network with per-scale feature extraction.

The encoder halves the spatial size and doubles the channel count per block
down to a 1x1 bottleneck; the decoder mirrors it with skip concatenations.
Each of the 2*log2(I)+1 scales (the raw image plus every encoder and decoder
level) contributes one feature map, upsampled by replication to the input
size.  A 16-kernel 1x1 convolution over the concatenated stack produces the
per-pixel embedding field, and a 2-kernel 1x1 convolution the foreground /
background probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, Rng
from .layers import (ConvParams, BatchNormParams, conv2d, deconv2d, batch_norm,
                     relu, softmax2, replicate_upsample, concat_channels)


@dataclass
class ModelConfig:
    input_size: int = 64
    in_channels: int = 3
    base_channels: int = 8
    convs_per_block: int = 2
    embedding_dim: int = 16
    ce_head_input: str = "stack"  # "stack" or "embedding"

    def __post_init__(self):
        i = self.input_size
        if i < 8 or (i & (i - 1)) != 0:
            raise ValueError(f"input_size must be a power of two >= 8, got {i}")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")
        if self.ce_head_input not in ("stack", "embedding"):
            raise ValueError(f"unknown ce_head_input {self.ce_head_input!r}")

    @property
    def levels(self) -> int:
        return int(np.log2(self.input_size))

    @property
    def scale_count(self) -> int:
        return 2 * self.levels + 1

    def to_dict(self):
        return {"input_size": self.input_size, "in_channels": self.in_channels,
                "base_channels": self.base_channels,
                "convs_per_block": self.convs_per_block,
                "embedding_dim": self.embedding_dim,
                "ce_head_input": self.ce_head_input}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    input_conv: ConvParams = None
    input_bn: BatchNormParams = None
    enc_blocks: list = field(default_factory=list)   # [(conv, bn), ...] per block
    dec_blocks: list = field(default_factory=list)
    scale_convs: list = field(default_factory=list)  # one 3x3 -> 1 conv per scale
    scale_bns: list = field(default_factory=list)    # one bn per scale conv
    emb_head: ConvParams = None
    ce_head: ConvParams = None

    def named_parameters(self):
        """Ordered (name, Tensor) pairs for every learnable array."""
        out = []

        def add_conv(prefix, cp):
            out.append((f"{prefix}.w", cp.weight))
            out.append((f"{prefix}.b", cp.bias))

        def add_bn(prefix, bn):
            out.append((f"{prefix}.gamma", bn.gamma))
            out.append((f"{prefix}.beta", bn.beta))

        add_conv("input.conv", self.input_conv)
        add_bn("input.bn", self.input_bn)
        for b, block in enumerate(self.enc_blocks):
            for j, (cp, bn) in enumerate(block):
                add_conv(f"enc{b}.conv{j}", cp)
                add_bn(f"enc{b}.bn{j}", bn)
        for b, block in enumerate(self.dec_blocks):
            for j, (cp, bn) in enumerate(block):
                tag = "deconv" if j == len(block) - 1 else f"conv{j}"
                add_conv(f"dec{b}.{tag}", cp)
                add_bn(f"dec{b}.bn{j}", bn)
        for s, cp in enumerate(self.scale_convs):
            add_conv(f"scale{s}", cp)
            add_bn(f"scale{s}.bn", self.scale_bns[s])
        add_conv("emb", self.emb_head)
        add_conv("ce", self.ce_head)
        return out

    def named_buffers(self):
        """Ordered (name, ndarray) pairs for the batch-norm running stats."""
        out = [("input.bn.running_mean", self.input_bn.running_mean),
               ("input.bn.running_var", self.input_bn.running_var)]
        for tag, blocks in (("enc", self.enc_blocks), ("dec", self.dec_blocks)):
            for b, block in enumerate(blocks):
                for j, (_, bn) in enumerate(block):
                    out.append((f"{tag}{b}.bn{j}.running_mean", bn.running_mean))
                    out.append((f"{tag}{b}.bn{j}.running_var", bn.running_var))
        for s, bn in enumerate(self.scale_bns):
            out.append((f"scale{s}.bn.running_mean", bn.running_mean))
            out.append((f"scale{s}.bn.running_var", bn.running_var))
        return out

    def set_buffer(self, name, value):
        holder, attr = self._locate_bn(name)
        setattr(holder, attr, np.asarray(value, dtype=np.float64))

    def _locate_bn(self, name):
        stem, attr = name.rsplit(".", 1)
        if stem == "input.bn":
            return self.input_bn, attr
        if stem.startswith("scale"):
            s = int(stem.split(".")[0][5:])
            return self.scale_bns[s], attr
        tag = stem[:3]
        blocks = self.enc_blocks if tag == "enc" else self.dec_blocks
        b, j = stem.split(".")
        return blocks[int(b[3:])][int(j[2:])][1], attr

    def all_batch_norms(self):
        bns = [self.input_bn]
        for blocks in (self.enc_blocks, self.dec_blocks):
            for block in blocks:
                bns.extend(bn for _, bn in block)
        bns.extend(self.scale_bns)
        return bns


@dataclass
class ForwardOutput:
    scale_maps: list          # scale_count tensors, each (N, 1, I, I)
    stack: Tensor             # (N, scale_count, I, I)
    embedding: Tensor         # (N, C, I, I)
    ce_logits: Tensor         # (N, 2, I, I)
    ce_probs: Tensor          # (N, 2, I, I)


def _init_conv(rng, oc, ic, k, stride, dtype):
    fan_in = ic * k * k
    std = float(np.sqrt(2.0 / fan_in))
    return ConvParams(weight=Tensor(rng.normal((oc, ic, k, k), std=std, dtype=dtype),
                                    requires_grad=True),
                      bias=Tensor(np.zeros(oc, dtype=dtype), requires_grad=True),
                      stride=stride)


def _init_deconv(rng, cin, cout, k, dtype):
    fan_in = cin * k * k
    std = float(np.sqrt(2.0 / fan_in))
    return ConvParams(weight=Tensor(rng.normal((cin, cout, k, k), std=std, dtype=dtype),
                                    requires_grad=True),
                      bias=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
                      stride=2)


def _init_bn(c, dtype):
    return BatchNormParams(gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
                           beta=Tensor(np.zeros(c, dtype=dtype), requires_grad=True))


def build(config: ModelConfig, rng: Rng, dtype=np.float32) -> ModelParams:
    """Initialize all parameters: fan-in-scaled normal weights, zero biases,
    unit-gain batch norms.  Deterministic given the rng state."""
    k = 3
    kconv = config.convs_per_block
    base = config.base_channels
    levels = config.levels
    p = ModelParams(config=config)

    p.input_conv = _init_conv(rng, base, config.in_channels, k, 1, dtype)
    p.input_bn = _init_bn(base, dtype)

    c = base
    for _ in range(levels):
        block = []
        for _ in range(kconv - 1):
            block.append((_init_conv(rng, c, c, k, 1, dtype), _init_bn(c, dtype)))
        block.append((_init_conv(rng, 2 * c, c, k, 2, dtype), _init_bn(2 * c, dtype)))
        p.enc_blocks.append(block)
        c *= 2

    # decoder mirrors: d channels in, concat with the matching encoder feature
    # (same channel count), convs back to d, deconv to d // 2
    d = c
    for _ in range(levels):
        block = []
        cin = 2 * d
        for _ in range(kconv - 1):
            block.append((_init_conv(rng, d, cin, k, 1, dtype), _init_bn(d, dtype)))
            cin = d
        block.append((_init_deconv(rng, cin, d // 2, k, dtype), _init_bn(d // 2, dtype)))
        p.dec_blocks.append(block)
        d //= 2

    # one single-map extractor per scale: raw image, then every encoder and
    # decoder block output
    scale_channels = [config.in_channels]
    c = base
    for _ in range(levels):
        c *= 2
        scale_channels.append(c)
    for _ in range(levels):
        c //= 2
        scale_channels.append(c)
    p.scale_convs = [_init_conv(rng, 1, sc, k, 1, dtype) for sc in scale_channels]
    p.scale_bns = [_init_bn(1, dtype) for _ in scale_channels]

    stack_ch = config.scale_count
    p.emb_head = _init_conv(rng, config.embedding_dim, stack_ch, 1, 1, dtype)
    ce_in = stack_ch if config.ce_head_input == "stack" else config.embedding_dim
    p.ce_head = _init_conv(rng, 2, ce_in, 1, 1, dtype)
    return p


def depth(config: ModelConfig) -> int:
    """Convolutional layer count along the assembly: the input convolution,
    every block convolution/deconvolution, the per-scale extraction stage and
    the two head convolutions.  With 4-conv blocks and 6+6 blocks this is 52."""
    return 2 * config.levels * config.convs_per_block + 4


def forward(params: ModelParams, image: Tensor, mode: str = "inference",
            update_running: bool = None, _linearize: bool = False) -> ForwardOutput:
    """Run the network.  ``mode`` is "train" (batch statistics) or
    "inference" (running statistics).  ``_linearize`` replaces every
    nonlinearity by its derivative-bound surrogate; used by the robustness
    bound, never for prediction."""
    cfg = params.config
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    if update_running is None:
        update_running = mode == "train"
    x = image if isinstance(image, Tensor) else Tensor(image)
    n, c, h, w = x.data.shape
    if c != cfg.in_channels or h != cfg.input_size or w != cfg.input_size:
        raise ValueError(f"image shape {x.data.shape} does not match config "
                         f"(N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size})")

    act = (lambda t: t) if _linearize else relu
    bn_mode = "inference" if _linearize else mode

    feats = [x]  # per-scale trunk activations, scale 0 = raw image
    t = act(batch_norm(conv2d(x, params.input_conv), params.input_bn,
                       mode=bn_mode, update_running=update_running))
    skips = [t]
    for block in params.enc_blocks:
        for cp, bnp in block[:-1]:
            t = act(batch_norm(conv2d(t, cp), bnp, mode=bn_mode,
                               update_running=update_running))
        cp, bnp = block[-1]
        t = act(batch_norm(conv2d(t, cp), bnp, mode=bn_mode,
                           update_running=update_running))
        skips.append(t)
        feats.append(t)

    assert t.data.shape[2] == 1 and t.data.shape[3] == 1, "bottleneck must be 1x1"

    for b, block in enumerate(params.dec_blocks):
        t = concat_channels([t, skips[len(params.enc_blocks) - b]])
        for cp, bnp in block[:-1]:
            t = act(batch_norm(conv2d(t, cp), bnp, mode=bn_mode,
                               update_running=update_running))
        dp, bnp = block[-1]
        t = act(batch_norm(deconv2d(t, dp), bnp, mode=bn_mode,
                           update_running=update_running))
        feats.append(t)

    # the per-scale maps are normalized before stacking; without this the
    # scale convs and the heads form an unnormalized two-layer chain whose
    # weights can grow without bound under the metric objective
    scale_maps = []
    for feat, cp, bnp in zip(feats, params.scale_convs, params.scale_bns):
        m = batch_norm(conv2d(feat, cp), bnp, mode=bn_mode,
                       update_running=update_running)
        factor = cfg.input_size // feat.data.shape[2]
        scale_maps.append(replicate_upsample(m, factor))

    stack = concat_channels(scale_maps)
    embedding = conv2d(stack, params.emb_head)
    ce_in = stack if cfg.ce_head_input == "stack" else embedding
    ce_logits = conv2d(ce_in, params.ce_head)
    if _linearize:
        # softmax derivative bound: every logit reaches every probability
        # with |d p / d z| <= 1, realized as an all-ones 2x2 coupling
        s = ce_logits.sum(axis=1, keepdims=True)
        ce_probs = concat_channels([s, s])
    else:
        ce_probs = softmax2(ce_logits)
    return ForwardOutput(scale_maps=scale_maps, stack=stack, embedding=embedding,
                         ce_logits=ce_logits, ce_probs=ce_probs)
