"""Declarative construction of ResNet-family networks.

Block interiors are built from unit captions (``"BN-Conv-BN-ReLU-Conv-BN"``),
so the layer list of every built block can be compared structurally with
the caption it was meant to follow.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from shakedrop import ops
from shakedrop.autograd import Tensor, as_tensor
from shakedrop.nn import BatchNorm2d, Conv2d, Linear, Module, ReLU, Sequential
from shakedrop.regularizers import (
    Frozen,
    Override,
    PerturbationUnit,
    Phase,
    RegularizerConfig,
    RegularizerKind,
)
from shakedrop.rng import INIT, RandomStreams


class Family(str, enum.Enum):
    RESNET = "resnet"
    WIDE_RESNET = "wideresnet"
    PYRAMIDNET = "pyramidnet"
    RESNEXT2 = "resnext2"
    RESNEXT3 = "resnext3"


class BlockType(str, enum.Enum):
    BASIC = "basic"
    BOTTLENECK = "bottleneck"


class Insertion(str, enum.Enum):
    TYPE_A = "typeA"
    TYPE_B = "typeB"


EXPANSION = 4

BRANCH_CAPTIONS = {
    (Family.RESNET, BlockType.BASIC): "Conv-BN-ReLU-Conv-BN",
    (Family.RESNET, BlockType.BOTTLENECK): "Conv-BN-ReLU-Conv-BN-ReLU-Conv-BN",
    (Family.PYRAMIDNET, BlockType.BASIC): "BN-Conv-BN-ReLU-Conv-BN",
    (Family.PYRAMIDNET, BlockType.BOTTLENECK): "BN-Conv-BN-ReLU-Conv-BN-ReLU-Conv-BN",
    (Family.WIDE_RESNET, BlockType.BASIC): "BN-ReLU-Conv-BN-ReLU-Conv",
    (Family.RESNEXT2, BlockType.BOTTLENECK): "Conv-BN-ReLU-Conv-BN-ReLU-Conv-BN",
    (Family.RESNEXT3, BlockType.BASIC): "Conv-BN-ReLU-Conv-BN",
    (Family.RESNEXT3, BlockType.BOTTLENECK): "Conv-BN-ReLU-Conv-BN-ReLU-Conv-BN",
}
POST_ADD_RELU = {Family.RESNET, Family.RESNEXT2, Family.RESNEXT3}


@dataclass(frozen=True)
class ArchitectureSpec:
    family: Family = Family.RESNET
    depth: int = 20
    block: BlockType = BlockType.BASIC
    widen_factor: int = 1
    pyramid_alpha: float = 48.0
    cardinality: int = 1
    base_width: int = 16
    stages: int = 3
    erase_relu: bool = False
    bn_end: bool = False
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    insertion: Insertion = Insertion.TYPE_B
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        for name, kind in (("family", Family), ("block", BlockType), ("insertion", Insertion)):
            object.__setattr__(self, name, kind(getattr(self, name)))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if (self.family, self.block) not in BRANCH_CAPTIONS:
            raise ValueError(f"{self.family.value} does not support {self.block.value} blocks")
        if self.widen_factor < 1 or self.base_width < 1 or self.cardinality < 1 or self.stages < 1:
            raise ValueError("widen_factor, base_width, cardinality and stages must be >= 1")
        if self.pyramid_alpha < 0:
            raise ValueError("pyramid_alpha must be >= 0")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape is (C, H, W)")
        if self.regularizer.kind is RegularizerKind.SHAKESHAKE and self.family is not Family.RESNEXT3:
            raise ValueError("shake-shake needs the two residual branches of resnext3")
        if self.block is BlockType.BOTTLENECK and self.cardinality > 1:
            for s in range(self.stages):
                if stage_width(self, s) % self.cardinality:
                    raise ValueError("bottleneck width must be divisible by cardinality")
        blocks_per_stage(self)

    @property
    def branches(self) -> int:
        return 2 if self.family is Family.RESNEXT3 else 1


def _layers_per_block(spec: ArchitectureSpec) -> int:
    return 3 if spec.block is BlockType.BOTTLENECK else 2


def blocks_per_stage(spec: ArchitectureSpec) -> int:
    """Residual blocks per stage implied by ``depth``; raises if inconsistent."""
    # stem conv + classifier count as 2 layers; the Wide ResNet depth convention adds 2 more
    fixed = 4 if spec.family is Family.WIDE_RESNET else 2
    per = _layers_per_block(spec) * spec.stages
    body = spec.depth - fixed
    if body <= 0 or body % per:
        raise ValueError(
            f"depth {spec.depth} inconsistent with {spec.family.value}/{spec.block.value}: "
            f"(depth - {fixed}) must be a positive multiple of {per}"
        )
    return body // per


def count_blocks(spec: ArchitectureSpec) -> int:
    """Total number of residual blocks L."""
    return blocks_per_stage(spec) * spec.stages


def stage_width(spec: ArchitectureSpec, stage: int) -> int:
    return spec.base_width * spec.widen_factor * 2 ** stage


def pyramid_width(spec: ArchitectureSpec, l: int) -> int:
    """Additive widening: base + floor(alpha * l / L) for block ``l``."""
    return spec.base_width + int(np.floor(spec.pyramid_alpha * l / count_blocks(spec)))


def _branch(caption: str, in_ch: int, mid: int, out: int, kinds: BlockType, downsample: bool,
            groups: int) -> Sequential:
    if kinds is BlockType.BASIC:
        convs = [(in_ch, out, 3, downsample, 1), (out, out, 3, False, 1)]
    else:
        convs = [(in_ch, mid, 1, False, 1), (mid, mid, 3, downsample, groups), (mid, out, 1, False, 1)]
    layers: list[Module] = []
    ch = in_ch
    conv_iter = iter(convs)
    for unit in caption.split("-"):
        if unit == "Conv":
            cin, cout, k, ds, g = next(conv_iter)
            layers.append(Conv2d(cin, cout, k, downsample=ds, groups=g))
            ch = cout
        elif unit == "BN":
            layers.append(BatchNorm2d(ch))
        elif unit == "ReLU":
            layers.append(ReLU())
        else:
            raise ValueError(f"unknown unit {unit!r}")
    return Sequential(*layers)


@dataclass
class RunContext:
    """Per-forward state a block needs for its perturbation units."""

    phase: Phase = Phase.TRAIN
    streams: Optional[RandomStreams] = None
    step: int = 0
    replica: int = 0


class ResidualBlock(Module):
    """``G(x) = shortcut(x) + perturbed branch term`` with an optional trailing ReLU."""

    def __init__(self, index: int, branches: Sequence[Sequential], in_channels: int,
                 out_channels: int, downsample: bool, post_relu: bool):
        self.index = index
        self.branches = list(branches)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.downsample = downsample
        self.post_relu = post_relu
        self.units: list[PerturbationUnit] = []
        self.insertion: Optional[Insertion] = None

    def caption(self) -> str:
        return self.branches[0].caption() + "-add" + ("-ReLU" if self.post_relu else "")

    def shortcut(self, x: Tensor) -> Tensor:
        if self.downsample:
            x = ops.subsample2d(x)
        if self.out_channels != self.in_channels:
            x = ops.pad_channels(x, self.out_channels)
        return x

    def forward(self, x: Tensor, ctx: Optional[RunContext] = None) -> Tensor:
        ctx = ctx or RunContext(Phase.TRAIN if self.training else Phase.EVAL)
        skip = self.shortcut(x)
        outs = [branch(x) for branch in self.branches]
        args = (ctx.phase, ctx.streams, ctx.step, ctx.replica)
        if len(outs) == 1:
            term = self.units[0].apply(outs[0], *args) if self.units else outs[0]
            out = ops.add(skip, term)
        elif self.units and self.units[0].config.kind is RegularizerKind.SHAKESHAKE:
            out = self.units[0].combine(skip, outs[0], outs[1], *args)
        elif not self.units:
            out = ops.add(skip, ops.add(outs[0], outs[1]))
        elif self.insertion is Insertion.TYPE_A:
            out = ops.add(skip, self.units[0].apply(ops.add(outs[0], outs[1]), *args))
        else:
            out = ops.add(skip, ops.add(self.units[0].apply(outs[0], *args),
                                        self.units[1].apply(outs[1], *args)))
        return ops.relu(out) if self.post_relu else out


def insert_regularizer(block: ResidualBlock, config: RegularizerConfig, L: int,
                       insertion: Insertion = Insertion.TYPE_B) -> ResidualBlock:
    """Attach perturbation units to ``block``.

    Single-branch blocks get one unit wrapping ``F``. Two-branch blocks get
    one unit on ``F1 + F2`` (type A) or one independent unit per branch
    (type B); shake-shake always uses one unit mixing both branches.
    """
    block.units = []
    block.insertion = None
    if config.kind is RegularizerKind.NONE:
        return block
    if config.kind is RegularizerKind.SHAKESHAKE:
        if len(block.branches) != 2:
            raise ValueError("shake-shake needs a two-branch block")
        block.units = [PerturbationUnit(config, block.index, L, unit=0)]
        return block
    if len(block.branches) == 1:
        block.units = [PerturbationUnit(config, block.index, L, unit=0)]
        return block
    block.insertion = Insertion(insertion)
    n_units = 1 if block.insertion is Insertion.TYPE_A else 2
    block.units = [PerturbationUnit(config, block.index, L, unit=u) for u in range(n_units)]
    return block


class Network(Module):
    """Stem, residual blocks indexed 1..L, and a pooled linear classifier."""

    def __init__(self, spec: ArchitectureSpec, stem: Sequential, blocks: Sequence[ResidualBlock],
                 head: Sequential, classifier: Linear):
        self.spec = spec
        self.stem = stem
        self.blocks = list(blocks)
        self.head = head
        self.classifier = classifier
        self.streams: Optional[RandomStreams] = None
        self.step = 0
        self.replica = 0

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def phase(self) -> Phase:
        return Phase.TRAIN if self.training else Phase.EVAL

    @property
    def dtype(self) -> np.dtype:
        return self.classifier.weight.dtype

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.dtype != self.dtype and x.node is None:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        ctx = RunContext(self.phase, self.streams, self.step, self.replica)
        x = self.stem(x)
        for block in self.blocks:
            x = block(x, ctx)
        x = self.head(x)
        return self.classifier(ops.global_avg_pool(x))

    def units(self) -> Iterator[PerturbationUnit]:
        for block in self.blocks:
            yield from block.units

    def freeze(self, gate: Override = None, alpha: Override = None, beta: Override = None) -> None:
        for unit in self.units():
            unit.frozen = Frozen(gate, alpha, beta)

    def unfreeze(self) -> None:
        for unit in self.units():
            unit.frozen = None

    def batchnorms(self) -> Iterator[BatchNorm2d]:
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                yield m

    def layer_captions(self) -> list[str]:
        return [block.caption() for block in self.blocks]

    def clone(self) -> "Network":
        return copy.deepcopy(self)


def build_network(spec: ArchitectureSpec, seed: Optional[int] = 0) -> Network:
    """Build the network described by ``spec``; initialize it when ``seed`` is given."""
    fam, kind = spec.family, spec.block
    caption = BRANCH_CAPTIONS[(fam, kind)]
    if spec.bn_end and not caption.endswith("BN"):
        caption += "-BN"
    post_relu = fam in POST_ADD_RELU and not spec.erase_relu
    in_c = spec.input_shape[0]
    n = blocks_per_stage(spec)
    L = n * spec.stages

    stem_width = spec.base_width
    if fam is Family.RESNET or fam is Family.RESNEXT2 or fam is Family.RESNEXT3:
        stem_width = stage_width(spec, 0)
        stem = Sequential(Conv2d(in_c, stem_width), BatchNorm2d(stem_width), ReLU())
    elif fam is Family.PYRAMIDNET:
        stem = Sequential(Conv2d(in_c, stem_width), BatchNorm2d(stem_width))
    else:
        stem = Sequential(Conv2d(in_c, stem_width))

    blocks: list[ResidualBlock] = []
    ch = stem_width
    l = 0
    for s in range(spec.stages):
        for j in range(n):
            l += 1
            downsample = s > 0 and j == 0
            if fam is Family.PYRAMIDNET:
                mid = pyramid_width(spec, l)
            else:
                mid = stage_width(spec, s)
            out = mid * EXPANSION if kind is BlockType.BOTTLENECK else mid
            grouped = fam in (Family.RESNEXT2, Family.RESNEXT3) and kind is BlockType.BOTTLENECK
            groups = spec.cardinality if grouped else 1
            branches = [_branch(caption, ch, mid, out, kind, downsample, groups)
                        for _ in range(spec.branches)]
            block = ResidualBlock(l, branches, ch, out, downsample, post_relu)
            insert_regularizer(block, spec.regularizer, L, spec.insertion)
            blocks.append(block)
            ch = out

    if fam in (Family.PYRAMIDNET, Family.WIDE_RESNET):
        head = Sequential(BatchNorm2d(ch), ReLU())
    else:
        head = Sequential()
    net = Network(spec, stem, blocks, head, Linear(ch, spec.num_classes))
    if seed is not None:
        net.streams = RandomStreams(seed)
        init_parameters(net, net.streams.generator(INIT))
    return net


def init_parameters(network: Module, rng: np.random.Generator) -> None:
    """MSRA init: conv weights ~ N(0, 2 / (out_channels * kH * kW)).

    Batch-norm scale 1 / shift 0 with fresh running statistics; linear
    weights uniform in ±1/sqrt(fan_in) with zero bias.
    """
    for m in network.modules():
        if isinstance(m, Conv2d):
            o, _, kh, kw = m.weight.shape
            m.weight.data = rng.normal(0.0, np.sqrt(2.0 / (o * kh * kw)), size=m.weight.shape)
        elif isinstance(m, BatchNorm2d):
            m.gamma.data = np.ones(m.channels)
            m.shift.data = np.zeros(m.channels)
            m.reset_running_stats()
        elif isinstance(m, Linear):
            fan_in = m.weight.shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            m.weight.data = rng.uniform(-bound, bound, size=m.weight.shape)
            m.bias.data = np.zeros(m.bias.shape)
    for p in network.parameters():
        p.zero_grad()
