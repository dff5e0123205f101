"""Declarative network descriptions and the root-module rewrite.

A :class:`NetSpec` is an ordered list of :class:`LayerSpec` entries forming a
DAG; the implicit source layer is called ``"input"``.  Generators build the
reference NiN, ResNet-50/200 and GoogLeNet graphs with filter groups taken
from a :class:`GroupingSchedule`.  :func:`apply_root_transform` rewrites an
existing graph, changing nothing but the ``groups`` field of spatial convs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

from .ops import ConfigError, conv_out_size

__all__ = [
    "INPUT",
    "NetSpecError",
    "TransformError",
    "LayerSpec",
    "NetSpec",
    "GroupingSchedule",
    "make_schedule",
    "parse_variant",
    "make_nin",
    "make_resnet50",
    "make_resnet200",
    "make_googlenet",
    "make_tiny_convnet",
    "make_arch",
    "apply_root_transform",
    "structural_diff",
    "ARCHITECTURES",
]

INPUT = "input"
KINDS = ("conv", "pool", "batchnorm", "relu", "linear", "concat", "add", "softmax")
POOL_MODES = ("max", "avg", "global")
_PASS_THROUGH = ("batchnorm", "relu", "concat", "pool")


class NetSpecError(ValueError):
    """The layer graph is malformed (dangling input, cycle, channel mismatch...)."""


class TransformError(ValueError):
    """A schedule cannot be applied to a network."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    out: int | None = None
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    pad: int = 0
    groups: int = 1
    in_channels: int | None = None
    bias: bool = False
    affine: bool = True
    mode: str = "max"
    stage: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise NetSpecError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "kernel", (int(self.kernel[0]), int(self.kernel[1])))
        if self.kind in ("conv", "linear") and (self.out is None or self.out < 1):
            raise NetSpecError(f"layer {self.name!r}: {self.kind} needs a positive 'out'")
        if self.kind == "pool" and self.mode not in POOL_MODES:
            raise NetSpecError(f"layer {self.name!r}: pool mode must be one of {POOL_MODES}")
        if self.groups < 1:
            raise ConfigError(f"layer {self.name!r}: groups must be positive")
        if self.kind == "conv":
            if self.out % self.groups:
                raise ConfigError(f"layer {self.name!r}: {self.out} filters not divisible by {self.groups} groups")
            if self.in_channels is not None and self.in_channels % self.groups:
                raise ConfigError(
                    f"layer {self.name!r}: {self.in_channels} input channels not divisible by {self.groups} groups")

    @property
    def is_spatial(self) -> bool:
        return self.kind == "conv" and self.kernel != (1, 1)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "kind": self.kind,
            "kernel": list(self.kernel),
            "out": self.out,
            "stride": self.stride,
            "pad": self.pad,
            "groups": self.groups,
            "inputs": list(self.inputs),
        }
        if self.in_channels is not None:
            d["in"] = self.in_channels
        if self.bias:
            d["bias"] = True
        if self.kind == "batchnorm" and not self.affine:
            d["affine"] = False
        if self.kind == "pool":
            d["mode"] = self.mode
        if self.stage is not None:
            d["stage"] = self.stage
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        try:
            kernel = d.get("kernel", [1, 1])
            if isinstance(kernel, int):
                kernel = (kernel, kernel)
            return cls(
                name=d["name"],
                kind=d["kind"],
                inputs=tuple(d.get("inputs", ())),
                out=d.get("out"),
                kernel=tuple(kernel),
                stride=int(d.get("stride", 1)),
                pad=int(d.get("pad", 0)),
                groups=int(d.get("groups", 1)),
                in_channels=d.get("in"),
                bias=bool(d.get("bias", False)),
                affine=bool(d.get("affine", True)),
                mode=d.get("mode", "max"),
                stage=d.get("stage"),
            )
        except KeyError as e:
            raise NetSpecError(f"layer entry missing key {e}") from None


@dataclass(frozen=True)
class NetSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int, int]
    output: str | None = None
    name: str = "net"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.output is None and self.layers:
            object.__setattr__(self, "output", self.layers[-1].name)

    # -- lookup -----------------------------------------------------------
    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [l.name for l in self.layers]

    def consumers(self) -> dict[str, list[str]]:
        cons: dict[str, list[str]] = {INPUT: []}
        for l in self.layers:
            cons.setdefault(l.name, [])
        for l in self.layers:
            for src in l.inputs:
                cons.setdefault(src, []).append(l.name)
        return cons

    def convs(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    def spatial_positions(self) -> list[list[LayerSpec]]:
        """Spatial convs grouped into schedule positions.

        Layers sharing a ``stage`` tag form one position; untagged spatial
        convs are positions of their own.  Order is order of first
        appearance.
        """
        order: list[str] = []
        groups: dict[str, list[LayerSpec]] = {}
        for l in self.layers:
            if not l.is_spatial:
                continue
            key = l.stage if l.stage is not None else f"@{l.name}"
            if key not in groups:
                order.append(key)
                groups[key] = []
            groups[key].append(l)
        return [groups[k] for k in order]

    # -- validation -------------------------------------------------------
    def shapes(self, input_shape: Sequence[int] | None = None) -> dict[str, tuple[int, int, int, int]]:
        """Propagate NCHW shapes; raises :class:`NetSpecError` naming the offending layer/edge."""
        shp: dict[str, tuple[int, int, int, int]] = {
            INPUT: tuple(input_shape) if input_shape is not None else self.input_shape}
        seen = {INPUT}
        for l in self.layers:
            if l.name in seen:
                raise NetSpecError(f"duplicate layer name {l.name!r}")
            if not l.inputs:
                raise NetSpecError(f"layer {l.name!r} has no inputs")
            for src in l.inputs:
                if src not in seen:
                    known = any(x.name == src for x in self.layers)
                    why = "appears later (cycle or bad ordering)" if known else "does not exist"
                    raise NetSpecError(f"edge {src} -> {l.name}: input {src!r} {why}")
            ins = [shp[s] for s in l.inputs]
            shp[l.name] = _propagate(l, ins)
            seen.add(l.name)
        if self.output is not None and self.output not in shp:
            raise NetSpecError(f"output layer {self.output!r} does not exist")
        return shp

    def validate(self) -> "NetSpec":
        """Check the graph and return a copy with ``in_channels`` filled on conv/linear layers."""
        shp = self.shapes()
        layers = []
        for l in self.layers:
            if l.kind == "conv":
                layers.append(replace(l, in_channels=shp[l.inputs[0]][1]))
            elif l.kind == "linear":
                n, c, h, w = shp[l.inputs[0]]
                layers.append(replace(l, in_channels=c * h * w))
            else:
                layers.append(l)
        return replace(self, layers=tuple(layers))

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input": list(self.input_shape),
            "output": self.output,
            "layers": [l.to_dict() for l in self.layers],
        }

    def to_json(self, indent: int | None = 1) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetSpec":
        if "input" not in d or "layers" not in d:
            raise NetSpecError("net spec needs 'input' and 'layers'")
        return cls(
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            input_shape=tuple(d["input"]),
            output=d.get("output"),
            name=d.get("name", "net"),
        )

    @classmethod
    def from_json(cls, text: str) -> "NetSpec":
        return cls.from_dict(json.loads(text))

    def with_input(self, shape: Sequence[int]) -> "NetSpec":
        return replace(self, input_shape=tuple(shape))


def _propagate(l: LayerSpec, ins: list[tuple[int, int, int, int]]) -> tuple[int, int, int, int]:
    if l.kind in ("concat", "add"):
        if len(ins) < 2:
            raise NetSpecError(f"layer {l.name!r}: {l.kind} needs at least two inputs")
    elif len(ins) != 1:
        raise NetSpecError(f"layer {l.name!r}: {l.kind} takes exactly one input")
    n, c, h, w = ins[0]
    src = l.inputs[0]
    if l.kind == "conv":
        if l.in_channels is not None and l.in_channels != c:
            raise NetSpecError(f"edge {src} -> {l.name}: {c} channels arrive, layer expects {l.in_channels}")
        if c % l.groups:
            raise ConfigError(f"edge {src} -> {l.name}: {c} channels not divisible by {l.groups} groups")
        try:
            ho = conv_out_size(h, l.kernel[0], l.stride, l.pad)
            wo = conv_out_size(w, l.kernel[1], l.stride, l.pad)
        except ValueError as e:
            raise NetSpecError(f"layer {l.name!r}: {e}") from None
        return (n, l.out, ho, wo)
    if l.kind == "pool":
        if l.mode == "global":
            return (n, c, 1, 1)
        try:
            ho = conv_out_size(h, l.kernel[0], l.stride, l.pad)
            wo = conv_out_size(w, l.kernel[1], l.stride, l.pad)
        except ValueError as e:
            raise NetSpecError(f"layer {l.name!r}: {e}") from None
        return (n, c, ho, wo)
    if l.kind == "linear":
        if l.in_channels is not None and l.in_channels != c * h * w:
            raise NetSpecError(f"edge {src} -> {l.name}: {c * h * w} features arrive, layer expects {l.in_channels}")
        return (n, l.out, 1, 1)
    if l.kind == "concat":
        for s, (n2, c2, h2, w2) in zip(l.inputs[1:], ins[1:]):
            if (n2, h2, w2) != (n, h, w):
                raise NetSpecError(f"edge {s} -> {l.name}: spatial extent {(h2, w2)} != {(h, w)}")
        return (n, sum(x[1] for x in ins), h, w)
    if l.kind == "add":
        for s, shape in zip(l.inputs[1:], ins[1:]):
            if shape != ins[0]:
                raise NetSpecError(f"edge {s} -> {l.name}: shape {shape} != {ins[0]} from {src}")
        return ins[0]
    return ins[0]


# --------------------------------------------------------------------------
# grouping schedules

def _is_pow2(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


@dataclass(frozen=True)
class GroupingSchedule:
    """Group count for each spatial position of a network, first position first."""

    topology: str
    degree: int
    counts: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        c = self.counts
        if self.topology not in ("root", "column", "tree"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if not c or any(v < 1 for v in c):
            raise ValueError("group counts must be positive")
        if c[0] != 1:
            raise ValueError("the first (image-space) spatial layer is never grouped")
        rest = c[1:]
        if self.topology == "root":
            for a, b in zip(rest, rest[1:]):
                if b > a or a % b:
                    raise ValueError(f"root counts must be non-increasing divisors: {c}")
        elif self.topology == "column":
            if len(set(rest)) > 1:
                raise ValueError(f"column counts must be constant after the first: {c}")
        elif any(b < a for a, b in zip(rest, rest[1:])):
            raise ValueError(f"tree counts must be non-decreasing: {c}")

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "GroupingSchedule":
        """Wrap explicit counts, inferring the topology."""
        counts = tuple(int(v) for v in counts)
        rest = counts[1:]
        degree = rest[0] if rest else 1
        if len(set(rest)) <= 1:
            topo = "column"
        elif all(b <= a for a, b in zip(rest, rest[1:])):
            topo = "root"
        else:
            topo = "tree"
        return cls(topo, degree, counts)

    @classmethod
    def baseline(cls, positions: int) -> "GroupingSchedule":
        return cls("column", 1, (1,) * positions)

    @property
    def label(self) -> str:
        if all(v == 1 for v in self.counts):
            return "baseline"
        return f"{self.topology}-{self.degree}"

    def __len__(self) -> int:
        return len(self.counts)


def make_schedule(topology: str, degree: int, positions: int) -> GroupingSchedule:
    """Per-position group counts: root ``1, d, d/2, ...``; column ``1, d, d, ...``;
    tree ``1, d, 2d, ...``."""
    if not isinstance(degree, int) or degree < 2 or not _is_pow2(degree):
        raise ValueError(f"degree must be a power of two >= 2, got {degree!r}")
    if positions < 2:
        raise ValueError("a schedule needs at least two positions")
    if topology == "root":
        rest = [max(degree >> i, 1) for i in range(positions - 1)]
    elif topology == "column":
        rest = [degree] * (positions - 1)
    elif topology == "tree":
        rest = [degree << i for i in range(positions - 1)]
    else:
        raise ValueError(f"unknown topology {topology!r}")
    return GroupingSchedule(topology, degree, (1, *rest))


def parse_variant(variant, positions: int) -> GroupingSchedule:
    """Accepts ``"baseline"``/``"orig"``, ``"root-8"``, ``"tree-4"``, ``"column-2"``,
    an integer root degree, explicit counts, or a schedule."""
    if isinstance(variant, GroupingSchedule):
        sched = variant
    elif variant is None or (isinstance(variant, str) and variant.lower() in ("baseline", "orig", "original")):
        sched = GroupingSchedule.baseline(positions)
    elif isinstance(variant, int):
        sched = GroupingSchedule.baseline(positions) if variant == 1 else make_schedule("root", variant, positions)
    elif isinstance(variant, str):
        topo, _, deg = variant.partition("-")
        try:
            d = int(deg)
        except ValueError:
            raise ValueError(f"cannot parse variant {variant!r}") from None
        sched = GroupingSchedule.baseline(positions) if d == 1 else make_schedule(topo.lower(), d, positions)
    else:
        sched = GroupingSchedule.from_counts(variant)
    if len(sched) != positions:
        raise TransformError(f"schedule has {len(sched)} positions, network has {positions}")
    return sched


# --------------------------------------------------------------------------
# builders

class _Builder:
    def __init__(self, name: str, input_shape, groups: Mapping[str, int]):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.groups = dict(groups)
        self.layers: list[LayerSpec] = []
        self.channels = {INPUT: self.input_shape[1]}

    def conv(self, name, src, out, k, stride=1, pad=None, stage=None, bias=False, bn=True,
             affine=True, relu=True):
        pad = (k - 1) // 2 if pad is None else pad
        g = self.groups.get(stage, 1) if k > 1 else 1
        cin = self.channels[src]
        self.layers.append(LayerSpec(name, "conv", (src,), out=out, kernel=(k, k), stride=stride, pad=pad,
                                     groups=g, in_channels=cin, bias=bias, stage=stage))
        self.channels[name] = out
        top = name
        if bn:
            top = self.bn(f"{name}_bn", top, affine=affine)
        if relu:
            top = self.relu(f"{name}_relu", top)
        return top

    def bn(self, name, src, affine=True):
        self.layers.append(LayerSpec(name, "batchnorm", (src,), affine=affine))
        self.channels[name] = self.channels[src]
        return name

    def relu(self, name, src):
        self.layers.append(LayerSpec(name, "relu", (src,)))
        self.channels[name] = self.channels[src]
        return name

    def pool(self, name, src, mode="max", k=3, stride=2, pad=1):
        self.layers.append(LayerSpec(name, "pool", (src,), kernel=(k, k), stride=stride, pad=pad, mode=mode))
        self.channels[name] = self.channels[src]
        return name

    def concat(self, name, srcs):
        self.layers.append(LayerSpec(name, "concat", tuple(srcs)))
        self.channels[name] = sum(self.channels[s] for s in srcs)
        return name

    def add(self, name, srcs):
        self.layers.append(LayerSpec(name, "add", tuple(srcs)))
        self.channels[name] = self.channels[srcs[0]]
        return name

    def head(self, src, num_classes, in_features):
        top = self.pool("pool_global", src, mode="global", k=1, stride=1, pad=0)
        self.layers.append(LayerSpec("fc", "linear", (top,), out=num_classes, bias=True,
                                     in_channels=in_features, stage="classifier"))
        self.layers.append(LayerSpec("prob", "softmax", ("fc",)))

    def build(self) -> NetSpec:
        return NetSpec(tuple(self.layers), self.input_shape, self.layers[-1].name, self.name).validate()


def _scale(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def _positions_groups(stages: Sequence[str], variant) -> tuple[GroupingSchedule, dict[str, int]]:
    sched = parse_variant(variant, len(stages))
    return sched, dict(zip(stages, sched.counts))


NIN_STAGES = ("conv1", "conv2", "conv3")


def make_nin(variant="baseline", width: float = 1.0, num_classes: int = 10,
             input_size: int = 32, in_channels: int = 3, batch: int = 1) -> NetSpec:
    """Network-in-Network for CIFAR-sized inputs.

    Three blocks, each a spatial conv (5x5, 5x5, 3x3) followed by two 1x1
    convs; widths 192-160-96, 192-192-192, 192-192-classes.  Every conv but
    the last is followed by batchnorm and relu.  Blocks 1 and 2 end in a 3x3
    stride-2 max pool, block 3 in a global average pool.  ``width`` scales
    every hidden width.
    """
    sched, groups = _positions_groups(NIN_STAGES, variant)
    b = _Builder(f"nin-{sched.label}", (batch, in_channels, input_size, input_size), groups)
    w = lambda c: _scale(c, width)  # noqa: E731
    top = b.conv("conv1a", INPUT, w(192), 5, stage="conv1")
    top = b.conv("conv1b", top, w(160), 1)
    top = b.conv("conv1c", top, w(96), 1)
    top = b.pool("pool1", top)
    top = b.conv("conv2a", top, w(192), 5, stage="conv2")
    top = b.conv("conv2b", top, w(192), 1)
    top = b.conv("conv2c", top, w(192), 1)
    top = b.pool("pool2", top)
    top = b.conv("conv3a", top, w(192), 3, stage="conv3")
    top = b.conv("conv3b", top, w(192), 1)
    top = b.conv("conv3c", top, num_classes, 1, bias=True, bn=False, relu=False)
    top = b.pool("pool3", top, mode="global", k=1, stride=1, pad=0)
    b.layers.append(LayerSpec("prob", "softmax", (top,)))
    return b.build()


RESNET_STAGES = ("conv1", "res2", "res3", "res4", "res5")
_RESNET_WIDTHS = ((64, 256), (128, 512), (256, 1024), (512, 2048))


def _block_names(stage: str, count: int) -> list[str]:
    if count <= 26:
        return [f"{stage}{chr(ord('a') + i)}" for i in range(count)]
    return [f"{stage}a"] + [f"{stage}b{i}" for i in range(1, count)]


def _resnet(name, blocks, variant, width, num_classes, input_size, preact, batch):
    sched, groups = _positions_groups(RESNET_STAGES, variant)
    b = _Builder(f"{name}-{sched.label}", (batch, 3, input_size, input_size), groups)
    top = b.conv("conv1", INPUT, _scale(64, width), 7, stride=2, pad=3, stage="conv1")
    top = b.pool("pool1", top)
    for si, (nblocks, (mid, out)) in enumerate(zip(blocks, _RESNET_WIDTHS)):
        stage = f"res{si + 2}"
        mid, out = _scale(mid, width), _scale(out, width)
        for bi, blk in enumerate(_block_names(stage, nblocks)):
            stride = 2 if (bi == 0 and si > 0) else 1
            project = bi == 0
            if preact:
                pre = b.relu(f"{blk}_preact_relu", b.bn(f"{blk}_preact_bn", top))
                shortcut = (b.conv(f"{blk}_branch1", pre, out, 1, stride=stride, bn=False, relu=False)
                            if project else top)
                x = b.conv(f"{blk}_branch2a", pre, mid, 1)
                x = b.conv(f"{blk}_branch2b", x, mid, 3, stride=stride, stage=stage)
                x = b.conv(f"{blk}_branch2c", x, out, 1, bn=False, relu=False)
                top = b.add(blk, [x, shortcut])
            else:
                shortcut = (b.conv(f"{blk}_branch1", top, out, 1, stride=stride, relu=False)
                            if project else top)
                x = b.conv(f"{blk}_branch2a", top, mid, 1, stride=stride)
                x = b.conv(f"{blk}_branch2b", x, mid, 3, stage=stage)
                x = b.conv(f"{blk}_branch2c", x, out, 1, relu=False)
                top = b.relu(f"{blk}_relu", b.add(blk, [x, shortcut]))
    if preact:
        top = b.relu("post_relu", b.bn("post_bn", top))
    b.head(top, num_classes, b.channels[top])
    return b.build()


def make_resnet50(variant="baseline", width: float = 1.0, num_classes: int = 1000,
                  input_size: int = 224, batch: int = 1) -> NetSpec:
    """ResNet-50 with bottleneck stages res2-res5 of 3, 4, 6, 3 blocks.

    Stride sits on the first 1x1 of a downsampling block; projection
    shortcuts open every stage.  Only the 3x3 convs of each stage are
    grouped.
    """
    return _resnet("resnet50", (3, 4, 6, 3), variant, width, num_classes, input_size, False, batch)


def make_resnet200(variant="baseline", width: float = 1.0, num_classes: int = 1000,
                   input_size: int = 224, batch: int = 1) -> NetSpec:
    """Pre-activation ResNet-200 (3, 24, 36, 3 bottleneck blocks), stride on the 3x3."""
    return _resnet("resnet200", (3, 24, 36, 3), variant, width, num_classes, input_size, True, batch)


GOOGLENET_STAGES = ("conv1", "conv2", "incp3", "incp4", "incp5")
# name: (1x1, 3x3 reduce, 3x3, 5x5 reduce, 5x5, pool proj)
_INCEPTION = {
    "3a": (64, 96, 128, 16, 32, 32),
    "3b": (128, 128, 192, 32, 96, 64),
    "4a": (192, 96, 208, 16, 48, 64),
    "4b": (160, 112, 224, 24, 64, 64),
    "4c": (128, 128, 256, 24, 64, 64),
    "4d": (112, 144, 288, 32, 64, 64),
    "4e": (256, 160, 320, 32, 128, 128),
    "5a": (256, 160, 320, 32, 128, 128),
    "5b": (384, 192, 384, 48, 128, 128),
}


def make_googlenet(variant="baseline", width: float = 1.0, num_classes: int = 1000,
                   input_size: int = 224, batch: int = 1) -> NetSpec:
    """GoogLeNet main tower (no auxiliary classifiers, no LRN).

    Every conv is followed by batchnorm without scale/shift and relu.  All
    spatial branches (3x3 and 5x5) of an inception stage share that stage's
    group count.
    """
    sched, groups = _positions_groups(GOOGLENET_STAGES, variant)
    b = _Builder(f"googlenet-{sched.label}", (batch, 3, input_size, input_size), groups)
    w = lambda c: _scale(c, width)  # noqa: E731
    top = b.conv("conv1", INPUT, w(64), 7, stride=2, pad=3, stage="conv1", affine=False)
    top = b.pool("pool1", top)
    top = b.conv("conv2_reduce", top, w(64), 1, affine=False)
    top = b.conv("conv2", top, w(192), 3, stage="conv2", affine=False)
    top = b.pool("pool2", top)
    for mod, dims in _INCEPTION.items():
        if mod in ("4a", "5a"):
            top = b.pool(f"pool{int(mod[0]) - 1}", top)
        stage = f"incp{mod[0]}"
        c1, r3, c3, r5, c5, pp = (w(v) for v in dims)
        m = f"inception_{mod}"
        br1 = b.conv(f"{m}_1x1", top, c1, 1, affine=False)
        br3 = b.conv(f"{m}_3x3_reduce", top, r3, 1, affine=False)
        br3 = b.conv(f"{m}_3x3", br3, c3, 3, stage=stage, affine=False)
        br5 = b.conv(f"{m}_5x5_reduce", top, r5, 1, affine=False)
        br5 = b.conv(f"{m}_5x5", br5, c5, 5, stage=stage, affine=False)
        brp = b.pool(f"{m}_pool", top, k=3, stride=1, pad=1)
        brp = b.conv(f"{m}_pool_proj", brp, pp, 1, affine=False)
        top = b.concat(f"{m}_output", [br1, br3, br5, brp])
    b.head(top, num_classes, b.channels[top])
    return b.build()


def make_tiny_convnet(groups: int = 2, width: int = 8, num_classes: int = 2, in_channels: int = 1,
                      input_size: int = 8, batch: int = 1) -> NetSpec:
    """Three-conv root network: 3x3 conv, grouped 3x3 conv, 1x1 mixing conv, linear head."""
    b = _Builder(f"tiny-root-{groups}", (batch, in_channels, input_size, input_size),
                 {"s1": 1, "s2": groups})
    top = b.conv("conv1", INPUT, width, 3, stage="s1")
    top = b.conv("conv2", top, width, 3, stage="s2")
    top = b.conv("conv3", top, width, 1)
    b.head(top, num_classes, width)
    return b.build()


ARCHITECTURES = {
    "nin": (make_nin, NIN_STAGES),
    "resnet50": (make_resnet50, RESNET_STAGES),
    "resnet200": (make_resnet200, RESNET_STAGES),
    "googlenet": (make_googlenet, GOOGLENET_STAGES),
}


def make_arch(arch: str, variant="baseline", **kwargs) -> NetSpec:
    try:
        fn = ARCHITECTURES[arch.lower()][0]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None
    return fn(variant, **kwargs)


# --------------------------------------------------------------------------
# root-module rewrite

def _has_mixing_successor(net: NetSpec, name: str, cons: Mapping[str, list[str]]) -> bool:
    """True if every forward path from ``name`` reaches an ungrouped 1x1 conv or a
    linear layer before any other layer that is not batchnorm/relu/pool/concat."""
    frontier = list(cons.get(name, ()))
    if not frontier:
        return False
    seen: set[str] = set()
    while frontier:
        cur = frontier.pop()
        if cur in seen:
            continue
        seen.add(cur)
        l = net.layer(cur)
        if (l.kind == "conv" and l.kernel == (1, 1) and l.groups == 1) or l.kind == "linear":
            continue
        if l.kind in _PASS_THROUGH:
            nxt = cons.get(cur, ())
            if not nxt:
                return False
            frontier.extend(nxt)
            continue
        return False
    return True


def apply_root_transform(net: NetSpec, schedule, overrides: Mapping[str, int] | None = None) -> NetSpec:
    """Set filter groups on the spatial convs of ``net``.

    ``schedule`` gives one group count per spatial position (see
    :meth:`NetSpec.spatial_positions`).  ``overrides`` maps individual layer
    names to group counts and wins over the schedule, e.g. to give one
    inception branch its own cardinality.  Filter counts, kernels, strides
    and pads are left untouched.  Each grouped spatial conv must feed an
    ungrouped 1x1 conv (possibly through batchnorm/relu/pool/concat), which
    acts as the mixing layer of the root module.
    """
    positions = net.spatial_positions()
    sched = parse_variant(schedule, len(positions))
    target: dict[str, int] = {}
    for count, layers in zip(sched.counts, positions):
        for l in layers:
            target[l.name] = count
    for lname, g in (overrides or {}).items():
        l = net.layer(lname)
        if l.kind != "conv":
            raise TransformError(f"override target {lname!r} is not a conv layer")
        target[lname] = int(g)

    cons = net.consumers()
    for lname, g in target.items():
        if g > 1 and not _has_mixing_successor(net, lname, cons):
            raise TransformError(f"spatial conv {lname!r} is not followed by a 1x1 conv; cannot form a root module")

    layers = tuple(replace(l, groups=target[l.name]) if l.name in target else l for l in net.layers)
    label = sched.label if not overrides else f"{sched.label}+overrides"
    base = net.name.split("-")[0]
    return replace(net, layers=layers, name=f"{base}-{label}").validate()


def structural_diff(a: NetSpec, b: NetSpec) -> dict[str, dict[str, tuple]]:
    """Fields that differ per layer name (``name`` and order must agree)."""
    if a.names != b.names:
        raise ValueError("networks have different layer lists")
    diff: dict[str, dict[str, tuple]] = {}
    for la, lb in zip(a.layers, b.layers):
        da, db = asdict(la), asdict(lb)
        d = {k: (da[k], db[k]) for k in da if da[k] != db[k]}
        if d:
            diff[la.name] = d
    return diff

