"""Analytic multiply-add and parameter counts over a :class:`NetSpec`.

One FLOP is one multiply-add.  By default only convolutions and linear
layers cost FLOPs; ``strict=True`` also charges batchnorm, relu, pooling,
residual adds and softmax one operation per element (or window tap).
Parameter totals include batchnorm scale/shift and the classifier unless
switched off.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

from .arch import LayerSpec, NetSpec
from .ops import ConfigError, conv_out_size

__all__ = ["CostRow", "CostReport", "conv_cost", "linear_cost", "net_cost", "compare", "CSV_COLUMNS"]

CSV_COLUMNS = ("layer", "flops", "params", "out_n", "out_c", "out_h", "out_w")


def conv_cost(layer: LayerSpec, in_shape: Sequence[int]) -> tuple[int, int]:
    """Per-image ``(flops, params)`` of a (grouped) convolution.

    flops = h_out * w_out * c_out * kh * kw * c_in / g, params = c_out * kh * kw * c_in / g
    (+ c_out with a bias).
    """
    _, c1, h, w = in_shape
    if c1 % layer.groups or layer.out % layer.groups:
        raise ConfigError(f"layer {layer.name!r}: channels {c1}->{layer.out} not divisible by {layer.groups} groups")
    kh, kw = layer.kernel
    ho = conv_out_size(h, kh, layer.stride, layer.pad)
    wo = conv_out_size(w, kw, layer.stride, layer.pad)
    per_filter = kh * kw * (c1 // layer.groups)
    params = layer.out * per_filter + (layer.out if layer.bias else 0)
    return ho * wo * layer.out * per_filter, params


def linear_cost(layer: LayerSpec, in_shape: Sequence[int]) -> tuple[int, int]:
    """A linear layer costs like a 1x1 conv on a 1x1 map of all input features."""
    _, c, h, w = in_shape
    fan_in = c * h * w
    return fan_in * layer.out, fan_in * layer.out + (layer.out if layer.bias else 0)


@dataclass
class CostRow:
    name: str
    kind: str
    flops: int
    params: int
    out_shape: tuple[int, int, int, int]
    flops_ratio: float | None = None
    params_ratio: float | None = None


@dataclass
class CostReport:
    rows: list[CostRow]
    net_name: str = "net"
    baseline_flops: int | None = None
    baseline_params: int | None = None
    baseline_name: str | None = None
    settings: dict = field(default_factory=dict)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops_ratio(self) -> float | None:
        return None if not self.baseline_flops else self.total_flops / self.baseline_flops

    @property
    def params_ratio(self) -> float | None:
        return None if not self.baseline_params else self.total_params / self.baseline_params

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        has_ratio = self.baseline_flops is not None
        head = f"{'layer':<32}{'flops':>16}{'params':>14}  {'out shape':<20}"
        if has_ratio:
            head += f"{'flops x':>9}{'params x':>10}"
        lines = [f"# {self.net_name}", head, "-" * len(head)]
        for r in self.rows:
            line = f"{r.name:<32}{r.flops:>16,}{r.params:>14,}  {'x'.join(map(str, r.out_shape)):<20}"
            if has_ratio:
                line += f"{_fmt_ratio(r.flops_ratio):>9}{_fmt_ratio(r.params_ratio):>10}"
            lines.append(line)
        lines.append("-" * len(head))
        lines.append(f"{'total':<32}{self.total_flops:>16,}{self.total_params:>14,}")
        if has_ratio:
            fr, pr = self.flops_ratio, self.params_ratio
            lines.append(f"baseline {self.baseline_name}: flops {self.baseline_flops:,}  params {self.baseline_params:,}")
            lines.append(f"flops  ratio {fr:.4f}  ({(fr - 1) * 100:+.1f}% vs baseline)")
            lines.append(f"params ratio {pr:.4f}  ({(pr - 1) * 100:+.1f}% vs baseline)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in self.rows:
            wr.writerow([r.name, r.flops, r.params, *r.out_shape])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, net_name: str = "net") -> "CostReport":
        rd = csv.DictReader(io.StringIO(text))
        if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {rd.fieldnames}")
        rows = [CostRow(d["layer"], "", int(d["flops"]), int(d["params"]),
                        (int(d["out_n"]), int(d["out_c"]), int(d["out_h"]), int(d["out_w"])))
                for d in rd]
        return cls(rows, net_name)


def _fmt_ratio(v: float | None) -> str:
    return "-" if v is None else f"{v:.3f}"


_FREE = ("relu", "pool", "softmax", "concat", "add")


def net_cost(net: NetSpec, input_shape: Sequence[int] | None = None, *, include_bn: bool = True,
             include_classifier: bool = True, strict: bool = False) -> CostReport:
    """Per-layer cost table for ``net``.

    Conv, linear and batchnorm layers always get a row; relu/pool/add/
    concat/softmax rows appear only in strict mode.  ``include_classifier``
    drops layers tagged ``stage="classifier"``.
    """
    shp = net.shapes(input_shape)
    rows: list[CostRow] = []
    for l in net.layers:
        if not include_classifier and l.stage == "classifier":
            continue
        ins = shp[l.inputs[0]]
        out = shp[l.name]
        try:
            if l.kind == "conv":
                flops, params = conv_cost(l, ins)
            elif l.kind == "linear":
                flops, params = linear_cost(l, ins)
            elif l.kind == "batchnorm":
                flops = _numel(out) if strict else 0
                params = 2 * out[1] if (l.affine and include_bn) else 0
            elif l.kind in _FREE:
                if not strict:
                    continue
                flops, params = _strict_flops(l, ins, out), 0
            else:
                raise ConfigError(f"cannot cost layer kind {l.kind!r}")
        except ValueError as e:
            raise type(e)(f"layer {l.name!r}: {e}") from None
        rows.append(CostRow(l.name, l.kind, flops, params, out))
    settings = dict(include_bn=include_bn, include_classifier=include_classifier, strict=strict)
    return CostReport(rows, net.name, settings=settings)


def _numel(shape) -> int:
    _, c, h, w = shape
    return c * h * w


def _strict_flops(l: LayerSpec, ins, out) -> int:
    if l.kind == "pool":
        if l.mode == "global":
            return _numel(ins)
        return _numel(out) * l.kernel[0] * l.kernel[1]
    if l.kind == "softmax":
        return _numel(out)
    if l.kind == "concat":
        return 0
    return _numel(out)


def compare(baseline: CostReport, variant: CostReport) -> CostReport:
    """Annotate ``variant`` rows with variant/baseline ratios (layer names must agree).

    A row whose baseline value is zero gets ratio 1 when the variant is also
    zero.
    """
    bnames = [r.name for r in baseline.rows]
    vnames = [r.name for r in variant.rows]
    if bnames != vnames:
        missing = sorted(set(bnames) ^ set(vnames))
        raise ValueError(f"layer names differ between reports: {missing[:5] or 'order differs'}")
    rows = [replace(v, flops_ratio=_ratio(v.flops, b.flops), params_ratio=_ratio(v.params, b.params))
            for b, v in zip(baseline.rows, variant.rows)]
    return CostReport(rows, variant.net_name, baseline.total_flops, baseline.total_params,
                      baseline.net_name, dict(variant.settings))


def _ratio(v: int, b: int) -> float:
    if b == 0:
        return 1.0 if v == 0 else float("inf")
    return v / b
