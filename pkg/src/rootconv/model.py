"""Execute a :class:`NetSpec` forward and backward with explicit parameters."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import ops
from .arch import INPUT, NetSpec
from .tensor import count_macs

__all__ = ["Network", "DivergenceError", "param_names"]


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


def param_names(net: NetSpec) -> list[tuple[str, tuple[int, ...]]]:
    """``(name, shape)`` of every learnable tensor, in layer order."""
    net = net.validate()
    out = []
    shp = net.shapes()
    for l in net.layers:
        if l.kind == "conv":
            out.append((f"{l.name}.weight", (l.out, l.in_channels // l.groups, *l.kernel)))
            if l.bias:
                out.append((f"{l.name}.bias", (l.out,)))
        elif l.kind == "linear":
            out.append((f"{l.name}.weight", (l.out, l.in_channels)))
            if l.bias:
                out.append((f"{l.name}.bias", (l.out,)))
        elif l.kind == "batchnorm" and l.affine:
            c = shp[l.name][1]
            out.append((f"{l.name}.gamma", (c,)))
            out.append((f"{l.name}.beta", (c,)))
    return out


class Network:
    """Runs a network over ``params`` (learnables) and ``buffers`` (BN running stats).

    ``forward`` keeps the intermediate values needed by ``backward``.  In
    training mode batchnorm running statistics in ``buffers`` are updated in
    place.
    """

    def __init__(self, net: NetSpec, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        self.net = net.validate()
        self.params = params
        self.buffers = buffers
        out = self.net.layer(self.net.output)
        self.logits_layer = out.inputs[0] if out.kind == "softmax" else out.name
        self.layer_macs: dict[str, int] = {}
        self._acts: dict[str, np.ndarray] = {}
        self._cache: dict[str, object] = {}

    # ------------------------------------------------------------------
    def forward(self, x: np.ndarray, mode: str = "train", inject: Mapping[str, np.ndarray] | None = None,
                stop: str | None = None, count: bool = False) -> dict[str, np.ndarray]:
        """Run layers in order and return every activation by layer name.

        ``inject`` replaces the output of the named layers with the given
        arrays (layers feeding only injected layers still run).  ``stop``
        ends the pass after that layer.  With ``count`` the multiply-adds of
        each layer are recorded in ``layer_macs``.
        """
        inject = inject or {}
        acts: dict[str, np.ndarray] = {INPUT: x}
        self._cache = {}
        self.layer_macs = {}
        needed = self._needed(stop, inject) if (inject and stop) else None
        for l in self.net.layers:
            if needed is not None and l.name not in needed:
                continue
            if l.name in inject:
                acts[l.name] = inject[l.name]
            elif count:
                with count_macs() as c:
                    acts[l.name] = self._forward_layer(l, [acts[s] for s in l.inputs], mode)
                self.layer_macs[l.name] = c.total
            else:
                acts[l.name] = self._forward_layer(l, [acts[s] for s in l.inputs], mode)
            if l.name == stop:
                break
        self._acts = acts
        return acts

    def _needed(self, stop: str, inject: Mapping[str, np.ndarray]) -> set[str]:
        # layers that ``stop`` depends on, not looking behind injected outputs
        need, todo = set(), [stop]
        while todo:
            name = todo.pop()
            if name in need or name == INPUT:
                continue
            need.add(name)
            if name not in inject:
                todo.extend(self.net.layer(name).inputs)
        return need

    def logits(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        acts = self.forward(x, mode, stop=self.logits_layer)
        y = acts[self.logits_layer]
        return y.reshape(y.shape[0], -1)

    def _forward_layer(self, l, ins, mode):
        p = self.params
        x = ins[0]
        if l.kind == "conv":
            w = ops.ConvWeights(p[f"{l.name}.weight"], p.get(f"{l.name}.bias"), l.groups)
            y, cols = ops.conv_grouped_forward(x, w, l.stride, l.pad, return_cols=True)
            self._cache[l.name] = (w, cols)
            return y
        if l.kind == "batchnorm":
            st = ops.BatchNormState(self.buffers[f"{l.name}.running_mean"], self.buffers[f"{l.name}.running_var"],
                                    p.get(f"{l.name}.gamma"), p.get(f"{l.name}.beta"))
            y, cache = ops.batchnorm_forward(x, st, mode)
            self.buffers[f"{l.name}.running_mean"] = st.running_mean
            self.buffers[f"{l.name}.running_var"] = st.running_var
            self._cache[l.name] = cache
            return y
        if l.kind == "relu":
            return np.maximum(x, 0)
        if l.kind == "pool":
            if l.mode == "global":
                return ops.global_avg_pool_forward(x)
            if l.mode == "max":
                y, idx = ops.max_pool_forward(x, l.kernel, l.stride, l.pad)
                self._cache[l.name] = idx
                return y
            return ops.avg_pool_forward(x, l.kernel, l.stride, l.pad)
        if l.kind == "linear":
            y = ops.linear_forward(x, p[f"{l.name}.weight"], p.get(f"{l.name}.bias"))
            return y.reshape(y.shape[0], -1, 1, 1)
        if l.kind == "concat":
            return np.concatenate(ins, axis=1)
        if l.kind == "add":
            y = ins[0].copy()
            for other in ins[1:]:
                y += other
            return y
        if l.kind == "softmax":
            return ops.softmax(x.reshape(x.shape[0], -1)).reshape(x.shape)
        raise ValueError(f"cannot execute layer kind {l.kind!r}")

    # ------------------------------------------------------------------
    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter given d(loss)/d(logits) from the last forward."""
        acts = self._acts
        start = self.logits_layer
        grads: dict[str, np.ndarray] = {}
        gact: dict[str, np.ndarray] = {start: grad_logits.reshape(acts[start].shape)}
        names = self.net.names
        for l in reversed(self.net.layers[:names.index(start) + 1]):
            g = gact.pop(l.name, None)
            if g is None:
                continue
            gins = self._backward_layer(l, g, [acts[s] for s in l.inputs], acts[l.name], grads)
            for src, gi in zip(l.inputs, gins):
                if src == INPUT or gi is None:
                    continue
                if src in gact:
                    gact[src] = gact[src] + gi
                else:
                    gact[src] = gi
        return grads

    def _backward_layer(self, l, g, ins, out, grads):
        x = ins[0]
        if l.kind == "conv":
            w, cols = self._cache[l.name]
            gx, gw, gb = ops.conv_grouped_backward(x, w, g, l.stride, l.pad, cols=cols)
            grads[f"{l.name}.weight"] = gw
            if gb is not None:
                grads[f"{l.name}.bias"] = gb
            return [gx]
        if l.kind == "batchnorm":
            gx, gg, gb = ops.batchnorm_backward(g, self._cache[l.name])
            if gg is not None:
                grads[f"{l.name}.gamma"] = gg
                grads[f"{l.name}.beta"] = gb
            return [gx]
        if l.kind == "relu":
            return [np.where(out > 0, g, 0).astype(g.dtype)]
        if l.kind == "pool":
            if l.mode == "global":
                return [ops.global_avg_pool_backward(g, x.shape)]
            if l.mode == "max":
                return [ops.max_pool_backward(g, self._cache[l.name], x.shape, l.kernel, l.stride, l.pad)]
            return [ops.avg_pool_backward(g, x.shape, l.kernel, l.stride, l.pad)]
        if l.kind == "linear":
            has_bias = f"{l.name}.bias" in self.params
            gx, gw, gb = ops.linear_backward(x, self.params[f"{l.name}.weight"], g.reshape(g.shape[0], -1), has_bias)
            grads[f"{l.name}.weight"] = gw
            if gb is not None:
                grads[f"{l.name}.bias"] = gb
            return [gx]
        if l.kind == "concat":
            splits = np.cumsum([a.shape[1] for a in ins])[:-1]
            return np.split(g, splits, axis=1)
        if l.kind == "add":
            return [g] * len(ins)
        raise ValueError(f"cannot differentiate layer kind {l.kind!r}")

    def first_nonfinite(self) -> str | None:
        """Name of the first layer whose last forward output contains NaN/inf."""
        for l in self.net.layers:
            a = self._acts.get(l.name)
            if a is not None and not np.all(np.isfinite(a)):
                return l.name
        return None
