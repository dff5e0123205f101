"""Inter-layer covariance analysis: sampling, ZCA whitening, heatmaps, dependency masks.

Every pixel of every image in a batch is one sample of a layer's channel
vector.  Paired layers of different spatial size are brought to a common
size by nearest-neighbour upsampling of the smaller map.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import Network

__all__ = [
    "SampleMatrix",
    "CovarianceMap",
    "upsample_nn",
    "collect_samples",
    "collect_pair",
    "cross_cov",
    "zca_whiten",
    "whitened_cross_cov",
    "correlation",
    "quantize",
    "render_heatmap",
    "read_pgm",
    "block_mask",
    "block_contrast",
    "dependency_mask",
    "noise_block_statistics",
    "zca_matrix",
    "ZCA_EPS",
]

ZCA_EPS = 1e-5


@dataclass(frozen=True)
class SampleMatrix:
    X: np.ndarray          # channels x samples
    layer: str = ""
    centered: bool = False

    def __post_init__(self) -> None:
        if self.X.ndim != 2:
            raise ValueError(f"sample matrix must be 2-D, got {self.X.shape}")

    @property
    def channels(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def center(self) -> "SampleMatrix":
        X = self.X.astype(np.float64)
        return SampleMatrix(X - X.mean(axis=1, keepdims=True), self.layer, True)

    @classmethod
    def from_featuremap(cls, fm: np.ndarray, layer: str = "", center: bool = True) -> "SampleMatrix":
        """Columns ordered by (image, row, column); rows are channels."""
        n, c, h, w = fm.shape
        sm = cls(np.ascontiguousarray(fm.transpose(1, 0, 2, 3)).reshape(c, n * h * w).astype(np.float64), layer)
        return sm.center() if center else sm


@dataclass(frozen=True)
class CovarianceMap:
    M: np.ndarray
    rows: str = ""
    cols: str = ""
    whitened: bool = False
    absolute: bool = False
    kind: str = "covariance"

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.M)):
            raise ValueError("covariance map has non-finite entries")

    def abs(self) -> "CovarianceMap":
        return CovarianceMap(np.abs(self.M), self.rows, self.cols, self.whitened, True, self.kind)


# ----------------------------------------------------------------------
# sampling

def upsample_nn(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsampling of (n, c, h, w) maps by integer factors."""
    h, w = x.shape[-2:]
    H, W = size
    if H < h or W < w or H % h or W % w:
        raise ValueError(f"cannot upsample {h}x{w} to {H}x{W} by an integer factor")
    return np.repeat(np.repeat(x, H // h, axis=-2), W // w, axis=-1)


def _network(model) -> Network:
    return model if isinstance(model, Network) else model.network()


def _activation(model, layer: str, inputs: np.ndarray, inject: Mapping[str, np.ndarray] | None) -> np.ndarray:
    net = _network(model)
    if layer not in net.net.names:
        raise KeyError(f"unknown layer {layer!r}")
    buffers = {k: v.copy() for k, v in net.buffers.items()}
    run = Network(net.net, net.params, buffers)
    return run.forward(inputs, mode="eval", inject=inject, stop=layer)[layer]


def collect_samples(model, layer: str, inputs: np.ndarray, size: tuple[int, int] | None = None,
                    inject: Mapping[str, np.ndarray] | None = None, center: bool = True) -> SampleMatrix:
    """Run ``inputs`` through ``model`` (a ModelState or Network) and sample ``layer``.

    ``size`` upsamples the featuremap first; ``inject`` overrides layer outputs.
    """
    fm = _activation(model, layer, inputs, inject)
    if size is not None and tuple(fm.shape[-2:]) != tuple(size):
        fm = upsample_nn(fm, size)
    return SampleMatrix.from_featuremap(fm, layer, center)


def collect_pair(model, layer1: str, layer2: str, inputs: np.ndarray,
                 inject: Mapping[str, np.ndarray] | None = None,
                 center: bool = True) -> tuple[SampleMatrix, SampleMatrix]:
    """Samples of two layers with the smaller featuremap upsampled to the larger."""
    a = _activation(model, layer1, inputs, inject)
    b = _activation(model, layer2, inputs, inject)
    size = max(a.shape[-2:], b.shape[-2:])
    if tuple(a.shape[-2:]) != size:
        a = upsample_nn(a, size)
    if tuple(b.shape[-2:]) != size:
        b = upsample_nn(b, size)
    return SampleMatrix.from_featuremap(a, layer1, center), SampleMatrix.from_featuremap(b, layer2, center)


# ----------------------------------------------------------------------
# covariance and whitening

def cross_cov(X1: SampleMatrix, X2: SampleMatrix) -> CovarianceMap:
    """``X1 X2^T / (N - 1)`` for centered sample matrices."""
    if X1.n != X2.n:
        raise ValueError(f"sample counts differ: {X1.n} vs {X2.n}")
    if not (X1.centered and X2.centered):
        raise ValueError("cross_cov expects centered samples; call .center() first")
    if X1.n < 2:
        raise ValueError("need at least two samples")
    M = (X1.X @ X2.X.T) / (X1.n - 1)
    return CovarianceMap(M, X1.layer, X2.layer)


def zca_matrix(C: np.ndarray, eps: float = ZCA_EPS, layer: str = "") -> np.ndarray:
    """``P (D + eps)^(-1/2) P^T`` for the covariance ``C = P D P^T``."""
    try:
        d, P = np.linalg.eigh(C)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"eigendecomposition failed for layer {layer!r}: {e}") from None
    d = np.clip(d, 0.0, None)
    W = (P * (1.0 / np.sqrt(d + eps))) @ P.T
    return (W + W.T) / 2


def zca_whiten(X: SampleMatrix, eps: float = ZCA_EPS) -> tuple[np.ndarray, SampleMatrix]:
    """ZCA transform ``W = P (D + eps)^(-1/2) P^T`` of the sample covariance ``P D P^T``."""
    if not X.centered:
        raise ValueError("zca_whiten expects centered samples")
    if not np.all(np.isfinite(X.X)):
        raise ValueError(f"non-finite samples in layer {X.layer!r}")
    if X.n <= X.channels:
        raise ValueError(f"need more samples ({X.n}) than channels ({X.channels}) to whiten")
    W = zca_matrix((X.X @ X.X.T) / (X.n - 1), eps, X.layer)
    return W, SampleMatrix(W @ X.X, X.layer, True)


def whitened_cross_cov(X1: SampleMatrix, X2: SampleMatrix, eps: float = ZCA_EPS) -> CovarianceMap:
    """Cross-covariance of the ZCA-whitened sides: ``cov(W1 X1, W2 X2)``."""
    _, w1 = zca_whiten(X1, eps)
    _, w2 = zca_whiten(X2, eps)
    m = cross_cov(w1, w2)
    return CovarianceMap(m.M, X1.layer, X2.layer, whitened=True)


def correlation(X1: SampleMatrix, X2: SampleMatrix) -> CovarianceMap:
    """Covariance after scaling every row to unit variance (Pearson correlation)."""
    def norm(x: SampleMatrix) -> SampleMatrix:
        sd = x.X.std(axis=1, ddof=1, keepdims=True)
        return SampleMatrix(x.X / np.where(sd > 0, sd, 1.0), x.layer, True)
    m = cross_cov(norm(X1), norm(X2))
    return CovarianceMap(m.M, X1.layer, X2.layer, kind="correlation")


# ----------------------------------------------------------------------
# heatmaps (binary PGM)

def quantize(M: np.ndarray) -> np.ndarray:
    """``|M|`` scaled so the largest entry maps to 255, rounded to uint8."""
    a = np.abs(np.asarray(M, dtype=np.float64))
    top = a.max() if a.size else 0.0
    if top == 0:
        return np.zeros(a.shape, np.uint8)
    return np.rint(a * (255.0 / top)).astype(np.uint8)


def render_heatmap(cmap: CovarianceMap | np.ndarray, path: str | os.PathLike) -> np.ndarray:
    """Write an 8-bit P5 PGM (rows = first layer's channels); returns the pixels."""
    M = cmap.M if isinstance(cmap, CovarianceMap) else cmap
    img = quantize(M)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
    return img


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pix.reshape(h, w).copy()


# ----------------------------------------------------------------------
# block structure

def block_mask(rows: int, cols: int, groups: int) -> np.ndarray:
    """Boolean mask of the ``groups`` diagonal blocks of a rows x cols matrix."""
    if rows % groups or cols % groups:
        raise ValueError(f"{rows}x{cols} does not split into {groups} blocks")
    rb, cb = rows // groups, cols // groups
    return (np.arange(rows)[:, None] // rb) == (np.arange(cols)[None, :] // cb)


def block_contrast(M: np.ndarray, groups: int) -> tuple[float, float]:
    """Mean ``|entry|`` off the diagonal blocks and on them."""
    mask = block_mask(*M.shape, groups)
    a = np.abs(M)
    off = float(a[~mask].mean()) if (~mask).any() else 0.0
    return off, float(a[mask].mean())


def dependency_mask(model, src: str, dst: str, inputs: np.ndarray, seed: int = 0,
                    scale: float = 10.0) -> np.ndarray:
    """Which ``dst`` channels change when one ``src`` channel is perturbed.

    Returns a boolean (c_dst, c_src) matrix; entry ``[o, i]`` is true if
    adding noise to channel ``i`` of ``src`` changes any value of channel
    ``o`` of ``dst``.
    """
    # float64 throughout, so a tiny weight times the probe is never lost in rounding
    net = _network(model)
    net = Network(net.net, {k: v.astype(np.float64) for k, v in net.params.items()},
                  {k: v.astype(np.float64) for k, v in net.buffers.items()})
    inputs = np.asarray(inputs, np.float64)
    base_src = _activation(net, src, inputs, None)
    base_dst = _activation(net, dst, inputs, {src: base_src})
    rng = np.random.default_rng(seed)
    c_src = base_src.shape[1]
    mask = np.zeros((base_dst.shape[1], c_src), bool)
    for i in range(c_src):
        pert = base_src.copy()
        # fixed magnitude with random sign: a near-zero draw could vanish in rounding
        pert[:, i] += (scale * rng.choice([-1.0, 1.0], size=pert[:, i].shape)).astype(pert.dtype)
        out = _activation(net, dst, inputs, {src: pert})
        mask[:, i] = np.any(out != base_dst, axis=(0, 2, 3))
    return mask


def noise_block_statistics(model, src: str, dst: str, groups: int, n_images: int = 2048, seed: int = 0,
                           mode: str = "whitened", eps: float = ZCA_EPS, chunk: int = 32) -> dict:
    """Drive ``src`` with unit-variance independent-channel noise and measure block contrast.

    ``src`` is replaced by iid normal noise and samples of ``src`` and
    ``dst`` are paired pixel by pixel.  Second moments are accumulated over
    chunks of ``chunk`` images, so memory does not grow with ``n_images``.
    ``mode`` is ``"whitened"``, ``"covariance"`` or ``"correlation"``.
    """
    if mode not in ("whitened", "covariance", "correlation"):
        raise ValueError(f"unknown mode {mode!r}")
    net = _network(model)
    rng = np.random.default_rng(seed)
    c_in = net.net.input_shape[1:]
    S1 = S2 = S11 = S22 = S12 = None
    N = 0
    for start in range(0, n_images, chunk):
        b = min(chunk, n_images - start)
        shapes = net.net.shapes((b, *c_in))
        noise = rng.standard_normal(shapes[src]).astype(np.float32)
        x = np.zeros((b, *c_in), np.float32)
        X1, X2 = collect_pair(net, src, dst, x, inject={src: noise}, center=False)
        A, B = X1.X, X2.X
        if S1 is None:
            S1, S2 = np.zeros(len(A)), np.zeros(len(B))
            S11, S22, S12 = np.zeros((len(A),) * 2), np.zeros((len(B),) * 2), np.zeros((len(A), len(B)))
        S1 += A.sum(1)
        S2 += B.sum(1)
        S11 += A @ A.T
        S22 += B @ B.T
        S12 += A @ B.T
        N += A.shape[1]
    C11 = (S11 - np.outer(S1, S1) / N) / (N - 1)
    C22 = (S22 - np.outer(S2, S2) / N) / (N - 1)
    C12 = (S12 - np.outer(S1, S2) / N) / (N - 1)
    if mode == "whitened":
        M = zca_matrix(C11, eps, src) @ C12 @ zca_matrix(C22, eps, dst).T
    elif mode == "correlation":
        d1, d2 = np.sqrt(np.diag(C11)), np.sqrt(np.diag(C22))
        M = C12 / np.outer(np.where(d1 > 0, d1, 1), np.where(d2 > 0, d2, 1))
    else:
        M = C12
    cm = CovarianceMap(M, src, dst, whitened=mode == "whitened", kind="correlation" if mode == "correlation" else "covariance")
    off, on = block_contrast(M, groups)
    return {"map": cm, "off_block": off, "in_block": on, "ratio": off / on if on else float("inf"), "n": N}
