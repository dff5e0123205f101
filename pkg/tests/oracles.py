"""Slow, obviously-correct reference implementations used only by the tests."""
import numpy as np


def naive_gemm(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def direct_conv(x, filters, bias=None, stride=1, pad=0, groups=1):
    """Seven nested loops: image, filter, out row, out col, channel, kernel row, kernel col."""
    n, c1, h, w = x.shape
    c2, cg, kh, kw = filters.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    per_out = c2 // groups
    y = np.zeros((n, c2, ho, wo))
    for b in range(n):
        for o in range(c2):
            g = o // per_out
            for oy in range(ho):
                for ox in range(wo):
                    s = 0.0 if bias is None else float(bias[o])
                    for c in range(cg):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky - pad
                                ix = ox * stride + kx - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    s += float(x[b, g * cg + c, iy, ix]) * float(filters[o, c, ky, kx])
                    y[b, o, oy, ox] = s
    return y


def embed_dense(filters, groups):
    """Grouped filters (c2, c1/g, kh, kw) placed on the diagonal blocks of a dense (c2, c1, kh, kw)."""
    c2, cg, kh, kw = filters.shape
    full = np.zeros((c2, cg * groups, kh, kw), dtype=filters.dtype)
    per_out = c2 // groups
    for o in range(c2):
        g = o // per_out
        full[o, g * cg:(g + 1) * cg] = filters[o]
    return full


def naive_pool(x, k, s, p, mode):
    n, c, h, w = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    y = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    vals = []
                    for ky in range(k):
                        for kx in range(k):
                            iy, ix = oy * s + ky - p, ox * s + kx - p
                            inside = 0 <= iy < h and 0 <= ix < w
                            if mode == "max" and inside:
                                vals.append(x[b, ch, iy, ix])
                            elif mode == "avg":
                                vals.append(x[b, ch, iy, ix] if inside else 0.0)
                    y[b, ch, oy, ox] = max(vals) if mode == "max" else sum(vals) / (k * k)
    return y


def numerical_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def denman_beavers_inv_sqrt(c, iters=60):
    """Inverse square root of an SPD matrix: iterate to S with S @ S = C, return S^-1."""
    y = c.copy()
    z = np.eye(len(c))
    for _ in range(iters):
        y, z = (y + np.linalg.inv(z)) / 2, (z + np.linalg.inv(y)) / 2
    return z
