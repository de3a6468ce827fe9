"""Slow, independent reference implementations the tests compare against.

Each oracle avoids the library code path it checks: loops instead of
vectorised kernels, BFS instead of scipy labelling, pair counting instead of
ranks.
"""

from collections import deque
from itertools import product

import numpy as np

NEIGHBOURS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
NEIGHBOURS_26 = [o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]


# -------------------------------------------------------------- morphology


def flood_fill_components(binary):
    """6-connected components as boolean masks, in raster order of their first voxel."""
    binary = np.asarray(binary, dtype=bool)
    seen = np.zeros_like(binary)
    comps = []
    for start in zip(*np.nonzero(binary)):
        if seen[start]:
            continue
        comp = np.zeros_like(binary)
        queue = deque([start])
        seen[start] = True
        while queue:
            v = queue.popleft()
            comp[v] = True
            for d in NEIGHBOURS_6:
                w = tuple(a + b for a, b in zip(v, d))
                if all(0 <= w[i] < binary.shape[i] for i in range(3)) and binary[w] and not seen[w]:
                    seen[w] = True
                    queue.append(w)
        comps.append(comp)
    return comps


def brute_dilate(binary):
    out = binary.copy()
    for z, y, x in zip(*np.nonzero(binary)):
        for dz, dy, dx in NEIGHBOURS_26:
            w = (z + dz, y + dy, x + dx)
            if all(0 <= w[i] < binary.shape[i] for i in range(3)):
                out[w] = True
    return out


def brute_erode(binary):
    """A voxel survives only if it and all 26 neighbours are set (outside counts as unset)."""
    out = np.zeros_like(binary)
    for z, y, x in zip(*np.nonzero(binary)):
        keep = True
        for dz, dy, dx in NEIGHBOURS_26:
            w = (z + dz, y + dy, x + dx)
            if not all(0 <= w[i] < binary.shape[i] for i in range(3)) or not binary[w]:
                keep = False
                break
        out[z, y, x] = keep
    return out


def brute_closing(binary, iterations=2):
    pad = iterations
    b = np.pad(np.asarray(binary, dtype=bool), pad)
    for _ in range(iterations):
        b = brute_dilate(b)
    for _ in range(iterations):
        b = brute_erode(b)
    return b[pad:-pad, pad:-pad, pad:-pad]


# ------------------------------------------------------------ convolution


def naive_conv3d(x, w, bias=None, stride=1, pad=None):
    """Direct 7-deep loop cross-correlation with zero padding."""
    c_in, D, H, W = x.shape
    c_out, _, kd, kh, kw = w.shape
    pad = kd // 2 if pad is None else pad
    od, oh, ow = ((n + 2 * pad - k) // stride + 1 for n, k in zip((D, H, W), (kd, kh, kw)))
    out = np.zeros((c_out, od, oh, ow))
    for o in range(c_out):
        for z in range(od):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(c_in):
                        for a in range(kd):
                            for b in range(kh):
                                for e in range(kw):
                                    iz, iy, ix = z * stride + a - pad, y * stride + b - pad, xx * stride + e - pad
                                    if 0 <= iz < D and 0 <= iy < H and 0 <= ix < W:
                                        acc += w[o, c, a, b, e] * x[c, iz, iy, ix]
                    out[o, z, y, xx] = acc
    return out


# --------------------------------------------------------------- attention


def dense_window_attention(grid, p, shifted):
    """Attention over the whole (rolled) grid as one dense T x T problem.

    Pairs in different windows, or (when shifted) whose cyclic wrap status
    differs along any axis, get -inf before the softmax.  Returns the output
    grid and the dense weights of shape (heads, T, T) in raster order of the
    rolled grid, together with each token's window index.
    """
    grid = np.asarray(grid, dtype=np.float64)
    dims = grid.shape[:3]
    window = np.array(p.window)
    shifts = window // 2 if shifted else np.zeros(3, dtype=int)
    rolled = np.roll(grid, tuple(-s for s in shifts), axis=(0, 1, 2))
    coords = np.array(list(np.ndindex(*dims)))  # rolled-grid coordinates, raster order
    tokens = rolled.reshape(-1, grid.shape[3])
    win = coords // window
    local = coords % window
    wrapped = coords + shifts >= np.array(dims)  # token came round the end of an axis

    T = coords.shape[0]
    same_window = np.all(win[:, None] == win[None, :], axis=-1)
    same_wrap = np.all(wrapped[:, None] == wrapped[None, :], axis=-1)
    allowed = same_window & same_wrap

    d = p.w_q.shape[1]
    dh = d // p.heads
    P, M1, M2 = p.window
    out = np.zeros((T, d))
    weights = np.zeros((p.heads, T, T))
    for h in range(p.heads):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = tokens @ p.w_q[:, sl], tokens @ p.w_k[:, sl], tokens @ p.w_v[:, sl]
        scores = np.full((T, T), -np.inf)
        for i in range(T):
            for j in range(T):
                if allowed[i, j]:
                    rel = local[i] - local[j] + np.array([P - 1, M1 - 1, M2 - 1])
                    idx = (rel[0] * (2 * M1 - 1) + rel[1]) * (2 * M2 - 1) + rel[2]
                    scores[i, j] = q[i] @ k[j] / np.sqrt(dh) + p.bias_table[idx, h]
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        weights[h] = e / e.sum(axis=1, keepdims=True)
        out[:, sl] = weights[h] @ v
    if p.w_o is not None:
        out = out @ p.w_o
    out = np.roll(out.reshape(*dims, -1), tuple(shifts), axis=(0, 1, 2))
    win_index = (win[:, 0] * (dims[1] // M1) + win[:, 1]) * (dims[2] // M2) + win[:, 2]
    local_index = (local[:, 0] * M1 + local[:, 1]) * M2 + local[:, 2]
    return out, weights, win_index, local_index


# ------------------------------------------------------------ region graph


def brute_regions(labels):
    """Liver plus tumour components sorted by (-size, label, first raster voxel)."""
    tumours = []
    for lab in sorted(set(np.unique(labels)) - {0, 1}):
        for comp in flood_fill_components(labels == lab):
            first = int(np.flatnonzero(comp.ravel())[0])
            tumours.append((-int(comp.sum()), int(lab), first, comp))
    tumours.sort(key=lambda t: t[:3])
    return [(1, labels == 1)] + [(lab, comp) for _, lab, _, comp in tumours]


def brute_gap(f, region):
    total = np.zeros(f.shape[0])
    count = 0
    for idx in np.ndindex(region.shape):
        if region[idx]:
            total += f[(slice(None),) + idx]
            count += 1
    return total / count


# ----------------------------------------------------------------- metrics


def pair_count_auc(scores, positive):
    """Fraction of (positive, negative) pairs ranked correctly; ties count 1/2."""
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


# ------------------------------------------------------------- gradients


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic, numeric, floor=1e-8):
    """``|a - n| / max(|a|, |n|, floor)`` in the Euclidean norm over all entries."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


# ---------------------------------------------------------------- GW grid


def gw_grid_optimum_2x2(Ss, St, step=1e-4):
    """Exhaustive minimum over 2x2 couplings with uniform marginals.

    Every such coupling is ``[[t, 1/2 - t], [1/2 - t, t]]`` for t in [0, 1/2];
    the quadruple sum is evaluated directly at each grid point.
    """
    ts = np.arange(0.0, 0.5 + step / 2, step)
    diff2 = (Ss[:, :, None, None] - St[None, None, :, :]) ** 2  # [i, j, k, l]
    pis = np.empty((ts.size, 2, 2))
    pis[:, 0, 0] = pis[:, 1, 1] = ts
    pis[:, 0, 1] = pis[:, 1, 0] = 0.5 - ts
    return float(np.einsum("ijkl,tik,tjl->t", diff2, pis, pis).min())


def gw_quadruple_loop(Ss, St, pi):
    total = 0.0
    n, m = pi.shape
    for i in range(n):
        for j in range(n):
            for k in range(m):
                for l in range(m):
                    total += (Ss[i, j] - St[k, l]) ** 2 * pi[i, k] * pi[j, l]
    return total
