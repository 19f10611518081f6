"""Compiled emission-absorption raymarcher over a 28-channel radiance grid.

Channel 0 holds pre-activation density, channels 1..27 hold degree-2 SH
coefficients (9 per color). Rays are split into ``sinks.shape[0]`` static
chunks; each chunk owns one gradient sink so results depend on the chunk
count only, never on thread scheduling.
"""

import numpy as np
from numba import njit, prange

GRAD_NONE = 0
GRAD_UPSTREAM = 1
GRAD_MSE = 2

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C20 = 1.0925484305920792
_C21 = -1.0925484305920792
_C22 = 0.31539156525252005
_C23 = -1.0925484305920792
_C24 = 0.5462742152960396


@njit(cache=True)
def _basis(d, out):
    x, y, z = d[0], d[1], d[2]
    out[0] = _C0
    out[1] = -_C1 * y
    out[2] = _C1 * z
    out[3] = -_C1 * x
    out[4] = _C20 * x * y
    out[5] = _C21 * y * z
    out[6] = _C22 * (2.0 * z * z - x * x - y * y)
    out[7] = _C23 * x * z
    out[8] = _C24 * (x * x - y * y)


@njit(cache=True)
def _cell(p, lo, scale, dims, base, frac):
    for a in range(3):
        g = (p[a] - lo[a]) * scale[a]
        top = dims[a] - 1.0
        if g < 0.0:
            g = 0.0
        elif g > top:
            g = top
        b = int(np.floor(g))
        if b > dims[a] - 2:
            b = dims[a] - 2
        base[a] = b
        frac[a] = g - b


@njit(cache=True)
def _corners(base, frac, dims, idx, w):
    sy = dims[2]
    sx = dims[1] * dims[2]
    origin = base[0] * sx + base[1] * sy + base[2]
    n = 0
    for a in range(2):
        wa = frac[0] if a else 1.0 - frac[0]
        for b in range(2):
            wb = frac[1] if b else 1.0 - frac[1]
            for c in range(2):
                wc = frac[2] if c else 1.0 - frac[2]
                idx[n] = origin + a * sx + b * sy + c
                w[n] = wa * wb * wc
                n += 1


@njit(cache=True)
def _trace(vals, dims, lo, scale, relu, o, d, tn, tf, n_samples, u, r, bg,
           sig, alpha, trans, col, mask, base_buf, frac_buf, active, basis,
           idx, w, feat, p, base, frac, out_rgb):
    """Forward pass of one ray; fills the per-sample buffers.

    Returns (final transmittance, expected depth).
    """
    channels = vals.shape[1]
    dt = (tf - tn) / n_samples
    _basis(d, basis)
    T = 1.0
    depth = 0.0
    out_rgb[0] = 0.0
    out_rgb[1] = 0.0
    out_rgb[2] = 0.0
    jitter = u.shape[0] > 0
    for s in range(n_samples):
        off = u[r, s] if jitter else 0.5
        t = tn + (s + off) * dt
        for a in range(3):
            p[a] = o[a] + t * d[a]
        _cell(p, lo, scale, dims, base, frac)
        _corners(base, frac, dims, idx, w)
        for a in range(3):
            base_buf[s, a] = base[a]
            frac_buf[s, a] = frac[a]
        raw = 0.0
        for k in range(8):
            raw += w[k] * vals[idx[k], 0]
        trans[s] = T
        if relu and raw <= 0.0:
            active[s] = False
            sig[s] = 0.0
            alpha[s] = 0.0
            continue
        active[s] = True
        sig[s] = raw
        for ch in range(1, channels):
            feat[ch] = 0.0
        for k in range(8):
            wk = w[k]
            row = idx[k]
            for ch in range(1, channels):
                feat[ch] += wk * vals[row, ch]
        for c in range(3):
            acc = 0.0
            for j in range(9):
                acc += feat[1 + 9 * c + j] * basis[j]
            if acc <= 0.0:
                col[s, c] = 0.0
                mask[s, c] = 0.0
            elif acc >= 1.0:
                col[s, c] = 1.0
                mask[s, c] = 0.0
            else:
                col[s, c] = acc
                mask[s, c] = 1.0
        ex = np.exp(-raw * dt)
        a_s = 1.0 - ex
        alpha[s] = a_s
        wt = T * a_s
        for c in range(3):
            out_rgb[c] += wt * col[s, c]
        depth += wt * t
        T = T * ex
    for c in range(3):
        out_rgb[c] += T * bg[c]
    depth += T * tf
    return T, depth


@njit(cache=True)
def _backward(sink, dims, d_rgb, T_final, tn, tf, n_samples, bg,
              sig, alpha, trans, col, mask, base_buf, frac_buf, active, basis,
              idx, w, dcoef, base, frac):
    channels = sink.shape[1]
    dt = (tf - tn) / n_samples
    suffix0 = T_final * bg[0]
    suffix1 = T_final * bg[1]
    suffix2 = T_final * bg[2]
    for s in range(n_samples - 1, -1, -1):
        if not active[s]:
            continue
        T = trans[s]
        a_s = alpha[s]
        wt = T * a_s
        T_next = T - wt
        c0, c1, c2 = col[s, 0], col[s, 1], col[s, 2]
        dsig = dt * (d_rgb[0] * (T_next * c0 - suffix0)
                     + d_rgb[1] * (T_next * c1 - suffix1)
                     + d_rgb[2] * (T_next * c2 - suffix2))
        suffix0 += wt * c0
        suffix1 += wt * c1
        suffix2 += wt * c2
        any_color = False
        for c in range(3):
            g = wt * d_rgb[c] * mask[s, c]
            if g != 0.0:
                any_color = True
            for j in range(9):
                dcoef[9 * c + j] = g * basis[j]
        if dsig == 0.0 and not any_color:
            continue
        for a in range(3):
            base[a] = base_buf[s, a]
            frac[a] = frac_buf[s, a]
        _corners(base, frac, dims, idx, w)
        for k in range(8):
            wk = w[k]
            row = idx[k]
            sink[row, 0] += wk * dsig
            if any_color:
                for ch in range(1, channels):
                    sink[row, ch] += wk * dcoef[ch - 1]


@njit(parallel=True, cache=True)
def march(vals, dims, lo, scale, relu, origins, dirs, tnear, tfar, hit, n_samples, u, bg,
          grad_mode, upstream, targets, grad_scale, sinks, out_rgb, out_depth, out_opacity):
    """Render a batch of rays and optionally backpropagate into ``sinks``.

    grad_mode GRAD_UPSTREAM uses ``upstream`` as dL/dcolor; GRAD_MSE uses
    ``grad_scale * (color - targets)`` and returns the summed squared error.
    """
    n_rays = origins.shape[0]
    n_chunks = sinks.shape[0]
    channels = vals.shape[1]
    losses = np.zeros(n_chunks)
    for chunk in prange(n_chunks):
        start = chunk * n_rays // n_chunks
        stop = (chunk + 1) * n_rays // n_chunks
        sig = np.empty(n_samples)
        alpha = np.empty(n_samples)
        trans = np.empty(n_samples)
        col = np.empty((n_samples, 3))
        mask = np.empty((n_samples, 3))
        base_buf = np.empty((n_samples, 3), dtype=np.int64)
        frac_buf = np.empty((n_samples, 3))
        active = np.empty(n_samples, dtype=np.bool_)
        basis = np.empty(9)
        idx = np.empty(8, dtype=np.int64)
        w = np.empty(8)
        feat = np.empty(channels)
        dcoef = np.empty(channels - 1)
        p = np.empty(3)
        base = np.empty(3, dtype=np.int64)
        frac = np.empty(3)
        rgb = np.empty(3)
        d_rgb = np.empty(3)
        sink = sinks[chunk]
        loss = 0.0
        for r in range(start, stop):
            if not hit[r]:
                for c in range(3):
                    out_rgb[r, c] = bg[c]
                    if grad_mode == GRAD_MSE:
                        diff = bg[c] - targets[r, c]
                        loss += diff * diff
                out_depth[r] = 0.0
                out_opacity[r] = 0.0
                continue
            T_final, depth = _trace(vals, dims, lo, scale, relu, origins[r], dirs[r], tnear[r], tfar[r],
                                    n_samples, u, r, bg, sig, alpha, trans, col, mask, base_buf, frac_buf,
                                    active, basis, idx, w, feat, p, base, frac, rgb)
            for c in range(3):
                out_rgb[r, c] = rgb[c]
            out_depth[r] = depth
            out_opacity[r] = 1.0 - T_final
            if grad_mode == GRAD_NONE:
                continue
            if grad_mode == GRAD_MSE:
                for c in range(3):
                    diff = rgb[c] - targets[r, c]
                    loss += diff * diff
                    d_rgb[c] = grad_scale * diff
            else:
                for c in range(3):
                    d_rgb[c] = upstream[r, c]
            _backward(sink, dims, d_rgb, T_final, tnear[r], tfar[r], n_samples, bg,
                      sig, alpha, trans, col, mask, base_buf, frac_buf, active, basis,
                      idx, w, dcoef, base, frac)
        losses[chunk] = loss
    total = 0.0
    for chunk in range(n_chunks):
        total += losses[chunk]
    return total
