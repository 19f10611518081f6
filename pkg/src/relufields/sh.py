"""Real spherical harmonics up to degree 2 for view-dependent color."""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199  # sqrt(3 / (4 pi))
SH_C2 = (
    1.0925484305920792,  # sqrt(15 / (4 pi))
    -1.0925484305920792,
    0.31539156525252005,  # sqrt(5 / (16 pi))
    -1.0925484305920792,
    0.5462742152960396,  # sqrt(15 / (16 pi))
)
NUM_BASIS = 9
NUM_COEFFS = 3 * NUM_BASIS


def sh_basis(dirs, c0=None) -> np.ndarray:
    """Evaluate the 9 basis functions at unit directions ``(..., 3)``.

    Ordering is by degree then order: ``Y00, Y1-1, Y10, Y11, Y2-2, ..., Y22``.
    ``c0`` overrides the degree-0 constant (self-check negative control).
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    c0 = SH_C0 if c0 is None else c0
    xx, yy, zz = x * x, y * y, z * z
    return np.stack(
        [
            np.full_like(x, c0),
            -SH_C1 * y,
            SH_C1 * z,
            -SH_C1 * x,
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ],
        axis=-1,
    )


def sh_raw_color(coeffs, view_dir) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    c = c.reshape(c.shape[:-1] + (3, NUM_BASIS))
    return np.einsum("...kj,...j->...k", c, sh_basis(view_dir))


def eval_sh_color(coeffs, view_dir) -> np.ndarray:
    """RGB from 27 coefficients (9 per color channel), clamped to [0, 1]."""
    return np.clip(sh_raw_color(coeffs, view_dir), 0.0, 1.0)


def eval_sh_color_backward(coeffs, view_dir, upstream) -> np.ndarray:
    """Gradient of ``upstream . eval_sh_color`` w.r.t. the 27 coefficients.

    The clamp passes no gradient outside (0, 1).
    """
    raw = sh_raw_color(coeffs, view_dir)
    g = np.asarray(upstream, dtype=np.float64) * ((raw > 0.0) & (raw < 1.0))
    basis = sh_basis(view_dir)
    out = g[..., :, None] * basis[..., None, :]
    return out.reshape(out.shape[:-2] + (NUM_COEFFS,))
