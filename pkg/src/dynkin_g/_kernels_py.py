"""Pure-numpy backward-step kernel (fallback when the compiled one is absent).

Semantics must match ``_kernels.pyx`` exactly: per-node Picard iteration
that updates first and stops once its own increment is within tolerance.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def step_layer(
    y_next: np.ndarray,
    child_local: np.ndarray,
    p: np.ndarray,
    dw: np.ndarray,
    branch_jump: np.ndarray,
    lam_delta: np.ndarray,
    delta: float,
    c0: float,
    a: float,
    b: float,
    b_abs: float,
    gn: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> np.ndarray:
    """Solve one implicit micro step for every node of a layer.

    ``y_next`` holds the values one micro layer ahead; ``child_local``
    maps (node, branch) to indices into it.  Returns the solved values.
    """
    yc = y_next[child_local]  # (width, B)
    ey = yc @ p
    z = yc @ (p * dw) / delta
    drift0 = c0 + b * z + b_abs * np.abs(z)
    J = lam_delta.shape[0]
    if J:
        ind = (branch_jump[:, None] == np.arange(J)[None, :]).astype(np.float64)
        ellw = p[:, None] * (ind - lam_delta[None, :]) / lam_delta[None, :]
        drift0 = drift0 + (yc @ ellw) @ gn

    base = ey + delta * drift0
    ad = delta * a
    y = ey.copy()
    active = np.ones(y.shape[0], dtype=bool)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        y_new = base[idx] + ad * y[idx]
        diff = np.abs(y_new - y[idx])
        y[idx] = y_new
        active[idx[diff <= tol]] = False
        if not active.any():
            return y
    raise RuntimeError(
        "one-step Picard iteration failed to converge within "
        f"{max_iter} iterations (was the driver validated?)"
    )
