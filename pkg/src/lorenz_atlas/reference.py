"""High accuracy floating point flow, used as an independent oracle.

Nothing here is rigorous: it is what certified results are checked
against. Trajectories use scipy's DOP853 with tight tolerances.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from .equilibria import LorenzParams

RTOL = 1e-13
ATOL = 1e-13


def _field(params: LorenzParams):
    s, r, b = params.floats()

    def f(t, y):
        x, yy, z = y[0], y[1], y[2]
        return np.array([s * (yy - x), x * (r - z) - yy, x * yy - b * z])

    return f


def flow(x0, t: float, params: LorenzParams | None = None, rtol: float = RTOL, atol: float = ATOL) -> np.ndarray:
    """Phi_t(x0) for one point or an (n, 3) array of points."""
    params = params or LorenzParams.classical()
    pts = np.atleast_2d(np.asarray(x0, dtype=float))
    out = np.empty_like(pts)
    f = _field(params)
    for i, p in enumerate(pts):
        if t == 0:
            out[i] = p
            continue
        sol = solve_ivp(f, (0.0, t), p, method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(f"reference integration failed: {sol.message}")
        out[i] = sol.y[:, -1]
    return out[0] if np.ndim(x0) == 1 else out


def trajectory(x0, times, params: LorenzParams | None = None, rtol: float = RTOL, atol: float = ATOL) -> np.ndarray:
    """Samples of one trajectory at the given times (same sign, sorted by |t|)."""
    params = params or LorenzParams.classical()
    times = np.asarray(times, dtype=float)
    end = times[np.argmax(np.abs(times))]
    if end == 0:
        return np.tile(np.asarray(x0, dtype=float), (len(times), 1))
    sol = solve_ivp(_field(params), (0.0, end), np.asarray(x0, dtype=float), method="DOP853",
                    rtol=rtol, atol=atol, dense_output=True)
    return sol.sol(times).T


def variational(x0, t: float, params: LorenzParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Phi_t(x0) and its derivative with respect to x0."""
    params = params or LorenzParams.classical()
    s, r, b = params.floats()

    def f(_, y):
        x, yy, z = y[:3]
        V = y[3:].reshape(3, 3)
        J = np.array([[-s, s, 0.0], [r - z, -1.0, -x], [yy, x, -b]])
        return np.concatenate([[s * (yy - x), x * (r - z) - yy, x * yy - b * z], (J @ V).ravel()])

    y0 = np.concatenate([np.asarray(x0, dtype=float), np.eye(3).ravel()])
    sol = solve_ivp(f, (0.0, t), y0, method="DOP853", rtol=RTOL, atol=ATOL)
    y = sol.y[:, -1]
    return y[:3], y[3:].reshape(3, 3)
