"""Central finite differences with relative step sizes.

Steps follow h_j = rel_step * max(1, |x_j|), so parameters near zero get
an absolute step of rel_step.
"""

import numpy as np


def fd_steps(x, rel_step=1e-4):
    x = np.asarray(x, dtype=float)
    return rel_step * np.maximum(1.0, np.abs(x))


def fd_gradient(f, x, rel_step=1e-4):
    """Three-point central gradient of a scalar or vector-valued f."""
    x = np.asarray(x, dtype=float)
    h = fd_steps(x, rel_step)
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h[j]))
    g = np.stack(cols, axis=-1)
    return g if g.ndim > 1 else np.atleast_1d(g)


def fd_hessian(f, x, rel_step=1e-4):
    """Central-difference Hessian of scalar f, symmetrized."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = fd_steps(x, rel_step)
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        H[i, i] = (f(xp) - 2.0 * f0 + f(xm)) / h[i] ** 2
        for j in range(i + 1, n):
            xpp = x.copy()
            xpm = x.copy()
            xmp = x.copy()
            xmm = x.copy()
            xpp[[i, j]] += [h[i], h[j]]
            xpm[i] += h[i]
            xpm[j] -= h[j]
            xmp[i] -= h[i]
            xmp[j] += h[j]
            xmm[[i, j]] -= [h[i], h[j]]
            H[i, j] = H[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (
                4.0 * h[i] * h[j]
            )
    return 0.5 * (H + H.T)
