"""Independent reference implementations used only by the test suite.

Each oracle deliberately takes the naive route (direct kernel scaling,
dense grid search, central differences) so it shares no code path with
the package implementations it checks.
"""

import numpy as np


def sinkhorn_scaling_oracle(cost, row_marginal, col_marginal, epsilon, iters=5000):
    """Classic u/v matrix scaling on the explicit Gibbs kernel."""
    kernel = np.exp(-np.asarray(cost, dtype=float) / epsilon)
    a = np.asarray(row_marginal, dtype=float)
    b = np.asarray(col_marginal, dtype=float)
    u = np.ones_like(a)
    for _ in range(iters):
        v = b / (kernel.T @ u)
        u = a / (kernel @ v)
    return u[:, None] * kernel * v[None, :]


def entropic_objective(cost, plan, epsilon):
    """<C, T> + eps * sum T log T with the 0 log 0 = 0 convention."""
    plan = np.asarray(plan, dtype=float)
    ent = np.where(plan > 0, plan * np.log(np.where(plan > 0, plan, 1.0)), 0.0)
    return float(np.sum(cost * plan) + epsilon * np.sum(ent))


def dual_value_oracle(log_weights, scores, lam, rho, epsilon):
    """Straightforward stable evaluation of lam*rho + lam*eps*log E_q exp(f/(lam*eps))."""
    a = np.asarray(log_weights, dtype=float) + np.asarray(scores, dtype=float) / (lam * epsilon)
    m = np.max(a)
    log_z = m + np.log(np.sum(np.exp(a - m)))
    return lam * rho + lam * epsilon * log_z


def solve_dual_oracle(log_weights, scores, rho, epsilon,
                      lam_lo=1e-6, lam_hi=100.0, grid=4000, resolution=1e-6):
    """Grid scan over log-spaced lambda followed by golden-section refinement.

    Returns (lam_star, value). Refinement narrows the bracket until its
    width falls below `resolution`.
    """
    lams = np.geomspace(lam_lo, lam_hi, grid)
    vals = np.array([dual_value_oracle(log_weights, scores, l, rho, epsilon) for l in lams])
    k = int(np.argmin(vals))
    lo = lams[max(k - 1, 0)]
    hi = lams[min(k + 1, grid - 1)]

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1 = dual_value_oracle(log_weights, scores, x1, rho, epsilon)
    f2 = dual_value_oracle(log_weights, scores, x2, rho, epsilon)
    while hi - lo > resolution:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = dual_value_oracle(log_weights, scores, x1, rho, epsilon)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = dual_value_oracle(log_weights, scores, x2, rho, epsilon)
    lam = 0.5 * (lo + hi)
    return lam, dual_value_oracle(log_weights, scores, lam, rho, epsilon)


def central_difference(fn, x, h=1e-5):
    """Central-difference gradient; scalar x gives a scalar back."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = float(x)
        return (fn(x + h) - fn(x - h)) / (2.0 * h)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad
