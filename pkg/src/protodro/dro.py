"""Robust per-class scores through a one-dimensional convex dual.

Each class score is the worst-case expected model score over an entropic
neighborhood of that class's prior, tilted toward the query point. The
inner problem reduces to minimizing

    phi(lam) = lam * rho + lam * eps * log E_{y ~ q} exp(f(y) / (lam * eps))

over lam >= 0, which is convex with derivatives available in closed form
from softmax moments of the atom scores. The solver runs Newton steps
safeguarded by a sign bracket on phi' and falls back to bisection whenever
a step leaves the bracket or fails to reduce |phi'|.

Everything here is written over batches of tilted weight rows; the scalar
operations are thin wrappers around the batch path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import log_sum_exp
from .priors import MixturePrior

GRAD_TOL_SCALE = 1e-7
BOUNDARY_NONE = 0
BOUNDARY_MIN = -1
BOUNDARY_MAX = 1


@dataclass
class DroConfig:
    """Ball radius, kernel temperature, and dual-solver safeguards."""

    rho: float = 1.0
    epsilon: float = 1.0
    newton_iters: int = 8
    lambda_init: float = 1.0
    lambda_min: float = 1e-6
    lambda_max: float = 1e4
    flat_tol: float = 1e-12

    def __post_init__(self) -> None:
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.newton_iters < 1:
            raise ValueError("newton_iters must be at least 1")
        if not 0 < self.lambda_min < self.lambda_max:
            raise ValueError("need 0 < lambda_min < lambda_max")
        if not self.lambda_min <= self.lambda_init <= self.lambda_max:
            raise ValueError("lambda_init must lie in [lambda_min, lambda_max]")

    @property
    def grad_tol(self) -> float:
        return GRAD_TOL_SCALE * (1.0 + self.rho)


@dataclass
class GibbsPosterior:
    """Prior atoms re-weighted toward a query point.

    tilt_log_weights are normalized log weights; atom_scores stay None
    until the caller's score function fills them in.
    """

    tilt_log_weights: np.ndarray
    atom_scores: np.ndarray | None = None


@dataclass
class DualSolveResult:
    value: float
    lambda_star: float
    posterior: np.ndarray
    iterations: int
    converged: bool
    degenerate: bool
    at_boundary: str | None = None


@dataclass
class BatchDualResult:
    """Row-wise dual solutions for a batch of tilted weight rows."""

    value: np.ndarray
    lambda_star: np.ndarray
    posterior: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray
    boundary: np.ndarray

    def row(self, i: int) -> DualSolveResult:
        flag = {BOUNDARY_NONE: None, BOUNDARY_MIN: "min", BOUNDARY_MAX: "max"}
        return DualSolveResult(
            value=float(self.value[i]),
            lambda_star=float(self.lambda_star[i]),
            posterior=self.posterior[i],
            iterations=int(self.iterations[i]),
            converged=bool(self.converged[i]),
            degenerate=bool(self.degenerate[i]),
            at_boundary=flag[int(self.boundary[i])],
        )


def gibbs_tilt(prior: MixturePrior, x: np.ndarray, epsilon: float) -> GibbsPosterior:
    """Tilt a prior's atoms toward x with the squared-distance Gibbs kernel."""
    logs = gibbs_tilt_batch(prior, np.asarray(x, dtype=float)[None, :], epsilon)
    return GibbsPosterior(tilt_log_weights=logs[0])


def gibbs_tilt_batch(prior: MixturePrior, queries: np.ndarray, epsilon: float) -> np.ndarray:
    """Normalized tilt log-weights for many query points at once: (n, A)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    q = np.asarray(queries, dtype=float)
    if q.ndim != 2 or q.shape[1] != prior.atoms.shape[1]:
        raise ValueError("queries must be (n, d) matching the atom dimension")
    sq = (
        np.sum(q**2, axis=1)[:, None]
        + np.sum(prior.atoms**2, axis=1)[None, :]
        - 2.0 * q @ prior.atoms.T
    )
    np.maximum(sq, 0.0, out=sq)
    logs = prior.atom_log_weights[None, :] - sq / epsilon
    return logs - log_sum_exp(logs, axis=1)[:, None]


def _phi_terms(logq: np.ndarray, scores: np.ndarray, lam: np.ndarray, cfg: DroConfig):
    """phi, phi', phi'' and the posterior at each row's lambda."""
    scale = lam[:, None] * cfg.epsilon
    a = logq + scores / scale
    log_z = log_sum_exp(a, axis=1)
    posterior = np.exp(a - log_z[:, None])
    f = np.broadcast_to(scores, posterior.shape)
    mean = np.einsum("na,na->n", posterior, f)
    second = np.einsum("na,na->n", posterior, f * f)
    var = np.maximum(second - mean**2, 0.0)
    phi = lam * (cfg.rho + cfg.epsilon * log_z)
    dphi = cfg.rho + cfg.epsilon * log_z - mean / lam
    d2phi = var / (lam**3 * cfg.epsilon)
    return phi, dphi, d2phi, posterior


def dual_objective(q: GibbsPosterior, lam: float, cfg: DroConfig):
    """Evaluate (phi, phi', phi'') at one lambda > 0."""
    if q.atom_scores is None:
        raise ValueError("atom_scores must be set before evaluating the dual")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    logq = q.tilt_log_weights[None, :]
    scores = np.asarray(q.atom_scores, dtype=float)[None, :]
    phi, dphi, d2phi, _ = _phi_terms(logq, scores, np.array([lam]), cfg)
    return float(phi[0]), float(dphi[0]), float(d2phi[0])


def solve_dual_batch(tilt_log_weights: np.ndarray, scores: np.ndarray,
                     cfg: DroConfig,
                     lam_init: np.ndarray | None = None) -> BatchDualResult:
    """Minimize phi row-by-row over [lambda_min, lambda_max].

    Args:
        tilt_log_weights: (n, A) normalized log weights (-inf allowed).
        scores: (A,) shared scores or (n, A) per-row scores.
        cfg: DroConfig; cfg.newton_iters bounds the refinement loop.
        lam_init: optional (n,) per-row starting multipliers; defaults to
            cfg.lambda_init everywhere. Warm starts from a previous solve
            shorten the bracket search without changing the minimizer.

    Returns:
        BatchDualResult with one solution per row. Rows whose weighted
        scores are constant to within the flat tolerance short-circuit to
        lambda = 0 with the constant as the value; rows whose minimizer
        sits outside the lambda box are clamped and flagged.
    """
    logq = np.asarray(tilt_log_weights, dtype=float)
    if logq.ndim != 2:
        raise ValueError("tilt_log_weights must be (n, A)")
    n, n_atoms = logq.shape
    f = np.asarray(scores, dtype=float)
    if f.ndim == 1:
        f = np.broadcast_to(f[None, :], (n, n_atoms))
    if f.shape != (n, n_atoms):
        raise ValueError("scores must be (A,) or (n, A)")
    if not np.all(np.isfinite(f)):
        raise ValueError("scores must be finite")

    live = logq > -np.inf
    if not live.any(axis=1).all():
        raise ValueError("every row needs at least one atom with positive weight")
    f_hi = np.where(live, f, -np.inf).max(axis=1)
    f_lo = np.where(live, f, np.inf).min(axis=1)
    mag = np.maximum(1.0, np.maximum(np.abs(f_hi), np.abs(f_lo)))
    degenerate = (f_hi - f_lo) <= cfg.flat_tol * mag

    value = np.where(degenerate, f_hi, np.nan)
    lam_star = np.where(degenerate, 0.0, np.nan)
    posterior = np.where(degenerate[:, None], np.exp(logq), np.nan)
    iterations = np.zeros(n, dtype=int)
    converged = degenerate.copy()
    boundary = np.full(n, BOUNDARY_NONE, dtype=np.int8)

    solve_rows = np.flatnonzero(~degenerate)
    if solve_rows.size:
        lam0 = None if lam_init is None else np.asarray(lam_init, dtype=float)[solve_rows]
        sub = _newton_bisect(logq[solve_rows], f[solve_rows], cfg, lam0)
        sub_val, sub_lam, sub_post, sub_iter, sub_conv, sub_bound = sub
        value[solve_rows] = sub_val
        lam_star[solve_rows] = sub_lam
        posterior[solve_rows] = sub_post
        iterations[solve_rows] = sub_iter
        converged[solve_rows] = sub_conv
        boundary[solve_rows] = sub_bound

    return BatchDualResult(
        value=value,
        lambda_star=lam_star,
        posterior=posterior,
        iterations=iterations,
        converged=converged,
        degenerate=degenerate,
        boundary=boundary,
    )


def _bracket(logq: np.ndarray, f: np.ndarray, cfg: DroConfig,
             lam0: np.ndarray | None = None):
    """Find [lo, hi] with phi'(lo) < 0 < phi'(hi) by geometric expansion.

    Rows where phi' keeps one sign across the whole lambda box are flagged
    as boundary rows instead.
    """
    n = logq.shape[0]
    lo = np.full(n, np.nan)
    hi = np.full(n, np.nan)
    d_lo = np.full(n, np.nan)
    d_hi = np.full(n, np.nan)
    bound = np.full(n, BOUNDARY_NONE, dtype=np.int8)
    if lam0 is None:
        probe = np.full(n, float(np.clip(cfg.lambda_init, cfg.lambda_min, cfg.lambda_max)))
    else:
        probe = np.clip(np.where(np.isfinite(lam0) & (lam0 > 0), lam0, cfg.lambda_init),
                        cfg.lambda_min, cfg.lambda_max)
    open_rows = np.ones(n, dtype=bool)
    # from lambda_init the probe moves a factor 10 per step, so the box
    # [1e-6, 1e4] is exhausted long before this guard
    for _ in range(80):
        rows = np.flatnonzero(open_rows)
        if not rows.size:
            break
        _, d, _, _ = _phi_terms(logq[rows], f[rows], probe[rows], cfg)
        nonneg = d >= 0
        # a nonnegative slope closes the bracket from above ...
        up_rows = rows[nonneg]
        hi[up_rows] = probe[up_rows]
        d_hi[up_rows] = d[nonneg]
        hit_min = probe[up_rows] <= cfg.lambda_min
        bound[up_rows[hit_min & np.isnan(lo[up_rows])]] = BOUNDARY_MIN
        open_rows[up_rows[hit_min]] = False
        open_rows[up_rows[~np.isnan(lo[up_rows])]] = False
        # ... and a negative slope from below
        dn_rows = rows[~nonneg]
        lo[dn_rows] = probe[dn_rows]
        d_lo[dn_rows] = d[~nonneg]
        hit_max = probe[dn_rows] >= cfg.lambda_max
        bound[dn_rows[hit_max & np.isnan(hi[dn_rows])]] = BOUNDARY_MAX
        open_rows[dn_rows[hit_max]] = False
        open_rows[dn_rows[~np.isnan(hi[dn_rows])]] = False
        still = np.flatnonzero(open_rows)
        shrink = still[~np.isnan(hi[still])]
        grow = still[~np.isnan(lo[still])]
        probe[shrink] = np.maximum(probe[shrink] / 10.0, cfg.lambda_min)
        probe[grow] = np.minimum(probe[grow] * 10.0, cfg.lambda_max)
    return lo, hi, d_lo, d_hi, bound


def _newton_bisect(logq: np.ndarray, f: np.ndarray, cfg: DroConfig,
                   lam0: np.ndarray | None = None):
    """Safeguarded Newton refinement for rows with genuinely spread scores.

    One evaluation per iteration from the bracket's geometric midpoint:
    the Newton step is taken when it lands strictly inside the sign
    bracket and at most halves the previous step, otherwise the bracket
    is bisected in log space (lambda lives across decades, so the
    geometric midpoint is the natural fallback).
    """
    n = logq.shape[0]
    lo, hi, _, _, bound = _bracket(logq, f, cfg, lam0)

    interior = bound == BOUNDARY_NONE
    lam = np.where(bound == BOUNDARY_MIN, cfg.lambda_min, cfg.lambda_max)
    if lam0 is None:
        lam[interior] = np.sqrt(lo[interior] * hi[interior])
    else:
        # a warm start sits on one bracket edge; Newton moves inward from it
        lam[interior] = np.clip(lam0[interior], lo[interior], hi[interior])
    step_old = np.where(interior, hi - lo, 0.0)

    iterations = np.zeros(n, dtype=int)
    active = interior.copy()
    for _ in range(cfg.newton_iters):
        rows = np.flatnonzero(active)
        if not rows.size:
            break
        iterations[rows] += 1
        _, d, dd, _ = _phi_terms(logq[rows], f[rows], lam[rows], cfg)
        done = np.abs(d) <= cfg.grad_tol
        active[rows[done]] = False
        rows, d, dd = rows[~done], d[~done], dd[~done]
        if not rows.size:
            continue
        lo[rows] = np.where(d < 0, lam[rows], lo[rows])
        hi[rows] = np.where(d >= 0, lam[rows], hi[rows])
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = lam[rows] - d / dd
        inside = np.isfinite(newton) & (newton > lo[rows]) & (newton < hi[rows])
        shrinking = np.abs(2.0 * d) <= np.abs(step_old[rows] * dd)
        nxt = np.where(inside & shrinking, newton, np.sqrt(lo[rows] * hi[rows]))
        step_old[rows] = np.abs(nxt - lam[rows])
        lam[rows] = nxt

    phi, dphi, _, posterior = _phi_terms(logq, f, lam, cfg)
    converged = ~interior | (np.abs(dphi) <= cfg.grad_tol)
    return phi, lam, posterior, iterations, converged, bound


def solve_dual(q: GibbsPosterior, cfg: DroConfig) -> DualSolveResult:
    """Solve the dual for a single tilted posterior (scores must be set)."""
    if q.atom_scores is None:
        raise ValueError("atom_scores must be set before solving the dual")
    batch = solve_dual_batch(
        q.tilt_log_weights[None, :], np.asarray(q.atom_scores, dtype=float), cfg
    )
    return batch.row(0)


def robust_logits(priors: list[MixturePrior], x: np.ndarray, score_fn,
                  cfg: DroConfig) -> tuple[np.ndarray, list[DualSolveResult]]:
    """Robust score of every class prior at one query point.

    Args:
        priors: class priors, index c scoring class c.
        x: query point (d,).
        score_fn: callable (class_id, atoms (A, d)) -> scores (A,).
        cfg: dual solver configuration.

    Returns:
        (values, results): per-class robust scores and full solve results.
    """
    values = np.empty(len(priors))
    results = []
    for c, prior in enumerate(priors):
        tilt = gibbs_tilt(prior, x, cfg.epsilon)
        tilt.atom_scores = np.asarray(score_fn(c, prior.atoms), dtype=float)
        res = solve_dual(tilt, cfg)
        values[c] = res.value
        results.append(res)
    return values, results


def decide(values: np.ndarray) -> int:
    """Predicted class: argmax of robust scores, ties to the lowest index."""
    return int(np.argmax(values))


def robust_logit_grad(result: DualSolveResult, atom_score_grads: np.ndarray) -> np.ndarray:
    """Envelope gradient of the dual value w.r.t. score parameters.

    With lambda fixed at its optimum the value's parameter gradient is the
    posterior-weighted average of the per-atom score gradients; for the
    degenerate branch the posterior is the tilted prior itself.
    """
    grads = np.asarray(atom_score_grads, dtype=float)
    if grads.shape[0] != result.posterior.shape[0]:
        raise ValueError("atom_score_grads rows must match the atom count")
    return result.posterior @ grads
