"""FedAvg on strongly convex quadratics, where the optimum is known exactly.

Each client holds ``F_u(x) = 1/2 (x - c_u)^T A_u (x - c_u) + lam * |x|_1``
with the eigenvalues of ``A_u`` in ``[mu, L]``; the global objective is the
sum over clients. Three local-update variants are simulated:

``plain``          local SGD steps, then uniform averaging
``with_l1_prox``   a soft-threshold after every local step
``with_lam``       after every local step the client is pulled toward the
                   global model through the gate ``lam_fuse`` (rho clamped)

All replicates run at once as ``(R, n, p)`` arrays so suboptimality can be
averaged over independent noise draws.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import linregress, ortho_group

from .federation import LamParams, lam_fuse, soft_threshold
from .numeric import NonFiniteError, make_rng

VARIANTS = ("plain", "with_l1_prox", "with_lam")
RHO_CLAMP = (0.01, 0.99)
_PROBLEM, _NOISE, _GATE, _INIT = 11, 12, 13, 14


@dataclass
class ConvexTestbedSpec:
    n: int = 10
    p: int = 20
    mu: float = 0.5
    L: float = 2.0
    lam_l1: float = 0.0
    local_epochs: int = 5
    sigma: float = 0.1
    spread: float = 1.0  # std of the client centres c_u
    seed: int = 0

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be > 0 (strong convexity)")
        if self.L < self.mu:
            raise ValueError("L must be >= mu")
        if self.n < 1 or self.p < 1 or self.local_epochs < 1:
            raise ValueError("n, p and local_epochs must be >= 1")
        if self.lam_l1 < 0 or self.sigma < 0:
            raise ValueError("lam_l1 and sigma must be >= 0")

    @property
    def gamma_step(self):
        return max(8.0 * self.L / self.mu, self.local_epochs) - 1.0

    def step_size(self, t):
        """Decaying schedule 2 / (mu (gamma + t)) over the global local-step counter."""
        return 2.0 / (self.mu * (self.gamma_step + t))


@dataclass
class QuadraticProblem:
    A: np.ndarray  # (n, p, p)
    c: np.ndarray  # (n, p)
    lam_l1: float

    def objective(self, x):
        """Global objective at ``x`` of shape (..., p)."""
        x = np.asarray(x, dtype=np.float64)
        diff = x[..., None, :] - self.c  # (..., n, p)
        quad = 0.5 * np.einsum("...ni,nij,...nj->...", diff, self.A, diff)
        return quad + self.A.shape[0] * self.lam_l1 * np.abs(x).sum(axis=-1)


def make_problem(spec):
    """Random rotations with eigenvalues spanning exactly ``[mu, L]``."""
    rng = make_rng(spec.seed, _PROBLEM)
    A = np.empty((spec.n, spec.p, spec.p))
    for u in range(spec.n):
        eig = rng.uniform(spec.mu, spec.L, size=spec.p)
        eig[0], eig[-1] = spec.mu, spec.L
        Q = ortho_group.rvs(spec.p, random_state=rng) if spec.p > 1 else np.ones((1, 1))
        A[u] = (Q * eig) @ Q.T
        A[u] = 0.5 * (A[u] + A[u].T)
    c = rng.normal(0.0, spec.spread, size=(spec.n, spec.p))
    return QuadraticProblem(A, c, spec.lam_l1)


def closed_form_optimum(spec_or_problem, tol=1e-12, max_iter=1_000_000):
    """``(theta*, F*)``; exact solve when ``lam_l1 = 0``, else accelerated proximal gradient."""
    prob = spec_or_problem if isinstance(spec_or_problem, QuadraticProblem) else make_problem(spec_or_problem)
    H = prob.A.sum(axis=0)
    g = np.einsum("nij,nj->i", prob.A, prob.c)
    theta = np.linalg.solve(H, g)
    if prob.lam_l1 > 0:
        theta = _prox_solve(H, g, prob.A.shape[0] * prob.lam_l1, theta, tol, max_iter)
    return theta, float(prob.objective(theta))


def _prox_solve(H, g, tau, x0, tol, max_iter):
    """FISTA with restart on ``1/2 x^T H x - g^T x + tau |x|_1``."""
    step = 1.0 / np.linalg.eigvalsh(H)[-1]
    x = soft_threshold(x0, 0.0)
    y, t = x.copy(), 1.0
    for _ in range(max_iter):
        x_new = soft_threshold(y - step * (H @ y - g), step * tau)
        if np.max(np.abs(x_new - x)) <= tol * step:
            return x_new
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        if np.dot(x_new - x, y - x_new) > 0:  # momentum going uphill: restart
            t_new, y = 1.0, x_new.copy()
        else:
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
    raise RuntimeError("proximal solver did not reach tolerance")


@dataclass
class FedAvgTrace:
    variant: str
    gap: np.ndarray  # e_t, t = 0..T, averaged over replicates
    gap_per_replicate: np.ndarray = field(repr=False)  # (T+1, R)
    max_drift: np.ndarray = field(repr=False)  # (R,) largest |theta_u - theta_g| seen
    final_theta: np.ndarray = field(repr=False)  # (R, p)
    f_star: float = 0.0


def _gate_params(spec):
    rng = make_rng(spec.seed, _GATE)
    return LamParams(rng.normal(0.0, 0.5, spec.p), rng.normal(0.0, 0.5, spec.p), rng.normal(0.0, 1.0, spec.p))


def run_fedavg_quadratic(spec, variant="plain", T=2000, replicates=64, init=None, noise_seed=None,
                         problem=None, optimum=None):
    """Suboptimality ``e_t = mean_r F(theta_t) - F*`` for rounds ``t = 0..T``.

    Replicates share the problem and differ in gradient noise. Two calls
    with the same ``noise_seed`` see the same noise, which pairs runs
    that differ only in variant or initialisation.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    prob = problem or make_problem(spec)
    if variant == "with_l1_prox" and prob.lam_l1 == 0:
        raise ValueError("with_l1_prox needs lam_l1 > 0")
    if variant != "with_l1_prox" and prob.lam_l1 > 0:
        raise ValueError(f"{variant} has no proximal step; set lam_l1 = 0")
    _, f_star = optimum or closed_form_optimum(prob)
    n, p, R, E = spec.n, spec.p, replicates, spec.local_epochs
    noise_rng = make_rng(spec.seed if noise_seed is None else noise_seed, _NOISE)
    gate = _gate_params(spec) if variant == "with_lam" else None

    theta_g = np.zeros((R, p)) if init is None else np.broadcast_to(np.asarray(init, float), (R, p)).copy()
    gaps = np.empty((T + 1, R))
    gaps[0] = prob.objective(theta_g) - f_star
    drift = np.zeros(R)
    step = 0
    for t in range(1, T + 1):
        local = np.repeat(theta_g[:, None, :], n, axis=1)  # (R, n, p)
        anchor = local.copy()
        for _ in range(E):
            eta = spec.step_size(step)
            step += 1
            grad = ((local - prob.c)[:, :, None, :] @ prob.A[None])[:, :, 0, :]
            if spec.sigma > 0:
                grad = grad + spec.sigma * noise_rng.standard_normal((R, n, p))
            local = local - eta * grad
            if variant == "with_l1_prox":
                local = soft_threshold(local, eta * prob.lam_l1)
            elif variant == "with_lam":
                # convex blend toward the global model: |x - g| shrinks by (1 - rho)
                local = lam_fuse(gate, anchor.reshape(-1, p), local.reshape(-1, p),
                                 clamp=RHO_CLAMP).reshape(R, n, p)
            drift = np.maximum(drift, np.linalg.norm(local - anchor, axis=2).max(axis=1))
        theta_g = local.mean(axis=1)
        gaps[t] = prob.objective(theta_g) - f_star
        if not np.all(np.isfinite(gaps[t])):
            raise NonFiniteError(f"{variant} diverged at round {t} with {asdict(spec)}")
    return FedAvgTrace(variant, gaps.mean(axis=1), gaps, drift, theta_g, f_star)


@dataclass
class RateFitResult:
    gap: np.ndarray = field(repr=False)
    C: float
    gamma: float
    r2: float
    slope: float
    burn_in: int

    @property
    def passed(self):
        return self.r2 >= 0.95 and self.slope > 0

    def summary(self):
        return {"C": self.C, "gamma": self.gamma, "r2": self.r2, "slope": self.slope,
                "burn_in": self.burn_in, "passed": bool(self.passed), "length": int(self.gap.size)}


def fit_rate(gap, burn_in=0, min_length=200):
    """Least squares of ``1/e_t`` on ``t``; linear exactly when ``e_t = C / (gamma + t)``."""
    gap = np.asarray(gap, dtype=np.float64)
    t = np.arange(gap.size, dtype=np.float64)[burn_in:]
    if t.size < min_length:
        raise ValueError(f"need at least {min_length} points after burn-in, got {t.size}")
    inv = 1.0 / np.clip(gap[burn_in:], 1e-15, None)
    fit = linregress(t, inv)
    C = 1.0 / fit.slope if fit.slope != 0 else math.inf
    return RateFitResult(gap, C, fit.intercept * C, float(fit.rvalue ** 2), float(fit.slope), burn_in)


def rate_envelope(gap, fit):
    """``e_T (gamma + T)`` over the fitted range, and whether its max is within 2x of the median."""
    t = np.arange(gap.size)[fit.burn_in:]
    env = np.asarray(gap)[fit.burn_in:] * (fit.gamma + t)
    med = float(np.median(env))
    return env, bool(env.max() <= 2.0 * med and env.min() >= 0.5 * med)


def drift_comparison(spec, seeds, T=2000, replicates=8):
    """Paired plain vs with_lam runs; per seed, the largest client drift of each."""
    rows = []
    for s in seeds:
        sp = ConvexTestbedSpec(**{**asdict(spec), "seed": s, "lam_l1": 0.0})
        prob = make_problem(sp)
        opt = closed_form_optimum(prob)
        plain = run_fedavg_quadratic(sp, "plain", T, replicates, problem=prob, optimum=opt)
        lam = run_fedavg_quadratic(sp, "with_lam", T, replicates, problem=prob, optimum=opt)
        rows.append({"seed": s, "plain_drift": float(plain.max_drift.max()),
                     "lam_drift": float(lam.max_drift.max())})
    return rows


def init_invariance(spec, T=2000, replicates=8, scale=5.0):
    """Same noise, two random starting points: final objectives and the gap between them."""
    prob = make_problem(spec)
    opt = closed_form_optimum(prob)
    rng = make_rng(spec.seed, _INIT)
    a = run_fedavg_quadratic(spec, "plain", T, replicates, init=rng.normal(0, scale, spec.p), problem=prob,
                             optimum=opt)
    b = run_fedavg_quadratic(spec, "plain", T, replicates, init=rng.normal(0, scale, spec.p), problem=prob,
                             optimum=opt)
    return a, b


def write_gap_csv(path, gap):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "gap"])
        for t, g in enumerate(gap):
            w.writerow([t, repr(float(g))])


def write_fit_json(path, fits):
    Path(path).write_text(json.dumps(fits, indent=2, sort_keys=True) + "\n")
