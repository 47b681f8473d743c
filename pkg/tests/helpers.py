"""Model builders and the finite-difference oracle shared by unit and acceptance tests.

The oracle recomputes the loss from scratch in extended precision
(``np.longdouble``) and takes central differences of that. Working at
float64 the cancellation error of a 1e-6 step is about 1e-10, which is
larger than the smallest gate gradients; a bigger step instead crosses
nearby ReLU kinks.
"""
import math

import numpy as np

from fedutr import numeric as nx
from fedutr.federation import LamParams, lam_fuse, lam_fuse_backward
from fedutr.model import FUSION_MODES, CifmParams, ClientModel, SarParams, loss_and_grads

POSITIVES = np.array([0, 3, 5])
NEGATIVES = np.array([1, 2, 4, 6, 8, 11])
LD = np.longdouble
STEP = 1e-6
FLOOR = 1e-8


def random_model(mode, seed, d=6, m=12, n_interactions=7):
    """A client model with every block away from its initial value so no gradient is trivially zero."""
    rng = nx.make_rng(seed, 99)
    cifm = sar = None
    if mode in FUSION_MODES:
        cifm = CifmParams(rng.normal(0, 0.6, (d, d)), rng.normal(0, 0.3, d), rng.normal(1, 0.3, d),
                          rng.normal(0, 0.3, d))
    if mode == "fedutr_sar":
        sar = SarParams(float(rng.normal()), float(rng.normal()))
    return ClientModel(rng.normal(0, 0.5, d), rng.normal(0, 0.5, (m, d)), cifm, sar, mode, n_interactions)


def _sigmoid(x):
    return 1 / (1 + np.exp(-x))


def reference_loss(p, mode, n_interactions, positives=POSITIVES, negatives=NEGATIVES):
    """Summed BCE written out line by line; ``p`` maps block names to long-double arrays."""
    ids = np.concatenate([positives, negatives])
    e = p["items"][ids]
    if mode in FUSION_MODES:
        d = e.shape[1]
        if "theta_g" in p:
            g, u = p["theta_g"], p["theta_u"]
            rho = _sigmoid(p["a_g"] * g + p["a_l"] * u + p["c"])
            theta = u + rho * (g - u)
            W, b = theta[:d * d].reshape(d, d), theta[d * d:d * d + d]
            gamma, beta = theta[d * d + d:d * d + 2 * d], theta[d * d + 2 * d:]
        else:
            W, b, gamma, beta = p["W"], p["b"], p["gamma"], p["beta"]
        r = np.maximum(e @ W.T + b, 0)
        if mode == "fedutr_sar":
            alpha = _sigmoid(p["sar"][0] * LD(math.log1p(n_interactions)) + p["sar"][1])
            z = alpha * r + (1 - alpha) * e
        else:
            z = r + e
        mu = z.mean(axis=1, keepdims=True)
        var = ((z - mu) ** 2).mean(axis=1, keepdims=True)
        e = gamma * (z - mu) / np.sqrt(var + LD(nx.LN_EPS)) + beta
    s = e @ p["user"]
    s[positives.size:] *= -1
    return np.logaddexp(LD(0), -s).sum()


def reference_params(model):
    p = {"user": model.user_vec.astype(LD), "items": model.items.astype(LD)}
    if model.cifm is not None:
        p.update({k: v.astype(LD) for k, v in model.cifm.blocks().items()})
    if model.sar is not None:
        p["sar"] = np.array([model.sar.w_s, model.sar.b_s], dtype=LD)
    return p


def max_rel_error(p, name, analytic, mode, n_interactions):
    """Central differences of the reference loss along every coordinate of block ``name``."""
    block = p[name].reshape(-1)
    ana = np.asarray(analytic, dtype=np.float64).reshape(-1)
    worst = 0.0
    for j in range(block.size):
        orig = block[j]
        block[j] = orig + LD(STEP)
        fp = reference_loss(p, mode, n_interactions)
        block[j] = orig - LD(STEP)
        fm = reference_loss(p, mode, n_interactions)
        block[j] = orig
        num = float((fp - fm) / (2 * LD(STEP)))
        worst = max(worst, abs(ana[j] - num) / max(abs(ana[j]) + abs(num), FLOOR))
    return worst


def gradient_errors(mode, seed):
    """Largest relative error per parameter block against the extended-precision oracle."""
    model = random_model(mode, seed)
    _, g = loss_and_grads(model, POSITIVES, NEGATIVES)
    p = reference_params(model)
    n = model.n_interactions
    dense = np.zeros_like(model.items)
    dense[g.item_ids] = g.items
    errors = {"user": max_rel_error(p, "user", g.user, mode, n),
              "items": max_rel_error(p, "items", dense, mode, n)}
    if model.cifm is not None:
        for name, block in g.cifm.blocks().items():
            errors[f"cifm.{name}"] = max_rel_error(p, name, block, mode, n)
    if model.sar is not None:
        errors["sar"] = max_rel_error(p, "sar", [g.sar.w_s, g.sar.b_s], mode, n)
    if model.cifm is not None:
        errors.update(_lam_errors(model, seed))
    return errors


def _lam_errors(model, seed):
    """Gate parameters: the loss seen through lam_fuse(global, previous local)."""
    rng = nx.make_rng(seed, 98)
    size = model.cifm.flat().size
    theta_g = model.cifm.flat()
    theta_u = theta_g + rng.normal(0, 0.5, size)
    lam = LamParams(rng.normal(0, 0.5, size), rng.normal(0, 0.5, size), rng.normal(0, 0.5, size))
    fused = CifmParams.from_flat(lam_fuse(lam, theta_g, theta_u), model.d)
    seen = ClientModel(model.user_vec, model.items, fused, model.sar, model.mode, model.n_interactions)
    _, g = loss_and_grads(seen, POSITIVES, NEGATIVES)
    analytic = lam_fuse_backward(g.cifm.flat(), lam, theta_g, theta_u)

    p = reference_params(model)
    for k in ("W", "b", "gamma", "beta"):
        del p[k]
    p.update(theta_g=theta_g.astype(LD), theta_u=theta_u.astype(LD),
             a_g=lam.a_g.astype(LD), a_l=lam.a_l.astype(LD), c=lam.c.astype(LD))
    return {f"lam.{name}": max_rel_error(p, name, getattr(analytic, name), model.mode, model.n_interactions)
            for name in ("a_g", "a_l", "c")}
