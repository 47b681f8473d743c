"""Client-side scorer: user vector against (optionally fused) item rows.

Modes
-----
``fedutr``        fused = LayerNorm(ReLU(W e + b) + e)
``fedutr_sar``    fused = LayerNorm(a * ReLU(W e + b) + (1 - a) * e),
                  a = sigmoid(w_s * log(1 + n_u) + b_s)
``no_cifm``       fused = e   (FedUTR with the fusion layer removed)
``fcf_baseline``  fused = e   (plain federated collaborative filtering)

The score is ``sigmoid(user_vec . fused)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import numeric as nx

MODES = ("fedutr", "fedutr_sar", "fcf_baseline", "no_cifm")
FUSION_MODES = ("fedutr", "fedutr_sar")


def cifm_size(d):
    return d * d + 3 * d


@dataclass
class CifmParams:
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray

    @property
    def d(self):
        return self.b.shape[0]

    @classmethod
    def init(cls, d, rng, w_std=None):
        """Small random W, zero bias; layer-norm gain 1/sqrt(d) so fused rows have unit norm."""
        w_std = 0.5 / math.sqrt(d) if w_std is None else w_std
        return cls(rng.normal(0.0, w_std, size=(d, d)), np.zeros(d),
                   np.full(d, 1.0 / math.sqrt(d)), np.zeros(d))

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros((d, d)), np.zeros(d), np.zeros(d), np.zeros(d))

    @classmethod
    def from_flat(cls, vec, d, copy=True):
        """Split a flat vector into blocks; ``copy=False`` returns views."""
        vec = np.asarray(vec, dtype=np.float64)
        nx.check_shape(vec, (cifm_size(d),), "flat CIFM vector")
        dd = d * d
        parts = (vec[:dd].reshape(d, d), vec[dd:dd + d], vec[dd + d:dd + 2 * d], vec[dd + 2 * d:])
        return cls(*(p.copy() for p in parts)) if copy else cls(*parts)

    def flat(self):
        return np.concatenate([self.W.ravel(), self.b, self.gamma, self.beta])

    def copy(self):
        return CifmParams(self.W.copy(), self.b.copy(), self.gamma.copy(), self.beta.copy())

    def parameter_count(self):
        return cifm_size(self.d)

    def l1(self):
        return float(np.abs(self.flat()).sum())

    def blocks(self):
        return {"W": self.W, "b": self.b, "gamma": self.gamma, "beta": self.beta}


@dataclass
class SarParams:
    w_s: float = 0.0
    b_s: float = 0.0

    def gate(self, n_interactions):
        if n_interactions < 0:
            raise ValueError("n_interactions must be >= 0")
        return float(nx.sigmoid(np.array(self.w_s * math.log1p(n_interactions) + self.b_s)))

    def copy(self):
        return SarParams(self.w_s, self.b_s)


@dataclass
class LossBreakdown:
    rec_loss: float
    l1_penalty: float
    lam: float

    @property
    def total(self):
        return self.rec_loss + self.lam * self.l1_penalty


@dataclass
class Grads:
    user: np.ndarray
    item_ids: np.ndarray  # unique touched rows, ascending
    items: np.ndarray  # gradient rows aligned with item_ids
    cifm: CifmParams | None
    sar: SarParams | None


# ---------------------------------------------------------------- forward

def cifm_forward(cifm, e, eps=nx.LN_EPS):
    return _fuse_forward("fedutr", cifm, None, 0, e, eps)[0]


def sar_forward(cifm, sar, e, n_interactions, eps=nx.LN_EPS):
    return _fuse_forward("fedutr_sar", cifm, sar, n_interactions, e, eps)[0]


def _fuse_forward(mode, cifm, sar, n_interactions, e, eps=nx.LN_EPS):
    e = nx.as_float(e, "item embedding")
    if mode not in FUSION_MODES:
        return e, (mode, None)
    d = cifm.d
    if e.shape[-1] != d:
        raise nx.ShapeError(f"item rows have dim {e.shape[-1]}, fusion layer expects {d}")
    h = e @ cifm.W.T + cifm.b
    r = np.maximum(h, 0.0)
    if mode == "fedutr":
        alpha, log_n = 1.0, 0.0
        z = r + e
    else:
        log_n = math.log1p(n_interactions)
        alpha = sar.gate(n_interactions)
        z = alpha * r + (1.0 - alpha) * e
    out, xhat, inv_std = nx.ln_kernel(z, cifm.gamma, cifm.beta, eps)
    return out, (mode, (e, r, h, alpha, log_n, cifm, xhat, inv_std))


def _fuse_backward(dout, cache):
    mode, inner = cache
    if mode not in FUSION_MODES:
        return dout, None, None
    e, r, h, alpha, log_n, cifm, xhat, inv_std = inner
    dz, dgamma, dbeta = nx.ln_backward_kernel(dout, xhat, inv_std, cifm.gamma)
    if mode == "fedutr":
        dr, de = dz, dz
        dsar = None
    else:
        dr, de = alpha * dz, (1.0 - alpha) * dz
        dalpha = float(np.vdot(dz, r - e))
        dpre = dalpha * alpha * (1.0 - alpha)
        dsar = SarParams(dpre * log_n, dpre)
    # relu subgradient at 0 is 0
    dh = dr * (h > 0.0)
    if e.ndim == 1:
        dW, db = np.outer(dh, e), dh
    else:
        dW, db = dh.T @ e, dh.sum(axis=0)
    return de + dh @ cifm.W, CifmParams(dW, db, dgamma, dbeta), dsar


# ------------------------------------------------------------------ model

@dataclass
class ClientModel:
    user_vec: np.ndarray
    items: np.ndarray
    cifm: CifmParams | None = None
    sar: SarParams | None = None
    mode: str = "fedutr"
    n_interactions: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        d = self.user_vec.shape[0]
        if self.items.ndim != 2 or self.items.shape[1] != d:
            raise nx.ShapeError(f"items must be (m, {d}), got {self.items.shape}")
        if self.mode in FUSION_MODES and self.cifm is None:
            raise ValueError(f"mode {self.mode} needs CIFM parameters")
        if self.mode == "fedutr_sar" and self.sar is None:
            self.sar = SarParams()

    @property
    def d(self):
        return self.user_vec.shape[0]

    @property
    def m(self):
        return self.items.shape[0]

    def _rows(self, item_ids):
        ids = np.asarray(item_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.m):
            raise IndexError(f"item id outside [0, {self.m})")
        return ids

    def fused(self, item_ids):
        ids = self._rows(item_ids)
        return _fuse_forward(self.mode, self.cifm, self.sar, self.n_interactions, self.items[ids])[0]

    def scores(self, item_ids):
        """Raw logits ``user_vec . fused(item)``."""
        return self.fused(item_ids) @ self.user_vec

    def predict(self, item_ids):
        return nx.sigmoid(self.scores(item_ids))


def predict(model, item_id):
    return float(model.predict(np.array([item_id]))[0])


def loss_and_grads(model, positives, negatives, lam=0.0, assume_unique=False):
    """Summed binary cross-entropy with gradients of every smooth parameter.

    The L1 term on the fusion parameters is reported but not differentiated;
    the trainer applies it as a proximal shrink. ``assume_unique`` skips
    merging gradients of repeated item ids.
    """
    pos = np.asarray(positives, dtype=np.int64)
    neg = np.asarray(negatives, dtype=np.int64)
    if pos.size == 0:
        raise ValueError("loss needs at least one positive item")
    ids = model._rows(np.concatenate([pos, neg]))
    n_pos = pos.size

    fused, cache = _fuse_forward(model.mode, model.cifm, model.sar, model.n_interactions, model.items[ids])
    s = fused @ model.user_vec
    # -log sigmoid(s) on positives, -log(1 - sigmoid(s)) = -log sigmoid(-s) on negatives
    signed = s.copy()
    signed[n_pos:] *= -1.0
    rec = float(np.logaddexp(0.0, -signed).sum())
    ds = expit(s)
    ds[:n_pos] -= 1.0

    g_user = ds @ fused
    d_rows, g_cifm, g_sar = _fuse_backward(np.outer(ds, model.user_vec), cache)
    if assume_unique:
        order = np.argsort(ids, kind="stable")
        uniq, g_items = ids[order], d_rows[order]
    else:
        uniq, inverse = np.unique(ids, return_inverse=True)
        g_items = np.zeros((uniq.size, model.d))
        np.add.at(g_items, inverse, d_rows)

    l1 = model.cifm.l1() if model.mode in FUSION_MODES else 0.0
    return LossBreakdown(rec, l1, lam), Grads(g_user, uniq, g_items, g_cifm, g_sar)


def loss_value(model, positives, negatives):
    pos = np.asarray(positives, dtype=np.int64)
    neg = np.asarray(negatives, dtype=np.int64)
    s_pos = model.scores(pos)
    s_neg = model.scores(neg)
    return float(-(nx.log_sigmoid(s_pos).sum() + nx.log_sigmoid(-s_neg).sum()))


# ------------------------------------------------------- parameter budget

def lam_param_count(d):
    """Element-wise gate: one weight on the global value, one on the local, one bias."""
    return 3 * cifm_size(d)


def count_parameters(mode, m, d, include_user=True, with_lam=True):
    n = m * d + (d if include_user else 0)
    if mode in FUSION_MODES:
        n += cifm_size(d)
        if with_lam:
            n += lam_param_count(d)
    if mode == "fedutr_sar":
        n += 2
    return n


def parameter_count(model, include_user=True, bytes_per_param=4, with_lam=None):
    """Trainable parameter footprint in bytes."""
    if with_lam is None:
        with_lam = model.mode in FUSION_MODES
    return bytes_per_param * count_parameters(model.mode, model.m, model.d, include_user, with_lam)


# ------------------------------------------------------------ checkpoints

def save_checkpoint(directory, model, seed=0, round_=0, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = {"user_vec": model.user_vec, "items": model.items}
    if model.cifm is not None:
        blocks.update({f"cifm.{k}": v for k, v in model.cifm.blocks().items()})
    if model.sar is not None:
        blocks["sar"] = np.array([model.sar.w_s, model.sar.b_s])
    manifest = {"mode": model.mode, "d": model.d, "m": model.m, "seed": seed, "round": round_,
                "n_interactions": model.n_interactions, "dtype": "<f8",
                "blocks": {k: list(v.shape) for k, v in blocks.items()}}
    if extra:
        manifest.update(extra)
    for name, arr in blocks.items():
        np.ascontiguousarray(arr, dtype="<f8").tofile(directory / f"{name}.f64")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {name: np.fromfile(directory / f"{name}.f64", dtype="<f8").reshape(shape)
              for name, shape in manifest["blocks"].items()}
    cifm = None
    if "cifm.W" in arrays:
        cifm = CifmParams(arrays["cifm.W"], arrays["cifm.b"], arrays["cifm.gamma"], arrays["cifm.beta"])
    sar = SarParams(*arrays["sar"].tolist()) if "sar" in arrays else None
    model = ClientModel(arrays["user_vec"], arrays["items"], cifm, sar, manifest["mode"],
                        manifest.get("n_interactions", 0))
    return model, manifest


# ------------------------------------------------------- batched clients

@dataclass
class BatchFusion:
    """Fusion parameters for B clients at once: W (B,d,d), b/gamma/beta (B,d)."""
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def from_flat(cls, theta, d):
        B = theta.shape[0]
        dd = d * d
        return cls(theta[:, :dd].reshape(B, d, d), theta[:, dd:dd + d],
                   theta[:, dd + d:dd + 2 * d], theta[:, dd + 2 * d:])


def batch_fuse_forward(mode, fusion, alpha, e, eps=nx.LN_EPS):
    """``e`` is (B, K, d); ``alpha`` is a (B,) residual mix (ones for plain CIFM)."""
    if mode not in FUSION_MODES:
        return e, None
    h = e @ fusion.W.transpose(0, 2, 1) + fusion.b[:, None, :]
    r = np.maximum(h, 0.0)
    if mode == "fedutr":
        z = r + e
    else:
        a = alpha[:, None, None]
        z = a * r + (1.0 - a) * e
    out, xhat, inv_std = nx.ln_kernel(z, fusion.gamma[:, None, :], fusion.beta[:, None, :], eps)
    return out, (e, r, h, xhat, inv_std)


def batch_loss_and_grads(mode, users, e, fusion, alpha, is_pos, mask):
    """Summed BCE per client and gradients for a padded batch.

    ``users`` (B,d), ``e`` (B,K,d) item rows, ``is_pos``/``mask`` (B,K).
    Padded slots (mask False) contribute nothing. Returns per-client loss
    (B,), user grads (B,d), row grads (B,K,d), flat fusion grads (B,p) or
    None, and the gradient on each client's SAR pre-activation (B,) or None.
    """
    fused, cache = batch_fuse_forward(mode, fusion, alpha, e)
    s = (fused @ users[:, :, None])[:, :, 0]
    signed = np.where(is_pos, s, -s)
    rec = (np.logaddexp(0.0, -signed) * mask).sum(axis=1)
    ds = (expit(s) - is_pos) * mask
    g_user = (ds[:, None, :] @ fused)[:, 0, :]
    dout = ds[:, :, None] * users[:, None, :]
    if cache is None:
        return rec, g_user, dout, None, None

    e, r, h, xhat, inv_std = cache
    d = e.shape[-1]
    dgamma = (dout * xhat).sum(axis=1)
    dbeta = dout.sum(axis=1)
    dxhat = dout * fusion.gamma[:, None, :]
    dz = (inv_std / d) * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    g_pre = None
    if mode == "fedutr":
        dr, de = dz, dz
    else:
        a = alpha[:, None, None]
        dr, de = a * dz, (1.0 - a) * dz
        g_pre = (dz * (r - e)).sum(axis=(1, 2)) * alpha * (1.0 - alpha)
    dh = dr * (h > 0.0)
    dW = dh.transpose(0, 2, 1) @ e
    g_rows = de + dh @ fusion.W
    B = e.shape[0]
    g_theta = np.concatenate([dW.reshape(B, -1), dh.sum(axis=1), dgamma, dbeta], axis=1)
    return rec, g_user, g_rows, g_theta, g_pre


def batch_scores(mode, users, e, fusion=None, alpha=None):
    """Logits (B,K) of each client's user vector against its own fused rows."""
    fused, _ = batch_fuse_forward(mode, fusion, alpha, e)
    return (fused @ users[:, :, None])[:, :, 0]
