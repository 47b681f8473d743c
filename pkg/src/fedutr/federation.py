"""Synchronous federated training: LAM gating, proximal local SGD, LDP, FedAvg."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import numeric as nx
from .datasets import group_users_by_sparsity, leave_one_out_split
from .model import (FUSION_MODES, MODES, BatchFusion, CifmParams, ClientModel, SarParams,
                    batch_loss_and_grads, cifm_size)
from .urm import RandomEmbedding

logger = logging.getLogger(__name__)

# stream tags for make_rng(seed, tag, ...)
_SPLIT, _USER, _CLIENT, _LDP, _PART, _SERVER = 1, 2, 3, 4, 5, 6

# keys that may appear in an upload; anything else is a privacy violation
UPLOAD_KEYS = frozenset({"items", "cifm"})


class ClientDivergedError(FloatingPointError):
    pass


# --------------------------------------------------------------------- LAM

@dataclass
class LamParams:
    a_g: np.ndarray
    a_l: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, p):
        return cls(np.zeros(p), np.zeros(p), np.zeros(p))

    def copy(self):
        return LamParams(self.a_g.copy(), self.a_l.copy(), self.c.copy())


def _flat(theta):
    return theta.flat() if isinstance(theta, CifmParams) else np.asarray(theta, dtype=np.float64)


def lam_gate(lam, theta_global, theta_local):
    g, u = _flat(theta_global), _flat(theta_local)
    nx.check_same_shape(g, u, "lam_fuse")
    if lam.a_g.shape != g.shape[-1:]:
        raise nx.ShapeError(f"LAM parameters: shape mismatch {lam.a_g.shape} vs {g.shape[-1:]}")
    return nx.sigmoid(lam.a_g * g + lam.a_l * u + lam.c)


def _gate(lam, g, u):
    return expit(lam.a_g * g + lam.a_l * u + lam.c)


def lam_fuse(lam, theta_global, theta_local, clamp=None):
    """Per-coordinate convex blend ``rho * global + (1 - rho) * local``.

    ``rho = sigmoid(a_g * global + a_l * local + c)``. Inputs are either
    ``CifmParams`` (result is reshaped back) or flat arrays. ``clamp``
    optionally bounds rho to ``[lo, hi]``.
    """
    g, u = _flat(theta_global), _flat(theta_local)
    rho = lam_gate(lam, g, u)
    if clamp is not None:
        rho = np.clip(rho, *clamp)
    # u + rho (g - u) returns u exactly when g == u
    out = u + rho * (g - u)
    if isinstance(theta_global, CifmParams):
        return CifmParams.from_flat(out, theta_global.d)
    return out


def lam_fuse_backward(dout, lam, theta_global, theta_local):
    """Gradient of a loss through ``lam_fuse`` with respect to the gate parameters."""
    g, u = _flat(theta_global), _flat(theta_local)
    rho = lam_gate(lam, g, u)
    dpre = np.asarray(dout) * (g - u) * rho * (1.0 - rho)
    return LamParams(dpre * g, dpre * u, dpre)


def soft_threshold(x, tau):
    """Proximal map of ``tau * |.|_1``: shrink toward zero, clip at zero."""
    if tau < 0:
        raise ValueError("threshold must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    d: int = 32
    rounds: int = 30
    local_epochs: int = 3
    lr: float = 0.01
    lr_decay: float = 1.0
    # item rows get this multiple of lr: averaging over n uploads divides each client's item step by n
    item_lr_scale: float = 200.0
    lam: float = 0.01
    neg_ratio: int = 4
    participation: float = 1.0
    ldp_scale: float = 0.0
    mode: str = "fedutr"
    no_urm: bool = False
    no_cifm: bool = False
    no_lam: bool = False
    no_regular: bool = False
    seed: int = 0
    user_init_std: float = 0.1
    eval_k: int = 10
    eval_every: int = 1
    n_groups: int = 5
    trace_users: int = 100
    threads: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.item_lr_scale <= 0:
            raise ValueError("lr and item_lr_scale must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.ldp_scale < 0:
            raise ValueError("ldp_scale must be >= 0")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must be in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.rounds < 0 or self.local_epochs < 1:
            raise ValueError("rounds must be >= 0 and local_epochs >= 1")

    @property
    def effective_mode(self):
        if self.no_cifm and self.mode in FUSION_MODES:
            return "no_cifm"
        return self.mode

    @property
    def uses_lam(self):
        return self.effective_mode in FUSION_MODES and not self.no_lam

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# ------------------------------------------------------------ client/server

@dataclass
class ClientState:
    uid: int
    train: np.ndarray
    forbidden: np.ndarray  # every item the user interacted with (train + held out)
    user_vec: np.ndarray
    lam: LamParams | None = None
    prev_cifm: np.ndarray | None = None  # flat fusion parameters after the last local round
    sar: SarParams | None = None

    @property
    def n_interactions(self):
        return int(self.train.size)

    @property
    def banned(self):
        cached = self.__dict__.get("_banned")
        if cached is None:
            cached = self.__dict__["_banned"] = set(self.forbidden.tolist())
        return cached

    def working_cifm(self, theta_global, use_lam):
        """Fusion parameters the client would use against ``theta_global``."""
        if theta_global is None:
            return None
        if not use_lam or self.prev_cifm is None:
            return theta_global.copy()
        return lam_fuse(self.lam, theta_global, CifmParams.from_flat(self.prev_cifm, theta_global.d))

    def model(self, items, theta_global, mode, use_lam):
        return ClientModel(self.user_vec, items, self.working_cifm(theta_global, use_lam),
                           self.sar, mode, self.n_interactions)


@dataclass
class ServerState:
    items: np.ndarray
    cifm: CifmParams | None
    round: int = 0
    participation: float = 1.0
    buffer: "Aggregator | None" = field(default=None, repr=False)


@dataclass
class Upload:
    items: np.ndarray
    cifm: CifmParams | None

    def payload(self):
        """The dict that would go over the wire."""
        out = {"items": self.items}
        if self.cifm is not None:
            out["cifm"] = self.cifm.flat()
        return out


@dataclass
class LocalRoundStats:
    rec_loss: float
    l1: float


class Aggregator:
    """Running sum of uploads; ``mean()`` gives the uniform FedAvg average."""

    def __init__(self, m, d, with_cifm):
        self.items = np.zeros((m, d))
        self.cifm = np.zeros(cifm_size(d)) if with_cifm else None
        self.count = 0
        self.d = d

    def add(self, upload):
        payload = upload.payload()
        extra = set(payload) - UPLOAD_KEYS
        if extra:
            raise RuntimeError(f"upload carries non-shareable fields: {sorted(extra)}")
        if payload["items"].shape != self.items.shape:
            raise nx.ShapeError(f"upload items {payload['items'].shape} != {self.items.shape}")
        self.items += payload["items"]
        if self.cifm is not None:
            if "cifm" not in payload or payload["cifm"].shape != self.cifm.shape:
                raise nx.ShapeError("upload CIFM block missing or mis-shaped")
            self.cifm += payload["cifm"]
        self.count += 1

    def add_batch(self, batch):
        """Add B uploads at once; equal to ``add`` on each materialised upload."""
        extra = {"items"} | ({"cifm"} if batch.cifm is not None else set())
        if extra - UPLOAD_KEYS:
            raise RuntimeError(f"upload carries non-shareable fields: {sorted(extra - UPLOAD_KEYS)}")
        if batch.base.shape != self.items.shape:
            raise nx.ShapeError(f"upload items {batch.base.shape} != {self.items.shape}")
        n = len(batch)
        self.items += n * batch.base + batch.item_delta_sum()
        if self.cifm is not None:
            if batch.cifm is None or batch.cifm.shape[1:] != self.cifm.shape:
                raise nx.ShapeError("upload CIFM block missing or mis-shaped")
            self.cifm += batch.cifm.sum(axis=0)
        self.count += n

    def mean(self):
        if self.count == 0:
            raise ValueError("no uploads to aggregate")
        items = self.items / self.count
        cifm = None if self.cifm is None else CifmParams.from_flat(self.cifm / self.count, self.d)
        return items, cifm


def server_aggregate(uploads, server):
    if not uploads:
        raise ValueError("server_aggregate needs at least one upload")
    m, d = server.items.shape
    agg = Aggregator(m, d, server.cifm is not None)
    for up in uploads:
        agg.add(up)
    return _finish(agg, server)


def _finish(agg, server):
    items, cifm = agg.mean()
    if not np.all(np.isfinite(items)) or (cifm is not None and not np.all(np.isfinite(cifm.flat()))):
        raise nx.NonFiniteError("aggregated parameters are not finite")
    return ServerState(items, cifm, server.round + 1, server.participation, None)


def sample_participants(n_clients, fraction, rng):
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    k = math.ceil(fraction * n_clients)
    if k >= n_clients:
        return np.arange(n_clients)
    return np.sort(rng.choice(n_clients, size=k, replace=False))


def apply_ldp(upload, scale, rng):
    """Add Laplace(0, scale) to every uploaded item-embedding entry."""
    if scale < 0:
        raise ValueError("LDP scale must be >= 0")
    if scale == 0:
        return upload
    noisy = upload.items + nx.sample_laplace(rng, scale, upload.items.shape)
    return Upload(noisy, upload.cifm)


@dataclass
class BatchUpload:
    """Uploads of B clients, stored as the shared server snapshot plus each
    client's changed rows so the simulator never copies B full tables.

    ``payload()`` materialises what goes over the wire: every client's full
    local item table (B,m,d) and flat fusion params (B,p).
    """
    base: np.ndarray  # server item table the clients started from
    row_ids: np.ndarray  # (B,U) item ids each client may have changed; m marks padding
    rows: np.ndarray  # (B,U,d) their values after local training
    cifm: np.ndarray | None
    rec_loss: np.ndarray
    l1: np.ndarray
    noise: np.ndarray | None = None  # (B,m,d) LDP perturbation

    def __len__(self):
        return self.rows.shape[0]

    def item_delta_sum(self):
        """Sum over clients of (uploaded table - base), as a dense (m,d) array."""
        m, d = self.base.shape
        valid = self.row_ids < m
        delta = self.rows - self.base[np.minimum(self.row_ids, m - 1)]
        out = np.zeros((m + 1, d))
        np.add.at(out, np.where(valid, self.row_ids, m), np.where(valid[..., None], delta, 0.0))
        out = out[:m]
        if self.noise is not None:
            out += self.noise.sum(axis=0)
        return out

    def items(self, j):
        m = self.base.shape[0]
        table = self.base.copy()
        valid = self.row_ids[j] < m
        table[self.row_ids[j][valid]] = self.rows[j][valid]
        if self.noise is not None:
            table += self.noise[j]
        return table

    def payload(self):
        out = {"items": np.stack([self.items(j) for j in range(len(self))])}
        if self.cifm is not None:
            out["cifm"] = self.cifm
        return out

    def upload(self, j, d):
        return Upload(self.items(j), None if self.cifm is None else CifmParams.from_flat(self.cifm[j], d))


def _stack_fusion_state(states, theta_g):
    """Per-client previous fusion params and gate parameters, initialised on first contact."""
    p = theta_g.size
    for st in states:
        if st.prev_cifm is None:
            st.prev_cifm = theta_g.copy()
        if st.lam is None:
            st.lam = LamParams.zeros(p)
    prev = np.stack([st.prev_cifm for st in states])
    a_g = np.stack([st.lam.a_g for st in states])
    a_l = np.stack([st.lam.a_l for st in states])
    c = np.stack([st.lam.c for st in states])
    return prev, a_g, a_l, c


def working_thetas(states, theta_global, use_lam):
    """Flat fusion params (B,p) each client scores with: LAM blend of global and previous local."""
    g = theta_global.flat()
    if not use_lam:
        return np.broadcast_to(g, (len(states), g.size))
    out = np.empty((len(states), g.size))
    for j, st in enumerate(states):
        if st.prev_cifm is None:
            out[j] = g
        else:
            rho = _gate(st.lam, g, st.prev_cifm)
            out[j] = st.prev_cifm + rho * (g - st.prev_cifm)
    return out


def sar_alphas(states):
    w = np.array([0.0 if st.sar is None else st.sar.w_s for st in states])
    b = np.array([0.0 if st.sar is None else st.sar.b_s for st in states])
    log_n = np.log1p([st.n_interactions for st in states])
    return expit(w * log_n + b), w, b, log_n


def train_clients(states, server_items, server_cifm, cfg, rngs, lr=None, ldp_rngs=None):
    """Local rounds for several clients in lock-step; returns their uploads.

    Each client draws every epoch's negatives from its own ``rng`` so the
    result does not depend on which other clients share the batch. A client
    only ever touches its positives and the negatives it drew, so its local
    copy of the item table is kept as just those rows (``slots``); padded
    positions point at a scratch slot and carry zero gradient. Client state
    (user vector, LAM, SAR, previous fusion params) is updated in place.
    """
    mode = cfg.effective_mode
    lr = cfg.lr if lr is None else lr
    m, d = server_items.shape
    B = len(states)
    for st in states:
        if st.user_vec.shape != (d,):
            raise nx.ShapeError(f"payload dim {d} does not match client dim {st.user_vec.shape}")
    fusion = mode in FUSION_MODES
    use_lam = cfg.uses_lam
    shrink = 0.0 if cfg.no_regular else lr * cfg.lam
    item_lr = lr * cfg.item_lr_scale
    E = cfg.local_epochs

    k_pos = np.array([st.train.size for st in states])
    n_free = np.array([m - len(st.banned) for st in states])
    k_neg = np.minimum(cfg.neg_ratio * k_pos, n_free)
    K = int((k_pos + k_neg).max())
    rows = np.arange(B)[:, None]
    cols = np.arange(K)[None, :]
    is_pos = cols < k_pos[:, None]
    neg_slot = (cols >= k_pos[:, None]) & (cols < (k_pos + k_neg)[:, None])
    mask = is_pos | neg_slot

    # each epoch's negatives are the lowest random keys among non-interacted items
    ids = np.full((E, B, K), m, dtype=np.int64)
    for j, (st, rng) in enumerate(zip(states, rngs)):
        keys = rng.random((E, m))
        keys[:, st.forbidden] = 2.0
        negs = np.argpartition(keys, k_neg[j] - 1, axis=1)[:, :k_neg[j]] if k_neg[j] else keys[:, :0]
        ids[:, j, :k_pos[j]] = st.train
        ids[:, j, k_pos[j]:k_pos[j] + k_neg[j]] = np.sort(negs, axis=1)

    # compact per-client row universe; slot U is scratch
    row_ids = [np.unique(ids[:, j][ids[:, j] < m]) for j in range(B)]
    U = max(r.size for r in row_ids)
    slot_of = np.full((B, m + 1), U, dtype=np.int64)
    table_ids = np.full((B, U), m, dtype=np.int64)
    for j, r in enumerate(row_ids):
        slot_of[j, r] = np.arange(r.size)
        table_ids[j, :r.size] = r
    slots = slot_of[rows[None], ids]  # (E,B,K)
    padded_base = np.vstack([server_items, np.zeros((1, d))])
    local = padded_base[np.hstack([table_ids, np.full((B, 1), m)])]  # (B,U+1,d)

    users = np.stack([st.user_vec for st in states])
    theta = None
    if fusion:
        theta_g = server_cifm.flat()
        prev, a_g, a_l, c = _stack_fusion_state(states, theta_g)
        spread = theta_g - prev
        if use_lam:
            rho = expit(a_g * theta_g + a_l * prev + c)
            fused_base = prev + rho * spread
        else:
            fused_base = np.broadcast_to(theta_g, prev.shape)
        theta = fused_base.copy()
    if mode == "fedutr_sar":
        for st in states:
            if st.sar is None:
                st.sar = SarParams()
    alpha, w_s, b_s, log_n = sar_alphas(states)

    rec_sum = np.zeros(B)
    l1_sum = np.zeros(B)
    for epoch in range(E):
        sl = slots[epoch]
        bf = BatchFusion.from_flat(theta, d) if fusion else None
        rec, g_user, g_rows, g_theta, g_pre = batch_loss_and_grads(
            mode, users, local[rows, sl], bf, alpha, is_pos, mask)
        rec_sum += rec
        if fusion:
            l1_sum += np.abs(theta).sum(axis=1)

        users = users - lr * g_user
        local[rows, sl] -= item_lr * g_rows
        if fusion:
            theta = theta - lr * g_theta
            if use_lam:
                # theta = gate(lam) + free offset, so the gate's move shifts theta too
                dpre = g_theta * spread * rho * (1.0 - rho)
                a_g = a_g - lr * dpre * theta_g
                a_l = a_l - lr * dpre * prev
                c = c - lr * dpre
                rho = expit(a_g * theta_g + a_l * prev + c)
                new_base = prev + rho * spread
                theta += new_base - fused_base
                fused_base = new_base
            if shrink > 0:
                theta = np.sign(theta) * np.maximum(np.abs(theta) - shrink, 0.0)
        if mode == "fedutr_sar":
            w_s = w_s - lr * g_pre * log_n
            b_s = b_s - lr * g_pre
            alpha = expit(w_s * log_n + b_s)

        ok = np.isfinite(users).all(axis=1) & np.isfinite(local[:, :U]).all(axis=(1, 2))
        if fusion:
            ok &= np.isfinite(theta).all(axis=1)
        if not ok.all():
            bad = [states[j].uid for j in np.flatnonzero(~ok)]
            raise ClientDivergedError(f"clients {bad}: non-finite parameters (lr={lr})")

    for j, st in enumerate(states):
        st.user_vec = users[j].copy()
        if fusion:
            st.prev_cifm = theta[j].copy()
            if use_lam:
                st.lam = LamParams(a_g[j].copy(), a_l[j].copy(), c[j].copy())
        if mode == "fedutr_sar":
            st.sar = SarParams(float(w_s[j]), float(b_s[j]))

    noise = None
    if ldp_rngs is not None and cfg.ldp_scale > 0:
        noise = np.stack([nx.sample_laplace(rng, cfg.ldp_scale, (m, d)) for rng in ldp_rngs])
    return BatchUpload(server_items, table_ids, local[:, :U], theta.copy() if fusion else None,
                       rec_sum / E, l1_sum / E, noise)


def client_local_round(state, server_items, server_cifm, cfg, rng, lr=None):
    """One client's local round: ``cfg.local_epochs`` proximal SGD steps.

    Updates ``state`` in place and returns ``(Upload, LocalRoundStats)``;
    the upload carries only the full local item table and fusion params.
    LDP is applied separately by ``apply_ldp``.
    """
    batch = train_clients([state], server_items, server_cifm, cfg, [rng], lr)
    return batch.upload(0, server_items.shape[1]), LocalRoundStats(float(batch.rec_loss[0]),
                                                                   float(batch.l1[0]))


# -------------------------------------------------------------- experiment

@dataclass
class ExperimentResult:
    cfg: TrainConfig
    metrics: list
    server: ServerState
    clients: list
    split: object
    groups: object
    initial_items: np.ndarray

    def final(self):
        return self.metrics[-1]

    def jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.metrics)


def init_server(cfg, dataset, provider, corpus):
    mode = cfg.effective_mode
    if cfg.no_urm:
        provider = RandomEmbedding(cfg.d, 0.1, cfg.seed)
    E = np.asarray(provider.fit().transform(corpus), dtype=np.float64)
    nx.check_shape(E, (dataset.m_items, cfg.d), "provider output")
    if not np.all(np.isfinite(E)):
        raise nx.NonFiniteError("provider produced non-finite embeddings")
    cifm = CifmParams.init(cfg.d, nx.make_rng(cfg.seed, _SERVER)) if mode in FUSION_MODES else None
    return ServerState(E, cifm, 0, cfg.participation)


def init_clients(cfg, dataset, split):
    clients = []
    for u in range(dataset.n_users):
        rng = nx.make_rng(cfg.seed, _USER, u)
        clients.append(ClientState(u, split.train[u], dataset.per_user[u],
                                   nx.sample_gaussian(rng, cfg.user_init_std, cfg.d)))
    return clients


def _buckets(part, clients, shape, max_floats=2_000_000):
    """Participants grouped by interaction count so padding stays small.

    Grouping depends only on the participant list, never on thread count.
    """
    m, d = shape
    size = max(1, min(256, max_floats // ((m + 1) * d)))
    order = sorted(part.tolist(), key=lambda u: (clients[u].n_interactions, u))
    return [order[i:i + size] for i in range(0, len(order), size)]


def run_experiment(cfg, dataset, provider, corpus, split=None, on_round=None, evaluate_fn=None):
    """Train for ``cfg.rounds`` rounds and evaluate; returns an ExperimentResult.

    Every round: sample participants, run each client's local round against
    the same server snapshot, add LDP noise, average, evaluate. Participants
    are trained in fixed buckets (see ``_buckets``) whose uploads are summed
    in bucket order, so the float sums and the emitted metrics do not depend
    on thread scheduling.
    """
    from .evaluation import evaluate_round  # circular at import time

    evaluate_fn = evaluate_fn or evaluate_round
    if split is None:
        split = leave_one_out_split(dataset, nx.make_rng(cfg.seed, _SPLIT))
    groups = group_users_by_sparsity(dataset, cfg.n_groups)
    server = init_server(cfg, dataset, provider, corpus)
    initial_items = server.items.copy()
    clients = init_clients(cfg, dataset, split)
    metrics = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def record(round_, rec_losses, l1s, wall):
        row = evaluate_fn(server, clients, split, groups, cfg, initial_items)
        row.update({
            "round": round_,
            "mean_rec_loss": float(np.mean(rec_losses)) if rec_losses else None,
            "mean_l1": float(np.mean(l1s)) if l1s else None,
            "wall_ms": None,
        })
        metrics.append(row)
        if on_round is not None:
            on_round(row, wall)

    t0 = time.perf_counter()
    if cfg.rounds == 0:
        record(0, [], [], 0.0)
    try:
        for t in range(1, cfg.rounds + 1):
            lr = cfg.lr * cfg.lr_decay ** (t - 1)
            part = sample_participants(len(clients), cfg.participation, nx.make_rng(cfg.seed, _PART, t))
            agg = Aggregator(*server.items.shape, server.cifm is not None)
            snapshot_items, snapshot_cifm = server.items, server.cifm

            def work(bucket, t=t, lr=lr):
                states = [clients[u] for u in bucket]
                rngs = [nx.make_rng(cfg.seed, _CLIENT, u, t) for u in bucket]
                ldp = [nx.make_rng(cfg.seed, _LDP, u, t) for u in bucket] if cfg.ldp_scale > 0 else None
                return train_clients(states, snapshot_items, snapshot_cifm, cfg, rngs, lr, ldp)

            buckets = _buckets(part, clients, server.items.shape)
            batches = list(pool.map(work, buckets)) if pool else [work(bk) for bk in buckets]
            rec_losses, l1s = [], []
            for batch in batches:
                agg.add_batch(batch)
                rec_losses.extend(batch.rec_loss.tolist())
                l1s.extend(batch.l1.tolist())
            server = _finish(agg, server)
            if t % cfg.eval_every == 0 or t == cfg.rounds:
                record(t, rec_losses, l1s, (time.perf_counter() - t0) * 1000.0)
    finally:
        if pool:
            pool.shutdown()
    return ExperimentResult(cfg, metrics, server, clients, split, groups, initial_items)
