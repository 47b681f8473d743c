"""Leave-one-out ranking metrics, sparsity-group reports and sweep drivers."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .model import FUSION_MODES, BatchFusion, batch_scores


@dataclass
class RankingResult:
    ranks: np.ndarray  # per-user 1-based rank of the held-out item
    k: int

    @property
    def hits(self):
        return (self.ranks <= self.k).astype(np.float64)

    @property
    def ndcg(self):
        return np.where(self.ranks <= self.k, 1.0 / np.log2(self.ranks + 1.0), 0.0)

    @property
    def hr(self):
        return float(self.hits.mean()) if self.ranks.size else 0.0

    @property
    def ndcg_mean(self):
        return float(self.ndcg.mean()) if self.ranks.size else 0.0


@dataclass
class GroupReport:
    group: int
    sparsity: float
    hr: float
    ndcg: float
    n_users: int

    @property
    def label(self):
        return f"Group{self.group + 1}(τ={100 * self.sparsity:.2f}%)"

    def as_dict(self):
        return {"group": self.group + 1, "tau": round(self.sparsity, 6), "label": self.label,
                "hr": self.hr, "ndcg": self.ndcg, "n_users": self.n_users}


def rank_of_positive(scores, candidate_ids):
    """1-based rank of ``scores[0]``; ties go to the lower item id."""
    scores = np.asarray(scores, dtype=np.float64)
    candidate_ids = np.asarray(candidate_ids)
    pos_s, pos_id = scores[0], candidate_ids[0]
    rest_s, rest_id = scores[1:], candidate_ids[1:]
    ahead = (rest_s > pos_s) | ((rest_s == pos_s) & (rest_id < pos_id))
    return 1 + int(ahead.sum())


def rank_and_score(models, split, k=10, users=None):
    """HR@k and NDCG@k over the held-out items.

    ``models`` maps a user id to an object with ``scores(item_ids)``
    (a list, dict, or callable).
    """
    users = range(len(split.test)) if users is None else users
    get = models if callable(models) else models.__getitem__
    ranks = []
    for u in users:
        cand = split.candidates(u)
        if cand.size < 2:
            raise ValueError(f"user {u} has no evaluation candidates")
        ranks.append(rank_of_positive(get(u).scores(cand), cand))
    return RankingResult(np.array(ranks, dtype=np.int64), k)


def ndcg_at_rank(rank, k=10):
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def evaluate_by_group(ranking, groups):
    """Per-sparsity-group metrics from per-user ranks (users in split order)."""
    reports = []
    for g, members in enumerate(groups.members):
        if len(members) == 0:
            raise ValueError(f"group {g} is empty")
        sub = RankingResult(ranking.ranks[members], ranking.k)
        reports.append(GroupReport(g, groups.sparsity[g], sub.hr, sub.ndcg_mean, len(members)))
    return reports


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return np.divide((a * b).sum(axis=-1), na * nb, out=np.zeros(np.broadcast(na, nb).shape),
                     where=(na * nb) > 0)


def cosine_trace(model, universal, interacted, non_interacted):
    """Mean cosine between the user vector and items, raw vs fused space."""
    u = model.user_vec
    return {
        "universal_pos": float(cosine(u, universal[interacted]).mean()),
        "universal_neg": float(cosine(u, universal[non_interacted]).mean()),
        "fused_pos": float(cosine(u, model.fused(interacted)).mean()),
        "fused_neg": float(cosine(u, model.fused(non_interacted)).mean()),
    }


def random_scorer_bound(n_users, k=10, n_candidates=100, n_se=3.0):
    """HR@k of a random scorer plus ``n_se`` binomial standard errors."""
    p = k / n_candidates
    return p + n_se * math.sqrt(p * (1 - p) / n_users)


def batched_ranks(server, clients, split, cfg, chunk=256):
    """Per-user rank of the held-out item, scoring many users per array op.

    Same numbers as ``rank_and_score`` over per-user models; candidate lists
    shorter than the longest are padded and the padding never ranks ahead.
    """
    from .federation import sar_alphas, working_thetas

    mode = cfg.effective_mode
    n = len(clients)
    cands = [split.candidates(u) for u in range(n)]
    width = max(c.size for c in cands)
    ids = np.zeros((n, width), dtype=np.int64)
    valid = np.zeros((n, width), dtype=bool)
    for u, c in enumerate(cands):
        if c.size < 2:
            raise ValueError(f"user {u} has no evaluation candidates")
        ids[u, :c.size] = c
        valid[u, :c.size] = True
    d = server.items.shape[1]
    ranks = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        part = clients[lo:lo + chunk]
        users = np.stack([c.user_vec for c in part])
        fusion = alpha = None
        if mode in FUSION_MODES:
            fusion = BatchFusion.from_flat(working_thetas(part, server.cifm, cfg.uses_lam), d)
            alpha = sar_alphas(part)[0]
        sl = slice(lo, lo + len(part))
        s = batch_scores(mode, users, server.items[ids[sl]], fusion, alpha)
        pos_s, pos_id = s[:, :1], ids[sl, :1]
        ahead = ((s > pos_s) | ((s == pos_s) & (ids[sl] < pos_id))) & valid[sl]
        ahead[:, 0] = False
        ranks[sl] = 1 + ahead.sum(axis=1)
    return RankingResult(ranks, cfg.eval_k)


def evaluate_round(server, clients, split, groups, cfg, initial_items=None):
    """Metrics row for the current server snapshot; each user scores with its own model."""
    ranking = batched_ranks(server, clients, split, cfg)
    reports = evaluate_by_group(ranking, groups)
    row = {
        f"hr{cfg.eval_k}": ranking.hr,
        f"ndcg{cfg.eval_k}": ranking.ndcg_mean,
        "per_group": [r.as_dict() for r in reports],
    }
    if cfg.trace_users > 0:
        mode, use_lam = cfg.effective_mode, cfg.uses_lam
        traces = []
        for u in range(min(cfg.trace_users, len(clients))):
            model = clients[u].model(server.items, server.cifm, mode, use_lam)
            traces.append(cosine_trace(model, server.items, split.train[u], split.eval_negatives[u]))
        row["cosine"] = {key: float(np.mean([t[key] for t in traces])) for key in traces[0]}
    return row


# ------------------------------------------------------------------ sweeps

LDP_SCALES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
LAMBDA_GRID = (1.0, 0.1, 0.01, 0.001, 0.0001)
DIM_GRID = (8, 16, 32, 64)


def _final_metrics(result):
    row = result.final()
    k = result.cfg.eval_k
    return row[f"hr{k}"], row[f"ndcg{k}"]


def ldp_sweep(cfg, dataset, provider, corpus, scales=LDP_SCALES, run=None):
    """Train once per noise scale; retention is relative to the noise-free run."""
    from .federation import run_experiment

    run = run or run_experiment
    if 0.0 not in scales:
        scales = (0.0,) + tuple(scales)
    rows = []
    base = None
    for s in scales:
        hr, ndcg = _final_metrics(run(cfg.replace(ldp_scale=s), dataset, provider, corpus))
        if s == 0.0:
            base = (hr, ndcg)
        rows.append({"delta": s, "hr": hr, "ndcg": ndcg})
    for r in rows:
        r["hr_retention"] = r["hr"] / base[0] if base[0] > 0 else float("nan")
        r["ndcg_retention"] = r["ndcg"] / base[1] if base[1] > 0 else float("nan")
    return rows


def hyperparam_sweep(cfg, dataset, provider_factory, corpus, axis, values, run=None):
    """Grid over ``lambda`` or ``embed_dim``; ``provider_factory(d)`` builds the URM."""
    from .federation import run_experiment

    run = run or run_experiment
    if axis not in ("lambda", "embed_dim"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    rows = []
    for v in values:
        if axis == "lambda":
            c = cfg.replace(lam=float(v))
            provider = provider_factory(cfg.d)
        else:
            c = cfg.replace(d=int(v))
            provider = provider_factory(int(v))
        res = run(c, dataset, provider, corpus)
        hr, ndcg = _final_metrics(res)
        row = {axis: v, "hr": hr, "ndcg": ndcg}
        if c.effective_mode in FUSION_MODES:
            row["cifm_zero_frac"] = float(np.mean(res.server.cifm.flat() == 0.0))
        rows.append(row)
    return rows


def rows_to_csv(rows, header_comment=None):
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def improvement(new, old):
    """Relative improvement in percent, as printed in comparison tables."""
    return 100.0 * (new - old) / old if old else float("inf")
