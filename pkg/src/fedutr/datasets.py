"""Interaction corpora: loading, statistics, splits, sampling, synthesis."""
from __future__ import annotations

import json
import logging
import math
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import make_rng, sigmoid

logger = logging.getLogger(__name__)

N_EVAL_NEGATIVES = 99
EVAL_PROTOCOL = "leave-one-out; 1 held-out positive vs 99 sampled negatives"


class DatasetFormatError(ValueError):
    pass


@dataclass
class InteractionDataset:
    n_users: int
    m_items: int
    per_user: list  # per_user[u] -> sorted np.ndarray of item ids
    timestamps: list | None = None  # per_user[u] -> timestamps aligned with per_user
    user_ids: list | None = None  # dense id -> original id
    item_ids: list | None = None

    def __post_init__(self):
        if len(self.per_user) != self.n_users:
            raise ValueError("per_user length must equal n_users")
        for u, items in enumerate(self.per_user):
            items = np.asarray(items, dtype=np.int64)
            if items.size and (items.min() < 0 or items.max() >= self.m_items):
                raise ValueError(f"user {u} has an item id outside [0, {self.m_items})")
            if np.unique(items).size != items.size:
                raise ValueError(f"user {u} has duplicate interactions")
            self.per_user[u] = items

    @property
    def n_interactions(self):
        return int(sum(len(items) for items in self.per_user))

    def counts(self):
        return np.array([len(items) for items in self.per_user], dtype=np.int64)

    def pairs(self):
        rows = [(u, int(i)) for u, items in enumerate(self.per_user) for i in items]
        return np.array(rows, dtype=np.int64).reshape(-1, 2)

    @classmethod
    def from_pairs(cls, pairs, n_users=None, m_items=None, timestamps=None):
        """Build from an ``(N, 2)`` array of already-dense ``(user, item)`` ids."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        n = int(pairs[:, 0].max()) + 1 if n_users is None else n_users
        m = int(pairs[:, 1].max()) + 1 if m_items is None else m_items
        per_user = [[] for _ in range(n)]
        per_ts = [[] for _ in range(n)] if timestamps is not None else None
        seen = set()
        for k, (u, i) in enumerate(pairs):
            if (u, i) in seen:
                continue
            seen.add((u, i))
            per_user[u].append(i)
            if per_ts is not None:
                per_ts[u].append(timestamps[k])
        return cls(n, m, [np.array(x, dtype=np.int64) for x in per_user],
                   None if per_ts is None else [np.array(t, dtype=np.float64) for t in per_ts])


@dataclass
class ItemCorpus:
    texts: list  # item id -> str, "" when missing

    def __len__(self):
        return len(self.texts)


@dataclass
class DatasetStats:
    users: int
    items: int
    interactions: int
    avg_i: float
    sparsity: float

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True)

    def rounded(self):
        """Table-style rendering: two-decimal Avg.I and percent sparsity (see ``table_round``)."""
        return {"avg_i": str(table_round(self.avg_i)), "sparsity": f"{table_round(100 * self.sparsity)}%"}


def table_round(x, places=2):
    """Half-up rounding to ``places + 1`` decimals, then to ``places``.

    The published statistics table rounds this way: 18519 / 2034 = 9.1047
    prints as 9.11, and every other self-consistent cell agrees.
    """
    d = Decimal(repr(float(x)))
    d = d.quantize(Decimal(1).scaleb(-(places + 1)), ROUND_HALF_UP)
    return d.quantize(Decimal(1).scaleb(-places), ROUND_HALF_UP)


@dataclass
class SplitSpec:
    train: list  # per user train item ids
    test: np.ndarray  # one held-out item per user
    eval_negatives: list  # per user array of sampled negatives
    protocol: str = EVAL_PROTOCOL

    def candidates(self, u):
        """Positive first, then negatives."""
        return np.concatenate(([self.test[u]], self.eval_negatives[u]))

    def train_dataset(self, m_items):
        return InteractionDataset(len(self.train), m_items, [t.copy() for t in self.train])


# ------------------------------------------------------------------ loading

def load_interactions(path, min_interactions=2):
    """Read ``user<TAB>item[<TAB>ts]`` lines and re-index ids densely.

    Users left with fewer than ``min_interactions`` are dropped. Original
    ids are kept on the dataset; ``write_remap`` saves the maps.
    """
    path = Path(path)
    raw = {}
    has_ts = None
    n_dupes = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
                raise DatasetFormatError(f"{path}:{lineno}: expected user<TAB>item[<TAB>timestamp]")
            ts = None
            if len(parts) == 3:
                try:
                    ts = float(parts[2])
                except ValueError:
                    raise DatasetFormatError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from None
            if has_ts is None:
                has_ts = ts is not None
            elif has_ts != (ts is not None):
                raise DatasetFormatError(f"{path}:{lineno}: timestamp column present on some lines only")
            items = raw.setdefault(parts[0], {})
            if parts[1] in items:
                n_dupes += 1
                if ts is not None:
                    items[parts[1]] = max(items[parts[1]], ts)
                continue
            items[parts[1]] = ts
    if not raw:
        raise DatasetFormatError(f"{path}: no interactions")
    if n_dupes:
        logger.info("dropped %d duplicate interactions", n_dupes)

    kept = {u: its for u, its in raw.items() if len(its) >= min_interactions}
    if len(kept) < len(raw):
        logger.warning("dropped %d users with fewer than %d interactions",
                       len(raw) - len(kept), min_interactions)
    if not kept:
        raise DatasetFormatError(f"{path}: no user has >= {min_interactions} interactions")

    user_ids = list(kept)
    item_ids = sorted({i for its in kept.values() for i in its}, key=_natural_key)
    item_index = {i: k for k, i in enumerate(item_ids)}
    per_user, per_ts = [], []
    for u in user_ids:
        its = kept[u]
        order = sorted(its, key=lambda i: item_index[i])
        per_user.append(np.array([item_index[i] for i in order], dtype=np.int64))
        per_ts.append(np.array([its[i] for i in order], dtype=np.float64) if has_ts else None)

    ds = InteractionDataset(len(user_ids), len(item_ids), per_user,
                            per_ts if has_ts else None, user_ids, item_ids)
    return ds


def write_remap(ds, directory):
    """Write ``users.tsv`` and ``items.tsv`` mapping dense ids back to the originals."""
    directory = Path(directory)
    _write_remap(directory / "users.tsv", ds.user_ids or range(ds.n_users))
    _write_remap(directory / "items.tsv", ds.item_ids or range(ds.m_items))


def _natural_key(s):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


def _write_remap(path, ids):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# dense_id\toriginal_id\n")
        for k, orig in enumerate(ids):
            fh.write(f"{k}\t{orig}\n")


def load_item_texts(path, dataset):
    """Read ``item<TAB>text`` lines keyed by the original item ids of ``dataset``."""
    index = {str(orig): k for k, orig in enumerate(dataset.item_ids or range(dataset.m_items))}
    texts = [""] * dataset.m_items
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) > 2:
                raise DatasetFormatError(f"{path}:{lineno}: tab inside item text")
            k = index.get(parts[0])
            if k is not None:
                texts[k] = parts[1] if len(parts) == 2 else ""
    return ItemCorpus(texts)


def save_interactions(path, ds):
    with open(path, "w", encoding="utf-8") as fh:
        for u, items in enumerate(ds.per_user):
            for k, i in enumerate(items):
                if ds.timestamps is not None:
                    fh.write(f"{u}\t{i}\t{ds.timestamps[u][k]:.0f}\n")
                else:
                    fh.write(f"{u}\t{i}\n")


def save_item_texts(path, corpus):
    with open(path, "w", encoding="utf-8") as fh:
        for i, text in enumerate(corpus.texts):
            fh.write(f"{i}\t{text}\n")


# ------------------------------------------------------------------- stats

def compute_stats(ds):
    if ds.n_users == 0 or ds.m_items == 0:
        raise ValueError("empty dataset")
    return stats_from_counts(ds.n_users, ds.m_items, ds.n_interactions)


def stats_from_counts(n_users, m_items, n_interactions):
    return DatasetStats(
        users=int(n_users),
        items=int(m_items),
        interactions=int(n_interactions),
        avg_i=n_interactions / n_users,
        sparsity=1.0 - n_interactions / (n_users * m_items),
    )


# ------------------------------------------------------------------ splits

def leave_one_out_split(ds, rng, n_negatives=N_EVAL_NEGATIVES):
    """Hold out the newest interaction per user (random one without timestamps)."""
    train, test, negatives = [], np.empty(ds.n_users, dtype=np.int64), []
    for u, items in enumerate(ds.per_user):
        if len(items) < 2:
            raise ValueError(f"user {u} has {len(items)} interaction(s); need >= 2")
        if ds.timestamps is not None:
            ts = ds.timestamps[u]
            # newest wins; ties go to the larger item id so the choice is stable
            k = max(range(len(items)), key=lambda j: (ts[j], items[j]))
        else:
            k = int(rng.integers(len(items)))
        test[u] = items[k]
        train.append(np.delete(items, k))
        pool = np.setdiff1d(np.arange(ds.m_items), items, assume_unique=True)
        if pool.size <= n_negatives:
            negatives.append(pool.copy())
        else:
            negatives.append(np.sort(rng.choice(pool, size=n_negatives, replace=False)))
    return SplitSpec(train, test, negatives)


def sample_train_negatives(positives, m_items, ratio, rng, exclude=None, banned=None):
    """``ratio * len(positives)`` distinct items the user has not interacted with.

    ``exclude`` adds further forbidden ids (e.g. the held-out test item).
    ``banned`` may pass the full forbidden set precomputed as a Python set.
    The count is clamped to the size of the eligible pool.
    """
    if ratio < 1:
        raise ValueError("negative ratio must be >= 1")
    if banned is None:
        banned = set(np.asarray(positives).tolist())
        if exclude is not None:
            banned.update(np.asarray(exclude).tolist())
    n_free = m_items - len(banned)
    want = min(int(ratio * len(positives)), n_free)
    if want <= 0:
        return np.empty(0, dtype=np.int64)
    if want > n_free // 2:
        pool = np.setdiff1d(np.arange(m_items), np.fromiter(banned, dtype=np.int64))
        return rng.choice(pool, size=want, replace=False)
    # rejection sampling beats materialising the pool when interactions are sparse
    out = []
    chosen = set()
    while len(out) < want:
        for i in rng.integers(0, m_items, size=2 * (want - len(out))).tolist():
            if i not in banned and i not in chosen:
                chosen.add(i)
                out.append(i)
                if len(out) == want:
                    break
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------- sparsity groups

@dataclass
class SparsityGroups:
    assignment: np.ndarray  # user -> group index (0 = densest)
    sparsity: list  # per-group tau
    members: list = field(repr=False)

    def label(self, g):
        return f"Group{g + 1}(τ={100 * self.sparsity[g]:.2f}%)"


def group_users_by_sparsity(ds, n_groups=5):
    """Split users, densest first, into ``n_groups`` near-equal quantile groups.

    A group's sparsity is measured over its rows and all ``m`` items, so it
    never decreases from the densest group to the sparsest.
    """
    if n_groups < 2:
        raise ValueError("n_groups must be >= 2")
    if n_groups > ds.n_users:
        raise ValueError(f"n_groups={n_groups} exceeds n_users={ds.n_users}")
    counts = ds.counts()
    order = np.lexsort((np.arange(ds.n_users), -counts))
    members = [np.sort(chunk) for chunk in np.array_split(order, n_groups)]
    assignment = np.empty(ds.n_users, dtype=np.int64)
    taus = []
    for g, users in enumerate(members):
        assignment[users] = g
        # the group's rows of the full user-item matrix
        taus.append(1.0 - counts[users].sum() / (len(users) * ds.m_items))
    return SparsityGroups(assignment, taus, members)


# --------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    n: int = 200
    m: int = 300
    latent_dim: int = 8
    target_avg_interactions: float = 5.0
    text_vocab: int = 400
    noise: float = 0.3
    words_per_item: int = 12
    signal_scale: float = 4.0
    activity_spread: float = 0.6


@dataclass
class SyntheticTruth:
    user_factors: np.ndarray
    item_factors: np.ndarray
    dominant: np.ndarray  # item -> 2 * dominant dimension + (sign > 0)
    bias: float


def _factor_word(rng, length=7):
    return "".join(rng.choice(list("bcdfghjklmnpqrstvwxz")) + rng.choice(list("aeiou"))
                   for _ in range(length // 2))


def generate_synthetic(spec, rng):
    """Latent-factor implicit-feedback corpus whose item text tracks the factors.

    Users draw interactions with probability ``sigmoid(scale * u.v + a_u + b)``
    where ``a_u`` spreads per-user activity and ``b`` is solved so the mean
    interaction count hits the target. Each item's text mixes words tied to
    its two strongest latent dimensions with ``noise``-fraction filler words.
    """
    if spec.target_avg_interactions < 2:
        raise ValueError("target_avg_interactions must be >= 2")
    if spec.target_avg_interactions > spec.m - 1:
        raise ValueError("target_avg_interactions must leave items to hold out")
    n, m, k = spec.n, spec.m, spec.latent_dim
    U = rng.normal(size=(n, k)) / math.sqrt(k)
    V = rng.normal(size=(m, k)) / math.sqrt(k)
    activity = rng.normal(0.0, spec.activity_spread, size=n)
    logits = spec.signal_scale * (U @ V.T) + activity[:, None]

    target = spec.target_avg_interactions * n
    lo, hi = -30.0, 30.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if sigmoid(logits + mid).sum() > target:
            hi = mid
        else:
            lo = mid
    bias = 0.5 * (lo + hi)
    probs = sigmoid(logits + bias)
    draws = rng.random((n, m)) < probs

    per_user = []
    for u in range(n):
        items = np.flatnonzero(draws[u])
        if items.size < 2:
            # top up with the user's most likely items
            ranked = np.argsort(-probs[u], kind="stable")
            items = np.union1d(items, ranked[: 2])
            if items.size < 2:
                items = np.union1d(items, ranked[:3])[:2]
        per_user.append(np.sort(items).astype(np.int64))
    ds = InteractionDataset(n, m, per_user)
    if ds.n_interactions < 2 * n:
        raise ValueError("infeasible spec: fewer than 2 interactions per user")

    # two words per (dimension, sign) plus a filler vocabulary
    factor_vocab = [[[_factor_word(rng) for _ in range(2)] for _ in range(2)] for _ in range(k)]
    filler = [_factor_word(rng, 6) for _ in range(spec.text_vocab)]
    order = np.argsort(-np.abs(V), axis=1)
    texts = []
    for i in range(m):
        words = []
        for w in range(spec.words_per_item):
            if rng.random() < spec.noise:
                words.append(filler[rng.integers(len(filler))])
            else:
                dim = order[i, 0] if w % 3 != 2 else order[i, 1]
                sign = int(V[i, dim] > 0)
                words.append(factor_vocab[dim][sign][rng.integers(2)])
        texts.append(" ".join(words))
    top = order[:, 0]
    dominant = 2 * top + (V[np.arange(m), top] > 0)
    truth = SyntheticTruth(U, V, dominant.astype(np.int64), bias)
    return ds, ItemCorpus(texts), truth
