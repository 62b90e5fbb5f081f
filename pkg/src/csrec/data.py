"""Interaction / sharing-log ingestion, leave-one-out splits, user groups and
synthetic corpora."""

from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class DataError(ValueError):
    """Raised for malformed input files or inconsistent records."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Users, items, interaction records and sharing triplets.

    ``user_ids[u]`` is the external id of dense user index ``u`` (same for
    items).  ``shares`` is an ``(n, 3)`` int array of ``(user, friend, item)``
    triplets, kept in log order.
    """

    user_ids: tuple
    item_ids: tuple
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    shares: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    timestamps: np.ndarray | None = None
    explicit: bool = False

    def __post_init__(self):
        for name in ("users", "items", "values", "shares", "timestamps"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)
        if len(set(self.user_ids)) != len(self.user_ids):
            raise DataError("user id map is not bijective")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise DataError("item id map is not bijective")
        M, N = self.num_users, self.num_items
        if len(self.users) and (self.users.max() >= M or self.items.max() >= N):
            raise DataError("interaction index out of range")
        if len(self.shares):
            if self.shares[:, :2].max() >= M or self.shares[:, 2].max() >= N:
                raise DataError("share index out of range")
            if np.any(self.shares[:, 0] == self.shares[:, 1]):
                raise DataError("share triplet with user == friend")

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return len(self.users)

    @cached_property
    def user_index(self) -> dict:
        return {uid: u for u, uid in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict:
        return {iid: i for i, iid in enumerate(self.item_ids)}

    @cached_property
    def user_items(self) -> list[np.ndarray]:
        """Sorted item indices per user."""
        order = np.lexsort((self.items, self.users))
        counts = np.bincount(self.users, minlength=self.num_users)
        return np.split(self.items[order], np.cumsum(counts)[:-1])

    def interaction_set(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def replace(self, **changes) -> Dataset:
        fields = dict(
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            users=self.users,
            items=self.items,
            values=self.values,
            shares=self.shares,
            timestamps=self.timestamps,
            explicit=self.explicit,
        )
        fields.update(changes)
        return Dataset(**fields)


class SocialStrengths(dict):
    """Mapping ``(u, u') -> s`` with every strength in ``(0, 1]``."""

    def __setitem__(self, key, value):
        if not 0.0 <= value <= 1.0:
            raise DataError(f"social strength {value} for {key} outside [0, 1]")
        super().__setitem__(key, value)

    @classmethod
    def from_shares(cls, shares: np.ndarray) -> SocialStrengths:
        """Per-pair share count over the largest per-user share total."""
        out = cls()
        if len(shares) == 0:
            return out
        pair_counts = Counter(zip(shares[:, 0].tolist(), shares[:, 1].tolist()))
        max_total = max(Counter(shares[:, 0].tolist()).values())
        for pair, c in pair_counts.items():
            out[pair] = min(1.0, c / max_total)
        return out

    def symmetrized(self) -> SocialStrengths:
        """Add each reverse edge that was not itself logged, with the same strength."""
        out = SocialStrengths(self)
        for (u, v), s in self.items():
            if (v, u) not in out:
                out[(v, u)] = s
        return out


@dataclass(frozen=True, eq=False)
class Split:
    train: Dataset
    test: list[tuple[int, int]]
    train_only_users: int = 0

    @property
    def test_users(self) -> np.ndarray:
        return np.array([u for u, _ in self.test], dtype=np.int64)

    @property
    def test_items(self) -> np.ndarray:
        return np.array([i for _, i in self.test], dtype=np.int64)


def _reader(path):
    f = open(path, newline="", encoding="utf-8")
    return f, csv.reader(f)


def load_interactions(path, mode: str = "implicit") -> Dataset:
    """Read an interactions CSV (``user_id,item_id[,rating][,timestamp]``).

    Dense indices follow first-seen order. In implicit mode duplicate
    ``(user, item)`` records collapse to the first occurrence (keeping the
    latest timestamp); in explicit mode the last rating wins.
    """
    if mode not in ("implicit", "explicit"):
        raise ValueError(f"unknown mode {mode!r}")
    explicit = mode == "explicit"
    f, reader = _reader(path)
    with f:
        rows = list(reader)
    if not rows:
        return _build([], [], explicit=explicit)
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["user_id", "item_id"]:
        raise DataError(f"{path}:1: expected header starting with user_id,item_id")
    col_rating = header.index("rating") if "rating" in header else None
    col_ts = header.index("timestamp") if "timestamp" in header else None
    if explicit and col_rating is None:
        raise DataError(f"{path}: explicit mode needs a rating column")

    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        uid, iid = row[0].strip(), row[1].strip()
        if not uid or not iid:
            raise DataError(f"{path}:{lineno}: empty id")
        try:
            rating = float(row[col_rating]) if col_rating is not None and row[col_rating].strip() else None
            ts = float(row[col_ts]) if col_ts is not None and row[col_ts].strip() else None
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if explicit and rating is None:
            raise DataError(f"{path}:{lineno}: missing rating in explicit mode")
        records.append((uid, iid, rating, ts))
    has_ts = col_ts is not None
    return _build(records, [], explicit=explicit, has_timestamps=has_ts)


def _build(records, shares, explicit=False, has_timestamps=False, user_ids=(), item_ids=()):
    uidx = {uid: k for k, uid in enumerate(user_ids)}
    iidx = {iid: k for k, iid in enumerate(item_ids)}
    pairs: dict[tuple[int, int], list] = {}
    for uid, iid, rating, ts in records:
        u = uidx.setdefault(uid, len(uidx))
        i = iidx.setdefault(iid, len(iidx))
        value = rating if explicit else 1.0
        if (u, i) in pairs:
            rec = pairs[(u, i)]
            if explicit:
                rec[0], rec[1] = value, ts
            elif ts is not None and (rec[1] is None or ts > rec[1]):
                rec[1] = ts
        else:
            pairs[(u, i)] = [value, ts]
    n = len(pairs)
    users = np.fromiter((u for u, _ in pairs), dtype=np.int64, count=n)
    items = np.fromiter((i for _, i in pairs), dtype=np.int64, count=n)
    values = np.fromiter((r[0] for r in pairs.values()), dtype=np.float64, count=n)
    timestamps = None
    if has_timestamps:
        timestamps = np.array([np.nan if r[1] is None else r[1] for r in pairs.values()], dtype=np.float64)
    return Dataset(
        user_ids=tuple(uidx),
        item_ids=tuple(iidx),
        users=users,
        items=items,
        values=values,
        shares=np.asarray(shares, dtype=np.int64).reshape(-1, 3),
        timestamps=timestamps,
        explicit=explicit,
    )


def load_shares(path, dataset: Dataset, strict: bool = False) -> tuple[Dataset, SocialStrengths]:
    """Read a shares CSV (``user_id,friend_id,item_id``) against ``dataset``.

    Returns the dataset with the triplets attached and the derived social
    strengths. Ids unknown to the dataset are appended to its id maps unless
    ``strict`` is set.
    """
    f, reader = _reader(path)
    with f:
        rows = list(reader)
    user_ids, item_ids = list(dataset.user_ids), list(dataset.item_ids)
    uidx, iidx = dict(dataset.user_index), dict(dataset.item_index)
    triplets = []
    if rows:
        header = [h.strip() for h in rows[0]]
        if header != ["user_id", "friend_id", "item_id"]:
            raise DataError(f"{path}:1: expected header user_id,friend_id,item_id")
    for record, row in enumerate(rows[1:]):
        lineno = record + 2
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        uid, fid, iid = (c.strip() for c in row)
        if uid == fid:
            raise DataError(f"{path}: record {record} (line {lineno}) is a self-share")
        idx = []
        for ext, table, ids, kind in ((uid, uidx, user_ids, "user"), (fid, uidx, user_ids, "user"),
                                      (iid, iidx, item_ids, "item")):
            if ext not in table:
                if strict:
                    raise DataError(f"{path}:{lineno}: unknown {kind} id {ext!r}")
                table[ext] = len(ids)
                ids.append(ext)
            idx.append(table[ext])
        triplets.append(idx)
    shares = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    out = dataset.replace(user_ids=tuple(user_ids), item_ids=tuple(item_ids), shares=shares)
    return out, SocialStrengths.from_shares(shares)


def write_interactions(dataset: Dataset, path) -> None:
    header = ["user_id", "item_id"]
    if dataset.explicit:
        header.append("rating")
    if dataset.timestamps is not None:
        header.append("timestamp")
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for k in range(dataset.num_interactions):
            row = [dataset.user_ids[dataset.users[k]], dataset.item_ids[dataset.items[k]]]
            if dataset.explicit:
                row.append(repr(float(dataset.values[k])))
            if dataset.timestamps is not None:
                ts = dataset.timestamps[k]
                row.append("" if np.isnan(ts) else repr(float(ts)))
            w.writerow(row)


def write_shares(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["user_id", "friend_id", "item_id"])
        for u, v, i in dataset.shares.tolist():
            w.writerow([dataset.user_ids[u], dataset.user_ids[v], dataset.item_ids[i]])


def leave_one_out_split(dataset: Dataset, seed: int) -> Split:
    """Hold out one interaction per user with at least two of them.

    The held-out record is the latest by timestamp when timestamps exist
    (ties go to the later record), otherwise a seeded uniform pick.
    """
    rng = np.random.default_rng(seed)
    by_user: list[list[int]] = [[] for _ in range(dataset.num_users)]
    for k, u in enumerate(dataset.users.tolist()):
        by_user[u].append(k)
    ts = dataset.timestamps
    held = []
    skipped = 0
    for u, recs in enumerate(by_user):
        if len(recs) < 2:
            if recs:
                skipped += 1
            continue
        if ts is not None and not np.all(np.isnan(ts[recs])):
            stamps = np.nan_to_num(ts[recs], nan=-np.inf)
            k = recs[len(recs) - 1 - int(np.argmax(stamps[::-1]))]
        else:
            k = recs[int(rng.integers(len(recs)))]
        held.append(k)
    mask = np.ones(dataset.num_interactions, dtype=bool)
    mask[held] = False
    train = dataset.replace(
        users=dataset.users[mask].copy(),
        items=dataset.items[mask].copy(),
        values=dataset.values[mask].copy(),
        timestamps=None if ts is None else ts[mask].copy(),
    )
    test = [(int(dataset.users[k]), int(dataset.items[k])) for k in held]
    return Split(train=train, test=test, train_only_users=skipped)


GROUP_LABELS = ("0", "1", "2-3", ">3")


def share_counts(dataset: Dataset) -> np.ndarray:
    """Number of triplets each user appears in, as sharer or as friend."""
    counts = np.zeros(dataset.num_users, dtype=np.int64)
    if len(dataset.shares):
        np.add.at(counts, dataset.shares[:, 0], 1)
        np.add.at(counts, dataset.shares[:, 1], 1)
    return counts


def group_label(count: int) -> str:
    if count <= 1:
        return GROUP_LABELS[count]
    return "2-3" if count <= 3 else ">3"


def group_users_by_share_count(dataset: Dataset) -> dict[str, set[int]]:
    groups = {label: set() for label in GROUP_LABELS}
    for u, c in enumerate(share_counts(dataset).tolist()):
        groups[group_label(c)].add(u)
    return groups


# -- synthetic corpora -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic corpus generator.

    ``interactions_per_user`` is an inclusive ``(lo, hi)`` range of per-user
    interaction counts and ``shares_per_user`` the mean number of share logs
    a user emits. Each user has ``interests`` favourite latent dimensions; a
    friend pair agrees on ``friend_overlap`` of them.
    """

    users: int = 300
    items: int = 500
    k_true: int = 16
    interactions_per_user: tuple[int, int] = (2, 5)
    shares_per_user: float = 1.4
    noise: float = 0.5
    interests: int = 2
    friends_per_user: int = 3
    friend_overlap: int = 1

    def validate(self):
        if self.k_true < 1:
            raise DataError("k_true must be >= 1")
        if self.users < 2:
            raise DataError("need at least 2 users")
        if self.items < 1:
            raise DataError("need at least 1 item")
        lo, hi = self.interactions_per_user
        if not 1 <= lo <= hi or hi >= self.items:
            raise DataError(f"bad interactions_per_user range {lo}-{hi}")
        if self.shares_per_user < 0 or self.noise < 0:
            raise DataError("shares_per_user and noise must be nonnegative")
        if not 1 <= self.interests <= self.k_true:
            raise DataError("interests must lie in [1, k_true]")
        if not 1 <= self.friend_overlap <= self.interests:
            raise DataError("friend_overlap must lie in [1, interests]")
        if self.friends_per_user < 0:
            raise DataError("friends_per_user must be nonnegative")


_SPEC_KEYS = {
    "users": int,
    "items": int,
    "k_true": int,
    "shares_per_user": float,
    "noise": float,
    "interests": int,
    "friends_per_user": int,
    "friend_overlap": int,
}


def _parse_range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    lo = int(lo)
    return lo, int(hi) if hi else lo


def parse_synthetic_spec(text: str) -> SyntheticSpec:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise DataError(f"line {lineno}: expected key=value")
        try:
            if key == "interactions_per_user":
                kwargs[key] = _parse_range(value)
            elif key in _SPEC_KEYS:
                kwargs[key] = _SPEC_KEYS[key](value)
            else:
                raise DataError(f"line {lineno}: unknown key {key!r}")
        except ValueError:
            raise DataError(f"line {lineno}: bad value {value!r} for {key}") from None
    spec = SyntheticSpec(**kwargs)
    spec.validate()
    return spec


def read_synthetic_spec(path) -> SyntheticSpec:
    with open(path, encoding="utf-8") as f:
        return parse_synthetic_spec(f.read())


def format_synthetic_spec(spec: SyntheticSpec) -> str:
    lo, hi = spec.interactions_per_user
    lines = [f"{k}={getattr(spec, k)}" for k in _SPEC_KEYS]
    lines.insert(3, f"interactions_per_user={lo}-{hi}")
    return "\n".join(lines) + "\n"


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Draw a corpus where friends agree on some latent dimensions only.

    Every item has one dominant topic dimension and every user a few
    favourite topics. Each friend pair is made to share ``friend_overlap``
    favourite topics while the rest of their tastes stay independent. Users
    interact with the items ranking highest under their noisy true score and
    share with a friend only items whose topic is one the pair agrees on.
    Sharing activity is heavy-tailed, so many users never share.
    """
    spec.validate()
    M, N, K = spec.users, spec.items, spec.k_true
    rng = np.random.default_rng(seed)

    topic = rng.integers(K, size=N)
    Q = 0.2 * np.abs(rng.standard_normal((N, K)))
    Q[np.arange(N), topic] += 1.0 + 0.5 * rng.random(N)

    interests = [list(rng.choice(K, size=spec.interests, replace=False)) for _ in range(M)]
    activity = rng.gamma(0.6, 1.0 / 0.6, size=M)

    # friends are drawn in proportion to sharing activity
    weights = activity / activity.sum()
    pairs: dict[tuple[int, int], list[int]] = {}
    for u in range(M):
        n_friends = min(spec.friends_per_user, M - 1)
        w = weights.copy()
        w[u] = 0.0
        for v in rng.choice(M, size=n_friends, replace=False, p=w / w.sum()):
            key = (min(u, int(v)), max(u, int(v)))
            if key in pairs:
                continue
            a, b = key
            agreed = [int(t) for t in rng.choice(interests[a], size=spec.friend_overlap, replace=False)]
            for t in agreed:
                if t not in interests[b]:
                    interests[b][rng.integers(spec.interests)] = t
            pairs[key] = agreed
    for (a, b), agreed in pairs.items():
        # a later pair may have overwritten b's copy of an agreed topic
        pairs[(a, b)] = [t for t in agreed if t in interests[a] and t in interests[b]]

    P = 0.3 * rng.standard_normal((M, K))
    for u in range(M):
        P[u, interests[u]] += 1.5 + rng.random(len(interests[u]))

    scores = P @ Q.T + spec.noise * rng.standard_normal((M, N))
    lo, hi = spec.interactions_per_user
    counts = rng.integers(lo, hi + 1, size=M)
    order = np.argsort(-scores, axis=1, kind="stable")
    chosen = [set(order[u, : counts[u]].tolist()) for u in range(M)]

    # coverage pass: hand each untouched item to its best-scoring user with room
    covered = set().union(*chosen)
    for i in range(N):
        if i in covered:
            continue
        for u in np.argsort(-scores[:, i], kind="stable"):
            if counts[u] < hi:
                chosen[u].add(i)
                counts[u] += 1
                break

    friends_of: list[list[int]] = [[] for _ in range(M)]
    for (a, b), agreed in pairs.items():
        if agreed:
            friends_of[a].append(b)
            friends_of[b].append(a)
    shares = []
    if spec.shares_per_user > 0:
        n_shares = rng.poisson(spec.shares_per_user * activity)
        for u in range(M):
            if not friends_of[u]:
                continue
            fw = activity[friends_of[u]] / activity[friends_of[u]].sum()
            for _ in range(n_shares[u]):
                v = friends_of[u][rng.choice(len(friends_of[u]), p=fw)]
                agreed = pairs[(min(u, v), max(u, v))]
                pool = sorted(i for i in chosen[u] if topic[i] in agreed)
                if not pool:
                    cand = np.flatnonzero(np.isin(topic, agreed))
                    pool = sorted(cand[np.argsort(-scores[u, cand], kind="stable")[:5]].tolist())
                shares.append((u, v, int(pool[rng.integers(len(pool))])))

    records = [(f"u{u}", f"i{i}", None, None) for u in range(M) for i in sorted(chosen[u])]
    base = _build(records, [], user_ids=[f"u{u}" for u in range(M)])
    extra = [f"i{i}" for _, _, i in shares if f"i{i}" not in base.item_index]
    item_ids = base.item_ids + tuple(dict.fromkeys(extra))
    item_idx = {iid: k for k, iid in enumerate(item_ids)}
    share_arr = np.array([(u, v, item_idx[f"i{i}"]) for u, v, i in shares], dtype=np.int64).reshape(-1, 3)
    return base.replace(item_ids=item_ids, shares=share_arr)


def save_corpus(dataset: Dataset, out_dir) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    ipath = os.path.join(out_dir, "interactions.csv")
    spath = os.path.join(out_dir, "shares.csv")
    write_interactions(dataset, ipath)
    write_shares(dataset, spath)
    return ipath, spath


def load_corpus(interactions_path, shares_path=None, mode="implicit", strict=False):
    """Load interactions and (optionally) shares; returns ``(dataset, strengths)``."""
    dataset = load_interactions(interactions_path, mode)
    if shares_path is None:
        return dataset, SocialStrengths()
    return load_shares(shares_path, dataset, strict=strict)
