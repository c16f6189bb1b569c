"""Interaction logs: parsing, activity filtering, chronological splits, bundles."""
from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .errors import DataError, InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int
    rating: Optional[float] = None


def load_log(path, format="tsv", rating_threshold=None) -> list[Interaction]:
    """Read ``user, item, timestamp[, rating]`` rows.

    Rows carrying a rating below ``rating_threshold`` are dropped. Blank lines
    and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    if format not in ("tsv", "csv"):
        raise InvalidArgumentError(f"format must be tsv or csv, got {format!r}")
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    delimiter = "\t" if format == "tsv" else ","
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, fields in enumerate(csv.reader(fh, delimiter=delimiter), 1):
            if not fields or not "".join(fields).strip() or fields[0].startswith("#"):
                continue
            if len(fields) not in (3, 4):
                raise DataError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            user, item, ts = (f.strip() for f in fields[:3])
            try:
                timestamp = int(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
            if timestamp < 0:
                raise DataError(f"{path}:{lineno}: negative timestamp")
            rating = None
            if len(fields) == 4 and fields[3].strip():
                try:
                    rating = float(fields[3])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: rating {fields[3]!r} is not a number") from None
            if not user or not item:
                raise DataError(f"{path}:{lineno}: empty user or item id")
            rows.append(Interaction(user, item, timestamp, rating))
    if not rows:
        raise DataError(f"{path}: no interactions")
    if rating_threshold is not None:
        rows = [r for r in rows if r.rating is None or r.rating >= rating_threshold]
    return rows


def filter_min_activity(log, min_user=10, min_item=5) -> list[Interaction]:
    """Drop users with < ``min_user`` and items with < ``min_item`` interactions until stable."""
    log = list(log)
    while True:
        users = Counter(r.user for r in log)
        items = Counter(r.item for r in log)
        kept = [r for r in log if users[r.user] >= min_user and items[r.item] >= min_item]
        if len(kept) == len(log):
            break
        log = kept
    if not log:
        raise DataError("no interactions survive activity filtering")
    return log


class Vocab:
    """External string ids <-> dense internal ids starting at 1 (0 is padding)."""

    def __init__(self, external_ids=()):
        self.ids: list[str] = []
        self.index: dict[str, int] = {}
        for ext in external_ids:
            self.add(ext)

    def add(self, ext: str) -> int:
        if ext not in self.index:
            self.ids.append(ext)
            self.index[ext] = len(self.ids)
        return self.index[ext]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, ext):
        return ext in self.index

    def to_internal(self, ext: str) -> int:
        try:
            return self.index[ext]
        except KeyError:
            raise InvalidArgumentError(f"unknown id {ext!r}") from None

    def to_external(self, internal: int) -> str:
        if not 1 <= internal <= len(self.ids):
            raise InvalidArgumentError(f"internal id {internal} out of range")
        return self.ids[internal - 1]


def split_sizes(n: int, ratios=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """Per-user (train, val, test) counts.

    train = floor(r_train * n), val = round-half-up(r_val * n), test takes the
    rest; val then train shrink if needed so that test keeps at least one item.
    """
    r_train, r_val = (Fraction(str(r)) for r in ratios[:2])
    n_train = int(r_train * n)
    n_val = int(r_val * n + Fraction(1, 2))
    n_val = min(n_val, n - n_train)
    while n - n_train - n_val < 1 and n_val > 0:
        n_val -= 1
    while n - n_train - n_val < 1 and n_train > 1:
        n_train -= 1
    return n_train, n_val, n - n_train - n_val


@dataclass
class SplitDataset:
    user_vocab: Vocab
    item_vocab: Vocab
    train: dict[int, list[int]]
    val: dict[int, list[int]]
    test: dict[int, list[int]]
    excluded_users: int = 0
    name: str = "dataset"
    rated: dict = field(default_factory=dict, repr=False)

    @property
    def n_items(self):
        return len(self.item_vocab)

    @property
    def n_users(self):
        return len(self.user_vocab)

    @property
    def users(self):
        return sorted(self.train)

    def rated_items(self, user: int) -> set[int]:
        """Items seen in train or validation (excluded from ranking)."""
        if user not in self.rated:
            self.rated[user] = set(self.train[user]) | set(self.val.get(user, ()))
        return self.rated[user]

    def n_interactions(self):
        return sum(len(s[u]) for s in (self.train, self.val, self.test) for u in s)

    def stats(self) -> dict:
        n = self.n_interactions()
        return {
            "interactions": n,
            "users": self.n_users,
            "items": self.n_items,
            "density_percent": 100.0 * n / (self.n_users * self.n_items),
        }


def chronological_split(log, ratios=(0.7, 0.1, 0.2), name="dataset") -> SplitDataset:
    """Per user, sort by (timestamp, input order) and cut into train/val/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidArgumentError("split ratios must sum to 1")
    by_user = defaultdict(list)
    for order, r in enumerate(log):
        by_user[r.user].append((r.timestamp, order, r.item))
    user_vocab, item_vocab = Vocab(), Vocab()
    train, val, test = {}, {}, {}
    excluded = 0
    for user, events in by_user.items():
        if len(events) < 3:
            excluded += 1
            continue
        events.sort()
        uid = user_vocab.add(user)
        items = [item_vocab.add(item) for _, _, item in events]
        n_train, n_val, _ = split_sizes(len(items), ratios)
        train[uid] = items[:n_train]
        val[uid] = items[n_train:n_train + n_val]
        test[uid] = items[n_train + n_val:]
    if excluded:
        logger.warning("%d users with fewer than 3 interactions excluded from the split", excluded)
    if not train:
        raise DataError("no user has enough interactions to split")
    return SplitDataset(user_vocab, item_vocab, train, val, test, excluded, name)


def inference_history(split: SplitDataset, user: int) -> list[int]:
    """Train items followed by validation items."""
    if user not in split.train:
        raise InvalidArgumentError(f"unknown user {user}")
    return split.train[user] + split.val.get(user, [])


# -- bundle directory ----------------------------------------------------------

_SPLITS = ("train", "val", "test")


def save_bundle(split: SplitDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "users.txt").write_text("".join(f"{u}\n" for u in split.user_vocab.ids), encoding="utf-8")
    (directory / "items.txt").write_text("".join(f"{i}\n" for i in split.item_vocab.ids), encoding="utf-8")
    for part in _SPLITS:
        seqs = getattr(split, part)
        lines = [" ".join(str(x) for x in [u, *seqs.get(u, [])]) for u in sorted(split.train)]
        (directory / f"{part}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    stats = split.stats()
    (directory / "stats.txt").write_text(
        "".join(f"{k}\t{v}\n" for k, v in {"name": split.name, **stats,
                                             "excluded_users": split.excluded_users}.items()),
        encoding="utf-8",
    )
    return directory


def load_bundle(directory) -> SplitDataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset bundle not found: {directory}")
    try:
        users = Vocab(directory.joinpath("users.txt").read_text(encoding="utf-8").splitlines())
        items = Vocab(directory.joinpath("items.txt").read_text(encoding="utf-8").splitlines())
        parts = {}
        for part in _SPLITS:
            seqs = {}
            for lineno, line in enumerate(directory.joinpath(f"{part}.txt").read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                uid, *rest = (int(x) for x in line.split())
                seqs[uid] = rest
            parts[part] = seqs
    except FileNotFoundError as exc:
        raise DataError(f"incomplete bundle {directory}: {exc.filename} missing") from None
    except ValueError as exc:
        raise DataError(f"malformed bundle {directory}: {exc}") from None
    excluded = 0
    name = directory.name
    stats_file = directory / "stats.txt"
    if stats_file.exists():
        meta = dict(line.split("\t", 1) for line in stats_file.read_text(encoding="utf-8").splitlines() if "\t" in line)
        excluded = int(meta.get("excluded_users", 0))
        name = meta.get("name", name)
    return SplitDataset(users, items, parts["train"], parts["val"], parts["test"], excluded, name)
