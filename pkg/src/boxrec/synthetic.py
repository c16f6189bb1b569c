"""Box worlds: synthetic users whose true interests are literal boxes.

Items are uniform points in ``[-1, 1]^d0``; a user interacts with the items
inside any of their boxes, in an order given by a sticky random walk over
their boxes, plus a fraction of random out-of-box items as label noise.
The model never sees the features, so recovering the structure is a real
test of the learned embeddings.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Interaction, SplitDataset, chronological_split
from .errors import DataError, InvalidArgumentError
from .geometry import DistanceParams, Hypercuboid, composite_distance, contains

BASE_TIMESTAMP = 1_600_000_000


@dataclass
class BoxWorld:
    item_features: np.ndarray
    true_boxes: list  # per user: list of Hypercuboid
    log: list
    noise_pairs: set = field(default_factory=set)  # (user_index, item_index)
    seed: int = 0

    @property
    def n_users(self):
        return len(self.true_boxes)

    @property
    def n_items(self):
        return len(self.item_features)

    def in_box_mask(self, user_index: int) -> np.ndarray:
        """Items (by world index) inside any of the user's true boxes."""
        mask = np.zeros(self.n_items, dtype=bool)
        for box in self.true_boxes[user_index]:
            mask |= contains(box, self.item_features)
        return mask

    def box_labels(self, user_index: int) -> np.ndarray:
        """Index of the first true box containing each item, -1 when none."""
        labels = np.full(self.n_items, -1)
        for j, box in reversed(list(enumerate(self.true_boxes[user_index]))):
            labels[contains(box, self.item_features)] = j
        return labels


def user_name(i: int) -> str:
    return f"u{i}"


def item_name(i: int) -> str:
    return f"i{i}"


def world_index(external: str) -> int:
    return int(external[1:])


def _random_box(rng, d0, offset_range):
    offset = rng.uniform(*offset_range, size=d0)
    center = rng.uniform(-1 + offset, 1 - offset)
    return Hypercuboid(center, offset)


def generate_box_world(n_users=50, n_items=500, d0=4, boxes_per_user=1, noise=0.05, seed=0,
                       offset_range=(0.4, 0.7), stay_prob=0.8, max_retries=100) -> BoxWorld:
    """Generate a world; a pure function of its arguments."""
    if n_items < 50:
        raise InvalidArgumentError("n_items must be >= 50")
    if d0 < 2:
        raise InvalidArgumentError("d0 must be >= 2")
    if not 0 <= noise < 1:
        raise InvalidArgumentError("noise must lie in [0, 1)")
    lo, hi = offset_range
    if not 0 < lo <= hi <= 1:
        raise InvalidArgumentError("offset_range must satisfy 0 < lo <= hi <= 1")
    rng = np.random.default_rng(seed)
    features = rng.uniform(-1.0, 1.0, size=(n_items, d0))
    all_boxes, log, noise_pairs = [], [], set()
    for u in range(n_users):
        for _ in range(max_retries):
            boxes = [_random_box(rng, d0, offset_range) for _ in range(boxes_per_user)]
            member = np.stack([contains(b, features) for b in boxes])
            if member.any(axis=0).sum() > 0 and member.any(axis=1).all():
                break
        else:
            raise DataError(f"user {u}: no box with in-box items after {max_retries} retries")
        all_boxes.append(boxes)
        # each in-box item is filed under one containing box, chosen at random
        pools = [[] for _ in boxes]
        for item in np.flatnonzero(member.any(axis=0)):
            owners = np.flatnonzero(member[:, item])
            pools[int(rng.choice(owners))].append(int(item))
        for pool in pools:
            rng.shuffle(pool)
        sequence = []
        current = int(rng.integers(len(boxes)))
        while any(pools):
            if not pools[current] or (len(boxes) > 1 and rng.random() > stay_prob):
                options = [j for j, p in enumerate(pools) if p and j != current] or [current]
                current = int(rng.choice(options))
            if pools[current]:
                sequence.append(pools[current].pop())
        n_noise = int(round(noise * len(sequence)))
        if n_noise:
            outside = np.flatnonzero(~member.any(axis=0))
            picks = rng.choice(outside, size=min(n_noise, len(outside)), replace=False)
            for item in picks:
                pos = int(rng.integers(len(sequence) + 1))
                sequence.insert(pos, int(item))
                noise_pairs.add((u, int(item)))
        for t, item in enumerate(sequence):
            log.append(Interaction(user_name(u), item_name(item), BASE_TIMESTAMP + 60 * t))
    return BoxWorld(features, all_boxes, log, noise_pairs, seed)


def world_split(world: BoxWorld, name="boxworld") -> SplitDataset:
    """Chronological 70/10/20 split of the world's log (no activity filtering)."""
    return chronological_split(world.log, name=name)


def expected_positives(n_items, d0, offset_range) -> float:
    """Expected in-box count for one box: boxes lie inside the cube, volume share prod(offset)."""
    lo, hi = offset_range
    return n_items * ((lo + hi) / 2) ** d0


# -- grid oracle -------------------------------------------------------------------


def grid_nearest_point_oracle(box: Hypercuboid, item, resolution=50, exhaustive=False):
    """Brute-force closest box point to ``item`` over a regular grid.

    Each axis of the box is sampled at ``resolution`` evenly spaced values,
    corners included. The squared distance is a sum of per-axis terms, so the
    argmin over the product grid is the product of per-axis argmins; that is
    what runs by default. ``exhaustive=True`` searches the full product grid
    instead (only sensible for small ``d``). Returns (point, squared distance).
    """
    d = box.dim
    if d > 5:
        raise InvalidArgumentError("grid oracle supports d <= 5")
    if resolution < 50:
        raise InvalidArgumentError("resolution must be >= 50")
    item = np.asarray(item, dtype=np.float64)
    if item.shape != (d,):
        raise InvalidArgumentError("item dimension does not match box")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(box.lower, box.upper)]
    if exhaustive:
        grid = np.array(list(itertools.product(*axes)))
        dist = np.sum((grid - item) ** 2, axis=1)
        j = int(np.argmin(dist))
        point = grid[j]
    else:
        point = np.array([ax[np.argmin((ax - x) ** 2)] for ax, x in zip(axes, item)])
    inside = np.all((box.lower <= item) & (item <= box.upper))
    if inside:
        # the item itself is a point of the closed box
        return item.copy(), 0.0
    return point, float(np.sum((point - item) ** 2))


def grid_tolerance(box: Hypercuboid, oracle_distance: float, resolution=50) -> float:
    """Bound on |oracle squared distance - exact squared distance|.

    Each grid coordinate is within half a cell of the exact nearest point, so
    with ``s`` the half-cell diagonal, ``|D_o - D| <= 2 sqrt(D) s + s^2`` and
    ``sqrt(D) <= sqrt(D_o) + s``.
    """
    s = float(np.linalg.norm(box.offset / (resolution - 1)))
    return 2 * (np.sqrt(oracle_distance) + s) * s + s * s + 1e-12


# -- recovery report ---------------------------------------------------------------


def auc_from_distances(pos: np.ndarray, neg: np.ndarray) -> float:
    """P(random positive ranks strictly ahead of random negative), ties count half."""
    if len(pos) == 0 or len(neg) == 0:
        raise InvalidArgumentError("AUC needs both positives and negatives")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    upto = np.searchsorted(neg_sorted, pos, side="right")
    greater = len(neg) - upto
    ties = upto - below
    return float((greater + 0.5 * ties).sum() / (len(pos) * len(neg)))


@dataclass
class RecoveryReport:
    auc: float
    per_user_auc: dict
    recall_at_k: float
    random_recall_at_k: float
    purity: float
    aligned_fraction: float
    k: int = 10

    def lines(self):
        return [
            f"in-box AUC (mean over users)\t{self.auc:.4f}",
            f"Recall@{self.k}\t{self.recall_at_k:.4f}",
            f"random Recall@{self.k}\t{self.random_recall_at_k:.4f}",
            f"cluster purity (true boxes covered)\t{self.purity:.4f}",
            f"users with distinct aligned boxes\t{self.aligned_fraction:.4f}",
        ]


def box_purity(world: BoxWorld, u: int, boxes, item_ids, items, gamma, n_near=10):
    """(coverage, aligned) for one user's learned boxes.

    Each learned box is labeled with the majority true box among its
    ``n_near`` nearest items (-1 when most fall in no true box). Coverage is
    the share of true boxes named by some label; aligned means every learned
    box got a distinct valid label.
    """
    labels = world.box_labels(u)[[world_index(x) for x in item_ids]]
    params = DistanceParams(gamma=gamma)
    picks = []
    for box in boxes.boxes:
        dist = composite_distance(box, items, params)
        near = labels[np.lexsort((np.arange(len(dist)), dist))[:n_near]]
        values, counts = np.unique(near, return_counts=True)
        picks.append(int(values[np.argmax(counts)]))
    valid = {p for p in picks if p >= 0}
    coverage = len(valid) / len(world.true_boxes[u])
    aligned = len(valid) == len(picks) and all(p >= 0 for p in picks)
    return coverage, aligned


def recovery_report(model, split: SplitDataset, world: BoxWorld, k=10, n_near=10) -> RecoveryReport:
    """How well a trained model recovers the world's true boxes."""
    from .evaluation import evaluate, random_recall_baseline, rank_users

    item_ids = split.item_vocab.ids
    item_world = np.array([world_index(x) for x in item_ids])
    items = model.item_matrix()[1:]
    rows = rank_users(model, split)
    boxsets = model.encode(np.stack([_window(split, u, model.config.L) for u in split.users]))
    aucs = {}
    coverages, aligned = [], []
    for row, boxes in zip(rows, boxsets):
        u = world_index(split.user_vocab.to_external(row.user))
        in_box = world.in_box_mask(u)[item_world]  # indexed by internal id - 1
        test = [i for i in split.test.get(row.user, ())
                if (u, int(item_world[i - 1])) not in world.noise_pairs and in_box[i - 1]]
        dist_by_item = dict(zip(row.ranked.tolist(), row.distances.tolist()))
        pos = np.array([dist_by_item[i] for i in test if i in dist_by_item])
        neg = np.array([dist_by_item[i] for i in row.ranked.tolist() if not in_box[i - 1]])
        if len(pos) and len(neg):
            aucs[row.user] = auc_from_distances(pos, neg)
        cov, ok = box_purity(world, u, boxes, item_ids, items, model.config.gamma, n_near)
        coverages.append(cov)
        aligned.append(ok)
    table = evaluate(model, split, ks=(k,))
    return RecoveryReport(
        auc=float(np.mean(list(aucs.values()))) if aucs else float("nan"),
        per_user_auc=aucs,
        recall_at_k=table.get("recall", k),
        random_recall_at_k=random_recall_baseline(split, k),
        purity=float(np.mean(coverages)),
        aligned_fraction=float(np.mean(aligned)),
        k=k,
    )


def _window(split, user, L):
    from .evaluation import user_window

    return user_window(split, user, L)


# -- serialization -----------------------------------------------------------------


def save_world(world: BoxWorld, directory) -> Path:
    """Log in the ingest format plus ground-truth sidecars."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "log.tsv").write_text(
        "".join(f"{r.user}\t{r.item}\t{r.timestamp}\n" for r in world.log), encoding="utf-8")
    fmt = lambda v: ",".join(repr(float(x)) for x in v)  # noqa: E731
    truth = [
        f"{user_name(u)}\t{j}\t{fmt(b.center)}\t{fmt(b.offset)}"
        for u, boxes in enumerate(world.true_boxes) for j, b in enumerate(boxes)
    ]
    (directory / "truth.tsv").write_text("\n".join(truth) + "\n", encoding="utf-8")
    (directory / "item_features.tsv").write_text(
        "".join(f"{item_name(i)}\t{fmt(x)}\n" for i, x in enumerate(world.item_features)),
        encoding="utf-8")
    (directory / "noise.tsv").write_text(
        "".join(f"{user_name(u)}\t{item_name(i)}\n" for u, i in sorted(world.noise_pairs)),
        encoding="utf-8")
    return directory


def load_world(directory) -> BoxWorld:
    from .datasets import load_log

    directory = Path(directory)
    parse = lambda s: np.array([float(x) for x in s.split(",")])  # noqa: E731
    feats = [parse(line.split("\t")[1]) for line in
             (directory / "item_features.tsv").read_text(encoding="utf-8").splitlines() if line]
    boxes: dict[int, list] = {}
    for line in (directory / "truth.tsv").read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        user, _, center, offset = line.split("\t")
        boxes.setdefault(world_index(user), []).append(Hypercuboid(parse(center), parse(offset)))
    noise = set()
    for line in (directory / "noise.tsv").read_text(encoding="utf-8").splitlines():
        if line:
            user, item = line.split("\t")
            noise.add((world_index(user), world_index(item)))
    log = load_log(directory / "log.tsv")
    return BoxWorld(np.stack(feats), [boxes[u] for u in sorted(boxes)], log, noise)
