"""Sliding-window instances, negative sampling, hinge loss and Adagrad training."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as configio
from .autodiff import Graph, Tensor
from .datasets import SplitDataset
from .encoder import PAD, EncoderConfig, box_distances, encode_user, init_params, pad_window
from .errors import DataError, InvalidArgumentError, NumericFaultError
from .geometry import boxset_distance

logger = logging.getLogger(__name__)

# parameters that receive the L2 term
L2_PARAMS = ("item_embeddings", "center_w", "offset_w")


@dataclass(frozen=True)
class TrainConfig:
    T: int = 3
    learning_rate: float = 0.05
    margin: float = 0.5
    batch_size: int = 4096
    l2: float = 1e-3
    epochs: int = 20
    seed: int = 0
    negatives_per_positive: int = 1
    resample_negatives: bool = True
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.margin > 0:
            raise InvalidArgumentError("margin must be positive")
        if self.learning_rate < 0:
            raise InvalidArgumentError("learning_rate must be >= 0")
        if self.T < 1 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("T and batch_size must be >= 1, epochs >= 0")
        if self.negatives_per_positive < 1:
            raise InvalidArgumentError("negatives_per_positive must be >= 1")


@dataclass
class TrainInstances:
    """Column-oriented instances. ``targets`` is right-padded with 0."""

    users: np.ndarray
    windows: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.users)

    @property
    def target_mask(self):
        return self.targets != PAD


def make_instances(split: SplitDataset, L: int, T: int) -> TrainInstances:
    """One instance per train position that has at least one following item."""
    users, windows, targets = [], [], []
    for user in split.users:
        seq = split.train[user]
        for t in range(len(seq) - 1):
            users.append(user)
            windows.append(pad_window(seq[: t + 1], L))
            nxt = seq[t + 1: t + 1 + T]
            targets.append(nxt + [PAD] * (T - len(nxt)))
    if not users:
        return TrainInstances(np.zeros(0, np.int64), np.zeros((0, L), np.int64),
                              np.zeros((0, T), np.int64))
    return TrainInstances(np.array(users, np.int64), np.stack(windows),
                          np.array(targets, np.int64))


class NegativeSampler:
    """Uniform draws from items outside a user's train positives."""

    def __init__(self, split: SplitDataset):
        self.n_items = split.n_items
        self.positives = {u: np.zeros(self.n_items + 1, dtype=bool) for u in split.users}
        for u in split.users:
            self.positives[u][split.train[u]] = True
            self.positives[u][PAD] = True

    def sample(self, user: int, count: int, rng: np.random.Generator) -> np.ndarray:
        blocked = self.positives[user]
        if blocked.sum() >= self.n_items + 1:
            raise DataError(f"user {user} has interacted with every item; no negatives left")
        out = rng.integers(1, self.n_items + 1, size=count)
        bad = blocked[out]
        while bad.any():
            out[bad] = rng.integers(1, self.n_items + 1, size=int(bad.sum()))
            bad = blocked[out]
        return out

    def sample_for(self, instances: TrainInstances, per_positive: int, rng) -> np.ndarray:
        """Negatives of shape (n_instances, T * per_positive), drawn in instance order."""
        T = instances.targets.shape[1]
        return np.stack([self.sample(int(u), T * per_positive, rng) for u in instances.users]) \
            if len(instances) else np.zeros((0, T * per_positive), np.int64)


def sample_negatives(split: SplitDataset, user: int, count: int, rng) -> np.ndarray:
    return NegativeSampler(split).sample(user, count, rng)


def hinge(g: Graph, pos: Tensor, neg: Tensor, margin: float, mask=None) -> Tensor:
    """Per-pair ``max(0, pos + margin - neg)``; masked pairs contribute zero."""
    terms = g.relu(g.add(g.sub(pos, neg), margin))
    if mask is not None:
        terms = g.mul(terms, np.asarray(mask, dtype=terms.dtype))
    return terms


def batch_loss(g: Graph, params, config: EncoderConfig, windows, targets, negatives,
               margin: float, train=False, rng=None):
    """Summed hinge loss and per-instance losses for one batch.

    Every window is encoded once and scores its T targets and their negatives.
    """
    boxes = encode_user(g, windows, config, params, train=train, rng=rng)
    T = targets.shape[1]
    k = negatives.shape[1] // T
    pos_ids = np.repeat(targets, k, axis=1)
    mask = pos_ids != PAD
    scored = np.concatenate([pos_ids, negatives], axis=1)
    items = g.gather_rows(params["item_embeddings"], scored)
    dist = box_distances(g, boxes, items, config.distance_params)
    n = pos_ids.shape[1]
    pos = g.slice(dist, (slice(None), slice(0, n)))
    neg = g.slice(dist, (slice(None), slice(n, 2 * n)))
    terms = hinge(g, pos, neg, margin, mask)
    per_instance = terms.value.sum(axis=1)
    return g.reduce_sum(terms), per_instance, int(mask.sum())


def hinge_loss(boxes, pos_item, neg_item, params, margin=0.5) -> float:
    """Closed-form hinge for a single box set (float64 geometry)."""
    return max(0.0, float(boxset_distance(boxes, pos_item, params)) + margin
               - float(boxset_distance(boxes, neg_item, params)))


class Adagrad:
    """Adagrad with additive L2 and sparse row updates for the item table."""

    def __init__(self, params: dict[str, Tensor], lr=0.05, l2=0.0, epsilon=1e-8,
                 l2_params=L2_PARAMS, sparse=("item_embeddings",)):
        self.params = params
        self.lr = lr
        self.l2 = l2
        self.epsilon = epsilon
        self.l2_params = set(l2_params)
        self.sparse = set(sparse)
        self.accumulators = {k: np.zeros_like(v.value) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], touched_rows: np.ndarray | None = None):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericFaultError("adagrad", f"gradient of {name}")
        for name, g in grads.items():
            theta = self.params[name].value
            acc = self.accumulators[name]
            if name in self.sparse:
                if touched_rows is None:
                    touched_rows = np.arange(theta.shape[0])
                rows = np.unique(touched_rows[touched_rows != PAD])
                g_rows = g[rows]
                if self.l2 and name in self.l2_params:
                    g_rows = g_rows + 2 * self.l2 * theta[rows]
                acc[rows] += g_rows * g_rows
                theta[rows] -= self.lr * g_rows / (np.sqrt(acc[rows]) + self.epsilon)
                continue
            if self.l2 and name in self.l2_params:
                g = g + 2 * self.l2 * theta
            acc += g * g
            theta -= self.lr * g / (np.sqrt(acc) + self.epsilon)


def adagrad_step(params, grads, state: Adagrad, lr=None, l2=None, touched_rows=None):
    if lr is not None:
        state.lr = lr
    if l2 is not None:
        state.l2 = l2
    state.step(grads, touched_rows)
    return params


@dataclass
class FitResult:
    config: EncoderConfig
    params: dict[str, Tensor]
    losses: list[float]
    checkpoint: Path | None = None


def fit(split: SplitDataset, model_config: EncoderConfig, train_config: TrainConfig,
        out_dir=None, params=None, log_every=0) -> FitResult:
    """Train from scratch (or from ``params``) and return parameters plus the loss trace.

    With ``out_dir``, writes ``checkpoint_epoch_XXX.bin`` after every epoch,
    ``model.bin`` for the last one, ``loss_trace.tsv`` and ``train.cfg``.
    """
    seed = train_config.seed
    init_rng = np.random.default_rng([seed, 0])
    sample_rng = np.random.default_rng([seed, 1])
    shuffle_rng = np.random.default_rng([seed, 2])
    dropout_rng = np.random.default_rng([seed, 3])

    instances = make_instances(split, model_config.L, train_config.T)
    if not len(instances):
        raise DataError("empty training set: no user has two or more train interactions")
    if params is None:
        params = init_params(model_config, split.n_items, init_rng)
    optimizer = Adagrad(params, lr=train_config.learning_rate, l2=train_config.l2,
                        epsilon=train_config.epsilon)
    sampler = NegativeSampler(split)
    per_pos = train_config.negatives_per_positive

    out = Path(out_dir) if out_dir is not None else None
    trace_lines = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        configio.write_config_file(out / "train.cfg", {**configio.as_dict(model_config),
                                                       **configio.as_dict(train_config)})
    losses = []
    negatives = None
    last_ckpt = None
    for epoch in range(1, train_config.epochs + 1):
        started = time.perf_counter()
        if negatives is None or train_config.resample_negatives:
            negatives = sampler.sample_for(instances, per_pos, sample_rng)
        order = shuffle_rng.permutation(len(instances))
        per_instance = np.zeros(len(instances))
        n_pairs = 0
        for b, start in enumerate(range(0, len(order), train_config.batch_size)):
            idx = order[start:start + train_config.batch_size]
            windows, targets, negs = instances.windows[idx], instances.targets[idx], negatives[idx]
            g = Graph()
            try:
                loss, inst_losses, pairs = batch_loss(
                    g, params, model_config, windows, targets, negs, train_config.margin,
                    train=True, rng=dropout_rng)
                grads = g.backward(loss, wrt=params)
                touched = np.unique(np.concatenate([windows.ravel(), targets.ravel(), negs.ravel()]))
                optimizer.step({k: grads[v] for k, v in params.items()}, touched)
            except NumericFaultError as exc:
                raise NumericFaultError(exc.op, f"epoch {epoch}, batch {b}") from exc
            per_instance[idx] = inst_losses
            n_pairs += pairs
        mean_loss = float(per_instance.sum() / max(n_pairs, 1))
        wall = time.perf_counter() - started
        losses.append(mean_loss)
        trace_lines.append(f"{epoch}\t{mean_loss:.6f}\t{wall:.3f}")
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.5f (%.2fs)", epoch, mean_loss, wall)
        if out is not None:
            last_ckpt = out / f"checkpoint_epoch_{epoch:03d}.bin"
            checkpoint.save_checkpoint(last_ckpt, model_config, params)
            (out / "loss_trace.tsv").write_text("\n".join(trace_lines) + "\n", encoding="utf-8")
    if out is not None:
        last_ckpt = out / "model.bin"
        checkpoint.save_checkpoint(last_ckpt, model_config, params)
    return FitResult(model_config, params, losses, last_ckpt)
