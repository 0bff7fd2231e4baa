"""Episode construction, inductive and transductive training, prediction.

Training is episodic: every step scores one image against its true pair and
a sample of negative pairs, and minimizes cross-entropy over the episode's
softmax. The transductive phase adds self-training: the model's confident
predictions on unlabeled test images become pseudo-labeled episodes scored
with a noise-robust generalized cross-entropy, while the seen training
episodes keep their plain cross-entropy term.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .data import ConceptPair, ConfigError
from .graph import NonFiniteError
from .model import EpisodeScorer, ModelDims, ModelParams, ScoreVariant

__all__ = [
    "TrainConfig",
    "Episode",
    "PseudoLabel",
    "EpochStats",
    "Adam",
    "build_episode",
    "episode_ce_loss",
    "gce_loss",
    "train_inductive",
    "train_transductive",
    "select_confident",
    "predict",
    "write_metrics_csv",
]


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference recipe."""

    n_t: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 5
    epochs_inductive: int = 25
    epochs_transductive: int = 10
    sample_interval: int = 1
    gamma: float = 10.0
    q: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"q must be in (0, 1], got {self.q}")
        if not self.gamma > 1.0:
            raise ConfigError(f"gamma must be > 1, got {self.gamma}")
        for name in (
            "n_t",
            "batch_size",
            "epochs_inductive",
            "epochs_transductive",
            "sample_interval",
            "lr_decay_every",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.lr_decay <= 0:
            raise ConfigError("learning rate must be >= 0 and decay positive")

    def lr_at(self, epoch):
        """Learning rate for a 1-based epoch under the step-decay schedule."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.lr_decay_every)


@dataclass
class Episode:
    image: object
    positive: ConceptPair
    negatives: list

    @property
    def candidates(self):
        return [self.positive] + list(self.negatives)


@dataclass
class PseudoLabel:
    image_id: str
    pair: ConceptPair
    ratio: float


@dataclass
class EpochStats:
    epoch: int
    phase: str
    loss: float
    selected: int
    top1: float


def build_episode(item, pair_pool, n_t, rng):
    """Sample ``n_t`` distinct negatives uniformly from the pool minus the positive.

    A pool smaller than ``n_t + 1`` clamps the negative count to what is
    available and records a warning.
    """
    positive = item.label
    others = [p for p in pair_pool if p.key != positive.key]
    if len(others) < n_t:
        warnings.warn(
            f"negative pool has {len(others)} pairs, clamping n_t={n_t}",
            RuntimeWarning,
            stacklevel=2,
        )
        n_t = len(others)
    idx = rng.choice(len(others), size=n_t, replace=False)
    return Episode(item, positive, [others[i] for i in idx])


def _pseudo_episode(item, pair, pair_pool, n_t, rng):
    others = [p for p in pair_pool if p.key != pair.key]
    take = min(n_t, len(others))
    idx = rng.choice(len(others), size=take, replace=False)
    return Episode(item, pair, [others[i] for i in idx])


def episode_ce_loss(scores, positive_index):
    """-log softmax(scores)[positive], computed on plain arrays."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= positive_index < scores.size:
        raise ConfigError("positive index out of range")
    m = scores.max()
    return float(np.log(np.exp(scores - m).sum()) - (scores[positive_index] - m))


def gce_loss(p, q):
    """Generalized cross-entropy (1 - p^q) / q; p is floored at 1e-12."""
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"q must be in (0, 1], got {q}")
    if p < 0 or p > 1:
        raise ConfigError(f"p must be in [0, 1], got {p}")
    p = max(p, 1e-12)
    return float((1.0 - p**q) / q)


class Adam:
    """First-order optimizer with bias correction; state is keyed by name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: ModelParams, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _run_epoch(scorer, episodes, adam, lr, cfg, epoch, phase):
    """One optimization epoch over prepared (episode, kind) work items."""
    losses = []
    hits = 0
    ce_count = 0
    grad_sums: dict = {}
    in_batch = 0

    def flush():
        nonlocal grad_sums, in_batch
        if in_batch:
            adam.step(
                scorer.params, {k: v / in_batch for k, v in grad_sums.items()}, lr
            )
        grad_sums = {}
        in_batch = 0

    for episode, kind in episodes:
        loss, grads, scores = scorer.loss_and_grads(
            episode.image, episode.candidates, 0, kind=kind, q=cfg.q
        )
        if not np.isfinite(loss):
            raise NonFiniteError(
                f"non-finite {kind} loss {loss!r} at {phase} epoch {epoch}"
            )
        losses.append(loss)
        if kind == "ce":
            ce_count += 1
            hits += int(np.argmax(scores) == 0)
        for name, g in grads.items():
            acc = grad_sums.get(name)
            grad_sums[name] = g if acc is None else acc + g
        in_batch += 1
        if in_batch >= cfg.batch_size:
            flush()
    flush()
    top1 = hits / ce_count if ce_count else 0.0
    return float(np.mean(losses)) if losses else 0.0, top1


def train_inductive(
    split,
    table,
    config: TrainConfig,
    dims: ModelDims,
    *,
    variant=None,
    params=None,
    epoch_callback=None,
):
    """Episode training over the seen pairs; returns (params, epoch history).

    Iterates the training images in a fresh shuffled order per epoch, builds
    one episode per image, and averages gradients over ``batch_size``
    episodes per optimizer step. ``epoch_callback(stats, params)`` may return
    True to stop early.
    """
    if not split.train:
        raise ConfigError("training set is empty")
    variant = variant or ScoreVariant()
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = ModelParams.init(dims, table, seed=config.seed)
    scorer = EpisodeScorer(params, dims, table, variant)
    adam = Adam()
    history = []
    pool = list(split.seen_pairs)
    for epoch in range(1, config.epochs_inductive + 1):
        order = rng.permutation(len(split.train))
        episodes = (
            (build_episode(split.train[i], pool, config.n_t, rng), "ce") for i in order
        )
        loss, top1 = _run_epoch(
            scorer, episodes, adam, config.lr_at(epoch), config, epoch, "inductive"
        )
        stats = EpochStats(epoch, "inductive", loss, 0, top1)
        history.append(stats)
        if epoch_callback and epoch_callback(stats, params):
            break
    return params, history


def select_confident(params, dims, table, items, candidates, gamma, *, variant=None, threads=1):
    """Keep items whose top-1/top-2 episode probability ratio strictly exceeds gamma.

    Probabilities come from a softmax over the full candidate pool; the
    pseudo-label is the argmax pair. Scoring is a read-only map, optionally
    threaded; the filter runs in item order either way.
    """
    if len(candidates) < 2:
        raise ConfigError("confidence selection needs at least two candidates")
    scorer = EpisodeScorer(params, dims, table, variant or ScoreVariant())
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda it: scorer.scores(it, candidates), items))
    else:
        rows = [scorer.scores(item, candidates) for item in items]
    selected = []
    for item, scores in zip(items, rows):
        e = np.exp(scores - scores.max())
        probs = e / e.sum()
        top = int(np.argmax(probs))
        p1 = probs[top]
        p2 = np.partition(probs, -2)[-2]
        ratio = float(p1 / max(p2, 1e-300))
        if ratio > gamma:
            selected.append(PseudoLabel(item.id, candidates[top], ratio))
    return selected


def train_transductive(
    params: ModelParams,
    split,
    table,
    config: TrainConfig,
    dims: ModelDims,
    *,
    setting="conventional",
    variant=None,
    epoch_callback=None,
):
    """Self-training on top of inductive parameters; the input is not mutated.

    Every ``sample_interval`` epochs the confident pseudo-label set over the
    test pool is rebuilt (replacing, not accumulating). Each epoch then
    minimizes the sum of the seen-episode cross-entropy and the generalized
    cross-entropy over pseudo-labeled episodes; an empty confident set
    degenerates the epoch to the seen term alone.
    """
    variant = variant or ScoreVariant()
    params = params.copy()
    rng = np.random.default_rng([config.seed, 1])
    scorer = EpisodeScorer(params, dims, table, variant)
    adam = Adam()
    history = []
    seen_pool = list(split.seen_pairs)
    trans_pool = split.candidate_pairs(setting)
    items_by_id = {item.id: item for item in split.test}
    pseudo: list = []
    for epoch in range(1, config.epochs_transductive + 1):
        if epoch % config.sample_interval == 0:
            pseudo = select_confident(
                params, dims, table, split.test, trans_pool, config.gamma,
                variant=variant,
            )
        work = [(item, item.label, "ce", seen_pool) for item in split.train]
        work += [
            (items_by_id[pl.image_id], pl.pair, "gce", trans_pool) for pl in pseudo
        ]
        order = rng.permutation(len(work))
        episodes = (
            (
                _pseudo_episode(work[i][0], work[i][1], work[i][3], config.n_t, rng),
                work[i][2],
            )
            for i in order
        )
        loss, top1 = _run_epoch(
            scorer, episodes, adam, config.lr_at(epoch), config, epoch, "transductive"
        )
        stats = EpochStats(epoch, "transductive", loss, len(pseudo), top1)
        history.append(stats)
        if epoch_callback and epoch_callback(stats, params):
            break
    return params, history


def predict(params, dims, table, item, candidates, *, variant=None):
    """Highest-scoring candidate pair; ties break toward the lowest index."""
    if not candidates:
        raise ConfigError("need at least one candidate pair")
    scorer = EpisodeScorer(params, dims, table, variant or ScoreVariant())
    scores = scorer.scores(item, candidates)
    return candidates[int(np.argmax(scores))]


def write_metrics_csv(path, history):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "phase", "loss", "selected", "top1"])
        for s in history:
            writer.writerow([s.epoch, s.phase, f"{s.loss:.10g}", s.selected, f"{s.top1:.10g}"])
