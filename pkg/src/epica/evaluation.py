"""Conventional top-1 and generalized seen/unseen evaluation with AUC.

The generalized protocol adds a calibration bias to every unseen candidate's
score and sweeps it from -inf to +inf. Each item's correctness as a function
of the bias is a single step: an item with a seen true pair is correct below
some threshold, an item with an unseen true pair above one. Those per-item
thresholds are the exact breakpoints of the seen/unseen accuracy curve, so
the area under it can be computed deterministically without a bias grid.

The area convention closes the curve to the unseen-accuracy axis: a curve
that degenerates to a single point (s, u) has area s * u.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ConceptPair, ConfigError, DataFormatError, Domain, Vocab
from .model import EpisodeScorer, ScoreVariant

__all__ = [
    "ScoreMatrix",
    "AUCCurve",
    "EvalReport",
    "compute_scores",
    "top1_unseen",
    "biased_topk_acc",
    "auc_curve",
    "auc",
    "evaluate",
    "scores_to_csv",
    "scores_from_csv",
]


@dataclass
class ScoreMatrix:
    """Dense (items x candidates) scores plus domain tags on both axes."""

    vocab: Vocab
    item_ids: list
    true_idx: np.ndarray
    item_seen: np.ndarray
    candidates: list
    cand_seen: np.ndarray
    scores: np.ndarray

    @classmethod
    def build(cls, items, candidates, scores, vocab):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (len(items), len(candidates)):
            raise ConfigError(
                f"scores shape {scores.shape} != ({len(items)}, {len(candidates)})"
            )
        if not np.isfinite(scores).all():
            raise ConfigError("scores must be finite")
        index = {p.key: j for j, p in enumerate(candidates)}
        true_idx = np.empty(len(items), dtype=np.intp)
        item_seen = np.empty(len(items), dtype=bool)
        for i, item in enumerate(items):
            j = index.get(item.label.key)
            if j is None:
                raise ConfigError(
                    f"item {item.id!r}: ground-truth pair not among candidates"
                )
            true_idx[i] = j
            item_seen[i] = item.label.domain is Domain.SEEN
        cand_seen = np.array([p.domain is Domain.SEEN for p in candidates], dtype=bool)
        return cls(
            vocab,
            [item.id for item in items],
            true_idx,
            item_seen,
            list(candidates),
            cand_seen,
            scores,
        )

    @property
    def n_items(self):
        return self.scores.shape[0]

    @property
    def n_candidates(self):
        return self.scores.shape[1]


def compute_scores(params, dims, table, items, candidates, vocab, *, variant=None, threads=1):
    """Score every item against every candidate into a ScoreMatrix.

    With ``threads > 1`` items are scored concurrently; results are gathered
    in item order, so the output is identical to the single-thread path.
    """
    if not items:
        raise ConfigError("no items to score")
    scorer = EpisodeScorer(params, dims, table, variant or ScoreVariant())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda it: scorer.scores(it, candidates), items))
    else:
        rows = [scorer.scores(item, candidates) for item in items]
    return ScoreMatrix.build(items, candidates, np.stack(rows), vocab)


# -- conventional ----------------------------------------------------------------


def top1_unseen(sm: ScoreMatrix):
    """Fraction of items whose argmax candidate is the ground truth."""
    if sm.n_items == 0:
        raise ConfigError("empty item set")
    if sm.cand_seen.any():
        raise ConfigError("conventional evaluation expects unseen candidates only")
    pred = np.argmax(sm.scores, axis=1)
    return float((pred == sm.true_idx).mean())


# -- generalized -----------------------------------------------------------------


def _rank_of_truth(sm: ScoreMatrix, bias):
    """Number of candidates ranked above each item's true pair at this bias.

    Ties resolve toward the lower candidate index. Infinite biases are
    evaluated as limits: one domain outranks the other outright, and the
    finite scores only order candidates within a domain.
    """
    idx = np.arange(sm.n_candidates)
    true_scores = sm.scores[np.arange(sm.n_items), sm.true_idx]
    if math.isinf(bias):
        # Tier 0 wins; within a tier the unbiased scores decide.
        tier = np.where(sm.cand_seen, 1, 0) if bias > 0 else np.where(sm.cand_seen, 0, 1)
        true_tier = tier[sm.true_idx]
        same = tier[None, :] == true_tier[:, None]
        better_tier = tier[None, :] < true_tier[:, None]
        s = sm.scores
        beats_in_tier = (s > true_scores[:, None]) | (
            (s == true_scores[:, None]) & (idx[None, :] < sm.true_idx[:, None])
        )
        beats = better_tier | (same & beats_in_tier)
    else:
        adj = sm.scores + bias * (~sm.cand_seen)
        true_adj = adj[np.arange(sm.n_items), sm.true_idx]
        beats = (adj > true_adj[:, None]) | (
            (adj == true_adj[:, None]) & (idx[None, :] < sm.true_idx[:, None])
        )
    beats[np.arange(sm.n_items), sm.true_idx] = False
    return beats.sum(axis=1)


def _domain_means(correct, item_seen):
    seen = float(correct[item_seen].mean()) if item_seen.any() else 0.0
    unseen = float(correct[~item_seen].mean()) if (~item_seen).any() else 0.0
    return seen, unseen


def biased_topk_acc(sm: ScoreMatrix, bias, k):
    """(seen accuracy, unseen accuracy) after adding ``bias`` to unseen columns.

    An item counts as correct when its true pair sits within the k
    highest-scoring candidates; boundary ties resolve by candidate index.
    ``bias`` may be +-inf, evaluated as the corresponding limit.
    """
    if not 1 <= k <= sm.n_candidates:
        raise ConfigError(f"k={k} out of range for {sm.n_candidates} candidates")
    if not (sm.cand_seen.any() and (~sm.cand_seen).any()):
        raise ConfigError("generalized evaluation needs both candidate domains")
    correct = _rank_of_truth(sm, bias) < k
    return _domain_means(correct, sm.item_seen)


def _item_thresholds(sm: ScoreMatrix, k):
    """Per-item correctness thresholds over the bias axis.

    A seen-true item is correct exactly for bias < t (t = +inf when it can
    never be pushed out of the top k, -inf when same-domain competitors
    already exclude it). An unseen-true item is correct exactly for
    bias > t, with the mirrored conventions.
    """
    true_scores = sm.scores[np.arange(sm.n_items), sm.true_idx]
    idx = np.arange(sm.n_candidates)
    t_seen, t_unseen = [], []
    for i in range(sm.n_items):
        T = sm.true_idx[i]
        s = sm.scores[i]
        same_mask = sm.cand_seen == sm.cand_seen[T]
        same_mask[T] = False
        beats_same = (s[same_mask] > true_scores[i]) | (
            (s[same_mask] == true_scores[i]) & (idx[same_mask] < T)
        )
        m = int(beats_same.sum())
        other = s[sm.cand_seen != sm.cand_seen[T]]
        if m >= k:
            t = -math.inf if sm.item_seen[i] else math.inf
        elif k - m > other.size:
            t = math.inf if sm.item_seen[i] else -math.inf
        else:
            r_th = np.sort(other)[other.size - (k - m)]
            t = true_scores[i] - r_th if sm.item_seen[i] else r_th - true_scores[i]
        (t_seen if sm.item_seen[i] else t_unseen).append(t)
    return np.asarray(t_seen, dtype=np.float64), np.asarray(t_unseen, dtype=np.float64)


@dataclass
class AUCCurve:
    """(seen accuracy, unseen accuracy) points in increasing-bias order."""

    points: list
    k: int


def auc_curve(sm: ScoreMatrix, k):
    """Evaluate the accuracy curve at every plateau of the bias sweep.

    Sample points sit between consecutive breakpoints (plus -inf/+inf
    sentinels), so every constant piece of the step function appears exactly
    once.
    """
    if not 1 <= k <= sm.n_candidates:
        raise ConfigError(f"k={k} out of range for {sm.n_candidates} candidates")
    if not (sm.cand_seen.any() and (~sm.cand_seen).any()):
        raise ConfigError("generalized evaluation needs both candidate domains")
    t_seen, t_unseen = _item_thresholds(sm, k)
    finite = np.unique(
        np.concatenate([t_seen[np.isfinite(t_seen)], t_unseen[np.isfinite(t_unseen)]])
    )
    if finite.size:
        mids = (finite[1:] + finite[:-1]) / 2.0
        biases = np.concatenate([[finite[0] - 1.0], mids, [finite[-1] + 1.0]])
    else:
        biases = np.array([0.0])
    n_seen_items = t_seen.size
    n_unseen_items = t_unseen.size
    ts_sorted = np.sort(t_seen)
    tu_sorted = np.sort(t_unseen)

    def accs(b):
        sa = (
            float((ts_sorted > b).sum()) / n_seen_items if n_seen_items else 0.0
        )
        ua = (
            float((tu_sorted < b).sum()) / n_unseen_items if n_unseen_items else 0.0
        )
        return sa, ua

    points = []
    # Limit at -inf: only items correct for every bias survive on the unseen side.
    sa = float((t_seen > -math.inf).mean()) if n_seen_items else 0.0
    ua = float((t_unseen == -math.inf).mean()) if n_unseen_items else 0.0
    points.append((sa, ua))
    points.extend(accs(b) for b in biases)
    sa = float((t_seen == math.inf).mean()) if n_seen_items else 0.0
    ua = float((t_unseen < math.inf).mean()) if n_unseen_items else 0.0
    points.append((sa, ua))
    return AUCCurve(points=points, k=k)


def curve_area(points):
    """Trapezoid area under (seen, unseen) points, closed to the unseen axis."""
    pts = sorted(set(points), key=lambda p: (p[0], -p[1]))
    area = pts[0][0] * pts[0][1]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return float(area)


def auc(sm: ScoreMatrix, k):
    """Area under the seen/unseen accuracy curve swept over the calibration bias."""
    return curve_area(auc_curve(sm, k).points)


# -- reports ----------------------------------------------------------------------


@dataclass
class EvalReport:
    """Metric values per setting, JSON-serializable for regression diffs."""

    setting: str
    top1: float | None = None
    auc: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)

    def to_json(self):
        payload = {"setting": self.setting}
        if self.top1 is not None:
            payload["top1_unseen"] = self.top1
        if self.auc:
            payload["auc"] = {
                split: {str(k): v for k, v in sorted(vals.items())}
                for split, vals in sorted(self.auc.items())
            }
        if self.curves:
            payload["curves"] = {
                split: {str(k): [list(p) for p in pts] for k, pts in sorted(vals.items())}
                for split, vals in sorted(self.curves.items())
            }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        return cls(
            setting=payload["setting"],
            top1=payload.get("top1_unseen"),
            auc={
                split: {int(k): v for k, v in vals.items()}
                for split, vals in payload.get("auc", {}).items()
            },
            curves={
                split: {int(k): [tuple(p) for p in pts] for k, pts in vals.items()}
                for split, vals in payload.get("curves", {}).items()
            },
        )


def evaluate(
    params,
    dims,
    table,
    split,
    setting,
    *,
    variant=None,
    ks=(1, 2, 3),
    threads=1,
    include_curves=False,
):
    """Run the evaluation protocol for one setting and collect an EvalReport."""
    candidates = split.candidate_pairs(setting)
    if setting == "conventional":
        sm = compute_scores(
            params, dims, table, split.test, candidates, split.vocab,
            variant=variant, threads=threads,
        )
        return EvalReport(setting="conventional", top1=top1_unseen(sm))
    report = EvalReport(setting="generalized")
    parts = [("test", split.test)]
    if split.val:
        parts.append(("val", split.val))
    for name, items in parts:
        sm = compute_scores(
            params, dims, table, items, candidates, split.vocab,
            variant=variant, threads=threads,
        )
        report.auc[name] = {}
        if include_curves:
            report.curves[name] = {}
        for k in ks:
            curve = auc_curve(sm, k)
            report.auc[name][k] = curve_area(curve.points)
            if include_curves:
                report.curves[name][k] = list(curve.points)
    return report


# -- score matrix CSV ---------------------------------------------------------------


def scores_to_csv(sm: ScoreMatrix, path):
    """Write the matrix with one candidate column per ``attr|obj|domain`` header."""
    import csv as _csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh)
        head = ["id", "true_attr", "true_obj", "domain"]
        for p in sm.candidates:
            a, o = sm.vocab.pair_tokens(p)
            head.append(f"{a}|{o}|{p.domain.value}")
        writer.writerow(head)
        for i, item_id in enumerate(sm.item_ids):
            pair = sm.candidates[sm.true_idx[i]]
            a, o = sm.vocab.pair_tokens(pair)
            dom = "seen" if sm.item_seen[i] else "unseen"
            row = [item_id, a, o, dom]
            row.extend(f"{v:.17g}" for v in sm.scores[i])
            writer.writerow(row)


def scores_from_csv(path):
    """Rebuild a ScoreMatrix (and its token universe) from an exported CSV."""
    import csv as _csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = _csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty score matrix") from None
        if head[:4] != ["id", "true_attr", "true_obj", "domain"]:
            raise DataFormatError(f"{path}: unexpected score matrix header")
        attrs, objs = [], []
        cand_specs = []
        for cell in head[4:]:
            parts = cell.split("|")
            if len(parts) != 3 or parts[2] not in ("seen", "unseen"):
                raise DataFormatError(f"{path}: bad candidate header {cell!r}")
            a, o, dom = parts
            if a not in attrs:
                attrs.append(a)
            if o not in objs:
                objs.append(o)
            cand_specs.append((a, o, Domain(dom)))
        vocab = Vocab(tuple(attrs), tuple(objs))
        a_idx = {t: i for i, t in enumerate(attrs)}
        o_idx = {t: i for i, t in enumerate(objs)}
        candidates = [ConceptPair(a_idx[a], o_idx[o], d) for a, o, d in cand_specs]
        cand_index = {p.key: j for j, p in enumerate(candidates)}
        ids, rows, true_idx, item_seen = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + len(candidates):
                raise DataFormatError(f"{path}:{lineno}: wrong column count")
            item_id, a, o, dom = row[:4]
            if a not in a_idx or o not in o_idx:
                raise DataFormatError(f"{path}:{lineno}: unknown label tokens")
            key = (a_idx[a], o_idx[o])
            if key not in cand_index:
                raise DataFormatError(
                    f"{path}:{lineno}: true pair not among candidates"
                )
            if dom not in ("seen", "unseen"):
                raise DataFormatError(f"{path}:{lineno}: bad domain {dom!r}")
            ids.append(item_id)
            true_idx.append(cand_index[key])
            item_seen.append(dom == "seen")
            try:
                rows.append([float(v) for v in row[4:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    scores = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise DataFormatError(f"{path}: non-finite scores")
    return ScoreMatrix(
        vocab,
        ids,
        np.asarray(true_idx, dtype=np.intp),
        np.asarray(item_seen, dtype=bool),
        candidates,
        np.array([p.domain is Domain.SEEN for p in candidates], dtype=bool),
        scores,
    )
