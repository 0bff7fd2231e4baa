"""The episode scoring graph: cross-attention, gated pooling, relevance net.

Scoring one image against a candidate concept runs in five stages:

1. project raw block features into the joint space (once per episode)
2. block-by-element cosine correlation between image and concept
3. relu-normalized relevance turned into attention weights in both
   directions (image attends over concept elements, concept attends over
   blocks), sharpened by an inverse temperature
4. gated pooling collapses each modality's element set to one vector
5. a two-layer relevance network maps the concatenated pair to a scalar

Scores are raw; callers apply a softmax across an episode's candidates when
they need probabilities. Ablation switches can bypass stage 3 (unimodal
representations) and stage 4 (plain mean pooling), which keeps parameter
shapes identical across variants.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import ConfigError, DataFormatError
from .encoders import BiLstmParams, encode_token_pairs, project_image
from .graph import Graph

__all__ = [
    "ModelDims",
    "ScoreVariant",
    "ModelParams",
    "EpisodeScorer",
    "correlation",
    "normalize_relevance",
    "cross_attend",
    "gated_pool",
    "mean_pool",
    "relevance_score",
    "score_episode",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = b"EPCK"
_CKPT_VERSION = 1

PARAM_NAMES = (
    "embed",
    "lstm.fw.W",
    "lstm.fw.U",
    "lstm.fw.b",
    "lstm.bw.W",
    "lstm.bw.U",
    "lstm.bw.b",
    "proj.W",
    "pool.img",
    "pool.con",
    "rel.W1",
    "rel.W2",
)


@dataclass
class ModelDims:
    """Widths of the scoring graph plus the attention sharpness."""

    dk: int = 300
    embed_dim: int = 300
    visual_dim: int = 512
    blocks: int = 49
    hidden: int = 512
    inv_temperature: float = 9.0

    def __post_init__(self):
        if self.dk % 2 != 0:
            raise ConfigError(f"dk must be even, got {self.dk}")
        if min(self.dk, self.embed_dim, self.visual_dim, self.blocks, self.hidden) < 1:
            raise ConfigError("model dims must be positive")
        if not self.inv_temperature > 0:
            raise ConfigError("inv_temperature must be positive")


@dataclass(frozen=True)
class ScoreVariant:
    """Ablation switches; the default is the full model."""

    cross_attention: bool = True
    gated_pooling: bool = True


class ModelParams:
    """All trainable tensors, keyed by stable names for checkpointing."""

    def __init__(self, tensors: dict, embed_frozen: bool = True):
        missing = [n for n in PARAM_NAMES if n not in tensors]
        if missing:
            raise ConfigError(f"missing parameter tensors: {missing}")
        self.tensors = {n: np.asarray(tensors[n], dtype=np.float64) for n in PARAM_NAMES}
        self.embed_frozen = embed_frozen

    @classmethod
    def init(cls, dims: ModelDims, table, seed=0, embed_frozen=None):
        """Seeded init; the embedding block is copied from ``table``."""
        rng = np.random.default_rng(seed)
        lstm = BiLstmParams.init(rng, table.dim, dims.dk)
        if table.dim != dims.embed_dim:
            raise ConfigError(
                f"embedding table dim {table.dim} != model embed_dim {dims.embed_dim}"
            )

        def u(*shape):
            return rng.uniform(-0.1, 0.1, size=shape)

        tensors = {
            "embed": table.rows.copy(),
            "lstm.fw.W": lstm.fw_W,
            "lstm.fw.U": lstm.fw_U,
            "lstm.fw.b": lstm.fw_b,
            "lstm.bw.W": lstm.bw_W,
            "lstm.bw.U": lstm.bw_U,
            "lstm.bw.b": lstm.bw_b,
            "proj.W": u(dims.visual_dim, dims.dk),
            "pool.img": u(dims.dk, 1),
            "pool.con": u(dims.dk, 1),
            "rel.W1": u(2 * dims.dk, dims.hidden),
            "rel.W2": u(dims.hidden, 1),
        }
        frozen = table.frozen if embed_frozen is None else embed_frozen
        return cls(tensors, embed_frozen=frozen)

    def copy(self):
        return ModelParams(
            {n: v.copy() for n, v in self.tensors.items()}, self.embed_frozen
        )

    def trainable_names(self, variant: ScoreVariant):
        names = [n for n in PARAM_NAMES if n != "embed" and not n.startswith("pool.")]
        if variant.gated_pooling:
            names += ["pool.img", "pool.con"]
        if not self.embed_frozen:
            names.append("embed")
        return names

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        if name not in self.tensors:
            raise KeyError(name)
        self.tensors[name] = np.asarray(value, dtype=np.float64)


# -- graph pieces --------------------------------------------------------------


def correlation(g: Graph, a, b):
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``.

    Zero rows normalize to zero, so their cosine against anything is 0.
    """
    return g.matmul(g.row_l2_normalize(a), g.transpose(g.row_l2_normalize(b)))


def normalize_relevance(g: Graph, r):
    """Per row: relu then scale to unit norm; all-nonpositive rows map to zero."""
    return g.row_l2_normalize(g.relu(r))


def cross_attend(g: Graph, query, context, inv_temperature):
    """Represent each query row as an attention-weighted sum of context rows."""
    weights = g.softmax(
        normalize_relevance(g, correlation(g, query, context)), inv_temperature
    )
    return g.matmul(weights, context)


def gated_pool(g: Graph, x, gate):
    """Softmax-weighted sum of rows, with one learned logit per row."""
    logits = g.transpose(g.matmul(x, gate))
    weights = g.softmax(logits)
    return g.matmul(weights, x)


def mean_pool(g: Graph, x):
    n = x.value.shape[0]
    return g.matmul(g.constant(np.full((1, n), 1.0 / n)), x)


def relevance_score(g: Graph, pooled_v, pooled_c, leaves):
    """Two-layer feed-forward score of a pooled (image, concept) pair.

    Both layers are bias free: episode probabilities are invariant to a
    uniform shift of all candidate scores, so output-side biases could never
    receive gradient and would only dilute gradient checking.
    """
    joint = g.concat_cols([pooled_v, pooled_c])
    h = g.relu(g.matmul(joint, leaves["rel.W1"]))
    return g.matmul(h, leaves["rel.W2"])


# -- episode scoring -------------------------------------------------------------


class EpisodeScorer:
    """Builds scoring (and loss) graphs for one image against many candidates.

    The image projection is computed once per episode; attention is
    per candidate. ``table`` supplies token-row indices; the embedding values
    themselves live in ``params`` so they can optionally be trained.
    """

    def __init__(self, params: ModelParams, dims: ModelDims, table, variant=None):
        self.params = params
        self.dims = dims
        self.table = table
        self.variant = variant or ScoreVariant()

    def _bind(self, g: Graph, trainable):
        names = set(self.params.trainable_names(self.variant)) if trainable else set()
        leaves = {}
        for name in PARAM_NAMES:
            if name.startswith("pool.") and not self.variant.gated_pooling:
                continue
            leaves[name] = g.leaf(
                self.params[name], name=name, trainable=name in names
            )
        return leaves, {n: leaves[n] for n in names}

    def _scores_node(self, g: Graph, leaves, item, pairs):
        """Score all candidates in one batched graph.

        Per-candidate rows are laid out candidate-major: the (candidate c,
        block b) row of a stacked tensor sits at index c*B + b. The math per
        candidate is identical to composing ``cross_attend``, ``gated_pool``
        and ``relevance_score`` one candidate at a time.
        """
        dims, variant = self.dims, self.variant
        n = len(pairs)
        b_count = item.blocks.shape[0]
        blocks = g.constant(item.blocks, name="blocks")
        v = project_image(g, blocks, leaves["proj.W"])
        attr_ids = np.array([self.table.attr_rows[p.attr_id] for p in pairs])
        obj_ids = np.array([self.table.obj_rows[p.obj_id] for p in pairs])
        x_attr = g.take_rows(leaves["embed"], attr_ids)
        x_obj = g.take_rows(leaves["embed"], obj_ids)
        tok_attr, tok_obj = encode_token_pairs(g, x_attr, x_obj, leaves)
        lam = dims.inv_temperature

        if variant.cross_attention:
            vn_tiled = g.tile_rows(g.row_l2_normalize(v), n)
            r_attr = g.sum_cols(
                g.mul(vn_tiled, g.repeat_rows(g.row_l2_normalize(tok_attr), b_count))
            )
            r_obj = g.sum_cols(
                g.mul(vn_tiled, g.repeat_rows(g.row_l2_normalize(tok_obj), b_count))
            )
            # Image attends over the two concept elements per block.
            weights = g.softmax(
                normalize_relevance(g, g.concat_cols([r_attr, r_obj])), lam
            )
            v_att = g.add(
                g.mul_colvec(
                    g.repeat_rows(tok_attr, b_count), g.slice_cols(weights, 0, 1)
                ),
                g.mul_colvec(
                    g.repeat_rows(tok_obj, b_count), g.slice_cols(weights, 1, 2)
                ),
            )
            # Each concept element attends over the image blocks.
            att_a = g.softmax(
                normalize_relevance(g, g.reshape(r_attr, (n, b_count))), lam
            )
            att_o = g.softmax(
                normalize_relevance(g, g.reshape(r_obj, (n, b_count))), lam
            )
            c_att_attr = g.matmul(att_a, v)
            c_att_obj = g.matmul(att_o, v)
            if variant.gated_pooling:
                logits = g.reshape(g.matmul(v_att, leaves["pool.img"]), (n, b_count))
                w_img = g.reshape(g.softmax(logits), (n * b_count, 1))
                pooled_v = g.segment_sum_rows(g.mul_colvec(v_att, w_img), b_count)
            else:
                pooled_v = g.scale(g.segment_sum_rows(v_att, b_count), 1.0 / b_count)
        else:
            c_att_attr, c_att_obj = tok_attr, tok_obj
            if variant.gated_pooling:
                pooled_v = g.tile_rows(gated_pool(g, v, leaves["pool.img"]), n)
            else:
                pooled_v = g.tile_rows(mean_pool(g, v), n)

        if variant.gated_pooling:
            w_con = g.softmax(
                g.concat_cols(
                    [
                        g.matmul(c_att_attr, leaves["pool.con"]),
                        g.matmul(c_att_obj, leaves["pool.con"]),
                    ]
                )
            )
            pooled_c = g.add(
                g.mul_colvec(c_att_attr, g.slice_cols(w_con, 0, 1)),
                g.mul_colvec(c_att_obj, g.slice_cols(w_con, 1, 2)),
            )
        else:
            pooled_c = g.scale(g.add(c_att_attr, c_att_obj), 0.5)

        joint = g.concat_cols([pooled_v, pooled_c])
        hidden = g.relu(g.matmul(joint, leaves["rel.W1"]))
        return g.transpose(g.matmul(hidden, leaves["rel.W2"]))

    def scores(self, item, pairs):
        """Raw relevance scores for every candidate, as a (n,) array."""
        if not pairs:
            raise ConfigError("need at least one candidate pair")
        g = Graph()
        leaves, _ = self._bind(g, trainable=False)
        return self._scores_node(g, leaves, item, pairs).value.ravel().copy()

    def episode_loss(self, item, pairs, positive_index, *, kind="ce", q=0.5):
        """Forward-only episode loss, bit-identical to ``loss_and_grads``.

        The float arithmetic mirrors the graph composition exactly, so this
        is safe to use as the probe function of a finite-difference check.
        """
        scores = self.scores(item, pairs)
        m = scores.max()
        ce = (np.log(np.exp(scores - m).sum()) + m) + (-scores[positive_index])
        if kind == "ce":
            return float(ce)
        if kind == "gce":
            if not 0.0 < q <= 1.0:
                raise ConfigError(f"q must be in (0, 1], got {q}")
            return float((1.0 / q) * ((-np.exp(-q * ce)) + 1.0))
        raise ConfigError(f"unknown loss kind {kind!r}")

    def loss_and_grads(self, item, pairs, positive_index, *, kind="ce", q=0.5):
        """Episode loss and parameter gradients.

        ``kind='ce'``:  -log softmax(scores)[positive]
        ``kind='gce'``: (1 - p^q) / q with p the positive's softmax probability,
        computed through the cross-entropy node as (1 - exp(-q*ce)) / q so the
        probability itself is never materialized.

        Returns (loss value, grads by parameter name, raw scores array).
        """
        if not 0 <= positive_index < len(pairs):
            raise ConfigError("positive index out of range")
        g = Graph()
        leaves, trainable = self._bind(g, trainable=True)
        scores = self._scores_node(g, leaves, item, pairs)
        ce = g.add(g.logsumexp(scores), g.neg(g.pick(scores, (0, positive_index))))
        if kind == "ce":
            loss = ce
        elif kind == "gce":
            if not 0.0 < q <= 1.0:
                raise ConfigError(f"q must be in (0, 1], got {q}")
            loss = g.scale(g.add_scalar(g.neg(g.exp(g.scale(ce, -q))), 1.0), 1.0 / q)
        else:
            raise ConfigError(f"unknown loss kind {kind!r}")
        grads = g.leaf_gradients(loss, trainable)
        return float(loss.value), grads, scores.value.ravel().copy()


def score_episode(params, dims, table, item, pairs, variant=None):
    """One-shot scoring of ``item`` against ``pairs``; returns a (n,) array."""
    return EpisodeScorer(params, dims, table, variant).scores(item, pairs)


# -- checkpoint format -----------------------------------------------------------


def save_checkpoint(path, params: ModelParams, dims: ModelDims):
    """Binary checkpoint: magic, version, dims echo, then named f32 tensors."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIII",
                _CKPT_VERSION,
                dims.dk,
                dims.blocks,
                dims.visual_dim,
                dims.hidden,
            )
        )
        fh.write(struct.pack("<d", dims.inv_temperature))
        fh.write(struct.pack("<I", len(PARAM_NAMES)))
        for name in PARAM_NAMES:
            arr = params[name]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path, embed_frozen=True):
    """Read a checkpoint back; values are exactly the stored f32 values."""
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise DataFormatError(f"{path}: truncated checkpoint")
        out = buf[off : off + n]
        off += n
        return out

    if take(4) != _CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a checkpoint")
    version, dk, blocks, visual_dim, hidden = struct.unpack("<IIIII", take(20))
    if version != _CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    (inv_temperature,) = struct.unpack("<d", take(8))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64)
        tensors[name] = arr.reshape(shape)
    if "embed" not in tensors:
        raise DataFormatError(f"{path}: checkpoint has no embedding tensor")
    dims = ModelDims(
        dk=dk,
        embed_dim=tensors["embed"].shape[1],
        visual_dim=visual_dim,
        blocks=blocks,
        hidden=hidden,
        inv_temperature=inv_temperature,
    )
    return ModelParams(tensors, embed_frozen=embed_frozen), dims
