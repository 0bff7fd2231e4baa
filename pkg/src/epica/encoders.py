"""Unimodal representations: contextual concept encoding and visual projection.

A concept is a two-token sequence [attribute, object]. The encoder runs a
single bidirectional LSTM over it and keeps both per-token outputs (forward
and backward states concatenated), so each token's representation is
dk-wide and context dependent. Visual block features are mapped into the
same dk-wide joint space by a pure linear projection (no bias).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConfigError
from .graph import Graph

__all__ = ["BiLstmParams", "lstm_step", "encode_token_pairs", "encode_concept", "project_image"]


@dataclass
class BiLstmParams:
    """Combined-gate LSTM weights for both directions.

    Gate layout along the last axis is (input, forget, output, candidate),
    each ``dk // 2`` wide. Forget-gate bias starts at 1.0; all other weights
    start uniform in (-0.1, 0.1).
    """

    fw_W: np.ndarray
    fw_U: np.ndarray
    fw_b: np.ndarray
    bw_W: np.ndarray
    bw_U: np.ndarray
    bw_b: np.ndarray

    @classmethod
    def init(cls, rng, embed_dim, dk):
        if dk % 2 != 0:
            raise ConfigError(f"dk must be even to split across directions, got {dk}")
        hd = dk // 2

        def w(rows, cols):
            return rng.uniform(-0.1, 0.1, size=(rows, cols))

        def bias():
            b = np.zeros(4 * hd)
            b[hd : 2 * hd] = 1.0
            return b

        return cls(
            fw_W=w(embed_dim, 4 * hd),
            fw_U=w(hd, 4 * hd),
            fw_b=bias(),
            bw_W=w(embed_dim, 4 * hd),
            bw_U=w(hd, 4 * hd),
            bw_b=bias(),
        )

    @property
    def hidden(self):
        return self.fw_U.shape[0]


def lstm_step(g: Graph, x, h, c, W, U, b):
    """One LSTM cell step for a batch of rows; returns (h_next, c_next)."""
    hd = U.value.shape[0]
    z = g.add_bias(g.add(g.matmul(x, W), g.matmul(h, U)), b)
    i = g.sigmoid(g.slice_cols(z, 0, hd))
    f = g.sigmoid(g.slice_cols(z, hd, 2 * hd))
    o = g.sigmoid(g.slice_cols(z, 2 * hd, 3 * hd))
    cand = g.tanh(g.slice_cols(z, 3 * hd, 4 * hd))
    c_next = g.add(g.mul(f, c), g.mul(i, cand))
    h_next = g.mul(o, g.tanh(c_next))
    return h_next, c_next


def encode_token_pairs(g: Graph, x_attr, x_obj, lstm):
    """Encode a batch of [attr, obj] sequences in one pass.

    ``x_attr`` and ``x_obj`` are (n, embed_dim) nodes of embeddings for the
    n concepts. ``lstm`` is a dict of bound parameter nodes. Returns two
    (n, dk) nodes: the contextual outputs at the attribute token and at the
    object token. Initial states are zero.
    """
    n = x_attr.value.shape[0]
    hd = lstm["lstm.fw.U"].value.shape[0]
    zeros = g.constant(np.zeros((n, hd)))
    fw1, c1 = lstm_step(g, x_attr, zeros, zeros, lstm["lstm.fw.W"], lstm["lstm.fw.U"], lstm["lstm.fw.b"])
    fw2, _ = lstm_step(g, x_obj, fw1, c1, lstm["lstm.fw.W"], lstm["lstm.fw.U"], lstm["lstm.fw.b"])
    bw2, c2 = lstm_step(g, x_obj, zeros, zeros, lstm["lstm.bw.W"], lstm["lstm.bw.U"], lstm["lstm.bw.b"])
    bw1, _ = lstm_step(g, x_attr, bw2, c2, lstm["lstm.bw.W"], lstm["lstm.bw.U"], lstm["lstm.bw.b"])
    out_attr = g.concat_cols([fw1, bw1])
    out_obj = g.concat_cols([fw2, bw2])
    return out_attr, out_obj


def encode_concept(pair, table, lstm_params: BiLstmParams):
    """Standalone (2, dk) encoding of one concept pair, values only."""
    g = Graph()
    leaves = {
        "lstm.fw.W": g.constant(lstm_params.fw_W),
        "lstm.fw.U": g.constant(lstm_params.fw_U),
        "lstm.fw.b": g.constant(lstm_params.fw_b),
        "lstm.bw.W": g.constant(lstm_params.bw_W),
        "lstm.bw.U": g.constant(lstm_params.bw_U),
        "lstm.bw.b": g.constant(lstm_params.bw_b),
    }
    x_attr = g.constant(table.rows[table.attr_rows[pair.attr_id]].reshape(1, -1))
    x_obj = g.constant(table.rows[table.obj_rows[pair.obj_id]].reshape(1, -1))
    out_attr, out_obj = encode_token_pairs(g, x_attr, x_obj, leaves)
    return np.concatenate([out_attr.value, out_obj.value], axis=0)


def project_image(g: Graph, blocks, W):
    """Map raw (B, Dv) block features into the (B, dk) joint space."""
    return g.matmul(blocks, W)
