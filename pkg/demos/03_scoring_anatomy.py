"""Dissect one episode scoring pass: correlation, attention, pooling, score.

Uses an untrained model on a noise-free world so the cosine structure is easy
to see: the concept's elements should correlate most with the signal blocks
that carry the matching signature.
"""

from epica.data import SyntheticWorldConfig, build_embeddings, generate_synthetic
from epica.encoders import BiLstmParams, encode_concept, project_image
from epica.graph import Graph
from epica.model import (
    EpisodeScorer,
    ModelDims,
    ModelParams,
    ScoreVariant,
    correlation,
    normalize_relevance,
)

cfg = SyntheticWorldConfig(
    n_attrs=4, n_objs=4, blocks=8, feature_dim=12,
    attr_blocks=(0,), obj_blocks=(1,),
    noise_sigma=0.0, images_per_pair=2, seen_fraction=0.7, seed=7,
)
split = generate_synthetic(cfg)
dims = ModelDims(dk=16, embed_dim=12, visual_dim=12, blocks=8, hidden=32, inv_temperature=9.0)
table = build_embeddings(split.vocab, 12, seed=7)
params = ModelParams.init(dims, table, seed=7)

item = split.train[0]
pairs = split.seen_pairs[:5]
a, o = split.vocab.pair_tokens(item.label)
print(f"image {item.id!r} with true pair ({a}, {o})")

# correlation map between projected blocks and the true concept's elements
g = Graph()
lstm = BiLstmParams(
    params["lstm.fw.W"], params["lstm.fw.U"], params["lstm.fw.b"],
    params["lstm.bw.W"], params["lstm.bw.U"], params["lstm.bw.b"],
)


class TableView:
    rows = params["embed"]
    attr_rows = table.attr_rows
    obj_rows = table.obj_rows


c = g.constant(encode_concept(item.label, TableView, lstm))
v = project_image(g, g.constant(item.blocks), g.constant(params["proj.W"]))
r = correlation(g, v, c)
print("\nblock-to-element cosine map (rows = blocks, cols = attr/obj element):")
for b, row in enumerate(r.value):
    tag = " <- attr block" if b == 0 else (" <- obj block" if b == 1 else "")
    print(f"  block {b}: {row[0]:+.3f} {row[1]:+.3f}{tag}")

att = g.softmax(normalize_relevance(g, g.transpose(r)), dims.inv_temperature)
print("\neach concept element attends over blocks (rows sum to 1):")
for name, row in zip(("attr", "obj "), att.value):
    print(f"  {name}: " + " ".join(f"{w:.2f}" for w in row))

# episode scores with and without the attention machinery
scorer = EpisodeScorer(params, dims, table)
scores = scorer.scores(item, pairs)
plain = EpisodeScorer(params, dims, table, ScoreVariant(False, False)).scores(item, pairs)
print("\ncandidate scores (untrained weights, so these are arbitrary):")
for p, s_full, s_plain in zip(pairs, scores, plain):
    at, ot = split.vocab.pair_tokens(p)
    marker = " *true*" if p.key == item.label.key else ""
    print(f"  ({at}, {ot}): full {s_full:+.4f}   mean-pooled unimodal {s_plain:+.4f}{marker}")
