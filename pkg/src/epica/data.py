"""Vocabulary, embeddings, image features, splits, and the synthetic world.

Image features are always ingested, never computed: any external feature
extractor can write the binary block-feature format below and plug into the
pipeline. The synthetic generator builds a small compositional world whose
attribute and object evidence lives in disjoint, known visual blocks, which
makes block-selection behavior directly observable in tests.

File formats:

* embeddings: UTF-8 text, ``token v1 ... vD`` per line
* features: binary, little-endian, magic ``EPCF`` (see ``save_features``)
* split manifest: text lines ``attr obj {seen|unseen}``
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Domain",
    "Vocab",
    "ConceptPair",
    "EmbeddingTable",
    "ImageItem",
    "DatasetSplit",
    "SyntheticWorldConfig",
    "ConfigError",
    "DataFormatError",
    "load_embeddings",
    "build_embeddings",
    "save_features",
    "load_features",
    "write_split_manifest",
    "read_split_manifest",
    "write_vocab",
    "read_vocab",
    "generate_synthetic",
    "split_conventional",
    "split_generalized",
    "SETTINGS",
]

SETTINGS = ("conventional", "generalized")

_FEATURE_MAGIC = b"EPCF"
_FEATURE_VERSION = 1


class ConfigError(Exception):
    """A configuration value or combination is invalid."""


class DataFormatError(Exception):
    """A data file is malformed, truncated, or inconsistent."""


class Domain(enum.Enum):
    SEEN = "seen"
    UNSEEN = "unseen"


@dataclass(frozen=True)
class ConceptPair:
    """An (attribute, object) label with its seen/unseen tag."""

    attr_id: int
    obj_id: int
    domain: Domain

    @property
    def key(self):
        return (self.attr_id, self.obj_id)


@dataclass(frozen=True)
class Vocab:
    """Ordered attribute and object token lists; indices are stable."""

    attributes: tuple
    objects: tuple

    def __post_init__(self):
        for kind, toks in (("attribute", self.attributes), ("object", self.objects)):
            if len(set(toks)) != len(toks):
                raise ConfigError(f"duplicate {kind} tokens")

    @property
    def n_attrs(self):
        return len(self.attributes)

    @property
    def n_objs(self):
        return len(self.objects)

    def pair_tokens(self, pair: ConceptPair):
        return self.attributes[pair.attr_id], self.objects[pair.obj_id]


@dataclass
class EmbeddingTable:
    """One row per distinct token across both vocabularies.

    ``attr_rows[i]`` / ``obj_rows[j]`` give the row index for attribute i /
    object j, so lookups during scoring never touch token strings.
    """

    tokens: tuple
    rows: np.ndarray
    attr_rows: np.ndarray
    obj_rows: np.ndarray
    frozen: bool = True

    @property
    def dim(self):
        return self.rows.shape[1]


@dataclass
class ImageItem:
    """Block features of one image plus its ground-truth pair."""

    id: str
    blocks: np.ndarray
    label: ConceptPair

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=np.float64)
        if self.blocks.ndim != 2 or self.blocks.shape[0] < 1:
            raise ConfigError(f"blocks must be (B, Dv) with B >= 1, got {self.blocks.shape}")
        if not np.isfinite(self.blocks).all():
            raise DataFormatError(f"item {self.id!r} has non-finite features")


def _check_disjoint(seen_pairs, unseen_pairs):
    seen_keys = {p.key for p in seen_pairs}
    unseen_keys = {p.key for p in unseen_pairs}
    if seen_keys & unseen_keys:
        raise ConfigError("seen and unseen pair sets overlap")
    return seen_keys, unseen_keys


@dataclass
class DatasetSplit:
    """Train/test(/val) image lists plus the pair universe they draw from."""

    vocab: Vocab
    train: list
    test: list
    seen_pairs: list
    unseen_pairs: list
    val: list | None = None

    def __post_init__(self):
        seen_keys, _ = _check_disjoint(self.seen_pairs, self.unseen_pairs)
        for item in self.train:
            if item.label.key not in seen_keys:
                raise ConfigError(f"train item {item.id!r} carries an unseen label")

    def candidate_pairs(self, setting):
        """Candidate pool: unseen pairs (conventional) or all pairs (generalized)."""
        if setting == "conventional":
            return list(self.unseen_pairs)
        if setting == "generalized":
            return list(self.seen_pairs) + list(self.unseen_pairs)
        raise ConfigError(f"unknown setting {setting!r}")

    @property
    def items(self):
        out = list(self.train) + list(self.test)
        if self.val:
            out += list(self.val)
        return out


# -- embeddings ---------------------------------------------------------------


def _table_from_rows(vocab, token_vectors, dim, rng, frozen):
    tokens = []
    index = {}
    for tok in (*vocab.attributes, *vocab.objects):
        if tok not in index:
            index[tok] = len(tokens)
            tokens.append(tok)
    rows = np.empty((len(tokens), dim), dtype=np.float64)
    for tok, i in index.items():
        vec = token_vectors.get(tok)
        rows[i] = vec if vec is not None else rng.normal(0.0, 0.1, size=dim)
    attr_rows = np.array([index[t] for t in vocab.attributes], dtype=np.intp)
    obj_rows = np.array([index[t] for t in vocab.objects], dtype=np.intp)
    return EmbeddingTable(tuple(tokens), rows, attr_rows, obj_rows, frozen=frozen)


def load_embeddings(path, vocab, *, seed=0, frozen=True):
    """Read a text embedding file and build the table for ``vocab``.

    Tokens present in the file take their file vectors; missing tokens get a
    seeded random-normal row (sigma 0.1). All lines must agree on dimension.
    """
    vectors = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise DataFormatError(f"{path}:{lineno}: malformed embedding line")
            tok, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
            elif len(vals) != dim:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {dim} values, got {len(vals)}"
                )
            try:
                vectors[tok] = np.array([float(v) for v in vals], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    if dim is None:
        raise DataFormatError(f"{path}: empty embedding file")
    rng = np.random.default_rng(seed)
    return _table_from_rows(vocab, vectors, dim, rng, frozen)


def build_embeddings(vocab, dim, *, seed=0, frozen=True):
    """All-random table for worlds without a pretrained embedding file."""
    rng = np.random.default_rng(seed)
    return _table_from_rows(vocab, {}, dim, rng, frozen)


# -- feature file -------------------------------------------------------------


def _pack_str(s):
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataFormatError("string too long for feature format")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.buf):
            raise DataFormatError(f"{self.path}: truncated feature file")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def string(self):
        return self.take(self.u16()).decode("utf-8")


def save_features(path, items: Sequence[ImageItem], vocab: Vocab):
    """Write items in order; block values are stored as little-endian f32."""
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<II", _FEATURE_VERSION, len(items)))
        for item in items:
            attr_tok, obj_tok = vocab.pair_tokens(item.label)
            b, dv = item.blocks.shape
            fh.write(_pack_str(item.id))
            fh.write(_pack_str(attr_tok))
            fh.write(_pack_str(obj_tok))
            fh.write(struct.pack("<II", b, dv))
            fh.write(item.blocks.astype("<f4").tobytes(order="C"))


def load_features(path, vocab: Vocab, seen_keys=None):
    """Read items in file order, resolving label tokens against ``vocab``.

    ``seen_keys`` (a set of (attr_id, obj_id)) decides each label's domain
    tag; without it every label is tagged unseen.
    """
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(4) != _FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a feature file")
    version = rd.u32()
    if version != _FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported feature version {version}")
    count = rd.u32()
    attr_index = {t: i for i, t in enumerate(vocab.attributes)}
    obj_index = {t: i for i, t in enumerate(vocab.objects)}
    items = []
    for _ in range(count):
        item_id = rd.string()
        attr_tok = rd.string()
        obj_tok = rd.string()
        b = rd.u32()
        dv = rd.u32()
        raw = rd.take(4 * b * dv)
        if attr_tok not in attr_index:
            raise DataFormatError(f"{path}: unknown attribute token {attr_tok!r}")
        if obj_tok not in obj_index:
            raise DataFormatError(f"{path}: unknown object token {obj_tok!r}")
        key = (attr_index[attr_tok], obj_index[obj_tok])
        domain = Domain.SEEN if seen_keys and key in seen_keys else Domain.UNSEEN
        blocks = (
            np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(b, dv)
        )
        items.append(ImageItem(item_id, blocks, ConceptPair(key[0], key[1], domain)))
    return items


# -- split manifest and vocab files -------------------------------------------


def write_split_manifest(path, vocab: Vocab, seen_pairs, unseen_pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for pair in (*seen_pairs, *unseen_pairs):
            a, o = vocab.pair_tokens(pair)
            fh.write(f"{a} {o} {pair.domain.value}\n")


def read_split_manifest(path):
    """Rebuild (vocab, seen_pairs, unseen_pairs) from manifest lines.

    The vocabulary is derived from first appearance order in the manifest, so
    any consumer of the same manifest sees identical token indices.
    """
    attrs, objs = [], []
    attr_index, obj_index = {}, {}
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("seen", "unseen"):
                raise DataFormatError(f"{path}:{lineno}: malformed split line")
            a, o, dom = parts
            if a not in attr_index:
                attr_index[a] = len(attrs)
                attrs.append(a)
            if o not in obj_index:
                obj_index[o] = len(objs)
                objs.append(o)
            rows.append((attr_index[a], obj_index[o], Domain(dom)))
    vocab = Vocab(tuple(attrs), tuple(objs))
    seen = [ConceptPair(a, o, d) for a, o, d in rows if d is Domain.SEEN]
    unseen = [ConceptPair(a, o, d) for a, o, d in rows if d is Domain.UNSEEN]
    _check_disjoint(seen, unseen)
    return vocab, seen, unseen


def write_vocab(path, vocab: Vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.attributes:
            fh.write(f"attr {tok}\n")
        for tok in vocab.objects:
            fh.write(f"obj {tok}\n")


def read_vocab(path):
    attrs, objs = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or parts[0] not in ("attr", "obj"):
                raise DataFormatError(f"{path}:{lineno}: malformed vocab line")
            (attrs if parts[0] == "attr" else objs).append(parts[1])
    return Vocab(tuple(attrs), tuple(objs))


# -- synthetic world -----------------------------------------------------------


@dataclass
class SyntheticWorldConfig:
    """Shape and split parameters of a generated compositional world."""

    n_attrs: int
    n_objs: int
    blocks: int
    feature_dim: int
    attr_blocks: tuple
    obj_blocks: tuple
    noise_sigma: float
    images_per_pair: int
    seen_fraction: float
    seed: int = 0

    def __post_init__(self):
        self.attr_blocks = tuple(self.attr_blocks)
        self.obj_blocks = tuple(self.obj_blocks)
        if min(self.n_attrs, self.n_objs, self.blocks, self.feature_dim) < 1:
            raise ConfigError("counts and dims must be positive")
        if self.images_per_pair < 1:
            raise ConfigError("images_per_pair must be positive")
        if set(self.attr_blocks) & set(self.obj_blocks):
            raise ConfigError("attr_blocks and obj_blocks must be disjoint")
        all_idx = self.attr_blocks + self.obj_blocks
        if any(i < 0 or i >= self.blocks for i in all_idx):
            raise ConfigError("signal block index out of range")
        if not (0.0 < self.seen_fraction < 1.0):
            raise ConfigError("seen_fraction must be in (0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def _signatures(rng, count, dim):
    m = rng.normal(size=(count, dim))
    if dim >= count:
        q, _ = np.linalg.qr(m.T)
        return np.ascontiguousarray(q.T[:count])
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _cover_split(rng, n_attrs, n_objs, seen_fraction):
    """Pick seen pairs so that every attribute and object is seen at least once."""
    n_pairs = n_attrs * n_objs
    target = int(round(seen_fraction * n_pairs))
    need = max(n_attrs, n_objs)
    if target < need:
        raise ConfigError(
            f"seen_fraction {seen_fraction} gives {target} seen pairs, "
            f"but covering the vocabulary needs at least {need}"
        )
    if target >= n_pairs:
        raise ConfigError("seen_fraction leaves no unseen pairs")
    perm = rng.permutation(need)
    cover = {(i % n_attrs, perm[i] % n_objs) for i in range(need)}
    rest = [
        (a, o) for a in range(n_attrs) for o in range(n_objs) if (a, o) not in cover
    ]
    rng.shuffle(rest)
    seen_keys = set(cover)
    for key in rest:
        if len(seen_keys) >= target:
            break
        seen_keys.add(key)
    seen, unseen = [], []
    for a in range(n_attrs):
        for o in range(n_objs):
            if (a, o) in seen_keys:
                seen.append(ConceptPair(a, o, Domain.SEEN))
            else:
                unseen.append(ConceptPair(a, o, Domain.UNSEEN))
    return seen, unseen


def generate_synthetic(cfg: SyntheticWorldConfig):
    """Build a synthetic world and return its conventional split.

    Each image of pair (a, o) carries the attribute signature in the
    ``attr_blocks`` rows and the object signature in the ``obj_blocks`` rows,
    plus element-wise N(0, sigma^2) noise everywhere; remaining rows are pure
    noise. Block values are rounded through f32 so in-memory features match
    the feature file bit for bit.
    """
    rng = np.random.default_rng(cfg.seed)
    attrs = tuple(f"attr{i:02d}" for i in range(cfg.n_attrs))
    objs = tuple(f"obj{i:02d}" for i in range(cfg.n_objs))
    vocab = Vocab(attrs, objs)
    attr_sigs = _signatures(rng, cfg.n_attrs, cfg.feature_dim)
    obj_sigs = _signatures(rng, cfg.n_objs, cfg.feature_dim)
    seen, unseen = _cover_split(rng, cfg.n_attrs, cfg.n_objs, cfg.seen_fraction)

    def make_items(pairs):
        items = []
        for pair in pairs:
            for j in range(cfg.images_per_pair):
                blocks = rng.normal(
                    0.0, cfg.noise_sigma, size=(cfg.blocks, cfg.feature_dim)
                )
                blocks[list(cfg.attr_blocks)] += attr_sigs[pair.attr_id]
                blocks[list(cfg.obj_blocks)] += obj_sigs[pair.obj_id]
                blocks = blocks.astype(np.float32).astype(np.float64)
                a, o = vocab.pair_tokens(pair)
                items.append(ImageItem(f"{a}_{o}_{j:03d}", blocks, pair))
        return items

    train = make_items(seen)
    test = make_items(unseen)
    return DatasetSplit(vocab, train, test, seen, unseen)


# -- split construction --------------------------------------------------------


def split_conventional(items, seen_pairs, unseen_pairs, vocab):
    """Train on seen-labeled images, test on unseen-labeled images."""
    seen_keys, unseen_keys = _check_disjoint(seen_pairs, unseen_pairs)
    train, test = [], []
    for item in items:
        if item.label.key in seen_keys:
            train.append(item)
        elif item.label.key in unseen_keys:
            test.append(item)
        else:
            raise ConfigError(f"item {item.id!r} labeled outside the pair universe")
    return DatasetSplit(vocab, train, test, list(seen_pairs), list(unseen_pairs))


def split_generalized(
    items,
    seen_pairs,
    unseen_pairs,
    vocab,
    *,
    seen_test_fraction=0.2,
    seen_val_fraction=0.2,
    unseen_val_fraction=0.5,
    seed=0,
):
    """Stratified generalized split with a validation set.

    Per seen pair, images split train/test/val; per unseen pair, images split
    test/val. Validation-bound images never enter training. The partition is
    a pure function of sorted item ids, the pair sets, the fractions, and the
    seed, so every command run over the same inputs sees the same split.
    """
    if seen_test_fraction + seen_val_fraction >= 1.0:
        raise ConfigError("seen test+val fractions must leave room for training")
    if not (0.0 <= unseen_val_fraction <= 1.0):
        raise ConfigError("unseen_val_fraction must be in [0, 1]")
    seen_keys, unseen_keys = _check_disjoint(seen_pairs, unseen_pairs)
    rng = np.random.default_rng(seed)
    by_pair: dict = {}
    for item in sorted(items, key=lambda it: it.id):
        if item.label.key not in seen_keys and item.label.key not in unseen_keys:
            raise ConfigError(f"item {item.id!r} labeled outside the pair universe")
        by_pair.setdefault(item.label.key, []).append(item)
    train, test, val = [], [], []
    for key in sorted(by_pair):
        group = by_pair[key]
        order = rng.permutation(len(group))
        n = len(group)
        if key in seen_keys:
            n_test = int(round(seen_test_fraction * n))
            n_val = int(round(seen_val_fraction * n))
            for pos, idx in enumerate(order):
                if pos < n_test:
                    test.append(group[idx])
                elif pos < n_test + n_val:
                    val.append(group[idx])
                else:
                    train.append(group[idx])
        else:
            n_val = int(round(unseen_val_fraction * n))
            for pos, idx in enumerate(order):
                (val if pos < n_val else test).append(group[idx])
    return DatasetSplit(
        vocab, train, test, list(seen_pairs), list(unseen_pairs), val=val
    )
