"""Embeddings, feature files, manifests, synthetic worlds, and splits."""

import numpy as np
import pytest

from epica.data import (
    ConceptPair,
    ConfigError,
    DataFormatError,
    Domain,
    ImageItem,
    SyntheticWorldConfig,
    Vocab,
    build_embeddings,
    generate_synthetic,
    load_embeddings,
    load_features,
    read_split_manifest,
    read_vocab,
    save_features,
    split_conventional,
    split_generalized,
    write_split_manifest,
    write_vocab,
)


@pytest.fixture
def vocab():
    return Vocab(("red", "old"), ("apple", "car"))


def small_world(seed=0, sigma=0.1):
    return SyntheticWorldConfig(
        n_attrs=4,
        n_objs=4,
        blocks=6,
        feature_dim=8,
        attr_blocks=(0,),
        obj_blocks=(1,),
        noise_sigma=sigma,
        images_per_pair=3,
        seen_fraction=0.7,
        seed=seed,
    )


class TestEmbeddings:
    def test_file_vector_used(self, tmp_path, vocab):
        path = tmp_path / "emb.txt"
        path.write_text("red 1.0 0.0\n")
        table = load_embeddings(path, vocab)
        assert np.array_equal(table.rows[table.attr_rows[0]], [1.0, 0.0])

    def test_missing_token_is_seeded_random(self, tmp_path, vocab):
        path = tmp_path / "emb.txt"
        path.write_text("red 1.0 0.0\n")
        t1 = load_embeddings(path, vocab, seed=5)
        t2 = load_embeddings(path, vocab, seed=5)
        t3 = load_embeddings(path, vocab, seed=6)
        row = t1.rows[t1.obj_rows[0]]
        assert np.array_equal(row, t2.rows[t2.obj_rows[0]])
        assert not np.array_equal(row, t3.rows[t3.obj_rows[0]])

    def test_shape(self, tmp_path):
        vocab = Vocab(("a", "b", "c"), ())
        path = tmp_path / "emb.txt"
        vals = " ".join(["0.5"] * 300)
        path.write_text(f"a {vals}\nb {vals}\nc {vals}\n")
        table = load_embeddings(path, vocab)
        assert table.rows.shape == (3, 300)

    def test_malformed_line(self, tmp_path, vocab):
        path = tmp_path / "emb.txt"
        path.write_text("red\n")
        with pytest.raises(DataFormatError):
            load_embeddings(path, vocab)

    def test_dimension_mismatch(self, tmp_path, vocab):
        path = tmp_path / "emb.txt"
        path.write_text("red 1.0 2.0\nold 1.0\n")
        with pytest.raises(DataFormatError):
            load_embeddings(path, vocab)

    def test_non_numeric_value(self, tmp_path, vocab):
        path = tmp_path / "emb.txt"
        path.write_text("red 1.0 oops\n")
        with pytest.raises(DataFormatError):
            load_embeddings(path, vocab)

    def test_shared_token_gets_one_row(self):
        vocab = Vocab(("light",), ("light", "car"))
        table = build_embeddings(vocab, 4, seed=0)
        assert table.rows.shape[0] == 2
        assert table.attr_rows[0] == table.obj_rows[0]


class TestFeatureFile:
    def test_single_item_shape(self, tmp_path, vocab):
        rng = np.random.default_rng(0)
        pair = ConceptPair(0, 0, Domain.SEEN)
        item = ImageItem("img0", rng.normal(size=(49, 512)), pair)
        path = tmp_path / "f.epcf"
        save_features(path, [item], vocab)
        loaded = load_features(path, vocab, {pair.key})
        assert len(loaded) == 1
        assert loaded[0].blocks.shape == (49, 512)
        assert loaded[0].label.key == pair.key

    def test_round_trip_bit_exact(self, tmp_path, vocab):
        rng = np.random.default_rng(1)
        items = [
            ImageItem(
                f"i{k}",
                rng.normal(size=(4, 6)).astype(np.float32).astype(np.float64),
                ConceptPair(k % 2, k % 2, Domain.SEEN),
            )
            for k in range(5)
        ]
        p1, p2 = tmp_path / "a.epcf", tmp_path / "b.epcf"
        save_features(p1, items, vocab)
        loaded = load_features(p1, vocab, {(0, 0), (1, 1)})
        save_features(p2, loaded, vocab)
        assert p1.read_bytes() == p2.read_bytes()
        for a, b in zip(items, loaded):
            assert a.id == b.id
            assert np.array_equal(a.blocks, b.blocks)

    def test_bad_magic(self, tmp_path, vocab):
        path = tmp_path / "f.epcf"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataFormatError):
            load_features(path, vocab)

    def test_truncated(self, tmp_path, vocab):
        rng = np.random.default_rng(2)
        item = ImageItem("x", rng.normal(size=(3, 4)), ConceptPair(0, 0, Domain.SEEN))
        path = tmp_path / "f.epcf"
        save_features(path, [item], vocab)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(DataFormatError):
            load_features(path, vocab)

    def test_unknown_token(self, tmp_path, vocab):
        rng = np.random.default_rng(3)
        item = ImageItem("x", rng.normal(size=(3, 4)), ConceptPair(1, 1, Domain.SEEN))
        path = tmp_path / "f.epcf"
        save_features(path, [item], vocab)
        with pytest.raises(DataFormatError):
            load_features(path, Vocab(("red",), ("apple",)))


class TestManifest:
    def test_round_trip(self, tmp_path, vocab):
        seen = [ConceptPair(0, 0, Domain.SEEN), ConceptPair(1, 1, Domain.SEEN)]
        unseen = [ConceptPair(0, 1, Domain.UNSEEN)]
        path = tmp_path / "pairs.split"
        write_split_manifest(path, vocab, seen, unseen)
        vocab2, seen2, unseen2 = read_split_manifest(path)
        assert [vocab2.pair_tokens(p) for p in seen2] == [
            vocab.pair_tokens(p) for p in seen
        ]
        assert [vocab2.pair_tokens(p) for p in unseen2] == [("red", "car")]

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "pairs.split"
        path.write_text("red apple sort-of-seen\n")
        with pytest.raises(DataFormatError):
            read_split_manifest(path)

    def test_overlap_rejected(self, tmp_path):
        path = tmp_path / "pairs.split"
        path.write_text("red apple seen\nred apple unseen\n")
        with pytest.raises(ConfigError):
            read_split_manifest(path)

    def test_vocab_file_round_trip(self, tmp_path, vocab):
        path = tmp_path / "vocab.txt"
        write_vocab(path, vocab)
        assert read_vocab(path) == vocab


class TestSyntheticWorld:
    def test_zero_noise_gives_identical_signal(self):
        split = generate_synthetic(small_world(sigma=0.0))
        by_pair = {}
        for item in split.items:
            by_pair.setdefault(item.label.key, []).append(item)
        for items in by_pair.values():
            for other in items[1:]:
                assert np.array_equal(items[0].blocks, other.blocks)

    def test_cover_counts_8x8(self):
        cfg = SyntheticWorldConfig(
            n_attrs=8, n_objs=8, blocks=16, feature_dim=32,
            attr_blocks=(0, 1), obj_blocks=(2, 3),
            noise_sigma=0.1, images_per_pair=2, seen_fraction=0.75, seed=3,
        )
        split = generate_synthetic(cfg)
        assert len(split.seen_pairs) == 48
        assert len(split.unseen_pairs) == 16
        assert not {p.key for p in split.seen_pairs} & {
            p.key for p in split.unseen_pairs
        }

    def test_determinism(self):
        a = generate_synthetic(small_world(seed=9))
        b = generate_synthetic(small_world(seed=9))
        assert [i.id for i in a.items] == [i.id for i in b.items]
        for x, y in zip(a.items, b.items):
            assert np.array_equal(x.blocks, y.blocks)
        assert [p.key for p in a.seen_pairs] == [p.key for p in b.seen_pairs]

    @pytest.mark.parametrize("seed", range(6))
    def test_label_coverage(self, seed):
        split = generate_synthetic(small_world(seed=seed))
        seen_attrs = {p.attr_id for p in split.seen_pairs}
        seen_objs = {p.obj_id for p in split.seen_pairs}
        assert {p.attr_id for p in split.unseen_pairs} <= seen_attrs
        assert {p.obj_id for p in split.unseen_pairs} <= seen_objs
        assert seen_attrs == set(range(4)) and seen_objs == set(range(4))

    def test_infeasible_split_rejected(self):
        cfg = small_world()
        cfg.seen_fraction = 0.99
        with pytest.raises(ConfigError):
            generate_synthetic(cfg)
        with pytest.raises(ConfigError):
            generate_synthetic(
                SyntheticWorldConfig(
                    n_attrs=8, n_objs=8, blocks=6, feature_dim=8,
                    attr_blocks=(0,), obj_blocks=(1,),
                    noise_sigma=0.1, images_per_pair=1, seen_fraction=0.1, seed=0,
                )
            )

    def test_overlapping_signal_blocks_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticWorldConfig(
                n_attrs=2, n_objs=2, blocks=4, feature_dim=4,
                attr_blocks=(0, 1), obj_blocks=(1, 2),
                noise_sigma=0.0, images_per_pair=1, seen_fraction=0.5, seed=0,
            )

    def test_nearest_signature_decoder_recovers_at_zero_noise(self):
        """Sanity oracle: with distinct signatures and no noise, reading the
        signal blocks back through cosine similarity is perfect."""
        cfg = small_world(sigma=0.0)
        split = generate_synthetic(cfg)
        rng = np.random.default_rng(cfg.seed)
        from epica.data import _signatures  # the generator's own signatures

        attr_sigs = _signatures(rng, cfg.n_attrs, cfg.feature_dim)
        obj_sigs = _signatures(rng, cfg.n_objs, cfg.feature_dim)
        for item in split.items:
            a_vec = item.blocks[cfg.attr_blocks[0]]
            o_vec = item.blocks[cfg.obj_blocks[0]]
            assert int(np.argmax(attr_sigs @ a_vec)) == item.label.attr_id
            assert int(np.argmax(obj_sigs @ o_vec)) == item.label.obj_id


class TestSplits:
    def make_items(self, split):
        return split.items, split.seen_pairs, split.unseen_pairs, split.vocab

    def test_conventional(self):
        split = generate_synthetic(small_world())
        items, seen, unseen, vocab = self.make_items(split)
        out = split_conventional(items, seen, unseen, vocab)
        seen_keys = {p.key for p in seen}
        assert all(i.label.key in seen_keys for i in out.train)
        assert all(i.label.key not in seen_keys for i in out.test)
        assert len(out.candidate_pairs("conventional")) == len(unseen)
        assert len(out.candidate_pairs("generalized")) == len(seen) + len(unseen)

    def test_train_never_carries_unseen(self):
        split = generate_synthetic(small_world())
        unseen_keys = {p.key for p in split.unseen_pairs}
        assert all(i.label.key not in unseen_keys for i in split.train)

    def test_overlap_detected(self, vocab):
        seen = [ConceptPair(0, 0, Domain.SEEN)]
        unseen = [ConceptPair(0, 0, Domain.UNSEEN)]
        with pytest.raises(ConfigError):
            split_conventional([], seen, unseen, vocab)

    def test_generalized_partition(self):
        split = generate_synthetic(small_world(seed=2))
        items, seen, unseen, vocab = self.make_items(split)
        out = split_generalized(items, seen, unseen, vocab, seed=7)
        assert out.val, "generalized split must produce a validation set"
        ids = lambda part: {i.id for i in part}
        assert not ids(out.train) & ids(out.test)
        assert not ids(out.train) & ids(out.val)
        assert not ids(out.test) & ids(out.val)
        assert ids(out.train) | ids(out.test) | ids(out.val) == ids(items)
        seen_keys = {p.key for p in seen}
        assert all(i.label.key in seen_keys for i in out.train)
        test_keys = {i.label.key for i in out.test}
        assert test_keys & seen_keys and test_keys - seen_keys

    def test_generalized_deterministic(self):
        split = generate_synthetic(small_world(seed=2))
        items, seen, unseen, vocab = self.make_items(split)
        a = split_generalized(items, seen, unseen, vocab, seed=7)
        b = split_generalized(list(reversed(items)), seen, unseen, vocab, seed=7)
        assert [i.id for i in a.train] == [i.id for i in b.train]
        assert [i.id for i in a.val] == [i.id for i in b.val]

    def test_candidate_setting_validated(self):
        split = generate_synthetic(small_world())
        with pytest.raises(ConfigError):
            split.candidate_pairs("open-world")
