import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidrec.corpus import Interaction, k_core_filter
from sidrec.features import (
    LEAF_TAG,
    FeatureError,
    load_features,
    normalize_tag_path,
    read_index,
    read_matrix,
    read_tags,
    write_index,
    write_matrix,
    write_tags,
)


@given(
    rows=st.integers(1, 40),
    cols=st.integers(1, 12),
    seed=st.integers(0, 2**31 - 1),
)
@settings(max_examples=30, deadline=None)
def test_matrix_round_trip_bit_exact(tmp_path_factory, rows, cols, seed):
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((rows, cols)).astype(np.float32)
    path = tmp_path_factory.mktemp("mat") / "m.mat"
    write_matrix(path, matrix)
    back = read_matrix(path)
    assert back.dtype == np.float32
    assert np.array_equal(back.view(np.uint32), matrix.view(np.uint32))


def test_matrix_magic_rejected(tmp_path):
    path = tmp_path / "bad.mat"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(FeatureError, match="bad magic"):
        read_matrix(path)


def test_index_round_trip(tmp_path):
    ids = ["a", "b", "c"]
    write_index(tmp_path / "i.idx", ids)
    assert read_index(tmp_path / "i.idx") == ids


def test_tags_round_trip(tmp_path):
    tags = {"i1": ["a", "b"], "i2": ["c"]}
    write_tags(tmp_path / "t.tsv", tags)
    assert read_tags(tmp_path / "t.tsv") == tags


def test_normalize_tag_path():
    assert normalize_tag_path(["a", "b"], 3) == ("a", "b", LEAF_TAG)
    assert normalize_tag_path(["a", "b", "c", "d"], 3) == ("a", "b", "c")
    assert normalize_tag_path([], 2) == (LEAF_TAG, LEAF_TAG)


def _write_feature_files(tmp_path, items, d_content=4, d_collab=2, drop_from_tags=()):
    rng = np.random.default_rng(0)
    write_matrix(tmp_path / "c.mat", rng.standard_normal((len(items), d_content)).astype(np.float32))
    write_index(tmp_path / "c.idx", items)
    write_matrix(tmp_path / "b.mat", rng.standard_normal((len(items), d_collab)).astype(np.float32))
    write_index(tmp_path / "b.idx", items)
    tags = {i: ["top", f"mid{n % 2}"] for n, i in enumerate(items) if i not in drop_from_tags}
    write_tags(tmp_path / "t.tsv", tags)
    tag_names = ["top", "mid0", "mid1"]
    write_matrix(tmp_path / "g.mat", rng.standard_normal((3, d_content)).astype(np.float32))
    write_index(tmp_path / "g.idx", tag_names)


def _dense_corpus():
    recs = []
    t = 0
    for u in range(6):
        for i in range(6):
            recs.append(Interaction(f"u{u}", f"i{i}", t))
            t += 1
    return k_core_filter(recs, 5)


def _paths(tmp_path):
    return (
        tmp_path / "c.mat", tmp_path / "c.idx",
        tmp_path / "b.mat", tmp_path / "b.idx",
        tmp_path / "t.tsv", tmp_path / "g.mat", tmp_path / "g.idx",
    )


def test_load_features_complete(tmp_path):
    corpus = _dense_corpus()
    _write_feature_files(tmp_path, corpus.items)
    fs = load_features(corpus, *_paths(tmp_path), n_levels=3, d_content=4, d_collab=2)
    assert set(fs.items) == set(corpus.items)
    feats = fs.items[corpus.items[0]]
    assert feats.e_content.shape == (4,)
    assert feats.tags[-1] == LEAF_TAG  # depth-2 paths padded to 3
    assert np.array_equal(fs.tag_embeddings[LEAF_TAG], np.zeros(4, dtype=np.float32))
    assert 0.0 <= feats.popularity <= 1.0


def test_load_features_missing_item_named(tmp_path):
    corpus = _dense_corpus()
    _write_feature_files(tmp_path, corpus.items, drop_from_tags=(corpus.items[2],))
    with pytest.raises(FeatureError, match=corpus.items[2]):
        load_features(corpus, *_paths(tmp_path), n_levels=3, d_content=4, d_collab=2)


def test_load_features_dimension_mismatch(tmp_path):
    corpus = _dense_corpus()
    _write_feature_files(tmp_path, corpus.items)
    with pytest.raises(FeatureError, match="dimension"):
        load_features(corpus, *_paths(tmp_path), n_levels=3, d_content=8, d_collab=2)


def test_tag_vocab_and_indices(tmp_path):
    corpus = _dense_corpus()
    _write_feature_files(tmp_path, corpus.items)
    fs = load_features(corpus, *_paths(tmp_path), n_levels=2, d_content=4, d_collab=2)
    assert list(fs.tag_vocab[0]) == ["top"]
    assert sorted(fs.tag_vocab[1]) == ["mid0", "mid1"]
    for item in corpus.items:
        idx = fs.tag_index(item)
        assert len(idx) == 2
        assert fs.tag_content(item).shape == (2, 4)


def test_normalized_is_idempotent_when_matching(tmp_path):
    corpus = _dense_corpus()
    _write_feature_files(tmp_path, corpus.items)
    fs = load_features(corpus, *_paths(tmp_path), n_levels=2, d_content=4, d_collab=2)
    assert fs.normalized(2) is fs
    wider = fs.normalized(4)
    assert all(len(f.tags) == 4 for f in wider.items.values())
    assert LEAF_TAG in wider.tag_embeddings
