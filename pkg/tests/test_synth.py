import numpy as np
import pytest

from sidrec.synth import SynthSpec, synth_generate


def small_spec(**kw):
    base = dict(d_content=16, d_collab=4, min_seq_len=8, max_seq_len=12)
    base.update(kw)
    return SynthSpec(**base)


def test_same_seed_identical():
    a_corpus, a_feats = synth_generate(11, 120, 40, 2, 2, small_spec())
    b_corpus, b_feats = synth_generate(11, 120, 40, 2, 2, small_spec())
    assert a_corpus.sequences == b_corpus.sequences
    assert a_corpus.times == b_corpus.times
    for item in a_feats.items:
        assert np.array_equal(a_feats.items[item].e_content, b_feats.items[item].e_content)
        assert np.array_equal(a_feats.items[item].e_collab, b_feats.items[item].e_collab)


def test_different_seed_differs():
    a_corpus, _ = synth_generate(11, 120, 40, 2, 2, small_spec())
    b_corpus, _ = synth_generate(12, 120, 40, 2, 2, small_spec())
    assert a_corpus.sequences != b_corpus.sequences


def test_zero_noise_collapses_within_category():
    corpus, feats = synth_generate(3, 150, 40, 2, 2, small_spec(noise_scale=0.0))
    by_leaf = {}
    for item, f in feats.items.items():
        by_leaf.setdefault(f.tags, []).append(f.e_content)
    for vectors in by_leaf.values():
        for v in vectors[1:]:
            assert np.array_equal(v, vectors[0])


def test_full_transition_bias_keeps_category():
    corpus, feats = synth_generate(5, 200, 48, 2, 2, small_spec(transition_bias=1.0))
    # Counting oracle over consecutive train pairs: same leaf tags throughout.
    total = same = 0
    for user in corpus.users:
        train = corpus.splits[user].train
        for a, b in zip(train, train[1:]):
            total += 1
            same += feats.items[a].tags == feats.items[b].tags
    assert total > 0
    assert same == total


def test_infeasible_sizes_rejected():
    with pytest.raises(ValueError, match="infeasible"):
        synth_generate(0, 100, 7, 2, 3, small_spec())  # 8 leaves > 7 items


def test_corpus_satisfies_k_core():
    corpus, _ = synth_generate(9, 200, 50, 2, 2, small_spec())
    item_deg = {}
    user_deg = {}
    for user, seq in corpus.sequences.items():
        user_deg[user] = len(seq)
        for item in seq:
            item_deg[item] = item_deg.get(item, 0) + 1
    assert min(user_deg.values()) >= 5


def test_tag_paths_have_requested_depth():
    _, feats = synth_generate(4, 150, 40, 3, 2, small_spec())
    assert all(len(f.tags) == 2 for f in feats.items.values())
    assert all(tag in feats.tag_embeddings for f in feats.items.values() for tag in f.tags)
