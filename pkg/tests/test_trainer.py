import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longtail_crs.corpus import Corpus, Dialogue, compute_popularity, corpus_stats, segment
from longtail_crs.losses import AcflConfig
from longtail_crs.trainer import (DivergenceError, ExperimentConfig, FeatureExtractor, LinearRecommender,
                                  SyntheticSpec, TrainConfig, corpus_supervision, experiment, fit_corpus,
                                  gen_synthetic, rank_items, split_ids, train, zipf_frequency_counts)

TINY = SyntheticSpec(n_items=40, n_dialogues=300, vocab_size=200)
CE_LIKE = AcflConfig(alpha=1.0, gamma=0.0, beta=0.0, k=0.0, adaptive=False,
                     use_class_weights=False, use_sample_weights=False)


def toy_problem():
    X = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    y = np.array([0, 1, 2, 0, 1, 1])
    return LinearRecommender.zeros(["a", "b", "c"], 3), X, y


def head_share(exponent, seeds=range(5)):
    """Median head mention share of the generated corpus over seeds."""
    shares = []
    for seed in seeds:
        corpus = gen_synthetic(SyntheticSpec(zipf_exponent=exponent, seed=seed)).corpus
        pop = compute_popularity(corpus)
        shares.append(corpus_stats(corpus, segment(pop), pop).groups["head"].mention_share)
    return float(np.median(shares))


def test_synthetic_corpus_is_deterministic():
    a, b = gen_synthetic(TINY), gen_synthetic(TINY)
    assert [d.text for d in a.corpus.dialogues] == [d.text for d in b.corpus.dialogues]
    assert a.labels == b.labels
    assert [d.text for d in gen_synthetic(SyntheticSpec(**{**TINY.__dict__, "seed": 1})).corpus.dialogues] != \
        [d.text for d in a.corpus.dialogues]


def test_labels_are_mentioned_in_final_turn():
    data = gen_synthetic(TINY)
    for d in data.corpus.dialogues:
        assert f"@{data.labels[d.dialogue_id]}" in d.utterances[-1].text
        assert data.context[d.dialogue_id] <= d.mentions


def test_zipf_counts_sum_to_total():
    counts = zipf_frequency_counts(500, 5000, 1.2, np.random.default_rng(3))
    assert counts.sum() == 5000 and counts.min() >= 1
    assert zipf_frequency_counts(50, 40, 1.2, np.random.default_rng(3)).sum() == 40


def test_larger_exponent_gives_larger_head_share():
    shares = [head_share(s) for s in (1.1, 1.2, 1.5, 2.0, 3.0)]
    assert all(b > a for a, b in zip(shares, shares[1:]))
    # at or below 1 the singleton fraction is capped, so the share stops moving
    assert head_share(0.8) <= shares[0]


def test_default_synthetic_corpus_is_mostly_tail():
    data = gen_synthetic(SyntheticSpec())
    seg = segment(compute_popularity(data.corpus))
    pop = compute_popularity(data.corpus)
    assert len(seg.tail) >= 0.6 * len(pop.mentioned())


def test_degenerate_specs():
    data = gen_synthetic(SyntheticSpec(n_items=10, n_dialogues=1, vocab_size=20))
    assert len(data.corpus) == 1
    with pytest.raises(ValueError):
        SyntheticSpec(n_items=3)
    with pytest.raises(ValueError):
        SyntheticSpec(zipf_exponent=0)


def test_zero_learning_rate_keeps_model():
    model, X, y = toy_problem()
    res = train(model, X, y, TrainConfig(lr=0.0, epochs=5))
    assert np.all(res.model.weights == 0) and len(set(res.train_loss)) == 1
    assert res.train_loss[0] == pytest.approx(np.log(3))


def test_ce_loss_strictly_decreases_on_toy():
    model, X, y = toy_problem()
    curve = train(model, X, y, TrainConfig(lr=0.5, epochs=50)).train_loss
    assert all(b < a for a, b in zip(curve, curve[1:]))


@pytest.mark.parametrize("kind", ["focal", "acfl"])
def test_other_losses_decrease_on_toy(kind):
    model, X, y = toy_problem()
    curve = train(model, X, y, TrainConfig(loss_kind=kind, lr=0.5, epochs=50)).train_loss
    assert curve[-1] < curve[0]


def test_degenerate_acfl_matches_ce_trajectory():
    model, X, y = toy_problem()
    ce = train(model, X, y, TrainConfig("ce", lr=0.7, epochs=40))
    acfl = train(model, X, y, TrainConfig("acfl", lr=0.7, epochs=40, acfl=CE_LIKE))
    np.testing.assert_allclose(acfl.train_loss, ce.train_loss, rtol=0, atol=1e-9)
    np.testing.assert_allclose(acfl.model.weights, ce.model.weights, rtol=0, atol=1e-9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    model, X, y = toy_problem()
    with pytest.raises(DivergenceError):
        train(model, X * 1e200, y, TrainConfig(lr=1e200, epochs=3))


def test_rank_items_excludes_context_and_breaks_ties_by_order():
    model = LinearRecommender.zeros(["a", "b", "c"], 1)
    assert rank_items(model, np.ones((1, 1)), [frozenset({"a"})], 3) == [("b", "c")]


@given(st.lists(st.text("abc", min_size=1, max_size=3), min_size=1, max_size=50, unique=True),
       st.integers(0, 100), st.floats(0, 1))
def test_split_is_a_partition(ids, seed, frac):
    tr, te = split_ids(ids, seed, frac)
    assert set(tr) | set(te) == set(ids) and not set(tr) & set(te)
    assert split_ids(ids, seed, frac) == (tr, te)


def test_corpus_supervision_cuts_after_last_reference():
    d = Dialogue.from_turns("x", [("s", "i liked @1"), ("r", "try @2 or @3"), ("s", "thanks")], {"1", "2", "3"})
    cut, labels, ctx = corpus_supervision(Corpus([d], {"1": "A", "2": "B", "3": "C"}))
    assert labels == {"x": "3"} and ctx == {"x": frozenset({"1"})}
    assert len(cut[0].utterances) == 2


def test_fit_corpus_holds_out_only_originals():
    data = gen_synthetic(TINY)
    extra = [Dialogue(f"aug-{i}", d.utterances, d.mentions, "augmented_tail")
             for i, d in enumerate(data.corpus.dialogues[:20])]
    corpus = Corpus(data.corpus.dialogues + extra, data.corpus.catalog)
    res, lists, test_ids = fit_corpus(corpus, TrainConfig(lr=10, epochs=5), seed=1, k=5)
    assert test_ids and not any(t.startswith("aug-") for t in test_ids)
    assert len(lists) == len(test_ids) and all(len(rl.ranking) == 5 for rl in lists)
    assert len(res.train_loss) == 5


def test_feature_extractor_ignores_label_turn():
    data = gen_synthetic(TINY)
    fx = FeatureExtractor(sorted(data.corpus.catalog), 64)
    d = data.corpus.dialogues[0]
    label_only = Dialogue(d.dialogue_id, d.utterances, d.mentions)
    X = fx.transform([label_only], data.context)
    item_cols = X[:, :len(data.corpus.catalog)].toarray()[0]
    label = sorted(data.corpus.catalog).index(data.labels[d.dialogue_id])
    assert item_cols[label] == 0


def test_experiment_shape_and_worker_independence():
    cfg = ExperimentConfig(epochs=5)
    one = experiment(TINY, ("ce", "acfl"), [0, 1], (5,), cfg)
    two = experiment(TINY, ("ce", "acfl"), [0, 1], (5,), cfg, workers=2)
    assert len(one.rows) == 4 and one.kinds() == ["ce", "acfl"]
    assert [r.to_json() for r in one.rows] == [r.to_json() for r in two.rows]
    assert set(one.wins()["acfl"]) <= set(one.rows[0].metrics)
    assert "| ce | median |" in one.to_markdown()
    with pytest.raises(ValueError):
        experiment(TINY, ("ce", "hinge"), [0], (5,), cfg)
