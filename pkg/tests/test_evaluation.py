import json

import numpy as np
import pytest

from maskedmotion.evaluation import (
    EvalError,
    EvalReport,
    FeatureExtractor,
    FeatureExtractorConfig,
    aits_bench,
    alignment_accuracy,
    diversity,
    evaluate,
    frechet_distance,
    mmodality,
    train_feature_extractor,
)
from maskedmotion.motiondata import VerbClassifier
from maskedmotion.numerics import Rng


# ---------------------------------------------------------------------------
# Fréchet distance


def test_frechet_identical_sets_zero(rng_values):
    A = rng_values.normal(size=(100, 6))
    assert frechet_distance(A, A) < 1e-6


def test_frechet_symmetry(rng_values):
    A = rng_values.normal(size=(120, 5))
    B = rng_values.normal(size=(80, 5)) * 1.4 + 0.3
    assert abs(frechet_distance(A, B) - frechet_distance(B, A)) < 1e-6


def test_frechet_pure_mean_shift(rng_values):
    A = rng_values.normal(size=(300, 4))
    v = np.array([0.5, -1.0, 2.0, 0.0])
    got = frechet_distance(A, A + v)
    assert abs(got - v @ v) < 1e-9  # identical covariances cancel exactly


def test_frechet_diagonal_closed_form(rng_values):
    # independent dims: trace term reduces to sum (sqrt(s1) - sqrt(s2))^2
    s1 = np.array([1.0, 4.0, 0.25])
    s2 = np.array([2.25, 1.0, 1.0])
    A = rng_values.normal(size=(60000, 3)) * np.sqrt(s1)
    B = rng_values.normal(size=(60000, 3)) * np.sqrt(s2)
    v1 = np.cov(A, rowvar=False).diagonal()
    v2 = np.cov(B, rowvar=False).diagonal()
    closed = ((A.mean(0) - B.mean(0)) ** 2).sum() + \
        ((np.sqrt(v1 + 1e-6) - np.sqrt(v2 + 1e-6)) ** 2).sum()
    got = frechet_distance(A, B)
    assert abs(got - closed) < 1e-2


def test_frechet_input_validation(rng_values):
    with pytest.raises(EvalError):
        frechet_distance(rng_values.normal(size=(1, 3)), rng_values.normal(size=(5, 3)))
    with pytest.raises(EvalError):
        frechet_distance(rng_values.normal(size=(5, 3)), rng_values.normal(size=(5, 4)))


# ---------------------------------------------------------------------------
# diversity / mmodality


def test_diversity_identical_features_zero():
    assert diversity(np.ones((12, 5)), n_pairs=6, rng=Rng(0)) == 0.0


def test_diversity_two_points():
    feats = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert diversity(feats, n_pairs=1, rng=Rng(0)) == 5.0


def test_diversity_scale_homogeneity(rng_values):
    feats = rng_values.normal(size=(40, 6))
    base = diversity(feats, n_pairs=15, rng=Rng(2))
    scaled = diversity(feats * 3.0, n_pairs=15, rng=Rng(2))
    assert abs(scaled - 3.0 * base) < 1e-9


def test_diversity_replacement_fallback(rng_values):
    feats = rng_values.normal(size=(6, 3))
    value, replaced = diversity(feats, n_pairs=300, rng=Rng(1), return_detail=True)
    assert replaced and value > 0


def test_mmodality_deterministic_generator_is_zero():
    def gen(prompt, seed):
        return np.array([1.0, 2.0, 3.0])  # ignores the seed entirely

    assert mmodality(gen, ["a", "b"], pairs_per_prompt=3, rng=Rng(0)) == 0.0


def test_mmodality_spread_scales_with_noise():
    def gen_factory(scale):
        def gen(prompt, seed):
            return Rng(seed).normal((4,), std=scale)
        return gen

    lo = mmodality(gen_factory(0.5), ["p"], pairs_per_prompt=20, rng=Rng(3))
    hi = mmodality(gen_factory(1.5), ["p"], pairs_per_prompt=20, rng=Rng(3))
    assert hi > lo


# ---------------------------------------------------------------------------
# timing and alignment


def test_aits_excludes_warmup():
    calls = []

    def fn(L):
        import time
        calls.append(L)
        time.sleep(0.001 * L)

    rows = aits_bench(fn, [2, 6], repeats=2)
    assert [L for L, _ in rows] == [2, 6]
    assert calls.count(2) == 3  # 1 warm-up + 2 timed
    assert rows[1][1] > rows[0][1]


def test_alignment_accuracy_against_corpus(tiny_dataset):
    clf = VerbClassifier(tiny_dataset.cfg).fit(tiny_dataset)
    items = [(m, p.verb_ids) for m, p in tiny_dataset.subset("test")]
    assert alignment_accuracy(items, clf) >= 0.95
    shuffled = [(m, [(v + 1) % 6 for v in verbs]) for (m, verbs) in items]
    assert alignment_accuracy(shuffled, clf) < 0.2


# ---------------------------------------------------------------------------
# feature extractor


def test_feature_extractor_deterministic_and_hashable(tiny_dataset):
    fx1 = train_feature_extractor(tiny_dataset, seed=4, steps=30, window=40)
    fx2 = train_feature_extractor(tiny_dataset, seed=4, steps=30, window=40)
    assert fx1.weights_hash() == fx2.weights_hash()
    m = tiny_dataset.items[0][0]
    assert np.array_equal(fx1.features(m), fx2.features(m))
    assert fx1.features(m).shape == (32,)


def test_feature_extractor_checkpoint(tmp_path, tiny_dataset):
    fx = train_feature_extractor(tiny_dataset, seed=4, steps=30, window=40)
    fx.save(tmp_path / "fx.bin")
    loaded = FeatureExtractor.load(tmp_path / "fx.bin")
    m = tiny_dataset.items[1][0]
    assert np.array_equal(fx.features(m), loaded.features(m))
    assert fx.weights_hash() == loaded.weights_hash()


def test_feature_extractor_separates_verbs(tiny_dataset):
    # features should at least distinguish running from sitting
    fx = train_feature_extractor(tiny_dataset, seed=4, steps=120, window=40)
    from maskedmotion.motiondata import DataConfig, RUN, SIT, synth_motion
    cfg = tiny_dataset.cfg
    runs = [fx.features(synth_motion([RUN], [0], 60, cfg, Rng(i))) for i in range(8)]
    sits = [fx.features(synth_motion([SIT], [0], 60, cfg, Rng(i + 50))) for i in range(8)]
    run_c, sit_c = np.mean(runs, axis=0), np.mean(sits, axis=0)
    within = np.linalg.norm(runs - run_c, axis=1).mean() + \
        np.linalg.norm(sits - sit_c, axis=1).mean()
    assert np.linalg.norm(run_c - sit_c) > within / 2


# ---------------------------------------------------------------------------
# full report


def test_evaluate_produces_report(tiny_pipeline, tiny_dataset):
    fx = train_feature_extractor(tiny_dataset, seed=4, steps=30, window=40)
    report = evaluate(tiny_pipeline, tiny_dataset, fx, seed=5, max_items=8,
                      mmodality_prompts=2, mmodality_pairs=2,
                      config_hash="cafe")
    doc = json.loads(report.to_json())
    assert set(doc) >= {"fid", "diversity", "mmodality", "alignment_acc",
                        "aits", "config_hash", "weights_hash", "seed"}
    assert np.isfinite(doc["fid"])
    assert doc["aits"] is None  # timing only on request
    assert doc["config_hash"] == "cafe"
    assert doc["weights_hash"] == fx.weights_hash()
    # reproducible given the same seed
    report2 = evaluate(tiny_pipeline, tiny_dataset, fx, seed=5, max_items=8,
                       mmodality_prompts=2, mmodality_pairs=2,
                       config_hash="cafe")
    assert report.to_json() == report2.to_json()
