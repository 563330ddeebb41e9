import logging

import numpy as np
import pytest

from stylediff.engine.evaluators import DualEncoder, StyleClassifier
from stylediff.engine.metrics import (
    calculate_all_metrics,
    diversity_from_embeddings,
    fid,
    foot_skating,
    foot_skating_clip,
    foot_skating_world,
    frechet_distance,
    mm_dist_from_embeddings,
    r_precision_from_embeddings,
    sra_by_group,
    sra_from_logits,
)
from stylediff.engine.motion import FeatureStats
from stylediff.engine.toy import prompt_words, style_names
from stylediff.errors import ConfigError, LayoutError
from stylediff.schemas.config import EvalConfig
from stylediff.utils.vocab import Vocabulary, strip_style


# ----------------------------------------------------------------------
# SRA
# ----------------------------------------------------------------------

def test_sra_full_k_is_one(rng):
    logits = rng.normal(size=(20, 6))
    assert sra_from_logits(logits, rng.integers(0, 6, size=20), k=6) == 1.0


def test_sra_random_logits_matches_chance(rng):
    n_styles = 14
    intended = np.repeat(np.arange(n_styles), 1000)
    logits = rng.normal(size=(len(intended), n_styles))
    assert sra_from_logits(logits, intended, k=5) == pytest.approx(5 / 14, abs=0.02)
    assert sra_from_logits(logits, intended, k=1) == pytest.approx(1 / 14, abs=0.02)


def test_sra_is_invariant_to_logit_rescaling(rng):
    logits = rng.normal(size=(50, 5))
    intended = rng.integers(0, 5, size=50)
    assert sra_from_logits(logits, intended, 2) == sra_from_logits(3.0 * logits + 7.0, intended, 2)


def test_sra_weights_styles_equally():
    logits = np.zeros((10, 2))
    logits[:9, 0] = 1.0       # nine style-0 clips, all recognized
    logits[9, 0] = 1.0        # the one style-1 clip is missed
    intended = [0] * 9 + [1]
    assert sra_from_logits(logits, intended, k=1) == pytest.approx(0.5)


def test_sra_errors(rng):
    logits = rng.normal(size=(4, 3))
    with pytest.raises(ConfigError):
        sra_from_logits(logits, [0, 1, 2, 3], k=1)
    with pytest.raises(ConfigError):
        sra_from_logits(logits, [0, 1, 2, -1], k=1)
    with pytest.raises(ConfigError):
        sra_from_logits(logits, [0, 1, 2], k=1)
    with pytest.raises(ConfigError):
        sra_from_logits(logits, [0, 1, 2, 0], k=0)
    with pytest.raises(ConfigError):
        sra_from_logits(logits, [0, 1, 2, 0], k=4)


class FixedLogits:
    def __init__(self, logits):
        self._logits = logits

    def logits(self, clips):
        return self._logits


def test_sra_by_category_group():
    names = style_names()
    intended = [names.index("bouncy"), names.index("chicken"), names.index("highknees")]
    logits = np.zeros((3, 6))
    logits[0, intended[0]] = 10.0
    logits[1, intended[1]] = 10.0
    logits[2, intended[2]] = -10.0
    groups = sra_by_group(None, intended, FixedLogits(logits), names, k=5)
    assert groups["all"] == pytest.approx(2 / 3)
    assert groups["no_action"] == 1.0
    assert groups["character"] == 1.0


# ----------------------------------------------------------------------
# FID
# ----------------------------------------------------------------------

def test_fid_of_identical_sets_is_zero(rng):
    x = rng.normal(size=(500, 6))
    assert fid(x, x) < 1e-6


def test_fid_mean_shift(rng):
    a = rng.normal(size=(5000, 4))
    b = rng.normal(size=(5000, 4)) + np.array([1.5, 1.5, 1.5, 1.5])
    assert frechet_distance(a, b) == pytest.approx(9.0, abs=0.5)


def test_fid_scale_difference(rng):
    a = rng.normal(size=(5000, 2))
    b = 2.0 * rng.normal(size=(5000, 2))
    assert frechet_distance(a, b) == pytest.approx(2.0, abs=0.5)


def test_fid_symmetry_and_rotation_invariance(rng):
    a = rng.normal(size=(300, 5))
    b = rng.normal(size=(300, 5)) * np.array([1.0, 2.0, 0.5, 1.0, 3.0]) + 0.3
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    forward = frechet_distance(a, b)
    assert frechet_distance(b, a) == pytest.approx(forward, rel=1e-6)
    assert frechet_distance(a @ q, b @ q) == pytest.approx(forward, rel=1e-6)


def test_fid_with_encoder_and_errors(rng, caplog):
    a = rng.normal(size=(3, 5))
    with caplog.at_level(logging.WARNING, logger="stylediff.engine.metrics"):
        value = fid(a, a + 1.0)
    assert np.isfinite(value)
    assert "covariance diagonal" in caplog.text
    assert fid([1, 2], [3, 4], encoder=lambda s: np.asarray(s, dtype=float)[:, None] * np.ones((1, 2))) >= 0.0
    with pytest.raises(ConfigError):
        frechet_distance(rng.normal(size=(10, 3)), rng.normal(size=(10, 4)))


# ----------------------------------------------------------------------
# Foot skating
# ----------------------------------------------------------------------

def sliding_feet(n_frames, moving_pairs, height=0.0, speed=1.0):
    world = np.zeros((n_frames, 3, 3))
    world[:, 1:, 1] = height
    x = 0.0
    for i in range(1, n_frames):
        if i - 1 in moving_pairs:
            x += speed
        world[i, 1:, 0] = x
    return world


def test_foot_skating_on_constructed_feet():
    assert foot_skating_world(np.zeros((5, 3, 3)), (1, 2)) == 0.0
    assert foot_skating_world(sliding_feet(5, {0, 1, 2, 3}), (1, 2)) == 1.0
    assert foot_skating_world(sliding_feet(5, {0, 1}), (1, 2)) == 0.5
    assert foot_skating_world(sliding_feet(5, {0, 1, 2, 3}, height=0.1), (1, 2)) == 0.0
    assert foot_skating_world(sliding_feet(5, {0, 1, 2, 3}, speed=0.4), (1, 2)) == 0.0
    with pytest.raises(LayoutError):
        foot_skating_world(np.zeros((1, 3, 3)), (1, 2))


def test_foot_skating_from_features():
    # J = 3: root_y at column 3, foot local heights at columns 5 and 8
    features = np.zeros((5, 35))
    features[:, 3] = 0.5
    features[:, 5] = -0.5
    features[:, 8] = -0.5
    features[:2, 2] = 1.0
    assert foot_skating_clip(features) == pytest.approx(0.5)
    assert foot_skating(np.stack([features, np.zeros((5, 35))])) == pytest.approx(0.25)


def test_foot_skating_is_a_ratio(neutral_clips):
    assert 0.0 <= foot_skating(neutral_clips) <= 1.0


# ----------------------------------------------------------------------
# Diversity and text fidelity
# ----------------------------------------------------------------------

def test_diversity():
    assert diversity_from_embeddings(np.ones((10, 4))) == 0.0
    two = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert diversity_from_embeddings(two, n_pairs=50) == pytest.approx(5.0)
    with pytest.raises(ConfigError):
        diversity_from_embeddings(two[:1])


def test_diversity_is_seeded(rng):
    emb = rng.normal(size=(40, 3))
    assert diversity_from_embeddings(emb, seed=2) == diversity_from_embeddings(emb, seed=2)


def test_r_precision_oracle(rng):
    emb = rng.normal(size=(64, 8))
    assert r_precision_from_embeddings(emb, emb, top_k=3, batch_size=32) == [1.0, 1.0, 1.0]
    assert mm_dist_from_embeddings(emb, emb) == 0.0


def test_r_precision_random_is_chance(rng):
    motion = rng.normal(size=(6400, 8))
    text = rng.normal(size=(6400, 8))
    top = r_precision_from_embeddings(motion, text, top_k=3, batch_size=32)
    assert top[0] == pytest.approx(1 / 32, abs=0.01)
    assert top[2] == pytest.approx(3 / 32, abs=0.02)
    assert top[0] <= top[1] <= top[2]


def test_r_precision_batches(rng, caplog):
    emb = rng.normal(size=(40, 4))
    text = emb.copy()
    text[32:] = rng.normal(size=(8, 4))
    # the trailing partial batch is dropped
    assert r_precision_from_embeddings(emb, text, top_k=1, batch_size=32) == [1.0]
    with caplog.at_level(logging.WARNING, logger="stylediff.engine.metrics"):
        assert r_precision_from_embeddings(emb[:10], emb[:10], top_k=2) == [1.0, 1.0]
    assert "fewer than the batch size" in caplog.text
    with pytest.raises(ConfigError):
        r_precision_from_embeddings(emb, emb[:5])


# ----------------------------------------------------------------------
# Full report
# ----------------------------------------------------------------------

def test_calculate_all_metrics_bounds(styled_clips):
    stats = FeatureStats.fit(styled_clips)
    classifier = StyleClassifier(59, 2, channels=8, stats=stats, style_names=style_names(2))
    encoder = DualEncoder(59, Vocabulary.build(prompt_words(), style_slots=1), embed_dim=4, channels=8, stats=stats)
    prompts = [strip_style(c.prompt) for c in styled_clips]
    intended = [c.style_id for c in styled_clips]

    report = calculate_all_metrics(
        "Real", styled_clips, styled_clips, classifier, encoder,
        intended_style_ids=intended, prompts=prompts, style_names=style_names(),
        cfg=EvalConfig(n_pairs=50),
    )
    assert report.n_clips == report.n_real == len(styled_clips)
    assert report.fid < 1e-6
    assert report.diversity == pytest.approx(report.diversity_real)
    assert report.diversity_gap == pytest.approx(0.0)
    # two styles: top-2 and beyond always hit
    assert report.sra_top3 == report.sra_top5 == 1.0
    assert 0.0 <= report.sra_top1 <= 1.0
    assert report.sra_top5_character == 1.0
    assert 0.0 <= report.r_precision_top1 <= report.r_precision_top2 <= report.r_precision_top3 <= 1.0
    assert report.mm_dist >= 0.0
    assert 0.0 <= report.foot_skating <= 1.0


def test_calculate_all_metrics_skips_missing_inputs(styled_clips, neutral_clips):
    classifier = StyleClassifier(59, 2, channels=8, stats=FeatureStats.fit(styled_clips))
    report = calculate_all_metrics("Base", neutral_clips, styled_clips, classifier)
    assert report.sra_top5 is None
    assert report.r_precision_top3 is None and report.mm_dist is None
    assert report.fid > 0.0
