"""
Desk-scale stylization experiments. Each test trains real models for minutes,
so the whole module is marked slow.
"""

import numpy as np
import pytest

from stylediff.engine.denoiser import generate, load_model, save_model
from stylediff.engine.evaluators import train_classifier, train_dual_encoder
from stylediff.engine.lora import attach
from stylediff.engine.metrics import frechet_distance, r_precision_from_embeddings, sra_from_logits
from stylediff.engine.toy import action_names, generate_toy_dataset, split_by_style, style_names
from stylediff.engine.training import train_base, train_lora
from stylediff.schemas.config import DataConfig, DiffusionConfig, EvalConfig, ModelConfig, TrainConfig
from stylediff.utils.vocab import stylize

pytestmark = pytest.mark.slow

N_STYLES = 4
NEUTRAL_LABEL = N_STYLES
WALK = ("a", "person", "is", "walking", "forward")
ACTION_PROMPTS = [WALK, ("a", "person", "is", "running", "forward"), ("a", "person", "is", "standing", "still")]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    clips = generate_toy_dataset(DataConfig(
        n_joints=5, n_actions=3, n_styles=N_STYLES, clips_per_cell=70, style_clips_per_cell=7, frames=60, seed=0
    ))
    neutral, styled = split_by_style(clips)
    model, _ = train_base(
        neutral, TrainConfig.base_defaults(steps=3000, batch_size=32, diffusion_steps=100),
        ModelConfig(), DiffusionConfig(),
    )
    # neutral motions get their own class so unstyled generations are not forced onto a style
    labels = [c.style_id for c in styled] + [NEUTRAL_LABEL] * len(neutral)
    classifier = train_classifier(styled + neutral, EvalConfig(), n_styles=N_STYLES + 1, labels=labels)
    base_dir = tmp_path_factory.mktemp("base")
    save_model(model, base_dir)
    return {"neutral": neutral, "styled": styled, "base_dir": base_dir, "classifier": classifier}


def style_set(desk, names, action="walk"):
    ids = {style_names().index(n) for n in names}
    action_id = action_names().index(action)
    return [c for c in desk["styled"] if c.style_id in ids and c.action_id == action_id]


def fine_tune(desk, names, prior_weight, rank=5, seed=0, steps=4000):
    model = load_model(desk["base_dir"])
    adapter_set = attach(model, "q,k,v", rank, seed=seed)
    cfg = TrainConfig.lora_defaults(steps=steps, lr=1e-3, prior_weight=prior_weight, seed=seed)
    train_lora(model, adapter_set, style_set(desk, names), desk["neutral"], cfg)
    return model


def test_base_model_overfits_eight_clips():
    clips = split_by_style(generate_toy_dataset(DataConfig(n_actions=1, n_styles=0, clips_per_cell=8, seed=0)))[0]
    _, log = train_base(clips, TrainConfig.base_defaults(steps=3000, batch_size=8, diffusion_steps=100), ModelConfig())
    losses = log.losses()
    assert np.mean(losses[-50:]) < 0.05 * np.mean(losses[:10])


def test_single_style_is_recognized(desk):
    model = fine_tune(desk, ["bouncy"], prior_weight=0.25)
    bouncy = style_names().index("bouncy")
    styled = generate(model, [stylize(WALK, ["bouncy"])] * 32, 60, seed=1)
    neutral = generate(model, [WALK] * 32, 60, seed=1)
    classifier = desk["classifier"]
    assert sra_from_logits(classifier.logits(styled), [bouncy] * 32, k=1) >= 0.8
    assert sra_from_logits(classifier.logits(neutral), [bouncy] * 32, k=1) <= 0.2


def test_prior_term_preserves_neutral_generations(desk):
    classifier = desk["classifier"]
    distances = {0.0: [], 0.25: []}
    for seed in range(3):
        for lam in distances:
            model = fine_tune(desk, ["bouncy"], prior_weight=lam, seed=seed)
            adapted = generate(model, [WALK] * 32, 60, seed=10 + seed)
            with model.adapters_disabled():
                base = generate(model, [WALK] * 32, 60, seed=10 + seed)
            distances[lam].append(frechet_distance(classifier.embed(adapted), classifier.embed(base)))
    assert np.mean(distances[0.25]) <= 0.5 * np.mean(distances[0.0])


def test_mixed_styles_show_both(desk):
    model = fine_tune(desk, ["bouncy", "chicken"], prior_weight=0.25)
    mixed = generate(model, [stylize(WALK, ["bouncy", "chicken"])] * 32, 60, seed=2)
    neutral = generate(model, [WALK] * 32, 60, seed=2)
    classifier = desk["classifier"]
    p_mixed = classifier.predict_proba(mixed).mean(axis=0)
    p_neutral = classifier.predict_proba(neutral).mean(axis=0)
    for name in ("bouncy", "chicken"):
        s = style_names().index(name)
        assert p_mixed[s] >= 3 * p_neutral[s], name


def test_prior_weight_trades_style_for_text_fidelity(desk):
    classifier = desk["classifier"]
    encoder = train_dual_encoder(desk["neutral"] + desk["styled"])
    bouncy = style_names().index("bouncy")
    prompts = [ACTION_PROMPTS[i % 3] for i in range(32)]

    def scores(prior_weight, rank, seed):
        model = fine_tune(desk, ["bouncy"], prior_weight, rank=rank, seed=seed)
        features = generate(model, [stylize(p, ["bouncy"]) for p in prompts], 60, seed=20 + seed)
        sra = sra_from_logits(classifier.logits(features), [bouncy] * 32, k=1)
        r1 = r_precision_from_embeddings(encoder.encode_motion(features), encoder.encode_text(prompts), 1)[0]
        return sra, r1

    by_lambda = {lam: np.mean([scores(lam, 5, s) for s in range(5)], axis=0) for lam in (0.0, 0.25, 5.0)}
    sra = [by_lambda[lam][0] for lam in (0.0, 0.25, 5.0)]
    text = [by_lambda[lam][1] for lam in (0.0, 0.25, 5.0)]
    assert sra[0] >= sra[1] >= sra[2]
    assert text[0] <= text[1] <= text[2]

    by_rank = {r: np.mean([scores(0.25, r, s) for s in range(5)], axis=0) for r in (1, 5, 20)}
    assert by_rank[1][0] <= by_rank[5][0] <= by_rank[20][0]
    assert by_rank[1][1] >= by_rank[5][1] >= by_rank[20][1]
