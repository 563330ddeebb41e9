import numpy as np
import pytest

from stylediff.engine.denoiser import Denoiser
from stylediff.engine.diffusion import make_schedule
from stylediff.engine.lora import attach, base_checksum
from stylediff.engine.motion import FeatureStats, normalize, stack_features
from stylediff.engine.tensor import load_tensors, make_rng
from stylediff.engine.toy import prompt_words
from stylediff.engine.training import (
    build_vocabulary,
    generate_prior_pool,
    prior_loss,
    style_loss,
    train_base,
    train_lora,
)
from stylediff.errors import ConfigError, ContractViolation, NumericalError, VocabularyError
from stylediff.schemas.config import DiffusionConfig, TrainConfig
from stylediff.schemas.report import TrainLog
from stylediff.utils.vocab import Vocabulary, strip_style


def fresh_model(tiny_config, neutral_clips):
    return Denoiser(
        tiny_config, Vocabulary.build(prompt_words(), style_slots=4), 59,
        stats=FeatureStats.fit(neutral_clips), base_steps=100,
        diffusion=DiffusionConfig(sample_steps=10),
    )


def lora_config(**overrides):
    values = {"steps": 2, "diffusion_steps": 50, "lr": 1e-3, "checkpoint_every": 1, "log_every": 1}
    values.update(overrides)
    return TrainConfig.lora_defaults(**values)


# ----------------------------------------------------------------------
# Loss functions
# ----------------------------------------------------------------------

def test_style_loss_is_zero_for_a_perfect_denoiser(styled_clips):
    clips = styled_clips[:3]
    target = stack_features(clips)

    def G(x_t, t, cond):
        return target

    loss = style_loss(G, clips, make_schedule(100), make_rng(0))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)


def test_style_loss_offsets_and_suffix(styled_clips, neutral_clips):
    clips = styled_clips[:4]
    stats = FeatureStats.fit(neutral_clips)
    target = normalize(stack_features(clips), stats)
    seen = []

    def G(x_t, t, cond):
        seen.extend(cond)
        assert t.min() >= 1 and t.max() <= 100
        return target + 1.0

    loss = style_loss(G, clips, make_schedule(100), make_rng(0), stats=stats)
    assert float(loss.data) == pytest.approx(1.0, rel=1e-5)
    for clip, prompt in zip(clips, seen):
        assert len(prompt) == len(clip.prompt) + 3
        assert prompt[-3:] == ("in", "<bouncy>", "style")
        assert strip_style(prompt) == clip.prompt


def test_style_loss_accepts_a_single_clip(styled_clips):
    clip = styled_clips[0]
    loss = style_loss(lambda x, t, c: np.zeros_like(x), clip, make_schedule(10), make_rng(0))
    assert float(loss.data) == pytest.approx(float((clip.features.astype(np.float64) ** 2).mean()), rel=1e-5)


def test_loss_contracts(styled_clips, neutral_clips, tiny_vocab):
    G = lambda x, t, c: np.zeros_like(x)
    sched = make_schedule(10)
    with pytest.raises(ContractViolation):
        style_loss(G, neutral_clips[:2], sched, make_rng(0))
    with pytest.raises(ContractViolation):
        prior_loss(G, styled_clips[:2], sched, make_rng(0))
    with pytest.raises(VocabularyError):
        style_loss(G, styled_clips[:2], sched, make_rng(0), vocab=tiny_vocab)
    prior_loss(G, neutral_clips[:2], sched, make_rng(0))


def test_build_vocabulary_covers_dataset(toy_clips):
    vocab = build_vocabulary(toy_clips, style_slots=2)
    for clip in toy_clips:
        vocab.encode(clip.prompt)
    assert vocab.style_slots == 2


# ----------------------------------------------------------------------
# Base training
# ----------------------------------------------------------------------

def test_train_base_short_run(tmp_path, neutral_clips, tiny_config):
    cfg = TrainConfig.base_defaults(steps=3, batch_size=4, diffusion_steps=10, checkpoint_every=2, log_every=1)
    model, log = train_base(neutral_clips, cfg, tiny_config, DiffusionConfig(sample_steps=10), run_dir=tmp_path)
    assert [e.step for e in log.entries] == [1, 2, 3]
    assert log.checkpoint_steps == [2, 3]
    assert all(np.isfinite(e.loss) and e.grad_norm > 0 for e in log.entries)
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_0000002.mdlc", "step_0000003.mdlc"]
    final = load_tensors(tmp_path / "checkpoints" / "step_0000003.mdlc")
    np.testing.assert_array_equal(final["output.bias"], model.named_parameters()["output.bias"].data)
    assert model.base_steps == 10

    log.write_jsonl(tmp_path / "train_log.jsonl")
    assert TrainLog.read_jsonl(tmp_path / "train_log.jsonl").losses() == log.losses()


def test_train_log_rejects_steps_out_of_order(tmp_path, neutral_clips, tiny_config):
    cfg = TrainConfig.base_defaults(steps=2, batch_size=2, diffusion_steps=10, log_every=1)
    _, log = train_base(neutral_clips, cfg, tiny_config)
    path = tmp_path / "train_log.jsonl"
    log.write_jsonl(path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[::-1]) + "\n")
    with pytest.raises(ValueError):
        TrainLog.read_jsonl(path)


def test_train_base_is_deterministic(neutral_clips, tiny_config):
    cfg = TrainConfig.base_defaults(steps=2, batch_size=3, diffusion_steps=10)
    a, log_a = train_base(neutral_clips, cfg, tiny_config)
    b, log_b = train_base(neutral_clips, cfg, tiny_config)
    assert log_a.losses() == log_b.losses()
    for name, value in a.state_dict().items():
        np.testing.assert_array_equal(value, b.state_dict()[name])


def test_train_base_contracts(neutral_clips, styled_clips, tiny_config):
    with pytest.raises(ConfigError):
        train_base(neutral_clips, TrainConfig.lora_defaults(), tiny_config)
    with pytest.raises(ConfigError):
        train_base([], TrainConfig.base_defaults(steps=1), tiny_config)
    with pytest.raises(ContractViolation):
        train_base(styled_clips, TrainConfig.base_defaults(steps=1), tiny_config)


# ----------------------------------------------------------------------
# LoRA fine-tuning
# ----------------------------------------------------------------------

def test_train_lora_short_run(tmp_path, tiny_model, styled_clips, neutral_clips):
    bouncy = [c for c in styled_clips if c.style_id == 0]
    adapter_set = attach(tiny_model, "q,k,v", r=2)
    before = base_checksum(tiny_model)
    adapter_set, log = train_lora(tiny_model, adapter_set, bouncy, neutral_clips, lora_config(), run_dir=tmp_path)

    assert base_checksum(tiny_model) == before
    assert list(adapter_set.style_tokens) == ["bouncy"]
    assert len(log.entries) == 2
    assert all(e.prior_loss is not None for e in log.entries)
    assert log.entries[0].loss == pytest.approx(log.entries[0].style_loss + log.entries[0].prior_loss, rel=1e-5)
    assert any(np.abs(a.B.data).max() > 0 for a in adapter_set.adapters.values())
    assert (tmp_path / "checkpoints" / "step_0000002.mdlc").is_file()


def test_prior_weight_zero_matches_style_only_first_step(tiny_config, styled_clips, neutral_clips):
    bouncy = [c for c in styled_clips if c.style_id == 0]
    logs = {}
    for lam in (0.0, 1.0):
        model = fresh_model(tiny_config, neutral_clips)
        adapter_set = attach(model, "q,k,v", r=2)
        _, logs[lam] = train_lora(model, adapter_set, bouncy, neutral_clips, lora_config(prior_weight=lam))
    assert logs[0.0].entries[0].prior_loss is None
    assert logs[0.0].entries[0].loss == logs[0.0].entries[0].style_loss
    assert logs[0.0].entries[0].style_loss == logs[1.0].entries[0].style_loss


def test_train_lora_with_generated_prior(tiny_model, styled_clips, neutral_clips):
    bouncy = [c for c in styled_clips if c.style_id == 0]
    adapter_set = attach(tiny_model, "q,k,v", r=2)
    cfg = lora_config(steps=1, prior_source="mixed", prior_pool=2)
    _, log = train_lora(tiny_model, adapter_set, bouncy, neutral_clips, cfg)
    assert log.entries[0].prior_loss is not None


def test_generated_prior_pool_is_neutral(tiny_model):
    attach(tiny_model, "q,k,v", r=2)
    pool = generate_prior_pool(tiny_model, [("someone", "is", "running")], n_clips=2, n_frames=8, seed=0)
    assert len(pool) == 2
    assert all(c.style_id is None and c.motion.n_frames == 8 for c in pool)
    assert tiny_model.adapters_enabled
    with pytest.raises(ConfigError):
        generate_prior_pool(tiny_model, [], n_clips=2, n_frames=8, seed=0)


def test_train_lora_contracts(tiny_config, tiny_model, styled_clips, neutral_clips):
    bouncy = [c for c in styled_clips if c.style_id == 0]
    other = fresh_model(tiny_config, neutral_clips)
    foreign = attach(other, "q", r=1)
    with pytest.raises(ContractViolation):
        train_lora(tiny_model, foreign, bouncy, neutral_clips, lora_config())

    adapter_set = attach(tiny_model, "q", r=1)
    with pytest.raises(ConfigError):
        train_lora(tiny_model, adapter_set, bouncy, neutral_clips, TrainConfig.base_defaults())
    with pytest.raises(ContractViolation):
        train_lora(tiny_model, adapter_set, neutral_clips, neutral_clips, lora_config())
    with pytest.raises(ContractViolation):
        train_lora(tiny_model, adapter_set, [], neutral_clips, lora_config())

    tiny_model.set_trainable(True, ["output.weight"])
    with pytest.raises(ContractViolation):
        train_lora(tiny_model, adapter_set, bouncy, neutral_clips, lora_config())


def test_non_finite_loss_stops_with_checkpoint(tmp_path, tiny_model, styled_clips, neutral_clips):
    bouncy = [c for c in styled_clips if c.style_id == 0]
    adapter_set = attach(tiny_model, "q,k,v", r=2)
    next(iter(adapter_set.adapters.values())).A.data[0, 0] = np.nan
    with pytest.raises(NumericalError):
        train_lora(tiny_model, adapter_set, bouncy, neutral_clips, lora_config(), run_dir=tmp_path)
    assert (tmp_path / "checkpoints" / "step_0000000.mdlc").is_file()


# ----------------------------------------------------------------------
# Longer runs
# ----------------------------------------------------------------------

@pytest.mark.slow
def test_base_model_overfits_one_clip(neutral_clips, tiny_config):
    cfg = TrainConfig.base_defaults(steps=400, batch_size=4, lr=2e-3, diffusion_steps=20, cond_dropout=0.0)
    _, log = train_base(neutral_clips[:1], cfg, tiny_config)
    losses = log.losses()
    assert np.mean(losses[-20:]) < 0.25 * np.mean(losses[:20])


@pytest.mark.slow
def test_lora_reduces_style_loss(neutral_clips, styled_clips, tiny_config):
    cfg = TrainConfig.base_defaults(steps=300, batch_size=6, lr=2e-3, diffusion_steps=20)
    model, _ = train_base(neutral_clips, cfg, tiny_config)
    bouncy = [c for c in styled_clips if c.style_id == 0]
    adapter_set = attach(model, "q,k,v", r=2)
    _, log = train_lora(model, adapter_set, bouncy, neutral_clips, lora_config(steps=300, prior_weight=0.0))
    losses = [e.style_loss for e in log.entries]
    assert np.mean(losses[-30:]) < np.mean(losses[:30])
