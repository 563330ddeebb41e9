"""
Command-line entry point: ``python -m stylediff <command> ...``.

Commands: gen-data, train-base, train-lora, generate, mix, evaluate, sweep.
Every command resolves a RunConfig (preset, then --config file, then flags),
writes it to <out>/config.json and logs into <out>/run.log.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from stylediff.config import get_settings
from stylediff.engine.denoiser import generate, load_model, save_model
from stylediff.engine.evaluators import load_evaluator, save_evaluator, train_classifier, train_dual_encoder
from stylediff.engine.lora import attach, load_adapter, save_adapter
from stylediff.engine.metrics import calculate_all_metrics
from stylediff.engine.motion import LabeledClip, MotionSequence, read_motion_dir, to_global, write_motion_dir
from stylediff.engine.sweep import SweepContext, action_prompts, build_grid, generate_styled_set, run_sweep
from stylediff.engine.toy import action_names, generate_toy_dataset, split_by_style, style_names
from stylediff.engine.training import train_base, train_lora
from stylediff.errors import ConfigError, MissingArtifactError, StyleDiffError
from stylediff.schemas.config import RunConfig, load_run_config
from stylediff.schemas.report import DatasetCard, EvalReport, GenerationSummary, format_reports
from stylediff.utils.rundir import (
    attach_log_file,
    configure_logging,
    detach_log_file,
    echo_config,
    prepare_run_dir,
    require_dir,
)
from stylediff.utils.vocab import stylize, tokenize

logger = logging.getLogger("stylediff")

DATASET_CARD = "dataset.json"
NEUTRAL_DIR = "neutral"
STYLES_DIR = "styles"
EVALUATOR_DIR = "evaluators"


# ----------------------------------------------------------------------
# Shared helpers
# ----------------------------------------------------------------------

def _csv(cast: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse(text: str) -> List[Any]:
        try:
            return [cast(item) for item in text.split(",") if item.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from e
    return parse


def _load_dataset(data_dir: Path) -> Tuple[List[LabeledClip], List[LabeledClip], List[str]]:
    """(neutral clips, stylized clips, style names indexed by style id)."""
    data_dir = require_dir(data_dir, "Data directory")
    neutral = read_motion_dir(require_dir(data_dir / NEUTRAL_DIR, "Neutral clip directory"))
    styles_path = data_dir / STYLES_DIR
    styled = read_motion_dir(styles_path) if styles_path.is_dir() else []
    card_path = data_dir / DATASET_CARD
    names = DatasetCard.model_validate_json(card_path.read_text()).style_names if card_path.is_file() else style_names()
    return neutral, styled, names


def _select_styles(styled: Sequence[LabeledClip], names: Sequence[str], wanted: Optional[Sequence[str]]) -> List[LabeledClip]:
    if not wanted:
        return list(styled)
    unknown = [w for w in wanted if w not in names]
    if unknown:
        raise ConfigError(f"Unknown style(s) {unknown}; dataset has {list(names)}")
    ids = {names.index(w) for w in wanted}
    selected = [c for c in styled if c.style_id in ids]
    if not selected:
        raise MissingArtifactError(f"No clips for style(s) {list(wanted)} in the dataset")
    return selected


def _overrides(args: argparse.Namespace, mapping: Dict[str, str]) -> Dict[str, Any]:
    return {dotted: getattr(args, attr) for attr, dotted in mapping.items() if getattr(args, attr, None) is not None}


def _seed_overrides(seed: Optional[int]) -> Dict[str, Any]:
    if seed is None:
        return {}
    keys = ("data.seed", "model.seed", "base.seed", "lora.seed", "adapter.seed", "eval.seed")
    return {key: seed for key in keys}


def _resolve(args: argparse.Namespace, mapping: Dict[str, str]) -> RunConfig:
    overrides = _seed_overrides(args.seed)
    overrides.update(_overrides(args, mapping))
    return load_run_config(args.config, args.preset, overrides)


def _seed(args: argparse.Namespace) -> int:
    return args.seed if args.seed is not None else get_settings().default_seed


def _write_samples(
    out: Path,
    features: np.ndarray,
    prompts: Sequence[Tuple[str, ...]],
    style_ids: Sequence[Optional[int]],
    dump_world: bool = False
) -> List[Path]:
    clips = [
        LabeledClip(motion=MotionSequence(f), action_id=None, style_id=s, prompt=tuple(p))
        for f, p, s in zip(features, prompts, style_ids)
    ]
    paths = write_motion_dir(clips, out, prefix="sample", suffix=get_settings().motion_suffix)
    if dump_world:
        for path, clip in zip(paths, clips):
            np.save(path.with_suffix(".npy"), to_global(clip).astype(np.float32))
    return paths


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    clips = generate_toy_dataset(config.data)
    neutral, styled = split_by_style(clips)
    suffix = get_settings().motion_suffix
    write_motion_dir(neutral, out / NEUTRAL_DIR, suffix=suffix)
    write_motion_dir(styled, out / STYLES_DIR, suffix=suffix)
    card = DatasetCard(
        data=config.data,
        action_names=action_names()[:config.data.n_actions],
        style_names=style_names(config.data.n_styles),
        n_neutral=len(neutral),
        n_styled=len(styled),
    )
    (out / DATASET_CARD).write_text(card.model_dump_json(indent=2))
    logger.info(f"Wrote {len(neutral)} neutral and {len(styled)} stylized clips to {out}")
    return 0


def cmd_train_base(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    neutral, _, _ = _load_dataset(Path(args.data))
    model, log = train_base(neutral, config.base, config.model, config.diffusion, run_dir=out)
    save_model(model, out)
    log.write_jsonl(out / "train_log.jsonl")
    return 0


def cmd_train_lora(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    neutral, styled, names = _load_dataset(Path(args.data))
    style_set = _select_styles(styled, names, args.style or config.lora.style_names)
    model = load_model(require_dir(args.base, "Base model directory"))
    adapter_set = attach(model, config.adapter.targets, config.adapter.rank,
                         seed=config.adapter.seed, scale=config.adapter.scale)
    adapter_set, log = train_lora(model, adapter_set, style_set, neutral, config.lora, names, run_dir=out)
    save_adapter(adapter_set, out, config.lora)
    log.write_jsonl(out / "train_log.jsonl")
    return 0


def cmd_generate(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    styles = args.style or []
    if args.command == "mix" and len(styles) < 2:
        raise ConfigError("mix needs at least two --style flags")
    model = load_model(require_dir(args.base, "Base model directory"))
    if args.adapter:
        load_adapter(args.adapter, model)
    elif styles:
        raise ConfigError("Styled generation needs --adapter with the trained style tokens")

    base_prompt = tokenize(args.prompt)
    prompt = stylize(base_prompt, styles) if styles else base_prompt
    n_frames = args.frames or config.data.frames
    seed = _seed(args)
    features = generate(model, [prompt] * args.n, n_frames, seed, guidance=config.diffusion.guidance)

    names = style_names()
    style_id = names.index(styles[0]) if len(styles) == 1 and styles[0] in names else None
    paths = _write_samples(out, features, [prompt] * args.n, [style_id] * args.n, args.dump_world)
    summary = GenerationSummary(
        prompt=list(prompt), styles=styles, n=args.n, n_frames=n_frames, seed=seed,
        guidance=config.diffusion.guidance, sample_steps=config.diffusion.sample_steps,
        files=[p.name for p in paths],
    )
    (out / "summary.json").write_text(summary.model_dump_json(indent=2))
    logger.info(f"Generated {args.n} motions for '{' '.join(prompt)}' into {out}")
    return 0


def _evaluators(args: argparse.Namespace, config: RunConfig, out: Path,
                neutral: List[LabeledClip], styled: List[LabeledClip], names: List[str]):
    if args.evaluators:
        directory = require_dir(args.evaluators, "Evaluator directory")
        return load_evaluator(directory, "classifier"), load_evaluator(directory, "dual_encoder"), directory
    directory = out / EVALUATOR_DIR
    classifier = train_classifier(styled, config.eval, n_styles=len(names), style_names=names)
    encoder = train_dual_encoder(neutral + styled, config.eval)
    save_evaluator(classifier, directory, "classifier")
    save_evaluator(encoder, directory, "dual_encoder")
    return classifier, encoder, directory


def cmd_evaluate(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    neutral, styled, names = _load_dataset(Path(args.data))
    if not styled:
        raise MissingArtifactError(f"{args.data} has no stylized clips to evaluate against")
    classifier, encoder, _ = _evaluators(args, config, out, neutral, styled, names)

    reports: List[EvalReport] = [calculate_all_metrics(
        "Real", styled, styled, classifier, encoder,
        intended_style_ids=[c.style_id for c in styled], prompts=[c.prompt for c in styled],
        style_names=names, cfg=config.eval,
    )]
    for sample_dir in args.samples or []:
        clips = read_motion_dir(require_dir(sample_dir, "Sample directory"), suffix=get_settings().motion_suffix)
        intended = [c.style_id for c in clips]
        reports.append(calculate_all_metrics(
            Path(sample_dir).name, clips, styled, classifier, encoder,
            intended_style_ids=intended if all(s is not None for s in intended) else None,
            prompts=[c.prompt for c in clips], style_names=names, cfg=config.eval,
        ))

    if args.base:
        # plain style names as prompt words instead of trained tokens
        model = load_model(require_dir(args.base, "Base model directory"))
        style_ids = sorted({c.style_id for c in styled})
        styles = [(s, names[s]) for s in style_ids]
        words = {name: ("in", name, "style") for _, name in styles}
        features, prompts, intended = generate_styled_set(
            model, styles, action_prompts(styled), config.eval.n_samples,
            styled[0].motion.n_frames, _seed(args), suffix_words=words,
        )
        # text fidelity is scored on the action text without the literal style words
        action_text = [p[:-len(words[names[s]])] for p, s in zip(prompts, intended)]
        reports.append(calculate_all_metrics(
            "Prompting", features, styled, classifier, encoder,
            intended_style_ids=intended, prompts=action_text, style_names=names, cfg=config.eval,
        ))

    (out / "report.json").write_text(json.dumps([r.model_dump() for r in reports], indent=2))
    table = format_reports(reports)
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_sweep(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    neutral, styled, names = _load_dataset(Path(args.data))
    style_set = _select_styles(styled, names, args.style)
    base_dir = require_dir(args.base, "Base model directory")
    _, _, evaluator_dir = _evaluators(args, config, out, neutral, styled, names)

    cells = build_grid(
        args.ranks or [config.adapter.rank],
        args.lambdas or [config.lora.prior_weight],
        args.prior_sources or [config.lora.prior_source],
        args.targets or [",".join(config.adapter.targets)],
        args.seeds or [config.lora.seed],
    )
    context = SweepContext(
        base_dir=base_dir,
        evaluator_dir=evaluator_dir,
        style_set=style_set,
        prior_set=neutral,
        style_names=names,
        config=config,
        cell_dirs=out / "cells",
    )
    table = run_sweep(context, cells, args.workers or get_settings().max_workers, out)
    print(table.to_string(index=False, na_rep="-"))
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig, Path], int]] = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "train-lora": cmd_train_lora,
    "generate": cmd_generate,
    "mix": cmd_generate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}

# flag attribute -> dotted RunConfig key
OVERRIDES: Dict[str, Dict[str, str]] = {
    "gen-data": {
        "n_styles": "data.n_styles",
        "n_actions": "data.n_actions",
        "clips_per_cell": "data.clips_per_cell",
        "style_clips": "data.style_clips_per_cell",
        "frames": "data.frames",
        "joints": "data.n_joints",
    },
    "train-base": {"steps": "base.steps", "lr": "base.lr", "batch_size": "base.batch_size"},
    "train-lora": {
        "steps": "lora.steps",
        "lr": "lora.lr",
        "prior_weight": "lora.prior_weight",
        "prior_source": "lora.prior_source",
        "rank": "adapter.rank",
        "target_list": "adapter.targets",
    },
    "generate": {"guidance": "diffusion.guidance", "sample_steps": "diffusion.sample_steps"},
    "mix": {"guidance": "diffusion.guidance", "sample_steps": "diffusion.sample_steps"},
    "evaluate": {"n_samples": "eval.n_samples"},
    "sweep": {"steps": "lora.steps", "n_samples": "eval.n_samples"},
}


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stylediff", description="Text-to-motion diffusion with LoRA style adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", help="Run directory (default: $STYLEDIFF_RUN_DIR/<command>)")
        p.add_argument("--config", help="TOML or JSON RunConfig file")
        p.add_argument("--preset", help="desk | main | ablation-best | full-scale")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="Overwrite a non-empty run directory")
        return p

    p = command("gen-data", "Synthesize the toy gait dataset")
    p.add_argument("--n-styles", dest="n_styles", type=int)
    p.add_argument("--n-actions", dest="n_actions", type=int)
    p.add_argument("--clips-per-cell", dest="clips_per_cell", type=int)
    p.add_argument("--style-clips", dest="style_clips", type=int, help="Clips per stylized cell")
    p.add_argument("--frames", type=int)
    p.add_argument("--joints", type=int)

    p = command("train-base", "Train the base denoiser on neutral clips")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = command("train-lora", "Fine-tune LoRA adapters and style tokens")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--style", action="append", help="Style to learn (repeatable); default every style in the data")
    p.add_argument("--rank", type=int)
    p.add_argument("--lambda", dest="prior_weight", type=float)
    p.add_argument("--targets", dest="target_list", type=_csv(str), help="e.g. q,k,v or q,k,v,ffn")
    p.add_argument("--prior-source", dest="prior_source", choices=["dataset", "generated", "mixed"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)

    for name, help_text in (("generate", "Sample motions for a prompt"), ("mix", "Sample with two or more style tokens")):
        p = command(name, help_text)
        p.add_argument("--base", required=True)
        p.add_argument("--adapter")
        p.add_argument("--prompt", required=True)
        p.add_argument("--style", action="append")
        p.add_argument("--n", type=int, default=8)
        p.add_argument("--guidance", type=float)
        p.add_argument("--sample-steps", dest="sample_steps", type=int)
        p.add_argument("--frames", type=int, help="Frames per motion (default: data.frames)")
        p.add_argument("--dump-world", dest="dump_world", action="store_true", help="Also write N x J x 3 .npy files")

    p = command("evaluate", "Score sample directories against the real style set")
    p.add_argument("--data", required=True)
    p.add_argument("--samples", action="append", help="Directory of generated motion files (repeatable)")
    p.add_argument("--base", help="Base model for the prompting baseline row")
    p.add_argument("--evaluators", help="Reuse trained evaluators from this directory")
    p.add_argument("--n-samples", dest="n_samples", type=int)

    p = command("sweep", "Rank x lambda ablation grid")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--style", action="append")
    p.add_argument("--ranks", type=_csv(int))
    p.add_argument("--lambdas", type=_csv(float))
    p.add_argument("--prior-sources", dest="prior_sources", type=_csv(str))
    p.add_argument("--targets", action="append", help="Adapted weight set, e.g. q,k,v (repeatable)")
    p.add_argument("--seeds", type=_csv(int))
    p.add_argument("--workers", type=int)
    p.add_argument("--evaluators")
    p.add_argument("--steps", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    return parser


def _inputs(args: argparse.Namespace) -> List[str]:
    found = [getattr(args, name, None) for name in ("data", "base", "adapter", "evaluators", "config")]
    return [p for p in found + list(getattr(args, "samples", None) or []) if p]


def run(args: argparse.Namespace) -> int:
    settings = get_settings()
    config = _resolve(args, OVERRIDES.get(args.command, {}))
    out = prepare_run_dir(args.out or Path(settings.run_dir) / args.command, args.force, _inputs(args))
    echo_config(out, config)
    handler = attach_log_file(out, settings.log_level)
    try:
        logger.info(f"stylediff {args.command} -> {out} (preset {config.preset})")
        return COMMANDS[args.command](args, config, out)
    finally:
        detach_log_file(handler)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(get_settings().log_level)
    try:
        return run(args)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return ConfigError.exit_code
    except StyleDiffError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
