"""
Ablation sweeps over LoRA rank, prior weight, prior-data source and adapted
weights.

Every grid cell loads the same base model, fine-tunes its own adapters and is
scored with the same evaluators, so cells are independent and run in a
process pool. Rows come back in grid order regardless of completion order.
"""

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from stylediff.engine.denoiser import Denoiser, generate, load_model
from stylediff.engine.evaluators import load_evaluator
from stylediff.engine.lora import attach, parse_targets, targets_label
from stylediff.engine.metrics import calculate_all_metrics
from stylediff.engine.motion import LabeledClip
from stylediff.engine.training import train_lora
from stylediff.errors import StyleDiffError
from stylediff.schemas.config import RunConfig
from stylediff.schemas.report import SWEEP_COLUMNS, EvalReport, SweepRow
from stylediff.utils.vocab import strip_style, stylize

logger = logging.getLogger(__name__)

PROGRESS_UPDATE_INTERVAL = 10  # percent of cells


@dataclass(frozen=True)
class SweepCell:
    rank: int
    prior_weight: float
    prior_source: str = "dataset"
    targets: str = "q,k,v"
    seed: int = 0


@dataclass
class SweepContext:
    """Everything a worker needs; plain data so it pickles into the pool."""
    base_dir: Path
    evaluator_dir: Path
    style_set: List[LabeledClip]
    prior_set: List[LabeledClip]
    style_names: List[str]
    config: RunConfig
    cell_dirs: Optional[Path] = None


def build_grid(
    ranks: Sequence[int],
    lambdas: Sequence[float],
    prior_sources: Sequence[str] = ("dataset",),
    targets: Sequence[str] = ("q,k,v",),
    seeds: Sequence[int] = (0,)
) -> List[SweepCell]:
    """Cartesian product of the axes, rank-major."""
    return [
        SweepCell(rank, float(lam), source, targets_label(parse_targets(t)), seed)
        for rank, lam, source, t, seed in itertools.product(ranks, lambdas, prior_sources, targets, seeds)
    ]


def action_prompts(clips: Sequence[LabeledClip]) -> List[Tuple[str, ...]]:
    """Distinct plain prompts of a clip set, sorted."""
    return sorted({strip_style(c.prompt) for c in clips})


def generate_styled_set(
    model: Denoiser,
    styles: Sequence[Tuple[int, str]],
    prompts: Sequence[Tuple[str, ...]],
    n_samples: int,
    n_frames: int,
    seed: int,
    suffix_words: Optional[Dict[str, Sequence[str]]] = None
) -> Tuple[np.ndarray, List[Tuple[str, ...]], List[int]]:
    """
    ``n_samples`` generations per style, cycling through ``prompts``.

    By default each prompt gets the style's token suffix; ``suffix_words``
    maps a style name to literal words appended instead (prompting baseline).
    Returns (features, prompts used, intended style ids).
    """
    all_prompts: List[Tuple[str, ...]] = []
    intended: List[int] = []
    for style_id, name in styles:
        for i in range(n_samples):
            base = tuple(prompts[i % len(prompts)])
            if suffix_words is not None:
                all_prompts.append(base + tuple(suffix_words[name]))
            else:
                all_prompts.append(stylize(base, [name]))
            intended.append(style_id)
    features = generate(model, all_prompts, n_frames, seed)
    return features, all_prompts, intended


def run_cell(context: SweepContext, cell: SweepCell) -> SweepRow:
    """Fine-tune one adapter set and evaluate its stylized generations."""
    config = context.config
    model = load_model(context.base_dir)
    adapter_set = attach(model, cell.targets, cell.rank, seed=cell.seed, scale=config.adapter.scale)
    lora_cfg = config.lora.model_copy(update={
        "prior_weight": cell.prior_weight,
        "prior_source": cell.prior_source,
        "seed": cell.seed,
    })
    run_dir = None
    if context.cell_dirs is not None:
        run_dir = context.cell_dirs / f"r{cell.rank}_l{cell.prior_weight:g}_{cell.prior_source}_{cell.targets.replace(',', '')}_s{cell.seed}"
    train_lora(model, adapter_set, context.style_set, context.prior_set, lora_cfg, context.style_names, run_dir)

    style_ids = sorted({c.style_id for c in context.style_set})
    styles = [(s, context.style_names[s]) for s in style_ids]
    n_frames = context.style_set[0].motion.n_frames
    features, prompts, intended = generate_styled_set(
        model, styles, action_prompts(context.style_set), config.eval.n_samples, n_frames, cell.seed
    )

    classifier = load_evaluator(context.evaluator_dir, "classifier")
    encoder = load_evaluator(context.evaluator_dir, "dual_encoder")
    report: EvalReport = calculate_all_metrics(
        f"r={cell.rank} lambda={cell.prior_weight:g}",
        features, context.style_set, classifier, encoder,
        intended_style_ids=intended, prompts=prompts,
        style_names=context.style_names, cfg=config.eval,
    )
    return SweepRow(
        rank=cell.rank,
        prior_weight=cell.prior_weight,
        prior_source=cell.prior_source,
        targets=cell.targets,
        seed=cell.seed,
        report=report,
    )


def run_sweep(
    context: SweepContext,
    cells: Sequence[SweepCell],
    max_workers: int = 4,
    out_dir: Optional[Path] = None
) -> pd.DataFrame:
    """
    Run every cell and collect one row per cell.

    Writes ``sweep.csv`` (fixed column order) and ``sweep_full.csv`` (all
    report fields) into ``out_dir`` when given. A failing cell is logged and
    the sweep raises after the remaining cells finish.
    """
    num_workers = min(max_workers, len(cells))
    rows: Dict[int, SweepRow] = {}
    failures: List[Tuple[SweepCell, str]] = []
    logger.info(f"Running {len(cells)} sweep cells with {max(num_workers, 1)} worker(s)")

    def _record(done: int):
        pct = 100 * done // len(cells)
        if pct % PROGRESS_UPDATE_INTERVAL == 0 or done == len(cells):
            logger.info(f"Sweep progress: {pct}% ({done}/{len(cells)} cells)")

    if num_workers <= 1:
        # in-process for a single worker
        for index, cell in enumerate(cells):
            try:
                rows[index] = run_cell(context, cell)
            except StyleDiffError as e:
                logger.error(f"Sweep cell {cell} failed: {e}")
                failures.append((cell, str(e)))
            _record(index + 1)
    else:
        with ProcessPoolExecutor(max_workers=num_workers) as executor:
            futures = {executor.submit(run_cell, context, cell): index for index, cell in enumerate(cells)}
            for done, future in enumerate(as_completed(futures), start=1):
                index = futures[future]
                try:
                    rows[index] = future.result()
                except StyleDiffError as e:
                    logger.error(f"Sweep cell {cells[index]} failed: {e}")
                    failures.append((cells[index], str(e)))
                _record(done)

    ordered = [rows[i] for i in sorted(rows)]
    full = pd.DataFrame([row.flat() for row in ordered])
    table = full[SWEEP_COLUMNS] if not full.empty else pd.DataFrame(columns=SWEEP_COLUMNS)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "sweep.csv", index=False)
        if not full.empty:
            extra = pd.DataFrame([row.report.model_dump() for row in ordered])
            pd.concat([full, extra.drop(columns=[c for c in extra.columns if c in full.columns])], axis=1) \
                .to_csv(out_dir / "sweep_full.csv", index=False)
        logger.info(f"Sweep table written to {out_dir / 'sweep.csv'}")

    if failures:
        raise StyleDiffError(f"{len(failures)} of {len(cells)} sweep cells failed; first: {failures[0][1]}")
    return table
