"""Evaluation: Dice per test class per fold, fanned out over a thread pool.

Episodes run concurrently (PROTOSEG_THREADS caps the pool) but scores are
reduced in enumeration order, so the table and CSV are deterministic for a
given parameter state and config.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..segmenter import Model, dice
from .config import RunConfig
from .episodes import EpisodeSampler
from .phantoms import generate_dataset


@dataclass
class EvalReport:
    rows: list  # (fold, class_id, episode_count, mean_dice)
    mean_dice: float  # macro average over the rows
    episode_dice: list  # (fold, class_id, support_id, query_id, dice)


def _pool_size(n_tasks: int) -> int:
    env = os.environ.get("PROTOSEG_THREADS", "").strip()
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


def evaluate(model: Model, config: RunConfig) -> EvalReport:
    """Score every evaluation episode of the configured fold (or all folds)."""
    size = config["data.image_size"]
    phantoms = generate_dataset(
        config["data.seed"], config["data.num_slices"], size, size,
        config["data.num_classes"],
    )
    folds = config["episodes.folds"]
    which = range(folds) if config["eval.all_folds"] else [config["episodes.fold"]]
    tagged = []
    for fold in which:
        sampler = EpisodeSampler(
            phantoms, folds, fold, config["episodes.setting"],
            config["episodes.seed"], "labels",
        )
        tagged.extend((fold, ep) for ep in sampler.evaluation_episodes())

    def score(item):
        _, episode = item
        return dice(model.predict(episode).mask, episode.query_mask)

    with ThreadPoolExecutor(max_workers=_pool_size(len(tagged))) as pool:
        scores = list(pool.map(score, tagged))

    episode_dice = [
        (fold, ep.class_id, ep.support_id, ep.query_id, value)
        for (fold, ep), value in zip(tagged, scores)
    ]
    grouped = {}
    for fold, cid, _, _, value in episode_dice:
        grouped.setdefault((fold, cid), []).append(value)
    rows = [
        (fold, cid, len(vals), float(np.mean(vals)))
        for (fold, cid), vals in sorted(grouped.items())
    ]
    mean = float(np.mean([r[3] for r in rows])) if rows else 0.0
    return EvalReport(rows, mean, episode_dice)


def write_report_csv(report: EvalReport, path) -> None:
    lines = ["fold,class_id,episodes,mean_dice"]
    for fold, cid, count, value in report.rows:
        lines.append(f"{fold},{cid},{count},{value:.17g}")
    lines.append(f"all,mean,{sum(r[2] for r in report.rows)},{report.mean_dice:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def format_table(report: EvalReport) -> str:
    lines = [f"{'fold':>4}  {'class':>5}  {'episodes':>8}  {'dice':>7}"]
    for fold, cid, count, value in report.rows:
        lines.append(f"{fold:>4}  {cid:>5}  {count:>8}  {value:7.2f}")
    lines.append(f"{'':>4}  {'mean':>5}  {'':>8}  {report.mean_dice:7.2f}")
    return "\n".join(lines)
