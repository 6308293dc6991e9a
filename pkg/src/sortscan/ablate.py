"""Ablation drivers: scanning-direction comparison and module toggles.

Every configuration trains from scratch over the same dataset and the same
seed list; reported numbers are test-split metrics aggregated per run,
then summarized as mean and standard deviation over seeds.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from . import synth, train
from .config import RunConfig
from .model import ORDERINGS


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _run_once(run_cfg: RunConfig, model_overrides: dict, seed: int,
              train_set: list[synth.Sample], test_set: list[synth.Sample],
              out_dir: str) -> dict:
    cfg = run_cfg.model_config()
    cfg = dataclasses.replace(cfg, seed=seed, **model_overrides)
    model, _ = train.train(cfg, train_set, out_dir)
    aggregate, _ = train.evaluate(model, test_set)
    return {
        "seed": seed,
        "f_detection": aggregate.f_detection,
        "per_class_f1": aggregate.per_class_f1,
        "dice": aggregate.dice,
        "aji": aggregate.aji,
        "pq": aggregate.pq,
    }


def prepare_data(run_cfg: RunConfig) -> tuple[list[synth.Sample], list[synth.Sample]]:
    samples = synth.generate(run_cfg.synth_config())
    return synth.split(samples, run_cfg.train_frac, seed=run_cfg.data_seed)


def rare_class_index(run_cfg: RunConfig) -> int:
    """0-based index of the least prevalent class."""
    return int(np.argmin(run_cfg.prevalence))


def run_ordering_grid(run_cfg: RunConfig, out_root: str,
                      orderings: tuple[str, ...] = ORDERINGS,
                      seeds: list[int] | None = None) -> dict:
    seeds = seeds if seeds is not None else list(range(run_cfg.seed,
                                                       run_cfg.seed + run_cfg.ablate_seeds))
    train_set, test_set = prepare_data(run_cfg)
    rare = rare_class_index(run_cfg)
    rows = []
    for ordering in orderings:
        runs = []
        for seed in seeds:
            out_dir = os.path.join(out_root, f"ordering_{ordering}_seed{seed}")
            runs.append(_run_once(run_cfg, {"ordering": ordering, "sorting_on": True},
                                  seed, train_set, test_set, out_dir))
        rare_f1 = [r["per_class_f1"][rare] for r in runs]
        mean_per_class = [list(x) for x in zip(*(r["per_class_f1"] for r in runs))]
        rows.append({
            "ordering": ordering,
            "seeds": seeds,
            "rare_class": rare + 1,
            "rare_f1_mean": _mean_sd(rare_f1)[0],
            "rare_f1_sd": _mean_sd(rare_f1)[1],
            "f_detection_mean": _mean_sd([r["f_detection"] for r in runs])[0],
            "f_detection_sd": _mean_sd([r["f_detection"] for r in runs])[1],
            "per_class_f1_mean": [_mean_sd(col)[0] for col in mean_per_class],
            "per_class_f1_sd": [_mean_sd(col)[1] for col in mean_per_class],
            "runs": runs,
        })
    return {"kind": "ordering", "rows": rows}


def run_toggle_grid(run_cfg: RunConfig, out_root: str,
                    seeds: list[int] | None = None) -> dict:
    seeds = seeds if seeds is not None else list(range(run_cfg.seed,
                                                       run_cfg.seed + run_cfg.ablate_seeds))
    train_set, test_set = prepare_data(run_cfg)
    rows = []
    for sorting_on in (False, True):
        for phenotype_on in (False, True):
            runs = []
            for seed in seeds:
                tag = f"sort{int(sorting_on)}_phen{int(phenotype_on)}_seed{seed}"
                out_dir = os.path.join(out_root, f"toggle_{tag}")
                runs.append(_run_once(
                    run_cfg,
                    {"sorting_on": sorting_on, "phenotype_on": phenotype_on,
                     "ordering": "probability_sorted"},
                    seed, train_set, test_set, out_dir))
            rows.append({
                "sorting": sorting_on,
                "phenotype": phenotype_on,
                "seeds": seeds,
                "f_detection_mean": _mean_sd([r["f_detection"] for r in runs])[0],
                "f_detection_sd": _mean_sd([r["f_detection"] for r in runs])[1],
                "dice_mean": _mean_sd([r["dice"] for r in runs])[0],
                "aji_mean": _mean_sd([r["aji"] for r in runs])[0],
                "runs": runs,
            })
    return {"kind": "toggles", "rows": rows}


def format_ordering_table(result: dict) -> str:
    lines = [f"{'ordering':<20} {'rare F1':>16} {'detection F1':>16}"]
    for row in result["rows"]:
        lines.append(f"{row['ordering']:<20} "
                     f"{row['rare_f1_mean']:.4f} ± {row['rare_f1_sd']:.4f} "
                     f"{row['f_detection_mean']:.4f} ± {row['f_detection_sd']:.4f}")
    return "\n".join(lines)


def format_toggle_table(result: dict) -> str:
    lines = [f"{'sorting':<8} {'phenotype':<10} {'detection F1':>16} {'dice':>8} {'aji':>8}"]
    for row in result["rows"]:
        lines.append(f"{str(row['sorting']):<8} {str(row['phenotype']):<10} "
                     f"{row['f_detection_mean']:.4f} ± {row['f_detection_sd']:.4f} "
                     f"{row['dice_mean']:.4f} {row['aji_mean']:.4f}")
    return "\n".join(lines)
