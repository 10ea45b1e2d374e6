"""
Ablation Service
Named config deltas for the branch-structure, perceiver-placement, stage and
EMA-ratio studies plus the oracle rows, run over several seeds in parallel
worker processes and summarized as mean and standard deviation of
eval-target mAP.
"""
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import ConfigError, ContractError
from app.core.logger import logger
from app.schema.config import ExperimentConfig, config_diff, from_flat, to_flat
from app.schema.records import AblationRow
from app.service.runs import train_run

SINGLE = {"distill.branch_mode": "single"}

VARIANTS: Dict[str, Dict[str, Any]] = {
    "source_only": {**SINGLE, "distill.use_target_like": False, "distill.use_target": False,
                    "distill.stages": "jdp"},
    "single_branch_S": {**SINGLE, "distill.use_target_like": False, "distill.use_target": False},
    "single_branch_ST": {**SINGLE, "distill.use_target_like": False},
    "single_branch_STL": {**SINGLE},
    "dual_no_perceiver": {"distill.perceiver_mode": "none"},
    "dual_self_attn": {"distill.perceiver_mode": "self"},
    "dual_sym_attn": {"distill.perceiver_mode": "sym"},
    "dual_asym_attn": {"distill.perceiver_mode": "asym"},
    "jdp_only": {"distill.stages": "jdp"},
    "jdp_cdd": {"distill.stages": "jdp_cdd"},
    "jdp_cdd_dtr": {"distill.stages": "jdp_cdd_dtr"},
    "ema_0.96": {"distill.ema_alpha": 0.96},
    "ema_0.996": {"distill.ema_alpha": 0.996},
    "ema_0.9996": {"distill.ema_alpha": 0.9996},
    "oracle_tgt": {"distill.supervision": "oracle_tgt"},
    "oracle_src_tgt": {"distill.supervision": "oracle_src_tgt"},
}

TABLES: Dict[str, Tuple[str, ...]] = {
    "branch structure": ("source_only", "single_branch_S", "single_branch_ST", "single_branch_STL",
                         "dual_asym_attn"),
    "perceiver placement": ("dual_no_perceiver", "dual_self_attn", "dual_sym_attn", "dual_asym_attn"),
    "training stages": ("jdp_only", "jdp_cdd", "jdp_cdd_dtr"),
    "ema ratio": ("ema_0.96", "ema_0.996", "ema_0.9996"),
    "oracle": ("source_only", "dual_asym_attn", "oracle_tgt", "oracle_src_tgt"),
}


def resolve_variants(names: Optional[Sequence[str]]) -> List[str]:
    """Variant ids to run; table names expand to their variants"""
    if not names:
        return list(VARIANTS)
    resolved: List[str] = []
    for name in names:
        members = TABLES.get(name, (name,))
        for member in members:
            if member not in VARIANTS:
                raise ConfigError(f"unknown ablation variant '{member}'")
            if member not in resolved:
                resolved.append(member)
    return resolved


def variant_config(base: ExperimentConfig, variant: str, seed: int, out_root) -> ExperimentConfig:
    """
    ``base`` with the variant delta applied, checked to differ from ``base``
    in exactly that delta, then given its own seed and output directory
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant '{variant}'")
    delta = VARIANTS[variant]
    config = from_flat(delta, base)
    flat_base, flat_new = to_flat(base), to_flat(config)
    expected = {k: (flat_base[k], flat_new[k]) for k in delta if flat_base[k] != flat_new[k]}
    if config_diff(base, config) != expected:
        raise ContractError(f"variant '{variant}' changes more than its documented delta")
    return config.model_copy(update={
        "seed": int(seed),
        "output_dir": str(Path(out_root) / variant / f"seed{seed}"),
    })


def _run_one(job: Tuple[ExperimentConfig, str, int, str]) -> Tuple[str, int, float]:
    config, variant, seed, data_root = job
    result = train_run(config, config.output_dir, data_root)
    return variant, seed, float(result["map_target"])


def summarize(variant: str, seeds: Sequence[int], maps: Sequence[float]) -> AblationRow:
    values = np.asarray(maps, dtype=np.float64)
    return AblationRow(variant=variant, seeds=list(seeds), maps=[float(v) for v in values],
                       mean=float(values.mean()) if len(values) else 0.0,
                       std=float(values.std()) if len(values) else 0.0)


def run_ablation(
    base: ExperimentConfig,
    variants: Sequence[str],
    seeds: Sequence[int],
    out_root,
    data_root,
    workers: Optional[int] = None,
) -> List[AblationRow]:
    """
    Train every (variant, seed) run and collect per-variant rows in variant order

    Args:
        base: Config every variant starts from
        variants: Variant ids
        seeds: Seeds per variant
        out_root: Runs land in ``out_root/<variant>/seed<N>``
        data_root: Dataset root shared by all runs
        workers: Worker processes (defaults to XDDA_THREADS)
    """
    workers = max(1, workers or settings.XDDA_THREADS)
    jobs = [(variant_config(base, v, s, out_root), v, int(s), str(data_root)) for v in variants for s in seeds]
    logger.info(f"Ablation: {len(variants)} variant(s) x {len(seeds)} seed(s) on {workers} worker(s)")
    if workers == 1 or len(jobs) == 1:
        results = [_run_one(job) for job in jobs]
    else:
        with Pool(processes=min(workers, len(jobs))) as pool:
            results = pool.map(_run_one, jobs)
    maps: Dict[str, Dict[int, float]] = {v: {} for v in variants}
    for variant, seed, value in results:
        maps[variant][seed] = value
        logger.info(f"{variant} seed {seed}: mAP {value:.4f}")
    return [summarize(v, list(seeds), [maps[v][int(s)] for s in seeds]) for v in variants]


def format_table(rows: Sequence[AblationRow], title: str = "Ablation") -> str:
    lines = [f"### {title}", "", "| variant | mAP (mean ± std) | seeds |", "|---|---|---|"]
    for row in rows:
        lines.append(f"| {row.variant} | {100 * row.mean:.1f} ± {100 * row.std:.1f} | "
                     f"{', '.join(str(s) for s in row.seeds)} |")
    return "\n".join(lines) + "\n"


def format_tables(rows: Sequence[AblationRow]) -> str:
    """One table per study that has at least one finished variant"""
    by_name: Mapping[str, AblationRow] = {r.variant: r for r in rows}
    parts = []
    for title, members in TABLES.items():
        present = [by_name[m] for m in members if m in by_name]
        if present:
            parts.append(format_table(present, title))
    return "\n".join(parts) if parts else format_table(rows)
