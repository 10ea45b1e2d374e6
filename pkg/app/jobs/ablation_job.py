"""
Ablation Job
Trains the requested variants over the configured seeds and writes the
comparison tables.
"""
from pathlib import Path
from typing import Optional, Sequence

from app.core.logger import logger, log_job_start, log_job_end
from app.schema.config import ExperimentConfig
from app.service.ablation import format_tables, resolve_variants, run_ablation


def ablation_job(config: ExperimentConfig, variants: Optional[Sequence[str]] = None,
                 seeds: Optional[Sequence[int]] = None, out_dir=None, data_root=None) -> dict:
    job_name = "Ablation Job"
    log_job_start(job_name)

    try:
        names = resolve_variants(variants)
        seeds = list(seeds) if seeds else list(config.ablation.seeds)
        out = Path(out_dir or config.output_dir)
        rows = run_ablation(config, names, seeds, out, data_root or config.data.root)
        table = format_tables(rows)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.md").write_text(table, encoding="utf-8")
        (out / "ablation.jsonl").write_text(
            "".join(row.model_dump_json() + "\n" for row in rows), encoding="utf-8"
        )
        logger.info(f"Job completed: {len(rows)} variant(s), table at {out / 'ablation.md'}")
        log_job_end(job_name, success=True)
        return {"status": "success", "rows": rows, "table": table}

    except Exception as e:
        logger.exception(f"Error in {job_name}: {str(e)}")
        log_job_end(job_name, success=False)
        raise
