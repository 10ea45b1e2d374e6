"""
Training Job
Runs the full stage schedule for one config and writes the run directory.
"""
from app.core.logger import logger, log_job_start, log_job_end
from app.schema.config import ExperimentConfig
from app.service.runs import train_run


def train_job(config: ExperimentConfig, out_dir=None, data_root=None) -> dict:
    """
    Train one run: JDP, then CDD with a frozen teacher, then DTR with EMA
    refresh (or the oracle schedule), evaluating on eval-target as it goes.
    """
    job_name = "Training Job"
    log_job_start(job_name)

    try:
        logger.info(
            f"Seed {config.seed}, branches {config.distill.branch_mode.value}, "
            f"perceiver {config.distill.perceiver_mode.value}, stages {config.distill.stages.value}"
        )
        result = train_run(config, out_dir, data_root)
        logger.info(f"Job completed: {result['message']}")
        logger.info(f"Checkpoint: {result['checkpoint']}")
        log_job_end(job_name, success=True)
        return result

    except Exception as e:
        logger.exception(f"Error in {job_name}: {str(e)}")
        log_job_end(job_name, success=False)
        raise
