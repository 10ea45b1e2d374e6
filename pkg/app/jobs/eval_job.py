"""
Evaluation Job
Scores a stored checkpoint on one labeled split with the SA branch.
"""
from app.core.constant import Split
from app.core.logger import logger, log_job_start, log_job_end
from app.service.runs import evaluate_checkpoint


def eval_job(checkpoint, split: Split, config_path=None, data_root=None) -> dict:
    job_name = "Evaluation Job"
    log_job_start(job_name)

    try:
        result = evaluate_checkpoint(checkpoint, split, config_path, data_root)
        logger.info(f"Job completed: {result['message']}")
        for name, ap in result["per_class_ap"].items():
            logger.info(f"  {name}: {'n/a' if ap is None else f'{ap:.4f}'}")
        log_job_end(job_name, success=True)
        return result

    except Exception as e:
        logger.exception(f"Error in {job_name}: {str(e)}")
        log_job_end(job_name, success=False)
        raise
