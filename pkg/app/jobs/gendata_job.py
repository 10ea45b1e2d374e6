"""
Dataset Generation Job
Renders the synthetic source scenes, shifts the target splits and writes
manifests plus images to the data root.
"""
from app.core.logger import logger, log_job_start, log_job_end
from app.schema.config import ExperimentConfig
from app.service.datasets import generate_datasets


def gendata_job(config: ExperimentConfig, root=None) -> dict:
    job_name = "Dataset Generation Job"
    log_job_start(job_name)

    try:
        result = generate_datasets(config, root)
        logger.info(f"Job completed: {result['message']}")
        for split, path in result["manifests"].items():
            logger.info(f"  {split}: {path}")
        log_job_end(job_name, success=True)
        return result

    except Exception as e:
        logger.exception(f"Error in {job_name}: {str(e)}")
        log_job_end(job_name, success=False)
        raise
