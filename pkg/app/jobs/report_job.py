"""
Report Job
Collects finished run directories into a markdown table and static plots.
"""
from typing import Sequence

from app.core.logger import logger, log_job_start, log_job_end
from app.service.report import write_report


def report_job(run_dirs: Sequence, out_dir, data_root=None) -> dict:
    job_name = "Report Job"
    log_job_start(job_name)

    try:
        result = write_report(run_dirs, out_dir, data_root)
        logger.info(f"Job completed: {result['message']}")
        log_job_end(job_name, success=True)
        return result

    except Exception as e:
        logger.exception(f"Error in {job_name}: {str(e)}")
        log_job_end(job_name, success=False)
        raise
