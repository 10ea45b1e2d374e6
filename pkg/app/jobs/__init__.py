# CLI jobs package
from app.jobs.gendata_job import gendata_job
from app.jobs.train_job import train_job
from app.jobs.eval_job import eval_job
from app.jobs.ablation_job import ablation_job
from app.jobs.report_job import report_job

__all__ = [
    "gendata_job",
    "train_job",
    "eval_job",
    "ablation_job",
    "report_job"
]
