import functools
from pathlib import Path
from typing import Optional

import click

from app.core.constant import Split
from app.core.exceptions import XddaError
from app.core.logger import logger
from app.jobs import ablation_job, eval_job, gendata_job, report_job, train_job
from app.schema.config import ExperimentConfig, load_config


def _load(config_path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """Config from file (defaults when omitted) with command-line overrides"""
    config = load_config(config_path) if config_path else ExperimentConfig()
    update = {}
    if seed is not None:
        update["seed"] = seed
    if out is not None:
        update["output_dir"] = out
    return config.model_copy(update=update) if update else config


def contract_errors(fn):
    """Turn error contracts into a nonzero exit status"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except XddaError as e:
            raise click.ClickException(str(e)) from e

    return wrapper


@click.group()
def cli():
    """Target-perceived dual-branch distillation on synthetic domain-shifted scenes"""


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Flat key = value config file")
@click.option("--seed", type=int, default=None, help="Run seed")
@click.option("--out", type=click.Path(), default=None, help="Data root (defaults to data.root)")
@contract_errors
def gendata(config_path, seed, out):
    """Generate the train/eval splits"""
    config = _load(config_path, seed)
    result = gendata_job(config, out or config.data.root)
    click.echo(result["message"])


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None, help="Run directory (defaults to output_dir)")
@click.option("--data", "data_root", type=click.Path(), default=None, help="Data root (defaults to data.root)")
@contract_errors
def train(config_path, seed, out, data_root):
    """Train one run and write config, metrics, checkpoint and predictions"""
    config = _load(config_path, seed, out)
    result = train_job(config, config.output_dir, data_root)
    click.echo(result["message"])


@cli.command(name="eval")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--split", type=click.Choice([s.value for s in Split]), default=Split.EVAL_TARGET.value)
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Config of the run (defaults to the checkpoint's run directory)")
@click.option("--data", "data_root", type=click.Path(), default=None)
@contract_errors
def evaluate(checkpoint, split, config_path, data_root):
    """Evaluate a checkpoint on a labeled split"""
    result = eval_job(checkpoint, Split(split), config_path, data_root)
    click.echo(result["message"])


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--variant", "variants", multiple=True, help="Variant id or study name; repeatable")
@click.option("--seed", "seeds", type=int, multiple=True, help="Seed; repeatable (defaults to ablation.seeds)")
@click.option("--out", type=click.Path(), default=None)
@click.option("--data", "data_root", type=click.Path(), default=None)
@contract_errors
def ablate(config_path, variants, seeds, out, data_root):
    """Run ablation variants over seeds and print the comparison tables"""
    config = _load(config_path, out=out)
    result = ablation_job(config, list(variants) or None, list(seeds) or None, config.output_dir, data_root)
    click.echo(result["table"])


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@click.option("--out", type=click.Path(), default="reports")
@click.option("--data", "data_root", type=click.Path(), default=None)
@contract_errors
def report(run_dirs, out, data_root):
    """Tabulate and plot finished runs"""
    result = report_job([Path(d) for d in run_dirs], out, data_root)
    click.echo(result["table"])
    logger.debug(f"Plots: {result['plots']}")


if __name__ == "__main__":
    cli()
