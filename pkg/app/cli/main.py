import sys
from typing import Any, Dict, List, Optional

import click

from app.core.config import settings
from app.core.exceptions import CarnotLabError
from app.core.logging import get_logger, set_level
from app.services.pipeline_service import PipelineService, load_config
from app.utils.serialization import canonical_json

logger = get_logger(__name__)


class WordType(click.ParamType):
    """Letters of a word given as digits ("102") or comma separated ("1,0,2")."""
    name = "word"

    def convert(self, value, param, ctx) -> List[int]:
        if isinstance(value, list):
            return value
        text = str(value).strip()
        if not text:
            return []
        parts = text.split(",") if "," in text else list(text)
        try:
            return [int(p) for p in parts]
        except ValueError:
            self.fail(f"not a word: {text!r}", param, ctx)


WORD = WordType()

RUN_OPTIONS = [
    click.option("--config", type=click.Path(exists=True, dir_okay=False), help="TOML run document"),
    click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), help="override the configured seed"),
    click.option("--depth", type=click.IntRange(min=1), help="word-tree depth for the command"),
    click.option("--workers", type=click.IntRange(min=1), help="worker threads for parallel kernels"),
    click.option("--out", type=click.Path(file_okay=False), help="output directory"),
    click.option("--deterministic", type=click.Choice(["on", "off"]), help="pairwise deterministic reduction"),
    click.option("--system", type=click.Path(dir_okay=False), help="construction artifact (defaults to OUT/system.json)"),
    click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
                 help="logging verbosity"),
]


def run_options(fn):
    for option in reversed(RUN_OPTIONS):
        fn = option(fn)
    return fn


def _service(command: str, opts: Dict[str, Any]) -> PipelineService:
    if opts["log_level"]:
        set_level(opts["log_level"].upper())
    logger.info("Running command", command=command, config=opts["config"])
    config = load_config(opts["config"])
    if opts["workers"] is not None:
        settings.workers = opts["workers"]
    if opts["deterministic"] is not None:
        settings.deterministic = opts["deterministic"] == "on"
    return PipelineService(config, seed=opts["seed"], out=opts["out"])


@click.group(help=settings.app_name)
def cli():
    pass


@cli.command(help="validate the configuration and its algebra")
@run_options
def validate(**opts):
    return _service("validate", opts).validate()


@cli.command(help="build and certify the separated system")
@run_options
def construct(**opts):
    return _service("construct", opts).construct(depth=opts["depth"]).certificate


@cli.command(help="evaluate the non-vanishing integral on a certified system")
@run_options
def certify(**opts):
    service = _service("certify", opts)
    settings.deterministic = True
    depths = None
    if opts["depth"] is not None:
        depths = list(range(max(2, opts["depth"] - 2), opts["depth"] + 1))
    return service.certify(system_path=opts["system"], depths=depths).unb


@cli.command("scan-ad", help="empirical AD-regularity of the measure")
@run_options
def scan_ad(**opts):
    service = _service("scan-ad", opts)
    return service.scan_ad(service.load_system(opts["system"]), depth=opts["depth"])


@cli.command(help="maximal versus truncated transform gap")
@run_options
def semmes(**opts):
    service = _service("semmes", opts)
    return service.semmes(service.load_system(opts["system"]), depth=opts["depth"])


@cli.command(help="cylinder versus annulus integrals")
@run_options
@click.option("--outer", type=WORD, default="", help="outer word w")
@click.option("--inner", type=WORD, required=True, help="inner word v extending w")
def compop(outer, inner, **opts):
    service = _service("compop", opts)
    return service.compop(outer, inner, depth=opts["depth"], system_path=opts["system"])


@cli.command(help="point cloud, CSV tables and gnuplot scripts")
@run_options
def export(**opts):
    return _service("export", opts).export(depth=opts["depth"], system_path=opts["system"])


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; the return value is the process exit code."""
    try:
        result = cli.main(args=argv, prog_name="carnot-lab", standalone_mode=False)
    except CarnotLabError as e:
        logger.error("Command failed", code=e.code, error=e.message)
        click.echo(f"error[{e.code}]: {e.message}", err=True)
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected failure", error=str(e))
        click.echo(f"error: {e}", err=True)
        return 1
    if isinstance(result, int):
        return result
    click.echo(canonical_json(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
