import sys
import logging

import click

from config import LOG_LEVEL, ConfigError
from handlers import estimate, gamma, history, invert, mischar, sweep
from services import SweepAbortedError

# Logging setup
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    handlers=[logging.StreamHandler()]
)
logger = logging.getLogger(__name__)
logging.getLogger("aiosqlite").setLevel(logging.WARNING)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


@click.group()
def cli():
    """Binomial-expansion error cancellation: estimators, baselines and TFIM sweeps."""


for command in (gamma, estimate, sweep, mischar, invert, history):
    cli.add_command(command)


def main(argv=None) -> int:
    """Run the CLI and map failures to exit codes (2 config, 3 numeric/precondition)."""
    try:
        result = cli.main(args=argv, prog_name="fpec", standalone_mode=False)
        return result if isinstance(result, int) else EXIT_OK
    except (ConfigError, click.UsageError) as e:
        logger.error(f"❌ Configuration error: {e}")
        click.echo(f"Error: {e}", err=True)
        return EXIT_CONFIG
    except SweepAbortedError as e:
        logger.error(f"❌ {e} ({len(e.partial.rows)} rows kept, flagged incomplete)")
        click.echo(f"Error: {e}", err=True)
        return EXIT_NUMERIC
    except (ValueError, ArithmeticError) as e:
        logger.error(f"❌ Numeric or precondition error: {e}")
        click.echo(f"Error: {e}", err=True)
        return EXIT_NUMERIC
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("Aborted", err=True)
        return 1
    except KeyboardInterrupt:
        logger.info("🛑 Interrupted")
        return 130


if __name__ == '__main__':
    sys.exit(main())
