import os
import sys

import click
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

from app import create_app  # noqa: E402
from app.commands import cli  # noqa: E402
from app.utils.errors import EXIT_OK, EXIT_USAGE  # noqa: E402

# Application instance for WSGI servers (gunicorn run:app)
app = create_app(os.getenv('BEVREG_ENV', 'desk'))


def main(argv=None):
    """Dispatch a subcommand and return its exit code."""
    try:
        code = cli.main(args=argv, prog_name='bevreg', standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE if isinstance(e, click.UsageError) else e.exit_code
    except click.Abort:
        click.echo('Aborted!', err=True)
        return EXIT_USAGE
    return code if isinstance(code, int) else EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
