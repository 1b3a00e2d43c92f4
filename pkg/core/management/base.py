"""
Shared plumbing for the toolkit's management commands: common options,
the run manifest and the mapping from toolkit errors to exit codes.

Exit codes: 0 success, 1 failed check or numerical failure, 2 bad usage or
unparsable input, 3 missing data.
"""
import logging
import os

from django.core.management.base import BaseCommand, CommandError

from core.exceptions import ArgError, DepthKitError, FormatError, IoError, MissingModality
from crossmodal_depth import __version__

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.txt'

EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING_DATA = 3


def write_manifest(directory, subcommand, config, seed):
    """Write manifest.txt into directory, creating it first."""
    try:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, MANIFEST_FILE), 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(f'subcommand={subcommand}\n')
            handle.write(f'config={config or ""}\n')
            handle.write(f'seed={seed}\n')
            handle.write(f'out={directory}\n')
            handle.write(f'version={__version__}\n')
    except OSError as exc:
        raise IoError(f'cannot write manifest to {directory}: {exc}') from exc


def exit_code(exc):
    if isinstance(exc, MissingModality):
        return EXIT_MISSING_DATA
    if isinstance(exc, (ArgError, FormatError)):
        return EXIT_USAGE
    if isinstance(exc, IoError):
        return EXIT_MISSING_DATA
    return EXIT_CHECK_FAILED


class DepthKitCommand(BaseCommand):
    """
    Base for every toolkit command.

    Subclasses set `subcommand`, add their own options in
    add_command_arguments and implement run(options). The manifest is
    written to --out before run starts.
    """

    requires_system_checks = []
    subcommand = None

    def add_arguments(self, parser):
        parser.add_argument('--out', required=True, help='Output directory; manifest.txt is written here first.')
        parser.add_argument('--threads', type=int, default=None,
                            help='Worker threads; 1 gives bit-reproducible output.')
        parser.add_argument('--seed', type=int, default=0)
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def config_path(self, options):
        return ''

    def run(self, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            if options['threads'] is not None and options['threads'] < 1:
                raise ArgError('--threads must be at least 1')
            write_manifest(options['out'], self.subcommand, self.config_path(options), options['seed'])
            self.run(options)
        except DepthKitError as exc:
            logger.error('%s failed: %s', self.subcommand, exc)
            raise CommandError(str(exc), returncode=exit_code(exc)) from exc
