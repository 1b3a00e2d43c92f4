import os

from django.core.management.base import CommandError

from core.management.base import EXIT_CHECK_FAILED, DepthKitCommand
from gradients.services import WRT, check_point, finite_diff_check
from imaging.services import read_bundle
from losses.services import prepare_inputs
from reports.services import write_gradcheck_csv


class Command(DepthKitCommand):
    help = 'Compare adjoint loss gradients with central finite differences on a bundle of at most 32x32 pixels.'
    subcommand = 'gradcheck'

    def add_command_arguments(self, parser):
        parser.add_argument('bundle', help='Bundle directory.')
        parser.add_argument('--strategy', required=True)
        parser.add_argument('--eps', type=float, default=1e-4, help='Finite-difference step in metres.')
        parser.add_argument('--tol', type=float, default=1e-3, help='Largest accepted relative error.')
        parser.add_argument('--wrt', choices=WRT, default='pol')
        parser.add_argument('--term', default='total')

    def config_path(self, options):
        return options['bundle']

    def run(self, options):
        bundle = read_bundle(options['bundle'])
        inputs = prepare_inputs(bundle, options['strategy'])
        d_pol, d_corr = check_point(bundle, inputs, seed=options['seed'])
        check = finite_diff_check(
            inputs, d_pol, d_corr, wrt=options['wrt'], eps=options['eps'], tol=options['tol'], term=options['term'],
        )
        write_gradcheck_csv(check, os.path.join(options['out'], 'gradcheck.csv'))
        self.stdout.write(
            f'max rel err {check.max_rel_err:.3g} at {check.worst_pixel} '
            f'({check.checked} checked, {check.skipped} skipped)'
        )
        if not check.passed:
            raise CommandError(
                f'gradient check failed: {check.max_rel_err:.3g} > {check.tol:g}', returncode=EXIT_CHECK_FAILED,
            )
