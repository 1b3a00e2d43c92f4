import os

import numpy as np
from django.core.management.base import CommandError

from core.exceptions import ArgError, IoError
from core.management.base import EXIT_MISSING_DATA, DepthKitCommand
from imaging.containers import DepthField, ImagePlane
from imaging.services import export_png, read_bundle, write_depth
from polarisation.services import recovered_polarisation
from reports.services import (
    write_breakdown_csv,
    write_history_csv,
    write_metrics_csv,
    write_recovery_workbook,
)
from solver.services import evaluate, evaluate_ranges, parse_solve_text, recover_depth
from synth.services import read_primitive_index


class Command(DepthKitCommand):
    help = (
        'Recover depth for a bundle by descent on the cross-modal loss. Strategy letters: '
        'S stereo, T i-ToF, L structured light, M temporal. Solver options are a '
        '`key=value` line: iterations, step, optimizer (plain|momentum|adaptive), momentum, '
        'decay, init (constant|noisy_gt|from_corr|auto), depth, noise, seed, sharpen.'
    )
    subcommand = 'recover'

    def add_command_arguments(self, parser):
        parser.add_argument('bundle', help='Bundle directory.')
        parser.add_argument('--strategy', required=True)
        parser.add_argument('--options', default='', help='Solver options line.')
        parser.add_argument('--crop', type=int, default=0, help='Border excluded from the metrics.')
        parser.add_argument('--patch', type=int, default=None,
                            help='Add metrics restricted to this primitive (needs synth --index).')
        parser.add_argument('--xlsx', action='store_true', help='Also write report.xlsx.')
        parser.add_argument('--png', action='store_true',
                            help='Also export the recovered polarisation and its specular mask as PNG.')

    def config_path(self, options):
        return options['bundle']

    def run(self, options):
        bundle = read_bundle(options['bundle'])
        overrides = {'strategy': options['strategy']}
        if 'seed=' not in options['options']:
            overrides['seed'] = options['seed']
        cfg = parse_solve_text(options['options'], **overrides)
        depth, report = recover_depth(bundle, cfg=cfg, threads=options['threads'])
        out = options['out']
        write_depth(depth, out, 'depth')
        if report.corr_depth is not None:
            write_depth(DepthField(report.corr_depth), out, 'depth_corr')
        write_history_csv(report, os.path.join(out, 'history.csv'))
        write_breakdown_csv(report.breakdown, os.path.join(out, 'breakdown.csv'))
        if bundle.gt_depth is not None:
            labelled = [('all', evaluate(depth, bundle.gt_depth, crop=options['crop']))]
            ranges = evaluate_ranges(depth, bundle.gt_depth, crop=options['crop'])
            labelled.extend((f'cap_{cap:g}m', metrics) for cap, metrics in sorted(ranges.items()))
            if options['patch'] is not None:
                region = read_primitive_index(options['bundle']) == options['patch']
                try:
                    patch = evaluate(depth, bundle.gt_depth, crop=options['crop'], region=region)
                except ArgError as exc:
                    raise CommandError(f'patch {options["patch"]}: {exc}', returncode=EXIT_MISSING_DATA) from exc
                labelled.append(('patch', patch))
            write_metrics_csv(labelled, os.path.join(out, 'metrics.csv'))
            row = labelled[0][1]
            self.stdout.write(
                f'{report.strategy}: loss {report.final_loss:.6g} rmse {row.rmse:.4f} '
                f'abs_rel {row.abs_rel:.4f} a1 {row.a1:.4f}'
            )
            if options['patch'] is not None:
                self.stdout.write(f'patch {options["patch"]}: rmse {labelled[-1][1].rmse:.4f}')
        else:
            self.stdout.write(f'{report.strategy}: loss {report.final_loss:.6g}')
        if options['xlsx']:
            write_recovery_workbook(report, os.path.join(out, 'report.xlsx'))
        if options['png']:
            self.write_previews(bundle, depth, out)

    def write_previews(self, bundle, depth, out):
        left = bundle.rig.camera('pol_left')
        _, _, combined, specular = recovered_polarisation(depth, bundle.pol_left, left.intrinsics)
        top = max(float(bundle.pol_left.data.max()), 1e-12)
        previews = {
            'pol_recovered.png': export_png(combined, 0, (0.0, top)),
            'specular_mask.png': export_png(ImagePlane(specular.astype(np.float64)), 0, (0.0, 1.0)),
        }
        for name, payload in previews.items():
            path = os.path.join(out, name)
            try:
                with open(path, 'wb') as handle:
                    handle.write(payload)
            except OSError as exc:
                raise IoError(f'cannot write {path}: {exc}') from exc
