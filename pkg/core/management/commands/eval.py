import os

from django.core.management.base import CommandError

from core.exceptions import ArgError
from core.management.base import EXIT_MISSING_DATA, DepthKitCommand
from imaging.services import read_depth
from reports.services import write_metrics_csv
from solver.services import evaluate, evaluate_ranges


class Command(DepthKitCommand):
    help = 'Depth metrics (AbsRel, SqRel, RMSE, RMSElog, delta thresholds) of a predicted depth against ground truth.'
    subcommand = 'eval'

    def add_command_arguments(self, parser):
        parser.add_argument('--pred', required=True, help='Directory holding the predicted depth.')
        parser.add_argument('--pred-role', default='depth')
        parser.add_argument('--gt', required=True, help='Directory holding the ground-truth depth.')
        parser.add_argument('--gt-role', default='gt_depth')
        parser.add_argument('--max-range', type=float, default=20.0)
        parser.add_argument('--crop', type=int, default=0)

    def config_path(self, options):
        return options['gt']

    def run(self, options):
        pred = read_depth(options['pred'], options['pred_role'])
        gt = read_depth(options['gt'], options['gt_role'])
        if pred.shape != gt.shape:
            raise ArgError(f'prediction {pred.shape} and ground truth {gt.shape} differ in shape')
        try:
            metrics = evaluate(pred, gt, max_range=options['max_range'], crop=options['crop'])
        except ArgError as exc:
            raise CommandError(str(exc), returncode=EXIT_MISSING_DATA) from exc
        labelled = [('all', metrics)]
        ranges = evaluate_ranges(pred, gt, crop=options['crop'])
        labelled.extend((f'cap_{cap:g}m', report) for cap, report in sorted(ranges.items()))
        write_metrics_csv(labelled, os.path.join(options['out'], 'metrics.csv'))
        self.stdout.write(
            f'rmse {metrics.rmse:.4f} abs_rel {metrics.abs_rel:.4f} sq_rel {metrics.sq_rel:.4f} '
            f'a1 {metrics.a1:.4f} a2 {metrics.a2:.4f} a3 {metrics.a3:.4f} ({metrics.count} px)'
        )
