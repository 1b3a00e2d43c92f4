import csv
import os

from calib.graph import RobustKernel
from calib.services import calibrate, read_observations
from core.exceptions import IoError
from core.management.base import DepthKitCommand
from geometry.services import read_rig, write_rig
from reports.services import write_calib_csv


class Command(DepthKitCommand):
    help = (
        'Jointly refine all rig cameras from board corner observations '
        '(CSV with header cam,image,point_id,X,Y,Z,u,v). Writes rig.txt, poses.csv and calib.csv.'
    )
    subcommand = 'calibrate'

    def add_command_arguments(self, parser):
        parser.add_argument('observations', help='Observations CSV.')
        parser.add_argument('--rig', required=True, help='Initial rig file.')
        parser.add_argument('--huber', type=float, default=None, help='Huber delta in pixels.')
        parser.add_argument('--max-iters', type=int, default=None)
        parser.add_argument('--tol', type=float, default=None)

    def config_path(self, options):
        return options['observations']

    def run(self, options):
        observations = read_observations(options['observations'])
        rig = read_rig(options['rig'])
        kernel = None if options['huber'] is None else RobustKernel(options['huber'])
        refined, poses, report = calibrate(
            observations, rig, kernel, options['max_iters'], options['tol'], threads=options['threads'],
        )
        out = options['out']
        write_rig(refined, os.path.join(out, 'rig.txt'))
        write_calib_csv(report, os.path.join(out, 'calib.csv'))
        path = os.path.join(out, 'poses.csv')
        try:
            with open(path, 'w', encoding='utf-8', newline='') as handle:
                writer = csv.writer(handle, lineterminator='\n')
                writer.writerow(['image', 'wx', 'wy', 'wz', 'tx', 'ty', 'tz'])
                for image, pose in sorted(poses.items()):
                    writer.writerow([image, *(repr(float(v)) for v in pose.rotvec()),
                                     *(repr(float(v)) for v in pose.translation)])
        except OSError as exc:
            raise IoError(f'cannot write {path}: {exc}') from exc
        self.stdout.write(
            f'RMSE {report.initial_rmse:.6g} px -> {report.final_rmse:.6g} px in {report.iterations} iterations'
        )
