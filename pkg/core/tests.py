import csv
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from calib.services import board_points, board_poses, perturb_rig, synthetic_observations, write_observations
from geometry.services import read_rig, write_rig
from imaging.containers import DepthField
from imaging.services import read_bundle, write_depth
from synth.services import desk_rig

from .conf import get_setting
from .exceptions import ArgError, IoError, MissingModality, NumericError, ParseError, SingularError
from .management.base import MANIFEST_FILE, exit_code
from .parallel import map_items, map_row_bands, row_bands

FIXTURES = Path(__file__).resolve().parent.parent / 'synth' / 'fixtures'

TEXTURED_PLANE = (
    'scene eta=1.5\n'
    'plane center=0,0,2.5 normal=0,0,-1 albedo=0.6 texture=sine scale=0.6 contrast=0.6 ambient=0.2\n'
)


def read_csv(path):
    with open(path, newline='', encoding='utf-8') as handle:
        return list(csv.reader(handle))


class ExceptionTests(SimpleTestCase):
    def test_parse_error_carries_position(self):
        exc = ParseError('unknown key', 4, 9)
        self.assertEqual((exc.line, exc.column), (4, 9))
        self.assertIn('line 4, column 9', str(exc))

    def test_numeric_error_names_the_pixel(self):
        exc = NumericError('gradient is not finite', (np.int64(2), np.int64(5)))
        self.assertEqual(exc.pixel[0], 2)
        self.assertIn('(2, 5)', str(exc))
        self.assertEqual(SingularError('rank deficient').diagnostics, {})

    def test_exit_codes(self):
        self.assertEqual(exit_code(MissingModality('corr')), 3)
        self.assertEqual(exit_code(ArgError('bad')), 2)
        self.assertEqual(exit_code(ParseError('bad', 1, 1)), 2)
        self.assertEqual(exit_code(IoError('gone')), 3)
        self.assertEqual(exit_code(SingularError('rank')), 1)


class ConfTests(SimpleTestCase):
    def test_override_is_seen(self):
        with override_settings(DEPTHKIT={**settings.DEPTHKIT, 'THREADS': 3}):
            self.assertEqual(get_setting('THREADS'), 3)

    def test_unknown_setting(self):
        with self.assertRaises(KeyError):
            get_setting('NO_SUCH_SETTING')


class ParallelTests(SimpleTestCase):
    def test_bands_cover_every_row(self):
        bands = row_bands(10, 3)
        self.assertEqual(bands[0][0], 0)
        self.assertEqual(bands[-1][1], 10)
        for (_, stop), (start, _) in zip(bands, bands[1:]):
            self.assertEqual(stop, start)
        self.assertEqual(row_bands(2, 8), [(0, 1), (1, 2)])

    def test_result_does_not_depend_on_threads(self):
        def band(start, stop):
            return np.arange(start, stop)[:, None] * np.ones((1, 4))

        np.testing.assert_array_equal(map_row_bands(band, 13, 1), map_row_bands(band, 13, 4))

    def test_items_keep_their_order(self):
        self.assertEqual(map_items(lambda x: x * x, range(7), 3), [0, 1, 4, 9, 16, 25, 36])
        self.assertEqual(map_items(str, [], 4), [])


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def call(self, name, *args, **options):
        out = StringIO()
        call_command(name, *args, stdout=out, **options)
        return out.getvalue()

    def assertExitCode(self, code, name, *args, **options):
        with self.assertRaises(CommandError) as ctx:
            self.call(name, *args, **options)
        self.assertEqual(ctx.exception.returncode, code)
        return ctx.exception

    def synth(self, out, scene=None, size=16, **options):
        if scene is None:
            scene = str(FIXTURES / 'plane.scene')
        return self.call('synth', scene=scene, out=str(out), size=size, **options)

    def textured_scene(self):
        path = self.tmp / 'textured.scene'
        path.write_text(TEXTURED_PLANE, encoding='utf-8')
        return str(path)


class SynthCommandTests(CommandTestCase):
    def test_writes_all_roles_and_manifest(self):
        out = self.tmp / 'bundle'
        self.synth(out, rig=str(FIXTURES / 'rig.txt'))
        bundle = read_bundle(out)
        self.assertEqual(bundle.roles(), ['pol_left', 'pol_right', 'corr', 'struct_depth', 'gt_depth'])
        self.assertEqual(bundle.pol_left.shape[-2:], (64, 64))
        manifest = (out / MANIFEST_FILE).read_text(encoding='utf-8')
        self.assertIn('subcommand=synth\n', manifest)
        self.assertIn('seed=0\n', manifest)

    def test_same_seed_gives_identical_bytes(self):
        for name in ('a', 'b'):
            self.synth(self.tmp / name, noise='pol=0.01 corr=0.02 struct=0.001', seed=11)
        for role in ('pol_left', 'corr', 'struct_depth'):
            first = (self.tmp / 'a' / f'{role}.f32').read_bytes()
            self.assertEqual(first, (self.tmp / 'b' / f'{role}.f32').read_bytes())
        self.synth(self.tmp / 'c', noise='pol=0.01 corr=0.02 struct=0.001', seed=12)
        self.assertNotEqual((self.tmp / 'a' / 'pol_left.f32').read_bytes(),
                            (self.tmp / 'c' / 'pol_left.f32').read_bytes())

    def test_png_previews(self):
        out = self.tmp / 'bundle'
        self.synth(out, size=8, png=True)
        self.assertEqual((out / 'pol_left.png').read_bytes()[:8], b'\x89PNG\r\n\x1a\n')
        self.assertTrue((out / 'gt_depth.png').exists())

    def test_unknown_scene_key_is_usage_error(self):
        scene = self.tmp / 'bad.scene'
        scene.write_text('plane center=0,0,2 normal=0,0,-1 colour=red\n', encoding='utf-8')
        exc = self.assertExitCode(2, 'synth', scene=str(scene), out=str(self.tmp / 'bad'))
        self.assertIn('line 1', str(exc))

    def test_missing_scene_file(self):
        self.assertExitCode(3, 'synth', scene=str(self.tmp / 'absent.scene'), out=str(self.tmp / 'x'))

    def test_threads_must_be_positive(self):
        self.assertExitCode(2, 'synth', scene=str(FIXTURES / 'plane.scene'), out=str(self.tmp / 'x'), threads=0)


class RecoverCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.bundle = self.tmp / 'bundle'
        self.synth(self.bundle)

    def test_stereo_run_writes_history_and_metrics(self):
        out = self.tmp / 'run'
        printed = self.call('recover', str(self.bundle), strategy='S', options='iterations=6 init=noisy_gt noise=0.05',
                            out=str(out), xlsx=True)
        history = read_csv(out / 'history.csv')
        self.assertEqual(history[0], ['iteration', 'loss'])
        self.assertEqual(len(history) - 1, 6)
        metrics = read_csv(out / 'metrics.csv')
        self.assertEqual(metrics[1][0], 'all')
        self.assertIn('rmse', printed)
        self.assertTrue((out / 'depth.f32').exists())
        self.assertTrue((out / 'breakdown.csv').exists())
        self.assertTrue((out / 'report.xlsx').exists())
        self.assertIn('subcommand=recover\n', (out / MANIFEST_FILE).read_text(encoding='utf-8'))

    def test_itof_run_writes_corr_depth(self):
        out = self.tmp / 'run'
        self.call('recover', str(self.bundle), strategy='T', options='iterations=2', out=str(out))
        self.assertTrue((out / 'depth_corr.f32').exists())

    def test_patch_metrics(self):
        bundle = self.tmp / 'patch'
        self.synth(bundle, scene=str(FIXTURES / 'patch.scene'), index=True)
        out = self.tmp / 'run'
        printed = self.call('recover', str(bundle), strategy='S', options='iterations=2', patch=1, out=str(out))
        rows = read_csv(out / 'metrics.csv')
        self.assertEqual(rows[-1][0], 'patch')
        self.assertGreater(int(rows[-1][-1]), 0)
        self.assertLess(int(rows[-1][-1]), int(rows[1][-1]))
        self.assertIn('patch 1: rmse', printed)

    def test_patch_without_pixels(self):
        bundle = self.tmp / 'patch'
        self.synth(bundle, scene=str(FIXTURES / 'patch.scene'), index=True)
        exc = self.assertExitCode(3, 'recover', str(bundle), strategy='S', options='iterations=2', patch=7,
                                  out=str(self.tmp / 'run'))
        self.assertIn('patch 7', str(exc))

    def test_recovered_polarisation_previews(self):
        out = self.tmp / 'run'
        self.call('recover', str(self.bundle), strategy='S', options='iterations=2', png=True, out=str(out))
        for name in ('pol_recovered.png', 'specular_mask.png'):
            self.assertEqual((out / name).read_bytes()[:8], b'\x89PNG\r\n\x1a\n', name)

    def test_threads_give_identical_depth(self):
        for threads in (1, 3):
            self.call('recover', str(self.bundle), strategy='ST', options='iterations=3', threads=threads,
                      out=str(self.tmp / f'run{threads}'))
        self.assertEqual((self.tmp / 'run1' / 'depth.f32').read_bytes(),
                         (self.tmp / 'run3' / 'depth.f32').read_bytes())

    def test_unknown_strategy(self):
        self.assertExitCode(2, 'recover', str(self.bundle), strategy='X', out=str(self.tmp / 'run'))

    def test_bad_option_line(self):
        self.assertExitCode(2, 'recover', str(self.bundle), strategy='S', options='iterations=many',
                            out=str(self.tmp / 'run'))

    def test_missing_modality(self):
        (self.bundle / 'corr.f32').unlink()
        (self.bundle / 'corr.hdr').unlink()
        self.assertExitCode(3, 'recover', str(self.bundle), strategy='T', out=str(self.tmp / 'run'))

    def test_temporal_without_frames(self):
        self.assertExitCode(3, 'recover', str(self.bundle), strategy='M', out=str(self.tmp / 'run'))

    def test_missing_bundle(self):
        self.assertExitCode(3, 'recover', str(self.tmp / 'absent'), strategy='S', out=str(self.tmp / 'run'))


class GradcheckCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.bundle = self.tmp / 'bundle'
        self.synth(self.bundle, scene=self.textured_scene(), size=8)

    def gradcheck(self, **options):
        return self.call('gradcheck', str(self.bundle), out=str(self.tmp / 'check'), seed=1,
                         **{'strategy': 'T', 'eps': 1e-5, **options})

    def test_adjoint_agrees(self):
        printed = self.gradcheck()
        rows = read_csv(self.tmp / 'check' / 'gradcheck.csv')
        self.assertEqual(rows[1][-1], '1')
        self.assertIn('max rel err', printed)

    def test_corrupted_adjoint_fails(self):
        with override_settings(DEPTHKIT={**settings.DEPTHKIT, 'CORRUPT_ADJOINT': True}):
            with self.assertRaises(CommandError) as ctx:
                self.gradcheck()
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertEqual(read_csv(self.tmp / 'check' / 'gradcheck.csv')[1][-1], '0')

    def test_non_positive_eps(self):
        with self.assertRaises(CommandError) as ctx:
            self.gradcheck(eps=0.0)
        self.assertEqual(ctx.exception.returncode, 2)

    def test_large_bundle_refused(self):
        big = self.tmp / 'big'
        self.synth(big, scene=self.textured_scene(), size=40)
        self.assertExitCode(2, 'gradcheck', str(big), strategy='S', out=str(self.tmp / 'check'))


class CalibrateCommandTests(CommandTestCase):
    def test_noiseless_observations(self):
        rig = desk_rig(128)
        obs = synthetic_observations(rig, board_poses(12, seed=0), board_points(7, 9, 0.06))
        write_observations(obs, self.tmp / 'obs.csv')
        write_rig(perturb_rig(rig, seed=3), self.tmp / 'start.txt')
        out = self.tmp / 'calib'
        printed = self.call('calibrate', str(self.tmp / 'obs.csv'), rig=str(self.tmp / 'start.txt'), out=str(out))
        self.assertIn('RMSE', printed)
        rows = dict(read_csv(out / 'calib.csv')[1:])
        self.assertLess(float(rows['final_rmse_px']), 1e-6)
        refined = read_rig(out / 'rig.txt')
        self.assertAlmostEqual(refined.camera('itof').intrinsics.fx / rig.camera('itof').intrinsics.fx, 1.0,
                               delta=1e-4)
        self.assertEqual(len(read_csv(out / 'poses.csv')), 13)

    def test_malformed_observations(self):
        (self.tmp / 'obs.csv').write_text('cam,image,point_id,X,Y,Z,u,v\npol_left,0,1,0,0,0,abc,2\n',
                                          encoding='utf-8')
        write_rig(desk_rig(128), self.tmp / 'rig.txt')
        self.assertExitCode(2, 'calibrate', str(self.tmp / 'obs.csv'), rig=str(self.tmp / 'rig.txt'),
                            out=str(self.tmp / 'calib'))


class EvalCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        depth = np.linspace(1.0, 12.0, 20).reshape(4, 5)
        write_depth(DepthField(depth), self.tmp, 'gt_depth')
        write_depth(DepthField(depth), self.tmp, 'depth')

    def test_identical_depths(self):
        out = self.tmp / 'eval'
        printed = self.call('eval', pred=str(self.tmp), gt=str(self.tmp), out=str(out))
        rows = read_csv(out / 'metrics.csv')
        self.assertEqual([row[0] for row in rows[1:]], ['all', 'cap_10m', 'cap_20m'])
        self.assertEqual(float(rows[1][3]), 0.0)
        self.assertEqual(float(rows[1][5]), 1.0)
        self.assertIn('rmse 0.0000', printed)

    def test_empty_overlap(self):
        empty = self.tmp / 'empty'
        empty.mkdir()
        write_depth(DepthField(np.full((4, 5), np.nan)), empty)
        self.assertExitCode(3, 'eval', pred=str(empty), gt=str(self.tmp),
                            out=str(self.tmp / 'eval'))
