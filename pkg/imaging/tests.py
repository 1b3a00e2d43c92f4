import io
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase
from PIL import Image

from core.exceptions import ArgError, FormatError
from geometry.cameras import CameraRig
from geometry.services import make_camera

from .containers import CorrelationImage, DepthField, FrameBundle, ImagePlane, PolarisationImage
from .services import export_png, read_bundle, read_plane, write_bundle, write_plane


def tiny_rig(width=3, height=2):
    return CameraRig([
        make_camera('pol_left', width, height, 5.0, 5.0, 1.0, 0.5),
        make_camera('pol_right', width, height, 5.0, 5.0, 1.0, 0.5, translation=(-0.1, 0.0, 0.0)),
        make_camera('itof', width + 1, height, 4.0, 4.0, 1.5, 0.5),
        make_camera('structured_light', width, height + 1, 6.0, 6.0, 1.0, 1.0),
    ])


def random_bundle(rng, with_struct=True):
    rig = tiny_rig(int(rng.integers(1, 6)), int(rng.integers(1, 6)))
    left, right = rig.camera('pol_left'), rig.camera('itof')
    struct = rig.camera('structured_light')

    def f32(shape, low=0.0, high=10.0):
        return rng.uniform(low, high, size=shape).astype(np.float32)

    struct_depth = None
    if with_struct:
        values = f32((struct.height, struct.width), 0.1, 12.0)
        values[values > 10.0] = np.nan
        struct_depth = DepthField(values)
    return FrameBundle(
        pol_left=PolarisationImage(f32((4, left.height, left.width))),
        pol_right=PolarisationImage(f32((4, left.height, left.width))),
        corr=CorrelationImage(f32((4, right.height, right.width), -5.0, 5.0)),
        struct_depth=struct_depth,
        gt_depth=DepthField(f32((left.height, left.width), 0.1, 20.0)),
        rig=rig,
        frame_id=int(rng.integers(0, 1000)),
    )


class BundleIoTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = self.tmp.name

    def test_depth_payload_bytes(self):
        write_plane(self.dir, 'gt_depth', DepthField(np.ones((2, 2))))
        with open(os.path.join(self.dir, 'gt_depth.f32'), 'rb') as handle:
            self.assertEqual(handle.read().hex().upper(), '0000803F' * 4)
        with open(os.path.join(self.dir, 'gt_depth.hdr'), encoding='utf-8') as handle:
            self.assertEqual(
                handle.read(),
                'width=2\nheight=2\nchannels=1\ndtype=f32le\nrole=gt_depth\n',
            )

    def test_missing_optional_role_is_not_written(self):
        bundle = random_bundle(np.random.default_rng(0), with_struct=False)
        write_bundle(bundle, self.dir)
        self.assertFalse(os.path.exists(os.path.join(self.dir, 'struct_depth.hdr')))
        self.assertIsNone(read_bundle(self.dir).struct_depth)

    def test_roundtrip_is_bit_exact(self):
        rng = np.random.default_rng(1)
        for index in range(100):
            bundle = random_bundle(rng)
            directory = os.path.join(self.dir, str(index))
            write_bundle(bundle, directory)
            loaded = read_bundle(directory)
            self.assertEqual(loaded.rig, bundle.rig)
            self.assertEqual(loaded.frame_id, bundle.frame_id)
            for role in bundle.roles():
                expected, actual = getattr(bundle, role), getattr(loaded, role)
                if isinstance(expected, DepthField):
                    np.testing.assert_array_equal(actual.mask, expected.mask)
                    np.testing.assert_array_equal(actual.depth, expected.depth)
                else:
                    np.testing.assert_array_equal(actual.data, expected.data)

    def test_identical_bundles_give_identical_bytes(self):
        bundle = random_bundle(np.random.default_rng(2))
        write_bundle(bundle, os.path.join(self.dir, 'a'))
        write_bundle(bundle, os.path.join(self.dir, 'b'))
        for name in sorted(os.listdir(os.path.join(self.dir, 'a'))):
            with open(os.path.join(self.dir, 'a', name), 'rb') as a, open(os.path.join(self.dir, 'b', name), 'rb') as b:
                self.assertEqual(a.read(), b.read(), name)

    def test_truncated_payload(self):
        write_bundle(random_bundle(np.random.default_rng(3)), self.dir)
        path = os.path.join(self.dir, 'pol_left.f32')
        with open(path, 'rb') as handle:
            payload = handle.read()
        with open(path, 'wb') as handle:
            handle.write(payload[:-2])
        with self.assertRaises(FormatError):
            read_bundle(self.dir)

    def test_zero_width_header(self):
        write_plane(self.dir, 'gt_depth', DepthField(np.ones((2, 2))))
        with open(os.path.join(self.dir, 'gt_depth.hdr'), 'w', encoding='utf-8') as handle:
            handle.write('width=0\nheight=2\nchannels=1\ndtype=f32le\nrole=gt_depth\n')
        with self.assertRaises(FormatError):
            read_plane(self.dir, 'gt_depth')

    def test_non_finite_image_rejected(self):
        data = np.ones((4, 2, 2))
        data[1, 0, 0] = np.inf
        write_plane(self.dir, 'pol_left', ImagePlane(data))
        with self.assertRaises(FormatError):
            read_plane(self.dir, 'pol_left')


class PngExportTests(SimpleTestCase):
    def decode(self, payload):
        return np.asarray(Image.open(io.BytesIO(payload)))

    def test_eight_bit_grayscale(self):
        image = Image.open(io.BytesIO(export_png(ImagePlane(np.zeros((1, 3, 5))), 0, (0.0, 1.0))))
        self.assertEqual(image.mode, 'L')
        self.assertEqual(image.size, (5, 3))

    def test_range_endpoints(self):
        low = ImagePlane(np.full((1, 3, 4), -2.0))
        high = ImagePlane(np.full((1, 3, 4), 6.0))
        np.testing.assert_array_equal(self.decode(export_png(low, 0, (-2.0, 6.0))), 0)
        np.testing.assert_array_equal(self.decode(export_png(high, 0, (-2.0, 6.0))), 255)

    def test_midpoint_rounds_half_up(self):
        mid = ImagePlane(np.full((1, 2, 2), 0.5))
        np.testing.assert_array_equal(self.decode(export_png(mid, 0, (0.0, 1.0))), 128)

    def test_monotone(self):
        ramp = ImagePlane(np.linspace(-1.0, 2.0, 300).reshape(1, 10, 30))
        pixels = self.decode(export_png(ramp, 0, (0.0, 1.0))).ravel()
        self.assertTrue(np.all(np.diff(pixels.astype(int)) >= 0))

    def test_channel_out_of_range(self):
        with self.assertRaises(ArgError):
            export_png(ImagePlane(np.zeros((4, 2, 2))), 4, (0.0, 1.0))

    def test_empty_range(self):
        with self.assertRaises(ArgError):
            export_png(ImagePlane(np.zeros((1, 2, 2))), 0, (1.0, 1.0))
