import os
from dataclasses import replace

import numpy as np

from core.exceptions import IoError
from core.management.base import DepthKitCommand
from geometry.services import read_rig
from imaging.services import export_png, write_bundle
from synth.services import desk_rig, parse_noise_text, read_scene, render_frame, write_primitive_index


class Command(DepthKitCommand):
    help = (
        'Render a synthetic frame bundle. Scene files hold one primitive per line '
        '(plane|sphere|box followed by key=value fields, plus an optional `scene eta=` line); '
        'rig files hold one camera per line; the bundle is written as <role>.f32 + <role>.hdr '
        'planes with rig.txt and frame.txt.'
    )
    subcommand = 'synth'

    def add_command_arguments(self, parser):
        parser.add_argument('--scene', required=True, help='Scene file.')
        parser.add_argument('--rig', help='Rig file; the desk rig is used when omitted.')
        parser.add_argument('--size', type=int, default=64, help='Polarisation resolution of the desk rig.')
        parser.add_argument('--noise', default='', help='`pol=.. corr=.. struct=.. seed=..`')
        parser.add_argument('--frame-id', type=int, default=0)
        parser.add_argument('--png', action='store_true', help='Also export previews as PNG.')
        parser.add_argument('--index', action='store_true',
                            help='Also write primitive_index.f32, the primitive seen by each pol_left pixel.')

    def config_path(self, options):
        return options['scene']

    def run(self, options):
        scene = read_scene(options['scene'])
        rig = read_rig(options['rig']) if options['rig'] else desk_rig(options['size'])
        noise = parse_noise_text(options['noise'])
        if 'seed=' not in options['noise']:
            noise = replace(noise, seed=options['seed'])
        bundle = render_frame(scene, rig, noise, frame_id=options['frame_id'], threads=options['threads'])
        out = options['out']
        write_bundle(bundle, out)
        if options['png']:
            self.write_previews(bundle, out)
        if options['index']:
            write_primitive_index(scene, rig.camera('pol_left'), out, threads=options['threads'])
        self.stdout.write(f'Wrote {len(bundle.roles())} images ({", ".join(bundle.roles())}) to {out}')

    def write_previews(self, bundle, out):
        previews = {
            'pol_left.png': export_png(bundle.pol_left, 0, (0.0, max(float(bundle.pol_left.data.max()), 1e-12))),
        }
        if bundle.gt_depth is not None:
            far = float(np.nanmax(bundle.gt_depth.filled(np.nan))) if bundle.gt_depth.mask.any() else 1.0
            previews['gt_depth.png'] = export_png(bundle.gt_depth, 0, (0.0, far))
        for name, payload in previews.items():
            path = os.path.join(out, name)
            try:
                with open(path, 'wb') as handle:
                    handle.write(payload)
            except OSError as exc:
                raise IoError(f'cannot write {path}: {exc}') from exc
