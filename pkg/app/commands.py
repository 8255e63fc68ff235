"""Command-line entry points: gen, train, register, eval, verify and serve."""
import os
from pathlib import Path

import click
import numpy as np
from flask import current_app

from app import create_app
from app.config import load_run_config, preset
from app.models.geometry import RigidTransform, load_kitti_bin, load_poses, write_kitti_bin
from app.models.keypoint import write_keypoints
from app.models.scan_pair import format_manifest_line, read_manifest, write_manifest
from app.services import dataset, evaluation, verification
from app.services.pipeline_service import PipelineService
from app.services.training import Trainer
from app.utils.errors import EXIT_FAILURE, EXIT_USAGE, BevRegError, FormatError

MANIFEST_NAME = 'pairs.txt'
LOOP_STREAM = 1000


class PipelineGroup(click.Group):
    """Maps pipeline errors and usage errors onto the documented exit codes."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise
        except BevRegError as e:
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            ctx.exit(e.exit_code)


def _seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _run_config():
    return current_app.config['RUN_CONFIG']


@click.group(cls=PipelineGroup)
@click.option('--preset', 'preset_name', default=lambda: os.getenv('BEVREG_ENV', 'desk'), show_default='desk',
              help='Preset: desk, full or testing.')
@click.option('--config', 'config_path', default=lambda: os.getenv('BEVREG_CONFIG'),
              type=click.Path(dir_okay=False), help='INI file layered over the preset.')
@click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE', help='Override one setting.')
@click.option('--quiet', is_flag=True, help='Hide progress bars.')
@click.pass_context
def cli(ctx, preset_name, config_path, overrides, quiet):
    """BEV registration and overlap toolkit."""
    run_config = load_run_config(config_path, preset(preset_name).RUN_CONFIG, overrides)
    app = create_app(preset_name, run_config)
    ctx.obj = {'app': app, 'quiet': quiet}
    ctx.with_resource(app.app_context())


@cli.command()
@click.argument('out_dir', type=click.Path(file_okay=False))
@click.option('--loop/--no-loop', default=True, help='Also write a two-lap loop sequence.')
def gen(out_dir, loop):
    """Generate synthetic scenes, scan pairs and their manifest."""
    data = _run_config().data
    out = Path(out_dir)
    half = data.scene_half_size
    extent = (-half, half, -half, half)
    scene_params = dataset.SceneParams.from_config(data)
    scan_params = dataset.ScanParams.from_config(data)
    lines = []
    for s in range(data.scenes):
        scene = dataset.generate_scene(_seed(data.seed, s), extent, scene_params)
        for n, distance in enumerate(data.distances):
            pair = dataset.make_pair(scene, distance, _seed(data.seed, s, n), scan_params, data.sensor_height,
                                     np.radians(data.heading_delta_deg), data.pose_margin)
            name_p, name_q = f'scans/s{s:02d}_d{n:02d}_p.bin', f'scans/s{s:02d}_d{n:02d}_q.bin'
            write_kitti_bin(pair.cloud_p, out / name_p)
            write_kitti_bin(pair.cloud_q, out / name_q)
            lines.append(format_manifest_line(name_p, name_q, pair.gt, pair.distance))
        if loop and s == 0:
            clouds, poses = dataset.make_loop_sequence(scene, data.loop_frames, data.loop_radius,
                                                       _seed(data.seed, s, LOOP_STREAM), scan_params,
                                                       data.sensor_height, data.loop_offset)
            dataset.write_sequence(out / 'loop', clouds, poses)
    write_manifest(lines, out / MANIFEST_NAME)
    current_app.logger.info(f"Wrote {len(lines)} pairs to {out / MANIFEST_NAME}")
    click.echo(str(out / MANIFEST_NAME))


@cli.command()
@click.argument('manifest', type=click.Path(dir_okay=False))
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False), help='Checkpoint to write.')
@click.option('--log', 'log_path', type=click.Path(dir_okay=False), help='Loss log (default: next to the checkpoint).')
@click.option('--steps', type=int, help='Train up to this step (default: train.steps).')
@click.option('--resume', is_flag=True, help='Continue from the checkpoint.')
@click.pass_obj
def train(obj, manifest, checkpoint, log_path, steps, resume):
    """Train the model on the pairs of a manifest."""
    pairs = read_manifest(manifest)
    log_path = log_path or str(Path(checkpoint).with_suffix('.log.csv'))
    trainer = Trainer(_run_config())
    last = trainer.run(pairs, log_path, checkpoint, steps, resume, progress=not obj['quiet'])
    click.echo(f'trained to step {last}; log {log_path}; checkpoint {checkpoint}')


def _parse_gt(text):
    values = text.replace(',', ' ').split()
    if len(values) != 12:
        raise FormatError(f"--gt needs 12 row-major values, got {len(values)}")
    try:
        return RigidTransform.from_row_major([float(v) for v in values], orthonormalize=True)
    except ValueError as e:
        raise FormatError(f"--gt: {e}") from e


@cli.command()
@click.argument('cloud_p', type=click.Path(dir_okay=False))
@click.argument('cloud_q', type=click.Path(dir_okay=False))
@click.option('--checkpoint', default=lambda: os.getenv('BEVREG_CHECKPOINT'), type=click.Path(dir_okay=False),
              help='Trained weights (fresh seeded weights when omitted).')
@click.option('--no-overlap-filter', is_flag=True, help='Select keypoints without the overlap filter.')
@click.option('--max-keypoints', type=int, help='Keypoints per cloud; -1 keeps all.')
@click.option('--seed', type=int, help='RANSAC seed (default: ransac.seed).')
@click.option('--gt', help='Ground truth as 12 row-major values; adds RTE/RRE to the report.')
@click.option('--keypoints-out', type=click.Path(file_okay=False), help='Directory for keypoint dumps.')
@click.pass_context
def register(ctx, cloud_p, cloud_q, checkpoint, no_overlap_filter, max_keypoints, seed, gt, keypoints_out):
    """Register CLOUD_Q onto CLOUD_P and print the transform and report."""
    truth = _parse_gt(gt) if gt else None
    service = PipelineService(_run_config(), checkpoint)
    report = service.register(load_kitti_bin(cloud_p), load_kitti_bin(cloud_q), no_overlap_filter,
                              max_keypoints, seed)
    for line in report.lines():
        click.echo(line)
    if truth is not None:
        rte, rre = evaluation.pose_errors(report.result.transform, truth)
        click.echo(f'rte={rte:.6f}')
        click.echo(f'rre={rre:.6f}')
    if keypoints_out:
        dim = _run_config().model.descriptor_dim
        write_keypoints(report.keypoints_p, Path(keypoints_out) / 'keypoints_p.txt', dim)
        write_keypoints(report.keypoints_q, Path(keypoints_out) / 'keypoints_q.txt', dim)
    if not report.result.success:
        click.echo('registration failed', err=True)
        ctx.exit(EXIT_FAILURE)


def _load_sequence(directory):
    directory = Path(directory)
    scans = sorted((directory / 'velodyne').glob('*.bin'))
    poses = load_poses(directory / 'poses.txt')
    if len(scans) != len(poses):
        raise FormatError(f"{directory}: {len(scans)} scans but {len(poses)} poses")
    return [load_kitti_bin(path) for path in scans], poses


@cli.command(name='eval')
@click.argument('source', type=click.Path())
@click.option('--protocol', type=click.Choice(['overlap', 'registration', 'loopclosure']), required=True)
@click.option('--checkpoint', default=lambda: os.getenv('BEVREG_CHECKPOINT'), type=click.Path(dir_okay=False),
              help='Trained weights (fresh seeded weights when omitted).')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='Report directory.')
@click.option('--oracle', is_flag=True, help='Inject ground-truth overlap, transforms or distances.')
@click.option('--no-overlap-filter', is_flag=True, help='Registration without the overlap filter.')
def evaluate(source, protocol, checkpoint, out_dir, oracle, no_overlap_filter):
    """
    Write a bucket-wise metrics report.

    SOURCE is a pair manifest, or a KITTI-layout sequence directory for loopclosure.
    """
    service = PipelineService(_run_config(), checkpoint)
    if protocol == 'loopclosure':
        clouds, poses = _load_sequence(source)
        rows, columns, summary = evaluation.evaluate_loop_closure(service, clouds, poses, oracle)
    elif protocol == 'overlap':
        rows, columns, summary = evaluation.evaluate_overlap(service, read_manifest(source), oracle)
    else:
        rows, columns, summary = evaluation.evaluate_registration(service, read_manifest(source), oracle,
                                                                  no_overlap_filter)
    evaluation.write_report(out_dir, protocol, rows, columns, summary)
    click.echo(evaluation.format_table(rows, columns), nl=False)


@cli.command()
@click.option('--suite', 'suites', multiple=True, type=click.Choice(sorted(verification.SUITES)),
              help='Run only these suites.')
def verify(suites):
    """Run the property suites; exits 3 when any fails."""
    results = verification.run_all(suites or None)
    for result in results:
        click.echo(result.line())
    verification.require_all_passed(results)
    click.echo(f'all {len(results)} checks passed')


@cli.command()
@click.option('--host', default=lambda: os.getenv('HOST', '0.0.0.0'))
@click.option('--port', default=lambda: int(os.getenv('PORT', 5000)), type=int)
@click.pass_obj
def serve(obj, host, port):
    """Start the development HTTP server."""
    debug = os.getenv('FLASK_DEBUG', 'False').lower() in ['true', '1', 't']
    obj['app'].run(host=host, port=port, debug=debug)
