"""
unloadlab command line: one entry point, one subcommand per pipeline stage.

    unloadlab gen-shapes --n 4 --seed 7 --out d/
    unloadlab build-dataset --grid mini --out d/
    unloadlab train --manifest d/manifest.jsonl --sr 0.03 --cycle on --out d/
    unloadlab evaluate --model d/model.ckpt --split shape-test --out d/

Settings come from (lowest to highest precedence) class defaults, a
key = value config file (--config) and explicit flags. Logs go to stderr
as one JSON object per line; artifacts go under --out.
"""
import os
import sys
import json
import argparse
from collections import OrderedDict

from logbook import Logger, StreamHandler, DEBUG, INFO
log = Logger('unloadlab.cli')

from unloadlab import meshcore, datagen, fesolve, trainer, evalkit
from unloadlab import fibers as fiberfield
from unloadlab.records import GlobalParams
from unloadlab.unloadnet import ModelConfig, variant_config
from unloadlab.errors import UnloadLabError, ConfigError, IoError, NonConvergence

SEED_ENV = 'UNLOADLAB_SEED'
MODEL_KEYS = tuple(ModelConfig().to_dict())
TRAIN_KEYS = tuple(trainer.TrainConfig().to_dict())
SOLVER_KEYS = tuple(fesolve.SolverOptions().to_dict())
#Keys understood outside the three option classes
RUN_KEYS = ('variant', 'threshold', 'k', 'use_globals', 'train_fraction', 'jobs')

def _parse_value(text):
    text = text.strip()
    lowered = text.lower()
    if lowered in ('on', 'true', 'yes'):
        return True
    if lowered in ('off', 'false', 'no'):
        return False
    if lowered in ('none', 'null'):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text

def parse_config_file(path):
    """Flat key = value settings; # starts a comment"""
    if not os.path.exists(path):
        raise ConfigError('Config file {} does not exist'.format(path))
    settings = OrderedDict()
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError('{}:{}: expected key = value, got {!r}'.format(
                    path, lineno, line))
            key, value = line.split('=', 1)
            key = key.strip().replace('-', '_')
            if key not in MODEL_KEYS+TRAIN_KEYS+SOLVER_KEYS+RUN_KEYS:
                raise ConfigError('{}:{}: unknown setting {}'.format(path, lineno, key))
            settings[key] = _parse_value(value)
    return settings

class RunConfig(object):
    """Resolved settings of one invocation"""
    def __init__(self, command, settings, seed, out):
        self.command = command
        self.settings = OrderedDict(settings)
        self.seed = int(seed)
        self.out = out

    def _pick(self, keys):
        return OrderedDict((k, v) for k, v in self.settings.items() if k in keys)

    def model_config(self):
        base = ModelConfig(**self._pick(MODEL_KEYS))
        variant = self.settings.get('variant')
        return base if variant is None else variant_config(variant, base)

    def train_config(self):
        d = self._pick(TRAIN_KEYS)
        d['seed'] = self.seed
        return trainer.TrainConfig(**d)

    def solver_options(self):
        return fesolve.SolverOptions(**self._pick(SOLVER_KEYS))

    def get(self, key, default=None):
        value = self.settings.get(key)
        return default if value is None else value

    def to_dict(self):
        return OrderedDict([('command', self.command), ('seed', self.seed),
                            ('out', self.out), ('settings', self.settings)])

#Flag destinations that map onto option-class keys
FLAG_KEYS = OrderedDict([('sr', 'supervision_ratio'), ('cycle', 'cycle'),
                         ('epochs', 'max_epochs'), ('patience', 'patience'),
                         ('lr', 'lr'), ('batch_size', 'batch_size'),
                         ('hidden', 'hidden'), ('heads', 'heads'),
                         ('lambda_cycle', 'lambda_cycle'), ('dropout', 'dropout'),
                         ('global_bounds', 'global_bounds'),
                         ('load_mode', 'load_mode'), ('kappa', 'kappa'),
                         ('ramp_steps', 'ramp_steps'), ('newton_tol', 'newton_tol'),
                         ('max_iters', 'max_iters'), ('variant', 'variant'),
                         ('threshold', 'threshold'), ('k', 'k'),
                         ('use_globals', 'use_globals'),
                         ('train_fraction', 'train_fraction'), ('jobs', 'jobs')])

def resolve_run_config(args, environ=None):
    environ = os.environ if environ is None else environ
    settings = parse_config_file(args.config) if getattr(args, 'config', None) else OrderedDict()
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            settings[key] = _parse_value(value) if isinstance(value, str) else value
    if getattr(args, 'seed', None) is not None:
        seed = args.seed
    elif environ.get(SEED_ENV):
        try:
            seed = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError('{} must be an integer, got {!r}'.format(SEED_ENV,
                                                                      environ[SEED_ENV]))
    else:
        seed = settings.get('seed', 0)
    settings.pop('seed', None)
    return RunConfig(args.command, settings, seed, args.out)

def _out_dir(run, sub=None):
    path = run.out if sub is None else os.path.join(run.out, sub)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as err:
        raise IoError('Could not create output directory {}: {}'.format(path, err))
    return path

def _out_path(run, name):
    return os.path.join(_out_dir(run), name)

def _write_json(path, obj):
    try:
        with open(path, 'w') as f:
            json.dump(obj, f, indent=2)
    except (IOError, OSError) as err:
        raise IoError('Could not write {}: {}'.format(path, err))

def _case_params(args):
    return GlobalParams(args.pressure, args.stiffness, args.theta_endo, args.theta_epi)

def _resolve_split(args, run, manifest):
    if args.split == 'lovo':
        if args.lovo_param is None or args.lovo_value is None:
            raise ConfigError('--split lovo needs --lovo-param and --lovo-value')
        return datagen.split_lovo(manifest, args.lovo_param, args.lovo_value)
    return datagen.split_by_shape(manifest,
                                  run.get('train_fraction', datagen.DEFAULT_TRAIN_FRACTION),
                                  run.seed)

def cmd_gen_shapes(args, run):
    specs = datagen.sample_shapes(args.n, run.seed, args.kind, args.mode_file)
    datagen.save_shapes(specs, _out_path(run, datagen.SHAPES_FILE))

def cmd_build_dataset(args, run):
    shapes_path = args.shapes or os.path.join(run.out, datagen.SHAPES_FILE)
    shapes = datagen.load_shapes(shapes_path)
    datagen.build_dataset(shapes, args.grid, run.solver_options(), run.out,
                          datagen.MeshResolution.preset(args.resolution), force=args.force,
                          jobs=run.get('jobs', 1), seed=run.seed)

def cmd_inflate(args, run):
    opts = run.solver_options()
    params = _case_params(args)
    mesh_u = meshcore.load_mesh(args.mesh)
    field = fiberfield.compute_fibers(mesh_u, params.theta_endo_deg, params.theta_epi_deg)
    mesh_ed, report = fesolve.inflate(mesh_u, field, opts.material(params.C_Pa), params.P_Pa,
                                      opts)
    meshcore.save_mesh(mesh_ed, _out_path(run, 'ed.json'))
    _write_json(_out_path(run, 'inflate_report.json'), report.summary())

def cmd_unload(args, run):
    opts = run.solver_options()
    params = _case_params(args)
    mesh_ed = meshcore.load_mesh(args.mesh)
    field = fiberfield.compute_fibers(mesh_ed, params.theta_endo_deg, params.theta_epi_deg)
    mesh_u, report = fesolve.unload_inverse(mesh_ed, field, opts.material(params.C_Pa),
                                            params.P_Pa, opts)
    _write_json(_out_path(run, 'unload_report.json'), report.summary())
    if not report.converged:
        raise NonConvergence('Backward displacement stopped at mismatch {:.3e} cm'.format(
            report.mismatch), report=report)
    meshcore.save_mesh(mesh_u, _out_path(run, 'unloaded.json'))

def cmd_train(args, run):
    manifest = datagen.load_manifest(args.manifest)
    split = _resolve_split(args, run, manifest)
    model, history = trainer.train(manifest, split, run.model_config(), run.train_config(),
                                   checkpoint_path=_out_path(run, args.name+'.ckpt'),
                                   resume=args.resume)
    history.to_csv(_out_path(run, args.name+'_history.csv'))
    log.notice('Model has {} parameters'.format(model.n_parameters()))

def _evaluation_ids(split_name, ckpt, manifest):
    if split_name in ('shape-test', 'lovo-test', 'test'):
        return list(ckpt.split['test'])
    if split_name == 'train':
        return list(ckpt.split['fit'])+list(ckpt.split['val'])
    if split_name == 'all':
        return [r.case_id for r in manifest]
    raise ConfigError('Unknown evaluation split {}'.format(split_name))

def cmd_evaluate(args, run):
    ckpt = trainer.load_checkpoint(args.model)
    manifest_path = args.manifest or ckpt.split.get('manifest_dir')
    if manifest_path is None:
        raise ConfigError('No --manifest given and none recorded in {}'.format(args.model))
    manifest = datagen.load_manifest(manifest_path)
    case_ids = _evaluation_ids(args.split, ckpt, manifest)
    threshold = run.get('threshold', evalkit.DSC_THRESHOLD_CM)
    heatmap_dir = _out_dir(run, 'heatmaps') if args.heatmaps else None
    report = evalkit.evaluate_model(ckpt.model, manifest, case_ids, threshold,
                                    run.get('jobs', 1), pointset=args.pointset,
                                    heatmap_dir=heatmap_dir)
    report.to_csv(_out_path(run, 'metrics.csv'))
    report.to_json(_out_path(run, 'metrics.json'))
    if args.inverse_fe:
        fe = evalkit.evaluate_model(evalkit.InverseFePredictor(run.solver_options()), manifest,
                                    case_ids, threshold, run.get('jobs', 1))
        fe.to_csv(_out_path(run, 'metrics_inverse_fe.csv'))
        speedup = fe.column('infer_s').mean()/max(report.column('infer_s').mean(), 1e-12)
        log.notice('Surrogate is {:.0f}x faster than the inverse FE solve'.format(speedup))
    if args.plots:
        _plot_evaluation(run, ckpt, manifest, case_ids)

def _plot_evaluation(run, ckpt, manifest, case_ids):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    from unloadlab import plotting
    f = plt.figure(figsize=(7, 4))
    plotting.plot_history(ckpt.history, ax=f.add_subplot(111), title='Training history')
    plotting.save_figure(f, _out_path(run, 'history.png'))
    rec = manifest.get(case_ids[0])
    unloaded, ed = manifest.meshes(rec)
    pred = ckpt.model.predict_mesh(ed, rec.params)
    f = plt.figure(figsize=(5, 6))
    plotting.plot_node_errors(unloaded, evalkit.node_errors(pred, unloaded),
                              ax=f.add_subplot(111), title=rec.case_id)
    plotting.save_figure(f, _out_path(run, 'node_errors_{}.png'.format(rec.case_id)))

def cmd_predict(args, run):
    ckpt = trainer.load_checkpoint(args.model)
    mesh_ed = meshcore.load_mesh(args.mesh)
    mesh_u, seconds = trainer.predict(ckpt.model, mesh_ed, _case_params(args))
    meshcore.save_mesh(mesh_u, _out_path(run, 'predicted_unloaded.json'))
    _write_json(_out_path(run, 'predict_timing.json'), {'infer_s': seconds})

def cmd_ablate(args, run):
    manifest = datagen.load_manifest(args.manifest)
    split = _resolve_split(args, run, manifest)
    variants = [v.strip() for v in args.variants.split(',') if v.strip()]
    base = ModelConfig(**run._pick(MODEL_KEYS))
    table = evalkit.run_ablation_suite(manifest, split, variants, base, run.train_config(),
                                       run.get('threshold', evalkit.DSC_THRESHOLD_CM),
                                       out_dir=_out_dir(run),
                                       jobs=run.get('jobs', 1))
    for row in table.rows():
        log.notice('{variant}: DSC {DSC_mean:.4f} HD {HD_cm_mean:.4f} cm'.format(**row))

def cmd_pca_baseline(args, run):
    manifest = datagen.load_manifest(args.manifest)
    train_ids, test_ids = _resolve_split(args, run, manifest)
    baseline = evalkit.fit_pca_baseline(manifest.select(train_ids), run.get('k', 5),
                                        use_globals=bool(run.get('use_globals', False)),
                                        manifest=manifest)
    baseline.save(_out_path(run, 'pca_baseline.npz'))
    report = evalkit.evaluate_model(baseline, manifest, test_ids,
                                    run.get('threshold', evalkit.DSC_THRESHOLD_CM),
                                    run.get('jobs', 1))
    report.to_csv(_out_path(run, 'metrics_pca.csv'))
    report.to_json(_out_path(run, 'metrics_pca.json'))

COMMANDS = OrderedDict([('gen-shapes', cmd_gen_shapes), ('build-dataset', cmd_build_dataset),
                        ('inflate', cmd_inflate), ('unload', cmd_unload),
                        ('train', cmd_train), ('predict', cmd_predict),
                        ('evaluate', cmd_evaluate), ('ablate', cmd_ablate),
                        ('pca-baseline', cmd_pca_baseline)])

def _add_case_flags(p):
    p.add_argument('--mesh', required=True, help='Input mesh (native JSON or .vtk)')
    p.add_argument('--pressure', type=float, default=8., help='Cavity pressure (mmHg)')
    p.add_argument('--stiffness', type=float, default=100., help='Fung stiffness C (Pa)')
    p.add_argument('--theta-endo', type=float, default=60., help='Endocardial helix angle (deg)')
    p.add_argument('--theta-epi', type=float, default=-60., help='Epicardial helix angle (deg)')

def _add_solver_flags(p):
    p.add_argument('--load-mode', choices=fesolve.LOAD_MODES, dest='load_mode')
    p.add_argument('--kappa', type=float, help='Volumetric penalty (Pa), default 10*C')
    p.add_argument('--ramp-steps', type=int, dest='ramp_steps')
    p.add_argument('--newton-tol', type=float, dest='newton_tol')
    p.add_argument('--max-iters', type=int, dest='max_iters')

def _add_split_flags(p):
    p.add_argument('--manifest', required=True)
    p.add_argument('--split', choices=('shape', 'lovo'), default='shape')
    p.add_argument('--train-fraction', type=float, dest='train_fraction')
    p.add_argument('--lovo-param')
    p.add_argument('--lovo-value', type=float)

def _add_train_flags(p):
    p.add_argument('--sr', type=float, help='Supervision ratio')
    p.add_argument('--cycle', choices=('on', 'off'))
    p.add_argument('--epochs', type=int)
    p.add_argument('--patience', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--batch-size', type=int, dest='batch_size')
    p.add_argument('--hidden', type=int)
    p.add_argument('--heads', type=int)
    p.add_argument('--lambda-cycle', type=float, dest='lambda_cycle')
    p.add_argument('--dropout', type=float)
    p.add_argument('--global-bounds', choices=('table', 'train'), dest='global_bounds')

def build_parser():
    parser = argparse.ArgumentParser(prog='unloadlab',
                                     description='Unloaded left-ventricle geometry pipeline')
    sub = parser.add_subparsers(dest='command')
    sub.required = True
    parsers = OrderedDict()
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument('--out', default='.', help='Artifact directory')
        p.add_argument('--seed', type=int)
        p.add_argument('--config', help='key = value settings file')
        p.add_argument('--jobs', type=int)
        p.add_argument('--verbose', action='store_true')
        parsers[name] = p

    p = parsers['gen-shapes']
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--kind', choices=datagen.SHAPE_KINDS, default=datagen.PARAMETRIC_ELLIPSOID)
    p.add_argument('--mode-file')

    p = parsers['build-dataset']
    p.add_argument('--shapes', help='Shape file (default OUT/shapes.json)')
    p.add_argument('--grid', choices=tuple(datagen.GRIDS), default='full')
    p.add_argument('--resolution', choices=tuple(datagen.RESOLUTIONS), default='default')
    _add_solver_flags(p)
    p.add_argument('--force', action='store_true')

    for name in ('inflate', 'unload'):
        _add_case_flags(parsers[name])
        _add_solver_flags(parsers[name])

    p = parsers['train']
    _add_split_flags(p)
    _add_train_flags(p)
    p.add_argument('--variant')
    p.add_argument('--name', default='model', help='Checkpoint and history file stem')
    p.add_argument('--resume', help='Checkpoint to continue from')

    p = parsers['predict']
    _add_case_flags(p)
    p.add_argument('--model', required=True)

    p = parsers['evaluate']
    p.add_argument('--model', required=True)
    p.add_argument('--manifest')
    p.add_argument('--split', default='shape-test',
                   choices=('shape-test', 'lovo-test', 'test', 'train', 'all'))
    p.add_argument('--threshold', type=float, help='Node DSC threshold (cm)')
    p.add_argument('--pointset', action='store_true',
                   help='Also report the correspondence-free Hausdorff distance')
    p.add_argument('--heatmaps', action='store_true', help='Write per-case error VTK files')
    p.add_argument('--inverse-fe', action='store_true', dest='inverse_fe',
                   help='Also time and score the inverse FE solve')
    p.add_argument('--plots', action='store_true')

    p = parsers['ablate']
    _add_split_flags(p)
    _add_train_flags(p)
    p.add_argument('--variants', default='A0,A1,A2,A3,A4,A5')
    p.add_argument('--threshold', type=float)

    p = parsers['pca-baseline']
    _add_split_flags(p)
    p.add_argument('--k', type=int)
    p.add_argument('--use-globals', action='store_const', const=True, dest='use_globals')
    p.add_argument('--threshold', type=float)
    return parser

def json_line_formatter(record, handler):
    return json.dumps(OrderedDict([('time', record.time.isoformat()),
                                   ('level', record.level_name),
                                   ('channel', record.channel),
                                   ('message', record.message)]))

def make_log_handler(verbose=False, stream=None):
    handler = StreamHandler(sys.stderr if stream is None else stream,
                            level=DEBUG if verbose else INFO, bubble=False)
    handler.formatter = json_line_formatter
    return handler

def main(argv=None, environ=None):
    """Run one subcommand; returns the process exit code"""
    args = build_parser().parse_args(argv)
    with make_log_handler(args.verbose).applicationbound():
        try:
            run = resolve_run_config(args, environ)
            log.notice('Resolved configuration: {}'.format(json.dumps(run.to_dict())))
            COMMANDS[args.command](args, run)
        except UnloadLabError as err:
            log.error(json.dumps(OrderedDict([('error', err.__class__.__name__),
                                              ('message', str(err)),
                                              ('exit_code', err.exit_code)])))
            return err.exit_code
    return 0

if __name__ == '__main__':
    sys.exit(main())
