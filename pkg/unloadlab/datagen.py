"""
Left ventricle shape family, structured shell tetrahedralization,
parameter grid sweep and dataset splits.
"""
import os
import json
import time
import itertools
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from logbook import Logger
log = Logger('unloadlab.datagen')

from unloadlab import meshcore
from unloadlab import fibers as fiberfield
from unloadlab import fesolve
from unloadlab.records import (GlobalParams, CaseRecord, DatasetManifest, GRIDS,
                               MMHG_TO_PA, MANIFEST_NAME, canonical_param_name)
from unloadlab.errors import (UnloadLabError, MissingModeFile, ResolutionError,
                              TooFewShapes, ValueNotInGrid, IoError, ParseError,
                              ConfigError)

PARAMETRIC_ELLIPSOID = 'PARAMETRIC_ELLIPSOID'
PCA_MODES = 'PCA_MODES'
SHAPE_KINDS = (PARAMETRIC_ELLIPSOID, PCA_MODES)

#Uniform sampling ranges (cm)
ELLIPSOID_RANGES = OrderedDict([('a', (2., 3.)),
                                ('b', (2., 3.)),
                                ('long_axis', (7., 9.5)),
                                ('base_height', (0., 1.)),
                                ('t_base', (0.8, 1.4)),
                                ('t_apex', (0.8, 1.4))])
PCA_WEIGHT_LIMIT = 2.
DEFAULT_TRAIN_FRACTION = 42./60.
SHAPES_FILE = 'shapes.json'

class ShapeSpec(object):
    """
    One ventricle geometry

    kind PARAMETRIC_ELLIPSOID: params a, b (endocardial short semi-axes),
        long_axis (apex to base), base_height (base plane above the
        equator), t_base, t_apex (wall thickness), all in cm
    kind PCA_MODES: params weights (one per mode, in [-2, 2]) and mode_file
    """
    def __init__(self, shape_id, kind, params):
        if kind not in SHAPE_KINDS:
            raise ConfigError('Unknown shape kind {}'.format(kind))
        self.shape_id = str(shape_id)
        self.kind = kind
        self.params = OrderedDict(params)
        if kind == PCA_MODES:
            weights = np.asarray(self.params.get('weights', []), dtype=np.float64)
            if np.any(np.abs(weights) > PCA_WEIGHT_LIMIT):
                raise ConfigError('PCA mode weights must lie in [-{0}, {0}]'.format(
                    PCA_WEIGHT_LIMIT))

    def to_dict(self):
        return OrderedDict([('shape_id', self.shape_id), ('kind', self.kind),
                            ('params', self.params)])

    @classmethod
    def from_dict(cls, d):
        return cls(d['shape_id'], d['kind'], d['params'])

    def __eq__(self, other):
        return isinstance(other, ShapeSpec) and self.to_dict() == other.to_dict()

    def __ne__(self, other):
        return not self.__eq__(other)

    def __repr__(self):
        return 'ShapeSpec({}, {}, {})'.format(self.shape_id, self.kind, dict(self.params))

class MeshResolution(object):
    """
    n_circ - nodes around each ring
    n_lat - rings from apex to base (the apex is one extra node)
    n_layers - element layers through the wall
    node_band - (min, max) node count enforced on generated meshes, or None
    """
    def __init__(self, n_circ=20, n_lat=10, n_layers=2, node_band=(600, 1000)):
        self.n_circ = int(n_circ)
        self.n_lat = int(n_lat)
        self.n_layers = int(n_layers)
        self.node_band = None if node_band is None else tuple(int(v) for v in node_band)
        self.validate()

    def validate(self):
        if self.n_circ < 3 or self.n_lat < 1 or self.n_layers < 1:
            raise ConfigError('Resolution needs n_circ >= 3, n_lat >= 1, n_layers >= 1')

    @property
    def nodes_per_surface(self):
        return self.n_circ*self.n_lat+1

    @property
    def n_nodes(self):
        return self.nodes_per_surface*(self.n_layers+1)

    @property
    def n_tets(self):
        return 3*self.n_layers*(self.n_circ+2*self.n_circ*(self.n_lat-1))

    def to_dict(self):
        return OrderedDict([('n_circ', self.n_circ), ('n_lat', self.n_lat),
                            ('n_layers', self.n_layers),
                            ('node_band', None if self.node_band is None else list(self.node_band))])

    @classmethod
    def from_dict(cls, d):
        return cls(d['n_circ'], d['n_lat'], d['n_layers'], d.get('node_band'))

    @classmethod
    def preset(cls, name):
        if name not in RESOLUTIONS:
            raise ConfigError('Unknown resolution preset {} (choose from {})'.format(
                name, ', '.join(RESOLUTIONS)))
        return cls(**RESOLUTIONS[name])

RESOLUTIONS = OrderedDict([
    ('default', dict(n_circ=20, n_lat=10, n_layers=2, node_band=(600, 1000))),
    ('coarse', dict(n_circ=8, n_lat=4, n_layers=1, node_band=None)),
])

def load_mode_file(path):
    """
    Read a PCA shape model: whitespace separated N x 3 blocks separated by
    blank lines, the first block the mean node set, the rest modes

    RETURNS
    -------
        mean - (N,3)
        modes - (K,N,3)
    """
    if path is None or not os.path.exists(path):
        raise MissingModeFile('PCA shape kind needs a mode file (got {})'.format(path))
    blocks, current = [], []
    try:
        with open(path, 'r') as f:
            for line in f:
                if line.strip().startswith('#'):
                    continue
                if not line.strip():
                    if current:
                        blocks.append(current)
                        current = []
                    continue
                current.append([float(v) for v in line.split()])
        if current:
            blocks.append(current)
        arrays = [np.array(b, dtype=np.float64) for b in blocks]
    except ValueError as err:
        raise ParseError('Malformed mode file {}: {}'.format(path, err))
    if not arrays or any(a.ndim != 2 or a.shape != arrays[0].shape or a.shape[1] != 3
                         for a in arrays):
        raise ParseError('Mode file {} must hold equally sized N x 3 blocks'.format(path))
    return arrays[0], np.array(arrays[1:]).reshape(-1, arrays[0].shape[0], 3)

def write_mode_file(path, mean, modes):
    blocks = [np.asarray(mean)]+[np.asarray(m) for m in modes]
    try:
        with open(path, 'w') as f:
            f.write('\n\n'.join('\n'.join(' '.join('{:.17g}'.format(v) for v in row)
                                          for row in block.tolist())
                                for block in blocks)+'\n')
    except (IOError, OSError) as err:
        raise IoError('Could not write mode file {}: {}'.format(path, err))

def sample_shapes(n, seed=0, kind=PARAMETRIC_ELLIPSOID, mode_file=None):
    """
    Draw n shape specs reproducibly

    Ellipsoid parameters are uniform over ELLIPSOID_RANGES; PCA weights
    are uniform in [-2, 2] for every mode of the mode file.
    """
    if n < 1:
        raise ConfigError('Need at least one shape, got {}'.format(n))
    rng = np.random.default_rng(seed)
    specs = []
    if kind == PCA_MODES:
        _, modes = load_mode_file(mode_file)
        for i in range(n):
            weights = rng.uniform(-PCA_WEIGHT_LIMIT, PCA_WEIGHT_LIMIT, size=modes.shape[0])
            specs.append(ShapeSpec('shape_{:03d}'.format(i), PCA_MODES,
                                   [('weights', weights.tolist()),
                                    ('mode_file', os.path.abspath(mode_file))]))
    elif kind == PARAMETRIC_ELLIPSOID:
        for i in range(n):
            params = [(name, float(rng.uniform(lo, hi)))
                      for name, (lo, hi) in ELLIPSOID_RANGES.items()]
            specs.append(ShapeSpec('shape_{:03d}'.format(i), PARAMETRIC_ELLIPSOID, params))
    else:
        raise ConfigError('Unknown shape kind {}'.format(kind))
    return specs

def save_shapes(specs, path):
    try:
        with open(path, 'w') as f:
            json.dump([s.to_dict() for s in specs], f, indent=1)
    except (IOError, OSError) as err:
        raise IoError('Could not write shapes to {}: {}'.format(path, err))

def load_shapes(path):
    if not os.path.exists(path):
        raise IoError('Shape file {} does not exist'.format(path))
    try:
        with open(path, 'r') as f:
            return [ShapeSpec.from_dict(d) for d in json.load(f)]
    except (ValueError, KeyError) as err:
        raise ParseError('Malformed shape file {}: {}'.format(path, err))

def _extrude_prisms(tris, n_surface, n_layers):
    """
    Split the prisms between consecutive node layers into three tets each.
    Vertices are ordered by global index so neighboring prisms agree on
    the diagonal of their shared quadrilateral face.
    """
    tris = np.sort(np.asarray(tris), axis=1)
    tets = []
    for layer in range(n_layers):
        lo = tris+layer*n_surface
        hi = lo+n_surface
        i, j, k = lo[:, 0], lo[:, 1], lo[:, 2]
        i2, j2, k2 = hi[:, 0], hi[:, 1], hi[:, 2]
        tets.append(np.stack([i, j, k, k2], axis=1))
        tets.append(np.stack([i, j, j2, k2], axis=1))
        tets.append(np.stack([i, i2, j2, k2], axis=1))
    return np.concatenate(tets)

def _orient_tets(nodes, tets):
    """Swap two vertices of every negatively oriented tet"""
    tets = tets.copy()
    flip = meshcore.signed_volumes(nodes, tets) < 0.
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return tets

def _surface_triangles(res):
    """Apex fan plus quad strips of one lat-long surface"""
    n_circ, n_lat = res.n_circ, res.n_lat
    ring = lambda j, i: 1+(j-1)*n_circ+(i % n_circ)
    tris = [[0, ring(1, i), ring(1, i+1)] for i in range(n_circ)]
    for j in range(1, n_lat):
        for i in range(n_circ):
            a, b = ring(j, i), ring(j, i+1)
            c, d = ring(j+1, i), ring(j+1, i+1)
            tris.append([a, c, d])
            tris.append([a, d, b])
    return np.array(tris, dtype=np.int64)

def _ellipsoid_surface(a, b, c, height, res):
    """Lat-long nodes of a truncated ellipsoid with its apex at z=-c"""
    mu_base = np.arccos(np.clip(-height/c, -1., 1.))
    pts = [[0., 0., -c]]
    theta = 2.*np.pi*np.arange(res.n_circ)/res.n_circ
    for j in range(1, res.n_lat+1):
        mu = mu_base*j/res.n_lat
        ring = np.stack([a*np.sin(mu)*np.cos(theta), b*np.sin(mu)*np.sin(theta),
                         np.full(res.n_circ, -c*np.cos(mu))], axis=1)
        if j == res.n_lat:
            ring[:, 2] = height
        pts.extend(ring.tolist())
    return np.array(pts)

def _check_quality(mesh, res):
    if res.node_band is not None:
        lo, hi = res.node_band
        if not lo <= mesh.n_nodes <= hi:
            raise ResolutionError('Mesh has {} nodes, outside the band [{}, {}]'.format(
                mesh.n_nodes, lo, hi))
    ratios = meshcore.aspect_ratios(mesh)
    if ratios.max() >= meshcore.MAX_ASPECT_RATIO:
        raise ResolutionError('Worst element aspect ratio {:.2f} exceeds {}'.format(
            ratios.max(), meshcore.MAX_ASPECT_RATIO))
    log.debug('Shell mesh: {} nodes, {} tets, aspect ratio mean {:.2f} max {:.2f}'.format(
        mesh.n_nodes, mesh.n_tets, ratios.mean(), ratios.max()))

def build_shell_mesh(spec, resolution=None):
    """
    Structured tetrahedral shell for a shape spec

    Node layers interpolate linearly between the endocardial and
    epicardial surfaces; the base ring of every layer lies exactly on
    the plane z = base_height.
    """
    res = MeshResolution() if resolution is None else resolution
    tris = _surface_triangles(res)
    n_surf = res.nodes_per_surface
    if spec.kind == PCA_MODES:
        mean, modes = load_mode_file(spec.params.get('mode_file'))
        weights = np.asarray(spec.params['weights'], dtype=np.float64)
        if mean.shape[0] != res.n_nodes:
            raise ResolutionError(('Mode file has {} nodes but resolution {} '
                                   'needs {}').format(mean.shape[0], res.to_dict(), res.n_nodes))
        if weights.size != modes.shape[0]:
            raise ConfigError('{} weights for {} modes'.format(weights.size, modes.shape[0]))
        nodes = mean+np.tensordot(weights, modes, axes=1)
    else:
        p = spec.params
        lengths = [p['a'], p['b'], p['long_axis'], p['t_base'], p['t_apex']]
        if min(lengths) <= 0. or p['base_height'] < 0. or p['base_height'] >= p['long_axis']:
            raise ResolutionError('Degenerate shape {}: nonpositive length or thickness'.format(
                spec.shape_id))
        c = p['long_axis']-p['base_height']
        endo = _ellipsoid_surface(p['a'], p['b'], c, p['base_height'], res)
        epi = _ellipsoid_surface(p['a']+p['t_base'], p['b']+p['t_base'], c+p['t_apex'],
                                 p['base_height'], res)
        weights = np.linspace(0., 1., res.n_layers+1)
        nodes = np.concatenate([(1.-w)*endo+w*epi for w in weights])
        nodes[np.isclose(nodes[:, 2], p['base_height'], atol=1e-12), 2] = p['base_height']
    tets = _orient_tets(nodes, _extrude_prisms(tris, n_surf, res.n_layers))
    mesh = meshcore.extract_surfaces(meshcore.TetMesh(nodes, tets))
    _check_quality(mesh, res)
    return mesh

def _icosphere(subdivisions):
    t = (1.+np.sqrt(5.))/2.
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
             [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
             [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(v, dtype=np.float64)/np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        midpoints, new_faces = {}, []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoints:
                m = verts[i]+verts[j]
                verts.append(m/np.linalg.norm(m))
                midpoints[key] = len(verts)-1
            return midpoints[key]

        for i, j, k in faces:
            a, b, c = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [[i, a, c], [j, b, a], [k, c, b], [a, b, c]]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)

def build_sphere_shell(r_inner=1., r_outer=2., subdivisions=2, n_layers=4):
    """Concentric spherical shell: an extruded icosphere with no basal rim"""
    if not 0. < r_inner < r_outer:
        raise ResolutionError('Need 0 < r_inner < r_outer, got {}, {}'.format(r_inner, r_outer))
    unit, tris = _icosphere(subdivisions)
    radii = np.linspace(r_inner, r_outer, n_layers+1)
    nodes = np.concatenate([r*unit for r in radii])
    tets = _orient_tets(nodes, _extrude_prisms(tris, unit.shape[0], n_layers))
    return meshcore.extract_surfaces(meshcore.TetMesh(nodes, tets))

def case_grid(name='full'):
    """Cartesian product of a named grid, pressure varying slowest"""
    if name not in GRIDS:
        raise ConfigError('Unknown grid {} (choose from {})'.format(name, ', '.join(GRIDS)))
    return [GlobalParams(*combo) for combo in itertools.product(*GRIDS[name].values())]

def _generate_case(task):
    """Unload and reload one (shape, parameters) case; runs in worker processes"""
    case_id, spec, params, opts, res = task
    t0 = time.perf_counter()
    try:
        seed_mesh = build_shell_mesh(spec, res)
        field = fiberfield.compute_fibers(seed_mesh, params.theta_endo_deg,
                                          params.theta_epi_deg)
        record = fesolve.make_pair(seed_mesh, field, opts.material(params.C_Pa),
                                   params.P_Pa, opts, params=params,
                                   case_id=case_id, shape_id=spec.shape_id)
    except (UnloadLabError, ArithmeticError) as err:
        return case_id, None, '{}: {}'.format(err.__class__.__name__, err), time.perf_counter()-t0
    return case_id, record, None, time.perf_counter()-t0

def build_dataset(shapes, grid, opts, out_dir, resolution=None, force=False, jobs=1,
                  grid_name=None, seed=0):
    """
    Generate every (shape, parameters) pair, write the meshes and the
    manifest. Cases whose solves fail are logged and left out.

    INPUTS
    ------
        shapes - list of ShapeSpec
        grid - list of GlobalParams or the name of a grid
        opts - fesolve.SolverOptions
        out_dir - output directory (meshes under out_dir/meshes)
        force - overwrite an existing manifest
        jobs - worker processes

    RETURNS
    -------
        DatasetManifest
    """
    if isinstance(grid, str):
        grid_name, grid = grid, case_grid(grid)
    res = MeshResolution() if resolution is None else resolution
    if os.path.exists(os.path.join(out_dir, MANIFEST_NAME)) and not force:
        raise IoError('Manifest already exists in {} (use force to overwrite)'.format(out_dir))
    mesh_dir = os.path.join(out_dir, 'meshes')
    try:
        os.makedirs(mesh_dir, exist_ok=True)
    except OSError as err:
        raise IoError('Could not create {}: {}'.format(mesh_dir, err))

    tasks = [('{}_c{:03d}'.format(spec.shape_id, i), spec, params, opts, res)
             for spec in shapes for i, params in enumerate(grid)]
    log.info('Generating {} cases ({} shapes x {} grid points, {} jobs)'.format(
        len(tasks), len(shapes), len(grid), jobs))
    t0 = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_generate_case, tasks))
    else:
        results = [_generate_case(task) for task in tasks]

    records, failures, timings = [], [], OrderedDict()
    for case_id, record, reason, wall in results:
        timings[case_id] = round(wall, 3)
        if record is None:
            log.warning('Excluding case {}: {}'.format(case_id, reason))
            failures.append(OrderedDict([('case_id', case_id), ('reason', reason)]))
            continue
        record.unloaded_path = os.path.join('meshes', case_id+'_unloaded.json')
        record.ed_path = os.path.join('meshes', case_id+'_ed.json')
        meshcore.save_mesh(record.unloaded, os.path.join(out_dir, record.unloaded_path))
        meshcore.save_mesh(record.ed, os.path.join(out_dir, record.ed_path))
        records.append(record)

    grid_values = OrderedDict()
    for name in GRIDS['full']:
        grid_values[name] = tuple(sorted(set(getattr(p, name) for p in grid)))
    meta = OrderedDict([('grid_name', grid_name),
                        ('solver', opts.to_dict()),
                        ('resolution', res.to_dict()),
                        ('shapes', [s.to_dict() for s in shapes]),
                        ('failures', failures),
                        ('timings', OrderedDict([('total_wall_s', round(time.perf_counter()-t0, 3)),
                                                 ('cases', timings)]))])
    manifest = DatasetManifest(records, grid=grid_values, seed=seed, meta=meta)
    manifest.write(out_dir)
    log.notice('Dataset: {} of {} cases converged ({} excluded)'.format(
        len(records), len(tasks), len(failures)))
    return manifest

def load_manifest(path):
    return DatasetManifest.load(path)

def split_by_shape(manifest, train_fraction=DEFAULT_TRAIN_FRACTION, seed=0):
    """
    Partition case ids by shape

    RETURNS
    -------
        train_ids, test_ids - lists of case ids, no shape on both sides
    """
    shapes = manifest.shape_ids()
    if len(shapes) < 2:
        raise TooFewShapes('Shape split needs at least 2 shapes, found {}'.format(len(shapes)))
    if not 0. < train_fraction < 1.:
        raise ConfigError('train_fraction must be in (0, 1), got {}'.format(train_fraction))
    n_train = int(min(max(round(train_fraction*len(shapes)), 1), len(shapes)-1))
    order = np.random.default_rng(seed).permutation(len(shapes))
    train_shapes = set(shapes[i] for i in order[:n_train])
    train = [r.case_id for r in manifest if r.shape_id in train_shapes]
    test = [r.case_id for r in manifest if r.shape_id not in train_shapes]
    log.info('Shape split: {} train shapes ({} cases), {} test shapes ({} cases)'.format(
        n_train, len(train), len(shapes)-n_train, len(test)))
    return train, test

def split_lovo(manifest, param_name, held_value):
    """Hold out every case whose parameter equals held_value"""
    name = canonical_param_name(param_name)
    values = np.asarray(manifest.grid_values(name), dtype=np.float64)
    if not np.any(np.isclose(values, float(held_value))):
        raise ValueNotInGrid('{} = {} is not a grid value (grid: {})'.format(
            name, held_value, values.tolist()))
    held = np.isclose([getattr(r.params, name) for r in manifest], float(held_value))
    test = [r.case_id for r, h in zip(manifest, held) if h]
    train = [r.case_id for r, h in zip(manifest, held) if not h]
    return train, test
