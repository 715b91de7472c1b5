"""
Record types shared by the solver, dataset, training and evaluation
modules: the physiological parameter tuple, one simulation case and
the dataset manifest that indexes them on disk.
"""
import os
import json
from collections import OrderedDict

import numpy as np

from logbook import Logger
log = Logger('unloadlab.records')

from unloadlab.errors import IoError, ParseError, ValueNotInGrid, ConfigError
from unloadlab import meshcore

MMHG_TO_PA = 133.322
MANIFEST_VERSION = 1
MANIFEST_NAME = 'manifest.jsonl'
MANIFEST_META_NAME = 'manifest_meta.json'

#Parameter grid of the generation campaign
PRESSURES_MMHG = (4., 6., 8., 10., 12., 14.)
STIFFNESSES_PA = (50., 100., 150., 200., 250., 300.)
THETA_ENDO_DEG = (60., 65., 70.)
THETA_EPI_DEG = (-60., -65., -70.)

PARAM_NAMES = ('P_mmHg', 'C_Pa', 'theta_endo_deg', 'theta_epi_deg')

GRIDS = OrderedDict([
    ('full', OrderedDict([('P_mmHg', PRESSURES_MMHG),
                          ('C_Pa', STIFFNESSES_PA),
                          ('theta_endo_deg', THETA_ENDO_DEG),
                          ('theta_epi_deg', THETA_EPI_DEG)])),
    ('mini', OrderedDict([('P_mmHg', (8., 12.)),
                          ('C_Pa', (100., 200.)),
                          ('theta_endo_deg', (60.,)),
                          ('theta_epi_deg', (-60.,))])),
])

#Normalization bounds (min, max) taken from the full grid
DEFAULT_BOUNDS = OrderedDict((name, (min(vals), max(vals)))
                             for name, vals in GRIDS['full'].items())

#Aliases accepted for LOVO parameter names
PARAM_ALIASES = {'P': 'P_mmHg', 'C': 'C_Pa', 'theta_endo': 'theta_endo_deg',
                 'theta_epi': 'theta_epi_deg', 'endo': 'theta_endo_deg',
                 'epi': 'theta_epi_deg'}

def canonical_param_name(name):
    name = PARAM_ALIASES.get(name, name)
    if name not in PARAM_NAMES:
        raise ValueNotInGrid('Unknown parameter {} (expected one of {})'.format(
            name, ', '.join(PARAM_NAMES)))
    return name

class GlobalParams(object):
    """
    Physiological scalars of one case: end-diastolic pressure (mmHg),
    Fung stiffness scale C (Pa) and endo/epi helix angles (degrees)
    """
    def __init__(self, P_mmHg, C_Pa, theta_endo_deg, theta_epi_deg):
        self.P_mmHg = float(P_mmHg)
        self.C_Pa = float(C_Pa)
        self.theta_endo_deg = float(theta_endo_deg)
        self.theta_epi_deg = float(theta_epi_deg)
        if self.P_mmHg < 0.:
            raise ConfigError('Pressure must be nonnegative, got {} mmHg'.format(P_mmHg))
        if not self.C_Pa > 0.:
            raise ConfigError('Stiffness C must be positive, got {} Pa'.format(C_Pa))

    @property
    def P_Pa(self):
        return self.P_mmHg*MMHG_TO_PA

    def values(self):
        return np.array([self.P_mmHg, self.C_Pa, self.theta_endo_deg,
                         self.theta_epi_deg])

    def get(self, name):
        return getattr(self, canonical_param_name(name))

    def normalized(self, bounds=None):
        """(value - min)/(max - min) per component; a collapsed range maps to 0"""
        bounds = DEFAULT_BOUNDS if bounds is None else bounds
        out = np.zeros(4)
        for i, name in enumerate(PARAM_NAMES):
            lo, hi = bounds[name]
            out[i] = 0. if hi == lo else (getattr(self, name)-lo)/(hi-lo)
        return out

    def to_dict(self):
        return OrderedDict((name, getattr(self, name)) for name in PARAM_NAMES)

    @classmethod
    def from_dict(cls, d):
        return cls(*[d[name] for name in PARAM_NAMES])

    def __eq__(self, other):
        return isinstance(other, GlobalParams) and np.array_equal(self.values(), other.values())

    def __ne__(self, other):
        return not self.__eq__(other)

    def __hash__(self):
        return hash(tuple(self.values().tolist()))

    def __repr__(self):
        return 'GlobalParams(P={} mmHg, C={} Pa, theta_endo={}, theta_epi={})'.format(
            self.P_mmHg, self.C_Pa, self.theta_endo_deg, self.theta_epi_deg)

def bounds_from_params(params_list):
    """Per-parameter (min, max) over a collection of GlobalParams"""
    vals = np.array([p.values() for p in params_list])
    return OrderedDict((name, (float(vals[:, i].min()), float(vals[:, i].max())))
                       for i, name in enumerate(PARAM_NAMES))

class CaseRecord(object):
    """
    One (unloaded, end-diastolic) pair. Paths are relative to the
    manifest directory; the meshes themselves are attached in memory
    after generation or loaded lazily.
    """
    def __init__(self, case_id, shape_id, params, unloaded_path=None, ed_path=None,
                 converged=True, split_tags=None, report=None,
                 unloaded=None, ed=None):
        self.case_id = str(case_id)
        self.shape_id = str(shape_id)
        self.params = params
        self.unloaded_path = unloaded_path
        self.ed_path = ed_path
        self.converged = bool(converged)
        self.split_tags = list(split_tags) if split_tags else []
        self.report = dict(report) if report else {}
        self.unloaded = unloaded
        self.ed = ed

    def load_meshes(self, base_dir):
        if self.unloaded is None:
            self.unloaded = meshcore.load_mesh(os.path.join(base_dir, self.unloaded_path))
        if self.ed is None:
            self.ed = meshcore.load_mesh(os.path.join(base_dir, self.ed_path))
        return self.unloaded, self.ed

    def to_dict(self):
        d = OrderedDict([('case_id', self.case_id), ('shape_id', self.shape_id)])
        d.update(self.params.to_dict())
        d['unloaded_path'] = self.unloaded_path
        d['ED_path'] = self.ed_path
        d['converged'] = self.converged
        d['split_tags'] = self.split_tags
        d['report'] = self.report
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d['case_id'], d['shape_id'], GlobalParams.from_dict(d),
                   unloaded_path=d['unloaded_path'], ed_path=d['ED_path'],
                   converged=d.get('converged', True),
                   split_tags=d.get('split_tags'), report=d.get('report'))

    def __repr__(self):
        return 'CaseRecord({}, shape={}, {})'.format(self.case_id, self.shape_id,
                                                     self.params)

def _atomic_write(path, text):
    tmp = path+'.tmp'
    try:
        with open(tmp, 'w') as f:
            f.write(text)
        os.replace(tmp, path)
    except (IOError, OSError) as err:
        raise IoError('Could not write {}: {}'.format(path, err))

class DatasetManifest(object):
    """
    Index of a generated dataset: one JSON line per converged case in
    manifest.jsonl plus a metadata document (grid, seed, solver options,
    format version and run timings) in manifest_meta.json
    """
    def __init__(self, records, grid=None, seed=0, meta=None, base_dir=None):
        self.records = list(records)
        self.grid = grid if grid is not None else GRIDS['full']
        self.seed = seed
        self.meta = dict(meta) if meta else {}
        self.base_dir = base_dir
        ids = [r.case_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ConfigError('Duplicate case ids in manifest')
        self._by_id = {r.case_id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, case_id):
        return self._by_id[case_id]

    def select(self, case_ids):
        return [self._by_id[cid] for cid in case_ids]

    def shape_ids(self):
        """Shape ids in order of first appearance"""
        return list(OrderedDict.fromkeys(r.shape_id for r in self.records))

    def meshes(self, record):
        if self.base_dir is None:
            return record.unloaded, record.ed
        return record.load_meshes(self.base_dir)

    def grid_values(self, name):
        return tuple(self.grid[canonical_param_name(name)])

    def write(self, out_dir):
        lines = [json.dumps(r.to_dict()) for r in self.records]
        _atomic_write(os.path.join(out_dir, MANIFEST_NAME),
                      '\n'.join(lines)+('\n' if lines else ''))
        meta = OrderedDict([('version', MANIFEST_VERSION),
                            ('seed', self.seed),
                            ('grid', OrderedDict((k, list(v)) for k, v in self.grid.items()))])
        meta.update(self.meta)
        _atomic_write(os.path.join(out_dir, MANIFEST_META_NAME),
                      json.dumps(meta, indent=2))
        self.base_dir = out_dir
        log.info('Wrote manifest with {} cases to {}'.format(len(self.records), out_dir))

    @classmethod
    def load(cls, path):
        """Read a manifest given its .jsonl path or its directory"""
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        base_dir = os.path.dirname(os.path.abspath(path))
        if not os.path.exists(path):
            raise IoError('Manifest {} does not exist'.format(path))
        try:
            with open(path, 'r') as f:
                records = [CaseRecord.from_dict(json.loads(line))
                           for line in f if line.strip()]
        except (ValueError, KeyError) as err:
            raise ParseError('Malformed manifest {}: {}'.format(path, err))
        meta = {}
        meta_path = os.path.join(base_dir, MANIFEST_META_NAME)
        if os.path.exists(meta_path):
            with open(meta_path, 'r') as f:
                meta = json.load(f)
        grid = meta.pop('grid', None)
        if grid is not None:
            grid = OrderedDict((k, tuple(float(v) for v in grid[k])) for k in PARAM_NAMES)
        seed = meta.pop('seed', 0)
        if meta.get('version', MANIFEST_VERSION) != MANIFEST_VERSION:
            raise ParseError('Unsupported manifest version {}'.format(meta.get('version')))
        return cls(records, grid=grid, seed=seed, meta=meta, base_dir=base_dir)
