"""
Evaluation of unloaded-geometry predictors on corresponded meshes.

Metrics compare predicted and ground-truth node positions one to one:
node-level DSC (fraction of nodes within a distance threshold) and the
maximum, mean and standard deviation of node-wise errors. Three
predictors share one interface, predict(mesh_ed, params) -> mesh_u:
the trained network, a PCA displacement-field regression and the
inverse finite element solve itself.
"""
import os
import csv
import json
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from logbook import Logger
log = Logger('unloadlab.evalkit')

from unloadlab import meshcore, records, trainer
from unloadlab import fibers as fiberfield
from unloadlab import fesolve
from unloadlab.unloadnet import variant_config
from unloadlab.errors import (CorrespondenceMismatch, EmptyTestSet, InsufficientData,
                              IoError, ParseError, UnknownVariant, ConfigError)

DSC_THRESHOLD_CM = 0.01
RIDGE = 1e-6
REPORT_COLUMNS = ('case_id', 'DSC', 'HD_cm', 'MD_cm', 'SD_cm', 'infer_s')

def _coords(a, b):
    """Node arrays of two meshes (or arrays) that must correspond one to one"""
    if isinstance(a, meshcore.TetMesh) and isinstance(b, meshcore.TetMesh):
        if not a.same_topology(b):
            raise CorrespondenceMismatch('Meshes differ in connectivity ({} vs {} nodes)'.format(
                a.n_nodes, b.n_nodes))
    xa = a.nodes if isinstance(a, meshcore.TetMesh) else np.asarray(a, dtype=np.float64)
    xb = b.nodes if isinstance(b, meshcore.TetMesh) else np.asarray(b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise CorrespondenceMismatch('Node sets differ in shape: {} vs {}'.format(
            xa.shape, xb.shape))
    return xa, xb

def node_errors(pred, truth):
    """Euclidean distance between corresponding nodes (cm)"""
    xa, xb = _coords(pred, truth)
    return np.linalg.norm(xa-xb, axis=1)

def node_dsc(pred, truth, threshold=DSC_THRESHOLD_CM):
    """Fraction of nodes whose error is below threshold (cm)"""
    return float(np.mean(node_errors(pred, truth) < threshold))

def distance_stats(pred, truth):
    """
    RETURNS
    -------
        HD - maximum node error
        MD - mean node error
        SD - population standard deviation of node errors
    """
    e = node_errors(pred, truth)
    return float(e.max()), float(e.mean()), float(e.std())

def pointset_hausdorff(pred, truth):
    """Symmetric Hausdorff distance between the node sets, ignoring correspondence"""
    xa = pred.nodes if isinstance(pred, meshcore.TetMesh) else np.asarray(pred)
    xb = truth.nodes if isinstance(truth, meshcore.TetMesh) else np.asarray(truth)
    return float(max(directed_hausdorff(xa, xb)[0], directed_hausdorff(xb, xa)[0]))

def export_error_heatmap(pred, truth, path):
    """VTK file of the ground-truth mesh with per-node error_cm point data"""
    errors = node_errors(pred, truth)
    mesh = truth if isinstance(truth, meshcore.TetMesh) else pred
    meshcore.write_vtk(path, mesh, point_data={'error_cm': errors})
    return errors

class PcaBaseline(object):
    """
    Displacement-field PCA with a ridge map from ED shape coefficients

    disp_mean, disp_modes - mean (3n,) and orthonormal rows (k,3n) of the
        ED-to-unloaded displacement fields
    ed_mean, ed_modes - the same for the ED node sets
    weights - (k_ed [+4], k) ridge regression from centered ED (and
        optionally global) coefficients to displacement coefficients
    """
    name = 'pca'

    def __init__(self, disp_mean, disp_modes, ed_mean, ed_modes, weights, input_mean,
                 tets, use_globals=False, bounds=None):
        self.disp_mean = np.asarray(disp_mean, dtype=np.float64)
        self.disp_modes = np.asarray(disp_modes, dtype=np.float64)
        self.ed_mean = np.asarray(ed_mean, dtype=np.float64)
        self.ed_modes = np.asarray(ed_modes, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.input_mean = np.asarray(input_mean, dtype=np.float64)
        self.tets = np.asarray(tets, dtype=np.int64)
        self.use_globals = bool(use_globals)
        self.bounds = OrderedDict(records.DEFAULT_BOUNDS if bounds is None else bounds)

    @property
    def k(self):
        return self.disp_modes.shape[0]

    @property
    def n_nodes(self):
        return self.disp_mean.size//3

    def _inputs(self, ed_flat, params):
        z = (ed_flat-self.ed_mean).dot(self.ed_modes.T)
        if self.use_globals:
            z = np.concatenate([z, params.normalized(self.bounds)])
        return z-self.input_mean

    def reconstruct(self, displacement):
        """Projection of an (n,3) displacement field onto the retained modes"""
        d = np.asarray(displacement, dtype=np.float64).reshape(-1)-self.disp_mean
        return (self.disp_mean+self.disp_modes.T.dot(self.disp_modes.dot(d))).reshape(-1, 3)

    def predict_displacement(self, mesh_ed, params=None):
        if mesh_ed.n_nodes != self.n_nodes or not np.array_equal(mesh_ed.tets, self.tets):
            raise CorrespondenceMismatch('PCA baseline was fitted on a different connectivity')
        coeffs = self._inputs(mesh_ed.nodes.reshape(-1), params).dot(self.weights)
        return (self.disp_mean+coeffs.dot(self.disp_modes)).reshape(-1, 3)

    def predict(self, mesh_ed, params=None):
        return mesh_ed.with_nodes(mesh_ed.nodes+self.predict_displacement(mesh_ed, params),
                                  validate=False)

    def save(self, path):
        meta = json.dumps(OrderedDict([('use_globals', self.use_globals),
                                       ('bounds', OrderedDict((k, list(v))
                                                              for k, v in self.bounds.items()))]))
        try:
            with open(path, 'wb') as f:
                np.savez(f, disp_mean=self.disp_mean, disp_modes=self.disp_modes,
                         ed_mean=self.ed_mean, ed_modes=self.ed_modes, weights=self.weights,
                         input_mean=self.input_mean, tets=self.tets, meta=np.array(meta))
        except (IOError, OSError) as err:
            raise IoError('Could not write PCA baseline {}: {}'.format(path, err))

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise IoError('PCA baseline {} does not exist'.format(path))
        try:
            with np.load(path, allow_pickle=False) as f:
                meta = json.loads(str(f['meta']))
                return cls(f['disp_mean'], f['disp_modes'], f['ed_mean'], f['ed_modes'],
                           f['weights'], f['input_mean'], f['tets'], meta['use_globals'],
                           OrderedDict((k, tuple(v)) for k, v in meta['bounds'].items()))
        except (KeyError, ValueError) as err:
            raise ParseError('Malformed PCA baseline {}: {}'.format(path, err))

def _principal_rows(X, k):
    """Mean and top-k orthonormal principal directions of the rows of X"""
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X-mean, full_matrices=False)
    return mean, vt[:k]

def fit_pca_baseline(cases, k, ridge=RIDGE, use_globals=False, bounds=None, manifest=None):
    """
    Fit the displacement PCA baseline

    INPUTS
    ------
        cases - CaseRecords sharing one connectivity; meshes attached or
            loadable through manifest
        k - number of displacement (and ED shape) modes
        ridge - Tikhonov weight of the coefficient regression
        use_globals - append normalized physiological parameters to the
            regression inputs

    RETURNS
    -------
        PcaBaseline
    """
    cases = list(cases)
    if k < 1 or len(cases) < k:
        raise InsufficientData('PCA baseline with k={} needs at least k cases, got {}'.format(
            k, len(cases)))
    meshes = [manifest.meshes(rec) if manifest is not None else (rec.unloaded, rec.ed)
              for rec in cases]
    ref = meshes[0][1]
    for unloaded, ed in meshes:
        if ed is None or unloaded is None:
            raise ConfigError('Case meshes are not loaded')
        if not ed.same_topology(ref) or not unloaded.same_topology(ref):
            raise CorrespondenceMismatch('PCA baseline cases must share one connectivity')
    ed_flat = np.stack([ed.nodes.reshape(-1) for _, ed in meshes])
    disp = np.stack([(u.nodes-ed.nodes).reshape(-1) for u, ed in meshes])

    disp_mean, disp_modes = _principal_rows(disp, k)
    ed_mean, ed_modes = _principal_rows(ed_flat, k)
    inputs = (ed_flat-ed_mean).dot(ed_modes.T)
    bounds = OrderedDict(records.DEFAULT_BOUNDS if bounds is None else bounds)
    if use_globals:
        inputs = np.hstack([inputs, np.stack([rec.params.normalized(bounds) for rec in cases])])
    input_mean = inputs.mean(axis=0)
    A = inputs-input_mean
    Y = (disp-disp_mean).dot(disp_modes.T)
    weights = np.linalg.solve(A.T.dot(A)+ridge*np.eye(A.shape[1]), A.T.dot(Y))
    log.info('PCA baseline: {} cases, k={}, {} regression inputs'.format(
        len(cases), disp_modes.shape[0], A.shape[1]))
    return PcaBaseline(disp_mean, disp_modes, ed_mean, ed_modes, weights, input_mean,
                       ref.tets, use_globals, bounds)

class NetworkPredictor(object):
    name = 'network'

    def __init__(self, model):
        self.model = model

    def predict(self, mesh_ed, params):
        return self.model.predict_mesh(mesh_ed, params)

class InverseFePredictor(object):
    """Backward displacement solve used as a predictor (slow reference)"""
    name = 'inverse_fe'

    def __init__(self, opts=None):
        self.opts = fesolve.SolverOptions() if opts is None else opts

    def predict(self, mesh_ed, params):
        field = fiberfield.compute_fibers(mesh_ed, params.theta_endo_deg, params.theta_epi_deg)
        mesh_u, report = fesolve.unload_inverse(mesh_ed, field, self.opts.material(params.C_Pa),
                                                params.P_Pa, self.opts)
        if not report.converged:
            log.warning('Inverse FE did not reach tolerance (mismatch {:.3e} cm)'.format(
                report.mismatch))
        return mesh_u

def as_predictor(obj):
    """Wrap a bare UnloadNet; anything with predict(mesh_ed, params) passes through"""
    if hasattr(obj, 'predict_mesh'):
        return NetworkPredictor(obj)
    return obj

class MetricReport(object):
    """Per-case rows and their mean/std aggregate"""
    def __init__(self, rows, predictor_name='', threshold=DSC_THRESHOLD_CM):
        self.rows = list(rows)
        self.predictor_name = predictor_name
        self.threshold = threshold

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def aggregate(self):
        out = OrderedDict()
        for name in REPORT_COLUMNS[1:]:
            values = self.column(name)
            out[name] = (float(values.mean()), float(values.std()))
        return out

    def summary(self):
        agg = self.aggregate()
        return ', '.join('{} {:.4g}+-{:.3g}'.format(k, m, s) for k, (m, s) in agg.items())

    def to_csv(self, path):
        columns = list(REPORT_COLUMNS)+[c for c in self.rows[0] if c not in REPORT_COLUMNS] \
            if self.rows else list(REPORT_COLUMNS)
        try:
            with open(path, 'w') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(columns)
                for row in self.rows:
                    writer.writerow([row[c] if c == 'case_id' else '{:.10g}'.format(row[c])
                                     for c in columns])
        except (IOError, OSError) as err:
            raise IoError('Could not write report {}: {}'.format(path, err))

    def to_dict(self):
        return OrderedDict([('predictor', self.predictor_name),
                            ('threshold_cm', self.threshold),
                            ('aggregate', OrderedDict((k, {'mean': m, 'std': s})
                                                      for k, (m, s) in self.aggregate().items())),
                            ('cases', self.rows)])

    def to_json(self, path):
        try:
            with open(path, 'w') as f:
                json.dump(self.to_dict(), f, indent=2)
        except (IOError, OSError) as err:
            raise IoError('Could not write report {}: {}'.format(path, err))

def _evaluate_case(task):
    predictor, record, unloaded, ed, threshold, with_pointset = task
    t0 = time.perf_counter()
    pred = predictor.predict(ed, record.params)
    seconds = time.perf_counter()-t0
    hd, md, sd = distance_stats(pred, unloaded)
    row = OrderedDict([('case_id', record.case_id), ('DSC', node_dsc(pred, unloaded, threshold)),
                       ('HD_cm', hd), ('MD_cm', md), ('SD_cm', sd), ('infer_s', seconds)])
    if with_pointset:
        row['HD_pointset_cm'] = pointset_hausdorff(pred, unloaded)
    return row

def evaluate_model(predictor, manifest, case_ids, threshold=DSC_THRESHOLD_CM, jobs=1,
                   pointset=False, heatmap_dir=None):
    """
    Metrics of a predictor on the listed cases

    INPUTS
    ------
        predictor - UnloadNet, PcaBaseline, InverseFePredictor or any
            object with predict(mesh_ed, params)
        manifest - DatasetManifest
        case_ids - test case ids
        threshold - node DSC threshold (cm)
        jobs - worker processes
        pointset - also report the correspondence-free Hausdorff distance
        heatmap_dir - write one error VTK per case here when given

    RETURNS
    -------
        MetricReport
    """
    if not case_ids:
        raise EmptyTestSet('No test cases to evaluate')
    predictor = as_predictor(predictor)
    tasks = []
    for rec in manifest.select(case_ids):
        unloaded, ed = manifest.meshes(rec)
        tasks.append((predictor, rec, unloaded, ed, threshold, pointset))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_evaluate_case, tasks))
    else:
        rows = [_evaluate_case(task) for task in tasks]
    if heatmap_dir is not None:
        for task in tasks:
            rec, unloaded, ed = task[1], task[2], task[3]
            export_error_heatmap(predictor.predict(ed, rec.params), unloaded,
                                 os.path.join(heatmap_dir, '{}_error.vtk'.format(rec.case_id)))
    report = MetricReport(rows, getattr(predictor, 'name', predictor.__class__.__name__),
                          threshold)
    log.notice('{} on {} cases: {}'.format(report.predictor_name, len(report),
                                           report.summary()))
    return report

class AblationTable(object):
    """One aggregate row per variant"""
    def __init__(self, reports, histories=None):
        self.reports = OrderedDict(reports)
        self.histories = OrderedDict(histories) if histories else OrderedDict()

    def rows(self):
        out = []
        for variant, report in self.reports.items():
            row = OrderedDict([('variant', variant)])
            for name, (mean, std) in report.aggregate().items():
                row[name+'_mean'] = mean
                row[name+'_std'] = std
            out.append(row)
        return out

    def to_csv(self, path):
        rows = self.rows()
        try:
            with open(path, 'w') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(list(rows[0]))
                for row in rows:
                    writer.writerow([v if k == 'variant' else '{:.10g}'.format(v)
                                     for k, v in row.items()])
        except (IOError, OSError) as err:
            raise IoError('Could not write ablation table {}: {}'.format(path, err))

def run_ablation_suite(manifest, split, variants, base_config=None, train_config=None,
                       threshold=DSC_THRESHOLD_CM, out_dir=None, jobs=1):
    """
    Train and evaluate each named variant on the same split and seeds

    RETURNS
    -------
        AblationTable
    """
    variants = list(variants)
    if len(set(variants)) != len(variants):
        raise UnknownVariant('Duplicate variant ids in {}'.format(variants))
    configs = OrderedDict((name, variant_config(name, base_config)) for name in variants)
    train_ids, test_ids = split
    reports, histories = OrderedDict(), OrderedDict()
    for name, config in configs.items():
        log.info('Ablation variant {}: {}'.format(name, config))
        ckpt = os.path.join(out_dir, 'model_{}.ckpt'.format(name)) if out_dir else None
        model, history = trainer.train(manifest, (train_ids, test_ids), config, train_config,
                                       checkpoint_path=ckpt)
        reports[name] = evaluate_model(model, manifest, test_ids, threshold, jobs)
        histories[name] = history
        if out_dir:
            history.to_csv(os.path.join(out_dir, 'history_{}.csv'.format(name)))
            reports[name].to_csv(os.path.join(out_dir, 'metrics_{}.csv'.format(name)))
    table = AblationTable(reports, histories)
    if out_dir:
        table.to_csv(os.path.join(out_dir, 'ablation.csv'))
    return table
