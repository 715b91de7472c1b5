"""
Training harness: AdamW with decoupled weight decay, supervision-ratio
subsetting, shape-level validation holdout, early stopping and npz
checkpoints that resume bit for bit.
"""
import os
import csv
import json
import time
from collections import OrderedDict

import numpy as np

from logbook import Logger
log = Logger('unloadlab.trainer')

from unloadlab import records
from unloadlab.unloadnet import UnloadNet, ModelConfig, Batch
from unloadlab.errors import (ConfigError, EmptySplit, IoError, NonFiniteGradient,
                              ParseError)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ('epoch', 'train_loss', 'val_loss', 'lr', 'wall_s')
BOUNDS_TABLE, BOUNDS_TRAIN = 'table', 'train'
#Supervision ratios of the label-scarcity study
SUPERVISION_RATIOS = (1.0, 0.30, 0.15, 0.03, 0.01)

class TrainConfig(object):
    """
    lr, weight_decay - AdamW step size and decoupled decay
    max_epochs, patience - epoch cap and early-stopping patience
    dropout, lambda_cycle - copied onto the ModelConfig before training
    supervision_ratio - fraction of training cases used as labeled pairs
    batch_size - graphs per optimizer step
    val_fraction - fraction of training shapes held out for early stopping
    clip_norm - global gradient-norm clip, 0 disables
    global_bounds - 'table' (grid bounds) or 'train' (bounds of the training cases)
    """
    def __init__(self, lr=1e-3, weight_decay=1e-4, max_epochs=1000, patience=50,
                 dropout=0.1, lambda_cycle=0.2, supervision_ratio=1.0, batch_size=4,
                 seed=0, val_fraction=0.1, clip_norm=5.0, global_bounds=BOUNDS_TABLE,
                 checkpoint_every=0):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.max_epochs = int(max_epochs)
        self.patience = int(patience)
        self.dropout = float(dropout)
        self.lambda_cycle = float(lambda_cycle)
        self.supervision_ratio = float(supervision_ratio)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.val_fraction = float(val_fraction)
        self.clip_norm = float(clip_norm)
        self.global_bounds = str(global_bounds).lower()
        self.checkpoint_every = int(checkpoint_every)
        self.validate()

    def validate(self):
        if self.lr < 0. or self.weight_decay < 0.:
            raise ConfigError('lr and weight_decay must be nonnegative')
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError('max_epochs, patience and batch_size must be positive')
        if not 0. < self.supervision_ratio <= 1.:
            raise ConfigError('supervision_ratio must be in (0, 1], got {}'.format(
                self.supervision_ratio))
        if not 0. <= self.val_fraction < 1.:
            raise ConfigError('val_fraction must be in [0, 1), got {}'.format(self.val_fraction))
        if not 0. <= self.dropout < 1. or self.lambda_cycle < 0. or self.clip_norm < 0.:
            raise ConfigError('Invalid dropout, lambda_cycle or clip_norm')
        if self.global_bounds not in (BOUNDS_TABLE, BOUNDS_TRAIN):
            raise ConfigError('global_bounds must be table or train, got {}'.format(
                self.global_bounds))
        if self.checkpoint_every < 0:
            raise ConfigError('checkpoint_every must be >= 0')

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)

    def to_dict(self):
        return OrderedDict([('lr', self.lr), ('weight_decay', self.weight_decay),
                            ('max_epochs', self.max_epochs), ('patience', self.patience),
                            ('dropout', self.dropout), ('lambda_cycle', self.lambda_cycle),
                            ('supervision_ratio', self.supervision_ratio),
                            ('batch_size', self.batch_size), ('seed', self.seed),
                            ('val_fraction', self.val_fraction),
                            ('clip_norm', self.clip_norm),
                            ('global_bounds', self.global_bounds),
                            ('checkpoint_every', self.checkpoint_every)])

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def __repr__(self):
        return 'TrainConfig({})'.format(', '.join('{}={}'.format(k, v)
                                                 for k, v in self.to_dict().items()))

class OptimizerState(object):
    """First and second Adam moments per parameter plus the step count"""
    def __init__(self, params, m=None, v=None, step=0):
        self.m = OrderedDict((k, np.zeros_like(p)) for k, p in params.items()) if m is None \
            else OrderedDict(m)
        self.v = OrderedDict((k, np.zeros_like(p)) for k, p in params.items()) if v is None \
            else OrderedDict(v)
        self.step = int(step)
        for k, p in params.items():
            if self.m[k].shape != p.shape or self.v[k].shape != p.shape:
                raise ParseError('Moment shapes for {} do not match the parameter'.format(k))

def adamw_step(params, grads, opt_state, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """
    One AdamW update

    The decay param -= lr*wd*param is applied to the pre-step value,
    separately from the bias-corrected adaptive step. Missing gradients
    count as zero. opt_state is updated in place.

    RETURNS
    -------
        OrderedDict of updated parameter arrays
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient('Gradient of {} is not finite'.format(name))
    beta1, beta2 = betas
    opt_state.step += 1
    t = opt_state.step
    out = OrderedDict()
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1*opt_state.m[name]+(1.-beta1)*g
        v = beta2*opt_state.v[name]+(1.-beta2)*g*g
        opt_state.m[name], opt_state.v[name] = m, v
        m_hat = m/(1.-beta1**t)
        v_hat = v/(1.-beta2**t)
        out[name] = p-lr*wd*p-lr*m_hat/(np.sqrt(v_hat)+eps)
    return out

def clip_gradients(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm"""
    norm = float(np.sqrt(np.sum([np.sum(g*g) for g in grads.values() if g is not None])))
    if max_norm <= 0. or norm <= max_norm:
        return grads, norm, False
    scale = max_norm/norm
    return OrderedDict((k, None if g is None else g*scale) for k, g in grads.items()), norm, True

class TrainHistory(object):
    """Per-epoch rows plus the bookkeeping needed to resume"""
    def __init__(self, rows=None, clipped_steps=None, best_epoch=-1,
                 best_val_loss=float('inf')):
        self.rows = list(rows) if rows else []
        self.clipped_steps = list(clipped_steps) if clipped_steps else []
        self.best_epoch = best_epoch
        self.best_val_loss = best_val_loss

    def __len__(self):
        return len(self.rows)

    def append(self, epoch, train_loss, val_loss, lr, wall_s, clipped=0):
        self.rows.append(OrderedDict([('epoch', epoch), ('train_loss', train_loss),
                                      ('val_loss', val_loss), ('lr', lr),
                                      ('wall_s', wall_s)]))
        self.clipped_steps.append(clipped)

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def to_csv(self, path):
        try:
            with open(path, 'w') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(HISTORY_COLUMNS)
                for row in self.rows:
                    writer.writerow([row['epoch']]+['{:.17g}'.format(row[c])
                                                     for c in HISTORY_COLUMNS[1:]])
        except (IOError, OSError) as err:
            raise IoError('Could not write history {}: {}'.format(path, err))

    @classmethod
    def from_csv(cls, path):
        try:
            with open(path, 'r') as f:
                rows = [OrderedDict([('epoch', int(r['epoch']))]+[(c, float(r[c]))
                                                                   for c in HISTORY_COLUMNS[1:]])
                        for r in csv.DictReader(f)]
        except (IOError, OSError) as err:
            raise IoError('Could not read history {}: {}'.format(path, err))
        except (KeyError, TypeError, ValueError) as err:
            raise ParseError('Malformed history {}: {}'.format(path, err))
        return cls(rows)

    def to_dict(self):
        return OrderedDict([('rows', self.rows), ('clipped_steps', self.clipped_steps),
                            ('best_epoch', self.best_epoch),
                            ('best_val_loss', self.best_val_loss)])

    @classmethod
    def from_dict(cls, d):
        return cls([OrderedDict((c, r[c]) for c in HISTORY_COLUMNS) for r in d['rows']],
                   d['clipped_steps'], d['best_epoch'], d['best_val_loss'])

class Checkpoint(object):
    """
    Everything needed to predict with the best model and to resume training

    model - UnloadNet holding the best-validation parameters
    current_params - parameters after the last completed epoch
    """
    def __init__(self, model, train_config, history, opt_state, current_params,
                 rng_state, epoch, wait, split=None):
        self.model = model
        self.train_config = train_config
        self.history = history
        self.opt_state = opt_state
        self.current_params = current_params
        self.rng_state = rng_state
        self.epoch = epoch
        self.wait = wait
        self.split = split if split is not None else {}

def save_checkpoint(path, checkpoint):
    """Write a checkpoint as an npz archive with a JSON metadata entry"""
    model = checkpoint.model
    meta = OrderedDict([('version', CHECKPOINT_VERSION),
                        ('model_config', model.config.to_dict()),
                        ('model_seed', model.seed),
                        ('train_config', checkpoint.train_config.to_dict()),
                        ('bounds', OrderedDict((k, list(v)) for k, v in model.bounds.items())),
                        ('rng_state', checkpoint.rng_state),
                        ('epoch', checkpoint.epoch),
                        ('wait', checkpoint.wait),
                        ('opt_step', checkpoint.opt_state.step),
                        ('history', checkpoint.history.to_dict()),
                        ('split', checkpoint.split)])
    arrays = OrderedDict()
    for name in model.params:
        arrays['best/'+name] = model.params[name]
        arrays['current/'+name] = checkpoint.current_params[name]
        arrays['m/'+name] = checkpoint.opt_state.m[name]
        arrays['v/'+name] = checkpoint.opt_state.v[name]
    arrays['meta'] = np.array(json.dumps(meta))
    tmp = path+'.tmp'
    try:
        with open(tmp, 'wb') as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)
    except (IOError, OSError) as err:
        raise IoError('Could not write checkpoint {}: {}'.format(path, err))
    log.info('Saved checkpoint (epoch {}) to {}'.format(checkpoint.epoch, path))

def load_checkpoint(path):
    if not os.path.exists(path):
        raise IoError('Checkpoint {} does not exist'.format(path))
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive['meta']))
            arrays = {k: archive[k] for k in archive.files if k != 'meta'}
    except (ValueError, KeyError, IOError, OSError) as err:
        raise ParseError('Malformed checkpoint {}: {}'.format(path, err))
    if meta.get('version') != CHECKPOINT_VERSION:
        raise ParseError('Unsupported checkpoint version {}'.format(meta.get('version')))
    config = ModelConfig.from_dict(meta['model_config'])

    def group(prefix):
        names = [k[len(prefix):] for k in arrays if k.startswith(prefix)]
        return {n: arrays[prefix+n] for n in names}

    bounds = OrderedDict((k, tuple(meta['bounds'][k])) for k in records.PARAM_NAMES)
    best = group('best/')
    #Preserve the canonical parameter order of the configuration
    order = list(UnloadNet(config, seed=0).params)
    model = UnloadNet(config, OrderedDict((n, best[n]) for n in order), meta['model_seed'],
                      bounds)
    current = group('current/')
    current = OrderedDict((n, current[n]) for n in order)
    m, v = group('m/'), group('v/')
    opt_state = OptimizerState(current, OrderedDict((n, m[n]) for n in order),
                               OrderedDict((n, v[n]) for n in order), meta['opt_step'])
    return Checkpoint(model, TrainConfig.from_dict(meta['train_config']),
                      TrainHistory.from_dict(meta['history']), opt_state, current,
                      meta['rng_state'], meta['epoch'], meta['wait'], meta.get('split'))

def holdout_validation(manifest, train_ids, val_fraction, seed):
    """
    Split training case ids into (fit, validation) by shape

    With one training shape the holdout falls back to whole cases; with one
    case validation reuses the fit set.
    """
    if val_fraction == 0. or len(train_ids) < 2:
        if val_fraction > 0.:
            log.warning('Too few training cases for a validation holdout; '
                        'validating on the fit set')
        return list(train_ids), list(train_ids)
    rng = np.random.default_rng([seed, 2])
    recs = manifest.select(train_ids)
    shapes = list(OrderedDict.fromkeys(r.shape_id for r in recs))
    if len(shapes) >= 2:
        n_val = int(min(max(round(val_fraction*len(shapes)), 1), len(shapes)-1))
        val_shapes = set(shapes[i] for i in rng.permutation(len(shapes))[:n_val])
        fit = [r.case_id for r in recs if r.shape_id not in val_shapes]
        val = [r.case_id for r in recs if r.shape_id in val_shapes]
    else:
        n_val = int(min(max(round(val_fraction*len(recs)), 1), len(recs)-1))
        chosen = set(rng.permutation(len(recs))[:n_val].tolist())
        fit = [r.case_id for i, r in enumerate(recs) if i not in chosen]
        val = [r.case_id for i, r in enumerate(recs) if i in chosen]
    return fit, val

def labeled_subset(case_ids, supervision_ratio, seed):
    """Uniform seeded subset of max(1, round(ratio*n)) cases, in manifest order"""
    n = len(case_ids)
    n_labeled = min(n, max(1, int(round(supervision_ratio*n))))
    chosen = np.sort(np.random.default_rng([seed, 1]).permutation(n)[:n_labeled])
    return [case_ids[i] for i in chosen]

def build_samples(manifest, case_ids, model):
    out = []
    for rec in manifest.select(case_ids):
        unloaded, ed = manifest.meshes(rec)
        out.append(model.sample(ed, rec.params, unloaded, rec.case_id))
    return out

def evaluate_loss(model, samples, batch_size):
    """Graph-weighted mean loss in evaluation mode"""
    total = 0.
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start+batch_size]
        _, _, _, value = model.forward(Batch(chunk), training=False)
        total += float(value.values)*len(chunk)
    return total/len(samples)

def train(manifest, split, model_config=None, train_config=None, checkpoint_path=None,
          resume=None):
    """
    Fit an UnloadNet on the training side of split

    INPUTS
    ------
        manifest - DatasetManifest
        split - (train_ids, test_ids); only the training side is read
        model_config - ModelConfig (dropout and lambda_cycle are taken
            from train_config)
        train_config - TrainConfig
        checkpoint_path - where to save the final (and periodic) checkpoint
        resume - Checkpoint or path to continue from; the stored
            TrainConfig is reused except for max_epochs, which
            train_config may raise

    RETURNS
    -------
        model - UnloadNet with the best-validation parameters
        history - TrainHistory
    """
    tc = TrainConfig() if train_config is None else train_config
    train_ids, test_ids = split
    if not train_ids or not test_ids:
        raise EmptySplit('Split has {} training and {} test cases'.format(
            len(train_ids), len(test_ids)))

    if resume is not None:
        ckpt = load_checkpoint(resume) if isinstance(resume, str) else resume
        stored = ckpt.train_config
        tc = stored if train_config is None else stored.replace(
            max_epochs=train_config.max_epochs)
        config = ckpt.model.config
        bounds = ckpt.model.bounds
    else:
        config = ModelConfig() if model_config is None else model_config
        config = config.replace(dropout=tc.dropout, lambda_cycle=tc.lambda_cycle)
        if tc.global_bounds == BOUNDS_TRAIN:
            bounds = records.bounds_from_params([r.params for r in manifest.select(train_ids)])
        else:
            bounds = records.DEFAULT_BOUNDS

    fit_ids, val_ids = holdout_validation(manifest, train_ids, tc.val_fraction, tc.seed)
    labeled_ids = labeled_subset(fit_ids, tc.supervision_ratio, tc.seed)
    template = UnloadNet(config, seed=tc.seed, bounds=bounds)
    fit_samples = build_samples(manifest, labeled_ids, template)
    val_samples = build_samples(manifest, val_ids, template)
    log.info('Training on {} labeled cases (of {}), validating on {}'.format(
        len(labeled_ids), len(fit_ids), len(val_ids)))

    rng = np.random.default_rng(tc.seed)
    if resume is not None:
        params = OrderedDict((k, v.copy()) for k, v in ckpt.current_params.items())
        best_params = OrderedDict((k, v.copy()) for k, v in ckpt.model.params.items())
        opt_state = ckpt.opt_state
        history = ckpt.history
        rng.bit_generator.state = ckpt.rng_state
        start_epoch, wait = ckpt.epoch+1, ckpt.wait
        log.info('Resuming at epoch {}'.format(start_epoch))
    else:
        params = template.params
        best_params = OrderedDict((k, v.copy()) for k, v in params.items())
        opt_state = OptimizerState(params)
        history = TrainHistory()
        start_epoch, wait = 0, 0

    split_info = OrderedDict([('fit', fit_ids), ('val', val_ids), ('labeled', labeled_ids),
                              ('test', list(test_ids)),
                              ('manifest_dir', manifest.base_dir)])

    def snapshot(epoch):
        return Checkpoint(UnloadNet(config, best_params, tc.seed, bounds), tc, history,
                          opt_state, params, rng.bit_generator.state, epoch, wait, split_info)

    model = UnloadNet(config, params, tc.seed, bounds)
    last_epoch = start_epoch-1
    for epoch in range(start_epoch, tc.max_epochs):
        if wait >= tc.patience:
            break
        t0 = time.perf_counter()
        order = rng.permutation(len(fit_samples))
        running, clipped = 0., 0
        for start in range(0, len(order), tc.batch_size):
            chunk = [fit_samples[i] for i in order[start:start+tc.batch_size]]
            model.params = params
            tape, leaves, _, value = model.forward(Batch(chunk), training=True, rng=rng)
            tape.backward(value)
            grads = OrderedDict((k, leaf.grad) for k, leaf in leaves.items())
            grads, _, was_clipped = clip_gradients(grads, tc.clip_norm)
            clipped += int(was_clipped)
            params = adamw_step(params, grads, opt_state, tc.lr, tc.weight_decay)
            running += float(value.values)*len(chunk)
        train_loss = running/len(fit_samples)
        model.params = params
        val_loss = evaluate_loss(model, val_samples, tc.batch_size)
        wall = time.perf_counter()-t0
        history.append(epoch, train_loss, val_loss, tc.lr, wall, clipped)
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_params = OrderedDict((k, v.copy()) for k, v in params.items())
            wait = 0
        else:
            wait += 1
        log.debug('epoch {} train {:.6g} val {:.6g} ({:.2f} s)'.format(
            epoch, train_loss, val_loss, wall))
        last_epoch = epoch
        if tc.checkpoint_every and checkpoint_path and (epoch+1) % tc.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, snapshot(epoch))
    if wait >= tc.patience:
        log.info('Early stop after epoch {} (best epoch {})'.format(last_epoch, history.best_epoch))
    log.notice('Training finished: best val loss {:.6g} at epoch {}'.format(
        history.best_val_loss, history.best_epoch))
    if checkpoint_path:
        save_checkpoint(checkpoint_path, snapshot(last_epoch))
    return UnloadNet(config, best_params, tc.seed, bounds), history

def predict(model, mesh_ed, params):
    """
    Unloaded mesh for one ED case and the wall time of the prediction (s)
    """
    t0 = time.perf_counter()
    mesh_u = model.predict_mesh(mesh_ed, params)
    return mesh_u, time.perf_counter()-t0
