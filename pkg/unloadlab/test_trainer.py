import os
from collections import OrderedDict

import pytest
import numpy as np
from numpy import testing as nptest

from unloadlab import trainer, datagen, records
from unloadlab.unloadnet import ModelConfig, UnloadNet
from unloadlab.records import CaseRecord, DatasetManifest, GRIDS
from unloadlab.errors import (ConfigError, EmptySplit, NonFiniteGradient, IoError)

def _toy_manifest(n_shapes=4):
    """Coarse shells with a synthetic pressure-dependent shrink as the unloaded target"""
    coarse = datagen.MeshResolution.preset('coarse')
    recs = []
    for spec in datagen.sample_shapes(n_shapes, seed=1):
        ed = datagen.build_shell_mesh(spec, coarse)
        for i, params in enumerate(datagen.case_grid('mini')):
            factor = 1.-0.01*params.P_mmHg*(100./params.C_Pa)
            unloaded = ed.with_nodes(ed.nodes*factor, validate=False)
            recs.append(CaseRecord('{}_c{:03d}'.format(spec.shape_id, i), spec.shape_id, params,
                                   unloaded=unloaded, ed=ed))
    return DatasetManifest(recs, grid=GRIDS['mini'])

@pytest.fixture()
def manifest(request):
    return _toy_manifest()

@pytest.fixture()
def split(request, manifest):
    return datagen.split_by_shape(manifest, train_fraction=0.75, seed=0)

@pytest.fixture()
def tiny(request):
    model_config = ModelConfig(hidden=8, heads=2, gat_layers=1)
    train_config = trainer.TrainConfig(max_epochs=3, patience=10, batch_size=3, seed=0,
                                       val_fraction=0.34, lr=5e-3)
    return model_config, train_config

def test_adamw_first_step():
    params = OrderedDict([('w', np.array([0.]))])
    state = trainer.OptimizerState(params)
    out = trainer.adamw_step(params, {'w': np.array([1.])}, state, lr=1e-3, wd=0.)
    nptest.assert_allclose(out['w'], [-1e-3/(1.+1e-8)], rtol=1e-12)
    assert state.step == 1
    #Input arrays are left untouched
    assert params['w'][0] == 0.

def test_adamw_zero_gradient():
    params = OrderedDict([('w', np.array([2., -3.]))])
    unchanged = trainer.adamw_step(params, {'w': np.zeros(2)}, trainer.OptimizerState(params),
                                   lr=1e-3, wd=0.)
    nptest.assert_array_equal(unchanged['w'], params['w'])
    shrunk = trainer.adamw_step(params, {'w': None}, trainer.OptimizerState(params),
                                lr=1e-3, wd=0.1)
    nptest.assert_allclose(shrunk['w'], params['w']*(1.-1e-4), rtol=1e-14)

def test_adamw_zero_learning_rate():
    params = OrderedDict([('w', np.array([1., 2.]))])
    out = trainer.adamw_step(params, {'w': np.array([5., -5.])},
                             trainer.OptimizerState(params), lr=0., wd=0.1)
    nptest.assert_array_equal(out['w'], params['w'])

def test_adamw_rejects_nonfinite():
    params = OrderedDict([('w', np.array([1.]))])
    with pytest.raises(NonFiniteGradient):
        trainer.adamw_step(params, {'w': np.array([np.nan])}, trainer.OptimizerState(params),
                           lr=1e-3, wd=0.)

def test_clip_gradients():
    grads = OrderedDict([('a', np.array([3.])), ('b', np.array([4.])), ('c', None)])
    clipped, norm, was_clipped = trainer.clip_gradients(grads, 1.)
    assert norm == 5. and was_clipped
    nptest.assert_allclose(clipped['a'], [0.6])
    assert clipped['c'] is None
    same, _, was_clipped = trainer.clip_gradients(grads, 0.)
    assert same is grads and not was_clipped

def test_train_config():
    with pytest.raises(ConfigError):
        trainer.TrainConfig(supervision_ratio=0.)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(global_bounds='median')
    config = trainer.TrainConfig(lr=1e-2)
    assert trainer.TrainConfig.from_dict(config.to_dict()).to_dict() == config.to_dict()
    assert config.replace(seed=4).seed == 4

def test_labeled_subset():
    ids = ['c{:03d}'.format(i) for i in range(100)]
    subset = trainer.labeled_subset(ids, 0.03, seed=0)
    assert len(subset) == 3
    assert subset == sorted(subset)
    assert subset == trainer.labeled_subset(ids, 0.03, seed=0)
    assert len(trainer.labeled_subset(ids[:10], 0.01, seed=0)) == 1
    assert trainer.labeled_subset(ids, 1., seed=5) == ids

def test_holdout_validation(manifest):
    train_ids = [r.case_id for r in manifest]
    fit, val = trainer.holdout_validation(manifest, train_ids, 0.25, seed=0)
    assert sorted(fit+val) == sorted(train_ids)
    fit_shapes = set(manifest.get(c).shape_id for c in fit)
    val_shapes = set(manifest.get(c).shape_id for c in val)
    assert len(val_shapes) == 1 and not fit_shapes & val_shapes
    one_case = train_ids[:1]
    assert trainer.holdout_validation(manifest, one_case, 0.1, seed=0) == (one_case, one_case)

def test_holdout_single_shape(manifest):
    ids = [r.case_id for r in manifest if r.shape_id == 'shape_000']
    fit, val = trainer.holdout_validation(manifest, ids, 0.25, seed=0)
    assert len(val) == 1 and len(fit) == 3

def test_empty_split(manifest, tiny):
    with pytest.raises(EmptySplit):
        trainer.train(manifest, ([r.case_id for r in manifest], []), *tiny)

def test_training_is_deterministic(manifest, split, tiny):
    model_a, history_a = trainer.train(manifest, split, *tiny)
    model_b, history_b = trainer.train(manifest, split, *tiny)
    nptest.assert_array_equal(history_a.column('train_loss'), history_b.column('train_loss'))
    nptest.assert_array_equal(history_a.column('val_loss'), history_b.column('val_loss'))
    for name in model_a.params:
        nptest.assert_array_equal(model_a.params[name], model_b.params[name])

def test_training_reduces_loss(manifest, split, tiny):
    model_config, train_config = tiny
    _, history = trainer.train(manifest, split, model_config,
                               train_config.replace(max_epochs=8))
    assert len(history) == 8
    train_loss = history.column('train_loss')
    assert train_loss[-1] < train_loss[0]
    val = history.column('val_loss')
    assert history.best_val_loss == val.min()
    assert history.best_epoch == int(np.argmin(val))

def test_config_overrides_copied(manifest, split, tiny):
    model_config, train_config = tiny
    model, _ = trainer.train(manifest, split, model_config,
                             train_config.replace(max_epochs=1, dropout=0.3, lambda_cycle=0.5))
    assert model.config.dropout == 0.3 and model.config.lambda_cycle == 0.5

def test_train_bounds(manifest, split, tiny):
    model_config, train_config = tiny
    model, _ = trainer.train(manifest, split, model_config,
                             train_config.replace(max_epochs=1, global_bounds='train'))
    assert model.bounds['P_mmHg'] == (8., 12.)
    default, _ = trainer.train(manifest, split, model_config, train_config.replace(max_epochs=1))
    assert default.bounds == records.DEFAULT_BOUNDS

def test_early_stopping(manifest, split, tiny):
    model_config, train_config = tiny
    #With lr = 0 the validation loss never improves after the first epoch
    _, history = trainer.train(manifest, split, model_config,
                               train_config.replace(lr=0., patience=2, max_epochs=20))
    assert len(history) == 3
    assert history.best_epoch == 0

def test_checkpoint_round_trip(manifest, split, tiny, tmpdir):
    path = str(tmpdir.join('model.ckpt'))
    model, history = trainer.train(manifest, split, *tiny, checkpoint_path=path)
    ckpt = trainer.load_checkpoint(path)
    assert ckpt.epoch == 2
    assert ckpt.model.config == model.config
    assert ckpt.model.bounds == model.bounds
    for name in model.params:
        nptest.assert_array_equal(ckpt.model.params[name], model.params[name])
    nptest.assert_array_equal(ckpt.history.column('val_loss'), history.column('val_loss'))
    assert ckpt.split['test'] == split[1]
    assert ckpt.opt_state.step == 3*int(np.ceil(len(ckpt.split['labeled'])/3.))

def test_resume_is_bitwise(manifest, split, tiny, tmpdir):
    model_config, train_config = tiny
    straight, history = trainer.train(manifest, split, model_config,
                                      train_config.replace(max_epochs=4))
    path = str(tmpdir.join('partial.ckpt'))
    trainer.train(manifest, split, model_config, train_config.replace(max_epochs=2),
                  checkpoint_path=path)
    resumed, resumed_history = trainer.train(manifest, split, model_config,
                                             train_config.replace(max_epochs=4), resume=path)
    nptest.assert_array_equal(resumed_history.column('train_loss'), history.column('train_loss'))
    nptest.assert_array_equal(resumed_history.column('val_loss'), history.column('val_loss'))
    for name in straight.params:
        nptest.assert_array_equal(resumed.params[name], straight.params[name])

def test_missing_checkpoint(tmpdir):
    with pytest.raises(IoError):
        trainer.load_checkpoint(str(tmpdir.join('none.ckpt')))

def test_history_csv(tmpdir):
    history = trainer.TrainHistory()
    history.append(0, 0.5, 0.6, 1e-3, 1.25)
    history.append(1, 0.25, 0.3, 1e-3, 1.5, clipped=2)
    path = str(tmpdir.join('history.csv'))
    history.to_csv(path)
    with open(path) as f:
        assert f.readline().strip() == 'epoch,train_loss,val_loss,lr,wall_s'
    back = trainer.TrainHistory.from_csv(path)
    nptest.assert_array_equal(back.column('train_loss'), [0.5, 0.25])
    nptest.assert_array_equal(back.column('epoch'), [0, 1])

def test_predict_timing(manifest, tiny):
    model = UnloadNet(tiny[0], seed=0)
    rec = manifest.records[0]
    mesh_u, seconds = trainer.predict(model, rec.ed, rec.params)
    assert seconds >= 0. and mesh_u.same_topology(rec.ed)
    again, _ = trainer.predict(model, rec.ed, rec.params)
    nptest.assert_array_equal(again.nodes, mesh_u.nodes)
