import os
import sys

import numpy as np
import matplotlib.pyplot as pp

from logbook import StreamHandler, NOTICE

from unloadlab import datagen, fesolve, trainer, evalkit, plotting
from unloadlab.unloadnet import ModelConfig, variant_config
from unloadlab.records import CaseRecord, DatasetManifest, GRIDS, MANIFEST_NAME
from unloadlab.visual_test_fesolve import print_table

DESK_THRESHOLD_CM = 0.05

def synthetic_manifest(n_shapes=6, seed=3):
    """
    Coarse shells whose unloaded target is a pressure and stiffness
    dependent contraction of the ED shape, no FE solves needed
    """
    coarse = datagen.MeshResolution.preset('coarse')
    recs = []
    for spec in datagen.sample_shapes(n_shapes, seed=seed):
        ed = datagen.build_shell_mesh(spec, coarse)
        for i, params in enumerate(datagen.case_grid('mini')):
            factor = 1.-0.01*params.P_mmHg*(100./params.C_Pa)
            scale = np.array([factor, factor, 1.-0.5*(1.-factor)])
            recs.append(CaseRecord('{}_c{:03d}'.format(spec.shape_id, i), spec.shape_id, params,
                                   unloaded=ed.with_nodes(ed.nodes*scale, validate=False),
                                   ed=ed))
    return DatasetManifest(recs, grid=GRIDS['mini'])

def desk_manifest(out_dir, n_shapes=8, seed=7, resolution='coarse', jobs=1):
    """FE-built shape by mini-grid dataset, reused when out_dir already holds one"""
    if os.path.exists(os.path.join(out_dir, MANIFEST_NAME)):
        return datagen.load_manifest(out_dir)
    shapes = datagen.sample_shapes(n_shapes, seed=seed)
    return datagen.build_dataset(shapes, 'mini', fesolve.SolverOptions(), out_dir,
                                 resolution=datagen.MeshResolution.preset(resolution),
                                 jobs=jobs, seed=seed)

def _train_and_score(manifest, split, variant, train_config, threshold=DESK_THRESHOLD_CM):
    model, history = trainer.train(manifest, split, variant_config(variant), train_config)
    return model, history, evalkit.evaluate_model(model, manifest, split[1], threshold)

def learning_sanity(manifest, split, epochs=300, threshold=DESK_THRESHOLD_CM):
    """Full model on the held-out shapes; mean node DSC should reach 0.8"""
    model, history, report = _train_and_score(manifest, split, 'A0',
                                              trainer.TrainConfig(max_epochs=epochs), threshold)
    dsc = float(report.column('DSC').mean())
    print_table(['case_id', 'DSC', 'HD_cm', 'MD_cm'], report.rows,
                title='A0 after {} epochs, threshold {:g} cm'.format(len(history), threshold))
    print('Mean held-out DSC {:.3f} (need 0.8)'.format(dsc))
    return model, history, report

def cycle_trend(manifest, split, seeds=(0, 1, 2), ratios=(0.1, 1.0), epochs=300,
                threshold=DESK_THRESHOLD_CM):
    """
    Mean held-out DSC of the model with (A0) and without (A1) the cycle
    consistency decoder at a scarce and a full supervision ratio
    """
    rows = []
    for sr in ratios:
        for seed in seeds:
            config = trainer.TrainConfig(max_epochs=epochs, supervision_ratio=sr, seed=seed)
            row = {'SR': sr, 'seed': seed}
            for variant in ('A0', 'A1'):
                report = _train_and_score(manifest, split, variant, config, threshold)[2]
                row[variant] = float(report.column('DSC').mean())
            row['gap'] = row['A0']-row['A1']
            rows.append(row)
    print_table(['SR', 'seed', 'A0', 'A1', 'gap'], rows,
                title='Held-out DSC with and without cycle consistency')
    gaps = dict((sr, np.mean([r['gap'] for r in rows if r['SR'] == sr])) for sr in ratios)
    scarce, full = min(ratios), max(ratios)
    print('Mean gap {:.3f} at SR {:g}, {:.3f} at SR {:g}; A0 ahead when scarce: {}, '
          'gap larger when scarce: {}'.format(gaps[scarce], scarce, gaps[full], full,
                                              gaps[scarce] > 0., gaps[scarce] > gaps[full]))
    return rows

def baseline_ordering(manifest, split, seeds=(0, 1, 2), k=5, epochs=300):
    """Mean held-out HD of A0, the GCN variant A4 and the PCA displacement baseline"""
    train_ids, test_ids = split
    pca = evalkit.fit_pca_baseline(manifest.select(train_ids), k, manifest=manifest)
    pca_hd = float(evalkit.evaluate_model(pca, manifest, test_ids).column('HD_cm').mean())
    rows = []
    for seed in seeds:
        config = trainer.TrainConfig(max_epochs=epochs, seed=seed)
        row = {'seed': seed, 'PCA': pca_hd}
        for variant in ('A0', 'A4'):
            report = _train_and_score(manifest, split, variant, config)[2]
            row[variant] = float(report.column('HD_cm').mean())
        rows.append(row)
    print_table(['seed', 'A0', 'A4', 'PCA'], rows, title='Held-out mean HD (cm)')
    a0 = np.mean([r['A0'] for r in rows])
    print('A0 {:.4f} cm, A4 {:.4f} cm, PCA {:.4f} cm; A0 lowest: {}'.format(
        a0, np.mean([r['A4'] for r in rows]), pca_hd,
        a0 < min(np.mean([r['A4'] for r in rows]), pca_hd)))
    return rows

def speed_ordering(model, manifest, test_ids, n_cases=2):
    """Per-case inference time of the network against the inverse FE solve"""
    ids = list(test_ids)[:n_cases]
    net = evalkit.evaluate_model(model, manifest, ids)
    inverse = evalkit.evaluate_model(evalkit.InverseFePredictor(), manifest, ids)
    rows = [{'case_id': a['case_id'], 'network_s': a['infer_s'], 'inverse_fe_s': b['infer_s'],
             'ratio': b['infer_s']/a['infer_s']} for a, b in zip(net.rows, inverse.rows)]
    print_table(['case_id', 'network_s', 'inverse_fe_s', 'ratio'], rows,
                title='Inference time per case')
    ratio = inverse.column('infer_s').mean()/net.column('infer_s').mean()
    print('Inverse FE is {:.0f}x slower than the network (need 100x)'.format(ratio))
    return rows

def draw_training(manifest, epochs=40):
    """Loss curves of the full model and the plain GCN variant side by side"""
    split = datagen.split_by_shape(manifest, train_fraction=0.67, seed=0)
    train_config = trainer.TrainConfig(max_epochs=epochs, batch_size=4, lr=5e-3)
    f = pp.figure(figsize=(11, 4))
    models = {}
    for i, variant in enumerate(['A0', 'A5']):
        config = variant_config(variant, ModelConfig(hidden=16, heads=2, gat_layers=2))
        model, history = trainer.train(manifest, split, config, train_config)
        plotting.plot_history(history, ax=f.add_subplot(1, 2, i+1), title=variant)
        models[variant] = model
    f.suptitle('Training on {} synthetic cases'.format(len(split[0])), fontweight='bold')
    return f, models, split

def draw_errors(manifest, models, split):
    """Node error maps of the first test case for each trained model"""
    rec = manifest.get(split[1][0])
    unloaded, ed = manifest.meshes(rec)
    f = pp.figure(figsize=(10, 6))
    for i, (variant, model) in enumerate(sorted(models.items())):
        pred = model.predict_mesh(ed, rec.params)
        errors = evalkit.node_errors(pred, unloaded)
        plotting.plot_node_errors(unloaded, errors, ax=f.add_subplot(1, len(models), i+1),
                                  title='{} (DSC {:.2f})'.format(
                                      variant, evalkit.node_dsc(pred, unloaded)))
    f.suptitle('Prediction error on {}'.format(rec.case_id), fontweight='bold')
    return f


if __name__=='__main__':
    StreamHandler(sys.stdout, level=NOTICE).push_application()

    manifest = synthetic_manifest()
    f1, models, split = draw_training(manifest)
    f1.savefig('unloadlab_training_history.png')

    f2 = draw_errors(manifest, models, split)
    f2.savefig('unloadlab_node_errors.png')

    #Desk scale FE dataset, 8 shapes split 6/2
    desk = desk_manifest('unloadlab_desk_data')
    desk_split = datagen.split_by_shape(desk, train_fraction=0.75, seed=0)
    model, history, _ = learning_sanity(desk, desk_split)
    f3 = draw_errors(desk, {'A0': model}, desk_split)
    f3.savefig('unloadlab_desk_errors.png')
    speed_ordering(model, desk, desk_split[1])
    cycle_trend(desk, desk_split)
    baseline_ordering(desk, desk_split)
