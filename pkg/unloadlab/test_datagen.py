import os

import pytest
import numpy as np
from numpy import testing as nptest

from unloadlab import datagen, meshcore, fesolve
from unloadlab.records import (GlobalParams, CaseRecord, DatasetManifest, GRIDS,
                               MANIFEST_NAME, MANIFEST_META_NAME)
from unloadlab.errors import (ResolutionError, MissingModeFile, TooFewShapes,
                              ValueNotInGrid, IoError, ConfigError, ParseError)

ELLIPSOID = [('a', 2.5), ('b', 2.3), ('long_axis', 8.), ('base_height', 0.5),
             ('t_base', 1.), ('t_apex', 1.2)]

@pytest.fixture()
def synthetic_manifest(request):
    """Ten shapes times the four mini grid points, no meshes attached"""
    records = []
    for s in range(10):
        for i, params in enumerate(datagen.case_grid('mini')):
            records.append(CaseRecord('shape_{:03d}_c{:03d}'.format(s, i),
                                      'shape_{:03d}'.format(s), params))
    return DatasetManifest(records, grid=GRIDS['mini'])

def test_default_resolution_counts():
    spec = datagen.ShapeSpec('lv', datagen.PARAMETRIC_ELLIPSOID, ELLIPSOID)
    mesh = datagen.build_shell_mesh(spec)
    assert mesh.n_nodes == 603
    assert mesh.n_tets == 2280
    res = datagen.MeshResolution()
    assert (res.n_nodes, res.n_tets) == (603, 2280)

def test_coarse_resolution_counts():
    spec = datagen.ShapeSpec('lv', datagen.PARAMETRIC_ELLIPSOID, ELLIPSOID)
    mesh = datagen.build_shell_mesh(spec, datagen.MeshResolution.preset('coarse'))
    assert (mesh.n_nodes, mesh.n_tets) == (66, 168)
    base = mesh.labeled_nodes(meshcore.BASE)
    nptest.assert_allclose(mesh.nodes[base, 2], 0.5)
    #Epicardial apex sits t_apex below the endocardial one at z = -(long_axis-base_height)
    nptest.assert_allclose(mesh.nodes[:, 2].min(), -8.7)

def test_node_band_enforced():
    spec = datagen.ShapeSpec('lv', datagen.PARAMETRIC_ELLIPSOID, ELLIPSOID)
    res = datagen.MeshResolution(n_circ=8, n_lat=4, n_layers=1, node_band=(600, 1000))
    with pytest.raises(ResolutionError):
        datagen.build_shell_mesh(spec, res)

def test_degenerate_shape_rejected():
    params = dict(ELLIPSOID)
    params['t_apex'] = 0.
    spec = datagen.ShapeSpec('bad', datagen.PARAMETRIC_ELLIPSOID, params.items())
    with pytest.raises(ResolutionError):
        datagen.build_shell_mesh(spec, datagen.MeshResolution.preset('coarse'))

def test_unknown_resolution_preset():
    with pytest.raises(ConfigError):
        datagen.MeshResolution.preset('ultra')

def test_sample_shapes_reproducible():
    first = datagen.sample_shapes(5, seed=11)
    second = datagen.sample_shapes(5, seed=11)
    assert first == second
    assert first != datagen.sample_shapes(5, seed=12)
    for spec in first:
        for name, (lo, hi) in datagen.ELLIPSOID_RANGES.items():
            assert lo <= spec.params[name] <= hi

def test_sampled_shapes_mesh_cleanly():
    for spec in datagen.sample_shapes(3, seed=0):
        mesh = datagen.build_shell_mesh(spec)
        assert mesh.n_nodes == 603
        assert meshcore.aspect_ratios(mesh).max() < meshcore.MAX_ASPECT_RATIO

def test_shapes_file_round_trip(tmpdir):
    specs = datagen.sample_shapes(3, seed=4)
    path = str(tmpdir.join(datagen.SHAPES_FILE))
    datagen.save_shapes(specs, path)
    assert datagen.load_shapes(path) == specs

def test_missing_shapes_file(tmpdir):
    with pytest.raises(IoError):
        datagen.load_shapes(str(tmpdir.join('none.json')))

def test_pca_shapes(tmpdir):
    coarse = datagen.MeshResolution.preset('coarse')
    mean = datagen.build_shell_mesh(datagen.ShapeSpec('mean', datagen.PARAMETRIC_ELLIPSOID,
                                                      ELLIPSOID), coarse).nodes
    path = str(tmpdir.join('modes.txt'))
    datagen.write_mode_file(path, mean, [0.02*mean])
    loaded_mean, modes = datagen.load_mode_file(path)
    nptest.assert_allclose(loaded_mean, mean)
    assert modes.shape == (1, 66, 3)
    specs = datagen.sample_shapes(2, seed=0, kind=datagen.PCA_MODES, mode_file=path)
    for spec in specs:
        w = spec.params['weights'][0]
        assert -2. <= w <= 2.
        mesh = datagen.build_shell_mesh(spec, coarse)
        nptest.assert_allclose(mesh.nodes, (1.+0.02*w)*mean, atol=1e-12)

def test_pca_needs_mode_file():
    with pytest.raises(MissingModeFile):
        datagen.sample_shapes(2, kind=datagen.PCA_MODES, mode_file=None)

def test_pca_weight_limit():
    with pytest.raises(ValueError):
        datagen.ShapeSpec('w', datagen.PCA_MODES, [('weights', [2.5]), ('mode_file', 'x')])

def test_malformed_mode_file(tmpdir):
    path = str(tmpdir.join('modes.txt'))
    with open(path, 'w') as f:
        f.write('0 0 0\n1 1\n')
    with pytest.raises(ParseError):
        datagen.load_mode_file(path)

def test_case_grid():
    full = datagen.case_grid('full')
    assert len(full) == 6*6*3*3
    assert full[0] == GlobalParams(4., 50., 60., -60.)
    #Pressure varies slowest
    assert all(p.P_mmHg == 4. for p in full[:54])
    assert len(datagen.case_grid('mini')) == 4
    with pytest.raises(ConfigError):
        datagen.case_grid('huge')

def test_split_by_shape(synthetic_manifest):
    train, test = datagen.split_by_shape(synthetic_manifest, train_fraction=0.7, seed=3)
    assert len(train)+len(test) == len(synthetic_manifest)
    train_shapes = set(synthetic_manifest.get(c).shape_id for c in train)
    test_shapes = set(synthetic_manifest.get(c).shape_id for c in test)
    assert not train_shapes & test_shapes
    assert len(train_shapes) == 7
    assert (train, test) == datagen.split_by_shape(synthetic_manifest, 0.7, seed=3)
    with pytest.raises(ConfigError):
        datagen.split_by_shape(synthetic_manifest, train_fraction=1.5)
    with pytest.raises(ConfigError):
        datagen.sample_shapes(0, seed=1)

def test_default_split_fraction(synthetic_manifest):
    train, _ = datagen.split_by_shape(synthetic_manifest)
    assert len(set(synthetic_manifest.get(c).shape_id for c in train)) == 7

def test_split_needs_two_shapes():
    records = [CaseRecord('a_c{}'.format(i), 'a', p)
               for i, p in enumerate(datagen.case_grid('mini'))]
    with pytest.raises(TooFewShapes):
        datagen.split_by_shape(DatasetManifest(records, grid=GRIDS['mini']))

def test_split_lovo(synthetic_manifest):
    train, test = datagen.split_lovo(synthetic_manifest, 'P', 8.)
    assert len(test) == 20 and len(train) == 20
    assert all(synthetic_manifest.get(c).params.P_mmHg == 8. for c in test)
    with pytest.raises(ValueNotInGrid):
        datagen.split_lovo(synthetic_manifest, 'P', 9.)
    with pytest.raises(ValueNotInGrid):
        datagen.split_lovo(synthetic_manifest, 'heart_rate', 60.)

def test_build_dataset(tmpdir):
    out_dir = str(tmpdir)
    shapes = [datagen.ShapeSpec('lv', datagen.PARAMETRIC_ELLIPSOID, ELLIPSOID)]
    grid = [GlobalParams(4., 300., 60., -60.)]
    manifest = datagen.build_dataset(shapes, grid, fesolve.SolverOptions(), out_dir,
                                     resolution=datagen.MeshResolution.preset('coarse'),
                                     grid_name='custom', seed=5)
    assert len(manifest) == 1
    assert os.path.exists(os.path.join(out_dir, MANIFEST_NAME))
    assert os.path.exists(os.path.join(out_dir, MANIFEST_META_NAME))

    loaded = datagen.load_manifest(out_dir)
    assert loaded.seed == 5
    assert loaded.meta['grid_name'] == 'custom'
    assert 'lv_c000' in loaded.meta['timings']['cases']
    record = loaded.get('lv_c000')
    assert record.params == grid[0]
    mesh_u, mesh_ed = loaded.meshes(record)
    assert mesh_u.same_topology(mesh_ed)
    assert meshcore.cavity_volume(mesh_ed) > meshcore.cavity_volume(mesh_u)

    with pytest.raises(IoError):
        datagen.build_dataset(shapes, grid, fesolve.SolverOptions(), out_dir,
                              resolution=datagen.MeshResolution.preset('coarse'))
