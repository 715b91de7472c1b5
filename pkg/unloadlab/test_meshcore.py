import os
import json

import pytest
import numpy as np
from numpy import testing as nptest

from unloadlab import meshcore, datagen
from unloadlab.errors import (TopologyError, IoError, ParseError, AmbiguousTopology,
                              MissingLabel, DegenerateMesh)
"""
Unit tests for the mesh container, surface labeling, geometry and file I/O
"""

@pytest.fixture()
def unit_tet(request):
    nodes = [[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [0., 0., 1.]]
    return meshcore.TetMesh(nodes, [[0, 1, 2, 3]])

@pytest.fixture()
def lv_shell(request):
    spec = datagen.ShapeSpec('lv', datagen.PARAMETRIC_ELLIPSOID,
                             [('a', 2.5), ('b', 2.5), ('long_axis', 8.), ('base_height', 0.5),
                              ('t_base', 1.), ('t_apex', 1.)])
    return datagen.build_shell_mesh(spec, datagen.MeshResolution.preset('coarse'))

@pytest.fixture()
def sphere_shell(request):
    return datagen.build_sphere_shell(1., 2., subdivisions=3, n_layers=1)

def test_signed_volume_of_unit_tet(unit_tet):
    nptest.assert_allclose(unit_tet.tet_volumes(), [1./6.])

def test_inverted_tet_rejected():
    nodes = [[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [0., 0., 1.]]
    with pytest.raises(TopologyError):
        meshcore.TetMesh(nodes, [[0, 2, 1, 3]])

def test_dangling_index_rejected():
    nodes = [[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [0., 0., 1.]]
    with pytest.raises(TopologyError):
        meshcore.TetMesh(nodes, [[0, 1, 2, 99]])

def test_mesh_arrays_are_read_only(unit_tet):
    with pytest.raises(ValueError):
        unit_tet.nodes[0, 0] = 5.

def test_shape_gradients_sum_to_zero(lv_shell):
    grads, vols = meshcore.shape_gradients(lv_shell.nodes, lv_shell.tets)
    nptest.assert_allclose(grads.sum(axis=1), 0., atol=1e-10)
    nptest.assert_allclose(vols, lv_shell.tet_volumes())

def test_shape_gradients_reproduce_linear_field(lv_shell):
    grads, _ = meshcore.shape_gradients(lv_shell.nodes, lv_shell.tets)
    g = np.array([0.3, -1.2, 2.])
    field = lv_shell.nodes.dot(g)
    recovered = np.einsum('eai,ea->ei', grads, field[lv_shell.tets])
    nptest.assert_allclose(recovered, np.tile(g, (lv_shell.n_tets, 1)), atol=1e-9)

def test_boundary_faces_of_single_tet(unit_tet):
    faces, owners = meshcore.boundary_faces(unit_tet.tets)
    assert faces.shape == (4, 3)
    assert np.all(owners == 0)
    #Outward normals: every face normal points away from the centroid
    x = unit_tet.nodes
    centroid = x.mean(axis=0)
    for tri in faces:
        normal = np.cross(x[tri[1]]-x[tri[0]], x[tri[2]]-x[tri[0]])
        assert normal.dot(x[tri].mean(axis=0)-centroid) > 0.

def test_face_neighbors_count(lv_shell):
    faces, _ = meshcore.boundary_faces(lv_shell.tets)
    pairs = meshcore.face_neighbors(lv_shell.tets)
    assert 2*pairs.shape[0]+faces.shape[0] == 4*lv_shell.n_tets

def test_extract_surfaces_labels_lv_base(lv_shell):
    base = lv_shell.tris(meshcore.BASE)
    assert base.shape[0] > 0
    z = lv_shell.nodes[:, 2]
    nptest.assert_allclose(z[base], z.max(), atol=1e-9)
    assert lv_shell.has_label(meshcore.ENDO) and lv_shell.has_label(meshcore.EPI)

def test_extract_surfaces_sphere_inner_is_endo(sphere_shell):
    r = np.linalg.norm(sphere_shell.nodes, axis=1)
    nptest.assert_allclose(r[sphere_shell.labeled_nodes(meshcore.ENDO)], 1., atol=1e-12)
    nptest.assert_allclose(r[sphere_shell.labeled_nodes(meshcore.EPI)], 2., atol=1e-12)
    assert not sphere_shell.has_label(meshcore.BASE)

def test_extract_surfaces_single_shell_ambiguous(unit_tet):
    with pytest.raises(AmbiguousTopology):
        meshcore.extract_surfaces(unit_tet)

def test_cavity_volume_sphere(sphere_shell):
    nptest.assert_allclose(meshcore.cavity_volume(sphere_shell), 4.*np.pi/3., rtol=2e-2)

def test_cavity_volume_hemisphere():
    spec = datagen.ShapeSpec('hemi', datagen.PARAMETRIC_ELLIPSOID,
                             [('a', 1.), ('b', 1.), ('long_axis', 1.), ('base_height', 0.),
                              ('t_base', 0.05), ('t_apex', 0.05)])
    res = datagen.MeshResolution(n_circ=32, n_lat=16, n_layers=1, node_band=None)
    mesh = datagen.build_shell_mesh(spec, res)
    nptest.assert_allclose(meshcore.cavity_volume(mesh), 2.*np.pi/3., rtol=2e-2)

def test_cavity_volume_needs_endo(unit_tet):
    with pytest.raises(MissingLabel):
        meshcore.cavity_volume(unit_tet)

def test_tet_volume_sum_equals_shell_volume(lv_shell):
    nptest.assert_allclose(lv_shell.tet_volumes().sum(), meshcore.shell_volume(lv_shell),
                           rtol=1e-8)

def test_edges_are_unique_and_sorted(unit_tet):
    edges = unit_tet.edges()
    assert edges.shape == (6, 2)
    assert np.all(edges[:, 0] < edges[:, 1])

def test_normalize_two_points():
    mesh = meshcore.TetMesh([[0., 0., 0.], [2., 0., 0.]], np.zeros((0, 4), dtype=int))
    normalized, transform = meshcore.normalize_coords(mesh)
    nptest.assert_allclose(transform.centroid, [1., 0., 0.])
    nptest.assert_allclose(transform.scale, 1.)
    nptest.assert_allclose(normalized.nodes, [[-1., 0., 0.], [1., 0., 0.]])

def test_normalize_properties_and_idempotence(lv_shell):
    normalized, transform = meshcore.normalize_coords(lv_shell)
    nptest.assert_allclose(normalized.nodes.mean(axis=0), 0., atol=1e-12)
    rms = np.sqrt(np.mean(np.sum(normalized.nodes**2, axis=1)))
    nptest.assert_allclose(rms, 1., atol=1e-12)
    nptest.assert_allclose(transform.invert(normalized.nodes), lv_shell.nodes,
                           rtol=1e-12, atol=1e-12)
    _, second = meshcore.normalize_coords(normalized)
    assert second.is_identity(tol=1e-10)

def test_normalize_degenerate():
    mesh = meshcore.TetMesh([[1., 1., 1.]]*3, np.zeros((0, 4), dtype=int))
    with pytest.raises(DegenerateMesh):
        meshcore.normalize_coords(mesh)

def test_transform_dict_round_trip():
    t = meshcore.NormalizationTransform([1., 2., 3.], 4.)
    back = meshcore.NormalizationTransform.from_dict(t.to_dict())
    nptest.assert_array_equal(back.centroid, t.centroid)
    assert back.scale == t.scale

def test_native_round_trip_unit_tet(unit_tet, tmpdir):
    path = str(tmpdir.join('tet.json'))
    meshcore.save_mesh(unit_tet, path)
    back = meshcore.load_mesh(path)
    assert back.n_nodes == 4 and back.n_tets == 1
    nptest.assert_array_equal(back.tets, unit_tet.tets)
    nptest.assert_allclose(back.nodes, unit_tet.nodes, atol=1e-12)

def test_native_round_trip_labels(lv_shell, tmpdir):
    path = str(tmpdir.join('lv.json'))
    meshcore.save_mesh(lv_shell, path)
    back = meshcore.load_mesh(path)
    assert back.same_topology(lv_shell)
    nptest.assert_array_equal(back.surface_tris, lv_shell.surface_tris)
    nptest.assert_array_equal(back.surface_labels, lv_shell.surface_labels)
    nptest.assert_allclose(back.nodes, lv_shell.nodes, atol=1e-12)

def test_vtk_round_trip(lv_shell, tmpdir):
    path = str(tmpdir.join('lv.vtk'))
    meshcore.save_mesh(lv_shell, path)
    back = meshcore.load_mesh(path)
    nptest.assert_array_equal(back.tets, lv_shell.tets)
    nptest.assert_array_equal(back.surface_labels, lv_shell.surface_labels)
    nptest.assert_allclose(back.nodes, lv_shell.nodes, atol=1e-12)

def test_vtk_point_and_cell_data(lv_shell, tmpdir):
    path = str(tmpdir.join('data.vtk'))
    phi = np.linspace(0., 1., lv_shell.n_nodes)
    vec = np.tile([1., 0., 0.], (lv_shell.n_tets, 1))
    meshcore.write_vtk(path, lv_shell, point_data={'phi': phi}, cell_data={'fiber': vec})
    _, point_data, cell_data = meshcore.read_vtk(path)
    nptest.assert_allclose(point_data['phi'], phi)
    nptest.assert_allclose(cell_data['fiber'], vec)

def test_load_missing_file(tmpdir):
    with pytest.raises(IoError):
        meshcore.load_mesh(str(tmpdir.join('nope.json')))

def test_load_dangling_index(tmpdir):
    path = str(tmpdir.join('bad.json'))
    with open(path, 'w') as f:
        json.dump({'version': 1, 'units': 'cm',
                   'nodes': [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
                   'tets': [[0, 1, 2, 99]], 'surface': []}, f)
    with pytest.raises(TopologyError):
        meshcore.load_mesh(path)

def test_load_malformed(tmpdir):
    path = str(tmpdir.join('bad.json'))
    with open(path, 'w') as f:
        f.write('{"version": 1, "nodes": ')
    with pytest.raises(ParseError):
        meshcore.load_mesh(path)

def test_save_unwritable_path(unit_tet, tmpdir):
    path = os.path.join(str(tmpdir), 'missing_dir', 'tet.json')
    with pytest.raises(IoError):
        meshcore.save_mesh(unit_tet, path)

def test_generated_mesh_quality(lv_shell):
    assert meshcore.aspect_ratios(lv_shell).max() < meshcore.MAX_ASPECT_RATIO
