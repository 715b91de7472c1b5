"""
Tetrahedral mesh container for the left ventricle models: boundary
labeling, geometric analytics (volumes, element quality, coordinate
normalization) and reading/writing of the native JSON and legacy VTK
formats.

Geometry is in cm. The longitudinal axis is +z and the base of a
truncated ventricle lies on the plane of maximal z.
"""
import os
import json

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from logbook import Logger
log = Logger('unloadlab.meshcore')

from unloadlab.errors import (ParseError, TopologyError, IoError,
                              AmbiguousTopology, MissingLabel,
                              DegenerateMesh)

ENDO, EPI, BASE = 'ENDO', 'EPI', 'BASE'
SURFACE_LABELS = (ENDO, EPI, BASE)

NATIVE_FORMAT_VERSION = 1
MAX_NODES = 10**6
BASE_PLANE_TOL = 1e-9
MAX_ASPECT_RATIO = 20.

#Legacy VTK cell type ids
_VTK_TRIANGLE = 5
_VTK_TETRA = 10
_VTK_LABEL_CODES = {ENDO: 1, EPI: 2, BASE: 3}
_VTK_CODE_LABELS = {code: label for label, code in _VTK_LABEL_CODES.items()}

#Faces of a positively oriented tet (0,1,2,3), each listed so its
#right-hand normal points away from the opposite vertex
_TET_FACES = np.array([[1, 2, 3],
                       [0, 3, 2],
                       [0, 1, 3],
                       [0, 2, 1]])

_TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])

def signed_volumes(nodes, tets):
    """Signed volume of every tet (positive for right-handed ordering)"""
    x0 = nodes[tets[:, 0]]
    d1 = nodes[tets[:, 1]]-x0
    d2 = nodes[tets[:, 2]]-x0
    d3 = nodes[tets[:, 3]]-x0
    return np.einsum('ij,ij->i', d1, np.cross(d2, d3))/6.

def shape_gradients(nodes, tets):
    """
    Constant gradients of the four linear shape functions of each tet

    RETURNS
    -------
        grads, np.ndarray (M,4,3)
            grads[e, a] is the reference gradient of shape function a
        volumes, np.ndarray (M,)
    """
    x0 = nodes[tets[:, 0]]
    Dm = np.stack([nodes[tets[:, 1]]-x0, nodes[tets[:, 2]]-x0,
                   nodes[tets[:, 3]]-x0], axis=2)
    volumes = np.linalg.det(Dm)/6.
    if np.any(volumes <= 0.):
        raise TopologyError('{} tets with nonpositive volume'.format(
            int(np.count_nonzero(volumes <= 0.))))
    Dm_inv = np.linalg.inv(Dm)
    grads = np.empty((tets.shape[0], 4, 3))
    grads[:, 1:, :] = Dm_inv
    grads[:, 0, :] = -Dm_inv.sum(axis=1)
    return grads, volumes

def boundary_faces(tets):
    """
    Find the faces owned by exactly one tet

    RETURNS
    -------
        faces, np.ndarray (K,3)
            Boundary triangles, oriented outward from their owning tet
        owners, np.ndarray (K,)
            Index of the owning tet
    """
    tets = np.asarray(tets)
    n_tets = tets.shape[0]
    oriented = tets[:, _TET_FACES].reshape(-1, 3)
    owners = np.repeat(np.arange(n_tets), 4)
    keys = np.sort(oriented, axis=1)
    _, first, counts = np.unique(keys, axis=0, return_index=True,
                                 return_counts=True)
    once = np.sort(first[counts == 1])
    return oriented[once], owners[once]

def face_neighbors(tets):
    """Pairs of tets sharing a face, (P,2) with the lower index first"""
    tets = np.asarray(tets)
    keys = np.sort(tets[:, _TET_FACES].reshape(-1, 3), axis=1)
    owners = np.repeat(np.arange(tets.shape[0]), 4)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind='stable')
    sorted_inv = inverse[order]
    shared = np.flatnonzero(sorted_inv[1:] == sorted_inv[:-1])
    pairs = np.stack([owners[order[shared]], owners[order[shared+1]]], axis=1)
    return np.sort(pairs, axis=1)

def _face_keys(tris):
    return [tuple(row) for row in np.sort(tris, axis=1).tolist()]

def _triangle_area_vectors(nodes, tris):
    """Half the cross product: unit normal times area"""
    p0, p1, p2 = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    return 0.5*np.cross(p1-p0, p2-p0)

def _check_closed(tris):
    """Every edge of a closed 2-manifold is shared by exactly two triangles"""
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    _, counts = np.unique(np.sort(edges, axis=1), axis=0, return_counts=True)
    return np.all(counts == 2)

class TetMesh(object):
    """
    Immutable tetrahedral mesh with labeled boundary triangles

    nodes - (N,3) float coordinates in cm
    tets - (M,4) node indices, positive signed volume
    surface_tris - (K,3) boundary triangles, stored oriented outward
        from the myocardium (away from the owning tet)
    surface_labels - (K,) one of ENDO, EPI, BASE
    """
    def __init__(self, nodes, tets, surface_tris=None, surface_labels=None,
                 validate=True):
        self.nodes = np.array(nodes, dtype=np.float64).reshape(-1, 3)
        self.tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
        if surface_tris is None:
            surface_tris, surface_labels = np.zeros((0, 3), dtype=np.int64), []
        self.surface_tris = np.array(surface_tris, dtype=np.int64).reshape(-1, 3)
        if surface_labels is None or len(surface_labels) != len(self.surface_tris):
            raise TopologyError('{} surface triangles but {} labels'.format(
                len(self.surface_tris),
                0 if surface_labels is None else len(surface_labels)))
        self.surface_labels = np.array([str(lab) for lab in surface_labels],
                                       dtype='<U4')
        if validate:
            self._validate()
        for arr in (self.nodes, self.tets, self.surface_tris, self.surface_labels):
            arr.flags.writeable = False

    def _validate(self):
        n = self.nodes.shape[0]
        if n < 1 or n > MAX_NODES:
            raise TopologyError('Node count {} outside [1, {}]'.format(n, MAX_NODES))
        if not np.all(np.isfinite(self.nodes)):
            raise TopologyError('Non-finite node coordinates')
        if self.tets.size:
            if self.tets.min() < 0 or self.tets.max() >= n:
                raise TopologyError(('Tet connectivity references node {} '
                                     'but mesh has {} nodes').format(
                                         int(self.tets.max()), n))
            vols = signed_volumes(self.nodes, self.tets)
            bad = np.flatnonzero(vols <= 0.)
            if bad.size:
                raise TopologyError(('{} inverted or flat tets '
                                     '(first: {})').format(bad.size, bad[:5].tolist()))
        if self.surface_tris.shape[0]:
            bad_labels = set(self.surface_labels.tolist())-set(SURFACE_LABELS)
            if bad_labels:
                raise TopologyError('Unknown surface labels {}'.format(sorted(bad_labels)))
            self._orient_surface()
            if not _check_closed(self.surface_tris):
                raise TopologyError('Labeled surface is not a closed 2-manifold')

    def _orient_surface(self):
        """Reorient stored surface triangles to match the outward boundary faces"""
        faces, _ = boundary_faces(self.tets)
        lookup = dict(zip(_face_keys(faces), faces.tolist()))
        oriented = []
        for key, tri in zip(_face_keys(self.surface_tris), self.surface_tris.tolist()):
            if key not in lookup:
                raise TopologyError('Surface triangle {} is not a boundary face'.format(tri))
            oriented.append(lookup[key])
        self.surface_tris = np.array(oriented, dtype=np.int64).reshape(-1, 3)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_tets(self):
        return self.tets.shape[0]

    def with_nodes(self, nodes, validate=True):
        """Same topology and labels, new coordinates"""
        mesh = TetMesh.__new__(TetMesh)
        mesh.nodes = np.array(nodes, dtype=np.float64).reshape(self.nodes.shape)
        mesh.tets = self.tets
        mesh.surface_tris = self.surface_tris
        mesh.surface_labels = self.surface_labels
        if validate:
            vols = signed_volumes(mesh.nodes, mesh.tets)
            if np.any(vols <= 0.) or not np.all(np.isfinite(mesh.nodes)):
                raise TopologyError('Displaced mesh has {} inverted tets'.format(
                    int(np.count_nonzero(vols <= 0.))))
        mesh.nodes.flags.writeable = False
        return mesh

    def has_label(self, label):
        return bool(np.any(self.surface_labels == label))

    def tris(self, label):
        return self.surface_tris[self.surface_labels == label]

    def labeled_nodes(self, label):
        return np.unique(self.tris(label))

    def tet_volumes(self):
        return signed_volumes(self.nodes, self.tets)

    def edges(self):
        """Unique undirected edges of the tet 1-skeleton, (E,2) with i < j"""
        pairs = np.sort(self.tets[:, _TET_EDGES].reshape(-1, 2), axis=1)
        return np.unique(pairs, axis=0)

    def same_topology(self, other):
        return (self.tets.shape == other.tets.shape
                and np.array_equal(self.tets, other.tets)
                and self.n_nodes == other.n_nodes)

    def __repr__(self):
        counts = {lab: int(np.count_nonzero(self.surface_labels == lab))
                  for lab in SURFACE_LABELS}
        return 'TetMesh(nodes={}, tets={}, surface={})'.format(
            self.n_nodes, self.n_tets, counts)

def extract_surfaces(mesh):
    """
    Label the boundary of an unlabeled ventricle (or spherical) shell

    The basal rim is the set of boundary faces lying on the plane of
    maximal z; the remaining faces must form exactly two shells, the
    inner (smaller) one becomes ENDO and the outer one EPI.
    """
    if mesh.surface_tris.shape[0]:
        return mesh
    faces, _ = boundary_faces(mesh.tets)
    if faces.shape[0] == 0:
        raise AmbiguousTopology('Mesh has no boundary faces')
    z = mesh.nodes[:, 2]
    on_base = np.all(np.abs(z[faces]-z.max()) <= BASE_PLANE_TOL, axis=1)
    shell_faces = faces[~on_base]

    n = mesh.n_nodes
    rows = np.concatenate([shell_faces[:, 0], shell_faces[:, 1], shell_faces[:, 2]])
    cols = np.concatenate([shell_faces[:, 1], shell_faces[:, 2], shell_faces[:, 0]])
    adjacency = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    _, node_comp = connected_components(adjacency, directed=False)
    face_comp = node_comp[shell_faces[:, 0]]
    comps = np.unique(face_comp)
    if comps.size != 2:
        raise AmbiguousTopology(('Expected two boundary shells (endo, epi), '
                                 'found {}').format(comps.size))

    extents = []
    for comp in comps:
        pts = mesh.nodes[np.unique(shell_faces[face_comp == comp])]
        extents.append(np.linalg.norm(pts.max(axis=0)-pts.min(axis=0)))
    inner = comps[int(np.argmin(extents))]

    labels = np.empty(faces.shape[0], dtype='<U4')
    labels[on_base] = BASE
    shell_labels = np.where(face_comp == inner, ENDO, EPI)
    labels[~on_base] = shell_labels
    log.debug('Labeled {} ENDO, {} EPI, {} BASE faces'.format(
        int(np.count_nonzero(labels == ENDO)), int(np.count_nonzero(labels == EPI)),
        int(np.count_nonzero(labels == BASE))))
    return TetMesh(mesh.nodes, mesh.tets, faces, labels)

def cavity_volume(mesh, nodes=None):
    """
    Volume enclosed by the endocardium and its flat basal cap (cm^3)

    Divergence theorem with the field (0, 0, z - z_cap): the cap lies on
    z = z_cap so only the endocardial triangles contribute. Pass nodes to
    evaluate on displaced coordinates with the mesh topology.
    """
    endo = mesh.tris(ENDO)
    if endo.shape[0] == 0:
        raise MissingLabel('cavity_volume needs ENDO labeled triangles')
    x = mesh.nodes if nodes is None else np.asarray(nodes)
    z_cap = x[np.unique(endo), 2].max()
    area_vec = _triangle_area_vectors(x, endo)
    z_mean = x[endo, 2].mean(axis=1)
    #Stored normals point out of the myocardium, i.e. into the cavity
    return float(-np.sum((z_mean-z_cap)*area_vec[:, 2]))

def shell_volume(mesh):
    """Volume enclosed by all boundary faces (should equal the tet volume sum)"""
    faces, _ = boundary_faces(mesh.tets)
    x = mesh.nodes
    return float(np.einsum('ij,ij->', x[faces[:, 0]],
                           np.cross(x[faces[:, 1]], x[faces[:, 2]]))/6.)

def aspect_ratios(mesh):
    """Longest over shortest edge of every tet"""
    x = mesh.nodes
    lengths = np.linalg.norm(x[mesh.tets[:, _TET_EDGES[:, 0]]]
                             -x[mesh.tets[:, _TET_EDGES[:, 1]]], axis=2)
    return lengths.max(axis=1)/lengths.min(axis=1)

class NormalizationTransform(object):
    """Map coordinates to zero centroid and unit root-mean-square radius"""
    def __init__(self, centroid, scale):
        self.centroid = np.array(centroid, dtype=np.float64).reshape(3)
        self.scale = float(scale)
        if not self.scale > 0.:
            raise DegenerateMesh('Normalization scale must be positive, got {}'.format(scale))

    def apply(self, points):
        return (np.asarray(points)-self.centroid)/self.scale

    def invert(self, points):
        return np.asarray(points)*self.scale+self.centroid

    def is_identity(self, tol=1e-10):
        return np.all(np.abs(self.centroid) <= tol) and abs(self.scale-1.) <= tol

    def to_dict(self):
        return {'centroid': self.centroid.tolist(), 'scale': self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(d['centroid'], d['scale'])

def normalize_coords(mesh):
    """
    Center the mesh on its node centroid and scale to unit RMS radius

    RETURNS
    -------
        normalized, TetMesh
        transform, NormalizationTransform
            transform.invert(normalized.nodes) reproduces mesh.nodes
    """
    centroid = mesh.nodes.mean(axis=0)
    centered = mesh.nodes-centroid
    scale = np.sqrt(np.mean(np.sum(centered**2, axis=1)))
    if not scale > 0.:
        raise DegenerateMesh('All {} nodes coincide, cannot normalize'.format(mesh.n_nodes))
    transform = NormalizationTransform(centroid, scale)
    return mesh.with_nodes(transform.apply(mesh.nodes), validate=False), transform

#File input/output

def _infer_format(path, format):
    if format is not None:
        if format not in ('native-json', 'vtk-legacy-ascii'):
            raise ParseError('Unknown mesh format {}'.format(format))
        return format
    return 'vtk-legacy-ascii' if str(path).lower().endswith('.vtk') else 'native-json'

def save_mesh(mesh, path, format=None):
    """Write mesh as native JSON (default, or *.json) or legacy VTK (*.vtk)"""
    format = _infer_format(path, format)
    if format == 'vtk-legacy-ascii':
        write_vtk(path, mesh)
        return
    doc = {'version': NATIVE_FORMAT_VERSION,
           'units': 'cm',
           'nodes': mesh.nodes.tolist(),
           'tets': mesh.tets.tolist(),
           'surface': [{'tri': tri, 'label': str(lab)}
                       for tri, lab in zip(mesh.surface_tris.tolist(),
                                           mesh.surface_labels.tolist())]}
    try:
        with open(path, 'w') as f:
            json.dump(doc, f)
    except (IOError, OSError) as err:
        raise IoError('Could not write mesh to {}: {}'.format(path, err))

def load_mesh(path, format=None):
    """
    Read a mesh and return a validated TetMesh

    Surface labels come from the file when present; otherwise they are
    inferred by extract_surfaces when the boundary admits it.
    """
    format = _infer_format(path, format)
    if not os.path.exists(path):
        raise IoError('Mesh file {} does not exist'.format(path))
    if format == 'vtk-legacy-ascii':
        mesh, _, _ = read_vtk(path)
    else:
        try:
            with open(path, 'r') as f:
                doc = json.load(f)
            if doc.get('version') != NATIVE_FORMAT_VERSION:
                raise ParseError('Unsupported mesh format version {}'.format(doc.get('version')))
            nodes = np.array(doc['nodes'], dtype=np.float64)
            tets = np.array(doc['tets'], dtype=np.int64)
            surface = doc.get('surface', [])
            tris = [entry['tri'] for entry in surface]
            labels = [entry['label'] for entry in surface]
        except ParseError:
            raise
        except (ValueError, KeyError, TypeError) as err:
            raise ParseError('Malformed mesh file {}: {}'.format(path, err))
        if nodes.ndim != 2 or nodes.shape[1] != 3 or (tets.size and tets.shape[1] != 4):
            raise ParseError('Mesh file {} has malformed node or tet arrays'.format(path))
        mesh = TetMesh(nodes, tets, np.array(tris, dtype=np.int64).reshape(-1, 3), labels)
    if mesh.surface_tris.shape[0] == 0:
        try:
            mesh = extract_surfaces(mesh)
        except AmbiguousTopology as err:
            log.debug('No surface labels inferred for {}: {}'.format(path, err))
    return mesh

def _fmt(value):
    return '{:.17g}'.format(value)

def write_vtk(path, mesh, point_data=None, cell_data=None):
    """
    Legacy ASCII VTK unstructured grid with the tets followed by the labeled
    boundary triangles. CELL_DATA always carries the integer field
    surface_label (0 on tets); cell_data arrays are per tet (length M,
    triangles get zeros) and point_data arrays per node. Arrays with a
    trailing dimension of 3 are written as VECTORS, others as SCALARS.
    """
    m, k = mesh.n_tets, mesh.surface_tris.shape[0]
    lines = ['# vtk DataFile Version 3.0',
             'unloadlab tetrahedral mesh (cm)',
             'ASCII',
             'DATASET UNSTRUCTURED_GRID',
             'POINTS {} double'.format(mesh.n_nodes)]
    lines += [' '.join(_fmt(v) for v in p) for p in mesh.nodes.tolist()]
    lines.append('CELLS {} {}'.format(m+k, 5*m+4*k))
    lines += ['4 {} {} {} {}'.format(*t) for t in mesh.tets.tolist()]
    lines += ['3 {} {} {}'.format(*t) for t in mesh.surface_tris.tolist()]
    lines.append('CELL_TYPES {}'.format(m+k))
    lines += [str(_VTK_TETRA)]*m+[str(_VTK_TRIANGLE)]*k
    lines.append('CELL_DATA {}'.format(m+k))
    codes = [0]*m+[_VTK_LABEL_CODES[lab] for lab in mesh.surface_labels.tolist()]
    lines += ['SCALARS surface_label int 1', 'LOOKUP_TABLE default']
    lines += [str(c) for c in codes]
    for name, values in (cell_data or {}).items():
        values = np.asarray(values, dtype=np.float64)
        padded = np.zeros((m+k,)+values.shape[1:])
        padded[:m] = values
        lines += _vtk_array_lines(name, padded)
    if point_data:
        lines.append('POINT_DATA {}'.format(mesh.n_nodes))
        for name, values in point_data.items():
            lines += _vtk_array_lines(name, np.asarray(values, dtype=np.float64))
    try:
        with open(path, 'w') as f:
            f.write('\n'.join(lines)+'\n')
    except (IOError, OSError) as err:
        raise IoError('Could not write VTK file {}: {}'.format(path, err))

def _vtk_array_lines(name, values):
    if values.ndim == 2 and values.shape[1] == 3:
        out = ['VECTORS {} double'.format(name)]
        out += [' '.join(_fmt(v) for v in row) for row in values.tolist()]
    else:
        out = ['SCALARS {} double 1'.format(name), 'LOOKUP_TABLE default']
        out += [_fmt(v) for v in values.ravel().tolist()]
    return out

def read_vtk(path):
    """
    Parse a legacy ASCII unstructured grid written by write_vtk (or any
    file restricted to tetra and triangle cells)

    RETURNS
    -------
        mesh, TetMesh
        point_data, dict of np.ndarray
        cell_data, dict of np.ndarray (per tet)
    """
    try:
        with open(path, 'r') as f:
            lines = f.read().splitlines()
    except (IOError, OSError) as err:
        raise IoError('Could not read VTK file {}: {}'.format(path, err))
    if len(lines) < 4 or not lines[0].startswith('# vtk'):
        raise ParseError('{} is not a legacy VTK file'.format(path))
    if lines[2].strip().upper() != 'ASCII':
        raise ParseError('Only ASCII legacy VTK is supported')
    tokens = ' '.join(lines[3:]).split()
    try:
        return _parse_vtk_tokens(tokens)
    except (IndexError, ValueError) as err:
        raise ParseError('Malformed VTK file {}: {}'.format(path, err))

def _parse_vtk_tokens(tokens):
    pos = 0
    points, cells, types = None, None, None
    cell_arrays, point_arrays = {}, {}
    section, section_size = None, 0

    def take(count, cast):
        vals = [cast(t) for t in tokens[pos:pos+count]]
        if len(vals) != count:
            raise ValueError('unexpected end of data')
        return vals

    while pos < len(tokens):
        key = tokens[pos].upper()
        if key == 'DATASET':
            if tokens[pos+1].upper() != 'UNSTRUCTURED_GRID':
                raise ParseError('Only UNSTRUCTURED_GRID datasets are supported')
            pos += 2
        elif key == 'POINTS':
            n = int(tokens[pos+1])
            pos += 3
            points = np.array(take(3*n, float)).reshape(n, 3)
            pos += 3*n
        elif key == 'CELLS':
            n, size = int(tokens[pos+1]), int(tokens[pos+2])
            pos += 3
            flat = take(size, int)
            pos += size
            cells, i = [], 0
            for _ in range(n):
                cells.append(flat[i+1:i+1+flat[i]])
                i += flat[i]+1
        elif key == 'CELL_TYPES':
            n = int(tokens[pos+1])
            pos += 2
            types = np.array(take(n, int))
            pos += n
        elif key in ('CELL_DATA', 'POINT_DATA'):
            section, section_size = key, int(tokens[pos+1])
            pos += 2
        elif key in ('SCALARS', 'VECTORS'):
            name = tokens[pos+1]
            if key == 'SCALARS':
                ncomp = 1
                pos += 3
                if pos < len(tokens) and tokens[pos].isdigit():
                    ncomp = int(tokens[pos])
                    pos += 1
                if tokens[pos].upper() == 'LOOKUP_TABLE':
                    pos += 2
            else:
                ncomp = 3
                pos += 3
            vals = np.array(take(section_size*ncomp, float))
            pos += section_size*ncomp
            vals = vals.reshape(section_size, ncomp) if ncomp > 1 else vals
            target = cell_arrays if section == 'CELL_DATA' else point_arrays
            target[name] = vals
        else:
            raise ValueError('unexpected token {}'.format(tokens[pos]))

    if points is None or cells is None or types is None:
        raise ParseError('VTK file lacks POINTS, CELLS or CELL_TYPES')
    tet_idx = np.flatnonzero(types == _VTK_TETRA)
    tri_idx = np.flatnonzero(types == _VTK_TRIANGLE)
    tets = np.array([cells[i] for i in tet_idx], dtype=np.int64).reshape(-1, 4)
    tris = np.array([cells[i] for i in tri_idx], dtype=np.int64).reshape(-1, 3)
    labels = []
    if 'surface_label' in cell_arrays and tri_idx.size:
        codes = np.asarray(cell_arrays['surface_label'])[tri_idx].astype(int)
        labels = [_VTK_CODE_LABELS.get(c) for c in codes.tolist()]
        if None in labels:
            raise ParseError('Unknown surface_label code in VTK file')
    else:
        tris = np.zeros((0, 3), dtype=np.int64)
    mesh = TetMesh(points, tets, tris, labels)
    per_tet = {name: np.asarray(vals)[tet_idx] for name, vals in cell_arrays.items()
               if name != 'surface_label'}
    return mesh, point_arrays, per_tet
