"""
Transmural coordinate and myocyte orientation field.

The transmural coordinate phi is the P1 solution of Laplace's equation
with phi = 0 on the endocardium and phi = 1 on the epicardium. Each
element gets a local (fiber, sheet, sheet-normal) frame: the sheet normal
follows grad(phi) and the fiber lies in the circumferential-longitudinal
plane at a helix angle interpolated linearly across the wall.
"""
from collections import deque

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.sparse.linalg import cg

from logbook import Logger
log = Logger('unloadlab.fibers')

from unloadlab import meshcore
from unloadlab.errors import (MissingLabel, SolverError, DegenerateGradient,
                              PoleDegeneracy, ShapeMismatch)

GRADIENT_TOL = 1e-12
POLE_TOL = 1e-8
_ZHAT = np.array([0., 0., 1.])

def assemble_laplacian(mesh):
    """P1 stiffness matrix of the Laplace operator (CSR, N x N)"""
    grads, vols = meshcore.shape_gradients(mesh.nodes, mesh.tets)
    local = np.einsum('eai,ebi->eab', grads, grads)*vols[:, None, None]
    rows = np.repeat(mesh.tets, 4, axis=1).ravel()
    cols = np.tile(mesh.tets, (1, 4)).ravel()
    n = mesh.n_nodes
    return coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()

def _cg_solve(A, b, rtol):
    """Jacobi-preconditioned conjugate gradients, across scipy signatures"""
    M = diags(1./A.diagonal())
    try:
        x, info = cg(A, b, rtol=rtol, atol=0., maxiter=10*A.shape[0], M=M)
    except TypeError:
        x, info = cg(A, b, tol=rtol, atol=0., maxiter=10*A.shape[0], M=M)
    return x, info

def solve_transmural_phi(mesh, tol=1e-10):
    """
    Solve for the transmural coordinate at every node

    INPUTS
    ------
        mesh - TetMesh with ENDO and EPI labels
        tol - required relative residual of the reduced linear system

    RETURNS
    -------
        phi - np.ndarray (N,), 0 on ENDO nodes and 1 on EPI nodes
    """
    endo, epi = mesh.labeled_nodes(meshcore.ENDO), mesh.labeled_nodes(meshcore.EPI)
    if endo.size == 0 or epi.size == 0:
        raise MissingLabel('Transmural solve needs ENDO and EPI labels '
                           '(found {} endo, {} epi nodes)'.format(endo.size, epi.size))
    n = mesh.n_nodes
    phi = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    fixed[endo] = True
    fixed[epi] = True
    phi[epi] = 1.
    phi[endo] = 0.
    free = np.flatnonzero(~fixed)
    if free.size:
        K = assemble_laplacian(mesh)
        K_ff = K[free][:, free]
        rhs = -K[free][:, fixed].dot(phi[fixed])
        phi_f, info = _cg_solve(K_ff, rhs, rtol=1e-2*tol)
        rhs_norm = np.linalg.norm(rhs)
        resid = np.linalg.norm(K_ff.dot(phi_f)-rhs)/(rhs_norm if rhs_norm > 0. else 1.)
        if not resid <= tol:
            raise SolverError(('Transmural Laplace solve reached relative residual {:.3e}'
                               ' (tolerance {:.1e}, cg info {})').format(resid, tol, info))
        log.debug('Laplace solve: {} free nodes, relative residual {:.2e}'.format(
            free.size, resid))
        phi[free] = phi_f
    overshoot = max(-phi.min(), phi.max()-1.)
    if overshoot > 1e-8:
        log.warning('Clipping transmural coordinate overshoot of {:.2e}'.format(overshoot))
    return np.clip(phi, 0., 1.)

class FiberField(object):
    """
    Per-element orthonormal frames plus the nodal transmural coordinate

    phi - (N,) transmural coordinate
    fiber, sheet, sheet_normal - (M,3) unit vectors, right-handed triad
    theta_endo, theta_epi - helix angles in degrees
    """
    def __init__(self, phi, fiber, sheet, sheet_normal, theta_endo, theta_epi):
        self.phi = np.asarray(phi, dtype=np.float64)
        self.fiber = np.asarray(fiber, dtype=np.float64)
        self.sheet = np.asarray(sheet, dtype=np.float64)
        self.sheet_normal = np.asarray(sheet_normal, dtype=np.float64)
        self.theta_endo = float(theta_endo)
        self.theta_epi = float(theta_epi)

    @property
    def n_elements(self):
        return self.fiber.shape[0]

    def rotations(self):
        """(M,3,3) matrices whose rows are fiber, sheet and sheet normal"""
        return np.stack([self.fiber, self.sheet, self.sheet_normal], axis=1)

    def orthonormality_error(self):
        R = self.rotations()
        return float(np.abs(np.einsum('eij,ekj->eik', R, R)-np.eye(3)).max())

def helix_angles(xi, theta_endo, theta_epi):
    """Linear interpolation of the helix angle in degrees across the wall"""
    return theta_endo+np.asarray(xi)*(theta_epi-theta_endo)

def _circumferential_from_neighbors(mesh, sheet_normal, circ, pole):
    """
    Fill the circumferential direction of near-polar elements by a
    breadth-first sweep over face neighbors, seeded from all regular
    elements in order of decreasing height (base first)
    """
    pairs = meshcore.face_neighbors(mesh.tets)
    m = mesh.n_tets
    adjacency = coo_matrix((np.ones(2*len(pairs)),
                            (np.concatenate([pairs[:, 0], pairs[:, 1]]),
                             np.concatenate([pairs[:, 1], pairs[:, 0]]))),
                           shape=(m, m)).tocsr()
    heights = mesh.nodes[mesh.tets, 2].mean(axis=1)
    seeds = np.flatnonzero(~pole)
    seeds = seeds[np.argsort(-heights[seeds], kind='stable')]
    done = ~pole
    queue = deque(seeds.tolist())
    while queue:
        parent = queue.popleft()
        for child in adjacency.indices[adjacency.indptr[parent]:adjacency.indptr[parent+1]]:
            if done[child]:
                continue
            a_n = sheet_normal[child]
            projected = circ[parent]-np.dot(circ[parent], a_n)*a_n
            norm = np.linalg.norm(projected)
            if norm < POLE_TOL:
                continue
            circ[child] = projected/norm
            done[child] = True
            queue.append(child)
    if not np.all(done):
        missing = np.flatnonzero(~done)
        raise PoleDegeneracy(('{} elements with sheet normal parallel to the long axis '
                              'have no regular neighbor (first: {})').format(
                                  missing.size, missing[:5].tolist()))
    return circ

def assign_fibers(mesh, phi, theta_endo, theta_epi):
    """
    Build per-element (fiber, sheet, sheet-normal) frames

    INPUTS
    ------
        mesh - TetMesh
        phi - (N,) transmural coordinate
        theta_endo, theta_epi - helix angles in degrees

    RETURNS
    -------
        FiberField
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (mesh.n_nodes,):
        raise ShapeMismatch('phi has shape {}, expected ({},)'.format(phi.shape, mesh.n_nodes))
    grads, _ = meshcore.shape_gradients(mesh.nodes, mesh.tets)
    grad_phi = np.einsum('ea,eai->ei', phi[mesh.tets], grads)
    gnorm = np.linalg.norm(grad_phi, axis=1)
    flat = np.flatnonzero(gnorm < GRADIENT_TOL)
    if flat.size:
        raise DegenerateGradient(('Transmural gradient vanishes in {} elements '
                                  '(first: {})').format(flat.size, flat[:5].tolist()))
    a_n = grad_phi/gnorm[:, None]

    circ = np.cross(_ZHAT, a_n)
    cnorm = np.linalg.norm(circ, axis=1)
    pole = cnorm < POLE_TOL
    circ[~pole] /= cnorm[~pole, None]
    if np.any(pole):
        log.debug('{} near-polar elements take their circumferential direction '
                  'from neighbors'.format(int(np.count_nonzero(pole))))
        circ = _circumferential_from_neighbors(mesh, a_n, circ, pole)
    longi = np.cross(a_n, circ)

    xi = phi[mesh.tets].mean(axis=1)
    theta = np.radians(helix_angles(xi, theta_endo, theta_epi))
    a_f = np.cos(theta)[:, None]*circ+np.sin(theta)[:, None]*longi
    a_s = np.cross(a_n, a_f)
    return FiberField(phi, a_f, a_s, a_n, theta_endo, theta_epi)

def compute_fibers(mesh, theta_endo, theta_epi):
    """Laplace solve followed by frame assignment"""
    return assign_fibers(mesh, solve_transmural_phi(mesh), theta_endo, theta_epi)

def export_fibers_vtk(mesh, field, path):
    """phi as point data and the three frame vectors as cell data"""
    meshcore.write_vtk(path, mesh,
                       point_data={'phi': field.phi},
                       cell_data={'fiber': field.fiber, 'sheet': field.sheet,
                                  'sheet_normal': field.sheet_normal})
