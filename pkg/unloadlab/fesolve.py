"""
Quasi-static finite element mechanics of the passive left ventricle.

Forward inflation minimizes the total potential (stored Fung energy plus
volumetric penalty minus pressure work) with a damped Newton method and
pressure ramping. The unloaded reference for a given loaded geometry is
recovered with the backward displacement fixed point
X_{k+1} = X_ED - u(X_k).
"""
import time
from collections import OrderedDict

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.sparse.linalg import spsolve

from logbook import Logger
log = Logger('unloadlab.fesolve')

from unloadlab import meshcore, fibers as fiberfield
from unloadlab.constitutive import MaterialParams, element_response
from unloadlab.records import CaseRecord, GlobalParams, MMHG_TO_PA
from unloadlab.errors import (InvertedElement, StrainEnergyOverflow,
                              NonConvergence, MissingLabel, TopologyError,
                              ConfigError, ShapeMismatch)

FOLLOWER, DEAD = 'FOLLOWER', 'DEAD'
LOAD_MODES = (FOLLOWER, DEAD)
BC_MODE = 'BASE_LONGITUDINAL_PLUS_RIGID'

class SolverOptions(object):
    """
    ramp_steps - equal pressure increments up to the target
    newton_tol - convergence when max|gradient| <= newton_tol*C*mean element volume
    max_iters - Newton iterations per pressure increment
    max_refinements - times a failing increment may be bisected
    load_mode - FOLLOWER (cavity work on the deformed surface) or DEAD
    kappa - volumetric penalty in Pa, None for 10*C
    inverse_tol - backward displacement mismatch tolerance (cm)
    inverse_max_iters - backward displacement iterations
    refresh_fibers - recompute the fiber field on each reference iterate
    """
    def __init__(self, ramp_steps=10, newton_tol=1e-8, max_iters=50,
                 max_refinements=3, load_mode=FOLLOWER, kappa=None,
                 inverse_tol=1e-4, inverse_max_iters=30, refresh_fibers=True,
                 line_search_steps=30, armijo=1e-4):
        self.ramp_steps = int(ramp_steps)
        self.newton_tol = float(newton_tol)
        self.max_iters = int(max_iters)
        self.max_refinements = int(max_refinements)
        self.load_mode = str(load_mode).upper()
        self.kappa = None if kappa is None else float(kappa)
        self.inverse_tol = float(inverse_tol)
        self.inverse_max_iters = int(inverse_max_iters)
        self.refresh_fibers = bool(refresh_fibers)
        self.line_search_steps = int(line_search_steps)
        self.armijo = float(armijo)
        self.validate()

    def validate(self):
        if self.ramp_steps < 1 or self.max_iters < 1 or self.inverse_max_iters < 1:
            raise ConfigError('ramp_steps, max_iters and inverse_max_iters must be >= 1')
        if self.max_refinements < 0 or self.line_search_steps < 1:
            raise ConfigError('max_refinements must be >= 0 and line_search_steps >= 1')
        if self.load_mode not in LOAD_MODES:
            raise ConfigError('load_mode must be one of {}, got {}'.format(LOAD_MODES,
                                                                          self.load_mode))
        if self.newton_tol <= 0. or self.inverse_tol < 0.:
            raise ConfigError('Tolerances must be positive (newton_tol={}, inverse_tol={})'.format(
                self.newton_tol, self.inverse_tol))
        if self.kappa is not None and self.kappa < 0.:
            raise ConfigError('kappa must be nonnegative, got {}'.format(self.kappa))

    def material(self, C):
        """Fung parameters at stiffness C with this run's volumetric penalty"""
        return MaterialParams(C, kappa_vol=self.kappa)

    def to_dict(self):
        return OrderedDict([('ramp_steps', self.ramp_steps),
                            ('newton_tol', self.newton_tol),
                            ('max_iters', self.max_iters),
                            ('max_refinements', self.max_refinements),
                            ('load_mode', self.load_mode),
                            ('kappa', self.kappa),
                            ('inverse_tol', self.inverse_tol),
                            ('inverse_max_iters', self.inverse_max_iters),
                            ('refresh_fibers', self.refresh_fibers),
                            ('line_search_steps', self.line_search_steps),
                            ('armijo', self.armijo)])

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls().to_dict()})

class SolveReport(object):
    def __init__(self, converged, newton_iters=0, final_residual_norm=0.,
                 pressure_steps=0, wall_time=0., tol_abs=0., mismatch=None,
                 inverse_iters=None):
        self.converged = bool(converged)
        self.newton_iters = int(newton_iters)
        self.final_residual_norm = float(final_residual_norm)
        self.pressure_steps = int(pressure_steps)
        self.wall_time = float(wall_time)
        self.tol_abs = float(tol_abs)
        self.mismatch = mismatch
        self.inverse_iters = inverse_iters

    def summary(self):
        """Deterministic fields only (no wall time)"""
        d = OrderedDict([('converged', self.converged),
                         ('newton_iters', self.newton_iters),
                         ('final_residual_norm', self.final_residual_norm),
                         ('pressure_steps', self.pressure_steps)])
        if self.mismatch is not None:
            d['mismatch_cm'] = float(self.mismatch)
            d['inverse_iters'] = self.inverse_iters
        return d

    def __repr__(self):
        return 'SolveReport({})'.format(', '.join('{}={}'.format(k, v)
                                                 for k, v in self.summary().items()))

class BoundaryConditions(object):
    """
    Fixed displacement components, stored as flat dof indices 3*node+axis
    """
    def __init__(self, fixed_dofs, n_nodes, mode=BC_MODE):
        self.fixed_dofs = np.unique(np.asarray(fixed_dofs, dtype=np.int64))
        self.n_nodes = int(n_nodes)
        self.mode = mode
        if self.fixed_dofs.size and (self.fixed_dofs.min() < 0
                                     or self.fixed_dofs.max() >= 3*self.n_nodes):
            raise ConfigError('Fixed dof index out of range for {} nodes'.format(n_nodes))
        self.free_mask = np.ones(3*self.n_nodes, dtype=bool)
        self.free_mask[self.fixed_dofs] = False

    @classmethod
    def from_mesh(cls, mesh):
        """
        Basal nodes fixed longitudinally; the basal node of largest x fully
        fixed and the basal node of smallest x fixed in y
        """
        base = mesh.labeled_nodes(meshcore.BASE)
        if base.size < 2:
            raise MissingLabel('Boundary conditions need at least two BASE nodes, found {}'.format(
                base.size))
        x = mesh.nodes[base, 0]
        anchor, pivot = base[int(np.argmax(x))], base[int(np.argmin(x))]
        fixed = [3*base+2, [3*anchor, 3*anchor+1, 3*pivot+1]]
        return cls(np.concatenate([np.asarray(f) for f in fixed]), mesh.n_nodes)

    def apply_to_vector(self, g):
        g = g.copy()
        g[self.fixed_dofs] = 0.
        return g

    def apply_to_matrix(self, K):
        free = diags(self.free_mask.astype(np.float64))
        fixed = diags((~self.free_mask).astype(np.float64))
        return (free.dot(K).dot(free)+fixed).tocsr()

class MechanicsProblem(object):
    """
    Precomputed reference geometry of one loading problem

    INPUTS
    ------
        mesh_ref - TetMesh, unloaded reference
        fibers - FiberField on mesh_ref
        mat - MaterialParams
        P - cavity pressure (Pa)
        load_mode - FOLLOWER or DEAD
        bcs - BoundaryConditions or None (no fixed dofs)
    """
    def __init__(self, mesh_ref, fibers, mat, P, load_mode=FOLLOWER, bcs=None):
        if load_mode not in LOAD_MODES:
            raise ConfigError('Unknown load mode {}'.format(load_mode))
        self.mesh = mesh_ref
        self.mat = mat
        self.P = float(P)
        self.load_mode = load_mode
        self.bcs = bcs
        self.X = mesh_ref.nodes
        self.tets = mesh_ref.tets
        self.grads, self.vols = meshcore.shape_gradients(self.X, self.tets)
        self.R = fibers.rotations()
        if self.R.shape[0] != mesh_ref.n_tets:
            raise ShapeMismatch('Fiber field has {} elements, mesh has {}'.format(
                self.R.shape[0], mesh_ref.n_tets))
        self.n_dofs = 3*mesh_ref.n_nodes
        self.tet_dofs = (3*self.tets[:, :, None]+np.arange(3)).reshape(-1, 12)
        self.endo = mesh_ref.tris(meshcore.ENDO)
        if self.P != 0. and self.endo.shape[0] == 0:
            raise MissingLabel('Pressure loading needs ENDO labeled triangles')
        self.tri_dofs = (3*self.endo[:, :, None]+np.arange(3)).reshape(-1, 9)
        self.z_cap = self.X[np.unique(self.endo), 2].max() if self.endo.size else 0.
        self.cavity_ref = self.cavity_volume(self.X) if self.endo.size else 0.
        if load_mode == DEAD and self.endo.size:
            area_vec = 0.5*np.cross(self.X[self.endo[:, 1]]-self.X[self.endo[:, 0]],
                                    self.X[self.endo[:, 2]]-self.X[self.endo[:, 0]])
            #Stored endo normals point into the cavity; pressure pushes the other way
            nodal = np.repeat(-self.P*area_vec/3., 3, axis=0)
            self.dead_force = np.bincount(self.tri_dofs.ravel(), weights=nodal.ravel(),
                                          minlength=self.n_dofs)
        else:
            self.dead_force = np.zeros(self.n_dofs)

    @property
    def mean_element_volume(self):
        return float(self.vols.mean())

    def deformation_gradients(self, u):
        u = np.asarray(u).reshape(-1, 3)
        return np.eye(3)+np.einsum('eai,eaj->eij', u[self.tets], self.grads)

    def cavity_volume(self, x):
        x = np.asarray(x).reshape(-1, 3)
        p = x[self.endo]
        a_xy = (p[:, 0, 0]*(p[:, 1, 1]-p[:, 2, 1])+p[:, 1, 0]*(p[:, 2, 1]-p[:, 0, 1])
                +p[:, 2, 0]*(p[:, 0, 1]-p[:, 1, 1]))
        z_mean = p[:, :, 2].mean(axis=1)
        return float(-np.sum((z_mean-self.z_cap)*0.5*a_xy))

    def _pressure_terms(self, u, hessian):
        """Pressure potential, its gradient and (optionally) Hessian entries"""
        if self.P == 0. or self.endo.shape[0] == 0:
            return 0., np.zeros(self.n_dofs), None
        u = np.asarray(u).reshape(-1, 3)
        if self.load_mode == DEAD:
            f = self.dead_force
            return -float(np.dot(f, u.ravel())), -f, None

        x = self.X+u
        p = x[self.endo]
        #Cyclic neighbors within each triangle
        nxt, prv = p[:, [1, 2, 0], :], p[:, [2, 0, 1], :]
        dA_dx = nxt[:, :, 1]-prv[:, :, 1]
        dA_dy = prv[:, :, 0]-nxt[:, :, 0]
        a_xy = np.sum(p[:, :, 0]*dA_dx, axis=1)
        height = p[:, :, 2].mean(axis=1)-self.z_cap
        volume = -np.sum(height*0.5*a_xy)
        energy = -self.P*(volume-self.cavity_ref)

        #Gradient of g = height*a_xy/2 per triangle; energy = P*sum(g) + const
        local = np.zeros((p.shape[0], 3, 3))
        local[:, :, 0] = 0.5*height[:, None]*dA_dx
        local[:, :, 1] = 0.5*height[:, None]*dA_dy
        local[:, :, 2] = (a_xy/6.)[:, None]
        grad = self.P*np.bincount(self.tri_dofs.ravel(), weights=local.ravel(),
                                  minlength=self.n_dofs)
        if not hessian:
            return energy, grad, None

        h = np.zeros((p.shape[0], 3, 3, 3, 3))
        #z couples to x and y of every node
        h[:, :, 0, :, 2] = dA_dx[:, :, None]/6.
        h[:, :, 1, :, 2] = dA_dy[:, :, None]/6.
        #x_a couples to y_{a+1} (+) and y_{a+2} (-)
        for a in range(3):
            h[:, a, 0, (a+1) % 3, 1] += 0.5*height
            h[:, a, 0, (a+2) % 3, 1] -= 0.5*height
        h = h+np.transpose(h, (0, 3, 4, 1, 2))
        return energy, grad, self.P*h.reshape(-1, 9, 9)

    def energy(self, u):
        F = self.deformation_gradients(u)
        W, _, _ = element_response(F, self.R, self.mat, tangent=False)
        e_pressure, _, _ = self._pressure_terms(u, hessian=False)
        return float(np.dot(W, self.vols))+e_pressure

    def gradient(self, u, apply_bcs=True):
        F = self.deformation_gradients(u)
        _, P1, _ = element_response(F, self.R, self.mat, tangent=False)
        f_local = np.einsum('e,eiJ,eaJ->eai', self.vols, P1, self.grads)
        g = np.bincount(self.tet_dofs.ravel(), weights=f_local.ravel(),
                        minlength=self.n_dofs)
        _, g_pressure, _ = self._pressure_terms(u, hessian=False)
        g = g+g_pressure
        if apply_bcs and self.bcs is not None:
            g = self.bcs.apply_to_vector(g)
        return g

    def gradient_and_tangent(self, u, apply_bcs=True):
        F = self.deformation_gradients(u)
        _, P1, A = element_response(F, self.R, self.mat, tangent=True)
        f_local = np.einsum('e,eiJ,eaJ->eai', self.vols, P1, self.grads)
        g = np.bincount(self.tet_dofs.ravel(), weights=f_local.ravel(),
                        minlength=self.n_dofs)
        k_local = np.einsum('e,eaJ,eiJkL,ebL->eaibk', self.vols, self.grads, A,
                            self.grads, optimize=True).reshape(-1, 12, 12)
        rows = np.repeat(self.tet_dofs, 12, axis=1).ravel()
        cols = np.tile(self.tet_dofs, (1, 12)).ravel()
        vals = k_local.ravel()

        _, g_pressure, h_pressure = self._pressure_terms(u, hessian=True)
        g = g+g_pressure
        if h_pressure is not None:
            rows = np.concatenate([rows, np.repeat(self.tri_dofs, 9, axis=1).ravel()])
            cols = np.concatenate([cols, np.tile(self.tri_dofs, (1, 9)).ravel()])
            vals = np.concatenate([vals, h_pressure.ravel()])
        K = coo_matrix((vals, (rows, cols)), shape=(self.n_dofs, self.n_dofs)).tocsr()
        #Symmetric part; exact for both load modes up to roundoff
        K = 0.5*(K+K.T)
        if apply_bcs and self.bcs is not None:
            g = self.bcs.apply_to_vector(g)
            K = self.bcs.apply_to_matrix(K)
        return g, K.tocsr()

def total_potential(mesh_ref, u, fibers, mat, P, load_mode=FOLLOWER):
    """
    Stored energy minus pressure work at displacement u (Pa*cm^3)
    """
    return MechanicsProblem(mesh_ref, fibers, mat, P, load_mode).energy(u)

def residual_and_tangent(mesh_ref, u, fibers, mat, P, load_mode=FOLLOWER, bcs=None):
    """
    Gradient of the total potential (flat, 3N) and its sparse symmetric
    Hessian with fixed dofs eliminated (zero residual, identity rows)
    """
    problem = MechanicsProblem(mesh_ref, fibers, mat, P, load_mode, bcs)
    return problem.gradient_and_tangent(np.asarray(u, dtype=np.float64).ravel())

def _safe_energy(problem, u):
    try:
        return problem.energy(u)
    except (InvertedElement, StrainEnergyOverflow):
        return np.inf

def _newton(problem, u0, opts, tol_abs):
    """
    Damped Newton minimization at fixed pressure

    RETURNS
    -------
        u, iterations, final gradient norm, converged flag
    """
    u = u0.copy()
    energy = problem.energy(u)
    for it in range(opts.max_iters+1):
        g, K = problem.gradient_and_tangent(u)
        gnorm = np.abs(g).max() if g.size else 0.
        if gnorm <= tol_abs:
            return u, it, gnorm, True
        if it == opts.max_iters:
            break
        du = spsolve(K.tocsc(), -g)
        slope = np.dot(g, du)
        if not np.all(np.isfinite(du)) or slope >= 0.:
            log.debug('Newton direction is not a descent direction, using gradient step')
            du = -g/max(np.abs(K.diagonal()).max(), 1e-300)
            slope = np.dot(g, du)
        roundoff = 1e-12*max(abs(energy), problem.mat.C*problem.vols.sum())
        alpha, accepted = 1., False
        for _ in range(opts.line_search_steps):
            trial = u+alpha*du
            trial_energy = _safe_energy(problem, trial)
            if trial_energy <= energy+opts.armijo*alpha*slope:
                accepted = True
            elif np.isfinite(trial_energy) and abs(trial_energy-energy) <= roundoff:
                #Energy flat to roundoff: accept if the gradient still shrinks
                accepted = np.abs(problem.gradient(trial)).max() < gnorm
            if accepted:
                break
            alpha *= 0.5
        if not accepted:
            log.debug('Line search failed at iteration {} (|g|={:.3e})'.format(it, gnorm))
            return u, it, gnorm, False
        u, energy = trial, trial_energy
        log.debug('Newton iteration {}: |g|={:.3e} alpha={:.3g} energy={:.6e}'.format(
            it, gnorm, alpha, energy))
    return u, opts.max_iters, gnorm, False

def inflate(mesh_unloaded, fibers, mat, P_target, opts=None, bcs=None):
    """
    Load the unloaded geometry to cavity pressure P_target (Pa)

    RETURNS
    -------
        mesh_ED - TetMesh with nodes X + u
        report - SolveReport
    """
    opts = SolverOptions() if opts is None else opts
    if P_target < 0.:
        raise ConfigError('Target pressure must be nonnegative, got {}'.format(P_target))
    t0 = time.perf_counter()
    bcs = BoundaryConditions.from_mesh(mesh_unloaded) if bcs is None else bcs
    base_problem = MechanicsProblem(mesh_unloaded, fibers, mat, 0., opts.load_mode, bcs)
    tol_abs = opts.newton_tol*mat.C*base_problem.mean_element_volume
    u = np.zeros(base_problem.n_dofs)
    stats = {'iters': 0, 'steps': 0, 'gnorm': 0.}

    def advance(u, P_from, P_to, depth):
        problem = MechanicsProblem(mesh_unloaded, fibers, mat, P_to, opts.load_mode, bcs)
        u_new, iters, gnorm, ok = _newton(problem, u, opts, tol_abs)
        stats['iters'] += iters
        if ok:
            stats['steps'] += 1
            stats['gnorm'] = gnorm
            return u_new
        if depth >= opts.max_refinements:
            report = SolveReport(False, stats['iters'], gnorm, stats['steps'],
                                 time.perf_counter()-t0, tol_abs)
            raise NonConvergence(('Newton failed at {:.2f} Pa after {} bisections '
                                  '(|g|={:.3e}, tol {:.3e})').format(
                                      P_to, depth, gnorm, tol_abs), report=report)
        P_mid = 0.5*(P_from+P_to)
        log.debug('Bisecting pressure increment {:.2f} -> {:.2f} Pa'.format(P_from, P_to))
        u = advance(u, P_from, P_mid, depth+1)
        return advance(u, P_mid, P_to, depth+1)

    n_steps = opts.ramp_steps if P_target > 0. else 1
    levels = np.linspace(0., P_target, n_steps+1)
    for P_from, P_to in zip(levels[:-1], levels[1:]):
        u = advance(u, P_from, P_to, 0)
    mesh_ed = mesh_unloaded.with_nodes(mesh_unloaded.nodes+u.reshape(-1, 3))
    report = SolveReport(True, stats['iters'], stats['gnorm'], stats['steps'],
                         time.perf_counter()-t0, tol_abs)
    log.debug('Inflated to {:.1f} Pa: {}'.format(P_target, report))
    return mesh_ed, report

def unload_inverse(mesh_ed, fibers, mat, P, opts=None):
    """
    Backward displacement estimate of the unloaded geometry

    Iterates X_{k+1} = X_ED - u(X_k) until reloading X_k reproduces the
    loaded nodes within opts.inverse_tol (cm). The best iterate is always
    returned; report.converged tells whether the tolerance was met.
    """
    opts = SolverOptions() if opts is None else opts
    t0 = time.perf_counter()
    X_ed = mesh_ed.nodes
    if P == 0.:
        return mesh_ed, SolveReport(True, 0, 0., 0, time.perf_counter()-t0,
                                    mismatch=0., inverse_iters=1)
    X = X_ed.copy()
    best_mesh, best_mismatch, best_iter = mesh_ed, np.inf, 0
    newton_total, last = 0, None
    for k in range(1, opts.inverse_max_iters+1):
        try:
            mesh_k = mesh_ed.with_nodes(X)
            fib_k = (fiberfield.compute_fibers(mesh_k, fibers.theta_endo, fibers.theta_epi)
                     if opts.refresh_fibers else fibers)
            mesh_inf, last = inflate(mesh_k, fib_k, mat, P, opts)
        except (NonConvergence, InvertedElement, TopologyError) as err:
            log.warning('Backward displacement iteration {} failed: {}'.format(k, err))
            break
        newton_total += last.newton_iters
        mismatch = float(np.abs(mesh_inf.nodes-X_ed).max())
        log.debug('Backward displacement iteration {}: mismatch {:.3e} cm'.format(k, mismatch))
        if mismatch < best_mismatch:
            best_mesh, best_mismatch, best_iter = mesh_k, mismatch, k
        if mismatch <= opts.inverse_tol:
            break
        X = X-(mesh_inf.nodes-X_ed)
    converged = best_mismatch <= opts.inverse_tol
    report = SolveReport(converged, newton_total,
                         last.final_residual_norm if last is not None else np.inf,
                         last.pressure_steps if last is not None else 0,
                         time.perf_counter()-t0,
                         last.tol_abs if last is not None else 0.,
                         mismatch=best_mismatch, inverse_iters=best_iter)
    if not converged:
        log.warning('Backward displacement stopped at mismatch {:.3e} cm (tol {:.1e})'.format(
            best_mismatch, opts.inverse_tol))
    return best_mesh, report

def make_pair(mesh_ed_seed, fibers, mat, P, opts=None, params=None,
              case_id='case', shape_id='shape'):
    """
    Unloading-reloading pair: unload the seed geometry, then inflate the
    recovered reference. The seed itself is not kept.

    RETURNS
    -------
        CaseRecord with the meshes attached in memory
    """
    opts = SolverOptions() if opts is None else opts
    mesh_u, inverse_report = unload_inverse(mesh_ed_seed, fibers, mat, P, opts)
    if not inverse_report.converged:
        raise NonConvergence('Case {} did not unload (mismatch {:.3e} cm)'.format(
            case_id, inverse_report.mismatch), report=inverse_report)
    fib_u = (fiberfield.compute_fibers(mesh_u, fibers.theta_endo, fibers.theta_epi)
             if opts.refresh_fibers else fibers)
    mesh_ed, forward_report = inflate(mesh_u, fib_u, mat, P, opts)
    report = OrderedDict([('load_mode', opts.load_mode),
                          ('inverse_iters', inverse_report.inverse_iters),
                          ('inverse_mismatch_cm', inverse_report.mismatch),
                          ('newton_iters', forward_report.newton_iters),
                          ('final_residual_norm', forward_report.final_residual_norm)])
    if params is None:
        params = GlobalParams(P/MMHG_TO_PA, mat.C, fibers.theta_endo, fibers.theta_epi)
    return CaseRecord(case_id, shape_id, params, converged=True, report=report,
                      unloaded=mesh_u, ed=mesh_ed)
