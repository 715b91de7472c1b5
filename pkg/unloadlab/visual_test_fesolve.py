import sys

import numpy as np
import matplotlib.pyplot as pp

from logbook import StreamHandler, NOTICE

from unloadlab import datagen, meshcore, fesolve
from unloadlab import fibers as fiberfield
from unloadlab.records import MMHG_TO_PA, PRESSURES_MMHG, STIFFNESSES_PA
from unloadlab.errors import NonConvergence

ROUND_TRIP_TOL_CM = 1e-4

def print_table(columns, rows, title=None):
    """Fixed width text table of dict rows"""
    if title:
        print(title)
    cells = [[('{:.4g}'.format(row[c]) if isinstance(row[c], float) else str(row[c]))
              for c in columns] for row in rows]
    widths = [max([len(c)]+[len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    print('  '.join(c.rjust(w) for c, w in zip(columns, widths)))
    for r in cells:
        print('  '.join(v.rjust(w) for v, w in zip(r, widths)))

def draw_pressure_volume(spec, stiffnesses=(100., 300.), pressures_mmHg=(0., 2., 4., 8., 12.),
                         resolution=None):
    """
    Cavity volume against cavity pressure for a few stiffness values,
    each point a separate inflation from the same unloaded shell
    """
    mesh = datagen.build_shell_mesh(spec, resolution)
    field = fiberfield.compute_fibers(mesh, 60., -60.)
    opts = fesolve.SolverOptions()

    f = pp.figure(figsize=(6, 5))
    a = f.add_subplot(111)
    for C in stiffnesses:
        volumes, reached = [], []
        for P in pressures_mmHg:
            try:
                mesh_ed, report = fesolve.inflate(mesh, field, opts.material(C), P*MMHG_TO_PA,
                                                  opts)
            except NonConvergence:
                break
            volumes.append(meshcore.cavity_volume(mesh_ed))
            reached.append(P)
        a.plot(volumes, reached, 'o-', label='C = {:.0f} Pa'.format(C))
    a.set_xlabel('Cavity volume (mL)')
    a.set_ylabel('Pressure (mmHg)')
    a.legend(loc='upper left')
    f.suptitle('Passive inflation of {}'.format(spec.shape_id), fontweight='bold')
    return f

def draw_fiber_angles(spec, theta_endo=60., theta_epi=-60., resolution=None):
    """
    Apparent helix angle of each element fiber (elevation above the
    horizontal plane) against the element's mean transmural coordinate
    """
    mesh = datagen.build_shell_mesh(spec, resolution)
    field = fiberfield.compute_fibers(mesh, theta_endo, theta_epi)
    xi = field.phi[mesh.tets].mean(axis=1)
    apparent = np.degrees(np.arcsin(np.clip(np.abs(field.fiber[:, 2]), 0., 1.)))
    apparent *= np.sign(fiberfield.helix_angles(xi, theta_endo, theta_epi))

    f = pp.figure(figsize=(6, 5))
    a = f.add_subplot(111)
    a.plot(xi, apparent, 'k.', markersize=2, label='elements')
    line = np.linspace(0., 1., 20)
    a.plot(line, fiberfield.helix_angles(line, theta_endo, theta_epi), 'r-', label='prescribed')
    a.set_xlabel('Transmural coordinate (endo 0, epi 1)')
    a.set_ylabel('Helix angle (deg)')
    a.legend(loc='upper right')
    f.suptitle('Fiber architecture, orthonormality error {:.1e}'.format(
        field.orthonormality_error()), fontweight='bold')
    return f

def draw_round_trip(spec, C=200., P_mmHg=8., resolution=None):
    """Node positions of the seed, its unloaded estimate and the reinflated ED"""
    seed = datagen.build_shell_mesh(spec, resolution)
    field = fiberfield.compute_fibers(seed, 60., -60.)
    opts = fesolve.SolverOptions()
    record = fesolve.make_pair(seed, field, opts.material(C), P_mmHg*MMHG_TO_PA, opts)

    f = pp.figure(figsize=(6, 7))
    a = f.add_subplot(111)
    for mesh, style, label in [(seed, 'k.', 'seed ED'), (record.unloaded, 'b.', 'unloaded'),
                               (record.ed, 'r+', 'reinflated ED')]:
        a.plot(mesh.nodes[:, 0], mesh.nodes[:, 2], style, markersize=3, label=label)
    a.set_aspect('equal')
    a.set_xlabel('x (cm)')
    a.set_ylabel('z (cm)')
    a.legend(loc='lower right')
    f.suptitle('Unload and reinflate at {:.0f} mmHg, C = {:.0f} Pa'.format(P_mmHg, C),
               fontweight='bold')
    return f


def round_trip_sweep(n_shapes=4, seed=0, grid='mini', resolution=None,
                     tol_cm=ROUND_TRIP_TOL_CM):
    """
    Unload each seed shell of a shape by grid sweep, inflate the result
    again and compare with the seed node by node. Fibers are held fixed
    between the two solves so the comparison isolates the solvers.

    RETURNS
    -------
        rows - list of dicts, one per case
    """
    opts = fesolve.SolverOptions(refresh_fibers=False)
    rows = []
    for spec in datagen.sample_shapes(n_shapes, seed=seed):
        seed_mesh = datagen.build_shell_mesh(spec, resolution)
        for params in datagen.case_grid(grid):
            field = fiberfield.compute_fibers(seed_mesh, params.theta_endo_deg,
                                              params.theta_epi_deg)
            row = {'shape': spec.shape_id, 'P_mmHg': params.P_mmHg, 'C_Pa': params.C_Pa,
                   'nodes': seed_mesh.n_nodes, 'converged': True, 'max_err_cm': float('nan')}
            try:
                record = fesolve.make_pair(seed_mesh, field, opts.material(params.C_Pa),
                                           params.P_Pa, opts, params=params)
            except NonConvergence:
                row['converged'] = False
            else:
                row['max_err_cm'] = float(np.abs(record.ed.nodes-seed_mesh.nodes).max())
            row['within_tol'] = row['converged'] and row['max_err_cm'] <= tol_cm
            rows.append(row)
    converged = [r for r in rows if r['converged']]
    passed = sum(r['within_tol'] for r in converged)
    print_table(['shape', 'P_mmHg', 'C_Pa', 'nodes', 'converged', 'max_err_cm', 'within_tol'],
                rows, title='Round trip, inflate(unload(ED)) against ED')
    print('{} of {} convergent cases within {:g} cm ({:.1f}%, need 95%)'.format(
        passed, len(converged), tol_cm, 100.*passed/max(len(converged), 1)))
    return rows

def draw_round_trip_errors(rows, tol_cm=ROUND_TRIP_TOL_CM):
    """Node-wise max round trip error of every convergent case"""
    errors = [r['max_err_cm'] for r in rows if r['converged']]
    f = pp.figure(figsize=(7, 4))
    a = f.add_subplot(111)
    a.semilogy(np.arange(len(errors)), errors, 'ko')
    a.axhline(tol_cm, color='r', linestyle='--', label='{:g} cm'.format(tol_cm))
    a.set_xlabel('Case')
    a.set_ylabel('Max node error (cm)')
    a.legend(loc='upper right')
    f.suptitle('Unload and reinflate error, {} cases'.format(len(errors)), fontweight='bold')
    return f

def _violations(values, increasing):
    steps = np.diff(values)
    return int(np.count_nonzero(steps < 0. if increasing else steps > 0.))

def monotonicity_sweep(n_shapes=4, seed=0, resolution=None, C_Pa=200., P_mmHg=8.):
    """
    Cavity volume across the pressure grid (at fixed C) and displacement
    norm across the stiffness grid (at fixed P) for each shape. Points
    whose inflation does not converge are dropped from the sequence.

    RETURNS
    -------
        rows - list of dicts, one per shape
    """
    opts = fesolve.SolverOptions()
    rows = []
    for spec in datagen.sample_shapes(n_shapes, seed=seed):
        mesh = datagen.build_shell_mesh(spec, resolution)
        field = fiberfield.compute_fibers(mesh, 60., -60.)
        volumes, norms = [meshcore.cavity_volume(mesh)], []
        for P in PRESSURES_MMHG:
            try:
                mesh_ed, _ = fesolve.inflate(mesh, field, opts.material(C_Pa), P*MMHG_TO_PA, opts)
            except NonConvergence:
                continue
            volumes.append(meshcore.cavity_volume(mesh_ed))
        for C in STIFFNESSES_PA:
            try:
                mesh_ed, _ = fesolve.inflate(mesh, field, opts.material(C), P_mmHg*MMHG_TO_PA,
                                             opts)
            except NonConvergence:
                continue
            norms.append(np.linalg.norm(mesh_ed.nodes-mesh.nodes))
        rows.append({'shape': spec.shape_id,
                     'P_points': len(volumes)-1, 'volume_violations': _violations(volumes, True),
                     'C_points': len(norms), 'norm_violations': _violations(norms, False)})
    print_table(['shape', 'P_points', 'volume_violations', 'C_points', 'norm_violations'], rows,
                title='Cavity volume vs pressure (C = {:g} Pa), displacement norm vs C '
                      '(P = {:g} mmHg)'.format(C_Pa, P_mmHg))
    total = sum(r['volume_violations']+r['norm_violations'] for r in rows)
    print('{} monotonicity violations (need 0)'.format(total))
    return rows


if __name__=='__main__':
    StreamHandler(sys.stdout, level=NOTICE).push_application()

    spec = datagen.sample_shapes(1, seed=0)[0]
    coarse = datagen.MeshResolution.preset('coarse')

    f1 = draw_pressure_volume(spec, resolution=coarse)
    f1.savefig('unloadlab_pressure_volume_{}.png'.format(spec.shape_id))

    f2 = draw_fiber_angles(spec)
    f2.savefig('unloadlab_fiber_angles_{}.png'.format(spec.shape_id))

    f3 = draw_round_trip(spec, resolution=coarse)
    f3.savefig('unloadlab_round_trip_{}.png'.format(spec.shape_id))

    #Default resolution meshes (600 to 1000 nodes) for the sweeps
    rows = round_trip_sweep()
    f4 = draw_round_trip_errors(rows)
    f4.savefig('unloadlab_round_trip_errors.png')

    monotonicity_sweep()
