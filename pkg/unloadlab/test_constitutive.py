import pytest
import numpy as np
from numpy import testing as nptest

import logbook

from unloadlab import constitutive
from unloadlab.errors import StrainEnergyOverflow, InvertedElement, ConfigError

@pytest.fixture()
def mat(request):
    return constitutive.MaterialParams(1000.)

@pytest.fixture()
def frame(request):
    rng = np.random.default_rng(3)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(Q) < 0.:
        Q[2] *= -1.
    return Q

def _random_sym(rng, scale):
    A = rng.normal(scale=scale, size=(3, 3))
    return 0.5*(A+A.T)

def test_zero_strain(mat):
    E = np.zeros((3, 3))
    assert constitutive.fung_energy(E, mat) == 0.
    nptest.assert_allclose(constitutive.pk2_stress(E, mat), 0.)

def test_energy_closed_form(mat):
    E = np.diag([0.1, 0., 0.])
    nptest.assert_allclose(constitutive.fung_exponent(E, mat), 29.9*0.01)
    nptest.assert_allclose(constitutive.fung_energy(E, mat), 500.*np.expm1(0.299))

def test_default_bulk_penalty(mat):
    assert mat.kappa_vol == 10000.
    assert mat.with_stiffness(200.).kappa_vol == 2000.

def test_invalid_material():
    with pytest.raises(ConfigError):
        constitutive.MaterialParams(0.)
    with pytest.raises(ConfigError):
        constitutive.MaterialParams(100., b_ff=-1.)

def test_stress_is_energy_derivative(mat):
    rng = np.random.default_rng(0)
    E = _random_sym(rng, 0.05)
    S = constitutive.pk2_stress(E, mat)
    h = 1e-6
    for _ in range(5):
        dE = _random_sym(rng, 1.)
        fd = (constitutive.fung_energy(E+h*dE, mat)
              -constitutive.fung_energy(E-h*dE, mat))/(2.*h)
        nptest.assert_allclose(np.sum(S*dE), fd, rtol=1e-6)

def test_tangent_is_stress_derivative(mat):
    rng = np.random.default_rng(1)
    E = _random_sym(rng, 0.05)
    D = constitutive.material_tangent(E, mat)
    h = 1e-6
    for _ in range(5):
        dE = _random_sym(rng, 1.)
        fd = (constitutive.pk2_stress(E+h*dE, mat)
              -constitutive.pk2_stress(E-h*dE, mat))/(2.*h)
        nptest.assert_allclose(np.einsum('ijkl,kl->ij', D, dE), fd, rtol=1e-5, atol=1e-6)

def test_tangent_symmetries(mat):
    E = _random_sym(np.random.default_rng(2), 0.05)
    D = constitutive.material_tangent(E, mat)
    nptest.assert_allclose(D, np.transpose(D, (2, 3, 0, 1)), atol=1e-9)
    nptest.assert_allclose(D, np.transpose(D, (1, 0, 2, 3)), atol=1e-9)

def test_rotations_are_inverse(frame):
    T = _random_sym(np.random.default_rng(4), 1.)
    back = constitutive.rotate_from_fiber(constitutive.rotate_to_fiber(T, frame), frame)
    nptest.assert_allclose(back, T, atol=1e-12)

def test_element_response_derivatives(mat, frame):
    rng = np.random.default_rng(5)
    F = (np.eye(3)+rng.normal(scale=0.08, size=(3, 3)))[None]
    R = frame[None]
    W, P, A = constitutive.element_response(F, R, mat)
    h = 1e-6
    for k in range(3):
        for l in range(3):
            dF = np.zeros((1, 3, 3))
            dF[0, k, l] = h
            Wp, Pp, _ = constitutive.element_response(F+dF, R, mat, tangent=False)
            Wm, Pm, _ = constitutive.element_response(F-dF, R, mat, tangent=False)
            nptest.assert_allclose(P[0, k, l], (Wp[0]-Wm[0])/(2.*h), rtol=1e-5, atol=1e-4)
            nptest.assert_allclose(A[0, :, :, k, l], (Pp[0]-Pm[0])/(2.*h),
                                   rtol=1e-5, atol=1e-2)

def test_undeformed_state_is_stress_free(mat, frame):
    W, P, _ = constitutive.element_response(np.eye(3)[None], frame[None], mat, tangent=False)
    nptest.assert_allclose(W, 0.)
    nptest.assert_allclose(P, 0., atol=1e-12)

def test_energy_overflow(mat):
    with logbook.TestHandler() as handler:
        with pytest.raises(StrainEnergyOverflow):
            constitutive.fung_energy(np.stack([np.diag([10., 0., 0.]), np.zeros((3, 3))]), mat)
    assert handler.has_warning('Fung exponent overflow in 1 of 2 elements')

def test_inverted_deformation(mat, frame):
    F = np.stack([np.eye(3), np.diag([1., 1., -1.])])
    with pytest.raises(InvertedElement) as excinfo:
        constitutive.element_response(F, np.stack([frame, frame]), mat)
    assert excinfo.value.elements == [1]

def test_green_strain_and_volume_penalty(frame):
    stretch = np.diag([1.1, 1., 1.])
    nptest.assert_allclose(constitutive.green_strain(stretch), np.diag([0.105, 0., 0.]),
                           atol=1e-15)
    #Rigid rotations carry neither strain nor volumetric energy
    nptest.assert_allclose(constitutive.green_strain(frame), 0., atol=1e-14)
    nptest.assert_allclose(constitutive.volumetric_energy(frame, 500.), 0., atol=1e-20)
    nptest.assert_allclose(constitutive.volumetric_energy(stretch, 500.), 0.5*500.*0.01)
    with pytest.raises(InvertedElement):
        constitutive.green_strain(np.diag([1., 1., -1.]))
