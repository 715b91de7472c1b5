"""
Fung-type transversely isotropic myocardium law plus a volumetric penalty.

All functions accept a single 3x3 tensor or a stack (...,3,3). Strains
passed to the Fung routines are expressed in the local (fiber, sheet,
sheet-normal) frame; rotate_to_fiber / rotate_from_fiber convert between
the global and fiber frames with R whose rows are (a_f, a_s, a_n).
"""
import numpy as np

from logbook import Logger
log = Logger('unloadlab.constitutive')

from unloadlab.errors import InvertedElement, StrainEnergyOverflow, ConfigError

#Exponent above which exp(Q) is treated as a non-physical state
MAX_EXPONENT = 700.

_I3 = np.eye(3)
_SYM_IDENTITY = 0.5*(np.einsum('ik,jl->ijkl', _I3, _I3)+np.einsum('il,jk->ijkl', _I3, _I3))

class MaterialParams(object):
    """
    C - stiffness scale (Pa)
    b_ff, b_xx, b_fx - exponent coefficients for the fiber, cross-fiber
        and fiber-shear strains
    kappa_vol - volumetric penalty (Pa), defaults to 10*C; 0 disables it
    """
    def __init__(self, C, b_ff=29.9, b_xx=13.3, b_fx=26.6, kappa_vol=None):
        self.C = float(C)
        self.b_ff = float(b_ff)
        self.b_xx = float(b_xx)
        self.b_fx = float(b_fx)
        self.kappa_vol = 10.*self.C if kappa_vol is None else float(kappa_vol)
        if not self.C > 0.:
            raise ConfigError('Stiffness C must be positive, got {}'.format(C))
        if min(self.b_ff, self.b_xx, self.b_fx) <= 0.:
            raise ConfigError('Exponent coefficients must be positive, got {}'.format(
                (self.b_ff, self.b_xx, self.b_fx)))
        if self.kappa_vol < 0.:
            raise ConfigError('kappa_vol must be nonnegative, got {}'.format(kappa_vol))

    @property
    def B(self):
        """Coefficient matrix so that Q = sum_ij B_ij E_ij^2 in the fiber frame"""
        return np.array([[self.b_ff, self.b_fx, self.b_fx],
                         [self.b_fx, self.b_xx, self.b_xx],
                         [self.b_fx, self.b_xx, self.b_xx]])

    def with_stiffness(self, C, kappa_vol=None):
        return MaterialParams(C, self.b_ff, self.b_xx, self.b_fx, kappa_vol=kappa_vol)

    def to_dict(self):
        return {'C': self.C, 'b_ff': self.b_ff, 'b_xx': self.b_xx,
                'b_fx': self.b_fx, 'kappa_vol': self.kappa_vol}

    @classmethod
    def from_dict(cls, d):
        return cls(d['C'], d['b_ff'], d['b_xx'], d['b_fx'], d['kappa_vol'])

    def __repr__(self):
        return 'MaterialParams(C={}, b_ff={}, b_xx={}, b_fx={}, kappa_vol={})'.format(
            self.C, self.b_ff, self.b_xx, self.b_fx, self.kappa_vol)

def _check_det(F):
    J = np.linalg.det(F)
    bad = np.flatnonzero(np.atleast_1d(J) <= 0.)
    if bad.size:
        raise InvertedElement('det F <= 0 in {} elements'.format(bad.size),
                              elements=bad.tolist())
    return J

def green_strain(F):
    """E = 1/2 (F^T F - I)"""
    F = np.asarray(F, dtype=np.float64)
    _check_det(F)
    return 0.5*(np.einsum('...ki,...kj->...ij', F, F)-_I3)

def rotate_to_fiber(T, R):
    """Express a global second-order tensor in the fiber frame: R T R^T"""
    return np.einsum('...ai,...ij,...bj->...ab', R, T, R)

def rotate_from_fiber(T, R):
    """R^T T R"""
    return np.einsum('...ai,...ab,...bj->...ij', R, T, R)

def rotate_tangent_from_fiber(D, R):
    """Push a fourth-order fiber-frame tensor to global axes, one index at a time"""
    D = np.einsum('...ai,...abcd->...ibcd', R, D)
    D = np.einsum('...bj,...ibcd->...ijcd', R, D)
    D = np.einsum('...ck,...ijcd->...ijkd', R, D)
    return np.einsum('...dl,...ijkd->...ijkl', R, D)

def fung_exponent(E_fib, mat):
    E_fib = np.asarray(E_fib, dtype=np.float64)
    Q = np.einsum('ij,...ij->...', mat.B, E_fib**2)
    worst = np.max(Q)
    if worst > MAX_EXPONENT:
        log.warning('Fung exponent overflow in {} of {} elements'.format(
            int(np.count_nonzero(Q > MAX_EXPONENT)), np.size(Q)))
        raise StrainEnergyOverflow('Fung exponent Q = {:.4g} exceeds {}'.format(
            worst, MAX_EXPONENT))
    return Q

def fung_energy(E_fib, mat):
    """W = C/2 (exp(Q) - 1) in Pa"""
    return 0.5*mat.C*np.expm1(fung_exponent(E_fib, mat))

def pk2_stress(E_fib, mat):
    """S = dW/dE = C exp(Q) (B o E), fiber frame"""
    E_fib = np.asarray(E_fib, dtype=np.float64)
    Q = fung_exponent(E_fib, mat)
    return mat.C*np.exp(Q)[..., None, None]*(mat.B*E_fib)

def material_tangent(E_fib, mat):
    """
    D = dS/dE restricted to symmetric strain increments (major and minor
    symmetric), fiber frame:
    D_ijkl = C exp(Q) [B_ij Isym_ijkl + 2 (B o E)_ij (B o E)_kl]
    """
    E_fib = np.asarray(E_fib, dtype=np.float64)
    Q = fung_exponent(E_fib, mat)
    BE = mat.B*E_fib
    scale = mat.C*np.exp(Q)[..., None, None, None, None]
    return scale*(mat.B[:, :, None, None]*_SYM_IDENTITY
                  +2.*np.einsum('...ij,...kl->...ijkl', BE, BE))

def volumetric_energy(F, kappa_vol):
    """1/2 kappa (J - 1)^2"""
    J = _check_det(np.asarray(F, dtype=np.float64))
    return 0.5*kappa_vol*(J-1.)**2

def element_response(F, R, mat, tangent=True):
    """
    Energy density, first Piola-Kirchhoff stress and its F-derivative for a
    stack of deformation gradients

    INPUTS
    ------
        F - (M,3,3) deformation gradients
        R - (M,3,3) fiber frames (rows a_f, a_s, a_n)
        mat - MaterialParams
        tangent - also return dP/dF

    RETURNS
    -------
        W - (M,) strain energy density (Pa)
        P - (M,3,3) first Piola-Kirchhoff stress
        A - (M,3,3,3,3) with A[e,i,J,k,L] = dP_iJ/dF_kL, or None
    """
    J = _check_det(F)
    E = 0.5*(np.einsum('eki,ekj->eij', F, F)-_I3)
    E_fib = rotate_to_fiber(E, R)
    W = fung_energy(E_fib, mat)
    S = rotate_from_fiber(pk2_stress(E_fib, mat), R)
    Finv = np.linalg.inv(F)
    kappa = mat.kappa_vol
    W = W+0.5*kappa*(J-1.)**2
    #J F^-T
    cof = J[:, None, None]*np.transpose(Finv, (0, 2, 1))
    P = np.einsum('eik,ekj->eij', F, S)+(kappa*(J-1.))[:, None, None]*cof
    if not tangent:
        return W, P, None

    D = rotate_tangent_from_fiber(material_tangent(E_fib, mat), R)
    A = np.einsum('ik,eJL->eiJkL', _I3, S)
    A += np.einsum('eiM,eMJNL,ekN->eiJkL', F, D, F)
    if kappa > 0.:
        c1 = (kappa*J*(2.*J-1.))[:, None, None, None, None]
        c2 = (kappa*J*(J-1.))[:, None, None, None, None]
        A += c1*np.einsum('eJi,eLk->eiJkL', Finv, Finv)
        A -= c2*np.einsum('eJk,eLi->eiJkL', Finv, Finv)
    return W, P, A
