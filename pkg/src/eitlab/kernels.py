"""Closed-form fundamental solutions for the flat-interface two-phase
conductivity operator, isotropic and conformal-anisotropic, in dimension
n >= 3, together with the linear change of basis that reduces the
anisotropic case to the isotropic one.

Sign convention at the interface: a vanishing last coordinate is treated as
belonging to the closed lower half-space.  The kernels are continuous across
the plane, so the choice does not affect values.
"""

import math

import numpy as np


class KernelError(Exception):
    pass


class SingularityError(KernelError):
    pass


def unit_sphere_area(n):
    """Surface area of the unit sphere in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def mirror(x):
    """Reflect across the hyperplane x_n = 0."""
    x = np.array(x, dtype=float)
    x[..., -1] = -x[..., -1]
    return x


def _halfspace_sign(t):
    """+1 strictly above the interface, -1 on or below."""
    return np.where(np.asarray(t) > 0.0, 1.0, -1.0)


class LaplaceKernel:
    """Fundamental solution of the Laplacian, |x-y|^{2-n} / ((n-2) omega_n)."""

    def __init__(self, n=3):
        if n < 3:
            raise KernelError("kernel formulas require n >= 3")
        self.n = int(n)
        self.omega_n = unit_sphere_area(n)

    def eval(self, x, y):
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        r = np.linalg.norm(d, axis=-1)
        if np.any(r == 0.0):
            raise SingularityError("evaluation at the source point")
        return r ** (2.0 - self.n) / ((self.n - 2.0) * self.omega_n)

    def grad(self, x, y):
        """Gradient in x; points from x toward y, magnitude |x-y|^{1-n}/omega_n."""
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        r = np.linalg.norm(d, axis=-1)
        if np.any(r == 0.0):
            raise SingularityError("evaluation at the source point")
        return -d * (r ** (-self.n) / self.omega_n)[..., None]


class TwoPhaseKernel:
    """Fundamental solution of div((1 + (k-1) chi_{x_n>0}) grad .) built from
    the Laplace kernel and its mirror image, with contrast k across x_n = 0.
    """

    def __init__(self, k, n=3):
        if k <= 0:
            raise KernelError("contrast must be positive")
        self.k = float(k)
        self.n = int(n)
        self.laplace = LaplaceKernel(n)

    def _coeffs(self, sx, se):
        k = self.k
        up = (sx > 0) & (se > 0)
        down = (sx < 0) & (se < 0)
        c_direct = np.where(up, 1.0 / k, np.where(down, 1.0, 2.0 / (k + 1.0)))
        c_mirror = np.where(up, (k - 1.0) / (k * (k + 1.0)),
                            np.where(down, (1.0 - k) / (k + 1.0), 0.0))
        return c_direct, c_mirror

    def eval(self, xi, eta):
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        sx = _halfspace_sign(xi[..., -1])
        se = _halfspace_sign(eta[..., -1])
        cd, cm = self._coeffs(sx, se)
        val = cd * self.laplace.eval(xi, eta)
        has_mirror = cm != 0.0
        if np.any(has_mirror):
            val = val + np.where(has_mirror, cm * self.laplace.eval(xi, mirror(eta)), 0.0)
        return val

    def grad(self, xi, eta, side=None):
        """Branchwise gradient in xi.  On the interface (xi_n == 0) the
        one-sided value must be requested via side=+1 or side=-1."""
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        on_plane = np.asarray(xi[..., -1]) == 0.0
        if side is None:
            if np.any(on_plane):
                raise KernelError("gradient on the interface requires a side flag")
            sx = _halfspace_sign(xi[..., -1])
        else:
            sx = np.where(on_plane, float(side), _halfspace_sign(xi[..., -1]))
        se = _halfspace_sign(eta[..., -1])
        cd, cm = self._coeffs(sx, se)
        g = cd[..., None] * self.laplace.grad(xi, eta)
        has_mirror = cm != 0.0
        if np.any(has_mirror):
            g = g + np.where(has_mirror[..., None],
                             cm[..., None] * self.laplace.grad(xi, mirror(eta)), 0.0)
        return g


class ChangeOfBasis:
    """Linear map L = R sqrt(A0^{-1}) taking the anisotropic constant-matrix
    half-space operator to the isotropic one; R is the planar rotation moving
    sqrt(A0) e_n / |sqrt(A0) e_n| to e_n and fixing its orthocomplement.
    """

    def __init__(self, A0):
        A0 = np.asarray(A0, dtype=float)
        n = A0.shape[0]
        if not np.allclose(A0, A0.T, atol=1e-12 * max(1.0, np.abs(A0).max())):
            raise KernelError("matrix is not symmetric")
        w, Q = np.linalg.eigh(A0)
        if w.min() <= 0:
            raise KernelError("matrix is not positive definite; eigenvalue %.3g" % w.min())
        self.A0 = A0
        self.n = n
        sqrtA0 = (Q * np.sqrt(w)) @ Q.T
        inv_sqrt = (Q / np.sqrt(w)) @ Q.T
        v = sqrtA0[:, -1]
        self.vnorm = float(np.linalg.norm(v))
        u = v / self.vnorm
        en = np.zeros(n)
        en[-1] = 1.0
        c = float(u @ en)
        b = u - c * en
        bn = np.linalg.norm(b)
        if bn < 1e-14:
            R = np.eye(n)
        else:
            b = b / bn
            s = bn  # sin of the rotation angle
            R = (np.eye(n)
                 + (c - 1.0) * (np.outer(en, en) + np.outer(b, b))
                 + s * (np.outer(en, b) - np.outer(b, en)))
        self.R = R
        self.L = R @ inv_sqrt
        self.Lstar = self.L.copy()
        self.Lstar[-1, :] *= -1.0
        self.detfactor = float(np.sqrt(np.linalg.det(np.linalg.inv(A0))))


def build_change_of_basis(A0):
    return ChangeOfBasis(A0)


class JMatrix:
    """Principal square root of A0^{-1}."""

    def __init__(self, A0):
        A0 = np.asarray(A0, dtype=float)
        if not np.allclose(A0, A0.T, atol=1e-12 * max(1.0, np.abs(A0).max())):
            raise KernelError("matrix is not symmetric")
        w, Q = np.linalg.eigh(A0)
        if w.min() <= 0:
            raise KernelError("matrix is not positive definite; eigenvalue %.3g" % w.min())
        self.J = (Q / np.sqrt(w)) @ Q.T


def j_matrix(A0):
    return JMatrix(A0)


class AnisoTwoPhaseKernel:
    """Fundamental solution of div((1 + (k-1) chi_{x_n>0}) A0 grad .) for a
    constant SPD matrix A0, expressed through the isotropic kernel in the
    L-transformed frame with the sqrt(det A0^{-1}) volume factor.
    """

    def __init__(self, A0, k, n=None):
        A0 = np.asarray(A0, dtype=float)
        self.basis = ChangeOfBasis(A0)
        self.k = float(k)
        self.n = self.basis.n if n is None else int(n)
        if self.n != self.basis.n:
            raise KernelError("dimension mismatch with A0")
        self.laplace = LaplaceKernel(self.n)
        self._iso = TwoPhaseKernel(k, self.n)

    def eval(self, xi, eta):
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        L, Ls, det = self.basis.L, self.basis.Lstar, self.basis.detfactor
        sx = _halfspace_sign(xi[..., -1])
        se = _halfspace_sign(eta[..., -1])
        cd, cm = self._iso._coeffs(sx, se)
        val = cd * self.laplace.eval(xi @ L.T, eta @ L.T)
        has_mirror = cm != 0.0
        if np.any(has_mirror):
            val = val + np.where(has_mirror,
                                 cm * self.laplace.eval(xi @ L.T, eta @ Ls.T), 0.0)
        return det * val

    def eval_crossing(self, xi, eta):
        """Closed form for sources and targets on opposite sides:
        sqrt(det A0^{-1}) * (2/(k+1)) * <A0^{-1} d, d>^{(2-n)/2} / ((n-2) omega_n).
        """
        d = np.asarray(xi, dtype=float) - np.asarray(eta, dtype=float)
        Ainv = np.linalg.inv(self.basis.A0)
        q = np.einsum("...i,ij,...j->...", d, Ainv, d)
        return (self.basis.detfactor * (2.0 / (self.k + 1.0))
                * q ** ((2.0 - self.n) / 2.0) / ((self.n - 2.0) * self.laplace.omega_n))

    def grad(self, xi, eta, side=None):
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        L, Ls, det = self.basis.L, self.basis.Lstar, self.basis.detfactor
        on_plane = np.asarray(xi[..., -1]) == 0.0
        if side is None:
            if np.any(on_plane):
                raise KernelError("gradient on the interface requires a side flag")
            sx = _halfspace_sign(xi[..., -1])
        else:
            sx = np.where(on_plane, float(side), _halfspace_sign(xi[..., -1]))
        se = _halfspace_sign(eta[..., -1])
        cd, cm = self._iso._coeffs(sx, se)
        g = cd[..., None] * (self.laplace.grad(xi @ L.T, eta @ L.T) @ L)
        has_mirror = cm != 0.0
        if np.any(has_mirror):
            g = g + np.where(has_mirror[..., None],
                             cm[..., None] * (self.laplace.grad(xi @ L.T, eta @ Ls.T) @ L),
                             0.0)
        return det * g

    def conductivity(self, x):
        """Two-phase coefficient (1 + (k-1) chi_{x_n>0}) A0 at points x."""
        x = np.asarray(x, dtype=float)
        up = (x[..., -1] > 0.0).astype(float)
        scale = 1.0 + (self.k - 1.0) * up
        return scale[..., None, None] * self.basis.A0


# ---------------------------------------------------------------------------
# weak-delta quadrature oracle
# ---------------------------------------------------------------------------

def _bump(s):
    """C^2 bump (1 - s^2)^3 on [0, 1)."""
    return np.where(s < 1.0, (1.0 - np.minimum(s, 1.0) ** 2) ** 3, 0.0)


def _bump_dr(s):
    return np.where(s < 1.0, -6.0 * np.minimum(s, 1.0) * (1.0 - np.minimum(s, 1.0) ** 2) ** 2, 0.0)


_GAUSS2 = np.array([-1.0, 1.0]) / math.sqrt(3.0)


def weak_delta_pairing(kernel, eta, center, radius, base_div=12, min_level=7):
    """Quadrature of sigma grad H(., eta) . grad psi over the support of a
    smooth bump psi; equals psi(eta) when H is a fundamental solution.

    Cells are axis-aligned, kept conforming to the interface plane x_n = 0,
    and refined geometrically toward the source.  Returns (pairing, psi(eta)).
    n = 3 only.
    """
    eta = np.asarray(eta, dtype=float)
    center = np.asarray(center, dtype=float)

    def psi(x):
        s = np.linalg.norm(x - center, axis=-1) / radius
        return _bump(s)

    def grad_psi(x):
        d = x - center
        r = np.linalg.norm(d, axis=-1)
        s = r / radius
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(r > 0, _bump_dr(s) / (radius * np.maximum(r, 1e-300)), 0.0)
        return d * scale[..., None]

    # base grid centered at eta so the source sits on cell corners, extended
    # to cover the bump support; cell size divides |eta_n| so the interface
    # plane is grid-aligned whenever eta_n is a cell-size multiple
    half = radius + np.abs(eta - center).max()
    cs = 2.0 * half / base_div
    if abs(eta[-1]) > 1e-14:
        # snap the cell size so the interface plane stays grid-aligned
        m = max(1, round(abs(eta[-1]) / cs))
        cs = abs(eta[-1]) / m
        half = cs * base_div / 2.0
        while half < radius + np.abs(eta - center).max():
            base_div += 2
            half = cs * base_div / 2.0
    lo = eta - half

    cells = []
    idx = np.stack(np.meshgrid(*[np.arange(base_div)] * 3, indexing="ij"), axis=-1)
    corners = lo + idx.reshape(-1, 3) * cs
    stack = [(corners, cs)]
    leaves = []
    for level in range(min_level + 1):
        corners, size = stack.pop()
        c = corners + 0.5 * size
        d = np.linalg.norm(c - eta, axis=1)
        near = d < 1.8 * size * math.sqrt(3.0)
        if level == min_level:
            # drop the innermost cells touching the source; their exact
            # contribution vanishes to leading order by odd symmetry
            keep = d > 0.9 * size * math.sqrt(3.0)
            leaves.append((corners[keep], size))
            break
        leaves.append((corners[~near], size))
        sub = corners[near]
        if len(sub) == 0:
            break
        off = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), axis=-1).reshape(-1, 3)
        sub = (sub[:, None, :] + off[None, :, :] * (size / 2.0)).reshape(-1, 3)
        stack.append((sub, size / 2.0))

    total = 0.0
    for corners, size in leaves:
        if len(corners) == 0:
            continue
        pts = []
        w = (size / 2.0) ** 3
        for gx in _GAUSS2:
            for gy in _GAUSS2:
                for gz in _GAUSS2:
                    pts.append(corners + (0.5 + 0.5 * np.array([gx, gy, gz])) * size)
        for p in pts:
            sig = kernel.conductivity(p)
            gH = kernel.grad(p, eta)
            gP = grad_psi(p)
            total += w * np.einsum("eij,ej,ei->", sig, gH, gP)
    return float(total), float(psi(eta))
