"""P1 finite elements for div(sigma grad u) = 0 on tetrahedral meshes.

Assembly uses one-point (barycenter) quadrature for the coefficient, which
is exact for piecewise-constant scalars and first-order accurate for the
Lipschitz matrix factor.  Dirichlet solves go through a hand-rolled
Jacobi-preconditioned conjugate gradient; point-source (Green's function)
solves come in two flavours, a mollified delta load and a singularity
splitting against the analytic two-phase kernel.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import cutoff_profile
from .kernels import AnisoTwoPhaseKernel

_CHUNK = 300000  # elements per assembly chunk, keeps peak memory modest


class FemError(Exception):
    pass


class CGError(FemError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


class DiscreteField:
    """Nodal values over the vertices of a mesh."""

    def __init__(self, mesh, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(mesh.vertices),):
            raise FemError("field length does not match vertex count")
        self.mesh = mesh
        self.values = values

    def __call__(self, x):
        return self.mesh.interpolate(self.values, x)

    def save(self, path):
        with open(path, "w") as f:
            f.write("vertex_index,x1,x2,x3,value\n")
            for i, (v, val) in enumerate(zip(self.mesh.vertices, self.values)):
                f.write("%d,%.17g,%.17g,%.17g,%.17g\n" % (i, v[0], v[1], v[2], val))

    @classmethod
    def load(cls, path, mesh):
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        vals = np.zeros(len(mesh.vertices))
        vals[data[:, 0].astype(np.int64)] = data[:, 4]
        return cls(mesh, vals)


def _element_matrices(mesh, sig, idx):
    """Per-element stiffness V * G sigma G^T for elements idx."""
    grads = mesh.element_grads(idx)          # (m,4,3)
    vols = mesh.volumes()[idx]
    if (vols <= 0).any():
        raise FemError("degenerate element %d" % idx[int(np.argmax(vols <= 0))])
    sg = np.einsum("eab,eib->eia", sig, grads)
    ke = np.einsum("eia,eja->eij", grads, sg) * vols[:, None, None]
    return ke


def _accumulate(mesh, sigma_of_chunk):
    """Assemble sum over elements of the element matrices into CSR."""
    nv = len(mesh.vertices)
    ne = len(mesh.elements)
    K = sp.csr_matrix((nv, nv))
    for lo in range(0, ne, _CHUNK):
        idx = np.arange(lo, min(lo + _CHUNK, ne))
        sig = sigma_of_chunk(idx)
        ke = _element_matrices(mesh, sig, idx)
        conn = mesh.elements[idx]
        rows = np.repeat(conn, 4, axis=1).ravel()
        cols = np.tile(conn, (1, 4)).ravel()
        K = K + sp.csr_matrix((ke.ravel(), (rows, cols)), shape=(nv, nv))
    K.sum_duplicates()
    return K


class AssembledSystem:
    """Global P1 stiffness matrix plus the dof bookkeeping."""

    def __init__(self, mesh, K, cond=None):
        self.mesh = mesh
        self.K = K
        self.cond = cond
        self.fixed = mesh.boundary_vertex_mask()
        self.free = ~self.fixed

    def energy(self, u):
        """Dirichlet energy u^T K u of a nodal field."""
        v = u.values if isinstance(u, DiscreteField) else np.asarray(u)
        return float(v @ (self.K @ v))


def assemble(mesh, cond):
    """Stiffness matrix for sigma from a (possibly extended) conductivity."""
    bc = mesh.barycenters()
    lab = mesh.elem_label

    def sig(idx):
        return cond.sigma_at_labels(bc[idx], lab[idx])
    return AssembledSystem(mesh, _accumulate(mesh, sig), cond)


def assemble_components(mesh, A):
    """Per-subdomain stiffness pieces K_j with unit scalar, so that the
    matrix for any gamma is sum_j gamma_j K_j.  Keyed by element label."""
    bc = mesh.barycenters()
    comps = {}
    nv = len(mesh.vertices)
    for lab in np.unique(mesh.elem_label):
        sub = np.flatnonzero(mesh.elem_label == lab)
        K = sp.csr_matrix((nv, nv))
        for lo in range(0, len(sub), _CHUNK):
            idx = sub[lo:lo + _CHUNK]
            ke = _element_matrices(mesh, A(bc[idx]), idx)
            conn = mesh.elements[idx]
            rows = np.repeat(conn, 4, axis=1).ravel()
            cols = np.tile(conn, (1, 4)).ravel()
            K = K + sp.csr_matrix((ke.ravel(), (rows, cols)), shape=(nv, nv))
        K.sum_duplicates()
        comps[int(lab)] = K
    return comps


def combine_components(mesh, comps, cond):
    """K(gamma) = sum_j gamma_j K_j for the labels present in comps."""
    labels = sorted(comps)
    g = cond.gamma_at_labels(labels)
    K = sum(gj * comps[lab] for gj, lab in zip(g, labels))
    return AssembledSystem(mesh, K.tocsr(), cond)


def jacobi_pcg(A, b, rtol=1e-10, maxit=20000, x0=None):
    """Conjugate gradient with diagonal preconditioner.

    Returns (x, residual_history).  Raises CGError on stagnation or if the
    iteration budget runs out before the relative residual target.
    """
    d = A.diagonal()
    if (d <= 0).any():
        raise FemError("non-positive diagonal entry; system not SPD")
    dinv = 1.0 / d
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, [0.0]
    z = dinv * r
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    for it in range(maxit):
        if history[-1] <= rtol:
            return x, history
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        history.append(np.linalg.norm(r) / bnorm)
        if len(history) > 60 and history[-1] > 0.5 * history[-50]:
            raise CGError("conjugate gradient stagnated", history)
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise CGError("conjugate gradient did not converge in %d iterations" % maxit,
                  history)


def solve_dirichlet(sys, g, rtol=1e-10):
    """Solve with Dirichlet data g (nodal array or callable on coordinates)
    imposed on the whole boundary; interior by Jacobi-PCG."""
    mesh = sys.mesh
    if callable(g):
        gvals = np.asarray(g(mesh.vertices), dtype=float)
    else:
        gvals = np.asarray(g, dtype=float)
    if not np.isfinite(gvals[sys.fixed]).all():
        raise FemError("non-finite Dirichlet data")
    u = np.zeros(len(mesh.vertices))
    u[sys.fixed] = gvals[sys.fixed]
    free = np.flatnonzero(sys.free)
    fixed = np.flatnonzero(sys.fixed)
    Kff = sys.K[free][:, free].tocsr()
    rhs = -(sys.K[free][:, fixed] @ u[fixed])
    uf, hist = jacobi_pcg(Kff, rhs, rtol=rtol)
    u[free] = uf
    field = DiscreteField(mesh, u)
    field.diagnostics = {"iterations": len(hist) - 1,
                         "final_residual": hist[-1], "method": "jacobi-pcg"}
    return field


def grad_elements(mesh, values, idx=None):
    """Piecewise-constant gradient of a nodal field, per element."""
    if idx is None:
        idx = np.arange(len(mesh.elements))
    grads = mesh.element_grads(idx)
    return np.einsum("ei,eia->ea", values[mesh.elements[idx]], grads)


def _lumped_mass(mesh):
    m = np.zeros(len(mesh.vertices))
    w = np.repeat(mesh.volumes() / 4.0, 4)
    np.add.at(m, mesh.elements.ravel(), w)
    return m


class GreenApprox:
    """Discrete Green's function with source y: either a pure FEM field for
    a mollified delta, or analytic-kernel-plus-remainder for the split."""

    def __init__(self, mesh, cond, y, method, w, r_min, kernel=None,
                 anchor=None, gamma_low=None, rho=None):
        self.mesh = mesh
        self.cond = cond
        self.y = np.asarray(y, dtype=float)
        self.method = method
        self.w = w
        self.r_min = float(r_min)
        self.kernel = kernel
        self.anchor = anchor
        self.gamma_low = gamma_low
        self.rho = rho

    def _chi(self, x):
        r = np.linalg.norm(np.asarray(x, dtype=float) - self.y, axis=-1)
        return cutoff_profile(r / self.rho)

    def _chi_grad(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.y
        r = np.linalg.norm(d, axis=-1)
        eps = 1e-7
        dc = (cutoff_profile((r + eps) / self.rho)
              - cutoff_profile((r - eps) / self.rho)) / (2 * eps)
        return dc[..., None] * d / np.maximum(r, 1e-300)[..., None]

    def _singular(self, x):
        xi = np.asarray(x, dtype=float) - self.anchor
        eta = self.y - self.anchor
        val = np.array([self.kernel.eval(p, eta) for p in np.atleast_2d(xi)])
        val = val.reshape(np.shape(x)[:-1]) / self.gamma_low
        return val

    def value(self, x):
        """G at points x; rejects evaluation inside the guard radius."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(np.atleast_2d(x) - self.y, axis=-1)
        if (r < self.r_min * (1 - 1e-9)).any():
            raise FemError("evaluation inside guard radius %.3g" % self.r_min)
        out = np.array([self.mesh.interpolate(self.w.values, p)
                        for p in np.atleast_2d(x)])
        if self.method == "SPLIT":
            out = out + self._chi(np.atleast_2d(x)) * self._singular(np.atleast_2d(x))
        return out.reshape(np.shape(x)[:-1])

    def grad_at_elements(self, idx=None):
        """Gradient of G, constant per element (barycenter for the kernel)."""
        mesh = self.mesh
        if idx is None:
            idx = np.arange(len(mesh.elements))
        g = grad_elements(mesh, self.w.values, idx)
        if self.method == "SPLIT":
            bc = mesh.barycenters()[idx]
            chi = self._chi(bc)
            live = chi > 0
            if live.any():
                pts = bc[live]
                xi = pts - self.anchor
                eta = self.y - self.anchor
                side = np.where(xi[:, 2] > 0, 1, -1)
                kval = np.array([self.kernel.eval(p, eta) for p in xi])
                kgrad = np.array([self.kernel.grad(p, eta, side=s)
                                  for p, s in zip(xi, side)])
                gc = self._chi_grad(pts)
                g[live] += (chi[live, None] * kgrad + kval[:, None] * gc) / self.gamma_low
        return g


def solve_green(mesh, cond, y, method="MOLLIFIED", interface_z=None, rtol=1e-10,
                r1=1.0, sys=None):
    """Green's function approximation with homogeneous Dirichlet data.

    MOLLIFIED: normalized bump of radius 2h as the load.
    SPLIT: G = chi * H / gamma_low + w with H the two-phase kernel for the
    flat interface at z = interface_z (the coefficient matrix frozen at the
    anchor); w picks up the commutator terms on the cutoff annulus.  The
    right-hand side assumes sigma agrees with the frozen two-phase
    coefficient on the cutoff ball B_{2 rho}(y); with a non-constant matrix
    field there is a neglected commutator of size O(A_bar * rho).  r1 is
    the radius of the patch on which the interface is flat (the whole box
    for globally flat test interfaces).
    """
    y = np.asarray(y, dtype=float)
    bdist = min(y.min(), (1 - y).min())
    if bdist < 2 * mesh.h:
        raise FemError("source point within 2h of the boundary")
    if sys is None:
        sys = assemble(mesh, cond)
    free = np.flatnonzero(sys.free)
    Kff = sys.K[free][:, free].tocsr()

    if method == "MOLLIFIED":
        rad = 2 * mesh.h
        r = np.linalg.norm(mesh.vertices - y, axis=1)
        bump = np.maximum(1 - (r / rad) ** 2, 0.0) ** 2
        load = bump * _lumped_mass(mesh)
        tot = load.sum()
        if tot <= 0:
            raise FemError("mollified source missed the mesh")
        load /= tot
        wf, hist = jacobi_pcg(Kff, load[free], rtol=rtol)
        w = np.zeros(len(mesh.vertices))
        w[free] = wf
        ga = GreenApprox(mesh, cond, y, "MOLLIFIED", DiscreteField(mesh, w),
                         r_min=2 * rad)
        ga.diagnostics = {"iterations": len(hist) - 1,
                          "final_residual": hist[-1], "method": "jacobi-pcg"}
        return ga

    if method != "SPLIT":
        raise FemError("unknown Green solve method %r" % method)
    if interface_z is None:
        raise FemError("SPLIT needs the flat interface height; "
                       "use MOLLIFIED for curved interfaces")

    anchor = np.array([y[0], y[1], interface_z])
    below = anchor - np.array([0, 0, 1e-9])
    above = anchor + np.array([0, 0, 1e-9])
    g_low = cond.gamma_at_labels(cond.locate(below))
    g_up = cond.gamma_at_labels(cond.locate(above))
    A0 = cond.matrix_at(anchor)
    kernel = AnisoTwoPhaseKernel(A0, float(g_up / g_low))

    rho = min(r1 / 4.0, bdist / 3.0)
    if rho < 4 * mesh.h:
        raise FemError("cutoff radius %.3g under-resolved at h=%.3g"
                       % (rho, mesh.h))

    ga = GreenApprox(mesh, cond, y, "SPLIT", DiscreteField(mesh, np.zeros(len(mesh.vertices))),
                     r_min=2 * mesh.h, kernel=kernel, anchor=anchor,
                     gamma_low=float(g_low), rho=rho)

    # load supported on the cutoff annulus rho < |x-y| < 2 rho:
    #   rhs(phi) = int (grad chi . sigma grad G0) phi - int G0 sigma grad chi . grad phi
    bc = mesh.barycenters()
    rb = np.linalg.norm(bc - y, axis=1)
    ann = np.flatnonzero((rb > 0.8 * rho) & (rb < 2.2 * rho))
    load = np.zeros(len(mesh.vertices))
    sig = cond.sigma_at_labels(bc[ann], mesh.elem_label[ann])
    eta = y - anchor
    xi = bc[ann] - anchor
    side = np.where(xi[:, 2] > 0, 1, -1)
    kval = np.array([kernel.eval(p, eta) for p in xi]) / float(g_low)
    kgrad = np.array([kernel.grad(p, eta, side=s)
                      for p, s in zip(xi, side)]) / float(g_low)
    gchi = ga._chi_grad(bc[ann])
    vols = mesh.volumes()[ann]
    # first term: one-point quadrature, spread evenly over the 4 vertices
    t1 = np.einsum("ea,eab,eb->e", gchi, sig, kgrad) * vols
    np.add.at(load, mesh.elements[ann].ravel(), np.repeat(t1 / 4.0, 4))
    # second term pairs against test gradients
    sgc = np.einsum("eab,eb->ea", sig, gchi)
    grads = mesh.element_grads(ann)
    t2 = -np.einsum("e,ea,eia->ei", kval * vols, sgc, grads)
    np.add.at(load, mesh.elements[ann].ravel(), t2.ravel())

    wf, hist = jacobi_pcg(Kff, load[free], rtol=rtol)
    w = np.zeros(len(mesh.vertices))
    w[free] = wf
    ga.w = DiscreteField(mesh, w)
    ga.diagnostics = {"iterations": len(hist) - 1,
                      "final_residual": hist[-1], "method": "jacobi-pcg"}
    return ga


def annulus_energy(green, r):
    """Quadrature of |grad G|^2 over elements outside the ball B_r(y)."""
    mesh = green.mesh
    if r < 4 * mesh.h:
        raise FemError("annulus radius %.3g below the 4h resolution guard" % r)
    rb = np.linalg.norm(mesh.barycenters() - green.y, axis=1)
    out = np.flatnonzero(rb > r)
    g = green.grad_at_elements(out)
    return float(np.sum(mesh.volumes()[out] * np.einsum("ea,ea->e", g, g)))


def annulus_energy_refined(green, r):
    """Annulus energy for an isotropic SPLIT solve, with the singular part
    integrated radially (exact up to 1-D quadrature) so the guard radius
    can drop to 2h.  Requires k=1 and a scalar frozen coefficient, where
    the kernel reduces to a multiple of the Laplace kernel.
    """
    mesh = green.mesh
    if green.method != "SPLIT":
        raise FemError("refined annulus energy needs a SPLIT solve")
    k = green.kernel
    A0 = k.basis.A0
    a = A0[0, 0]
    if abs(k.k - 1) > 1e-14 or np.abs(A0 - a * np.eye(3)).max() > 1e-12 * a:
        raise FemError("refined annulus energy needs an isotropic kernel")
    if r < 2 * mesh.h:
        raise FemError("annulus radius %.3g below the 2h guard" % r)
    rho = green.rho
    amp = 1.0 / (a * green.gamma_low)          # chi*Gamma*amp is the singular part

    def fprime(s):
        eps = 1e-7
        lo = (cutoff_profile((s - eps) / rho) / (s - eps))
        hi = (cutoff_profile((s + eps) / rho) / (s + eps))
        return amp * (hi - lo) / (2 * eps) / (4 * np.pi)
    s = np.linspace(r, 2 * rho, 4001)
    rad = np.trapezoid(fprime(s) ** 2 * 4 * np.pi * s ** 2, s)

    bc = mesh.barycenters()
    rb = np.linalg.norm(bc - green.y, axis=1)
    out = np.flatnonzero(rb > r)
    gw = grad_elements(mesh, green.w.values, out)
    vols = mesh.volumes()[out]
    e_w = np.sum(vols * np.einsum("ea,ea->e", gw, gw))
    live = rb[out] < 2 * rho
    d = bc[out[live]] - green.y
    sn = rb[out[live]]
    gs = fprime(sn)[:, None] * d / sn[:, None]
    cross = 2 * np.sum(vols[live] * np.einsum("ea,ea->e", gs, gw[live]))
    return float(rad + cross + e_w)
