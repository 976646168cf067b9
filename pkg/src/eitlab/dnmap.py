"""Discrete local Dirichlet-to-Neumann maps on the accessible boundary
portion Sigma, the fractional boundary Gram matrix realizing the H^{1/2}
pairing, the induced operator norm, and the bilinear comparison integrals
of two conductivities against Green's function gradients.
"""

import hashlib
import json

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from . import fem
from .geometry import SIGMA


class DnMapError(Exception):
    pass


def _surface_matrices(mesh, facets):
    """P1 mass and Laplace-Beltrami stiffness over boundary triangles,
    returned densely over the facet node set (with the index map)."""
    fnodes = np.unique(facets)
    loc = np.full(len(mesh.vertices), -1, dtype=np.int64)
    loc[fnodes] = np.arange(len(fnodes))
    facets = loc[facets]
    nv = len(fnodes)
    M = np.zeros((nv, nv))
    K = np.zeros((nv, nv))
    v = mesh.vertices[fnodes][facets]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    me = (np.ones((3, 3)) + np.eye(3)) / 12.0
    for f, a, u1, u2 in zip(facets, areas, e1, e2):
        E = np.c_[u1, u2]                      # 3x2 tangent frame
        g = np.linalg.inv(E.T @ E)
        G = np.zeros((3, 3))
        G[1:, :] = (E @ g).T                   # grad lambda_1, lambda_2
        G[0] = -G[1] - G[2]
        M[np.ix_(f, f)] += a * me
        K[np.ix_(f, f)] += a * (G @ G.T)
    return M, K, loc


class TraceSpace:
    """Sigma-interior nodes with boundary mass, surface stiffness, and the
    generalized eigenpairs K v = mu M v (V is M-orthonormal)."""

    def __init__(self, mesh, nodes=None):
        labels = np.asarray(mesh.bfacet_label)
        sfacets = mesh.bfacets[labels == SIGMA]
        if len(sfacets) == 0:
            raise DnMapError("mesh has no Sigma facets")
        if nodes is None:
            mask = mesh.sigma_interior_mask()
            nodes = np.flatnonzero(mask)
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) == 0:
            raise DnMapError("Sigma has no interior nodes")
        Msurf, Ksurf, loc = _surface_matrices(mesh, sfacets)
        li = loc[nodes]
        if (li < 0).any():
            raise DnMapError("requested node off the Sigma facets")
        self.mesh = mesh
        self.nodes = nodes
        self.M = Msurf[np.ix_(li, li)]
        self.K = Ksurf[np.ix_(li, li)]
        try:
            self.mu, self.V = sla.eigh(self.K, self.M)
        except sla.LinAlgError as e:
            raise DnMapError("trace eigen-solve failed; cond(M)=%.3g"
                             % np.linalg.cond(self.M)) from e
        self.mu = np.maximum(self.mu, 0.0)


def h_half_gram(ts, exponent=0.5):
    """N_s = M V diag((1+mu)^s) V^T M; SPD, equals M + K at exponent 1."""
    mid = ts.V @ np.diag((1.0 + ts.mu) ** exponent) @ ts.V.T
    N = ts.M @ mid @ ts.M
    return 0.5 * (N + N.T)


class LocalDtN:
    """Dense symmetric matrix of the local D-N map over Sigma nodes."""

    def __init__(self, mat, ts, conductivity_id=""):
        self.mat = mat
        self.ts = ts
        self.conductivity_id = conductivity_id

    def save(self, path):
        with open(path, "w") as f:
            for row in self.mat:
                f.write(" ".join("%.17g" % x for x in row) + "\n")
        mesh = self.ts.mesh
        hasher = hashlib.sha256()
        hasher.update(mesh.vertices.tobytes())
        hasher.update(mesh.elements.tobytes())
        side = {"mesh_hash": hasher.hexdigest(),
                "conductivity_id": self.conductivity_id,
                "sigma_nodes": [int(i) for i in self.ts.nodes]}
        with open(path + ".json", "w") as f:
            json.dump(side, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path, ts):
        mat = np.loadtxt(path)
        with open(path + ".json") as f:
            side = json.load(f)
        if list(ts.nodes) != side["sigma_nodes"]:
            raise DnMapError("sigma node set does not match sidecar")
        return cls(np.atleast_2d(mat), ts, side["conductivity_id"])


def assemble_dtn(sys, ts, conductivity_id=""):
    """Schur complement of the stiffness matrix onto the Sigma nodes, with
    zero data on the rest of the boundary (interior dofs eliminated)."""
    mesh = sys.mesh
    nv = len(mesh.vertices)
    snodes = ts.nodes
    interior = np.flatnonzero(sys.free)
    K = sys.K.tocsc()
    Kss = K[np.ix_(snodes, snodes)].toarray()
    Ksi = K[np.ix_(snodes, interior)].toarray()
    Kii = K[np.ix_(interior, interior)].tocsc()
    try:
        lu = spla.splu(Kii)
    except RuntimeError as e:
        raise DnMapError("interior block factorization failed") from e
    X = lu.solve(Ksi.T)
    lam = Kss - Ksi @ X
    lam = 0.5 * (lam + lam.T)
    return LocalDtN(lam, ts, conductivity_id)


def op_norm_star(dmat, ts, tol=1e-8, maxit=5000):
    """Operator norm of a symmetric D-N difference: max |theta| over the
    pencil d v = theta N_{1/2} v, by power iteration with a deflating shift
    to pick up both spectral extremes.
    """
    d = dmat.mat if isinstance(dmat, LocalDtN) else np.asarray(dmat)
    if np.abs(d - d.T).max() > 1e-10 * max(np.abs(d).max(), 1e-300):
        raise DnMapError("operator difference is not symmetric")
    N = h_half_gram(ts)
    cho = sla.cho_factor(N)
    n = len(d)
    if np.abs(d).max() == 0.0:
        return 0.0

    def extreme(shift):
        rng = np.random.default_rng(7)
        v = rng.standard_normal(n)
        v /= np.sqrt(v @ (N @ v))
        theta = 0.0
        history = []
        for _ in range(maxit):
            w = sla.cho_solve(cho, d @ v) - shift * v
            nw = np.sqrt(w @ (N @ w))
            if nw == 0.0:
                return shift, history
            v = w / nw
            new = (v @ (d @ v)) / (v @ (N @ v))
            history.append(new)
            if abs(new - theta) <= tol * max(abs(new), 1.0):
                return new, history
            theta = new
        raise DnMapError("power iteration stalled; Rayleigh history tail %s"
                         % history[-5:])

    t1, _ = extreme(0.0)
    t2, _ = extreme(t1)
    return float(max(abs(t1), abs(t2)))


def s_u_integral(c1, c2, g1, g2, labels):
    """Integral over the union U of the labelled subdomains of
    (sigma1 - sigma2) grad G1(., y) . grad G2(z, .), by per-element
    one-point quadrature using the Green approximations' gradients.
    """
    mesh = g1.mesh
    if g2.mesh is not mesh:
        raise DnMapError("Green approximations live on different meshes")
    sel = np.isin(mesh.elem_label, np.asarray(labels, dtype=np.int64))
    idx = np.flatnonzero(sel)
    if len(idx) == 0:
        raise DnMapError("empty region U")
    bc = mesh.barycenters()[idx]
    for y in (g1.y, g2.y):
        dmin = np.linalg.norm(bc - y, axis=1).min()
        if dmin < 4 * mesh.h:
            raise DnMapError("source within 4h of U (distance %.3g)" % dmin)
    if np.array_equal(c1.gamma, c2.gamma) and c1.A is c2.A:
        return 0.0
    dsig = (c1.sigma_at_labels(bc, mesh.elem_label[idx])
            - c2.sigma_at_labels(bc, mesh.elem_label[idx]))
    ga = g1.grad_at_elements(idx)
    gb = g2.grad_at_elements(idx)
    return float(np.sum(mesh.volumes()[idx]
                        * np.einsum("ea,eab,eb->e", ga, dsig, gb)))
