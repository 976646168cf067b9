"""Box domains with layered graph interfaces, structured tetrahedral meshes,
and the interface-flattening diffeomorphism.

Coordinates are dimensionless (lengths in units of the reference scale r0).
The FEM side is fixed to n = 3; points are plain numpy arrays.
"""

import numpy as np

SIGMA = "SIGMA"
OTHER = "OTHER"

_GRID_PTS = 33  # per-axis sampling for graph regularity checks


class GeometryError(Exception):
    pass


def smooth_step(t):
    """C-infinity step: 0 for t<=0, 1 for t>=1, built from exp(-1/t)."""
    t = np.asarray(t, dtype=float)
    a = np.zeros_like(t)
    pos = t > 0
    a[pos] = np.exp(-1.0 / t[pos])
    b = np.zeros_like(t)
    neg = t < 1
    b[neg] = np.exp(-1.0 / (1.0 - t[neg]))
    return a / (a + b)


def cutoff_profile(s):
    """Even C-infinity profile: 1 on (-1,1), 0 outside (-2,2), |d/ds| <= 2."""
    return smooth_step(2.0 - np.abs(np.asarray(s, dtype=float)))


class Cylinder:
    """Open cylinder B'_r(x') x (x_n - r, x_n + r)."""

    def __init__(self, center, r):
        if r <= 0:
            raise GeometryError("cylinder radius must be positive")
        self.center = np.asarray(center, dtype=float)
        self.r = float(r)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        return (np.linalg.norm(d[..., :-1], axis=-1) < self.r) & (
            np.abs(d[..., -1]) < self.r
        )


class InterfaceGraph:
    """Graph interface x_n = anchor_n + phi(x' - anchor'), phi(0) = 0.

    phi maps (..., n-1) arrays to (...) arrays; grad, if given, maps them to
    (..., n-1) arrays.  r0, M, alpha are the C^{1,alpha} constants the graph
    claims; `check` verifies them on a fixed sampling grid.
    """

    def __init__(self, phi, r0, M, alpha, anchor=(0.5, 0.5, 0.5), grad=None):
        if not (0.0 < alpha <= 1.0):
            raise GeometryError("alpha must lie in (0, 1]")
        if r0 <= 0 or M < 0:
            raise GeometryError("r0 must be positive and M nonnegative")
        self.phi = phi
        self.grad = grad
        self.r0 = float(r0)
        self.M = float(M)
        self.alpha = float(alpha)
        self.anchor = np.asarray(anchor, dtype=float)

    @classmethod
    def flat(cls, height, r0=1.0, M=0.0, alpha=1.0):
        return cls(
            phi=lambda xp: np.zeros(np.asarray(xp).shape[:-1]),
            grad=lambda xp: np.zeros_like(np.asarray(xp, dtype=float)),
            r0=r0,
            M=M,
            alpha=alpha,
            anchor=(0.5, 0.5, float(height)),
        )

    @classmethod
    def quadratic(cls, height, coeffs, anchor_xy=(0.5, 0.5), r0=1.0, alpha=1.0):
        """phi(x') = sum_i coeffs[i] * x'_i**2 about the anchor."""
        c = np.asarray(coeffs, dtype=float)
        # sup|phi| + r0 sup|grad phi| + r0^{1+a} Hoelder(grad phi) over B'_{r0}
        M = max(np.abs(c).sum() * r0 * (3.0 + 2.0 * 2.0 ** (1.0 - alpha)) * 1.01, 1e-12)

        def phi(xp):
            xp = np.asarray(xp, dtype=float)
            return (c * xp**2).sum(axis=-1)

        def grad(xp):
            return 2.0 * c * np.asarray(xp, dtype=float)

        return cls(phi, r0, M, alpha, anchor=(*anchor_xy, float(height)), grad=grad)

    def height(self, xy):
        """Absolute interface height over global in-plane coordinates."""
        xy = np.asarray(xy, dtype=float)
        return self.anchor[-1] + self.phi(xy - self.anchor[:-1])

    def grad_local(self, xp, step=1e-6):
        if self.grad is not None:
            return self.grad(xp)
        xp = np.asarray(xp, dtype=float)
        g = np.zeros_like(xp)
        for i in range(xp.shape[-1]):
            e = np.zeros(xp.shape[-1])
            e[i] = step
            g[..., i] = (self.phi(xp + e) - self.phi(xp - e)) / (2.0 * step)
        return g

    def check(self, tol=1e-8):
        """Sampled regularity report; empty list means all checks pass."""
        issues = []
        if abs(float(self.phi(np.zeros(2)))) > tol:
            issues.append("phi(0) != 0")
        if np.linalg.norm(self.grad_local(np.zeros(2))) > max(tol, 1e-4):
            issues.append("grad phi(0) != 0")
        t = np.linspace(-self.r0, self.r0, _GRID_PTS)
        xs, ys = np.meshgrid(t, t, indexing="ij")
        pts = np.stack([xs, ys], axis=-1).reshape(-1, 2)
        inside = np.linalg.norm(pts, axis=1) <= self.r0
        pts = pts[inside]
        vals = self.phi(pts)
        grads = self.grad_local(pts)
        gnorm = np.linalg.norm(grads, axis=1)
        # Hoelder seminorm of the gradient on a subsample of point pairs
        sub = pts[:: max(1, len(pts) // 120)]
        gs = self.grad_local(sub)
        diff = gs[:, None, :] - gs[None, :, :]
        dist = np.linalg.norm(sub[:, None, :] - sub[None, :, :], axis=-1)
        mask = dist > 1e-12
        semi = np.where(
            mask, np.linalg.norm(diff, axis=-1) / np.maximum(dist, 1e-300) ** self.alpha, 0.0
        ).max()
        norm = (
            np.abs(vals).max()
            + self.r0 * gnorm.max()
            + self.r0 ** (1.0 + self.alpha) * semi
        )
        if norm > self.M * self.r0 * (1.0 + 1e-6) + tol:
            issues.append(
                "sampled C^{1,alpha} norm %.3g exceeds M*r0 = %.3g" % (norm, self.M * self.r0)
            )
        return issues


class AprioriData:
    """Bundle of the constants every instance is measured against."""

    def __init__(self, N, r0, L, M, alpha, lam, gamma_bar, A_bar):
        if not (0.0 < alpha <= 1.0):
            raise GeometryError("alpha must lie in (0, 1]")
        if min(r0, L, M, lam, gamma_bar, A_bar) <= 0 or N < 1:
            raise GeometryError("a-priori constants must be positive")
        if gamma_bar > 1.0:
            raise GeometryError("gamma_bar must lie in (0, 1]")
        self.N = int(N)
        self.r0 = float(r0)
        self.L = float(L)
        self.M = float(M)
        self.alpha = float(alpha)
        self.lam = float(lam)
        self.gamma_bar = float(gamma_bar)
        self.A_bar = float(A_bar)


class PartitionChain:
    """Layered partition of the unit box into N subdomains D_1..D_N,
    separated by ordered graph interfaces, chained bottom-up from the
    accessible boundary portion on the top face.
    """

    def __init__(self, interfaces, apriori):
        self.interfaces = list(interfaces)
        self.apriori = apriori
        self.N = len(self.interfaces) + 1
        if apriori.N != self.N:
            raise GeometryError("a-priori N does not match interface count")
        # chain runs from the top layer (touching Sigma) downward
        self.chain = list(range(self.N, 0, -1))
        self.anchors = [g.anchor.copy() for g in reversed(self.interfaces)]
        # outward normal of the layer above each interface points downward
        self.normals = []
        for g in reversed(self.interfaces):
            gp = g.grad_local(np.zeros(2))
            nu = np.array([gp[0], gp[1], -1.0])
            self.normals.append(nu / np.linalg.norm(nu))

    def locate(self, x):
        """Layer label (1..N) of points x, shape (..., 3); bottom layer is 1."""
        x = np.asarray(x, dtype=float)
        lab = np.ones(x.shape[:-1], dtype=np.int64)
        for g in self.interfaces:
            lab += (x[..., 2] > g.height(x[..., :2])).astype(np.int64)
        return lab

    def validate(self):
        issues = []
        for i, g in enumerate(self.interfaces):
            issues += ["interface %d: %s" % (i, msg) for msg in g.check()]
        for nu in self.normals:
            if abs(np.linalg.norm(nu) - 1.0) > 1e-12:
                issues.append("normal not unit length")
        return issues


class SimplicialMesh:
    """Labeled tetrahedral mesh of the unit box.

    vertices: (V, 3); elements: (E, 4) vertex indices; elem_label: (E,)
    subdomain labels; bfacets: (F, 3) boundary triangles with string labels
    SIGMA (top face) or OTHER.
    """

    def __init__(self, vertices, elements, elem_label, bfacets, bfacet_label, h,
                 resolution=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.elements = np.asarray(elements, dtype=np.int64)
        self.elem_label = np.asarray(elem_label, dtype=np.int64)
        self.bfacets = np.asarray(bfacets, dtype=np.int64)
        self.bfacet_label = list(bfacet_label)
        self.h = float(h)
        self.resolution = resolution
        self._vols = None
        self._bary = None

    # -- derived quantities -------------------------------------------------

    def volumes(self):
        if self._vols is None:
            v = self.vertices[self.elements]
            d = v[:, 1:] - v[:, :1]
            self._vols = np.linalg.det(d) / 6.0
        return self._vols

    def barycenters(self):
        if self._bary is None:
            self._bary = self.vertices[self.elements].mean(axis=1)
        return self._bary

    def boundary_vertex_mask(self):
        mask = np.zeros(len(self.vertices), dtype=bool)
        if len(self.bfacets):
            mask[self.bfacets.ravel()] = True
        return mask

    def sigma_interior_mask(self):
        """Vertices all of whose boundary facets carry the SIGMA label."""
        labels = np.asarray(self.bfacet_label)
        on_sigma = np.zeros(len(self.vertices), dtype=bool)
        on_other = np.zeros(len(self.vertices), dtype=bool)
        if len(self.bfacets):
            on_sigma[self.bfacets[labels == SIGMA].ravel()] = True
            on_other[self.bfacets[labels == OTHER].ravel()] = True
        return on_sigma & ~on_other

    def validate(self):
        issues = []
        vols = self.volumes()
        if (vols <= 0).any():
            issues.append("element %d has nonpositive volume" % int(np.argmin(vols)))
        if not any(l == SIGMA for l in self.bfacet_label):
            issues.append("no SIGMA-labeled boundary facets")
        return issues

    def element_grads(self, idx=None):
        """P1 hat-function gradients, shape (E, 4, 3)."""
        el = self.elements if idx is None else self.elements[idx]
        v = self.vertices[el]
        d = v[:, 1:] - v[:, :1]
        inv = np.linalg.inv(d)
        g = np.empty((len(el), 4, 3))
        g[:, 1:] = np.transpose(inv, (0, 2, 1))
        g[:, 0] = -g[:, 1:].sum(axis=1)
        return g

    def find_element(self, x):
        """Element containing x (structured lookup when possible)."""
        x = np.asarray(x, dtype=float)
        if self.resolution is not None:
            R = self.resolution
            cell = np.clip((x * R).astype(int), 0, R - 1)
            i, j, k = cell
            base = ((i * R + j) * R + k) * 6
            cand = range(base, base + 6)
        else:
            cand = range(len(self.elements))
        for e in cand:
            lam = self.barycentric(e, x)
            if (lam >= -1e-10).all():
                return e
        raise GeometryError("point %s not found in mesh" % x)

    def barycentric(self, e, x):
        v = self.vertices[self.elements[e]]
        d = (v[1:] - v[0]).T
        c = np.linalg.solve(d, np.asarray(x, dtype=float) - v[0])
        return np.concatenate([[1.0 - c.sum()], c])

    def interpolate(self, field, x):
        e = self.find_element(x)
        lam = self.barycentric(e, x)
        return float(lam @ field[self.elements[e]])

    # -- text format --------------------------------------------------------

    def save(self, path):
        with open(path, "w") as f:
            f.write("3 %d %d %d\n" % (len(self.vertices), len(self.elements),
                                      len(self.bfacets)))
            for v in self.vertices:
                f.write("%.17g %.17g %.17g\n" % tuple(v))
            for el, lab in zip(self.elements, self.elem_label):
                f.write("%d %d %d %d %d\n" % (*el, lab))
            for fc, lab in zip(self.bfacets, self.bfacet_label):
                f.write("%d %d %d %s\n" % (*fc, lab))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            n, nv, ne, nb = (int(t) for t in f.readline().split())
            if n != 3:
                raise GeometryError("only n=3 meshes are supported")
            verts = np.array([[float(t) for t in f.readline().split()]
                              for _ in range(nv)])
            elems = np.empty((ne, 4), dtype=np.int64)
            labs = np.empty(ne, dtype=np.int64)
            for i in range(ne):
                row = f.readline().split()
                elems[i] = [int(t) for t in row[:4]]
                labs[i] = int(row[4])
            facets = np.empty((nb, 3), dtype=np.int64)
            flabs = []
            for i in range(nb):
                row = f.readline().split()
                facets[i] = [int(t) for t in row[:3]]
                flabs.append(row[3])
        h = 0.0
        if ne:
            v = verts[elems[0]]
            h = float(np.abs(v[1:] - v[0]).max())
        return cls(verts, elems, labs, facets, flabs, h)


_KUHN_PERMS = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]


def gen_layered_box_mesh(N, interfaces, resolution):
    """Structured mesh of [0,1]^3, six tetrahedra per cube cell, with
    elements labeled by the layer containing their barycenter and the top
    face marked as the accessible boundary portion.
    """
    if N < 1 or resolution < 2:
        raise GeometryError("need N >= 1 and resolution >= 2")
    if len(interfaces) != N - 1:
        raise GeometryError("expected %d interfaces, got %d" % (N - 1, len(interfaces)))
    R = int(resolution)
    t = np.arange(R + 1) / R
    X, Y, Z = np.meshgrid(t, t, t, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (R + 1) + j) * (R + 1) + k

    # check interface ordering on a sampling grid before building elements
    if len(interfaces) > 1:
        s = np.linspace(0.0, 1.0, 25)
        gx, gy = np.meshgrid(s, s, indexing="ij")
        xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
        heights = [g.height(xy) for g in interfaces]
        for a in range(len(interfaces) - 1):
            if not (heights[a] < heights[a + 1]).all():
                raise GeometryError("interfaces %d and %d cross" % (a, a + 1))

    ii, jj, kk = np.meshgrid(np.arange(R), np.arange(R), np.arange(R), indexing="ij")
    c0 = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)  # (C, 3)
    elems = np.empty((len(c0) * 6, 4), dtype=np.int64)
    eye = np.eye(3, dtype=np.int64)
    for p, perm in enumerate(_KUHN_PERMS):
        corners = [c0,
                   c0 + eye[perm[0]],
                   c0 + eye[perm[0]] + eye[perm[1]],
                   c0 + 1]
        ids = [vid(c[:, 0], c[:, 1], c[:, 2]) for c in corners]
        tet = np.stack(ids, axis=1)
        # odd permutations give negatively oriented tets; swap to fix
        parity = (perm in ((0, 1, 2), (1, 2, 0), (2, 0, 1)))
        if not parity:
            tet = tet[:, [0, 2, 1, 3]]
        elems[p::6] = tet  # cell-major: element c*6+p belongs to cell c

    mesh = SimplicialMesh(verts, elems, np.ones(len(elems), dtype=np.int64),
                          np.empty((0, 3), dtype=np.int64), [], 1.0 / R,
                          resolution=R)
    vols = mesh.volumes()
    if (vols <= 0).any():
        raise GeometryError("degenerate element %d" % int(np.argmin(vols)))

    bary = mesh.barycenters()
    lab = np.ones(len(elems), dtype=np.int64)
    for g in interfaces:
        lab += (bary[:, 2] > g.height(bary[:, :2])).astype(np.int64)
    mesh.elem_label = lab

    # boundary facets: faces referenced by exactly one element
    faces = np.concatenate([elems[:, [1, 2, 3]], elems[:, [0, 3, 2]],
                            elems[:, [0, 1, 3]], elems[:, [0, 2, 1]]])
    key = np.sort(faces, axis=1).astype(np.uint64)
    V = np.uint64(len(verts))
    enc = (key[:, 0] * V + key[:, 1]) * V + key[:, 2]
    uniq, first, counts = np.unique(enc, return_index=True, return_counts=True)
    bidx = first[counts == 1]
    bfacets = faces[bidx]
    top = np.all(np.isclose(verts[bfacets][:, :, 2], 1.0), axis=1)
    mesh.bfacets = bfacets
    mesh.bfacet_label = [SIGMA if t else OTHER for t in top]
    return mesh


class FlatteningMap:
    """Change of variable that straightens a graph interface to x_n = 0 in
    local coordinates (interface anchored at the origin), equal to the
    identity outside the cylinder of radius 2*r1.
    """

    def __init__(self, graph):
        self.graph = graph
        M, alpha, r0 = graph.M, graph.alpha, graph.r0
        lim = 0.25 if M <= 0 else min(0.5 * (8.0 * M) ** (-1.0 / alpha), 0.25)
        self.r1 = (r0 / 3.0) * lim

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        xp, xn = x[..., :-1], x[..., -1]
        rp = np.linalg.norm(xp, axis=-1)
        xin = xn - self.graph.phi(xp) * cutoff_profile(rp / self.r1) * cutoff_profile(
            xn / self.r1
        )
        return np.concatenate([xp, xin[..., None]], axis=-1)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        xp, xn = x[:-1], x[-1]
        n = len(x)
        J = np.eye(n)
        rp = np.linalg.norm(xp)
        t1 = float(cutoff_profile(np.array(rp / self.r1)))
        t2 = float(cutoff_profile(np.array(xn / self.r1)))
        phi = float(self.graph.phi(xp))
        gphi = self.graph.grad_local(xp)
        dt1 = self._profile_deriv(rp / self.r1) / self.r1
        dt2 = self._profile_deriv(xn / self.r1) / self.r1
        drp = xp / rp if rp > 1e-300 else np.zeros_like(xp)
        J[n - 1, : n - 1] = -(gphi * t1 * t2 + phi * dt1 * drp * t2)
        J[n - 1, n - 1] = 1.0 - phi * t1 * dt2
        return J

    @staticmethod
    def _profile_deriv(s, step=1e-6):
        s = float(s)
        return float(
            (cutoff_profile(np.array(s + step)) - cutoff_profile(np.array(s - step)))
            / (2.0 * step)
        )

    def invert(self, xi, tol=1e-12, maxit=200):
        """Solve eval(x) = xi by damped fixed-point iteration on x_n."""
        xi = np.asarray(xi, dtype=float)
        xp = xi[:-1]
        rp = np.linalg.norm(xp)
        t1 = float(cutoff_profile(np.array(rp / self.r1)))
        if t1 == 0.0:
            return xi.copy()
        phi = float(self.graph.phi(xp))
        xn = xi[-1]
        for _ in range(maxit):
            new = xi[-1] + phi * t1 * float(cutoff_profile(np.array(xn / self.r1)))
            xn = 0.5 * xn + 0.5 * new
            x = np.concatenate([xp, [xn]])
            res = abs(self.eval(x)[-1] - xi[-1])
            if res <= tol:
                return x
        raise GeometryError("flattening inverse did not converge; residual %.3g" % res)
