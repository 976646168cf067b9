"""Conformal anisotropic piecewise-constant conductivities: an unknown
scalar per subdomain times a known Lipschitz matrix field, with validation
against the a-priori constants, extension past the accessible boundary
portion, and L-infinity distances.
"""

import json

import numpy as np


class ConductivityError(Exception):
    pass


def _lattice(npts=17, lo=0.0, hi=1.0):
    t = np.linspace(lo, hi, npts)
    X, Y, Z = np.meshgrid(t, t, t, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


class MatrixField:
    """Known matrix coefficient A(x): symmetric, uniformly elliptic with
    constant lam, Lipschitz with constant A_bar (both sampled, not proven).
    """

    def __init__(self, fn, A_bar, lam, n=3, spec=None):
        if lam < 1.0:
            raise ConductivityError("ellipticity constant must be >= 1")
        self.fn = fn
        self.A_bar = float(A_bar)
        self.lam = float(lam)
        self.n = int(n)
        self.spec = spec  # JSON-roundtrip description, when available

    def __call__(self, x):
        """A at points x of shape (..., n), returning (..., n, n)."""
        return self.fn(np.asarray(x, dtype=float))

    @classmethod
    def identity(cls, n=3):
        def fn(x):
            shape = x.shape[:-1]
            out = np.zeros(shape + (n, n))
            out[...] = np.eye(n)
            return out
        return cls(fn, A_bar=1.0, lam=1.0, n=n, spec={"A": "identity", "A_params": {}})

    @classmethod
    def constant(cls, mat, lam=None):
        mat = np.asarray(mat, dtype=float)
        n = mat.shape[0]
        if lam is None:
            w = np.linalg.eigvalsh(mat)
            lam = max(w.max(), 1.0 / w.min(), 1.0)

        def fn(x):
            out = np.zeros(x.shape[:-1] + (n, n))
            out[...] = mat
            return out
        return cls(fn, A_bar=max(np.abs(mat).max(), 1e-12), lam=lam, n=n,
                   spec={"A": "affine", "A_params": {"const": mat.tolist(),
                                                    "linear": [np.zeros((n, n)).tolist()] * n}})

    @classmethod
    def affine(cls, const, linear, lam=None, A_bar=None):
        """A(x) = const + sum_i x_i * linear[i]."""
        const = np.asarray(const, dtype=float)
        linear = [np.asarray(m, dtype=float) for m in linear]
        n = const.shape[0]

        def fn(x):
            out = np.zeros(x.shape[:-1] + (n, n))
            out[...] = const
            for i, m in enumerate(linear):
                out += x[..., i, None, None] * m
            return out
        if A_bar is None:
            A_bar = np.abs(const).max() + sum(np.abs(m).max() for m in linear) + 1.0
        if lam is None:
            # crude bound over the unit box corners
            corners = _lattice(3)
            mats = fn(corners)
            w = np.linalg.eigvalsh(mats)
            lam = max(w.max(), 1.0 / max(w.min(), 1e-12), 1.0)
        return cls(fn, A_bar=A_bar, lam=lam, n=n,
                   spec={"A": "affine", "A_params": {"const": const.tolist(),
                                                    "linear": [m.tolist() for m in linear]}})

    @classmethod
    def from_spec(cls, spec):
        kind = spec.get("A", "identity")
        params = spec.get("A_params", {})
        if kind == "identity":
            return cls.identity()
        if kind == "affine":
            return cls.affine(params["const"], params["linear"],
                              lam=params.get("lam"), A_bar=params.get("A_bar"))
        if kind == "expr":
            expr = params["expr"]

            def fn(x):
                x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
                mat = eval(expr, {"np": np, "x1": x1, "x2": x2, "x3": x3})
                mat = np.asarray(mat, dtype=float)
                if mat.shape[-2:] != (3, 3):
                    raise ConductivityError("expr must produce (..., 3, 3) matrices")
                out = np.zeros(x.shape[:-1] + (3, 3))
                out[...] = mat
                return out
            return cls(fn, A_bar=params.get("A_bar", 10.0), lam=params.get("lam", 10.0),
                       spec=spec)
        raise ConductivityError("unknown matrix field kind %r" % kind)

    def sampled_violations(self, points=None, tol=1e-9):
        if points is None:
            points = _lattice(9)
        issues = []
        mats = self(points)
        asym = np.abs(mats - np.transpose(mats, (0, 2, 1))).max(axis=(1, 2))
        if asym.max() > tol:
            issues.append(("asymmetry", points[int(asym.argmax())]))
        w = np.linalg.eigvalsh(mats)
        bad = (w.min(axis=1) < 1.0 / self.lam - tol) | (w.max(axis=1) > self.lam + tol)
        if bad.any():
            issues.append(("ellipticity", points[int(np.argmax(bad))]))
        # difference quotients on consecutive lattice points
        d = np.linalg.norm(points[1:] - points[:-1], axis=1)
        q = np.abs(mats[1:] - mats[:-1]).max(axis=(1, 2)) / np.maximum(d, 1e-300)
        ok = d > 1e-12
        if (q[ok] > self.A_bar + tol).any():
            issues.append(("lipschitz", points[1:][ok][int(np.argmax(q[ok]))]))
        return issues


class ClassCConductivity:
    """sigma(x) = gamma_j A(x) on subdomain j of a layered partition."""

    def __init__(self, gamma, A, partition, gamma_bar):
        self.gamma = np.asarray(gamma, dtype=float)
        self.A = A
        self.partition = partition
        self.gamma_bar = float(gamma_bar)
        if len(self.gamma) != partition.N:
            raise ConductivityError("gamma length does not match partition")

    def gamma_at_labels(self, labels):
        """Scalar factor for subdomain labels; label 0 is the augmentation."""
        g = np.concatenate([[1.0], self.gamma])
        return g[np.asarray(labels, dtype=np.int64)]

    def locate(self, x):
        return self.partition.locate(x)

    def matrix_at(self, x):
        return self.A(x)

    def sigma_eval(self, x):
        """gamma_j A(x) for the subdomain containing x; batched."""
        x = np.asarray(x, dtype=float)
        labels = self.locate(x)
        return self.gamma_at_labels(labels)[..., None, None] * self.matrix_at(x)

    def sigma_at_labels(self, x, labels):
        """Same as sigma_eval but with labels already known (mesh elements)."""
        return self.gamma_at_labels(labels)[..., None, None] * self.matrix_at(x)

    def scaled(self, c):
        return ClassCConductivity(c * self.gamma, self.A, self.partition, self.gamma_bar)

    def validate_class(self, points=None):
        """Sampled a-priori checks; a list of (violation, witness) pairs."""
        report = []
        gb = self.gamma_bar
        for j, g in enumerate(self.gamma):
            if not (gb <= g <= 1.0 / gb):
                report.append(("gamma bound violated at subdomain %d" % (j + 1), g))
        report += [(name, w) for name, w in self.A.sampled_violations(points)]
        return report

    def to_spec(self):
        if self.A.spec is None:
            raise ConductivityError("matrix field has no serializable spec")
        return {"gamma": self.gamma.tolist(), "gamma_bar": self.gamma_bar,
                **self.A.spec}

    @classmethod
    def from_spec(cls, spec, partition):
        A = MatrixField.from_spec(spec)
        return cls(spec["gamma"], A, partition, spec.get("gamma_bar", 0.1))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_spec(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path, partition):
        with open(path) as f:
            return cls.from_spec(json.load(f), partition)


class ExtendedConductivity:
    """Conductivity on the augmented domain: the base on the body, unit
    scalar times the (nearest-point extended) matrix field on the pad that
    sits on top of the accessible boundary portion.
    """

    def __init__(self, base, z_top, depth):
        if depth <= 0:
            raise ConductivityError("pad depth must be positive")
        self.base = base
        self.z_top = float(z_top)
        self.depth = float(depth)
        self.gamma = base.gamma
        self.gamma_bar = base.gamma_bar
        self.partition = base.partition
        self.A = base.A

    def locate(self, x):
        x = np.asarray(x, dtype=float)
        lab = self.base.locate(x)
        return np.where(x[..., 2] > self.z_top, 0, lab)

    def gamma_at_labels(self, labels):
        return self.base.gamma_at_labels(labels)

    def matrix_at(self, x):
        x = np.asarray(x, dtype=float).copy()
        x[..., 2] = np.minimum(x[..., 2], self.z_top)  # nearest-point in z
        return self.base.A(x)

    def sigma_eval(self, x):
        labels = self.locate(x)
        return self.gamma_at_labels(labels)[..., None, None] * self.matrix_at(x)

    def sigma_at_labels(self, x, labels):
        return self.gamma_at_labels(labels)[..., None, None] * self.matrix_at(x)

    def scaled(self, c):
        return ExtendedConductivity(self.base.scaled(c), self.z_top, self.depth)


def extend_to_augmented(cond, z_top, depth):
    return ExtendedConductivity(cond, z_top, depth)


def linf_distance(c1, c2, points=None):
    """Max over sampled points of the spectral norm of sigma1 - sigma2."""
    if c1.partition is not c2.partition:
        raise ConductivityError("conductivities live on different partitions")
    if c1.A is not c2.A:
        raise ConductivityError("conductivities carry different matrix fields")
    if points is None:
        points = _lattice(17)
    labels = c1.locate(points)
    dg = c1.gamma_at_labels(labels) - c2.gamma_at_labels(labels)
    mats = dg[..., None, None] * c1.matrix_at(points)
    w = np.abs(np.linalg.eigvalsh(mats)).max(axis=-1)
    return float(w.max())
