"""Tests for the conductivity module: matrix fields, the piecewise-constant
class, validation, extension to the augmented domain, and L-inf distances."""

import numpy as np
import pytest

from eitlab.conductivity import (ClassCConductivity, ConductivityError,
                                 ExtendedConductivity, MatrixField,
                                 extend_to_augmented, linf_distance)
from eitlab.geometry import AprioriData, InterfaceGraph, PartitionChain


def _partition(heights=(0.5,), gamma_bar=0.1):
    ap = AprioriData(N=len(heights) + 1, r0=3.0, L=1.0, M=0.4, alpha=1.0,
                     lam=4.0, gamma_bar=gamma_bar, A_bar=4.0)
    return PartitionChain([InterfaceGraph.flat(h) for h in heights], ap)


def test_matrix_field_identity_and_constant():
    A = MatrixField.identity()
    x = np.random.default_rng(0).uniform(0, 1, (7, 3))
    assert np.allclose(A(x), np.eye(3))
    B = MatrixField.constant(np.diag([4.0, 1.0, 1.0]))
    assert np.allclose(B(x[0]), np.diag([4.0, 1.0, 1.0]))
    assert A.sampled_violations() == []
    assert B.sampled_violations() == []


def test_matrix_field_affine_lipschitz_and_ellipticity():
    lin = np.zeros((3, 3, 3))
    lin[2] = 0.5 * np.eye(3)                     # A(x) = I + 0.5 x3 I
    A = MatrixField.affine(np.eye(3), lin)
    assert A.sampled_violations() == []
    x = np.array([0.2, 0.3, 0.4])
    assert np.allclose(A(x), (1 + 0.2) * np.eye(3))
    # understated constants are caught with witnesses
    bad = MatrixField(A.fn, A_bar=1e-6, lam=A.lam)
    tags = [tag for tag, _witness in bad.sampled_violations()]
    assert "lipschitz" in tags


def test_matrix_field_spec_round_trip():
    A = MatrixField.from_spec({"A": "identity"})
    assert A.spec["A"] == "identity"
    expr = {"A": "expr",
            "A_params": {"expr": "np.multiply.outer(1 + 0.3*x3, np.eye(3))",
                         "A_bar": 1.2, "lam": 2.0}}
    B = MatrixField.from_spec(expr)
    assert np.allclose(B(np.array([0, 0, 1.0])), 1.3 * np.eye(3))


def test_sigma_eval_examples():
    part = _partition()
    ident = ClassCConductivity([1.0, 1.0], MatrixField.identity(), part, 0.1)
    x = np.array([0.3, 0.7, 0.2])
    assert np.allclose(ident.sigma_eval(x), np.eye(3))
    c = ClassCConductivity([2.0, 5.0], MatrixField.identity(), part, 0.1)
    assert np.allclose(c.sigma_eval(np.array([0.1, 0.1, 0.9])), 5.0 * np.eye(3))
    assert np.allclose(c.sigma_eval(np.array([0.1, 0.1, 0.1])), 2.0 * np.eye(3))


def test_sigma_eval_spectrum_inside_a_priori_box():
    part = _partition()
    lin = np.zeros((3, 3, 3))
    lin[0] = 0.4 * np.eye(3)
    A = MatrixField.affine(np.eye(3), lin)
    c = ClassCConductivity([0.5, 2.0], A, part, 0.1)
    rng = np.random.default_rng(1)
    for x in rng.uniform(0, 1, (20, 3)):
        s = c.sigma_eval(x)
        assert np.allclose(s, s.T)
        w = np.linalg.eigvalsh(s)
        lo = c.gamma_bar / A.lam
        hi = A.lam / c.gamma_bar
        assert w.min() >= lo - 1e-12 and w.max() <= hi + 1e-12


def test_validate_class_reports():
    part = _partition(gamma_bar=0.5)
    ok = ClassCConductivity([0.5, 2.0], MatrixField.identity(), part, 0.5)
    assert ok.validate_class() == []
    low = ClassCConductivity([0.25, 1.0], MatrixField.identity(), part, 0.5)
    report = low.validate_class()
    assert any("subdomain 1" in msg for msg, _w in report)
    bad_field = MatrixField(lambda x: 10.0 * np.eye(3)
                            * np.ones(np.shape(x)[:-1] + (1, 1)),
                            A_bar=4.0, lam=4.0)
    spiky = ClassCConductivity([1.0, 1.0], bad_field, part, 0.5)
    assert any(tag == "ellipticity" for tag, _w in spiky.validate_class())


def test_scaling_is_exact():
    part = _partition()
    c = ClassCConductivity([0.7, 1.9], MatrixField.identity(), part, 0.1)
    c2 = c.scaled(3.0)
    x = np.array([0.4, 0.2, 0.8])
    assert np.array_equal(c2.sigma_eval(x), 3.0 * c.sigma_eval(x))


def test_linf_distance_examples():
    part = _partition()
    A = MatrixField.identity()
    c1 = ClassCConductivity([1.0, 1.0], A, part, 0.1)
    c2 = ClassCConductivity([1.0, 1.5], A, part, 0.1)
    assert linf_distance(c1, c1) == 0.0
    assert abs(linf_distance(c1, c2) - 0.5) < 1e-12
    other = ClassCConductivity([1.0, 1.5], MatrixField.identity(), part, 0.1)
    with pytest.raises(ConductivityError):
        linf_distance(c1, other)                 # distinct A objects


def test_linf_distance_against_dense_sampling():
    part = _partition()
    lin = np.zeros((3, 3, 3))
    lin[2] = np.diag([0.5, 0.2, 0.1])
    A = MatrixField.affine(np.eye(3), lin)
    c1 = ClassCConductivity([0.8, 1.7], A, part, 0.1)
    c2 = ClassCConductivity([1.1, 1.2], A, part, 0.1)
    val = linf_distance(c1, c2)
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 1, (10000, 3))
    labels = part.locate(pts)
    brute = 0.0
    for x, lab in zip(pts, labels):
        d = (c1.gamma[lab - 1] - c2.gamma[lab - 1]) * A(x)
        brute = max(brute, np.abs(np.linalg.eigvalsh(d)).max())
    assert brute <= val * 1.02
    assert val <= brute * 1.02


def test_linf_bounded_by_abar_gamma_gap():
    part = _partition()
    lin = np.zeros((3, 3, 3))
    lin[1] = 0.3 * np.eye(3)
    A = MatrixField.affine(np.eye(3), lin)
    rng = np.random.default_rng(3)
    for _ in range(5):
        g1 = rng.uniform(0.5, 2.0, 2)
        g2 = rng.uniform(0.5, 2.0, 2)
        c1 = ClassCConductivity(g1, A, part, 0.1)
        c2 = ClassCConductivity(g2, A, part, 0.1)
        gap = np.abs(g1 - g2).max()
        assert linf_distance(c1, c2) <= part.apriori.A_bar * gap + 1e-12


def test_extension_to_augmented_domain():
    part = _partition()
    lin = np.zeros((3, 3, 3))
    lin[2] = 0.5 * np.eye(3)
    A = MatrixField.affine(np.eye(3), lin)
    base = ClassCConductivity([2.0, 3.0], A, part, 0.1)
    ext = extend_to_augmented(base, z_top=1.0, depth=0.3)
    # interior points agree with the base
    x = np.array([0.4, 0.4, 0.6])
    assert np.allclose(ext.sigma_eval(x), base.sigma_eval(x))
    # deep in D0 the value is A at the nearest boundary point, gamma = 1
    deep = np.array([0.4, 0.4, 1.25])
    assert np.allclose(ext.sigma_eval(deep), A(np.array([0.4, 0.4, 1.0])))
    assert ext.gamma_at_labels(np.array([0])) == 1.0
    # clamped extension keeps the sampled Lipschitz constant
    rng = np.random.default_rng(4)
    pts = rng.uniform([0, 0, 0], [1, 1, 1.3], (200, 3))
    worst = 0.0
    for i in range(0, len(pts) - 1, 2):
        a, b = pts[i], pts[i + 1]
        num = np.abs(ext.matrix_at(a) - ext.matrix_at(b)).max()
        worst = max(worst, num / np.linalg.norm(a - b))
    assert worst <= A.A_bar + 1e-9


def test_conductivity_json_round_trip(tmp_path):
    part = _partition()
    c = ClassCConductivity([0.7, 1.3], MatrixField.identity(), part, 0.1)
    path = tmp_path / "cond.json"
    c.save(path)
    back = ClassCConductivity.load(path, part)
    assert np.array_equal(back.gamma, c.gamma)
    assert back.gamma_bar == c.gamma_bar
    x = np.array([0.2, 0.9, 0.4])
    assert np.allclose(back.sigma_eval(x), c.sigma_eval(x))
