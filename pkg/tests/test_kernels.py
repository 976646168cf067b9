"""Tests for the closed-form kernels: Laplace, two-phase flat-interface,
the anisotropic variant with its change of basis, and the J matrix."""

import numpy as np
import pytest

from eitlab.kernels import (AnisoTwoPhaseKernel, ChangeOfBasis, JMatrix,
                            LaplaceKernel, SingularityError, TwoPhaseKernel,
                            build_change_of_basis, j_matrix, mirror,
                            weak_delta_pairing)


def test_laplace_kernel_values():
    lap = LaplaceKernel(3)
    x = np.array([1.0, 0.0, 0.0])
    o = np.zeros(3)
    assert abs(lap.eval(x, o) - 1.0 / (4 * np.pi)) < 1e-15
    assert abs(lap.eval(2 * x, o) - 1.0 / (8 * np.pi)) < 1e-15
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.uniform(-1, 1, (2, 3))
        assert lap.eval(a, b) == lap.eval(b, a)
    with pytest.raises(SingularityError):
        lap.eval(x, x)


def test_laplace_gradient():
    lap = LaplaceKernel(3)
    o = np.zeros(3)
    x = np.array([1.0, 0.0, 0.0])
    g = lap.grad(x, o)
    assert abs(np.linalg.norm(g) - 1.0 / (4 * np.pi)) < 1e-15
    assert g[0] < 0.0                            # points from x toward y
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.uniform(-1, 1, (2, 3))
        if np.linalg.norm(a - b) < 0.3:
            continue
        fd = np.zeros(3)
        step = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = step
            fd[i] = (lap.eval(a + e, b) - lap.eval(a - e, b)) / (2 * step)
        assert np.abs(fd - lap.grad(a, b)).max() < 1e-8


def test_mirror():
    assert np.array_equal(mirror(np.array([1.0, 2.0, 3.0])), [1.0, 2.0, -3.0])
    x = np.array([0.3, -0.4, 0.7])
    assert np.array_equal(mirror(mirror(x)), x)
    flat = np.array([1.0, 1.0, 0.0])
    assert np.array_equal(mirror(flat), flat)


def test_two_phase_k1_degenerates_to_laplace():
    lap = LaplaceKernel(3)
    tp = TwoPhaseKernel(1.0, 3)
    rng = np.random.default_rng(2)
    for _ in range(30):
        xi, eta = rng.uniform(-1, 1, (2, 3))
        if abs(xi[2]) < 1e-3 or abs(eta[2]) < 1e-3:
            continue
        assert tp.eval(xi, eta) == pytest.approx(lap.eval(xi, eta), abs=1e-16)
        assert np.allclose(tp.grad(xi, eta), lap.grad(xi, eta), atol=1e-15)


def test_two_phase_continuity_across_interface():
    # algebraic identity (1/k) + (k-1)/(k(k+1)) = 2/(k+1) and its numeric
    # expression: one-sided limits at xi_n = 0 agree
    rng = np.random.default_rng(3)
    for _ in range(30):
        k = np.exp(rng.uniform(-2, 2))
        assert abs(1 / k + (k - 1) / (k * (k + 1)) - 2 / (k + 1)) < 1e-15
        tp = TwoPhaseKernel(k, 3)
        eta = np.array([0.1, -0.2, -0.6])
        xp = rng.uniform(-0.5, 0.5, 2)
        up = tp.eval(np.array([xp[0], xp[1], 1e-9]), eta)
        dn = tp.eval(np.array([xp[0], xp[1], -1e-9]), eta)
        assert abs(up - dn) < 1e-7 * abs(dn)


def test_two_phase_flux_transmission():
    rng = np.random.default_rng(4)
    for _ in range(30):
        k = np.exp(rng.uniform(-2, 2))
        tp = TwoPhaseKernel(k, 3)
        eta = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), -0.4])
        x = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 0.0])
        gp = tp.grad(x, eta, side=+1)
        gm = tp.grad(x, eta, side=-1)
        assert abs(k * gp[2] - gm[2]) < 1e-10 * abs(gm[2])
        # tangential components continuous
        assert np.abs(gp[:2] - gm[:2]).max() < 1e-10 * np.abs(gm).max()
        # one-sided finite differences agree with the analytic one-sided grad
        step = 1e-6
        fd = (tp.eval(x + [0, 0, step], eta) - tp.eval(x + [0, 0, 2 * step], eta))
        fd = -fd / step
        assert abs(fd - gp[2]) < 1e-4 * max(abs(gp[2]), 1.0)


def test_two_phase_symmetry_and_decay():
    rng = np.random.default_rng(5)
    tp = TwoPhaseKernel(3.0, 3)
    for _ in range(50):
        xi, eta = rng.uniform(-1, 1, (2, 3))
        if abs(xi[2]) < 1e-3 or abs(eta[2]) < 1e-3:
            continue
        assert tp.eval(xi, eta) == pytest.approx(tp.eval(eta, xi), rel=1e-12)
        scaled = tp.eval(xi, eta) * np.linalg.norm(xi - eta)
        assert 0.01 < scaled < 1.0               # 0 < H < |xi-eta|^{2-n} band


def test_two_phase_harmonicity_off_interface():
    # FD Laplacian of H shrinks ~4x when the step halves (O(step^2) residual)
    tp = TwoPhaseKernel(2.5, 3)
    eta = np.array([0.0, 0.1, -0.5])
    x = np.array([0.3, -0.2, 0.4])

    def fd_lap(step):
        tot = -6.0 * tp.eval(x, eta)
        for i in range(3):
            e = np.zeros(3)
            e[i] = step
            tot += tp.eval(x + e, eta) + tp.eval(x - e, eta)
        return tot / step ** 2

    l1, l2 = fd_lap(2e-3), fd_lap(1e-3)
    assert abs(l1) < 1e-3
    assert abs(l2) < 0.5 * abs(l1) + 1e-9


def test_change_of_basis_examples():
    cob = build_change_of_basis(np.eye(3))
    assert np.allclose(cob.L, np.eye(3), atol=1e-14)
    assert np.allclose(cob.Lstar, np.diag([1.0, 1.0, -1.0]), atol=1e-14)
    assert abs(cob.detfactor - 1.0) < 1e-14
    diag = build_change_of_basis(np.diag([4.0, 1.0, 1.0]))
    assert np.allclose(diag.L, np.diag([0.5, 1.0, 1.0]), atol=1e-14)
    with pytest.raises(Exception):
        build_change_of_basis(np.diag([1.0, -2.0, 1.0]))


def test_change_of_basis_random_spd_properties():
    rng = np.random.default_rng(6)
    for _ in range(50):
        B = rng.standard_normal((3, 3))
        A0 = B @ B.T + 0.3 * np.eye(3)
        cob = ChangeOfBasis(A0)
        Linv = np.linalg.inv(cob.L)
        assert np.abs(A0 - Linv @ Linv.T).max() < 1e-12
        xi = rng.uniform(-1, 1, 3)
        assert abs((cob.L @ xi)[2] - xi[2] / cob.vnorm) < 1e-12
        assert np.allclose(cob.Lstar[:2], cob.L[:2])
        assert np.allclose(cob.Lstar[2], -cob.L[2])


def test_j_matrix():
    assert np.allclose(JMatrix(np.eye(3)).J, np.eye(3))
    assert np.allclose(j_matrix(np.diag([4.0, 1.0, 1.0])).J,
                       np.diag([0.5, 1.0, 1.0]))
    rng = np.random.default_rng(7)
    for _ in range(20):
        B = rng.standard_normal((3, 3))
        A0 = B @ B.T + 0.3 * np.eye(3)
        J = JMatrix(A0).J
        assert np.abs(J @ J - np.linalg.inv(A0)).max() < 1e-11
        assert np.allclose(J, J.T)
        assert np.linalg.eigvalsh(J).min() > 0


def test_aniso_kernel_reduces_to_isotropic():
    iso = TwoPhaseKernel(2.0, 3)
    aniso = AnisoTwoPhaseKernel(np.eye(3), 2.0)
    rng = np.random.default_rng(8)
    for _ in range(30):
        xi, eta = rng.uniform(-1, 1, (2, 3))
        if abs(xi[2]) < 1e-3 or abs(eta[2]) < 1e-3:
            continue
        assert aniso.eval(xi, eta) == pytest.approx(iso.eval(xi, eta), rel=1e-13)


def test_aniso_mid_branch_closed_form():
    rng = np.random.default_rng(9)
    B = rng.standard_normal((3, 3))
    A0 = B @ B.T + 0.5 * np.eye(3)
    ker = AnisoTwoPhaseKernel(A0, 3.0)
    for _ in range(30):
        xi = rng.uniform(-1, 1, 3)
        eta = rng.uniform(-1, 1, 3)
        xi[2] = abs(xi[2]) + 1e-3
        eta[2] = -abs(eta[2]) - 1e-3
        via_L = ker.eval(xi, eta)
        closed = ker.eval_crossing(xi, eta)
        assert via_L == pytest.approx(closed, rel=1e-12)
        # J-L consistency: <A0^{-1} d, d> = |J d|^2
        d = xi - eta
        J = JMatrix(A0).J
        assert (np.linalg.solve(A0, d) @ d) == pytest.approx(
            np.linalg.norm(J @ d) ** 2, rel=1e-12)


def test_weak_delta_pairing():
    ker = AnisoTwoPhaseKernel(np.eye(3), 2.0)
    eta = np.array([0.02, -0.03, -0.21])
    val, target = weak_delta_pairing(ker, eta, center=eta, radius=0.45)
    assert abs(val - target) < 0.01 * abs(target)
