"""Scalar machinery of the stability proof: logarithmic moduli omega_b,
their iterates and inverses, the geometric cascade of ball radii, and the
delta recursion that assembles the final stability budget.
"""

import json
import math

import numpy as np

E2 = math.exp(-2.0)


class StabilityError(Exception):
    pass


class OmegaWeight:
    """omega_b(t) = 2^b e^-2 |log t|^-b on (0, e^-2), constant e^-2 after."""

    def __init__(self, b):
        if b <= 0:
            raise StabilityError("omega exponent must be positive")
        self.b = float(b)

    def eval(self, t):
        t = np.asarray(t, dtype=float)
        if (t <= 0).any():
            raise StabilityError("omega domain is t > 0")
        small = t < E2
        out = np.where(small,
                       2.0 ** self.b * E2
                       * np.abs(np.log(np.where(small, t, 0.5))) ** (-self.b),
                       E2)
        return out if out.ndim else float(out)

    def iterate(self, j, t):
        """j-fold composition omega_b(omega_b(...(t)))."""
        if j < 1:
            raise StabilityError("iterate count must be >= 1")
        out = t
        for _ in range(int(j)):
            out = self.eval(out)
        return out

    def inverse(self, s):
        """t with omega_b(t) = s, for s on the strictly increasing branch."""
        s = float(s)
        if not 0.0 < s < E2:
            raise StabilityError("omega inverse needs s in (0, e^-2)")
        # |log t| = 2 (e^-2 / s)^(1/b); underflows to 0 for tiny s
        mag = 2.0 * (E2 / s) ** (1.0 / self.b)
        if mag > 745.0:
            return 0.0
        return math.exp(-mag)

    def inverse_iterate(self, j, s):
        """j-fold inverse; 0.0 signals underflow (the true value is positive
        but triply-exponentially small)."""
        out = float(s)
        for _ in range(int(j)):
            if out == 0.0:
                return 0.0
            out = self.inverse(out)
        return out


class CascadeParams:
    """Geometric cascade of ball radii approaching an interface point."""

    def __init__(self, L, r0, kmax):
        if L <= 0 or r0 <= 0 or kmax < 1:
            raise StabilityError("cascade needs L, r0 > 0 and kmax >= 1")
        self.L = float(L)
        self.r0 = float(r0)
        self.cascade_angle = math.atan(1.0 / L)            # beta
        self.beta1 = math.atan(math.sin(self.cascade_angle) / 4.0)
        s1 = math.sin(self.beta1)
        self.lam1 = r0 / (1.0 + s1)
        self.rho1 = self.lam1 * s1
        self.a = (1.0 - s1) / (1.0 + s1)
        k = np.arange(kmax)
        self.lam = self.lam1 * self.a ** k
        self.rho = self.rho1 * self.a ** k
        self.d = self.lam - self.rho

    def extend(self, kmax):
        return CascadeParams(self.L, self.r0, kmax)


def cascade(L, r0, kmax):
    return CascadeParams(L, r0, kmax)


def h_bar(c, r):
    """min{k >= 1 : d_k <= r}; the sequence is geometric so the scan ends."""
    if r > c.d[0]:
        raise StabilityError("radius %.3g exceeds d_1 = %.3g" % (r, c.d[0]))
    if r <= 0:
        raise StabilityError("radius must be positive")
    cur = c
    while cur.d[-1] > r:
        cur = cur.extend(2 * len(cur.d))
    return int(np.argmax(cur.d <= r)) + 1


class BudgetInputs:
    def __init__(self, eps, E, C, K, N=None):
        if eps < 0 or E < 0:
            raise StabilityError("discrepancies must be nonnegative")
        if C < 1:
            raise StabilityError("recursion constant must be >= 1")
        if K < 1:
            raise StabilityError("chain length must be >= 1")
        self.eps = float(eps)
        self.E = float(E)
        self.C = float(C)
        self.K = int(K)
        self.N = N


def delta_recursion(inp):
    """Propagate the boundary discrepancy through the subdomain chain.

    Returns a dict with the delta sequence, the closing bound
    C (eps+E) (omega^(K^2)(eps/(eps+E)))^(1/C), the active branch, and the
    implied Lipschitz constant 1/omega^(-K^2)(1/C) (inf when the inverse
    iterate underflows or 1/C sits on the flat branch).
    """
    eps, E, C, K = inp.eps, inp.E, inp.C, inp.K
    w = OmegaWeight(1.0 / C)
    deltas = [0.0]
    for k in range(1, K + 1):
        d = deltas[-1]
        tot = eps + d + E
        if tot == 0.0 or eps + d == 0.0:
            # omega(t) -> 0 as t -> 0+, so a vanishing discrepancy stays zero
            deltas.append(d)
            continue
        step = C * tot * w.iterate(2 * (k + 1), (eps + d) / tot) ** (1.0 / C)
        deltas.append(d + step)
    if eps + E == 0.0:
        closing = 0.0
    else:
        closing = C * (eps + E) * w.iterate(K * K, eps / (eps + E)) ** (1.0 / C) \
            if eps > 0 else 0.0
    if E <= eps * math.exp(2.0):
        branch = "trivial"
        lipschitz = math.exp(2.0)
        final = lipschitz * eps
    else:
        branch = "log-convexity"
        if 1.0 / C >= E2:
            lipschitz = math.inf      # flat branch: inverse iterate undefined
        else:
            t = w.inverse_iterate(K * K, 1.0 / C)
            lipschitz = math.inf if t == 0.0 else 1.0 / t
        final = lipschitz * eps if eps > 0 else 0.0
    return {"inputs": {"eps": eps, "E": E, "C": C, "K": K},
            "delta_sequence": deltas,
            "closing_bound": closing,
            "final_bound": final,
            "branch": branch,
            "lipschitz_constant": lipschitz}


def save_budget(report, path):
    out = {k: (v if not (isinstance(v, float) and math.isinf(v)) else "inf")
           for k, v in report.items()}
    with open(path, "w") as f:
        json.dump(out, f, indent=1, sort_keys=True)
