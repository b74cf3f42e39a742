"""Independent brute-force references used by the tests.

Everything here loops over triangles and quadrature points explicitly and
builds dense matrices, sharing no assembly code with the package.
"""
import math

import numpy as np

# 7-point degree-5 rule on the reference triangle (independent of the package's rule)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_W0, _W1, _W2 = 0.225, 0.132394152788506, 0.125939180544827
BARY7 = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
W7 = np.array([_W0] + [_W1] * 3 + [_W2] * 3)
GAUSS4 = np.polynomial.legendre.leggauss(4)
# the wall term g'(phi) is not polynomial, so it is integrated with the
# same 3-point Gauss order the package uses
GAUSS3 = np.polynomial.legendre.leggauss(3)


def tri_data(p):
    """Area and barycentric gradients of a triangle with vertex array p (3,2)."""
    T = np.array([[1, 1, 1], [p[0, 0], p[1, 0], p[2, 0]], [p[0, 1], p[1, 1], p[2, 1]]])
    inv = np.linalg.inv(T)
    area = 0.5 * abs(np.linalg.det(T))
    return area, inv[:, 1:]          # rows: grad lambda_a


def surf_g1(phi, theta):
    return -(math.sqrt(2) * math.pi / 6) * math.cos(math.radians(theta)) * np.cos(0.5 * math.pi * phi)


def dense_phase_step(mesh, phi, q, u, wall_theta, params, S):
    """Dense bordered solve of the phase step: returns (phi_next, xi).

    ``wall_theta`` maps wall tag -> contact angle for walls with the contact
    line condition.  The auxiliary-variable term uses vertex quadrature.
    """
    N = mesh.n_nodes
    dt, M, eps, lam = params.dt, params.M, params.eps, params.lam
    A = np.zeros((N + 1, N + 1))
    b = np.zeros(N + 1)
    ux, uy = u[:N], u[N:]
    for tri in mesh.triangles:
        p = mesh.nodes[tri]
        area, g = tri_data(p)
        gphi = phi[tri] @ g
        D = 1.0 / (1.0 + lam * dt / M * gphi @ gphi)
        for lam_q, w in zip(BARY7, W7):
            uq = np.array([ux[tri] @ lam_q, uy[tri] @ lam_q])
            adv = uq @ gphi
            for a in range(3):
                b[tri[a]] += area * w * (D * phi[tri] @ lam_q / dt - D * adv) * lam_q[a]
                for c in range(3):
                    A[tri[a], tri[c]] += area * w * D / dt * lam_q[a] * lam_q[c]
        for a in range(3):
            for c in range(3):
                A[tri[a], tri[c]] += area * M * eps * g[a] @ g[c]
            # vertex rule for the auxiliary-variable terms
            i = tri[a]
            A[i, i] += area / 3 * M * 2 / eps * phi[i] ** 2
            b[i] -= area / 3 * M * (phi[i] * q[i] - 2 / eps * phi[i] ** 3)
            A[i, N] += area / 3 * M
            A[N, i] += area / 3
    b[N] = A[N, :N] @ phi
    x3, w3 = GAUSS3
    s3, w3 = 0.5 * (x3 + 1), 0.5 * w3
    x, w = GAUSS4
    s, w = 0.5 * (x + 1), 0.5 * w
    for (i, j), tag in zip(mesh.boundary_edges, mesh.edge_tags):
        if int(tag) not in wall_theta:
            continue
        theta = wall_theta[int(tag)]
        L = np.linalg.norm(mesh.nodes[j] - mesh.nodes[i])
        for sk, wk in zip(s3, w3):
            basis = np.array([1 - sk, sk])
            ph = basis @ phi[[i, j]]
            for a, na in enumerate((i, j)):
                b[na] -= L * wk * M * surf_g1(ph, theta) * basis[a]
        for sk, wk in zip(s, w):
            basis = np.array([1 - sk, sk])
            ph = basis @ phi[[i, j]]
            for a, na in enumerate((i, j)):
                b[na] += L * wk * M * S * ph * basis[a]
                for c, nc in enumerate((i, j)):
                    A[na, nc] += L * wk * M * S * basis[a] * basis[c]
    sol = np.linalg.solve(A, b)
    return sol[:N], sol[N]
