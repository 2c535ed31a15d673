"""Per-element numba kernels for the local step.

Elements are processed independently and written to disjoint slots; the
only shared write is the nodal scatter, which runs in fixed element order so
results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def deformation_gradients(x, tets, g, out):
    m = tets.shape[0]
    for e in range(m):
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for a in range(4):
                    acc += x[tets[e, a], r] * g[e, a, c]
                out[e, r, c] = acc


@njit(cache=True)
def local_step(x, tets, g, w, R, rhs, max_iter, tol):
    """Update per-element rotations and scatter 2 w R g_a into ``rhs`` (zeroed here).

    Each rotation is refined in place from its warm start by up to ``max_iter``
    axis-angle ascent steps on tr(R^T F), then re-orthonormalised. Returns the
    corotational energy sum_e w_e ||F_e - R_e||^2.
    """
    m = tets.shape[0]
    rhs[:, :] = 0.0
    energy = 0.0
    for e in range(m):
        i0 = tets[e, 0]; i1 = tets[e, 1]; i2 = tets[e, 2]; i3 = tets[e, 3]
        F = np.empty((3, 3))
        for r in range(3):
            x0 = x[i0, r]; x1 = x[i1, r]; x2 = x[i2, r]; x3 = x[i3, r]
            for c in range(3):
                F[r, c] = x0 * g[e, 0, c] + x1 * g[e, 1, c] + x2 * g[e, 2, c] + x3 * g[e, 3, c]
        r00 = R[e, 0, 0]; r01 = R[e, 0, 1]; r02 = R[e, 0, 2]
        r10 = R[e, 1, 0]; r11 = R[e, 1, 1]; r12 = R[e, 1, 2]
        r20 = R[e, 2, 0]; r21 = R[e, 2, 1]; r22 = R[e, 2, 2]
        scale = 0.0
        for r in range(3):
            for c in range(3):
                scale += F[r, c] * F[r, c]
        scale = np.sqrt(scale) + 1e-300
        for it in range(max_iter):
            wx = (r10 * F[2, 0] - r20 * F[1, 0]) + (r11 * F[2, 1] - r21 * F[1, 1]) + (r12 * F[2, 2] - r22 * F[1, 2])
            wy = (r20 * F[0, 0] - r00 * F[2, 0]) + (r21 * F[0, 1] - r01 * F[2, 1]) + (r22 * F[0, 2] - r02 * F[2, 2])
            wz = (r00 * F[1, 0] - r10 * F[0, 0]) + (r01 * F[1, 1] - r11 * F[0, 1]) + (r02 * F[1, 2] - r12 * F[0, 2])
            dot = (r00 * F[0, 0] + r10 * F[1, 0] + r20 * F[2, 0]) + (r01 * F[0, 1] + r11 * F[1, 1] + r21 * F[2, 1]) + (r02 * F[0, 2] + r12 * F[1, 2] + r22 * F[2, 2])
            inv = 1.0 / (abs(dot) + 1e-9 * scale)
            wx *= inv; wy *= inv; wz *= inv
            a2 = wx * wx + wy * wy + wz * wz
            if a2 < tol * tol:
                break
            # rational rotation through the unit quaternion (1, w/2)
            hx = 0.5 * wx; hy = 0.5 * wy; hz = 0.5 * wz
            k = 2.0 / (1.0 + hx * hx + hy * hy + hz * hz)
            q00 = 1.0 - k * (hy * hy + hz * hz); q01 = k * (hx * hy - hz); q02 = k * (hx * hz + hy)
            q10 = k * (hx * hy + hz); q11 = 1.0 - k * (hx * hx + hz * hz); q12 = k * (hy * hz - hx)
            q20 = k * (hx * hz - hy); q21 = k * (hy * hz + hx); q22 = 1.0 - k * (hx * hx + hy * hy)
            n00 = q00 * r00 + q01 * r10 + q02 * r20; n10 = q10 * r00 + q11 * r10 + q12 * r20; n20 = q20 * r00 + q21 * r10 + q22 * r20
            n01 = q00 * r01 + q01 * r11 + q02 * r21; n11 = q10 * r01 + q11 * r11 + q12 * r21; n21 = q20 * r01 + q21 * r11 + q22 * r21
            n02 = q00 * r02 + q01 * r12 + q02 * r22; n12 = q10 * r02 + q11 * r12 + q12 * r22; n22 = q20 * r02 + q21 * r12 + q22 * r22
            r00 = n00; r10 = n10; r20 = n20; r01 = n01; r11 = n11; r21 = n21; r02 = n02; r12 = n12; r22 = n22
        n0 = 1.0 / np.sqrt(r00 * r00 + r10 * r10 + r20 * r20)
        r00 *= n0; r10 *= n0; r20 *= n0
        d = r00 * r01 + r10 * r11 + r20 * r21
        r01 -= d * r00; r11 -= d * r10; r21 -= d * r20
        n1 = 1.0 / np.sqrt(r01 * r01 + r11 * r11 + r21 * r21)
        r01 *= n1; r11 *= n1; r21 *= n1
        r02 = r10 * r21 - r20 * r11
        r12 = r20 * r01 - r00 * r21
        r22 = r00 * r11 - r10 * r01
        R[e, 0, 0] = r00; R[e, 0, 1] = r01; R[e, 0, 2] = r02
        R[e, 1, 0] = r10; R[e, 1, 1] = r11; R[e, 1, 2] = r12
        R[e, 2, 0] = r20; R[e, 2, 1] = r21; R[e, 2, 2] = r22
        we = w[e]
        energy += we * ((F[0, 0] - r00) ** 2 + (F[0, 1] - r01) ** 2 + (F[0, 2] - r02) ** 2
                        + (F[1, 0] - r10) ** 2 + (F[1, 1] - r11) ** 2 + (F[1, 2] - r12) ** 2
                        + (F[2, 0] - r20) ** 2 + (F[2, 1] - r21) ** 2 + (F[2, 2] - r22) ** 2)
        w2 = 2.0 * we
        for a in range(4):
            v = tets[e, a]
            g0 = g[e, a, 0]; g1 = g[e, a, 1]; g2 = g[e, a, 2]
            rhs[v, 0] += w2 * (r00 * g0 + r01 * g1 + r02 * g2)
            rhs[v, 1] += w2 * (r10 * g0 + r11 * g1 + r12 * g2)
            rhs[v, 2] += w2 * (r20 * g0 + r21 * g1 + r22 * g2)
    return energy


@njit(cache=True)
def strain_rates(F_new, F_old, dt, out):
    m = F_new.shape[0]
    for e in range(m):
        acc = 0.0
        for r in range(3):
            for c in range(3):
                d = F_new[e, r, c] - F_old[e, r, c]
                acc += d * d
        out[e] = np.sqrt(acc) / (dt * np.sqrt(3.0))


@njit(cache=True)
def scatter_blocks(slot, blocks, s, out):
    """Sum ``s_e * blocks[e]`` into CSR data slots, in element order."""
    out[:] = 0.0
    m, k = blocks.shape
    for e in range(m):
        se = s[e]
        base = e * k
        for j in range(k):
            out[slot[base + j]] += blocks[e, j] * se
