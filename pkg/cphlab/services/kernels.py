"""
Goal: numba-compiled inner loop for lambda dynamics.

The Python side packs every site's bias into flat arrays (see dynamics.pack_system)
and pre-draws the thermostat noise, so a chunk of steps runs without touching
Python objects. Same inputs give the same floating-point sequence on every run.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

WALL_LO = -0.1
WALL_HI = 1.1
DIVERGENCE_LIMIT = 10.0
NEAR_LOW = 0.2
NEAR_HIGH = 0.8

# spline slots per site
SPLINE_P, SPLINE_T_PROT, SPLINE_T_DEPROT = 0, 1, 2


@njit(cache=True)
def spline_value(x, c, ends, lam):
    """Hermite segments on knots x; linear continuation past the end knots."""
    last = x.shape[0] - 1
    if lam <= x[0]:
        return ends[0] + ends[1] * (lam - x[0]), ends[1]
    if lam >= x[last]:
        return ends[2] + ends[3] * (lam - x[last]), ends[3]
    seg = 0
    while seg < last - 1 and lam >= x[seg + 1]:
        seg += 1
    d = lam - x[seg]
    a3 = c[seg, 0]
    a2 = c[seg, 1]
    a1 = c[seg, 2]
    a0 = c[seg, 3]
    return ((a3 * d + a2) * d + a1) * d + a0, (3.0 * a3 * d + 2.0 * a2) * d + a1


@njit(cache=True)
def wall_value(k, lam):
    if lam > WALL_HI:
        d = lam - WALL_HI
        return k * d**4, 4.0 * k * d**3
    if lam < WALL_LO:
        d = WALL_LO - lam
        return k * d**4, -4.0 * k * d**3
    return 0.0, 0.0


@njit(cache=True)
def poly2d_value(coef, lp, lt):
    """sum c[i, j] lp^i lt^j with both partials, nested Horner."""
    v = 0.0
    gp = 0.0
    gt = 0.0
    for i in range(coef.shape[0] - 1, -1, -1):
        r = 0.0
        dr = 0.0
        for j in range(coef.shape[1] - 1, -1, -1):
            dr = dr * lt + r
            r = r * lt + coef[i, j]
        gp = gp * lp + v
        v = v * lp + r
        gt = gt * lp + dr
    return v, gp, gt


@njit(cache=True)
def system_energy_grad(
    lp, lt, poly, dg, sx, sc, se, wall_k, g_taut, has_t, w, J, chain_shift, chain_state, gp, gt
):
    """Total lambda energy; fills gp/gt with dE/dlp and dE/dlt."""
    n = lp.shape[0]
    e = 0.0
    for i in range(n):
        x = lp[i]
        y = lt[i]
        pv, pgp, pgt = poly2d_value(poly[i], x, y)
        e += pv + x * dg[i] + w[i] * x
        gpi = pgp + dg[i] + w[i]
        gti = 0.0
        sv, sg = spline_value(sx[i, SPLINE_P], sc[i, SPLINE_P], se[i, SPLINE_P], x)
        wv, wg = wall_value(wall_k[i], x)
        e += sv + wv
        gpi += sg + wg
        if has_t[i]:
            # the two lt wells are blended linearly in lp and the offset is g*lp*lt,
            # so the force stays continuous across lp = 0.5
            gti = pgt
            a0, da0 = spline_value(sx[i, SPLINE_T_PROT], sc[i, SPLINE_T_PROT], se[i, SPLINE_T_PROT], y)
            a1, da1 = spline_value(sx[i, SPLINE_T_DEPROT], sc[i, SPLINE_T_DEPROT], se[i, SPLINE_T_DEPROT], y)
            tv, tg = wall_value(wall_k[i], y)
            g = g_taut[i]
            e += (1.0 - x) * a0 + x * a1 + g * x * y + tv
            gpi += a1 - a0 + g * y
            gti += (1.0 - x) * da0 + x * da1 + g * x + tg
        for c in range(chain_state.shape[0]):
            s = chain_state[c]
            e += chain_shift[c, s, i] * x
            gpi += chain_shift[c, s, i]
        gp[i] = gpi
        gt[i] = gti
    for i in range(n):
        for j in range(i + 1, n):
            if J[i, j] != 0.0:
                e += J[i, j] * lp[i] * lp[j]
                gp[i] += J[i, j] * lp[j]
                gp[j] += J[i, j] * lp[i]
    return e


@njit(cache=True)
def half_kick(v, grad, mass, active, half):
    """v -= half * dE/dx / m on the active coordinates."""
    for i in range(v.shape[0]):
        if active[i]:
            v[i] -= half * grad[i] / mass[i]


@njit(cache=True)
def drift(x, v, active, dt):
    for i in range(x.shape[0]):
        if active[i]:
            x[i] += dt * v[i]


@njit(cache=True)
def kinetic_energy(v, mass, active):
    k = 0.0
    for i in range(v.shape[0]):
        if active[i]:
            k += 0.5 * mass[i] * v[i] * v[i]
    return k


@njit(cache=True)
def bussi_alpha(kinetic, target, nf, c, r1, s):
    """Canonical velocity-rescaling factor for total kinetic energy `kinetic`."""
    if kinetic <= 0.0:
        return 1.0
    new = kinetic * c + (1.0 - c) * target * (s + r1 * r1) / nf + 2.0 * r1 * math.sqrt(
        kinetic * target * c * (1.0 - c) / nf
    )
    alpha = math.sqrt(max(new, 0.0) / kinetic)
    if c < 1.0 and r1 + math.sqrt(c * nf * kinetic / ((1.0 - c) * target)) < 0.0:
        alpha = -alpha
    return alpha


@njit(cache=True)
def integrate_chunk(
    lp, lt, vp, vt, mass, active_p, has_t,
    poly, dg, sx, sc, se, wall_k, g_taut, w, J, chain_shift, chain_path,
    step0, stride, dt, kt, c_thermo, thermo_on, r1, snoise,
    frame_lp, frame_lt, frame_step, acc,
):
    """
    Velocity Verlet + stochastic velocity rescaling for len(r1) steps.
    A frame is written before every step whose global index is a multiple of
    `stride`. acc[i] collects (n near 0, sum lp near 0, n near 1, sum lp near 1)
    for lp per step. Returns (frames written, failing step or -1).
    """
    n = lp.shape[0]
    n_steps = r1.shape[0]
    gp = np.zeros(n)
    gt = np.zeros(n)
    n_chain = chain_path.shape[0]
    state = np.zeros(n_chain, np.int64)
    for c in range(n_chain):
        state[c] = chain_path[c, 0]
    nf = 0
    for i in range(n):
        if active_p[i]:
            nf += 1
        if has_t[i]:
            nf += 1
    target = 0.5 * nf * kt
    half = 0.5 * dt
    system_energy_grad(lp, lt, poly, dg, sx, sc, se, wall_k, g_taut, has_t, w, J, chain_shift, state, gp, gt)
    nframe = 0
    for k in range(n_steps):
        step = step0 + k
        if step % stride == 0:
            for i in range(n):
                frame_lp[nframe, i] = lp[i]
                frame_lt[nframe, i] = lt[i]
            frame_step[nframe] = step
            nframe += 1
        for i in range(n):
            x = lp[i]
            if x < NEAR_LOW:
                acc[i, 0] += 1.0
                acc[i, 1] += x
            elif x > NEAR_HIGH:
                acc[i, 2] += 1.0
                acc[i, 3] += x
        half_kick(vp, gp, mass, active_p, half)
        half_kick(vt, gt, mass, has_t, half)
        drift(lp, vp, active_p, dt)
        drift(lt, vt, has_t, dt)
        for c in range(n_chain):
            state[c] = chain_path[c, k + 1]
        system_energy_grad(lp, lt, poly, dg, sx, sc, se, wall_k, g_taut, has_t, w, J, chain_shift, state, gp, gt)
        half_kick(vp, gp, mass, active_p, half)
        half_kick(vt, gt, mass, has_t, half)
        if thermo_on and nf > 0:
            kinetic = kinetic_energy(vp, mass, active_p) + kinetic_energy(vt, mass, has_t)
            alpha = bussi_alpha(kinetic, target, nf, c_thermo, r1[k], snoise[k])
            for i in range(n):
                vp[i] *= alpha
                vt[i] *= alpha
        for i in range(n):
            if abs(lp[i]) > DIVERGENCE_LIMIT or abs(lt[i]) > DIVERGENCE_LIMIT or not math.isfinite(lp[i] + lt[i]):
                return nframe, step
    return nframe, -1
