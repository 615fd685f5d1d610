"""Jitted vehicle equations for the digital twin.

Kept free of Python objects so numba can compile it. Everything is expressed in
deviations from static equilibrium, so the zero state at rest is an exact fixed
point for any mass and CM.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# state layout
VX, VY, VZ, WX, WY, WZ, ROLL, PITCH, HEAVE = range(9)
OM = 9          # wheel spin rates fl, fr, rl, rr
ZU = 13         # unsprung vertical displacement
VU = 17         # unsprung vertical velocity
NX = 21

# input layout
U_STEER, U_DRIVE, U_BRAKE, U_ZF, U_ZR = range(5)
NU = 5

# parameter-vector layout
(P_M, P_JXX, P_JYY, P_JZZ, P_LF, P_LR, P_H, P_DY, P_TRACK, P_MU, P_KSF, P_KSR,
 P_CSF, P_CSR, P_KARBF, P_KARBR, P_KT, P_R, P_JW, P_CAERO, P_CR,
 P_BX, P_CX, P_DX, P_EX, P_BY, P_CY, P_DYT, P_EY, P_LOADSENS, P_FZNOM,
 P_BRAKEF, P_VFLOOR, P_WEPS, P_STEER_RATIO, P_G) = range(36)
NP = 36


@njit(cache=True)
def _magic(b, c, d, e, s):
    bs = b * s
    return d * math.sin(c * math.atan(bs - e * (bs - math.atan(bs))))


@njit(cache=True)
def forces(x, u, p, out):
    """Fill ``out`` with [sum Fx body, sum Fy body, Mz, Fx_i(4), Fy_i(4), Fz_i(4)].

    Aero drag is included in the first entry.
    """
    m = p[P_M]
    lf = p[P_LF]
    lr = p[P_LR]
    t2 = 0.5 * p[P_TRACK]
    dy = p[P_DY]
    g = p[P_G]
    wb = lf + lr
    delta = u[U_STEER] / p[P_STEER_RATIO]
    cd = math.cos(delta)
    sd = math.sin(delta)
    vx = x[VX]
    vy = x[VY]
    wz = x[WZ]
    fx_sum = 0.0
    fy_sum = 0.0
    mz = 0.0
    for i in range(4):
        front = i < 2
        left = (i % 2) == 0
        xi = lf if front else -lr
        yi = (t2 if left else -t2) - dy
        axle = lr / wb if front else lf / wb
        side = (0.5 + dy / p[P_TRACK]) if left else (0.5 - dy / p[P_TRACK])
        fz0 = m * g * axle * side
        road = u[U_ZF] if front else u[U_ZR]
        fz = fz0 + p[P_KT] * (road - x[ZU + i])
        if fz < 0.0:
            fz = 0.0
        # contact-point velocity, rotated into the wheel frame
        vxi = vx - wz * yi
        vyi = vy + wz * xi
        if front:
            vxw = vxi * cd + vyi * sd
            vyw = -vxi * sd + vyi * cd
        else:
            vxw = vxi
            vyw = vyi
        rw = p[P_R] * x[OM + i]
        den = max(abs(rw), abs(vxw), p[P_VFLOOR])
        lam = (rw - vxw) / den
        alpha = math.atan(vyw / max(abs(vxw), p[P_VFLOOR]))
        scale = 1.0 - p[P_LOADSENS] * (fz / p[P_FZNOM] - 1.0)
        fxw = fz * _magic(p[P_BX], p[P_CX], p[P_DX] * scale, p[P_EX], lam)
        fyw = -fz * _magic(p[P_BY], p[P_CY], p[P_DYT] * scale, p[P_EY], alpha)
        # friction ellipse
        cap_x = p[P_DX] * scale * fz
        cap_y = p[P_DYT] * scale * fz
        if cap_x > 0.0 and cap_y > 0.0:
            r = math.sqrt((fxw / cap_x) ** 2 + (fyw / cap_y) ** 2)
            if r > 1.0:
                fxw /= r
                fyw /= r
        if front:
            fxb = fxw * cd - fyw * sd
            fyb = fxw * sd + fyw * cd
        else:
            fxb = fxw
            fyb = fyw
        fx_sum += fxb
        fy_sum += fyb
        mz += xi * fyb - yi * fxb
        out[3 + i] = fxw
        out[7 + i] = fyw
        out[11 + i] = fz
    fx_sum -= p[P_CAERO] * vx * abs(vx)
    out[0] = fx_sum
    out[1] = fy_sum
    out[2] = mz


@njit(cache=True)
def deriv(x, u, p, dx, f):
    m = p[P_M]
    lf = p[P_LF]
    lr = p[P_LR]
    t2 = 0.5 * p[P_TRACK]
    dy = p[P_DY]
    h = p[P_H]
    g = p[P_G]
    mu = p[P_MU]
    ms = m - 4.0 * mu
    forces(x, u, p, f)
    fx = f[0]
    fy = f[1]
    mz = f[2]
    dx[VX] = fx / m + x[VY] * x[WZ]
    dx[VY] = fy / m - x[VX] * x[WZ]
    dx[WZ] = mz / p[P_JZZ]

    # suspension: deviation forces on the body (upward positive)
    heave_f = 0.0
    roll_m = 0.0
    pitch_m = 0.0
    dfs = np.empty(4)
    for i in range(4):
        front = i < 2
        left = (i % 2) == 0
        xi = lf if front else -lr
        yi = (t2 if left else -t2) - dy
        zc = x[HEAVE] - xi * x[PITCH] + yi * x[ROLL]
        vc = x[VZ] - xi * x[WY] + yi * x[WX]
        ks = p[P_KSF] if front else p[P_KSR]
        cs = p[P_CSF] if front else p[P_CSR]
        dfs[i] = ks * (x[ZU + i] - zc) + cs * (x[VU + i] - vc)
    # anti-roll bars act on left/right compression difference
    for a in range(2):
        il = 2 * a
        ir = 2 * a + 1
        xi = lf if a == 0 else -lr
        comp_l = x[ZU + il] - (x[HEAVE] - xi * x[PITCH] + (t2 - dy) * x[ROLL])
        comp_r = x[ZU + ir] - (x[HEAVE] - xi * x[PITCH] + (-t2 - dy) * x[ROLL])
        k = p[P_KARBF] if a == 0 else p[P_KARBR]
        farb = k * (comp_l - comp_r)
        dfs[il] += farb
        dfs[ir] -= farb
    for i in range(4):
        front = i < 2
        left = (i % 2) == 0
        xi = lf if front else -lr
        yi = (t2 if left else -t2) - dy
        heave_f += dfs[i]
        roll_m += yi * dfs[i]
        pitch_m -= xi * dfs[i]
    fx_tires = fx + p[P_CAERO] * x[VX] * abs(x[VX])
    roll_m += h * fy
    pitch_m -= h * fx_tires
    dx[VZ] = heave_f / ms
    dx[WX] = roll_m / p[P_JXX]
    dx[WY] = pitch_m / p[P_JYY]
    dx[ROLL] = x[WX]
    dx[PITCH] = x[WY]
    dx[HEAVE] = x[VZ]

    # wheels
    drive = 0.5 * max(u[U_DRIVE], 0.0)
    brake = max(u[U_BRAKE], 0.0)
    bf = 0.5 * brake * p[P_BRAKEF]
    br = 0.5 * brake * (1.0 - p[P_BRAKEF])
    for i in range(4):
        front = i < 2
        om = x[OM + i]
        sgn = math.tanh(om / p[P_WEPS])
        fz = f[11 + i]
        tq = -(bf if front else br) * sgn - p[P_R] * f[3 + i] - p[P_R] * p[P_CR] * fz * sgn
        if not front:
            tq += drive
        dx[OM + i] = tq / p[P_JW]
        # unsprung vertical
        axle = lr / (lf + lr) if front else lf / (lf + lr)
        dx[ZU + i] = x[VU + i]
        dfz = fz - m * g * axle * ((0.5 + dy / p[P_TRACK]) if (i % 2) == 0 else (0.5 - dy / p[P_TRACK]))
        dx[VU + i] = (dfz - dfs[i]) / mu


@njit(cache=True)
def rk4(x, u, p, dt, nsub):
    h = dt / nsub
    y = x.copy()
    k1 = np.empty(NX)
    k2 = np.empty(NX)
    k3 = np.empty(NX)
    k4 = np.empty(NX)
    tmp = np.empty(NX)
    f = np.empty(15)
    for _ in range(nsub):
        deriv(y, u, p, k1, f)
        for j in range(NX):
            tmp[j] = y[j] + 0.5 * h * k1[j]
        deriv(tmp, u, p, k2, f)
        for j in range(NX):
            tmp[j] = y[j] + 0.5 * h * k2[j]
        deriv(tmp, u, p, k3, f)
        for j in range(NX):
            tmp[j] = y[j] + h * k3[j]
        deriv(tmp, u, p, k4, f)
        for j in range(NX):
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return y


@njit(cache=True)
def outputs(x, u, p, y):
    """Measurement vector: a_x a_y a_z w_x w_y w_z w_fl w_fr w_rl w_rr."""
    dx = np.empty(NX)
    f = np.empty(15)
    deriv(x, u, p, dx, f)
    m = p[P_M]
    y[0] = f[0] / m
    y[1] = f[1] / m
    y[2] = p[P_G] + dx[VZ]
    y[3] = x[WX]
    y[4] = x[WY]
    y[5] = x[WZ]
    for i in range(4):
        y[6 + i] = x[OM + i]
