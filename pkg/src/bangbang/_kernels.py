"""Compiled bang-bang sweeps used inside the duration optimizer."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def mixer_inplace(a, beta, n):
    c = math.cos(beta)
    s = 1j * math.sin(beta)
    dim = a.size
    for k in range(n):
        bit = 1 << k
        for z in range(dim):
            if z & bit == 0:
                x0 = a[z]
                x1 = a[z | bit]
                a[z] = c * x0 + s * x1
                a[z | bit] = c * x1 + s * x0


@njit(cache=True)
def cost_inplace(a, gamma, values):
    for z in range(a.size):
        a[z] *= complex(math.cos(gamma * values[z]), -math.sin(gamma * values[z]))


@njit(cache=True)
def bb_cost(start, durs, values, n):
    dim = values.size
    a = np.full(dim, 1.0 / math.sqrt(dim) + 0j)
    for i in range(durs.size):
        if durs[i] == 0.0:
            continue
        if (i + start) % 2 == 0:
            mixer_inplace(a, durs[i], n)
        else:
            cost_inplace(a, durs[i], values)
    e = 0.0
    for z in range(dim):
        e += (a[z].real ** 2 + a[z].imag ** 2) * values[z]
    return e


@njit(cache=True)
def bb_cost_grad(start, durs, values, n):
    """Energy and dF/dd_i (control Hamiltonian on each pulse)."""
    dim = values.size
    m = durs.size
    starts = np.empty((m, dim), dtype=np.complex128)
    a = np.full(dim, 1.0 / math.sqrt(dim) + 0j)
    for i in range(m):
        starts[i] = a
        if durs[i] == 0.0:
            continue
        if (i + start) % 2 == 0:
            mixer_inplace(a, durs[i], n)
        else:
            cost_inplace(a, durs[i], values)
    e = 0.0
    pi = np.empty(dim, dtype=np.complex128)
    for z in range(dim):
        e += (a[z].real ** 2 + a[z].imag ** 2) * values[z]
        pi[z] = 2.0 * values[z] * a[z]
    grad = np.empty(m)
    for i in range(m - 1, -1, -1):
        s = starts[i]
        if (i + start) % 2 == 0:
            if durs[i] != 0.0:
                mixer_inplace(pi, -durs[i], n)
            acc = 0j
            for z in range(dim):
                bz = 0j
                for k in range(n):
                    bz -= s[z ^ (1 << k)]
                acc += pi[z].conjugate() * bz
            grad[i] = acc.imag
        else:
            if durs[i] != 0.0:
                cost_inplace(pi, -durs[i], values)
            acc = 0j
            for z in range(dim):
                acc += pi[z].conjugate() * values[z] * s[z]
            grad[i] = acc.imag
    return e, grad
