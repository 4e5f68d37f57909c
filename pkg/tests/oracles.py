"""Brute-force reference estimators, written as plain loops on purpose."""
import math


def k_mk(x, y, bank):
    d2 = sum((float(a) - float(b)) ** 2 for a, b in zip(x, y))
    return sum(beta * math.exp(-d2 / gamma) for gamma, beta in zip(bank.gammas, bank.betas))


def brute_mmd2_v(src, tgt, bank):
    m, n = len(src), len(tgt)
    ss = sum(k_mk(src[i], src[j], bank) for i in range(m) for j in range(m))
    tt = sum(k_mk(tgt[i], tgt[j], bank) for i in range(n) for j in range(n))
    st = sum(k_mk(src[i], tgt[j], bank) for i in range(m) for j in range(n))
    return ss / m**2 + tt / n**2 - 2 * st / (m * n)


def brute_mmd2_u(src, tgt, bank):
    m, n = len(src), len(tgt)
    ss = sum(k_mk(src[i], src[j], bank) for i in range(m) for j in range(m) if i != j)
    tt = sum(k_mk(tgt[i], tgt[j], bank) for i in range(n) for j in range(n) if i != j)
    st = sum(k_mk(src[i], tgt[j], bank) for i in range(m) for j in range(n))
    return ss / (m * (m - 1)) + tt / (n * (n - 1)) - 2 * st / (m * n)
