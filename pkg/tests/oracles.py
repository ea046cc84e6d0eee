"""Naive pure-Python reference implementations.

Plain loops over nested lists with the ``math`` module only; nothing here
touches torch or the package under test.
"""

import math


def norm(v):
    return math.sqrt(sum(x * x for x in v))


def cosine(a, b):
    return sum(x * y for x, y in zip(a, b)) / (norm(a) * norm(b))


def log_softmax_at(row, j, tau):
    m = max(x / tau for x in row)
    lse = m + math.log(sum(math.exp(x / tau - m) for x in row))
    return row[j] / tau - lse


def softmax(row, tau):
    m = max(x / tau for x in row)
    e = [math.exp(x / tau - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def global_loss(S, y, tau):
    B = len(S)
    return -sum(log_softmax_at(S[i], y[i], tau) for i in range(B)) / B


def local_loss(S_patch, y, tau):
    B, P = len(S_patch), len(S_patch[0])
    total = 0.0
    for i in range(B):
        for n in range(P):
            total += log_softmax_at(S_patch[i][n], y[i], tau)
    return -total / (B * P)


def patch_mean(S_patch):
    B, P, C = len(S_patch), len(S_patch[0]), len(S_patch[0][0])
    return [[sum(S_patch[i][n][c] for n in range(P)) / P for c in range(C)] for i in range(B)]


def adjacency(means, tau):
    C = len(means)
    G = []
    for i in range(C):
        row = [math.exp(cosine(means[i], means[j]) / tau) for j in range(C)]
        s = sum(row)
        G.append([x / s for x in row])
    return G


def dsg(F, G):
    C = len(F)
    total = 0.0
    for i in range(C):
        for j in range(C):
            total += G[i][j] * sum((a - b) ** 2 for a, b in zip(F[i], F[j]))
    return total / C ** 2


def kl(teacher, student, tau):
    B = len(teacher)
    total = 0.0
    for i in range(B):
        p = softmax(teacher[i], tau)
        q = softmax(student[i], tau)
        total += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    return total / B


def mse(F, T):
    C = len(F)
    return sum(sum((a - b) ** 2 for a, b in zip(F[c], T[c])) for c in range(C)) / C


def row_mean(rows):
    n = len(rows)
    return [sum(r[k] for r in rows) / n for k in range(len(rows[0]))]
