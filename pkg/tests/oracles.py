"""Independent reference computations used as test oracles.

Plain-Python arithmetic only, so they share no code path with the
vectorised implementations they check.
"""

import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def loss(kind, reg, w, x, y):
    m = dot(x, w)
    ridge = 0.5 * reg * dot(w, w)
    if kind == "quadratic":
        return 0.5 * (m - y) ** 2 + ridge
    z = -y * m
    # log(1 + e^z) without overflow
    return (z + math.log1p(math.exp(-z)) if z > 0 else math.log1p(math.exp(z))) + ridge


def central_difference(f, w, h=1e-5):
    out = []
    for i in range(len(w)):
        up = list(w)
        dn = list(w)
        up[i] += h
        dn[i] -= h
        out.append((f(up) - f(dn)) / (2 * h))
    return out


def grad(kind, reg, w, x, y):
    m = dot(x, w)
    if kind == "quadratic":
        c = m - y
    else:
        c = -y / (1.0 + math.exp(y * m))
    return [c * xi + reg * wi for xi, wi in zip(x, w)]


def mean_vectors(vs):
    n = len(vs)
    return [sum(v[i] for v in vs) / n for i in range(len(vs[0]))]


def norm(v):
    return math.sqrt(dot(v, v))
