"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np


def brute_nn(q, target):
    """Exhaustive scan; ties resolve to the lowest index."""
    best_i, best_d = -1, math.inf
    for i, p in enumerate(target):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(q, p))
        if d < best_d:
            best_i, best_d = i, d
    return best_i, best_d


def brute_chamfer(s1, s2):
    a = sum(brute_nn(x, s2)[1] for x in s1) / len(s1)
    b = sum(brute_nn(y, s1)[1] for y in s2) / len(s2)
    return a + b


def brute_precision_recall(s_gt, s, eta):
    prec = sum(math.sqrt(brute_nn(x, s)[1]) <= eta for x in s_gt) / len(s_gt)
    rec = sum(math.sqrt(brute_nn(y, s_gt)[1]) <= eta for y in s) / len(s)
    return prec, rec


def vectorized_chamfer(s1, s2):
    """Dense O(n*m) matrix version for larger inputs."""
    d = ((np.asarray(s1)[:, None, :] - np.asarray(s2)[None, :, :]) ** 2).sum(-1)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def euler_linear_factor(n):
    """Closed form of n forward Euler steps of dz/dt = z."""
    return (1.0 + 1.0 / n) ** n


def vectorized_precision_recall(s_gt, s, eta):
    d = np.sqrt(((np.asarray(s_gt)[:, None, :] - np.asarray(s)[None, :, :]) ** 2).sum(-1))
    return float(np.mean(d.min(axis=1) <= eta)), float(np.mean(d.min(axis=0) <= eta))
