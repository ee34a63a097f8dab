"""Shared oracles for the test suite."""
import numpy as np


def finite_difference_check(objective, column, batch, probes=20, step=1e-5, seed=0, floor=1e-6):
    """Largest relative error between analytic gradients and central
    differences at ``probes`` random parameter entries."""
    rng = np.random.default_rng(seed)
    _, grads = objective(column, batch)[:2]
    sizes = np.array([p.size for p in column.params])
    worst = 0.0
    for _ in range(probes):
        i = int(rng.choice(len(sizes), p=sizes / sizes.sum()))
        j = int(rng.integers(column.params[i].size))
        flat = column.params[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up = objective(column, batch)[0]
        flat[j] = orig - step
        down = objective(column, batch)[0]
        flat[j] = orig
        numeric = (up - down) / (2 * step)
        analytic = grads[i].reshape(-1)[j]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def brute_force_auc(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))
