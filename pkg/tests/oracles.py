"""Slow, independent reference implementations used as test oracles."""

import numpy as np


def brute_force_eer(targets, impostors):
    """Exhaustive threshold sweep with plain loops; interpolates at the FAR/FRR crossing."""
    scores = sorted(set(list(targets) + list(impostors)))
    thresholds = [scores[0] - 1.0]
    thresholds += [(a + b) / 2.0 for a, b in zip(scores, scores[1:])]
    thresholds += [scores[-1] + 1.0]
    pts = []
    for t in thresholds:
        frr = sum(1 for s in targets if s < t) / len(targets)
        far = sum(1 for s in impostors if s >= t) / len(impostors)
        pts.append((t, far, frr))
    for t, far, frr in pts:
        if far == frr:
            return far
    for (t0, a0, r0), (t1, a1, r1) in zip(pts, pts[1:]):
        if a0 - r0 > 0 > a1 - r1:
            alpha = (a0 - r0) / ((a0 - r0) - (a1 - r1))
            return r0 + alpha * (r1 - r0)
    raise AssertionError("no crossing found")


def min_bayes_error(targets, impostors):
    """Smallest prior-balanced error over every possible decision threshold."""
    t = np.sort(np.asarray(targets))
    i = np.sort(np.asarray(impostors))
    cands = np.concatenate([[-np.inf], np.sort(np.concatenate([t, i])), [np.inf]])
    best = 1.0
    for c in cands:
        miss = np.mean(t <= c)
        fa = np.mean(i > c)
        best = min(best, 0.5 * miss + 0.5 * fa)
    return best
