"""Independent reference implementations used by the tests.

Each oracle is written as directly as possible from the definition (loops,
no shared code with the package) so agreement is meaningful.
"""

import numpy as np


def auroc_pairs(known_scores, unknown_scores):
    """Fraction of (known, unknown) pairs ordered correctly; ties count one half."""
    total = 0.0
    for k in known_scores:
        for u in unknown_scores:
            if k > u:
                total += 1.0
            elif k == u:
                total += 0.5
    return total / (len(known_scores) * len(unknown_scores))


def tau_sweep(known_scores, target_tpr, floor=0.0):
    """Largest candidate threshold (>= floor) whose strict-exceedance rate meets the target."""
    n = len(known_scores)
    best = None
    for tau in sorted(set(float(s) for s in known_scores) | {float(floor)}):
        if tau < floor:
            continue
        exceed = sum(1 for s in known_scores if s > tau)
        if exceed >= target_tpr * n - 1e-9 and (best is None or tau > best):
            best = tau
    return floor if best is None else best


def ccr_sweep(known_scores, correct, target_tpr, floor=0.0):
    tau = tau_sweep(known_scores, target_tpr, floor)
    hits = sum(1 for s, c in zip(known_scores, correct) if s > tau and c)
    return hits / len(known_scores)


def sq(a, b):
    return float(sum((x - y) ** 2 for x, y in zip(a, b)))


def enumerate_triplets(emb, roles, strategy, margin):
    """Every (a, p, n) with a != p both KK, n KU, satisfying the rule; positives unrestricted."""
    out = set()
    idx = range(len(emb))
    for a in idx:
        if roles[a] != "KK":
            continue
        for p in idx:
            if p == a or roles[p] != "KK":
                continue
            dap = sq(emb[a], emb[p])
            for n in idx:
                if roles[n] != "KU":
                    continue
                dan = sq(emb[a], emb[n])
                hard = dan < dap
                semi = dap <= dan < dap + margin
                if (strategy == "hard" and hard) or (strategy == "semihard" and semi) or (
                    strategy == "combined" and (hard or semi)
                ):
                    out.add((a, p, n))
    return out


def enumerate_hardest_positive(emb, roles, margin, strategy="hard"):
    """Triplets when every anchor uses its farthest KK positive (first index on ties)."""
    out = set()
    for a in range(len(emb)):
        if roles[a] != "KK":
            continue
        p_best, d_best = None, -1.0
        for p in range(len(emb)):
            if p != a and roles[p] == "KK" and sq(emb[a], emb[p]) > d_best:
                p_best, d_best = p, sq(emb[a], emb[p])
        for n in range(len(emb)):
            if roles[n] != "KU":
                continue
            dan = sq(emb[a], emb[n])
            ok = dan < d_best if strategy == "hard" else d_best <= dan < d_best + margin
            if ok:
                out.add((a, p_best, n))
    return out


def triplet_loss_loop(emb, triplets, margin):
    if not triplets:
        return 0.0
    terms = [max(0.0, sq(emb[a], emb[p]) - sq(emb[a], emb[n]) + margin) for a, p, n in triplets]
    return sum(terms) / len(terms)


def central_difference(fn, x, h=1e-6):
    """Numerical gradient of scalar fn at float64 array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
