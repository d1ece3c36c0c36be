"""Independent reference computations written with plain Python loops."""
import itertools
from fractions import Fraction


def alpha_oracle(rows):
    """rows: list over heads of lists over [act, priv, tubelets...]; head mean over tubelets, renormalized."""
    heads = len(rows)
    m = len(rows[0]) - 2
    mean = [sum(rows[h][2 + i] for h in range(heads)) / heads for i in range(m)]
    total = sum(mean)
    return [v / total for v in mean]


def topk_oracle(s, k):
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    kept = sorted(order[:k])
    return kept, sorted(set(range(len(s))) - set(kept))


def fuse_oracle(tokens, weights):
    total = sum(weights)
    d = len(tokens[0])
    return [sum(w * t[j] for w, t in zip(weights, tokens)) / total for j in range(d)]


def live_count_oracle(m0, prunes, r_num, r_den, fusion):
    """Integer-only ceil recurrence for a keep rate r_num / r_den."""
    counts = [m0]
    for _ in range(prunes):
        m = counts[-1]
        k = -(-r_num * m // r_den)
        counts.append(k + (1 if fusion and k < m else 0))
    return counts


def ap_oracle(scores, targets):
    """Precision averaged over positive ranks, ranking by (score desc, index asc)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, precisions = 0, []
    for rank, i in enumerate(order, start=1):
        if targets[i]:
            hits += 1
            precisions.append(Fraction(hits, rank))
    return sum(precisions) / len(precisions)


def ap_by_permutations(scores, targets):
    """Same AP by enumerating every permutation and keeping the one consistent with the ranking rule."""
    n = len(scores)
    for perm in itertools.permutations(range(n)):
        ok = all(scores[perm[j]] > scores[perm[j + 1]] or
                 (scores[perm[j]] == scores[perm[j + 1]] and perm[j] < perm[j + 1]) for j in range(n - 1))
        if ok:
            hits, total = 0, Fraction(0)
            for rank, i in enumerate(perm, start=1):
                if targets[i]:
                    hits += 1
                    total += Fraction(hits, rank)
            return total / sum(targets)
    raise AssertionError("no consistent ranking")


def cmap_oracle(scores, targets, use_permutations=False):
    cols = len(scores[0])
    aps = []
    for j in range(cols):
        col_t = [row[j] for row in targets]
        if not any(col_t):
            continue
        col_s = [row[j] for row in scores]
        aps.append((ap_by_permutations if use_permutations else ap_oracle)(col_s, col_t))
    return float(100 * sum(aps) / len(aps))


def f1_oracle(scores, targets, threshold=0.5):
    cols = len(scores[0])
    f1s = []
    for j in range(cols):
        col_t = [row[j] for row in targets]
        if not any(col_t):
            continue
        tp = fp = fn = 0
        for row_s, row_t in zip(scores, targets):
            pred = row_s[j] >= threshold
            tp += pred and row_t[j]
            fp += pred and not row_t[j]
            fn += (not pred) and row_t[j]
        p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f1s.append(Fraction(0) if p + r == 0 else 2 * p * r / (p + r))
    return float(sum(f1s) / len(f1s))
