"""Direct-summation reference implementations used as independent test oracles."""
import math


def _dot(u, v):
    return sum(u[k] * v[k] for k in range(len(u)))


def supcon_direct(z, labels, tau=1.0):
    """Literal triple loop over anchors i, positives p and contrast set a."""
    n = len(labels)
    total, anchors = 0.0, 0
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        anchors += 1
        acc = 0.0
        for p in positives:
            # -log(exp(s_p) / sum_a exp(s_a)) written as log1p(sum_{a != p} exp(s_a - s_p))
            s_p = _dot(z[i], z[p]) / tau
            rest = sum(math.exp(_dot(z[i], z[a]) / tau - s_p) for a in range(n) if a != i and a != p)
            acc += math.log1p(rest)
        total += acc / len(positives)
    return total / anchors if anchors else 0.0


def cross_entropy_direct(logits, targets):
    n = len(targets)
    total = 0.0
    for i in range(n):
        row = logits[i]
        m = max(row)
        denom = sum(math.exp(v - m) for v in row)
        total += -((row[targets[i]] - m) - math.log(denom))
    return total / n
