"""Direct, loop-based definitions used as test oracles. Deliberately naive."""
import math


def pehe(tau_hat, tau):
    total = 0.0
    for a, b in zip(tau_hat, tau):
        total += (a - b) ** 2
    return total / len(tau)


def eps_ate(tau_hat, tau):
    return abs(sum(tau_hat) / len(tau_hat) - sum(tau) / len(tau))


def _mean(xs):
    return sum(xs) / len(xs)


def _pvar(xs):
    m = _mean(xs)
    return sum((x - m) ** 2 for x in xs) / len(xs)


def variance_stats(tau_hat, labels, K):
    groups = []
    for k in range(K):
        members = [v for v, lab in zip(tau_hat, labels) if lab == k]
        if members:
            groups.append(members)
    within = _mean([_pvar(g) for g in groups])
    across = _pvar([_mean(g) for g in groups])
    return within, across


def _wmoments(column, weights):
    if len(set(column)) == 1:
        return column[0], 0.0
    s = sum(weights)
    mean = sum(w * x for w, x in zip(weights, column)) / s
    var = sum(w * (x - mean) ** 2 for w, x in zip(weights, column)) / s
    return mean, var


def smd(case, control, wc=None, wk=None):
    wc = wc if wc is not None else [1.0] * len(case)
    wk = wk if wk is not None else [1.0] * len(control)
    out = []
    for j in range(len(case[0])):
        m1, v1 = _wmoments([r[j] for r in case], wc)
        m0, v0 = _wmoments([r[j] for r in control], wk)
        pooled = math.sqrt((v1 + v0) / 2)
        if pooled > 0:
            out.append((m1 - m0) / pooled)
        else:
            out.append(0.0 if m1 == m0 else math.inf)
    return out


def weighted_auc(labels, scores, weights):
    num = den = 0.0
    for i in range(len(labels)):
        if not labels[i]:
            continue
        for j in range(len(labels)):
            if labels[j]:
                continue
            w = weights[i] * weights[j]
            den += w
            if scores[i] > scores[j]:
                num += w
            elif scores[i] == scores[j]:
                num += 0.5 * w
    return num / den


def bh_adjust(p):
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    out = [0.0] * m
    for rank, i in enumerate(order, start=1):
        best = min(p[order[j - 1]] * m / j for j in range(rank, m + 1))
        out[i] = min(best, 1.0)
    return out


def trial_mean_ci(values, z=1.96):
    n = len(values)
    m = _mean(values)
    sd = math.sqrt(sum((v - m) ** 2 for v in values) / (n - 1))
    half = z * sd / math.sqrt(n)
    return m, m - half, m + half


def normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
