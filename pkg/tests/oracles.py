"""Pure-Python scalar reference implementations (loops over plain floats)."""
import cmath
import math


def as_lists(t):
    return t.detach().double().tolist()


def rel_l2(u_hat, u, eps=1e-8):
    """One sample: nested lists of equal shape."""
    num = den = 0.0
    for rh, r in zip(u_hat, u):
        for x, y in zip(rh, r):
            num += (y - x) ** 2
            den += y * y
    return math.sqrt(num) / max(math.sqrt(den), eps)


def masked_ratio(x_hat, x, M, eps=1e-8):
    num = den = 0.0
    for rh, r, rm in zip(x_hat, x, M):
        for p, q, m in zip(rh, r, rm):
            h = 1.0 - m
            num += (h * (p - q)) ** 2
            den += (h * q) ** 2
    return num / (den + eps)


def spatial(a_hat, u_hat, a, u, Ma, Mu, eps=1e-8):
    """Batch mean of per-sample masked ratios for a and u."""
    B = len(a)
    return sum(masked_ratio(a_hat[b], a[b], Ma[b], eps) + masked_ratio(u_hat[b], u[b], Mu[b], eps)
               for b in range(B)) / B


def dft_mag(x):
    H, W = len(x), len(x[0])
    out = [[0.0] * W for _ in range(H)]
    for k in range(H):
        for l in range(W):
            s = 0j
            for m in range(H):
                for n in range(W):
                    s += x[m][n] * cmath.exp(-2j * math.pi * (k * m / H + l * n / W))
            out[k][l] = abs(s)
    return out


def freq(F_hat, a, eps=1e-8):
    B = len(a)
    total = 0.0
    for b in range(B):
        T = dft_mag(a[b])
        num = sum((p - q) ** 2 for rp, rq in zip(F_hat[b], T) for p, q in zip(rp, rq))
        den = sum(q * q for rq in T for q in rq)
        total += math.sqrt(num) / max(math.sqrt(den), eps)
    return total / B


def _unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / max(n, 1e-12) for x in v]


def supcon(z_a, z_u, labels, tau, lam=0.0, theta=0.7):
    """Per-anchor -log(pos / (all others + lam * hard)), averaged over anchors with positives."""
    B = len(z_a)
    A = [_unit(v) for v in z_a]
    U = [_unit(v) for v in z_u]
    S = [[sum(x * y for x, y in zip(A[i], U[j])) / tau for j in range(B)] for i in range(B)]
    losses = []
    for i in range(B):
        pos = sum(math.exp(S[i][j]) for j in range(B) if j != i and labels[j] == labels[i])
        if pos == 0.0:
            continue
        allo = sum(math.exp(S[i][j]) for j in range(B) if j != i)
        hard = sum(math.exp(S[i][j]) for j in range(B) if labels[j] != labels[i] and S[i][j] > theta)
        losses.append(-math.log(pos / (allo + lam * hard)))
    return sum(losses) / len(losses) if losses else 0.0


def consistency(z_a, z_u, e, z_m, labels, l1, l2, l3, tau, lam=0.0, theta=0.7):
    return (l1 * supcon(z_a, z_u, labels, tau, lam, theta)
            + l2 * supcon(z_u, e, labels, tau, lam, theta)
            + l3 * supcon(z_a, z_m, labels, tau, lam, theta))


def diversity(keys, lambda4):
    N = len(keys)
    if N < 2:
        return 0.0
    s = 0.0
    for i in range(N):
        for j in range(N):
            if i != j:
                s += sum(x * y for x, y in zip(keys[i], keys[j])) ** 2
    return lambda4 * s / (N * (N - 1))


def retrieve(query, W_q, keys, values, quality, k, tau, alpha):
    """Full sort by projected similarity, softmax restricted to the top k."""
    d = len(query)
    q = [sum(W_q[r][c] * query[c] for c in range(d)) for r in range(d)]
    sims = [sum(x * y for x, y in zip(q, key)) for key in keys]
    order = sorted(range(len(keys)), key=lambda j: -sims[j])[:min(k, len(keys))]
    logits = [sims[j] / tau + alpha * quality[j] for j in order]
    m = max(logits)
    ex = [math.exp(v - m) for v in logits]
    Z = sum(ex)
    w = [v / Z for v in ex]
    z_a = [sum(w[t] * keys[j][c] for t, j in enumerate(order)) for c in range(d)]
    z_u = [sum(w[t] * values[j][c] for t, j in enumerate(order)) for c in range(d)]
    return order, w, z_a, z_u
