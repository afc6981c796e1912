"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (scalar loops, exhaustive
enumeration, finite differences) and stays independent of the library code
paths it checks.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# gradient checking (64-bit central finite differences)


def numeric_gradients(f, arrays, h=1e-3):
    """d f / d array for each float64 array, via central differences."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f()
            flat[i] = orig - h
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    """Largest |a - n| / max(|a|, |n|, 0.1) over all elements."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 0.1)
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


def check_gradients(build, params, rtol=1e-4):
    """Assert backprop through build() matches finite differences.

    ``build`` must return a scalar Tensor recomputed from the given float64
    parameter tensors on every call (so perturbations take effect).
    """
    out = build()
    for p in params:
        p.grad = None
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = numeric_gradients(lambda: float(build().item()), [p.data for p in params])
    err = max_relative_error(analytic, numeric)
    assert err < rtol, f"gradient mismatch: relative error {err:.3e} >= {rtol}"
    return err


# ---------------------------------------------------------------------------
# attention / scoring / loss oracles (scalar loops)


def naive_attention(q, k, v, mask, heads):
    """Loop-based multi-head attention over float64 arrays."""
    n, d = q.shape
    dh = d // heads
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = []
            for j in range(n):
                if mask[i, j]:
                    scores.append((j, float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(dh)))
            m = max(s for _, s in scores)
            exps = [(j, math.exp(s - m)) for j, s in scores]
            z = sum(e for _, e in exps)
            for j, e in exps:
                out[i, sl] += (e / z) * v[j, sl]
    return out


def naive_segment_probs(hyp, query, alpha, beta):
    """Scalar-loop version of the calibrated max-dot-product probability."""
    n = hyp.shape[0]
    r = np.zeros(n)
    for i in range(n):
        best = -np.inf
        for k in range(query.shape[0]):
            best = max(best, float(np.dot(hyp[i], query[k])))
        r[i] = 1.0 / (1.0 + math.exp(-(alpha * best + beta)))
    return r


def naive_loss(r, labels, weights, l_hat, l_target, length_weight):
    """BCE over weighted positions plus the squared length error, in float64."""
    total, norm = 0.0, 0.0
    for ri, yi, wi in zip(r, labels, weights):
        if wi == 0:
            continue
        total += wi * -(yi * math.log(ri) + (1.0 - yi) * math.log(1.0 - ri))
        norm += wi
    return total / norm + length_weight * (l_hat - l_target) ** 2


# ---------------------------------------------------------------------------
# detector oracle: exhaustive span enumeration + per-run argmax


def brute_force_hits(r, pad, min_len, threshold, tie_eps=1e-9):
    """All spans meeting the conditions, grouped by maximal run, best kept.

    Candidates are spans (i, j) with every position above threshold and
    length >= min_len; within each maximal run the best mean wins. Means
    within tie_eps count as equal and the tie goes to the longer span, then
    the smaller start.
    """
    n = len(r)
    active = [(r[i] > threshold) and not pad[i] for i in range(n)]
    run_id = [-1] * n
    current = -1
    for i in range(n):
        if active[i]:
            if i == 0 or not active[i - 1]:
                current += 1
            run_id[i] = current

    def better(cand, best):
        if cand[0] > best[0] + tie_eps:
            return True
        if abs(cand[0] - best[0]) <= tie_eps:
            return (cand[2], -cand[1]) > (best[2], -best[1])  # longer, then smaller start
        return False

    prefix = [0.0]
    for x in r:
        prefix.append(prefix[-1] + float(x))
    best = {}
    for i in range(n):
        if not active[i]:
            continue
        for j in range(i + min_len - 1, n):
            if not active[j] or run_id[j] != run_id[i]:
                break
            mean = (prefix[j + 1] - prefix[i]) / (j - i + 1)
            key = run_id[i]
            cand = (mean, i, j - i + 1)
            if key not in best or better(cand, best[key][0]):
                best[key] = (cand, (i, j, mean))
    return [span for _, span in sorted(best.values(), key=lambda kv: kv[1][0])]


# ---------------------------------------------------------------------------
# metrics oracles


def exhaustive_match_counts(hits, refs, match_overlap):
    """Maximum-cardinality one-to-one hit/ref assignment per query."""
    from itertools import permutations

    queries = {r.query_id for r in refs} | {h.query_id for h in hits}
    counts = {}
    for q in queries:
        q_hits = [h for h in hits if h.query_id == q]
        q_refs = [r for r in refs if r.query_id == q]
        allowed = np.zeros((len(q_hits), len(q_refs)), dtype=bool)
        for i, h in enumerate(q_hits):
            for j, r in enumerate(q_refs):
                if h.utt != r.utt:
                    continue
                inter = min(h.end, r.end) - max(h.start, r.start)
                if inter >= match_overlap * (r.end - r.start):
                    allowed[i, j] = True
        best = 0
        if q_hits and q_refs:
            smaller = min(len(q_hits), len(q_refs))
            if len(q_refs) <= len(q_hits):
                for perm in permutations(range(len(q_hits)), len(q_refs)):
                    best = max(best, sum(allowed[perm[j], j] for j in range(len(q_refs))))
            else:
                for perm in permutations(range(len(q_refs)), len(q_hits)):
                    best = max(best, sum(allowed[i, perm[i]] for i in range(len(q_hits))))
            best = min(best, smaller)
        counts[q] = (best, len(q_hits) - best, len(q_refs) - best)
    return counts


def grid_mtwv(hits, refs, cfg, step=1e-4):
    """Dense-grid threshold sweep; returns the best TWV found."""
    from termspot.metrics import twv

    best = -np.inf
    for threshold in np.arange(step, 1.0 + step, step):
        value = twv(hits, refs, cfg, float(threshold))
        best = max(best, value)
    return best
