"""Independent scalar-loop reference implementations.

Plain Python floats and lists only, so they share no code path with the
vectorized implementation under test.
"""

import math


def as_list(a):
    return a.tolist() if hasattr(a, "tolist") else list(a)


def vec_mat(x, W):
    """Row vector times matrix, ``W`` given as nested lists (rows = inputs)."""
    n_out = len(W[0])
    out = [0.0] * n_out
    for i, xi in enumerate(x):
        row = W[i]
        for k in range(n_out):
            out[k] += xi * row[k]
    return out


def mat_mat(A, B):
    return [vec_mat(row, B) for row in A]


def affine(x, W, b):
    return [v + bk for v, bk in zip(vec_mat(x, W), b)]


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def elu(z):
    return z if z > 0 else math.exp(z) - 1.0


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def masked_softmax(logits, mask):
    valid = [z for z, m in zip(logits, mask) if m]
    top = max(valid)
    exps = [math.exp(z - top) if m else 0.0 for z, m in zip(logits, mask)]
    total = sum(exps)
    return [e / total for e in exps]


def weighted_sum(weights, rows):
    out = [0.0] * len(rows[0])
    for w, row in zip(weights, rows):
        for k, v in enumerate(row):
            out[k] += w * v
    return out


def lstm_step(x, h, c, Wx, Wh, b):
    n = len(h)
    z = [a + bb + cc for a, bb, cc in zip(vec_mat(x, Wx), vec_mat(h, Wh), b)]
    i = [sigmoid(z[k]) for k in range(n)]
    f = [sigmoid(z[n + k]) for k in range(n)]
    g = [math.tanh(z[2 * n + k]) for k in range(n)]
    o = [sigmoid(z[3 * n + k]) for k in range(n)]
    c_new = [f[k] * c[k] + i[k] * g[k] for k in range(n)]
    h_new = [o[k] * math.tanh(c_new[k]) for k in range(n)]
    return h_new, c_new


def lstm_run(xs, Wx, Wh, b):
    n = len(Wh)
    h, c = [0.0] * n, [0.0] * n
    hs = []
    for x in xs:
        h, c = lstm_step(x, h, c, Wx, Wh, b)
        hs.append(h)
    return hs


def bilstm(xs, fwd, bwd):
    """Rows ``[h_fwd_t, h_bwd_t]`` and final ``[h_fwd_last, h_bwd_first]``."""
    hf = lstm_run(xs, *fwd)
    hb = lstm_run(xs[::-1], *bwd)[::-1]
    rows = [a + b for a, b in zip(hf, hb)]
    return rows, hf[-1] + hb[0]


def control_unit(c_prev, q, words, mask, fq_W, fq_b, cq_W, cq_b, c_w):
    q_i = affine(q, fq_W, fq_b)
    cq = [elu(v) for v in affine(c_prev + q_i, cq_W, cq_b)]
    logits = [dot([a * o for a, o in zip(cq, row)], [w[0] for w in c_w]) for row in words]
    attn = masked_softmax(logits, mask)
    return weighted_sum(attn, words), attn


def read_unit(m, keys, mask, c, m_W, m_b, k_W, k_b, mk_W, mk_b, r_w):
    fm = affine(m, m_W, m_b)
    logits = []
    for row in keys:
        fk = affine(row, k_W, k_b)
        inter = [a * b for a, b in zip(fm, fk)] + list(row)
        info = [elu(v) for v in affine(inter, mk_W, mk_b)]
        logits.append(dot([a * b for a, b in zip(c, info)], [w[0] for w in r_w]))
    attn = masked_softmax(logits, mask)
    return weighted_sum(attn, keys), attn


def fuse(reads, W, b):
    return affine([v for r in reads for v in r], W, b)


def write_unit(m, r, W, b):
    return affine(list(m) + list(r), W, b)
