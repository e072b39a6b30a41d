"""Independent reference implementations used only by the tests.

These are deliberately naive: plain Python loops and the ``math`` module, so
they share no code paths with the vectorized library.
"""
import math


def softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def sigmoid_scalar(x):
    return 1.0 / (1.0 + math.exp(-x))


def attention_direct(Z, W1, b1, W2, b2):
    """Z as a list of tile lists (I x H); returns the attention list."""
    nu, H = len(W1), len(W1[0])
    scores = []
    for tile in Z:
        s = b2
        for j in range(nu):
            pre = b1[j] + sum(W1[j][h] * tile[h] for h in range(H))
            s += W2[j] * math.tanh(pre)
        scores.append(s)
    return softmax_list(scores)


def mil_forward_direct(Z, W1, b1, W2, b2, W, b, kind, output):
    a = attention_direct(Z, W1, b1, W2, b2)
    H, n = len(Z[0]), len(Z)
    mean = [sum(a[i] * Z[i][h] for i in range(n)) for h in range(H)]
    rep = list(mean)
    if kind == "varmil":
        c = n / (n - 1) if n > 1 else 0.0
        rep += [c * sum(a[i] * (Z[i][h] - mean[h]) ** 2 for i in range(n)) for h in range(H)]
    logits = [b[k] + sum(W[k][j] * rep[j] for j in range(len(rep))) for k in range(2)]
    if output == "sigmoid":
        return [sigmoid_scalar(v) for v in logits]
    return softmax_list(logits)


def tile_forward_direct(z, W1, b1, W2, b2, output):
    hidden = [math.tanh(b1[j] + sum(W1[j][h] * z[h] for h in range(len(z)))) for j in range(len(W1))]
    logits = [b2[k] + sum(W2[k][j] * hidden[j] for j in range(len(hidden))) for k in range(2)]
    if output == "sigmoid":
        return [sigmoid_scalar(v) for v in logits]
    return softmax_list(logits)


def auc_pairwise(scores, labels):
    """O(n^2) Mann-Whitney count as an exact fraction (wins*2 + ties, 2*P*N)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    num = 0
    for p in pos:
        for q in neg:
            num += 2 if p > q else (1 if p == q else 0)
    return num, 2 * len(pos) * len(neg)


def sobel_brute(gray):
    """Sobel magnitude with replicated borders, pixel by pixel."""
    h, w = len(gray), len(gray[0])

    def px(r, c):
        return float(gray[min(max(r, 0), h - 1)][min(max(c, 0), w - 1)])

    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    out = []
    for r in range(h):
        row = []
        for c in range(w):
            gx = sum(kx[i][j] * px(r + i - 1, c + j - 1) for i in range(3) for j in range(3))
            gy = sum(ky[i][j] * px(r + i - 1, c + j - 1) for i in range(3) for j in range(3))
            row.append(math.sqrt(gx * gx + gy * gy))
        out.append(row)
    return out


def adam_scalar(value, grads, lr, b1=0.9, b2=0.99, eps=1e-8, wd=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        value *= 1.0 - lr * wd
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        value -= lr * mhat / (math.sqrt(vhat) + eps)
    return value


def nt_xent_direct(vectors, tau):
    """Loss by explicit double summation over anchors and candidates."""
    n2 = len(vectors)
    half = n2 // 2

    def cos(u, v):
        dot = sum(x * y for x, y in zip(u, v))
        return dot / (math.sqrt(sum(x * x for x in u)) * math.sqrt(sum(y * y for y in v)))

    total = 0.0
    for i in range(n2):
        j = (i + half) % n2
        denom = sum(math.exp(cos(vectors[i], vectors[k]) / tau) for k in range(n2) if k != i)
        total += -math.log(math.exp(cos(vectors[i], vectors[j]) / tau) / denom)
    return total / n2
