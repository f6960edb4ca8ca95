"""Scalar-loop reference implementations of every loss.

These are deliberately naive: plain Python floats, explicit loops, no
vectorisation and no torch. They exist so the vectorised losses can be
checked against something that shares none of their code paths.
Inputs may be numpy arrays, torch tensors or nested lists.
"""
import math

EPS = 1e-6


def _as_list(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu()
        x = (x.double() if x.is_floating_point() else x).numpy()
    if hasattr(x, "tolist"):
        return x.tolist()
    return x


def box_mean(plane, kernel):
    """Mean over a kernel x kernel window with edge-replicated borders."""
    h, w = len(plane), len(plane[0])
    r = kernel // 2
    out = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(-r, r + 1):
                ii = min(max(i + di, 0), h - 1)
                for dj in range(-r, r + 1):
                    jj = min(max(j + dj, 0), w - 1)
                    acc += plane[ii][jj]
            out[i][j] = acc / (kernel * kernel)
    return out


def weight_map(y, kernel=31):
    y = _as_list(y)
    out = []
    for img in y:
        plane = img[0]
        avg = box_mean(plane, kernel)
        out.append([[[1.0 + 5.0 * abs(avg[i][j] - plane[i][j])
                      for j in range(len(plane[0]))] for i in range(len(plane))]])
    return out


def _clamp(v):
    return min(max(v, EPS), 1.0 - EPS)


def weighted_bce(p, y, w):
    p, y, w = _as_list(p), _as_list(y), _as_list(w)
    total = 0.0
    for b in range(len(p)):
        num = den = 0.0
        for i in range(len(p[b][0])):
            for j in range(len(p[b][0][0])):
                pv = _clamp(p[b][0][i][j])
                yv = y[b][0][i][j]
                wv = w[b][0][i][j]
                num += wv * (-yv * math.log(pv) - (1.0 - yv) * math.log(1.0 - pv))
                den += wv
        total += num / den
    return total / len(p)


def weighted_iou(p, y, w):
    p, y, w = _as_list(p), _as_list(y), _as_list(w)
    total = 0.0
    for b in range(len(p)):
        inter = union = 0.0
        for i in range(len(p[b][0])):
            for j in range(len(p[b][0][0])):
                pv, yv, wv = p[b][0][i][j], y[b][0][i][j], w[b][0][i][j]
                inter += wv * pv * yv
                union += wv * (pv + yv)
        total += 1.0 - (inter + 1.0) / (union - inter + 1.0)
    return total / len(p)


def sup_loss(p, y, kernel=31):
    w = weight_map(y, kernel)
    return weighted_iou(p, y, w) + weighted_bce(p, y, w)


def similarity_term(p, target, kernel=31):
    """One direction of the similarity loss; `target` is a constant."""
    return sup_loss(p, target, kernel)


def similarity_loss(p1, p2, kernel=31):
    return 0.5 * (similarity_term(p1, p2, kernel) + similarity_term(p2, p1, kernel))


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def info_nce_all_negative(q, k, tau):
    q, k = _as_list(q), _as_list(k)
    total = 0.0
    for qj in q:
        s = 1.0
        for ki in k:
            s += math.exp(_dot(qj, ki) / tau)
        total += math.log(s)
    return total / len(q)


def _fiber(f, b, s):
    w = len(f[b][0][0])
    i, j = divmod(s, w)
    return [f[b][d][i][j] for d in range(len(f[b]))]


def _pixel_direction(fq, fk, tau, neg_index):
    bsz = len(fq)
    hw = len(fq[0][0]) * len(fq[0][0][0])
    total = 0.0
    for b in range(bsz):
        for s in range(hw):
            q = _fiber(fq, b, s)
            pos = math.exp(_dot(q, _fiber(fk, b, s)) / tau)
            if neg_index is None:
                negs = [t for t in range(hw) if t != s]
            else:
                negs = neg_index[b][s]
            den = pos
            for t in negs:
                den += math.exp(_dot(q, _fiber(fk, b, t)) / tau)
            total += -math.log(pos / den)
    return total / (bsz * hw)


def pixel_info_nce(f1, f2, tau, neg_index_12=None, neg_index_21=None):
    """Symmetrised pixel InfoNCE.

    ``neg_index_*`` are per-(image, location) lists of negative locations
    in the key map; ``None`` means every other location.
    """
    f1, f2 = _as_list(f1), _as_list(f2)
    n12 = _as_list(neg_index_12) if neg_index_12 is not None else None
    n21 = _as_list(neg_index_21) if neg_index_21 is not None else None
    return 0.5 * (_pixel_direction(f1, f2, tau, n12) + _pixel_direction(f2, f1, tau, n21))


def total_loss(components, weights):
    acc = 0.0
    for c, lam in zip(components, weights):
        acc += lam * c
    return acc


def dsc(pred, gt):
    """Dice via explicit sets of foreground coordinates."""
    pred, gt = _as_list(pred), _as_list(gt)

    def coords(m):
        out = set()
        stack = [((), m)]
        while stack:
            idx, v = stack.pop()
            if isinstance(v, list):
                for n, sub in enumerate(v):
                    stack.append((idx + (n,), sub))
            elif v:
                out.add(idx)
        return out

    a, b = coords(pred), coords(gt)
    if not a and not b:
        return 1.0
    return 2.0 * len(a & b) / (len(a) + len(b))
