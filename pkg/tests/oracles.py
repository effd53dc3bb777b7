"""Scalar brute-force references, written independently of the library code paths."""

import math


def cross_entropy(logits, labels, ignore):
    """logits: nested lists [B][C][H][W]; labels: [B][H][W]."""
    total, count = 0.0, 0
    for b in range(len(logits)):
        for i in range(len(labels[b])):
            for j in range(len(labels[b][i])):
                y = labels[b][i][j]
                if y == ignore:
                    continue
                column = [logits[b][c][i][j] for c in range(len(logits[b]))]
                m = max(column)
                lse = m + math.log(sum(math.exp(v - m) for v in column))
                total += lse - column[y]
                count += 1
    return total / count if count else 0.0


def distance(x, y):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)))


def hinge(a, p, n, mu):
    return max(0.0, distance(a, p) - distance(a, n) + mu)


def cosine(x, y):
    nx = math.sqrt(sum(v * v for v in x))
    ny = math.sqrt(sum(v * v for v in y))
    return sum(a * b for a, b in zip(x, y)) / max(nx * ny, 1e-16)


def iou_sets(pred, gt, ignore, classes):
    """Per-class IoU via explicit pixel-coordinate sets; None when both sets are empty."""
    out = {}
    valid = {(i, j) for i in range(len(gt)) for j in range(len(gt[0])) if gt[i][j] != ignore}
    for c in classes:
        p = {ij for ij in valid if pred[ij[0]][ij[1]] == c}
        g = {ij for ij in valid if gt[ij[0]][ij[1]] == c}
        union = p | g
        out[c] = len(p & g) / len(union) if union else None
    return out


def central_difference(f, x, eps=1e-4):
    """Gradient of scalar f at a flat list x."""
    grad = []
    for k in range(len(x)):
        up = list(x)
        down = list(x)
        up[k] += eps
        down[k] -= eps
        grad.append((f(up) - f(down)) / (2 * eps))
    return grad
