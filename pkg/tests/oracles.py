"""Frozen brute-force reference implementations used to check the library.

Everything here is deliberately written in plain Python scalar loops
(no numpy vectorization, no shared helpers from the package) so each
function is an independent derivation of the same math.  Slow is fine;
these run on tiny inputs.
"""

from __future__ import annotations

import math


# ------------------------------------------------------------ geometry


def scaled_size_reference(width: int, height: int, scale: int) -> tuple[int, int]:
    """Aspect-preserving resize with the smallest side exactly ``scale``.

    The longer side is rounded half away from zero.
    """

    def round_half_away(num: int, den: int) -> int:
        # num/den >= 0 here; emulate round-half-away-from-zero exactly.
        q, r = divmod(2 * num + den, 2 * den)
        return q

    if width <= height:
        return scale, round_half_away(height * scale, width)
    return round_half_away(width * scale, height), scale


# ------------------------------------------------------- normalization


def spatial_normalize_reference(map3d, epsilon=1e-12):
    """Per-channel division by the spatial max magnitude, scalar loops."""
    h = len(map3d)
    w = len(map3d[0])
    c = len(map3d[0][0])
    out = [[[0.0] * c for _ in range(w)] for _ in range(h)]
    for ch in range(c):
        peak = 0.0
        for i in range(h):
            for j in range(w):
                peak = max(peak, abs(map3d[i][j][ch]))
        denom = max(peak, epsilon)
        for i in range(h):
            for j in range(w):
                out[i][j][ch] = map3d[i][j][ch] / denom
    return out


def channel_normalize_reference(map3d, epsilon=1e-12):
    """Per-position division by the channel max magnitude, scalar loops."""
    h = len(map3d)
    w = len(map3d[0])
    c = len(map3d[0][0])
    out = [[[0.0] * c for _ in range(w)] for _ in range(h)]
    for i in range(h):
        for j in range(w):
            peak = 0.0
            for ch in range(c):
                peak = max(peak, abs(map3d[i][j][ch]))
            denom = max(peak, epsilon)
            for ch in range(c):
                out[i][j][ch] = map3d[i][j][ch] / denom
    return out


# ---------------------------------------------------------- projection


def project_reference(mean, basis, points):
    """(x - mean) @ basis.T with explicit loops."""
    out = []
    for x in points:
        centered = [x[j] - mean[j] for j in range(len(mean))]
        row = []
        for b in basis:
            row.append(sum(b[j] * centered[j] for j in range(len(centered))))
        out.append(row)
    return out


# ------------------------------------------------------------- mixture


def gmm_responsibilities_reference(weights, means, variances, points):
    """Posterior component probabilities via direct density ratios.

    No log-space tricks: densities are computed plainly, which is exact
    enough for the small well-conditioned instances the tests build.
    """
    K = len(weights)
    d = len(means[0])
    gamma = []
    for x in points:
        dens = []
        for k in range(K):
            log_den = 0.0
            for j in range(d):
                var = variances[k][j]
                diff = x[j] - means[k][j]
                log_den += -0.5 * (math.log(2.0 * math.pi * var) + diff * diff / var)
            dens.append(weights[k] * math.exp(log_den))
        total = sum(dens)
        gamma.append([v / total for v in dens])
    return gamma


def fisher_vector_reference(weights, means, variances, points):
    """Double-loop Fisher encoding, interleaved [u_1, v_1, ..., u_K, v_K]."""
    K = len(weights)
    d = len(means[0])
    n = len(points)
    gamma = gmm_responsibilities_reference(weights, means, variances, points)
    out = []
    for k in range(K):
        u = [0.0] * d
        v = [0.0] * d
        for i in range(n):
            for j in range(d):
                z = (points[i][j] - means[k][j]) / math.sqrt(variances[k][j])
                u[j] += gamma[i][k] * z
                v[j] += gamma[i][k] * (z * z - 1.0)
        for j in range(d):
            u[j] /= n * math.sqrt(weights[k])
            v[j] /= n * math.sqrt(2.0 * weights[k])
        out.extend(u)
        out.extend(v)
    return out


# ------------------------------------------------------- fisher norms


def intra_normalize_reference(fv, K, d, per_gaussian=False):
    """Blockwise l2 normalization with explicit slicing."""
    block = 2 * d if per_gaussian else d
    out = list(fv)
    for start in range(0, 2 * K * d, block):
        norm = math.sqrt(sum(v * v for v in fv[start : start + block]))
        if norm > 0.0:
            for i in range(start, start + block):
                out[i] = fv[i] / norm
    return out


def power_l2_reference(vec):
    """Signed square root then global l2, scalar loops."""
    rooted = [math.copysign(math.sqrt(abs(v)), v) if v != 0.0 else 0.0 for v in vec]
    norm = math.sqrt(sum(v * v for v in rooted))
    if norm <= 1e-12:
        return rooted
    return [v / norm for v in rooted]


# ----------------------------------------------------------- ranking


def average_precision_reference(scores, labels):
    """Stepwise integral of the full precision-recall polyline.

    Ranks sort by score descending with ties broken by input index; the
    polyline is walked rank by rank and the precision is accumulated at
    every recall step (i.e. at every positive).
    """
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    total_pos = sum(1 for flag in labels if flag)
    hits = 0
    area = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            recall_step = 1.0 / total_pos
            precision = hits / rank
            area += precision * recall_step
    return area


def average_precision_trapezoid_reference(scores, labels):
    """Trapezoidal variant: average consecutive precisions per recall step."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    total_pos = sum(1 for flag in labels if flag)
    hits = 0
    area = 0.0
    prev_precision = 1.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            precision = hits / rank
            area += 0.5 * (precision + prev_precision) / total_pos
            prev_precision = precision
    return area


def worst_case_ap(positives: int, total: int) -> float:
    """Step AP of the ranking that places every positive last."""
    return sum(
        i / (total - positives + i) for i in range(1, positives + 1)
    ) / positives


def evaluate_reference(matrix, labels):
    """Per-class AP + mAP + top-1 composed from the scalar oracles."""
    classes = len(matrix[0])
    per_class = {}
    for k in range(classes):
        flags = [label == k for label in labels]
        if not any(flags):
            continue
        per_class[k] = average_precision_reference(
            [row[k] for row in matrix], flags
        )
    mean_ap = sum(per_class.values()) / len(per_class)
    correct = 0
    for row, label in zip(matrix, labels):
        best = 0
        for k in range(1, classes):
            if row[k] > row[best]:
                best = k
        if best == label:
            correct += 1
    return per_class, mean_ap, correct / len(labels)


# -------------------------------------------------------------- linear


def scores_reference(weights, biases, feature):
    return [
        sum(w[j] * feature[j] for j in range(len(feature))) + b
        for w, b in zip(weights, biases)
    ]


def svm_subgradient_reference(x, y, C, epochs=2000):
    """Full-batch subgradient descent on 1/2||w||^2 + C sum hinge.

    The bias rides along as an always-1 coordinate, regularized, exactly
    as in the library's objective.  Step size 1/t gives the usual
    O(1/t) convergence; accuracy (not weights) is what callers compare.
    """
    n = len(x)
    d = len(x[0]) + 1
    aug = [list(row) + [1.0] for row in x]
    w = [0.0] * d
    for t in range(1, epochs + 1):
        grad = list(w)
        for i in range(n):
            margin = y[i] * sum(w[j] * aug[i][j] for j in range(d))
            if margin < 1.0:
                for j in range(d):
                    grad[j] -= C * y[i] * aug[i][j]
        lr = 1.0 / t
        for j in range(d):
            w[j] -= lr * grad[j]
    return w


def svm_ovr_accuracy_reference(x_train, y_train, x_test, y_test, classes, C):
    """One-vs-rest accuracy of the subgradient trainer."""
    models = []
    for k in range(classes):
        yk = [1.0 if label == k else -1.0 for label in y_train]
        models.append(svm_subgradient_reference(x_train, yk, C))
    correct = 0
    for x, label in zip(x_test, y_test):
        aug = list(x) + [1.0]
        scores = [
            sum(w[j] * aug[j] for j in range(len(aug))) for w in models
        ]
        best = 0
        for k in range(1, classes):
            if scores[k] > scores[best]:
                best = k
        if best == label:
            correct += 1
    return correct / len(y_test)


# -------------------------------------------------------------- pooling


def sum_pool_reference(vectors):
    out = [0.0] * len(vectors[0])
    for vec in vectors:
        for j, v in enumerate(vec):
            out[j] += v
    return out


def logsumexp_reference(values):
    peak = max(values)
    return peak + math.log(sum(math.exp(v - peak) for v in values))
