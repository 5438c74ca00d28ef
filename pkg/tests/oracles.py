"""Independent oracles the tests compare library results against.

Everything here deliberately avoids the code paths under test: counting
uses plain dictionaries, eigenvalues come from Jacobi rotations rather
than power iteration, convolution is evaluated by nested loops, gradients
by central differences, and tail probabilities by quadrature of the
density instead of special functions.
"""

import math

import numpy as np
from scipy.integrate import quad


def mpa_brute_force(source_labels, target_labels, num_source, num_target):
    """(accuracy, mapping, match count) by dictionary counting and scans."""
    pair_counts = {}
    for s, t in zip(source_labels, target_labels):
        key = (int(s), int(t))
        pair_counts[key] = pair_counts.get(key, 0) + 1

    target_totals = [0] * num_target
    for (_, t), c in pair_counts.items():
        target_totals[t] += c
    global_best = 0
    for t in range(1, num_target):
        if target_totals[t] > target_totals[global_best]:
            global_best = t

    mapping = []
    for s in range(num_source):
        row = [pair_counts.get((s, t), 0) for t in range(num_target)]
        if sum(row) == 0:
            mapping.append(global_best)
            continue
        best = 0
        for t in range(1, num_target):
            if row[t] > row[best]:
                best = t
        mapping.append(best)

    matches = sum(
        1 for s, t in zip(source_labels, target_labels) if mapping[int(s)] == int(t)
    )
    return matches / len(source_labels), mapping, matches


def forward_matrix_chain(matrices, activations, x):
    """Hand-rolled forward pass: explicit matrix-vector products."""
    v = np.asarray(x, dtype=np.float64)
    for w, act in zip(matrices, activations):
        v = w @ v
        if act == "relu":
            v = np.where(v > 0, v, 0.0)
    return v


def jacobi_eigenvalues(sym, sweeps=100, tol=1e-13):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    for _ in range(sweeps):
        off = math.sqrt(sum(a[p, q] ** 2 for p in range(n) for q in range(n) if p != q))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))


def spectral_norm_oracle(matrix):
    """Largest singular value via Jacobi eigenvalues of the Gram matrix."""
    a = np.asarray(matrix, dtype=np.float64)
    gram = a.T @ a
    eigenvalues = jacobi_eigenvalues(gram)
    return math.sqrt(max(float(eigenvalues[-1]), 0.0))


def conv_direct(volume, filters, kernel_h, kernel_w, stride):
    """Valid-padding convolution by explicit loops.

    volume: (channels, height, width); filters: (out_channels, channels,
    kernel_h, kernel_w). Returns (out_channels, out_h, out_w).
    """
    channels, height, width = volume.shape
    out_channels = filters.shape[0]
    out_h = (height - kernel_h) // stride + 1
    out_w = (width - kernel_w) // stride + 1
    out = np.zeros((out_channels, out_h, out_w))
    for o in range(out_channels):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for c in range(channels):
                    for dy in range(kernel_h):
                        for dx in range(kernel_w):
                            acc += (filters[o, c, dy, dx]
                                    * volume[c, i * stride + dy, j * stride + dx])
                out[o, i, j] = acc
    return out


def cross_entropy_loss(net, inputs, labels):
    """Mean softmax cross-entropy recomputed from raw scores."""
    scores = net.scores(inputs)
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def finite_difference_gradients(net, inputs, labels, step=1e-5):
    """Central-difference gradients of the cross-entropy loss per weight."""
    grads = []
    for layer in net.layers:
        g = np.zeros_like(layer.weights)
        it = np.nditer(layer.weights, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = layer.weights[idx]
            layer.weights[idx] = original + step
            up = cross_entropy_loss(net, inputs, labels)
            layer.weights[idx] = original - step
            down = cross_entropy_loss(net, inputs, labels)
            layer.weights[idx] = original
            g[idx] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def student_t_two_tailed(t_stat, dof):
    """Two-tailed tail mass of the t distribution by quadrature."""
    log_norm = (math.lgamma((dof + 1) / 2.0) - math.lgamma(dof / 2.0)
                - 0.5 * math.log(dof * math.pi))

    def density(x):
        return math.exp(log_norm - (dof + 1) / 2.0 * math.log1p(x * x / dof))

    tail, _ = quad(density, abs(t_stat), np.inf, epsabs=1e-13, epsrel=1e-13)
    return 2.0 * tail
