"""Weight-norm computations and the capacity terms of the risk bounds.

The dense capacity value combines per-layer spectral norms with (2,1)-norm
distances from reference matrices; the convolutional capacity value works
on unrolled convolution matrices and activation patch norms. Reports keep
the empirical, capacity, and confidence terms separate because the bounds
only hold up to unspecified universal constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tinynet import ConvLayer, DenseLayer, InitSnapshot, Network

__all__ = [
    "SingularLayerError",
    "DegenerateActivationError",
    "MarginRangeError",
    "NormProfile",
    "ConvUnrolled",
    "BoundReport",
    "spectral_norm",
    "norm_21",
    "frobenius",
    "norm_profile",
    "capacity_fc",
    "conv_unroll",
    "patch_norms",
    "capacity_conv",
    "assemble_bound_report",
]


class SingularLayerError(ValueError):
    """A norm in a denominator is zero, leaving a capacity term undefined."""


class DegenerateActivationError(ValueError):
    """All-zero activations make a patch-norm denominator vanish."""


class MarginRangeError(ValueError):
    """Requested margin falls outside the feasible range; carries gamma_bar."""

    def __init__(self, gamma: float, gamma_bar: float):
        super().__init__(
            f"margin {gamma} outside the feasible range (0, {gamma_bar}]"
        )
        self.gamma = gamma
        self.gamma_bar = gamma_bar


def _as_finite_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("expected a non-empty 2-D matrix")
    if not np.isfinite(a).all():
        raise ValueError("matrix entries must be finite")
    return a


def spectral_norm(a, rel_tol: float = 1e-10, max_iter: int = 1000) -> float:
    """Largest singular value by power iteration on the Gram matrix.

    Deterministic: the start vector is all ones (normalized), and iteration
    stops once successive Rayleigh quotients agree to ``rel_tol`` relative
    or after ``max_iter`` rounds. If the ones vector happens to lie in the
    null space, canonical basis vectors are tried in order instead.
    """
    a = _as_finite_matrix(a)
    gram = a.T @ a
    dim = gram.shape[0]
    v = np.ones(dim) / math.sqrt(dim)
    w = gram @ v
    if np.linalg.norm(w) == 0.0:
        for j in range(dim):
            v = np.zeros(dim)
            v[j] = 1.0
            w = gram @ v
            if np.linalg.norm(w) != 0.0:
                break
        else:
            return 0.0
    rayleigh = float(v @ w)
    for _ in range(max_iter):
        v = w / np.linalg.norm(w)
        w = gram @ v
        previous, rayleigh = rayleigh, float(v @ w)
        if abs(rayleigh - previous) <= rel_tol * max(abs(rayleigh), 1e-300):
            break
    return math.sqrt(max(rayleigh, 0.0))


def norm_21(a) -> float:
    """Sum over columns of the column Euclidean norms.

    Pass the transpose to take row norms instead, as the convolutional
    capacity term does.
    """
    a = _as_finite_matrix(a)
    return float(np.linalg.norm(a, axis=0).sum())


def frobenius(a) -> float:
    return float(np.linalg.norm(_as_finite_matrix(a)))


def max_row_norm(a) -> float:
    """Largest Euclidean norm over the rows."""
    a = _as_finite_matrix(a)
    return float(np.linalg.norm(a, axis=1).max())


@dataclass(frozen=True)
class NormProfile:
    """Per-layer norms of a network against its reference matrices."""

    frobenius_norms: tuple[float, ...]
    spectral_norms: tuple[float, ...]
    distance_21_norms: tuple[float, ...]  # ||A - M||_{2,1} per layer
    final_max_row_norm: float
    spectral_product: float  # over all layers but the last


def norm_profile(net: Network, references: InitSnapshot) -> NormProfile:
    references.check_shapes(net)
    weights = [l.weights for l in net.layers]
    fro = tuple(frobenius(w) for w in weights)
    spec = tuple(spectral_norm(w) for w in weights)
    dist = tuple(norm_21(w - m) for w, m in zip(weights, references.matrices))
    return NormProfile(
        frobenius_norms=fro,
        spectral_norms=spec,
        distance_21_norms=dist,
        final_max_row_norm=max_row_norm(weights[-1]),
        spectral_product=float(np.prod(spec[:-1])) if len(spec) > 1 else 1.0,
    )


def capacity_fc(weights, references) -> float:
    """Capacity value for fully connected networks.

    With L layers, final-layer max row norm b, spectral norms s_i, and
    displacement (2,1)-norms d_i = ||A_i - M_i||_{2,1}:

        L * b * prod(s_i, i<L)
          * ( sum(d_i^{2/3} / s_i^{2/3}, i<L) + ||A_L||_Fr^{2/3} / b^{2/3} )^{3/2}
    """
    weights = [_as_finite_matrix(w) for w in weights]
    refs = [_as_finite_matrix(m) for m in references]
    if len(weights) != len(refs):
        raise ValueError("need one reference matrix per layer")
    for w, m in zip(weights, refs):
        if w.shape != m.shape:
            raise ValueError("reference shape does not match layer shape")
    depth = len(weights)
    final = weights[-1]
    row_bound = max_row_norm(final)
    if row_bound == 0.0:
        raise SingularLayerError("final layer is all zeros")
    total = (frobenius(final) / row_bound) ** (2.0 / 3.0)
    spectral_product = 1.0
    for w, m in zip(weights[:-1], refs[:-1]):
        s = spectral_norm(w)
        if s == 0.0:
            raise SingularLayerError("zero spectral norm below the final layer")
        spectral_product *= s
        total += (norm_21(w - m) / s) ** (2.0 / 3.0)
    return depth * row_bound * spectral_product * total ** 1.5


@dataclass(frozen=True)
class ConvUnrolled:
    """Expanded convolution matrix acting on flattened input volumes."""

    matrix: np.ndarray
    layer: ConvLayer


def conv_unroll(layer: ConvLayer) -> ConvUnrolled:
    """Repeat the filter weights once per application position.

    The resulting matrix applied to a C-order flattened input equals the
    pre-activation convolution output, also C-order flattened.
    """
    kh, kw, s = layer.kernel_height, layer.kernel_width, layer.stride
    oh, ow = layer.out_height, layer.out_width
    hw = layer.in_height * layer.in_width
    big = np.zeros((layer.out_channels * oh * ow, layer.in_dim))
    for oc in range(layer.out_channels):
        kernel = layer.weights[oc].reshape(layer.in_channels, kh, kw)
        for r in range(oh):
            for c in range(ow):
                row = (oc * oh + r) * ow + c
                for ic in range(layer.in_channels):
                    for dy in range(kh):
                        col = ic * hw + (r * s + dy) * layer.in_width + c * s
                        big[row, col:col + kw] = kernel[ic, dy]
    return ConvUnrolled(big, layer)


def _patch_columns(consumer, activation: np.ndarray) -> np.ndarray:
    """Patches of an activation batch as seen by its consuming layer."""
    if isinstance(consumer, ConvLayer):
        return consumer.extract_patches(activation)
    # A dense consumer reads the whole vector: one patch per example.
    return activation[:, :, None]


def patch_norms(net: Network, inputs) -> tuple[float, ...]:
    """Largest patch Euclidean norm at every depth of the network.

    Entry j is the maximum over inputs (and patch positions) of the norm of
    any patch of the depth-j activations, where depth 0 is the raw input
    and the patch geometry is the consuming layer's. The final entry, for
    the output scores, uses the whole vector since nothing consumes them;
    dense consumers likewise read their input as a single patch.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or len(inputs) == 0:
        raise ValueError("need a non-empty (n, d) input batch")
    acts = net.activations(inputs)
    consumers = list(net.layers) + [None]
    values = []
    for act, consumer in zip(acts, consumers):
        if consumer is None:
            norms = np.linalg.norm(act, axis=1)
        else:
            norms = np.linalg.norm(_patch_columns(consumer, act), axis=1)
        values.append(float(norms.max()))
    return tuple(values)


def _sigma_prime(layer) -> float:
    """Operator norm of a layer for the chained capacity products.

    Convolutional layers use the spectral norm of the unrolled matrix;
    there is no pooling, so no row deletion is involved. Dense layers use
    the plain spectral norm.
    """
    if isinstance(layer, ConvLayer):
        return spectral_norm(conv_unroll(layer).matrix)
    return spectral_norm(layer.weights)


def capacity_conv(net: Network, references: InitSnapshot, patch_bounds,
                  gamma: float) -> tuple[float, tuple[float, ...]]:
    """Capacity value for convolutional networks, with per-layer terms.

    For layer i (1-based) below the final layer L, with patch norms B,
    spatial width w_i (output positions; 1 for dense layers), and sigma'
    the chained operator norms (the final layer contributing its max row
    norm, its activation being the identity):

        T_i = B[i-1] * ||(A_i - M_i)^T||_{2,1} * sqrt(w_i)
                * max over U in {i..L} of prod(sigma'_u, u=i+1..U) / B[U]
        T_L = B[L-1] * ||A_L - M_L||_Fr / gamma

    and the capacity value is (sum_i T_i^{2/3})^{3/2}.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    references.check_shapes(net)
    depth = net.depth
    bounds_b = tuple(float(b) for b in patch_bounds)
    if len(bounds_b) != depth + 1:
        raise ValueError(f"need {depth + 1} patch norms, got {len(bounds_b)}")

    sigma = [None]  # 1-based
    for i, layer in enumerate(net.layers, start=1):
        if i < depth:
            sigma.append(_sigma_prime(layer))
        else:
            sigma.append(max_row_norm(layer.weights))

    terms = []
    for i, layer in enumerate(net.layers[:-1], start=1):
        displacement = layer.weights - references.matrices[i - 1]
        width = layer.num_patches if isinstance(layer, ConvLayer) else 1
        best = 0.0
        product = 1.0
        for u in range(i, depth + 1):
            if u > i:
                product *= sigma[u]
            if bounds_b[u] == 0.0:
                raise DegenerateActivationError(
                    f"zero patch norm at depth {u} in a denominator"
                )
            best = max(best, product / bounds_b[u])
        terms.append(norm_21(displacement.T) * bounds_b[i - 1] * math.sqrt(width) * best)

    final_displacement = net.layers[-1].weights - references.matrices[-1]
    terms.append(bounds_b[depth - 1] * frobenius(final_displacement) / gamma)
    total = sum(t ** (2.0 / 3.0) for t in terms) ** 1.5
    return total, tuple(terms)


@dataclass(frozen=True)
class BoundReport:
    """Assembled right-hand side of a risk bound, term by term.

    ``capacity_term`` is the capacity value times its scale factor
    (max input norm * capacity * log(max width) / (gamma * sqrt(n)) for
    dense networks, capacity * log(max width) / sqrt(n) for convolutional
    ones) and ``confidence_term`` is sqrt(log(1/delta)/n). The caveat flag
    records that every reported value omits unspecified universal
    constants, so the terms must not be summed into a single number.
    """

    setting: str
    network_kind: str
    empirical_part: float
    source_risk: float | None
    mpa: float
    capacity: float
    capacity_term: float
    confidence_term: float
    gamma: float
    delta: float
    n: int
    max_input_norm: float
    max_width: int
    per_layer_terms: tuple[float, ...] | None
    up_to_constants: bool = True

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "network_kind": self.network_kind,
            "empirical_part": self.empirical_part,
            "source_risk": self.source_risk,
            "mpa": self.mpa,
            "capacity": self.capacity,
            "capacity_term": self.capacity_term,
            "confidence_term": self.confidence_term,
            "gamma": self.gamma,
            "delta": self.delta,
            "n": self.n,
            "max_input_norm": self.max_input_norm,
            "max_width": self.max_width,
            "per_layer_terms": list(self.per_layer_terms)
            if self.per_layer_terms is not None else None,
            "up_to_constants": self.up_to_constants,
        }


def assemble_bound_report(outcome, delta: float, gamma: float,
                          zero_reference: bool = False) -> BoundReport:
    """Evaluate every term of the applicable risk bound for one outcome.

    The empirical part is exact: source risk plus one minus the MPA in the
    shared-inputs setting, one minus the MPA alone in the different-inputs
    setting (the source risk is already folded into the dummy-label MPA).
    ``gamma`` must fall inside the feasibility range established by the
    outcome's assumption report. With ``zero_reference`` the reference
    matrices are zeros instead of the recorded initialization.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie strictly between 0 and 1")
    gamma_bar = outcome.assumption.gamma_bar
    if not 0.0 < gamma <= gamma_bar:
        raise MarginRangeError(gamma, gamma_bar)

    net = outcome.target_model
    references = outcome.init_snapshot
    if zero_reference:
        references = InitSnapshot(tuple(np.zeros_like(m) for m in references.matrices))
    references.check_shapes(net)

    n = outcome.n_target
    convolutional = any(isinstance(l, ConvLayer) for l in net.layers)
    log_width = math.log(net.max_width)
    if convolutional:
        capacity, per_layer = capacity_conv(net, references, outcome.patch_bounds, gamma)
        capacity_term = capacity * log_width / math.sqrt(n)
    else:
        capacity = capacity_fc([l.weights for l in net.layers], references.matrices)
        per_layer = None
        capacity_term = (
            outcome.max_input_norm * capacity * log_width / (gamma * math.sqrt(n))
        )

    if outcome.setting == "shared_inputs":
        empirical = outcome.source_risk + 1.0 - outcome.mpa
        source_risk = outcome.source_risk
    else:
        empirical = 1.0 - outcome.mpa
        source_risk = None

    return BoundReport(
        setting=outcome.setting,
        network_kind="conv" if convolutional else "dense",
        empirical_part=empirical,
        source_risk=source_risk,
        mpa=outcome.mpa,
        capacity=capacity,
        capacity_term=capacity_term,
        confidence_term=math.sqrt(math.log(1.0 / delta) / n),
        gamma=gamma,
        delta=delta,
        n=n,
        max_input_norm=outcome.max_input_norm,
        max_width=net.max_width,
        per_layer_terms=per_layer,
    )
