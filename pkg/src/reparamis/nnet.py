"""Minimal dense-MLP engine used by the sampler and pdf networks.

Everything here is plain float64 numpy. Three differentiation modes are
provided, all hand-written for the fixed layer structure:

* ``forward`` — primal evaluation.
* ``forward_with_input_jacobian`` — forward-mode dual propagation of input
  tangents, yielding the Jacobian of the outputs with respect to a chosen
  subset of input dimensions.
* ``backward`` / ``backward_through_jacobian`` — reverse-mode parameter
  gradients. The second form backpropagates through the dual (tangent)
  computation as well, which requires second derivatives of the
  activations; this is what makes losses involving the input Jacobian
  trainable.

Parameter layout is frozen for bit-exact serialization: for each layer in
order, the weight matrix (out x in, row-major) followed by the bias vector.
"""

from __future__ import annotations

import ctypes
import ctypes.util
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit
from scipy.special import expit

HIDDEN_ACTIVATIONS = ("silu", "relu")
OUTPUT_ACTIVATIONS = ("none", "exp", "softplus_last")
INIT_SCHEMES = ("standard", "identity")

_allocator_tuned = False


def tune_allocator():
    """Keep large buffers in the glibc heap so training temporaries recycle.

    Fresh multi-MB numpy temporaries otherwise come from mmap and pay page
    faults on every touch, which dominates the small-MLP training step.
    No-op where mallopt is unavailable.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError, TypeError):
        pass


class TrainingDivergedError(RuntimeError):
    """Raised when an optimizer step encounters non-finite values."""


@dataclass(frozen=True)
class MlpSpec:
    """Shape and activation description of a dense MLP.

    ``layer_sizes`` runs input-first, output-last and must contain at least
    one hidden layer. ``output_activation`` applies to the last layer only;
    ``softplus_last`` softplus-transforms the final output component and
    leaves the rest linear.
    """

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "silu"
    output_activation: str = "none"
    init: str = "standard"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 3:
            raise ValueError("MlpSpec needs at least one hidden layer")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("all layer sizes must be >= 1")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def layer_dims(self):
        """(fan_in, fan_out) pairs, one per layer."""
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims())

    def activation_of(self, layer: int) -> str:
        return self.hidden_activation if layer < self.num_layers - 1 else self.output_activation


@dataclass
class MlpParams:
    """Flat parameter vector tied to its spec.

    ``layers()`` returns (W, b) views into the flat vector, so optimizer
    updates on ``flat`` are visible to all evaluation functions.
    """

    spec: MlpSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.num_params,):
            raise ValueError(
                f"parameter vector has length {self.flat.shape}, "
                f"spec requires {self.spec.num_params}"
            )

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        off = 0
        for fan_in, fan_out in self.spec.layer_dims():
            w = self.flat[off : off + fan_in * fan_out].reshape(fan_out, fan_in)
            off += fan_in * fan_out
            b = self.flat[off : off + fan_out]
            off += fan_out
            out.append((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.flat.copy())


def init_params(spec: MlpSpec, seed) -> MlpParams:
    """Draw initial parameters.

    ``standard``: weights uniform on +-sqrt(3/fan_in) (unit-variance
    propagation for these small SiLU nets), biases uniform on
    +-1/sqrt(fan_in). ``identity``: same, except the final layer is zeroed so
    the network output vanishes and a skip connection realizes the identity.
    """
    rng = np.random.default_rng(seed)
    flat = np.empty(spec.num_params)
    off = 0
    last = spec.num_layers - 1
    for layer, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        wlim = np.sqrt(3.0 / fan_in)
        blim = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-wlim, wlim, size=fan_in * fan_out)
        b = rng.uniform(-blim, blim, size=fan_out)
        if spec.init == "identity" and layer == last:
            w[:] = 0.0
            b[:] = 0.0
        flat[off : off + w.size] = w
        off += w.size
        flat[off : off + b.size] = b
        off += b.size
    return MlpParams(spec, flat)


# ---------------------------------------------------------------------------
# activations: value, first and second derivative
# ---------------------------------------------------------------------------


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "silu":
        return a * expit(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "none":
        return a
    if kind == "exp":
        return np.exp(a)
    if kind == "softplus_last":
        out = a.copy()
        out[..., -1] = np.logaddexp(0.0, a[..., -1])
        return out
    raise ValueError(f"unknown activation {kind!r}")


def _act_d(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "silu":
        s = expit(a)
        return s * (1.0 + a * (1.0 - s))
    if kind == "relu":
        # convention: derivative 0 at exactly 0
        return (a > 0.0).astype(np.float64)
    if kind == "none":
        return np.ones_like(a)
    if kind == "exp":
        return np.exp(a)
    if kind == "softplus_last":
        d = np.ones_like(a)
        d[..., -1] = expit(a[..., -1])
        return d
    raise ValueError(f"unknown activation {kind!r}")


def _act_dd(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "silu":
        s = expit(a)
        sp = s * (1.0 - s)
        return sp * (2.0 + a * (1.0 - 2.0 * s))
    if kind == "relu":
        return np.zeros_like(a)
    if kind == "none":
        return np.zeros_like(a)
    if kind == "exp":
        return np.exp(a)
    if kind == "softplus_last":
        dd = np.zeros_like(a)
        s = expit(a[..., -1])
        dd[..., -1] = s * (1.0 - s)
        return dd
    raise ValueError(f"unknown activation {kind!r}")


@njit(cache=True, fastmath=False)
def _silu_combine(a, t, val, d, s):
    # t holds exp(-|a|); fills silu value, slope, and the sigmoid in one pass
    for i in range(a.size):
        r = t[i] / (1.0 + t[i])
        si = 1.0 - r if a[i] >= 0.0 else r
        v = a[i] * si
        val[i] = v
        s[i] = si
        d[i] = si + v - v * si


@njit(cache=True, fastmath=False)
def _silu_curvature(a, s, dd):
    for i in range(a.size):
        si = s[i]
        dd[i] = (si - si * si) * (2.0 + a[i] * (1.0 - 2.0 * si))


def _act_fused(a: np.ndarray, kind: str):
    """(value, first derivative, aux) with aux feeding _act_dd_from.

    The sigmoid is the expensive part of SiLU, so it is computed once from a
    single vectorized exp and reused for the value, slope, and curvature.
    """
    if kind == "silu":
        a = np.ascontiguousarray(a)
        t = np.abs(a)
        np.negative(t, out=t)
        np.exp(t, out=t)
        val = np.empty(a.shape)
        d = np.empty(a.shape)
        s = np.empty(a.shape)
        _silu_combine(a.ravel(), t.ravel(), val.ravel(), d.ravel(), s.ravel())
        return val, d, s
    if kind == "relu":
        d = (a > 0.0).astype(np.float64)
        return a * d, d, None
    if kind == "none":
        return a, np.ones_like(a), None
    if kind == "exp":
        e = np.exp(a)
        return e, e, None
    if kind == "softplus_last":
        val = a.copy()
        val[..., -1] = np.logaddexp(0.0, a[..., -1])
        d = np.ones_like(a)
        s = expit(a[..., -1])
        d[..., -1] = s
        return val, d, s
    raise ValueError(f"unknown activation {kind!r}")


def _act_dd_from(a: np.ndarray, kind: str, aux) -> np.ndarray:
    """Second derivative, reusing the sigmoid cached by _act_fused."""
    if kind == "silu":
        a = np.ascontiguousarray(a)
        dd = np.empty(a.shape)
        _silu_curvature(a.ravel(), np.ascontiguousarray(aux).ravel(), dd.ravel())
        return dd
    if kind == "exp":
        return np.exp(a)
    if kind == "softplus_last":
        dd = np.zeros_like(a)
        dd[..., -1] = aux * (1.0 - aux)
        return dd
    return np.zeros_like(a)


# ---------------------------------------------------------------------------
# forward / backward passes
# ---------------------------------------------------------------------------


def _as_batch(x: np.ndarray, dim: int, what: str):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must have {dim} components, got shape {x.shape}")
    return x, single


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    h, single = _as_batch(x, params.spec.in_dim, "input")
    for layer, (w, b) in enumerate(params.layers()):
        a = h @ w.T + b
        h = _act(a, params.spec.activation_of(layer))
    return h[0] if single else h


@njit(cache=True, fastmath=False)
def _silu_first(a, t, wcols, stack):
    """First layer: value/slope/sigmoid of silu plus tangents d * W[:, wrt].

    ``stack`` is ((1+k), n, o): slot 0 the activation value, slot 1+j the
    tangent along seed direction j. Returns nothing; also fills d, s via the
    last two rows trick is avoided - they are separate outputs below.
    """
    k = wcols.shape[1]
    n, o = a.shape
    d = np.empty((n, o))
    s = np.empty((n, o))
    for i in range(n):
        for p in range(o):
            ti = t[i, p]
            r = ti / (1.0 + ti)
            si = 1.0 - r if a[i, p] >= 0.0 else r
            v = a[i, p] * si
            di = si + v - v * si
            stack[0, i, p] = v
            d[i, p] = di
            s[i, p] = si
            for j in range(k):
                stack[1 + j, i, p] = di * wcols[p, j]
    return d, s


@njit(cache=True, fastmath=False)
def _silu_stack(astack, t, out):
    """Stacked layer: out[0] = silu(a), out[1+j] = silu'(a) * astack[1+j]."""
    m, n, o = astack.shape
    d = np.empty((n, o))
    s = np.empty((n, o))
    for i in range(n):
        for p in range(o):
            ti = t[i, p]
            r = ti / (1.0 + ti)
            si = 1.0 - r if astack[0, i, p] >= 0.0 else r
            v = astack[0, i, p] * si
            di = si + v - v * si
            out[0, i, p] = v
            d[i, p] = di
            s[i, p] = si
            for j in range(1, m):
                out[j, i, p] = di * astack[j, i, p]
    return d, s


@njit(cache=True, fastmath=False)
def _silu_backward_stack(astack, d, s, g, ga):
    """Adjoint of _silu_stack: ga[0] picks up the curvature term from the
    tangent path, ga[1+j] is the plain slope-scaled tangent adjoint."""
    m, n, o = astack.shape
    for i in range(n):
        for p in range(o):
            si = s[i, p]
            dd = (si - si * si) * (2.0 + astack[0, i, p] * (1.0 - 2.0 * si))
            acc = 0.0
            for j in range(1, m):
                acc += astack[j, i, p] * g[j, i, p]
                ga[j, i, p] = d[i, p] * g[j, i, p]
            ga[0, i, p] = d[i, p] * g[0, i, p] + dd * acc


def _exp_neg_abs(a: np.ndarray) -> np.ndarray:
    t = np.abs(a)
    np.negative(t, out=t)
    np.exp(t, out=t)
    return t


def _dual_forward(params: MlpParams, x: np.ndarray, wrt: Sequence[int], keep_cache: bool):
    """Primal + tangent propagation through the whole network.

    Tangents travel stacked with the primal: per layer a ((1+k), n, d) array
    whose slot 0 is the value and slot 1+j the directional derivative along
    input axis wrt[j]. The first layer never materializes the one-hot seed
    basis (its tangent pre-activations are just columns of W), and each
    later layer runs one flat GEMM over all 1+k slots. Returns
    (y, ty (k, n, out), cache).
    """
    spec = params.spec
    n = x.shape[0]
    k = len(wrt)
    layers = params.layers()
    cache = [] if keep_cache else None

    w0, b0 = layers[0]
    a0 = x @ w0.T + b0
    kind0 = spec.activation_of(0)
    stack = np.empty((1 + k, n, w0.shape[0]))
    if kind0 == "silu":
        d0, aux0 = _silu_first(a0, _exp_neg_abs(a0), np.ascontiguousarray(w0[:, list(wrt)]), stack)
    else:
        val, d0, aux0 = _act_fused(a0, kind0)
        stack[0] = val
        for j, idx in enumerate(wrt):
            np.multiply(d0, w0[:, idx], out=stack[1 + j])
    if keep_cache:
        cache.append((x, a0, d0, aux0))

    for layer in range(1, spec.num_layers):
        w, b = layers[layer]
        prev = stack
        astack = (prev.reshape((1 + k) * n, -1) @ w.T).reshape(1 + k, n, w.shape[0])
        astack[0] += b
        kind = spec.activation_of(layer)
        stack = np.empty_like(astack)
        if kind == "silu":
            d, aux = _silu_stack(astack, _exp_neg_abs(astack[0]), stack)
        else:
            val, d, aux = _act_fused(astack[0], kind)
            stack[0] = val
            np.multiply(astack[1:], d[None], out=stack[1:])
        if keep_cache:
            cache.append((prev, astack, d, aux))
    return stack[0], stack[1:], cache


def forward_with_input_jacobian(params: MlpParams, x: np.ndarray, wrt: Sequence[int] | None = None):
    """Evaluate outputs and the Jacobian d out / d x[wrt].

    ``wrt`` defaults to all input dimensions. The Jacobian has shape
    (out_dim, len(wrt)) for a single input, (n, out_dim, len(wrt)) for a
    batch, and matches the analytic derivative of ``forward``.
    """
    xb, single = _as_batch(x, params.spec.in_dim, "input")
    if wrt is None:
        wrt = range(params.spec.in_dim)
    wrt = [int(i) for i in wrt]
    if any(i < 0 or i >= params.spec.in_dim for i in wrt):
        raise ValueError(f"wrt indices out of range for input dim {params.spec.in_dim}")
    y, ty, _ = _dual_forward(params, xb, wrt, keep_cache=False)
    jac = np.ascontiguousarray(ty.transpose(1, 2, 0))
    if single:
        return y[0], jac[0]
    return y, jac


def _forward_cache(params: MlpParams, x: np.ndarray):
    h = x
    cache = []
    for layer, (w, b) in enumerate(params.layers()):
        a = h @ w.T + b
        cache.append((h, a))
        h = _act(a, params.spec.activation_of(layer))
    return h, cache


def backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Reverse-mode parameter gradient of sum(upstream * forward(x)).

    For a batch, gradients are summed over rows; the caller owns any 1/n
    normalization.
    """
    xb, single = _as_batch(x, params.spec.in_dim, "input")
    gy, gsingle = _as_batch(upstream, params.spec.out_dim, "upstream")
    if single != gsingle or (not single and gy.shape[0] != xb.shape[0]):
        raise ValueError("input and upstream batch shapes disagree")
    _, cache = _forward_cache(params, xb)
    grad = np.zeros_like(params.flat)
    offsets = _layer_offsets(params.spec)
    layers = params.layers()
    g = gy
    for layer in range(params.spec.num_layers - 1, -1, -1):
        w, _ = layers[layer]
        h, a = cache[layer]
        ga = _act_d(a, params.spec.activation_of(layer)) * g
        woff, boff, wsize, bsize = offsets[layer]
        grad[woff : woff + wsize] += (ga.T @ h).ravel()
        grad[boff : boff + bsize] += ga.sum(axis=0)
        if layer > 0:
            g = ga @ w
    return grad


def _backward_stacked(params: MlpParams, wrt, gstack: np.ndarray, cache) -> np.ndarray:
    """Reverse pass over a stacked dual forward.

    ``gstack`` is ((1+k), n, out): slot 0 the adjoint of the outputs, slot
    1+j the adjoint of tangent j. The cache comes from
    ``_dual_forward(..., keep_cache=True)``.
    """
    spec = params.spec
    grad = np.zeros_like(params.flat)
    offsets = _layer_offsets(spec)
    layers = params.layers()
    g = gstack
    mk, n, _ = gstack.shape
    for layer in range(spec.num_layers - 1, 0, -1):
        w, _ = layers[layer]
        prev, astack, d, aux = cache[layer]
        kind = spec.activation_of(layer)
        ga = np.empty_like(g)
        if kind == "silu":
            _silu_backward_stack(astack, d, aux, g, ga)
        else:
            dd = _act_dd_from(astack[0], kind, aux)
            ga[0] = d * g[0] + dd * np.einsum("jno,jno->no", astack[1:], g[1:])
            np.multiply(g[1:], d[None], out=ga[1:])
        woff, boff, wsize, bsize = offsets[layer]
        out_dim, in_dim = w.shape
        dw = ga.reshape(mk * n, out_dim).T @ prev.reshape(mk * n, in_dim)
        grad[woff : woff + wsize] += dw.ravel()
        grad[boff : boff + bsize] += ga[0].sum(axis=0)
        g = (ga.reshape(mk * n, out_dim) @ w).reshape(mk, n, in_dim)

    # first layer: tangent pre-activations are the W[:, wrt] columns, so the
    # seed basis contributes column sums instead of a GEMM
    w0, _ = layers[0]
    x, a0, d0, aux0 = cache[0]
    kind0 = spec.activation_of(0)
    ga = np.empty_like(g)
    if kind0 == "silu":
        astack0 = np.empty_like(g)
        astack0[0] = a0
        for j, idx in enumerate(wrt):
            astack0[1 + j] = w0[:, idx]
        _silu_backward_stack(astack0, d0, aux0, g, ga)
    else:
        dd = _act_dd_from(a0, kind0, aux0)
        acc = np.zeros_like(a0)
        for j, idx in enumerate(wrt):
            acc += w0[:, idx] * g[1 + j]
        ga[0] = d0 * g[0] + dd * acc
        np.multiply(g[1:], d0[None], out=ga[1:])
    woff, boff, wsize, bsize = offsets[0]
    dw = ga[0].T @ x
    for j, idx in enumerate(wrt):
        dw[:, idx] += ga[1 + j].sum(axis=0)
    grad[woff : woff + wsize] += dw.ravel()
    grad[boff : boff + bsize] += ga[0].sum(axis=0)
    return grad


def backward_through_jacobian(
    params: MlpParams,
    x: np.ndarray,
    wrt: Sequence[int],
    upstream_y: np.ndarray,
    upstream_ty: np.ndarray,
    cache=None,
) -> np.ndarray:
    """Parameter gradient of sum(upstream_y * y + upstream_ty * ty).

    ``ty`` are the forward-mode tangents of ``forward_with_input_jacobian``
    with the same ``wrt``; ``upstream_ty`` has layout (n, k, out_dim).
    Backpropagating through the tangent path uses the activation second
    derivatives, so losses built from input-Jacobian entries become
    differentiable in the parameters. A cache from a dual forward pass
    avoids recomputing it.
    """
    spec = params.spec
    xb, _ = _as_batch(x, spec.in_dim, "input")
    n = xb.shape[0]
    wrt = list(wrt)
    k = len(wrt)
    gy = np.asarray(upstream_y, dtype=np.float64).reshape(n, spec.out_dim)
    gt = np.asarray(upstream_ty, dtype=np.float64).reshape(n, k, spec.out_dim)
    if cache is None:
        _, _, cache = _dual_forward(params, xb, wrt, keep_cache=True)
    gstack = np.empty((1 + k, n, spec.out_dim))
    gstack[0] = gy
    gstack[1:] = gt.transpose(1, 0, 2)
    return _backward_stacked(params, wrt, gstack, cache)


def _layer_offsets(spec: MlpSpec):
    out = []
    off = 0
    for fan_in, fan_out in spec.layer_dims():
        wsize = fan_in * fan_out
        out.append((off, off + wsize, wsize, fan_out))
        off += wsize + fan_out
    return out


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------


def positional_encode(v: np.ndarray, num_freqs: int) -> np.ndarray:
    """NeRF-style encoding: (v, sin(2^k pi v), cos(2^k pi v)) for k < num_freqs.

    Output length is |v| * (1 + 2 * num_freqs); ``num_freqs == 0`` returns v
    unchanged.
    """
    if num_freqs < 0:
        raise ValueError("num_freqs must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    vb = v[None, :] if single else v
    parts = [vb]
    for kfreq in range(num_freqs):
        arg = (2.0**kfreq) * np.pi * vb
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam state; one trainer owns one instance."""

    m: np.ndarray
    v: np.ndarray
    t: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None


def init_optimizer(params: MlpParams, learning_rate: float, max_grad_norm: float | None = None) -> OptimizerState:
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    n = params.flat.size
    return OptimizerState(
        m=np.zeros(n), v=np.zeros(n), t=0, learning_rate=learning_rate, max_grad_norm=max_grad_norm
    )


def adam_step(state: OptimizerState, params: MlpParams, grads: np.ndarray):
    """Bias-corrected Adam update, in place; returns (state, params).

    If ``max_grad_norm`` is set, the gradient is rescaled beforehand so its
    global L2 norm does not exceed it.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ValueError("gradient length does not match parameter vector")
    if not np.all(np.isfinite(g)):
        raise TrainingDivergedError("non-finite gradient entries")
    if state.max_grad_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > state.max_grad_norm:
            g = g * (state.max_grad_norm / norm)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1**state.t)
    vhat = state.v / (1.0 - state.beta2**state.t)
    params.flat -= state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)
    return state, params
