"""Complex-valued reverse-mode differentiation on numpy arrays.

Define-by-run tape over double precision arrays. Gradients of a real
scalar loss with respect to real parameters are accumulated through
complex intermediates using the convention

    g_x = dL/dRe(x) + j * dL/dIm(x)      (complex x)
    g_x = dL/dx                          (real x)

For a holomorphic step y = f(x) this gives the chain rule
g_x = conj(f'(x)) * g_y; for the general case
g_x = g_y * conj(dy/dx) + conj(g_y) * dy/d(conj x).  When a complex
cotangent reaches a real-valued node, its real part is taken, which is
exactly the 2*Re{...} bookkeeping used throughout photonic
backpropagation derivations.

All array ops accept a leading batch axis.  Only the ~20 primitives the
photonic models need are provided; there is no broadcasting beyond what
those models use.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

__all__ = [
    "Tape", "Node", "Parameter", "backward", "value_of", "record",
    "zero_grads", "no_grad", "finite_difference_check",
    "add", "sub", "mul", "neg", "scale", "reshape",
    "exp_j", "sigmoid", "abs2", "absolute", "square", "sum_all", "matmul",
    "fft2", "ifft2", "pad_center", "crop_center",
    "complex_from_parts", "crelu", "conv2d", "conv_transpose2d",
    "softmax", "cross_entropy_logits", "region_sum", "gather_ports",
    "fuse_field", "fused_intensity",
]

_TLS = threading.local()


def _tape_stack() -> list:
    if not hasattr(_TLS, "stack"):
        _TLS.stack = []
    return _TLS.stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; ops executed inside record their adjoint
    closures here.  Replaying the adjoints in reverse order visits every
    recorded node exactly once.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _append(self, node: "Node"):
        node.index = len(self.nodes)
        self.nodes.append(node)


class Node:
    """Tape entry: an output value plus vjp closures into its parents."""

    __slots__ = ("value", "parents", "index")

    def __init__(self, value, parents):
        self.value = value
        # parents: tuple of (Node|Parameter, vjp) pairs
        self.parents = parents
        self.index = -1

    @property
    def shape(self):
        return self.value.shape


class Parameter:
    """Learnable real or complex tensor with a persistent gradient buffer.

    All parameters in this package are real (phases, mesh angles, and
    the separate real/imaginary planes of complex conv weights), which
    keeps the backward convention uniform.
    """

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, name: str = "", requires_grad: bool = True):
        self.value = np.array(value, dtype=_canon_dtype(np.asarray(value).dtype))
        self.grad = np.zeros_like(self.value)
        self.requires_grad = requires_grad
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0

    @property
    def shape(self):
        return self.value.shape


def _canon_dtype(dt):
    return np.complex128 if np.issubdtype(dt, np.complexfloating) else np.float64


def value_of(x):
    """Unwrap Node/Parameter to a plain ndarray."""
    if isinstance(x, (Node, Parameter)):
        return x.value
    return x


def _tracked(x) -> bool:
    return isinstance(x, Node) or (isinstance(x, Parameter) and x.requires_grad)


def record(name: str, out_value: np.ndarray, parents: Sequence[tuple]):
    """Register a primitive result on the active tape.

    ``parents`` pairs each differentiable argument with a vjp closure
    mapping the output cotangent to that argument's cotangent.  Returns
    the raw value when no tape is active or no argument is tracked, so
    the same forward code doubles as an undifferentiated evaluator.
    """
    tape = _active_tape()
    tracked = [(p, vjp) for p, vjp in parents if _tracked(p)]
    if tape is None or not tracked:
        return out_value
    node = Node(out_value, tuple(tracked))
    tape._append(node)
    return node


def zero_grads(params: Sequence[Parameter]):
    for p in params:
        p.zero_grad()


class no_grad:
    """Suspend recording inside the block even if a tape is open.

    Hardware emulation runs under this guard: measured intensities must
    enter the training graph as plain data, never as differentiable
    ancestors of the model parameters.
    """

    def __enter__(self):
        self._saved = _tape_stack()[:]
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
        return False


def backward(tape: Tape, loss) -> None:
    """Accumulate dL/dp into every reachable Parameter's ``grad``.

    ``loss`` must be a real scalar node recorded on ``tape``.  Repeated
    calls without zeroing double the accumulators.  Cotangents of
    intermediate nodes live only for the duration of the walk.
    """
    if not isinstance(loss, Node):
        raise ValueError("backward: loss is not a recorded node (constant or untracked)")
    lv = np.asarray(loss.value)
    if lv.ndim != 0 and lv.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {lv.shape}")
    if np.iscomplexobj(lv):
        raise ValueError("backward: loss must be real, got complex")

    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(lv, dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            if isinstance(parent, Parameter):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                if np.iscomplexobj(pg) and not np.iscomplexobj(parent.value):
                    pg = pg.real
                parent.grad += pg
            else:
                pg = vjp(g)
                if np.iscomplexobj(pg) and not np.iscomplexobj(parent.value):
                    pg = np.asarray(pg).real
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def _check_same_shape(opname, a, b):
    sa, sb = np.shape(a), np.shape(b)
    if sa != sb:
        raise ValueError(f"{opname}: shape mismatch {sa} vs {sb}")


def _unbroadcast(g, shape):
    # reduce a cotangent back to an operand that was broadcast up
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return record("add", out, [
        (a, lambda g: _unbroadcast(g, np.shape(av))),
        (b, lambda g: _unbroadcast(g, np.shape(bv))),
    ])


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return record("sub", out, [
        (a, lambda g: _unbroadcast(g, np.shape(av))),
        (b, lambda g: _unbroadcast(-g, np.shape(bv))),
    ])


def neg(a):
    return record("neg", -value_of(a), [(a, lambda g: -g)])


def mul(a, b):
    """Elementwise product; each factor is holomorphic in the other."""
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return record("mul", out, [
        (a, lambda g: _unbroadcast(g * np.conj(bv), np.shape(av))),
        (b, lambda g: _unbroadcast(g * np.conj(av), np.shape(bv))),
    ])


def scale(a, c):
    """Multiply by an untracked constant."""
    cv = value_of(c)
    return record("scale", value_of(a) * cv, [(a, lambda g: g * np.conj(cv))])


def reshape(a, shape):
    av = value_of(a)
    shape = tuple(shape)
    return record("reshape", av.reshape(shape), [(a, lambda g: g.reshape(av.shape))])


def exp_j(theta):
    """e^{j theta} for real theta."""
    tv = value_of(theta)
    if np.iscomplexobj(tv):
        raise ValueError("exp_j: argument must be real")
    out = np.exp(1j * tv)
    return record("exp_j", out, [(theta, lambda g: np.real(np.conj(g) * (1j * out)))])


def sigmoid(x):
    xv = value_of(x)
    out = expit(xv)
    return record("sigmoid", out, [(x, lambda g: g * out * (1.0 - out))])


def abs2(x):
    """|x|^2, the only intensity observable in this package."""
    xv = value_of(x)
    out = (xv * np.conj(xv)).real
    return record("abs2", out, [(x, lambda g: 2.0 * g * xv)])


def absolute(x):
    """|x|; the gradient follows the phase (zero at the origin)."""
    xv = value_of(x)
    out = np.abs(xv)
    unit = np.divide(xv, out, out=np.zeros_like(xv), where=out > 0)
    return record("absolute", out, [(x, lambda g: g * unit)])


def square(x):
    xv = value_of(x)
    if np.iscomplexobj(xv):
        raise ValueError("square: real arrays only (use abs2 for fields)")
    return record("square", xv * xv, [(x, lambda g: 2.0 * g * xv)])


def sum_all(x):
    xv = value_of(x)
    out = np.asarray(xv.sum())
    return record("sum_all", out, [(x, lambda g: np.broadcast_to(g, xv.shape).copy())])


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: shape mismatch {av.shape} vs {bv.shape}")
    out = av @ bv

    def vjp_a(g):
        gm = g[:, None] if g.ndim == 1 else g
        bm = bv[:, None] if bv.ndim == 1 else bv
        return gm @ np.conj(bm).T

    def vjp_b(g):
        r = np.conj(av).T @ g
        return r

    return record("matmul", out, [(a, vjp_a), (b, vjp_b)])


# ---------------------------------------------------------------------------
# Fourier / grid primitives
# ---------------------------------------------------------------------------

def fft2(x):
    """Unnormalized 2D FFT over the trailing two axes."""
    xv = value_of(x)
    out = np.fft.fft2(xv)
    n = xv.shape[-1] * xv.shape[-2]
    return record("fft2", out, [(x, lambda g: np.fft.ifft2(g) * n)])


def ifft2(x):
    xv = value_of(x)
    out = np.fft.ifft2(xv)
    n = xv.shape[-1] * xv.shape[-2]
    return record("ifft2", out, [(x, lambda g: np.fft.fft2(g) / n)])


def _embed(x, big):
    *lead, h, w = x.shape
    out = np.zeros((*lead, big, big), dtype=x.dtype)
    r0, c0 = (big - h) // 2, (big - w) // 2
    out[..., r0:r0 + h, c0:c0 + w] = x
    return out


def _extract(x, small):
    h, w = x.shape[-2:]
    r0, c0 = (h - small) // 2, (w - small) // 2
    return x[..., r0:r0 + small, c0:c0 + small]


def pad_center(x, size: int):
    """Zero-embed the trailing square axes into a size x size grid."""
    xv = value_of(x)
    if size < xv.shape[-1]:
        raise ValueError(f"pad_center: target {size} smaller than input {xv.shape[-1]}")
    small = xv.shape[-1]
    return record("pad_center", _embed(xv, size), [(x, lambda g: _extract(g, small).copy())])


def crop_center(x, size: int):
    xv = value_of(x)
    if size > xv.shape[-1]:
        raise ValueError(f"crop_center: target {size} larger than input {xv.shape[-1]}")
    big = xv.shape[-1]
    return record("crop_center", _extract(xv, size).copy(), [(x, lambda g: _embed(g, big))])


# ---------------------------------------------------------------------------
# complex convolution stack
# ---------------------------------------------------------------------------

def complex_from_parts(re, im):
    """Assemble a complex tensor from two real parameter planes."""
    rv, iv = value_of(re), value_of(im)
    _check_same_shape("complex_from_parts", rv, iv)
    out = rv + 1j * iv
    return record("complex_from_parts", out, [
        (re, lambda g: g.real.copy()),
        (im, lambda g: g.imag.copy()),
    ])


def crelu(x):
    """ReLU applied independently to real and imaginary parts."""
    xv = value_of(x)
    mr = (xv.real > 0)
    mi = (xv.imag > 0)
    out = xv.real * mr + 1j * (xv.imag * mi)

    def vjp(g):
        return g.real * mr + 1j * (g.imag * mi)

    return record("crelu", out, [(x, vjp)])


def _conv_geometry(opname, H, W, k, stride):
    sh, sw = stride
    if k % 2 != 1:
        raise ValueError(f"{opname}: kernel extent must be odd, got {k}")
    ph = pw = k // 2
    for s, extent, ax in ((sh, H, "H"), (sw, W, "W")):
        if s not in (1, 2):
            raise ValueError(f"{opname}: stride must be 1 or 2, got {s}")
        if s == 2 and extent % 2 != 0:
            raise ValueError(f"{opname}: {ax} extent {extent} not divisible by stride 2")
    Ho = (H + 2 * ph - k) // sh + 1
    Wo = (W + 2 * pw - k) // sw + 1
    return ph, pw, Ho, Wo


def _im2col(x, k, stride, pad):
    N, C, H, W = x.shape
    sh, sw = stride
    ph, pw = pad
    xp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + H, pw:pw + W] = x
    Ho = (H + 2 * ph - k) // sh + 1
    Wo = (W + 2 * pw - k) // sw + 1
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, shape=(N, C, Ho, Wo, k, k),
                      strides=(s0, s1, s2 * sh, s3 * sw, s2, s3))
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(N, Ho * Wo, C * k * k), Ho, Wo


def _col2im_add(cols, N, C, H, W, k, stride, pad, Ho, Wo, dtype):
    sh, sw = stride
    ph, pw = pad
    xp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=dtype)
    c6 = cols.reshape(N, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
    for di in range(k):
        for dj in range(k):
            xp[:, :, di:di + sh * Ho:sh, dj:dj + sw * Wo:sw] += c6[:, :, :, :, di, dj]
    return xp[:, :, ph:ph + H, pw:pw + W]


def conv2d(x, w, stride=(1, 1)):
    """Complex 2D convolution, batched, same-padding.

    x: (N, Cin, H, W); w: (Cout, Cin, k, k).  Stride 1 preserves the
    extent; stride 2 halves it (per axis, even extents only).
    """
    xv, wv = value_of(x), value_of(w)
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ValueError(f"conv2d: shape mismatch {xv.shape} vs {wv.shape}")
    if wv.shape[2] != wv.shape[3]:
        raise ValueError(f"conv2d: square kernels only, got {wv.shape}")
    N, Cin, H, W = xv.shape
    Cout, _, k, _ = wv.shape
    ph, pw, Ho, Wo = _conv_geometry("conv2d", H, W, k, stride)

    cols, _, _ = _im2col(xv, k, stride, (ph, pw))
    wmat = wv.reshape(Cout, Cin * k * k).T            # (Cin k^2, Cout)
    y = (cols @ wmat).transpose(0, 2, 1).reshape(N, Cout, Ho, Wo)

    def vjp_x(g):
        gf = g.reshape(N, Cout, Ho * Wo).transpose(0, 2, 1)   # (N, P, Cout)
        gcols = gf @ np.conj(wmat).T
        return _col2im_add(gcols, N, Cin, H, W, k, stride, (ph, pw), Ho, Wo, gcols.dtype)

    def vjp_w(g):
        gf = g.reshape(N, Cout, Ho * Wo).transpose(0, 2, 1)
        c, _, _ = _im2col(xv, k, stride, (ph, pw))
        # (Cin k^2, N P) @ (N P, Cout); matmul so BLAS handles the
        # complex contraction
        gw = np.conj(c).reshape(-1, Cin * k * k).T @ gf.reshape(-1, Cout)
        return gw.T.reshape(Cout, Cin, k, k)

    return record("conv2d", y, [(x, vjp_x), (w, vjp_w)])


def conv_transpose2d(x, w, stride=(1, 1)):
    """Complex transposed convolution; exact spatial inverse of conv2d's
    downsampling (stride 2 doubles the strided axes).

    x: (N, Cin, h, w); w: (Cin, Cout, k, k).
    """
    xv, wv = value_of(x), value_of(w)
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[0]:
        raise ValueError(f"conv_transpose2d: shape mismatch {xv.shape} vs {wv.shape}")
    N, Cin, h, w_ = xv.shape
    _, Cout, k, _ = wv.shape
    sh, sw = stride
    Ho, Wo = sh * h, sw * w_
    # geometry of the conv this op is the adjoint of
    ph, pw, ho_chk, wo_chk = _conv_geometry("conv_transpose2d", Ho, Wo, k, stride)
    if (ho_chk, wo_chk) != (h, w_):
        raise ValueError(f"conv_transpose2d: extent {(h, w_)} not reachable with stride {stride}")

    wmat = wv.reshape(Cin, Cout * k * k)
    xf = xv.reshape(N, Cin, h * w_).transpose(0, 2, 1)        # (N, P, Cin)
    cols = xf @ wmat                                          # (N, P, Cout k^2)
    y = _col2im_add(cols, N, Cout, Ho, Wo, k, stride, (ph, pw), h, w_, cols.dtype)

    def vjp_x(g):
        gcols, _, _ = _im2col(g, k, stride, (ph, pw))         # (N, P, Cout k^2)
        gx = gcols @ np.conj(wmat).T                          # (N, P, Cin)
        return gx.transpose(0, 2, 1).reshape(N, Cin, h, w_)

    def vjp_w(g):
        gcols, _, _ = _im2col(g, k, stride, (ph, pw))
        gw = np.conj(xf).reshape(-1, Cin).T @ gcols.reshape(-1, Cout * k * k)
        return gw.reshape(Cin, Cout, k, k)

    return record("conv_transpose2d", y, [(x, vjp_x), (w, vjp_w)])


# ---------------------------------------------------------------------------
# losses / readout
# ---------------------------------------------------------------------------

def softmax(x):
    xv = value_of(x)
    if np.iscomplexobj(xv):
        raise ValueError("softmax: real logits only")
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return record("softmax", out, [(x, vjp)])


def cross_entropy_logits(logits, labels):
    """Mean softmax cross entropy; labels are integer class indices."""
    lv = value_of(logits)
    if np.iscomplexobj(lv):
        raise ValueError("cross_entropy_logits: real logits only")
    labels = np.asarray(labels)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ValueError(f"cross_entropy_logits: shape mismatch {lv.shape} vs {labels.shape}")
    n = lv.shape[0]
    m = lv.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lv - m).sum(axis=1))
    out = np.asarray((lse - lv[np.arange(n), labels]).mean())
    p = np.exp(lv - m)
    p /= p.sum(axis=1, keepdims=True)

    def vjp(g):
        grad = p.copy()
        grad[np.arange(n), labels] -= 1.0
        return grad * (float(g) / n)

    return record("cross_entropy_logits", out, [(logits, vjp)])


def region_sum(x, anchors, size: int):
    """Sum square detector regions of an intensity map.

    x: (N, H, W) real; anchors: sequence of (row, col) top-left corners;
    returns (N, n_regions).
    """
    xv = value_of(x)
    if np.iscomplexobj(xv):
        raise ValueError("region_sum: real intensity maps only")
    H, W = xv.shape[-2:]
    for (r, c) in anchors:
        if r < 0 or c < 0 or r + size > H or c + size > W:
            raise ValueError(f"region_sum: region ({r},{c})+{size} outside {H}x{W} grid")
    out = np.stack([xv[..., r:r + size, c:c + size].sum(axis=(-2, -1))
                    for (r, c) in anchors], axis=-1)

    def vjp(g):
        gx = np.zeros_like(xv)
        for i, (r, c) in enumerate(anchors):
            gx[..., r:r + size, c:c + size] += g[..., i, None, None]
        return gx

    return record("region_sum", out, [(x, vjp)])


def gather_ports(x, idx):
    """Select output ports: (N, L) -> (N, len(idx))."""
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = xv[..., idx]

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx.reshape(-1, xv.shape[-1]), (slice(None), idx),
                  g.reshape(-1, idx.size))
        return gx

    return record("gather_ports", out, [(x, vjp)])


# ---------------------------------------------------------------------------
# measurement fusion
# ---------------------------------------------------------------------------

def _unit_phase(s):
    a = np.abs(s)
    out = np.ones_like(s)
    nz = a > 0
    out[nz] = s[nz] / a[nz]
    return out


def fuse_field(p, s):
    """Replace the amplitude of a simulated field with a measured one.

    Forward value is sqrt(p) * exp(j*angle(s)).  The backward pass treats
    the replacement as the identity on ``s`` (the cotangent passes through
    unchanged), so downstream gradients are evaluated at the fused values
    while the measurement itself contributes no derivative.  ``p`` is
    measured data and receives no gradient.
    """
    pv, sv = value_of(p), value_of(s)
    _check_same_shape("fuse_field", pv, sv)
    if np.iscomplexobj(pv):
        raise ValueError("fuse_field: measured intensity must be real")
    if np.any(pv < 0):
        raise ValueError("fuse_field: negative intensity entry")
    out = np.sqrt(pv) * _unit_phase(sv)
    return record("fuse_field", out, [(s, lambda g: g)])


def fused_intensity(p, s):
    """Measured intensity with gradients routed through the fused field.

    Forward value is exactly ``p``; the cotangent reaching ``s`` is
    2*g*sqrt(p)*exp(j*angle(s)), i.e. the usual |.|^2 adjoint evaluated
    at the fused field.
    """
    pv, sv = value_of(p), value_of(s)
    _check_same_shape("fused_intensity", pv, sv)
    if np.iscomplexobj(pv):
        raise ValueError("fused_intensity: measured intensity must be real")
    if np.any(pv < 0):
        raise ValueError("fused_intensity: negative intensity entry")
    fused = np.sqrt(pv) * _unit_phase(sv)
    return record("fused_intensity", pv.copy(), [(s, lambda g: 2.0 * g * fused)])


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[], object], params: Sequence[Parameter],
                            step: float = 1e-5, max_entries: int | None = None,
                            seed: int = 0) -> float:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` evaluates the scalar loss from the params' current values; it
    is run once under a fresh tape for the analytic gradients and twice
    per probed entry (untaped) for the differences.  Returns the max of
    |analytic - central| / (|central| + 1e-12) over the probed entries.
    ``max_entries`` caps the probes per parameter (chosen with a fixed
    seed) so large conv stacks stay affordable.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    zero_grads(params)
    with Tape() as t:
        loss = f()
        backward(t, loss)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_v = p.value.reshape(-1)
        flat_g = g.reshape(-1)
        idxs = np.arange(flat_v.size)
        if max_entries is not None and flat_v.size > max_entries:
            idxs = rng.choice(flat_v.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat_v[i]
            flat_v[i] = orig + step
            fp = float(value_of(f()))
            flat_v[i] = orig - step
            fm = float(value_of(f()))
            flat_v[i] = orig
            central = (fp - fm) / (2.0 * step)
            rel = abs(flat_g[i] - central) / (abs(central) + 1e-12)
            worst = max(worst, rel)
    return worst
