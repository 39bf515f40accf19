"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records a define-by-run computation graph; each
:class:`Tensor` is a node holding its forward value.  :func:`backward`
walks the tape once, in reverse node order, accumulating gradients for
every ``requires_grad`` leaf.  The op set is exactly what the unfolded
models need: matrix products, the soft-threshold proximal operator,
Gram-preconditioned and general linear solves, a 3x3 same-padding
convolution, elementwise arithmetic, and the reductions used by the
losses.

Conventions fixed here:

* values are float64, rank 1-4 (rank 4 only for convolution kernels);
* scalars are rank-1 tensors of length 1;
* the soft-threshold subgradient at the kink ``|y| == zeta`` is 0;
* ``relu`` uses the zero subgradient at 0;
* Gram solves factor the r x r Gram matrix by Cholesky (LU fallback)
  and never form an explicit inverse.
"""

import threading

import numpy as np
from scipy import linalg as sla

from .errors import ContractError, DimensionError, DomainError, SingularMatrixError

COND_LIMIT = 1e12


def check_shape(dims) -> tuple:
    """Validate tensor dims: rank 1-4, every extent >= 1."""
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 4:
        raise DimensionError(f"rank {len(dims)} outside supported range 1-4")
    if any(d < 1 for d in dims):
        raise DimensionError(f"non-positive extent in shape {dims}")
    return dims


class Tensor:
    """A value on a tape.  `node` is its index in tape order."""

    __slots__ = ("tape", "node", "values", "requires_grad")

    def __init__(self, tape, node, values, requires_grad):
        self.tape = tape
        self.node = node
        self.values = values
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.values.shape == self.values.shape:
            return mul(self, other)
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(node={self.node}, shape={self.values.shape}, grad={self.requires_grad})"


class Tape:
    """Append-only op record.  Parents of node i always have index < i."""

    def __init__(self, recording: bool = True):
        self.recording = recording
        self.nodes = []  # (op kind, parent node ids, backward closure or None)
        self.grads = None  # populated by backward()

    def leaf(self, values, requires_grad: bool = False) -> Tensor:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 0:
            values = values.reshape(1)
        check_shape(values.shape)
        if not np.all(np.isfinite(values)):
            raise DomainError("leaf tensor contains non-finite values")
        rg = requires_grad and self.recording
        self.nodes.append(("leaf", (), None))
        return Tensor(self, len(self.nodes) - 1, values, rg)

    def _emit(self, kind, values, parents, bwd, requires_grad):
        rg = requires_grad and self.recording
        self.nodes.append((kind, parents, bwd if rg else None))
        return Tensor(self, len(self.nodes) - 1, values, rg)


class GradStore:
    """node-id -> gradient array, filled in by backward()."""

    def __init__(self, slots):
        self._slots = slots

    def get(self, t: Tensor):
        return self._slots[t.node]

    def __getitem__(self, t: Tensor):
        g = self._slots[t.node]
        if g is None:
            g = np.zeros_like(t.values)
        return g


def backward(tape: Tape, loss: Tensor) -> GradStore:
    """Populate gradients of `loss` w.r.t. every requires-grad node.

    Deterministic: accumulation follows fixed reverse node order.
    """
    if loss.values.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.values.shape}")
    if not tape.recording:
        raise ContractError("cannot run backward on a non-recording tape")
    slots = [None] * len(tape.nodes)
    slots[loss.node] = np.ones_like(loss.values)
    for i in range(loss.node, -1, -1):
        g = slots[i]
        if g is None:
            continue
        bwd = tape.nodes[i][2]
        if bwd is not None:
            bwd(g, slots)
    store = GradStore(slots)
    tape.grads = store
    return store


def _acc(slots, node, g):
    # accumulation never mutates stored arrays, so aliasing g is safe
    if slots[node] is None:
        slots[node] = g
    else:
        slots[node] = slots[node] + g


def _same_tape(*ts):
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


def _as_scalar_operand(tape, s):
    """Accept a python number or a length-1 tensor for scalar parameters."""
    if isinstance(s, Tensor):
        if s.tape is not tape:
            raise ContractError("operands live on different tapes")
        if s.values.size != 1:
            raise DimensionError(f"expected scalar operand, got shape {s.values.shape}")
        return s, float(s.values.reshape(-1)[0])
    return None, float(s)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    va, vb = a.values, b.values
    if va.ndim != 2 or vb.ndim != 2:
        raise DimensionError(f"matmul needs matrices, got {va.shape} x {vb.shape}")
    if va.shape[1] != vb.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {va.shape} x {vb.shape}")
    out = va @ vb
    rg = a.requires_grad or b.requires_grad

    def bwd(g, slots):
        if a.requires_grad:
            _acc(slots, a.node, g @ vb.T)
        if b.requires_grad:
            _acc(slots, b.node, va.T @ g)

    return tape._emit("matmul", out, (a.node, b.node), bwd, rg)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.values.shape}")
    out = a.values.T.copy()

    def bwd(g, slots):
        _acc(slots, a.node, g.T)

    return a.tape._emit("transpose", out, (a.node,), bwd, a.requires_grad)


def gram_solve_values(m: np.ndarray, g: np.ndarray):
    """Solve Z (M^T M) = G by Cholesky of the Gram matrix.

    Returns (z, solve) where solve(rhs) applies (M^T M)^{-1} from the right
    to further right-hand sides using the cached factorization.  Raises
    SingularMatrixError when the Gram condition estimate (reciprocal of the
    LAPACK 1-norm rcond) exceeds COND_LIMIT.
    """
    gram = m.T @ m
    if not np.all(np.isfinite(gram)):
        raise SingularMatrixError(float("nan"), "Gram matrix")
    anorm = np.linalg.norm(gram, 1)
    try:
        factor = sla.cho_factor(gram, lower=True)
        rcond, _ = sla.lapack.dpocon(factor[0], anorm, uplo="L")
        cond = np.inf if rcond == 0 else 1.0 / rcond
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise SingularMatrixError(cond, "Gram matrix")

        def solve(rhs):
            return sla.cho_solve(factor, rhs.T).T
    except np.linalg.LinAlgError:
        # not positive-definite to working precision: pivoted-solve fallback
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise SingularMatrixError(cond, "Gram matrix") from None

        def solve(rhs):
            return np.linalg.solve(gram, rhs.T).T

    return solve(g), solve


def gram_solve(m: Tensor, g: Tensor) -> Tensor:
    """Differentiable Z = G (M^T M)^{-1} for tall M with few columns."""
    tape = _same_tape(m, g)
    vm, vg = m.values, g.values
    if vm.ndim != 2 or vg.ndim != 2 or vm.shape[1] != vg.shape[1]:
        raise DimensionError(f"gram_solve needs matching column counts, got {vm.shape} and {vg.shape}")
    z, solve = gram_solve_values(vm, vg)
    rg = m.requires_grad or g.requires_grad

    def bwd(gr, slots):
        gg = solve(gr)
        if g.requires_grad:
            _acc(slots, g.node, gg)
        if m.requires_grad:
            # from d(A^{-1}) = -A^{-1} dA A^{-1} with A = M^T M
            _acc(slots, m.node, -vm @ (z.T @ gg + gg.T @ z))

    return tape._emit("gram_solve", z, (m.node, g.node), bwd, rg)


def solve(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable left solve Z = A^{-1} B for square A."""
    tape = _same_tape(a, b)
    va, vb = a.values, b.values
    if va.ndim != 2 or va.shape[0] != va.shape[1]:
        raise DimensionError(f"solve needs a square matrix, got {va.shape}")
    if vb.ndim != 2 or vb.shape[0] != va.shape[0]:
        raise DimensionError(f"solve rhs shape {vb.shape} incompatible with {va.shape}")
    if not np.all(np.isfinite(va)):
        raise SingularMatrixError(float("nan"), "solve operand")
    anorm = np.linalg.norm(va, 1)
    factor = sla.lu_factor(va)
    rcond, _ = sla.lapack.dgecon(factor[0], anorm, norm="1")
    cond = np.inf if rcond == 0 else 1.0 / rcond
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMatrixError(cond, "solve operand")
    z = sla.lu_solve(factor, vb)
    rg = a.requires_grad or b.requires_grad

    def bwd(g, slots):
        gb = sla.lu_solve(factor, g, trans=1)
        if b.requires_grad:
            _acc(slots, b.node, gb)
        if a.requires_grad:
            _acc(slots, a.node, -gb @ z.T)

    return tape._emit("solve", z, (a.node, b.node), bwd, rg)


# ---------------------------------------------------------------------------
# proximal / activation ops


def soft_threshold(y: Tensor, zeta) -> Tensor:
    """Elementwise sign(y) * max(|y| - zeta, 0); zeta may be trainable."""
    zt, zv = _as_scalar_operand(y.tape, zeta)
    if zv < 0:
        raise DomainError(f"soft threshold must be nonnegative, got {zv}")
    vy = y.values
    out = np.sign(vy) * np.maximum(np.abs(vy) - zv, 0.0)
    rg = y.requires_grad or (zt is not None and zt.requires_grad)
    parents = (y.node,) if zt is None else (y.node, zt.node)

    def bwd(g, slots):
        mask = np.abs(vy) > zv
        if y.requires_grad:
            _acc(slots, y.node, g * mask)
        if zt is not None and zt.requires_grad:
            _acc(slots, zt.node, np.array([-np.sum(g * np.sign(vy) * mask)]))

    return y.tape._emit("soft_threshold", out, parents, bwd, rg)


def relu(a: Tensor) -> Tensor:
    va = a.values
    out = np.maximum(va, 0.0)

    def bwd(g, slots):
        _acc(slots, a.node, g * (va > 0))

    return a.tape._emit("relu", out, (a.node,), bwd, a.requires_grad)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), the positivity reparameterization for step sizes."""
    va = a.values
    out = np.logaddexp(0.0, va)

    def bwd(g, slots):
        _acc(slots, a.node, g / (1.0 + np.exp(-va)))

    return a.tape._emit("softplus", out, (a.node,), bwd, a.requires_grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary(kind, a, b, fwd, bwd_a, bwd_b):
    tape = _same_tape(a, b)
    if a.values.shape != b.values.shape:
        raise DimensionError(f"{kind} operand shapes differ: {a.values.shape} vs {b.values.shape}")
    out = fwd(a.values, b.values)
    rg = a.requires_grad or b.requires_grad

    def bwd(g, slots):
        if a.requires_grad:
            _acc(slots, a.node, bwd_a(g, a.values, b.values))
        if b.requires_grad:
            _acc(slots, b.node, bwd_b(g, a.values, b.values))

    return tape._emit(kind, out, (a.node, b.node), bwd, rg)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a: Tensor, s) -> Tensor:
    """Multiply by a python number or a length-1 (possibly trainable) tensor."""
    st, sv = _as_scalar_operand(a.tape, s)
    va = a.values
    out = va * sv
    rg = a.requires_grad or (st is not None and st.requires_grad)
    parents = (a.node,) if st is None else (a.node, st.node)

    def bwd(g, slots):
        if a.requires_grad:
            _acc(slots, a.node, g * sv)
        if st is not None and st.requires_grad:
            _acc(slots, st.node, np.array([np.sum(g * va)]))

    return a.tape._emit("scale", out, parents, bwd, rg)


def square(a: Tensor) -> Tensor:
    va = a.values

    def bwd(g, slots):
        _acc(slots, a.node, 2.0 * va * g)

    return a.tape._emit("square", va * va, (a.node,), bwd, a.requires_grad)


# ---------------------------------------------------------------------------
# reductions


def frobenius_sq(a: Tensor) -> Tensor:
    """Sum of squared entries as a scalar tensor."""
    va = a.values
    out = np.array([np.sum(va * va)])

    def bwd(g, slots):
        _acc(slots, a.node, (2.0 * float(g[0])) * va)

    return a.tape._emit("frobenius_sq", out, (a.node,), bwd, a.requires_grad)


def abs_sum(a: Tensor) -> Tensor:
    """Sum of absolute entries (l1 norm); subgradient 0 at 0."""
    va = a.values
    out = np.array([np.sum(np.abs(va))])

    def bwd(g, slots):
        _acc(slots, a.node, float(g[0]) * np.sign(va))

    return a.tape._emit("abs_sum", out, (a.node,), bwd, a.requires_grad)


# ---------------------------------------------------------------------------
# convolution and channel plumbing


_conv_scratch = threading.local()


def _scratch(key, shape):
    """Reusable per-thread work buffer; a tape never retains these."""
    store = getattr(_conv_scratch, "bufs", None)
    if store is None:
        store = _conv_scratch.bufs = {}
    buf = store.get(key)
    if buf is None or buf.shape != shape:
        buf = np.empty(shape)
        store[key] = buf
    return buf


def _im2col(xp, cin, h, w):
    """cols[c, dy, dx] = padded input shifted by (dy, dx), in scratch space."""
    cols = _scratch(("cols", cin), (cin, 3, 3, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, dy:dy + h, dx:dx + w]
    return cols.reshape(cin * 9, h * w)


def conv2d(inp: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, zero same-padding, stride 1.

    inp: (C_in, H, W); kernels: (C_out, C_in, 3, 3); bias: (C_out,).
    Implemented as im2col + one matrix product.  Only the padded input is
    saved for backward; the column matrix is rebuilt in scratch space.
    """
    tape = _same_tape(inp, kernels, bias)
    vx, vk, vb = inp.values, kernels.values, bias.values
    if vx.ndim != 3:
        raise DimensionError(f"conv2d input must be C x H x W, got {vx.shape}")
    if vk.ndim != 4 or vk.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d kernels must be C_out x C_in x 3 x 3, got {vk.shape}")
    if vk.shape[1] != vx.shape[0]:
        raise DimensionError(f"conv2d channel mismatch: input {vx.shape[0]}, kernels {vk.shape[1]}")
    if vb.shape != (vk.shape[0],):
        raise DimensionError(f"conv2d bias shape {vb.shape} != ({vk.shape[0]},)")
    cin, h, w = vx.shape
    cout = vk.shape[0]
    xp = np.zeros((cin, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = vx
    cols2 = _im2col(xp, cin, h, w)
    kflat = vk.reshape(cout, cin * 9)
    out = (kflat @ cols2).reshape(cout, h, w) + vb.reshape(cout, 1, 1)
    rg = inp.requires_grad or kernels.requires_grad or bias.requires_grad

    def bwd(g, slots):
        gf = g.reshape(cout, h * w)
        if bias.requires_grad:
            _acc(slots, bias.node, g.sum(axis=(1, 2)))
        if kernels.requires_grad:
            cols2 = _im2col(xp, cin, h, w)
            _acc(slots, kernels.node, (gf @ cols2.T).reshape(vk.shape))
        if inp.requires_grad:
            # the input gradient is a correlation of the padded output
            # gradient with the spatially flipped, channel-swapped kernels
            gp = _scratch(("gpad", cout), (cout, h + 2, w + 2))
            gp[:] = 0.0
            gp[:, 1:-1, 1:-1] = g
            gcols = _im2col(gp, cout, h, w)
            wflip = vk[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * 9)
            _acc(slots, inp.node, (wflip @ gcols).reshape(cin, h, w))

    return tape._emit("conv2d", out, (inp.node, kernels.node, bias.node), bwd, rg)


def stack_channels(mats) -> Tensor:
    """Stack equal-shape matrices into a (C, H, W) tensor."""
    tape = _same_tape(*mats)
    shapes = {m.values.shape for m in mats}
    if len(shapes) != 1 or mats[0].values.ndim != 2:
        raise DimensionError(f"stack_channels needs equal-shape matrices, got {shapes}")
    out = np.stack([m.values for m in mats])
    rg = any(m.requires_grad for m in mats)

    def bwd(g, slots):
        for i, m in enumerate(mats):
            if m.requires_grad:
                _acc(slots, m.node, g[i])

    return tape._emit("stack", out, tuple(m.node for m in mats), bwd, rg)


def take_channel(a: Tensor, i: int) -> Tensor:
    if a.values.ndim != 3:
        raise DimensionError(f"take_channel needs a C x H x W tensor, got {a.values.shape}")
    c = a.values.shape[0]
    if not 0 <= i < c:
        raise DimensionError(f"channel {i} out of range for {c} channels")
    out = a.values[i].copy()

    def bwd(g, slots):
        full = np.zeros_like(a.values)
        full[i] = g
        _acc(slots, a.node, full)

    return a.tape._emit("take_channel", out, (a.node,), bwd, a.requires_grad)
