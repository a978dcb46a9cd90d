"""Small define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op accepts either plain arrays or :class:`Node` objects.  When none of
the operands is a ``Node`` the op returns a plain array, so the same model
code serves both fast inference and gradient computation.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Node", "ShapeError", "param", "affine", "sigmoid", "tanh", "hadamard",
    "add", "vsum", "concat", "bce", "forward_eval", "backward", "grad_check",
    "value_of",
]

_ids = itertools.count()

PROB_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class Node:
    """One vertex of the computation graph.

    ``param`` is ``None`` for intermediate nodes.  Parameter leaves carry
    ``(name, row)`` where ``row`` selects a row of a table parameter or is
    ``None`` for a whole array.
    """

    __slots__ = ("op", "inputs", "value", "adjoint", "param", "meta", "id")

    def __init__(self, op, inputs, value, param=None, meta=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.adjoint = None
        self.param = param
        self.meta = meta
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _any_node(xs):
    for x in xs:
        if isinstance(x, Node):
            return True
    return False


def param(name, value, row=None, table_shape=None):
    """Wrap an array as a differentiable parameter leaf.

    For a single row of a table parameter pass ``row`` and the full
    ``table_shape``; its gradient lands in that row of a dense table.
    """
    return Node("input", (), np.asarray(value, dtype=np.float64),
                param=(name, row), meta=table_shape)


def _sigmoid(z):
    # branch-free stable form
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# --------------------------------------------------------------------------
# forward rules


def _f_affine(vals, meta):
    # vals = [W1, x1, W2, x2, ..., (b)]
    has_bias = meta
    n_pairs = (len(vals) - has_bias) // 2
    out = vals[0] @ vals[1]
    for k in range(1, n_pairs):
        out = out + vals[2 * k] @ vals[2 * k + 1]
    if has_bias:
        out = out + vals[-1]
    return out


def _f_vsum(vals, meta):
    if not vals:
        return np.zeros(meta)
    order = _canonical_order(vals)
    out = vals[order[0]].copy()
    for k in order[1:]:
        out += vals[k]
    return out


def _canonical_order(vals):
    if len(vals) < 2:
        return list(range(len(vals)))
    return sorted(range(len(vals)), key=lambda k: vals[k].tobytes())


def _f_bce(vals, meta):
    # stays in the input dtype so the extended-precision oracle can use it
    p = np.clip(vals[0][:1], PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -np.log(p) if meta == 1 else -np.log(1.0 - p)


_FORWARD = {
    "affine": _f_affine,
    "sigmoid": lambda v, m: _sigmoid(v[0]),
    "tanh": lambda v, m: np.tanh(v[0]),
    "hadamard": lambda v, m: v[0] * v[1],
    "add": lambda v, m: _f_vsum_ordered(v),
    "sum-of-vectors": _f_vsum,
    "concat": lambda v, m: np.concatenate(v),
    "bce": _f_bce,
}


def _f_vsum_ordered(vals):
    out = vals[0] + vals[1]
    for v in vals[2:]:
        out = out + v
    return out


# --------------------------------------------------------------------------
# op constructors


def affine(pairs, bias=None):
    """``sum_k W_k @ x_k + b`` for ``pairs = [(W_1, x_1), ...]``."""
    if not pairs:
        raise ShapeError("affine needs at least one (matrix, vector) pair")
    ops = []
    out_dim = None
    for W, x in pairs:
        wv, xv = value_of(W), value_of(x)
        if wv.ndim != 2 or xv.ndim != 1 or wv.shape[1] != xv.shape[0]:
            raise ShapeError(f"affine: matrix {wv.shape} incompatible with vector {xv.shape}")
        if out_dim is None:
            out_dim = wv.shape[0]
        elif wv.shape[0] != out_dim:
            raise ShapeError(f"affine: matrix {wv.shape} rows differ from output dim {out_dim}")
        ops.extend((W, x))
    if bias is not None:
        bv = value_of(bias)
        if bv.shape != (out_dim,):
            raise ShapeError(f"affine: bias {bv.shape} does not match output ({out_dim},)")
        ops.append(bias)
    meta = int(bias is not None)
    vals = [value_of(o) for o in ops]
    out = _f_affine(vals, meta)
    if _any_node(ops):
        return Node("affine", tuple(ops), out, meta=meta)
    return out


def _unary(op, x):
    out = _FORWARD[op]([value_of(x)], None)
    if isinstance(x, Node):
        return Node(op, (x,), out)
    return out


def sigmoid(x):
    return _unary("sigmoid", x)


def tanh(x):
    return _unary("tanh", x)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def hadamard(a, b):
    av, bv = value_of(a), value_of(b)
    _check_same("hadamard", av, bv)
    out = av * bv
    if isinstance(a, Node) or isinstance(b, Node):
        return Node("hadamard", (a, b), out)
    return out


def add(*xs):
    if len(xs) < 2:
        raise ShapeError("add needs at least two operands")
    vals = [value_of(x) for x in xs]
    for v in vals[1:]:
        _check_same("add", vals[0], v)
    out = _f_vsum_ordered(vals)
    if _any_node(xs):
        return Node("add", tuple(xs), out)
    return out


def vsum(xs, dim=None):
    """Order-insensitive sum of vectors.

    Summands are added in a canonical order (by their bytes), so any
    permutation of ``xs`` produces a bit-identical result.  An empty sum
    needs ``dim`` and yields zeros.
    """
    xs = list(xs)
    if not xs:
        if dim is None:
            raise ShapeError("empty vsum needs an explicit dim")
        return np.zeros(dim)
    vals = [value_of(x) for x in xs]
    for v in vals[1:]:
        _check_same("sum-of-vectors", vals[0], v)
    out = _f_vsum(vals, None)
    if _any_node(xs):
        return Node("sum-of-vectors", tuple(xs), out, meta=vals[0].shape)
    return out


def concat(*xs):
    vals = [value_of(x) for x in xs]
    for v in vals:
        if v.ndim != 1:
            raise ShapeError(f"concat expects vectors, got shape {v.shape}")
    out = np.concatenate(vals)
    if _any_node(xs):
        return Node("concat", tuple(xs), out)
    return out


def bce(p, y):
    """Binary cross entropy of a shape-(1,) probability against label ``y``."""
    pv = value_of(p)
    if pv.shape != (1,):
        raise ShapeError(f"bce expects a shape (1,) probability, got {pv.shape}")
    if y not in (0, 1):
        raise ValueError(f"bce label must be 0 or 1, got {y!r}")
    out = _f_bce([pv], y)
    if isinstance(p, Node):
        return Node("bce", (p,), out, meta=y)
    return out


# --------------------------------------------------------------------------
# graph traversal


def _topo(root):
    seen = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n.id in seen:
            continue
        seen[n.id] = n
        for i in n.inputs:
            if isinstance(i, Node) and i.id not in seen:
                stack.append(i)
    # creation order is a topological order for define-by-run graphs
    return [seen[k] for k in sorted(seen)]


def forward_eval(root):
    """Recompute every node reachable from ``root`` and return its value."""
    if not isinstance(root, Node):
        return root
    for n in _topo(root):
        if n.op == "input":
            continue
        vals = [value_of(i) for i in n.inputs]
        n.value = _FORWARD[n.op](vals, n.meta)
    return root.value


def _accumulate(node, g):
    if node.adjoint is None:
        node.adjoint = g.copy() if isinstance(g, np.ndarray) else np.array(g)
    else:
        node.adjoint += g


def backward(root):
    """Back-propagate from a scalar root; returns ``{name: gradient}``.

    Row parameters (embedding lookups) are gathered into a dense table
    gradient.
    """
    if not isinstance(root, Node):
        raise TypeError("backward needs a graph node, got a plain array")
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topo(root)
    for n in order:
        n.adjoint = None
    root.adjoint = np.ones_like(root.value)
    grads = {}
    for n in reversed(order):
        g = n.adjoint
        if g is None:
            continue
        if n.op == "input":
            if n.param is None:
                continue
            name, row = n.param
            if row is None:
                if name in grads:
                    grads[name] += g
                else:
                    grads[name] = g.copy()
            else:
                table = grads.get(name)
                if table is None:
                    table = grads[name] = np.zeros(n.meta)
                table[row] += g
            continue
        _BACKWARD[n.op](n, g)
    return grads


def _b_affine(n, g):
    ins = n.inputs
    n_pairs = (len(ins) - n.meta) // 2
    for k in range(n_pairs):
        W, x = ins[2 * k], ins[2 * k + 1]
        if isinstance(W, Node):
            _accumulate(W, np.outer(g, value_of(x)))
        if isinstance(x, Node):
            _accumulate(x, value_of(W).T @ g)
    if n.meta and isinstance(ins[-1], Node):
        _accumulate(ins[-1], g)


def _b_sigmoid(n, g):
    s = n.value
    _accumulate(n.inputs[0], g * s * (1.0 - s))


def _b_tanh(n, g):
    t = n.value
    _accumulate(n.inputs[0], g * (1.0 - t * t))


def _b_hadamard(n, g):
    a, b = n.inputs
    if isinstance(a, Node):
        _accumulate(a, g * value_of(b))
    if isinstance(b, Node):
        _accumulate(b, g * value_of(a))


def _b_sum(n, g):
    for x in n.inputs:
        if isinstance(x, Node):
            _accumulate(x, g)


def _b_concat(n, g):
    start = 0
    for x in n.inputs:
        size = value_of(x).shape[0]
        if isinstance(x, Node):
            _accumulate(x, g[start:start + size])
        start += size


def _b_bce(n, g):
    (p,) = n.inputs
    pv = float(p.value[0])
    y = n.meta
    pc = min(max(pv, PROB_CLAMP), 1.0 - PROB_CLAMP)
    if pc != pv:
        d = 0.0
    else:
        d = -y / pc + (1 - y) / (1.0 - pc)
    _accumulate(p, g * d)


_BACKWARD = {
    "affine": _b_affine,
    "sigmoid": _b_sigmoid,
    "tanh": _b_tanh,
    "hadamard": _b_hadamard,
    "add": _b_sum,
    "sum-of-vectors": _b_sum,
    "concat": _b_concat,
    "bce": _b_bce,
}


# --------------------------------------------------------------------------
# finite-difference checking


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(loss_fn, params, step=1e-5, rng_seed=0, max_entries=None, exclude=(),
               oracle_dtype=np.longdouble):
    """Compare backward gradients to central differences, entry by entry.

    ``loss_fn(p)`` maps a dict of arrays or parameter nodes to a scalar.
    ``params`` is a dict of arrays or anything with an ``arrays`` dict.
    With ``max_entries`` only that many randomly chosen entries per array
    (chosen with ``rng_seed``) are perturbed.  Returns the largest relative
    error seen.

    The perturbed losses are evaluated in ``oracle_dtype``.  In float64 the
    difference quotient carries roughly ``eps * |L| / step`` of roundoff,
    about 1e-11 at step 1e-5, which swamps gradients near 1e-8.  Extended
    precision (where the platform has it) pushes that floor far below.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    arrays = getattr(params, "arrays", params)
    names = [k for k in arrays if k not in exclude]
    nodes = {k: (param(k, v) if k in names else v) for k, v in arrays.items()}
    work = {k: np.array(v, dtype=oracle_dtype, copy=True) for k, v in arrays.items()}
    root = loss_fn(nodes)
    analytic = backward(root)
    rng = np.random.default_rng(rng_seed)

    def scalar_loss(name, idx):
        out = np.asarray(value_of(loss_fn(work))).reshape(-1)[0]
        if not np.isfinite(out):
            raise FloatingPointError(f"non-finite loss while perturbing {name}{list(idx)}")
        return out

    worst = 0.0
    for name in names:
        arr = work[name]
        g = analytic.get(name, np.zeros_like(arr))
        indices = list(np.ndindex(arr.shape))
        if max_entries is not None and len(indices) > max_entries:
            pick = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in sorted(pick)]
        for idx in indices:
            orig = arr[idx]
            arr[idx] = orig + step
            up = scalar_loss(name, idx)
            arr[idx] = orig - step
            down = scalar_loss(name, idx)
            arr[idx] = orig
            numeric = float((up - down) / (2.0 * step))
            worst = max(worst, relative_error(float(g[idx]), numeric))
    return worst
