"""Sequential, constituency, dependency and head-lexicalized LSTM classifiers.

Each classifier maps a masked sentence to the probability that the masked
verb is singular.  Parameters are plain dicts of float64 arrays; wrapping
them in :func:`numcore.param` nodes turns the same code into a
differentiable graph.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .treebank import Example, Vocab, dep_children, head_lexicalize, leaves

ARCHS = ("bilstm", "dependency", "constituency", "headlex")
GATES = ("i", "f", "o", "u")
CHECKPOINT_VERSION = 1


def param_shapes(arch: str, vocab_size: int, d_emb: int, d_h: int) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {"embedding": (vocab_size, d_emb)}
    if arch == "bilstm":
        for d in ("fwd", "bwd"):
            for g in GATES:
                shapes[f"{d}_W_{g}"] = (d_h, d_emb)
                shapes[f"{d}_U_{g}"] = (d_h, d_h)
                shapes[f"{d}_b_{g}"] = (d_h,)
        shapes["cls_w"] = (1, 2 * d_h)
    elif arch in ("constituency", "headlex"):
        for g in GATES:
            shapes[f"W_{g}"] = (d_h, d_emb)
        for g in ("i", "o", "u"):
            for l in (1, 2):
                shapes[f"U_{g}_{l}"] = (d_h, d_h)
        for k in (1, 2):
            for l in (1, 2):
                shapes[f"U_f_{k}{l}"] = (d_h, d_h)
        for g in GATES:
            shapes[f"b_{g}"] = (d_h,)
        shapes["cls_w"] = (1, d_h)
    elif arch == "dependency":
        for g in GATES:
            shapes[f"W_{g}"] = (d_h, d_emb)
            shapes[f"U_{g}"] = (d_h, d_h)
            shapes[f"b_{g}"] = (d_h,)
        shapes["cls_w"] = (1, d_h)
    else:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    shapes["cls_b"] = (1,)
    return shapes


@dataclass
class ParamBundle:
    arch: str
    d_emb: int
    d_h: int
    vocab: Vocab
    arrays: dict
    frozen: frozenset = frozenset({"embedding"})
    meta: dict = field(default_factory=dict)

    def trainable(self) -> list[str]:
        return [k for k in self.arrays if k not in self.frozen]

    def copy(self) -> "ParamBundle":
        return ParamBundle(
            self.arch, self.d_emb, self.d_h, self.vocab,
            {k: v.copy() for k, v in self.arrays.items()},
            self.frozen, dict(self.meta))

    def check(self) -> None:
        want = param_shapes(self.arch, len(self.vocab), self.d_emb, self.d_h)
        if set(want) != set(self.arrays):
            missing = set(want) - set(self.arrays)
            extra = set(self.arrays) - set(want)
            raise ValueError(f"{self.arch} parameters: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, shape in want.items():
            if self.arrays[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.arrays[k].shape}, expected {shape}")


def init_params(arch: str, vocab: Vocab, d_emb: int = 50, d_h: int = 50, seed: int = 0,
                scale: float = 0.1, embeddings_trainable: bool = False) -> ParamBundle:
    """Uniform(-scale, scale) initialisation of every array, embeddings included."""
    rng = np.random.default_rng(seed)
    arrays = {
        k: rng.uniform(-scale, scale, size=shape)
        for k, shape in param_shapes(arch, len(vocab), d_emb, d_h).items()
    }
    frozen = frozenset() if embeddings_trainable else frozenset({"embedding"})
    return ParamBundle(arch, d_emb, d_h, vocab, arrays, frozen)


def zero_params(arch: str, vocab: Vocab, d_emb: int, d_h: int) -> ParamBundle:
    arrays = {k: np.zeros(s) for k, s in param_shapes(arch, len(vocab), d_emb, d_h).items()}
    return ParamBundle(arch, d_emb, d_h, vocab, arrays)


# --------------------------------------------------------------------------
# cells


def _pre(pairs, bias):
    pairs = [(W, x) for W, x in pairs if x is not None]
    if not pairs:
        return bias
    return nc.affine(pairs, bias)


def lstm_cell(p, x, h_prev, c_prev, prefix=""):
    """Standard LSTM step.  ``h_prev``/``c_prev`` may be None for a zero state."""
    P = lambda name: p[prefix + name]  # noqa: E731
    i = nc.sigmoid(_pre([(P("W_i"), x), (P("U_i"), h_prev)], P("b_i")))
    o = nc.sigmoid(_pre([(P("W_o"), x), (P("U_o"), h_prev)], P("b_o")))
    u = nc.tanh(_pre([(P("W_u"), x), (P("U_u"), h_prev)], P("b_u")))
    c = nc.hadamard(i, u)
    if c_prev is not None:
        f = nc.sigmoid(_pre([(P("W_f"), x), (P("U_f"), h_prev)], P("b_f")))
        c = nc.add(c, nc.hadamard(f, c_prev))
    h = nc.hadamard(o, nc.tanh(c))
    return h, c


def binary_tree_cell(p, x, left, right):
    """Binary Tree-LSTM node.  ``x`` None means a zero input; ``left``/``right``
    are ``(h, c)`` pairs or None for a leaf with zero child states."""
    if (left is None) != (right is None):
        raise ValueError("binary cell needs both children or neither")
    if left is None:
        i = nc.sigmoid(_pre([(p["W_i"], x)], p["b_i"]))
        o = nc.sigmoid(_pre([(p["W_o"], x)], p["b_o"]))
        u = nc.tanh(_pre([(p["W_u"], x)], p["b_u"]))
        c = nc.hadamard(i, u)
        return nc.hadamard(o, nc.tanh(c)), c
    (h1, c1), (h2, c2) = left, right

    def gate(g):
        return _pre([(p[f"W_{g}"], x), (p[f"U_{g}_1"], h1), (p[f"U_{g}_2"], h2)], p[f"b_{g}"])

    i = nc.sigmoid(gate("i"))
    o = nc.sigmoid(gate("o"))
    u = nc.tanh(gate("u"))
    f1 = nc.sigmoid(_pre([(p["W_f"], x), (p["U_f_11"], h1), (p["U_f_12"], h2)], p["b_f"]))
    f2 = nc.sigmoid(_pre([(p["W_f"], x), (p["U_f_21"], h1), (p["U_f_22"], h2)], p["b_f"]))
    c = nc.add(nc.hadamard(i, u), nc.hadamard(f1, c1), nc.hadamard(f2, c2))
    h = nc.hadamard(o, nc.tanh(c))
    return h, c


def childsum_cell(p, x, children):
    """Child-sum Tree-LSTM node over an unordered collection of ``(h, c)``."""
    children = list(children)
    if not children:
        i = nc.sigmoid(_pre([(p["W_i"], x)], p["b_i"]))
        o = nc.sigmoid(_pre([(p["W_o"], x)], p["b_o"]))
        u = nc.tanh(_pre([(p["W_u"], x)], p["b_u"]))
        c = nc.hadamard(i, u)
        return nc.hadamard(o, nc.tanh(c)), c
    h_sum = nc.vsum([h for h, _ in children])
    i = nc.sigmoid(_pre([(p["W_i"], x), (p["U_i"], h_sum)], p["b_i"]))
    o = nc.sigmoid(_pre([(p["W_o"], x), (p["U_o"], h_sum)], p["b_o"]))
    u = nc.tanh(_pre([(p["W_u"], x), (p["U_u"], h_sum)], p["b_u"]))
    kept = [
        nc.hadamard(nc.sigmoid(_pre([(p["W_f"], x), (p["U_f"], h_k)], p["b_f"])), c_k)
        for h_k, c_k in children
    ]
    c = nc.add(nc.hadamard(i, u), nc.vsum(kept))
    h = nc.hadamard(o, nc.tanh(c))
    return h, c


def _classify(p, h):
    return nc.sigmoid(nc.affine([(p["cls_w"], h)], p["cls_b"]))


# --------------------------------------------------------------------------
# classifiers; ``xs`` is the per-token input list with *MASK* already placed


def bilstm_classify(p, xs, mask_index):
    n = len(xs)
    if n < 1:
        raise ValueError("empty sentence")
    if not 0 <= mask_index < n:
        raise IndexError(f"mask_index {mask_index} out of range for {n} tokens")
    h = c = None
    for t in range(mask_index + 1):
        h, c = lstm_cell(p, xs[t], h, c, "fwd_")
    h_fwd = h
    h = c = None
    for t in range(n - 1, mask_index - 1, -1):
        h, c = lstm_cell(p, xs[t], h, c, "bwd_")
    return _classify(p, nc.concat(h_fwd, h))


def _binary_tree(p, node, leaf_x, internal_x):
    if not isinstance(node, tuple):
        return binary_tree_cell(p, leaf_x(node), None, None)
    left = _binary_tree(p, node[0], leaf_x, internal_x)
    right = _binary_tree(p, node[1], leaf_x, internal_x)
    return binary_tree_cell(p, internal_x(node), left, right)


def constituency_classify(p, xs, const_tree, mask_index):
    if sorted(leaves(const_tree)) != list(range(len(xs))):
        raise ValueError("constituency tree does not cover the sentence")
    h, _ = _binary_tree(p, const_tree, lambda i: xs[i], lambda node: None)
    return _classify(p, h)


def headlex_classify(p, xs, headlex_tree, mask_index, zero_internal=False):
    """Binary tree whose internal nodes read their head word's input.

    Nodes headed by the masked verb therefore read the *MASK* input.  With
    ``zero_internal`` the internal inputs are zero vectors instead.
    """
    def run(node):
        if node.is_leaf:
            return binary_tree_cell(p, xs[node.head], None, None)
        left, right = run(node.left), run(node.right)
        if zero_internal:
            x = np.zeros(nc.value_of(xs[0]).shape)
        else:
            x = xs[node.head]
        return binary_tree_cell(p, x, left, right)

    if sorted(n.head for n in headlex_tree.nodes() if n.is_leaf) != list(range(len(xs))):
        raise ValueError("head-lexicalized tree does not cover the sentence")
    h, _ = run(headlex_tree)
    return _classify(p, h)


def dependency_classify(p, xs, dep_heads, mask_index):
    if len(dep_heads) != len(xs):
        raise ValueError("dependency heads and inputs differ in length")
    if dep_heads[mask_index] != 0:
        raise ValueError("the masked verb must be the dependency root")
    kids = dep_children(dep_heads)

    def run(i):
        return childsum_cell(p, xs[i], [run(k) for k in kids[i]])

    h, _ = run(mask_index)
    return _classify(p, h)


# --------------------------------------------------------------------------
# bundle-level helpers


def embed(p, ids):
    """Per-token inputs; a parameter-node table yields per-row parameter leaves."""
    table = p["embedding"]
    if isinstance(table, nc.Node):
        rows = {}
        for i in ids:
            if i not in rows:
                rows[i] = nc.param("embedding", table.value[i], row=i,
                                   table_shape=table.value.shape)
        return [rows[i] for i in ids]
    return [table[i] for i in ids]


def forward(arch, p, vocab: Vocab, ex: Example):
    xs = embed(p, vocab.encode(ex.tokens, ex.mask_index))
    if arch == "bilstm":
        return bilstm_classify(p, xs, ex.mask_index)
    if arch == "constituency":
        return constituency_classify(p, xs, ex.const_tree, ex.mask_index)
    if arch == "headlex":
        tree = head_lexicalize(ex.const_tree, tuple(ex.dep_heads))
        return headlex_classify(p, xs, tree, ex.mask_index)
    if arch == "dependency":
        return dependency_classify(p, xs, ex.dep_heads, ex.mask_index)
    raise ValueError(f"unknown architecture {arch!r}")


def predict_proba(bundle: ParamBundle, ex: Example) -> float:
    return float(forward(bundle.arch, bundle.arrays, bundle.vocab, ex)[0])


def predict_label(prob: float) -> int:
    # ties go to label 0 (plural)
    return 1 if prob > 0.5 else 0


def loss_and_grad(bundle: ParamBundle, ex: Example):
    """BCE loss, predicted probability and gradients of the trainable arrays."""
    names = set(bundle.trainable())
    p = {k: (nc.param(k, v) if k in names else v) for k, v in bundle.arrays.items()}
    prob = forward(bundle.arch, p, bundle.vocab, ex)
    loss = nc.bce(prob, int(ex.label))
    # a fully frozen bundle builds no graph at all
    grads = nc.backward(loss) if isinstance(loss, nc.Node) else {}
    for k in names:
        if k not in grads:
            grads[k] = np.zeros_like(bundle.arrays[k])
    return float(nc.value_of(loss)[0]), float(nc.value_of(prob)[0]), grads


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, bundle: ParamBundle) -> None:
    """Zip of ``.npy`` arrays plus a JSON header; byte-stable across runs."""
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": bundle.arch,
        "d_emb": bundle.d_emb,
        "d_h": bundle.d_h,
        "vocab": bundle.vocab.words,
        "frozen": sorted(bundle.frozen),
        "meta": bundle.meta,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_entry("header.json"), json.dumps(header, sort_keys=True))
        for name in sorted(bundle.arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(bundle.arrays[name], dtype="<f8"),
                                      allow_pickle=False)
            zf.writestr(_entry(f"{name}.npy"), buf.getvalue())


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    return info


def load_checkpoint(path) -> ParamBundle:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                             allow_pickle=False)
    bundle = ParamBundle(header["arch"], header["d_emb"], header["d_h"],
                         Vocab(header["vocab"]), arrays, frozenset(header["frozen"]),
                         header.get("meta", {}))
    bundle.check()
    return bundle
