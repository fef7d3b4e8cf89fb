"""Parameter trees: nested dicts/lists with Tensor leaves."""

from __future__ import annotations

import numpy as np

from .errors import StructureError
from .tensor import Tensor


def flatten(tree, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Depth-first (name, leaf) pairs with slash-joined names."""
    items: list[tuple[str, Tensor]] = []
    if isinstance(tree, dict):
        for key in tree:
            items.extend(flatten(tree[key], f"{prefix}{key}/"))
    elif isinstance(tree, (list, tuple)):
        for i, sub in enumerate(tree):
            items.extend(flatten(sub, f"{prefix}{i}/"))
    elif isinstance(tree, Tensor):
        items.append((prefix[:-1], tree))
    else:
        raise StructureError(f"unexpected leaf of type {type(tree)!r} at {prefix!r}")
    return items


def unflatten(flat: dict[str, Tensor]):
    """Rebuild a nested tree; all-integer key levels become lists."""
    root: dict = {}
    for name, leaf in flat.items():
        parts = name.split("/")
        node = root
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = leaf

    def listify(node):
        if not isinstance(node, dict):
            return node
        conv = {k: listify(v) for k, v in node.items()}
        if conv and all(k.isdigit() for k in conv):
            return [conv[str(i)] for i in range(len(conv))]
        return conv

    return listify(root)


def leaves(tree) -> list[Tensor]:
    return [t for _, t in flatten(tree)]


def grad_leaves(tree) -> list[tuple[str, Tensor]]:
    return [(n, t) for n, t in flatten(tree) if t.requires_grad]


def zip_leaves(a, b) -> list[tuple[str, Tensor, Tensor]]:
    """Pair leaves of two trees that must mirror each other exactly."""
    fa, fb = flatten(a), flatten(b)
    if [n for n, _ in fa] != [n for n, _ in fb]:
        raise StructureError(
            f"parameter trees differ: {[n for n, _ in fa]} vs {[n for n, _ in fb]}"
        )
    out = []
    for (name, ta), (_, tb) in zip(fa, fb):
        if ta.shape != tb.shape:
            raise StructureError(
                f"shape mismatch at {name}: {ta.shape} vs {tb.shape}"
            )
        out.append((name, ta, tb))
    return out


def copy_tree(tree, requires_grad: bool | None = None):
    """Deep copy with fresh buffers; optionally force requires_grad."""
    if isinstance(tree, dict):
        return {k: copy_tree(v, requires_grad) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        return [copy_tree(v, requires_grad) for v in tree]
    req = tree.requires_grad if requires_grad is None else requires_grad
    return Tensor(tree.data.copy(), requires_grad=req)


def zeros_like_tree(tree):
    """Mirror of grad-carrying leaves as float32 numpy buffers (velocities)."""
    return {n: np.zeros(t.shape, dtype=np.float32) for n, t in grad_leaves(tree)}


def zero_grads(tree) -> None:
    for t in leaves(tree):
        t.grad = None
