"""Reverse-mode automatic differentiation over small dense float64 tensors.

The engine is a plain computation tape: every operation appends a node
holding its output value and a closure that maps the upstream gradient to
gradients for the node's parents. ``Tape.backward`` walks the node list in
strict reverse creation order, so gradients are deterministic and
bit-identical for identical tapes.

Only the handful of ops the forecaster needs exist: matrix multiply,
broadcast add, elementwise affine, ReLU, same-padded 3x3 convolution,
reshape, and mean-squared-error reduction. matmul and conv2d accept an
optional leading batch axis (the batch size is fixed within a tape; there is
no padding or bucketing machinery).

Values are float64 throughout: the networks are tiny and exact agreement
with central finite differences matters more than speed.
"""

from __future__ import annotations

import numpy as np

_DEBUG_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness checks after every op (leaf construction always checks)."""
    global _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = bool(enabled)


def _as_value(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 4:
        raise ValueError(f"tensors are limited to rank 4, got rank {arr.ndim}")
    if any(extent <= 0 for extent in arr.shape):
        raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{context}: non-finite values")


class Node:
    """One tape entry: an immutable value plus the recipe for its parent gradients."""

    __slots__ = ("value", "op", "parents", "backward_fn", "index")

    def __init__(self, value, op, parents, backward_fn, index):
        self.value = value
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Gradients:
    """Per-node gradients from one backward pass, indexed by tape node."""

    def __init__(self, values):
        self._values = values

    def __getitem__(self, node: Node) -> np.ndarray:
        grad = self._values[node.index]
        if grad is None:
            return np.zeros_like(node.value)
        return grad


class Tape:
    """Append-only computation record; inputs always precede outputs."""

    def __init__(self):
        self._nodes: list[Node] = []

    def _record(self, value, op, parents, backward_fn) -> Node:
        value = np.ascontiguousarray(value, dtype=np.float64)
        if _DEBUG_CHECK_FINITE:
            _check_finite(value, op)
        node = Node(value, op, parents, backward_fn, len(self._nodes))
        self._nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Enter an external value (parameter or input) onto the tape."""
        arr = _as_value(value)
        _check_finite(arr, "leaf")
        return self._record(arr, "leaf", (), None)

    # ------------------------------------------------------------------ ops

    def matmul(self, a: Node, b: Node) -> Node:
        """Matrix product; either operand may carry one leading batch axis."""
        av, bv = a.value, b.value
        if av.ndim not in (2, 3) or bv.ndim not in (2, 3):
            raise ValueError(f"matmul expects rank 2 or 3 operands, got shapes {av.shape} and {bv.shape}")
        if av.ndim == 3 and bv.ndim == 3:
            raise ValueError(f"matmul allows at most one batched operand, got shapes {av.shape} and {bv.shape}")
        if av.shape[-1] != bv.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
        out = np.matmul(av, bv)

        def backward(grad):
            if av.ndim == 2 and bv.ndim == 2:
                return grad @ bv.T, av.T @ grad
            if av.ndim == 3:  # (B, m, k) @ (k, n)
                return np.matmul(grad, bv.T), np.einsum("bmk,bmn->kn", av, grad)
            # (m, k) @ (B, k, n)
            return np.einsum("bmn,bkn->mk", grad, bv), np.matmul(av.T, grad)

        return self._record(out, "matmul", (a, b), backward)

    def add(self, x: Node, y: Node) -> Node:
        """Elementwise sum; ``y`` may broadcast against trailing axes of ``x`` (bias add)."""
        xv, yv = x.value, y.value
        if yv.ndim > xv.ndim:
            raise ValueError(f"add: second operand rank exceeds first ({yv.shape} vs {xv.shape})")
        for xd, yd in zip(reversed(xv.shape), reversed(yv.shape)):
            if yd != xd and yd != 1:
                raise ValueError(f"add: shape {yv.shape} does not broadcast against {xv.shape}")
        out = xv + yv

        def backward(grad):
            return grad, _reduce_to_shape(grad, yv.shape)

        return self._record(out, "add", (x, y), backward)

    def scale_shift(self, x: Node, w: Node, b: Node) -> Node:
        """Elementwise affine ``x * w + b``; ``w`` and ``b`` broadcast like :meth:`add`."""
        xv, wv, bv = x.value, w.value, b.value
        for name, ov in (("scale", wv), ("shift", bv)):
            if ov.ndim > xv.ndim:
                raise ValueError(f"scale_shift: {name} rank exceeds input ({ov.shape} vs {xv.shape})")
            for xd, od in zip(reversed(xv.shape), reversed(ov.shape)):
                if od != xd and od != 1:
                    raise ValueError(f"scale_shift: {name} shape {ov.shape} does not broadcast against {xv.shape}")
        out = xv * wv + bv

        def backward(grad):
            return (
                grad * wv,
                _reduce_to_shape(grad * xv, wv.shape),
                _reduce_to_shape(grad, bv.shape),
            )

        return self._record(out, "scale_shift", (x, w, b), backward)

    def relu(self, x: Node) -> Node:
        """Rectifier; the subgradient at exactly 0 is 0."""
        mask = x.value > 0.0
        out = np.where(mask, x.value, 0.0)

        def backward(grad):
            return (np.where(mask, grad, 0.0),)

        return self._record(out, "relu", (x,), backward)

    def reshape(self, x: Node, shape: tuple[int, ...]) -> Node:
        """View the same values under a new shape (the gradient reshapes back)."""
        if int(np.prod(shape)) != x.value.size:
            raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
        out = x.value.reshape(shape)
        old_shape = x.shape

        def backward(grad):
            return (grad.reshape(old_shape),)

        return self._record(out, "reshape", (x,), backward)

    def conv2d(self, x: Node, kernel: Node, bias: Node) -> Node:
        """Same-padded stride-1 3x3 cross-correlation.

        ``x`` is (c_in, H, W) or (B, c_in, H, W); ``kernel`` is
        (c_out, c_in, 3, 3); ``bias`` is (c_out,). The output keeps the
        input's spatial extents.
        """
        xv, kv, bv = x.value, kernel.value, bias.value
        batched = xv.ndim == 4
        if xv.ndim not in (3, 4):
            raise ValueError(f"conv2d input must be rank 3 or 4, got shape {xv.shape}")
        if kv.ndim != 4 or kv.shape[2:] != (3, 3):
            raise ValueError(f"conv2d kernel must be (c_out, c_in, 3, 3), got shape {kv.shape}")
        x4 = xv if batched else xv[None]
        if x4.shape[1] != kv.shape[1]:
            raise ValueError(f"conv2d channel mismatch: input {xv.shape} vs kernel {kv.shape}")
        if bv.shape != (kv.shape[0],):
            raise ValueError(f"conv2d bias must be (c_out,), got shape {bv.shape}")

        n_batch, c_in, height, width = x4.shape
        c_out = kv.shape[0]
        xp = np.pad(x4, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # One slab per kernel offset: patches[b, c, t, i, j] = xp[b, c, i+di, j+dj]
        patches = np.stack(
            [xp[:, :, di : di + height, dj : dj + width] for di in range(3) for dj in range(3)],
            axis=2,
        )
        k_flat = kv.reshape(c_out, c_in, 9)
        out4 = np.einsum("bcthw,oct->bohw", patches, k_flat) + bv[None, :, None, None]
        out = out4 if batched else out4[0]

        def backward(grad):
            g4 = grad if batched else grad[None]
            grad_k = np.einsum("bohw,bcthw->oct", g4, patches).reshape(kv.shape)
            grad_b = g4.sum(axis=(0, 2, 3))
            gp = np.zeros_like(xp)
            for t in range(9):
                di, dj = divmod(t, 3)
                gp[:, :, di : di + height, dj : dj + width] += np.einsum("bohw,oc->bchw", g4, k_flat[:, :, t])
            grad_x = gp[:, :, 1 : height + 1, 1 : width + 1]
            return (grad_x if batched else grad_x[0]), grad_k, grad_b

        return self._record(out, "conv2d", (x, kernel, bias), backward)

    def mse(self, pred: Node, target: Node) -> Node:
        """Mean over all elements of the squared difference (scalar output)."""
        pv, tv = pred.value, target.value
        if pv.shape != tv.shape:
            raise ValueError(f"mse shape mismatch: {pv.shape} vs {tv.shape}")
        diff = pv - tv
        out = np.array(np.mean(diff * diff))
        scale = 2.0 / diff.size

        def backward(grad):
            g = grad * scale * diff
            return g, -g

        return self._record(out, "mse", (pred, target), backward)

    # ------------------------------------------------------------- backward

    def backward(self, loss: Node, seed: float = 1.0) -> Gradients:
        """Accumulate gradients of ``loss`` for every node, in reverse creation order."""
        if loss.value.ndim != 0:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss.index] = np.array(float(seed))
        for node in reversed(self._nodes[: loss.index + 1]):
            grad = grads[node.index]
            if grad is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(grad)
            for parent, pg in zip(node.parents, parent_grads):
                if _DEBUG_CHECK_FINITE:
                    _check_finite(pg, f"backward:{node.op}")
                if grads[parent.index] is None:
                    grads[parent.index] = np.array(pg, dtype=np.float64)
                else:
                    grads[parent.index] = grads[parent.index] + pg
        return Gradients(grads)


def _reduce_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the broadcast operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze_axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if squeeze_axes:
        grad = grad.sum(axis=squeeze_axes, keepdims=True)
    return grad


def central_difference(func, arrays: list[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    """Central finite-difference gradients of scalar ``func(arrays)``.

    Independent of the tape: it only evaluates ``func`` at perturbed inputs,
    which is what makes it usable as an oracle for :meth:`Tape.backward`.
    """
    grads = []
    for which in range(len(arrays)):
        base = arrays[which]
        grad = np.zeros_like(base)
        flat = grad.reshape(-1)
        for idx in range(base.size):
            bumped = [arr.copy() for arr in arrays]
            bumped[which].reshape(-1)[idx] += step
            f_plus = float(func(bumped))
            bumped[which].reshape(-1)[idx] -= 2.0 * step
            f_minus = float(func(bumped))
            flat[idx] = (f_plus - f_minus) / (2.0 * step)
        grads.append(grad)
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Sup-norm relative disagreement: ||a - b||_inf / max(||a||_inf, ||b||_inf, eps)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-8)
    return float(np.max(np.abs(a - b), initial=0.0) / denom)
