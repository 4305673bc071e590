"""Small reverse-mode differentiation tape for dense networks.

A :class:`Tape` is a Wengert list. Nodes are appended by the builder methods
(``affine``, ``tanh``, ...), values are filled in by :meth:`Tape.forward` and
adjoints by :meth:`Tape.backward`. Values are float64 arrays; affine maps act
on the last axis, so a batch of inputs is simply a 2d array of rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"layer shapes inconsistent: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy())


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Node:
    op: str
    args: tuple[int, ...] = ()
    attr: Any = None
    value: np.ndarray | None = None
    adjoint: np.ndarray | None = None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    _forward_done: bool = False
    _backward_done: bool = False

    # -- building -----------------------------------------------------------
    def _push(self, op, args=(), attr=None) -> int:
        for a in args:
            if not 0 <= a < len(self.nodes):
                raise ValueError(f"node {a} does not precede new node")
        self.nodes.append(Node(op, tuple(args), attr))
        self._forward_done = self._backward_done = False
        return len(self.nodes) - 1

    def input(self, dim: int) -> int:
        if any(n.op == "input" for n in self.nodes):
            raise ValueError("a tape has exactly one input node")
        return self._push("input", attr=int(dim))

    def const(self, value) -> int:
        return self._push("const", attr=np.asarray(value, dtype=np.float64))

    def affine(self, x: int, layer: DenseLayer) -> int:
        return self._push("affine", (x,), layer)

    def tanh(self, x: int) -> int:
        return self._push("tanh", (x,))

    def softplus(self, x: int) -> int:
        return self._push("softplus", (x,))

    def relu(self, x: int) -> int:
        return self._push("relu", (x,))

    def scale(self, x: int, c) -> int:
        """Multiply by a constant (scalar or broadcastable array)."""
        return self._push("scale", (x,), np.asarray(c, dtype=np.float64))

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b))

    def sum_squares(self, x: int) -> int:
        return self._push("sum_squares", (x,))

    def mean(self, x: int) -> int:
        return self._push("mean", (x,))

    def cross_entropy(self, logits: int, labels) -> int:
        """Mean softmax cross-entropy of row-wise logits against integer labels."""
        return self._push("xent", (logits,), np.asarray(labels, dtype=np.int64))

    # -- evaluation ---------------------------------------------------------
    @property
    def root(self) -> Node:
        if not self.nodes:
            raise ValueError("empty tape")
        return self.nodes[-1]

    def forward(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.float64)
        for node in self.nodes:
            node.adjoint = None
            vals = [self.nodes[a].value for a in node.args]
            op = node.op
            if op == "input":
                if x.ndim == 0 or x.shape[-1] != node.attr:
                    raise ShapeError(f"input has shape {x.shape}, tape expects last dim {node.attr}")
                node.value = x
            elif op == "const":
                node.value = node.attr
            elif op == "affine":
                (v,) = vals
                if v.shape[-1] != node.attr.in_dim:
                    raise ShapeError(
                        f"affine layer expects {node.attr.in_dim} features, got {v.shape[-1]}"
                    )
                node.value = node.attr(v)
            elif op == "tanh":
                node.value = np.tanh(vals[0])
            elif op == "softplus":
                node.value = _softplus(vals[0])
            elif op == "relu":
                node.value = np.maximum(vals[0], 0.0)
            elif op == "scale":
                node.value = vals[0] * node.attr
            elif op == "add":
                a, b = vals
                try:
                    node.value = a + b
                except ValueError as exc:
                    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
            elif op == "sum_squares":
                node.value = np.asarray(np.sum(vals[0] * vals[0]))
            elif op == "mean":
                node.value = np.asarray(np.mean(vals[0]))
            elif op == "xent":
                z = np.atleast_2d(vals[0])
                labels = node.attr
                if labels.shape != (z.shape[0],):
                    raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} rows of logits")
                lse = np.logaddexp.reduce(z, axis=1)
                node.value = np.asarray(np.mean(lse - z[np.arange(z.shape[0]), labels]))
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")
        self._forward_done = True
        self._backward_done = False
        out = self.root.value
        return float(out) if out.ndim == 0 else out

    def backward(self, seed=None) -> None:
        """Propagate adjoints from the root.

        ``seed`` defaults to 1 and is then only allowed for a scalar root; a
        vector seed computes a vector-Jacobian product.
        """
        if not self._forward_done:
            raise RuntimeError("forward has not been run on this tape")
        root = self.root
        if seed is None:
            if root.value.size != 1:
                raise ValueError(f"root is not scalar (shape {root.value.shape}); pass a seed")
            seed = np.ones_like(root.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.value.shape:
            raise ShapeError(f"seed shape {seed.shape} != root shape {root.value.shape}")
        for node in self.nodes:
            node.adjoint = None
        root.adjoint = seed.copy()

        for node in reversed(self.nodes):
            g = node.adjoint
            if g is None or not node.args:
                continue
            vals = [self.nodes[a].value for a in node.args]
            op = node.op
            if op == "affine":
                grads = [g @ node.attr.weight]
            elif op == "tanh":
                grads = [g * (1.0 - node.value * node.value)]
            elif op == "softplus":
                grads = [g * _sigmoid(vals[0])]
            elif op == "relu":
                grads = [g * (vals[0] > 0.0)]
            elif op == "scale":
                grads = [g * node.attr]
            elif op == "add":
                grads = [g, g]
            elif op == "sum_squares":
                grads = [2.0 * g * vals[0]]
            elif op == "mean":
                grads = [np.full_like(vals[0], g / vals[0].size)]
            elif op == "xent":
                z = np.atleast_2d(vals[0])
                p = np.exp(z - np.logaddexp.reduce(z, axis=1, keepdims=True))
                p[np.arange(z.shape[0]), node.attr] -= 1.0
                grads = [(g / z.shape[0] * p).reshape(vals[0].shape)]
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")
            for a, ga in zip(node.args, grads):
                target = self.nodes[a]
                ga = _unbroadcast(ga, target.value.shape)
                target.adjoint = ga if target.adjoint is None else target.adjoint + ga
        self._backward_done = True

    def gradient(self, wrt: str = "input"):
        """Gradient of the scalar root.

        ``wrt="input"`` returns an array shaped like the input;
        ``wrt="parameters"`` returns ``[(dW, db), ...]`` in affine-node order.
        Runs the backward pass if it has not been run yet.
        """
        if not self._backward_done:
            self.backward()
        if wrt == "input":
            node = next(n for n in self.nodes if n.op == "input")
            if node.adjoint is None:
                return np.zeros_like(node.value)
            return node.adjoint
        if wrt == "parameters":
            out = []
            for node in self.nodes:
                if node.op != "affine":
                    continue
                x = self.nodes[node.args[0]].value
                g = node.adjoint
                if g is None:
                    out.append((np.zeros_like(node.attr.weight), np.zeros_like(node.attr.bias)))
                    continue
                g2 = g.reshape(-1, g.shape[-1])
                x2 = x.reshape(-1, x.shape[-1])
                out.append((g2.T @ x2, g2.sum(axis=0)))
            return out
        raise ValueError(f"wrt must be 'input' or 'parameters', got {wrt!r}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def mlp_tape(layers: list[DenseLayer], activation: str = "tanh") -> tuple[Tape, int]:
    """Tape for a dense network: hidden layers get ``activation``, the last is linear."""
    act = {"tanh": Tape.tanh, "relu": Tape.relu, "softplus": Tape.softplus}[activation]
    tape = Tape()
    h = tape.input(layers[0].in_dim)
    for i, layer in enumerate(layers):
        h = tape.affine(h, layer)
        if i < len(layers) - 1:
            h = act(tape, h)
    return tape, h
