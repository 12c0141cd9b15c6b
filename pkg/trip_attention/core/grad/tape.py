"""Reverse-mode automatic differentiation on an append-only tape of numpy operations."""

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from trip_attention.core import custom_errors


class Node:
    """A value recorded on a tape.

    Parameters
    ----------
    tape (Tape) : owning tape
    index (int) : position on the tape
    value (numpy.ndarray) : forward value
    requires_grad (bool) : gradients flow into this node
    """

    __slots__ = ("tape", "index", "value", "requires_grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(index={self.index}, shape={self.value.shape}, requires_grad={self.requires_grad})"


class Gradients:
    """Gradients keyed by node, zero for nodes the loss does not reach."""

    def __init__(self, grads: Dict[int, np.ndarray], tape: "Tape"):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, node: Node) -> np.ndarray:
        grad = self._grads.get(node.index)
        if grad is None:
            return np.zeros_like(node.value)
        return grad

    def __contains__(self, node: Node) -> bool:
        return node.index in self._grads


class Tape:
    """Append-only record of primitive operations.

    Records are stored in execution order, which is a topological order of the
    computation, so backward walks them once in reverse.

    Examples
    --------
    >>> tape = Tape()
    >>> x = tape.leaf(np.array(3.0))
    >>> y = tape.record(x.value * x.value, (x,), lambda g: (2 * x.value * g,))
    >>> float(tape.backward(y)[x])
    6.0
    """

    def __init__(self):
        self.nodes = []
        self.records = []

    def _new_node(self, value, requires_grad: bool) -> Node:
        node = Node(self, len(self.nodes), np.asarray(value), requires_grad)
        self.nodes.append(node)

        return node

    def leaf(self, value, requires_grad: bool = True) -> Node:
        """Add an input or parameter."""
        return self._new_node(value, requires_grad)

    def constant(self, value) -> Node:
        """Add a value that never receives gradients."""
        return self._new_node(value, False)

    def record(
        self,
        value,
        inputs: Sequence[Node],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ) -> Node:
        """Record the result of a primitive.

        Parameters
        ----------
        value (numpy.ndarray) : forward result
        inputs (sequence) : input nodes of the primitive
        backward (callable) : maps the output gradient to one gradient (or None) per input

        Returns
        -------
        node (Node) : output node, recorded only if any input requires gradients
        """
        requires_grad = any(node.requires_grad for node in inputs)
        node = self._new_node(value, requires_grad)
        if requires_grad:
            self.records.append((node.index, tuple(inputs), backward))

        return node

    def backward(self, loss: Node) -> Gradients:
        """Propagate gradients of a scalar loss to every node that requires them.

        Parameters
        ----------
        loss (Node) : scalar node on this tape

        Returns
        -------
        grads (Gradients) : d loss / d node for every node
        """
        if loss.tape is not self:
            raise custom_errors.DisconnectedLoss("loss node belongs to another tape")
        if loss.value.size != 1:
            raise custom_errors.DisconnectedLoss(f"loss must be a scalar, got shape {loss.value.shape}")
        if not loss.requires_grad:
            raise custom_errors.DisconnectedLoss("loss does not depend on any node requiring gradients")

        grads = {loss.index: np.ones_like(loss.value)}
        for index, inputs, backward in reversed(self.records):
            if index > loss.index or index not in grads:
                continue
            for node, grad in zip(inputs, backward(grads[index])):
                if grad is None or not node.requires_grad:
                    continue
                if node.index in grads:
                    grads[node.index] = grads[node.index] + grad
                else:
                    grads[node.index] = grad

        return Gradients(grads, self)
