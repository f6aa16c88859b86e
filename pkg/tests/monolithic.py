"""Independent single-network oracle for the split-training equivalence tests.

Plain numpy only; deliberately does NOT import vflkit.nn. The first layer is
one dense matrix with a structural block mask (owner i's weights sit on its
own row/column block, cross-blocks pinned to zero) and updates with the owner
learning rate; the remaining layers mirror the scientist's stack and update
with the scientist learning rate.
"""

from __future__ import annotations

import numpy as np


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    raise ValueError(name)


def _act_grad(name: str, z: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if name == "relu":
        return grad * (z > 0.0)
    return grad


def softmax_ce(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), y].mean())
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


class BlockOracle:
    """Block-structured monolithic trainer equivalent to the split system."""

    def __init__(
        self,
        owner_params: list[tuple[np.ndarray, np.ndarray, str]],
        scientist_params: list[tuple[np.ndarray, np.ndarray, str]],
        owner_lr: float,
        scientist_lr: float,
    ):
        acts = {act for _, _, act in owner_params}
        if len(acts) != 1:
            raise ValueError("owners must share one activation for the fused first layer")
        self.owner_act = acts.pop()
        self.in_widths = [w.shape[1] for w, _, _ in owner_params]
        self.out_widths = [w.shape[0] for w, _, _ in owner_params]
        total_in, total_out = sum(self.in_widths), sum(self.out_widths)

        self.w1 = np.zeros((total_out, total_in))
        self.mask = np.zeros_like(self.w1)
        self.b1 = np.concatenate([b for _, b, _ in owner_params])
        row = col = 0
        for w, _, _ in owner_params:
            k, d = w.shape
            self.w1[row : row + k, col : col + d] = w
            self.mask[row : row + k, col : col + d] = 1.0
            row += k
            col += d

        self.sci = [(w.copy(), b.copy(), act) for w, b, act in scientist_params]
        self.owner_lr = owner_lr
        self.scientist_lr = scientist_lr

    def _forward(self, x: np.ndarray):
        z1 = x @ self.w1.T + self.b1
        a = _act(self.owner_act, z1)
        zs = []
        for w, b, _ in self.sci:
            zs.append(a @ w.T + b)
            a = _act(self.sci[len(zs) - 1][2], zs[-1])
        return z1, zs, a

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self._forward(x)[2]

    def train_step(self, x: np.ndarray, y: np.ndarray) -> float:
        z1, zs, logits = self._forward(x)
        loss, grad = softmax_ce(logits, np.asarray(y))

        # scientist stack backward (inputs to each layer recomputed from caches)
        inputs = [_act(self.owner_act, z1)]
        for (w, b, act), z in zip(self.sci[:-1], zs[:-1]):
            inputs.append(_act(act, z))
        updates = []
        for idx in range(len(self.sci) - 1, -1, -1):
            w, b, act = self.sci[idx]
            dz = _act_grad(act, zs[idx], grad)
            updates.append((idx, dz.T @ inputs[idx], dz.sum(axis=0)))
            grad = dz @ w

        # fused owner layer backward with the structural mask
        dz1 = _act_grad(self.owner_act, z1, grad)
        gw1 = (dz1.T @ x) * self.mask
        gb1 = dz1.sum(axis=0)

        for idx, gw, gb in updates:
            w, b, act = self.sci[idx]
            self.sci[idx] = (w - self.scientist_lr * gw, b - self.scientist_lr * gb, act)
        self.w1 -= self.owner_lr * gw1
        self.b1 -= self.owner_lr * gb1
        return loss

    def owner_block(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        row = sum(self.out_widths[:i])
        col = sum(self.in_widths[:i])
        k, d = self.out_widths[i], self.in_widths[i]
        return self.w1[row : row + k, col : col + d], self.b1[row : row + k]


def relative_gap(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
