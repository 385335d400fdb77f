"""Cross-entropy, knowledge-distillation KL and NT-Xent contrastive losses.

Each loss returns a :class:`Loss` holding the scalar value and its gradient
with respect to the differentiable inputs (student logits, or both embedding
views for NT-Xent).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch

NT_XENT_TEMPERATURE = 0.5


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "CROSS_ENTROPY"
    KL_DIVERGENCE = "KL_DIVERGENCE"
    NT_XENT_CONTRASTIVE = "NT_XENT_CONTRASTIVE"


@dataclass
class Loss:
    value: float
    grad: np.ndarray | tuple[np.ndarray, ...]

    def __add__(self, other: "Loss") -> "Loss":
        return Loss(self.value + other.value, self.grad + other.grad)

    def scaled(self, factor: float) -> "Loss":
        return Loss(self.value * factor, self.grad * self.grad.dtype.type(factor))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Loss:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeMismatch("cross-entropy needs integer labels")
    n = logits.shape[0]
    logp = log_softmax(logits)
    value = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return Loss(value, grad / grad.dtype.type(n))


def kl_divergence(student: np.ndarray, teacher: np.ndarray) -> Loss:
    """KL(softmax(teacher) || softmax(student)), batch mean, temperature 1."""
    if student.shape != teacher.shape or student.ndim != 2:
        raise ShapeMismatch(f"student {student.shape} vs teacher {teacher.shape}")
    n = student.shape[0]
    logp_s = log_softmax(student)
    logp_t = log_softmax(teacher.astype(student.dtype))
    p_t = np.exp(logp_t)
    value = float((p_t * (logp_t - logp_s)).sum(axis=1).mean())
    grad = (np.exp(logp_s) - p_t) / student.dtype.type(n)
    return Loss(max(value, 0.0), grad)


def nt_xent(z1: np.ndarray, z2: np.ndarray, temperature: float = NT_XENT_TEMPERATURE) -> Loss:
    """SimCLR NT-Xent over paired views; gradient returned for both views."""
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ShapeMismatch(f"view shapes differ: {z1.shape} vs {z2.shape}")
    n = z1.shape[0]
    z = np.concatenate([z1, z2], axis=0)
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-8).astype(z.dtype)
    u = z / norms
    sim = (u @ u.T) / z.dtype.type(temperature)
    m = 2 * n
    pos = np.concatenate([np.arange(n, m), np.arange(n)])
    logits = sim.copy()
    logits[np.arange(m), np.arange(m)] = -np.inf
    logp = log_softmax(logits)
    value = -float(logp[np.arange(m), pos].mean())

    g_sim = np.exp(logp)
    g_sim[np.arange(m), pos] -= 1
    g_sim /= g_sim.dtype.type(m)
    g_u = (g_sim + g_sim.T) @ u / z.dtype.type(temperature)
    g_z = (g_u - u * (u * g_u).sum(axis=1, keepdims=True)) / norms
    return Loss(max(value, 0.0), (g_z[:n], g_z[n:]))


def compute_loss(kind: LossKind | str, a: np.ndarray, b: np.ndarray) -> Loss:
    kind = LossKind(kind)
    if kind is LossKind.CROSS_ENTROPY:
        return cross_entropy(a, b)
    if kind is LossKind.KL_DIVERGENCE:
        return kl_divergence(a, b)
    return nt_xent(a, b)
