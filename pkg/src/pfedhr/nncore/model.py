"""Sequential model container, tape-based backward pass and SGD."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..errors import NoTape, ShapeMismatch
from .layers import DTYPE, Block, Linear
from .losses import Loss


class Model:
    """Ordered blocks followed by a linear classifier head.

    ``layers`` may contain client layer units as well as stitch adapters.
    ``head`` is ``None`` only for headless stacks.
    """

    def __init__(self, layers: list[Block], head: Linear | None, input_spec, template: str | None = None):
        self.layers = list(layers)
        self.head = head
        self.input_spec = tuple(int(d) for d in input_spec)
        self.template = template
        self.mode = "eval"
        self.tape: list[tuple[Block, object]] | None = None
        self.blueprint = None

    @property
    def num_classes(self) -> int:
        return self.head.out_spec[0]

    @property
    def feature_spec(self) -> tuple[int, ...]:
        return self.layers[-1].out_spec if self.layers else self.input_spec

    def blocks(self) -> list[Block]:
        return self.layers + ([self.head] if self.head is not None else [])

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        self.tape = None
        return self

    def num_params(self) -> int:
        return sum(b.num_params() for b in self.blocks())

    def clone(self) -> "Model":
        out = copy.deepcopy(self)
        out.tape = None
        return out

    def astype(self, dtype) -> "Model":
        out = self.clone()
        out.layers = [b.astype(dtype) for b in self.layers]
        out.head = self.head.astype(dtype) if self.head is not None else None
        return out

    def zero_grad(self) -> None:
        for b in self.blocks():
            b.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array map over parameters and buffers (copies)."""
        out = {}
        for i, b in enumerate(self.blocks()):
            for k, v in {**b.params, **b.buffers}.items():
                out[f"{i}.{k}"] = v.copy()
        return out

    def __repr__(self) -> str:
        inner = ", ".join(repr(b) for b in self.layers)
        return f"Model[{self.template}]({inner}; head={self.head!r})"


def _run(model: Model, blocks: list[Block], x: np.ndarray, rng) -> np.ndarray:
    train = model.mode == "train"
    if train:
        model.tape = []
        if rng is None:
            rng = np.random.default_rng(0)
    for block in blocks:
        x, cache = block.forward(x, train=train, rng=rng)
        if train:
            model.tape.append((block, cache))
    return x


def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim < 2 or tuple(batch.shape[1:]) != model.input_spec:
        raise ShapeMismatch(f"model expects batch (n, {model.input_spec}), got {batch.shape}")
    return batch


def forward(model: Model, batch: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Logits for ``batch``; records a tape when the model is in train mode."""
    batch = _check_batch(model, batch)
    return _run(model, model.blocks(), batch, rng)


def forward_features(model: Model, batch: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Output of the last body block (the head is skipped)."""
    batch = _check_batch(model, batch)
    return _run(model, model.layers, batch, rng)


def activations(model: Model, batch: np.ndarray) -> list[np.ndarray]:
    """Eval-mode outputs of each body block, in order; index 0 is the raw batch."""
    batch = _check_batch(model, batch)
    outs = [batch]
    x = batch
    for block in model.layers:
        x, _ = block.forward(x, train=False)
        outs.append(x)
    return outs


def backward(model: Model, grad: np.ndarray) -> np.ndarray:
    """Propagate ``grad`` (w.r.t. the last recorded output) through the tape.

    Parameter gradients accumulate on the blocks; returns the input gradient.
    """
    if not model.tape:
        raise NoTape("backward requires a preceding train-mode forward")
    for block, cache in reversed(model.tape):
        grad = block.backward(cache, grad)
    model.tape = None
    return grad


@dataclass
class SGDConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32


class SGD:
    """Momentum SGD; velocity is kept per (block, parameter name)."""

    def __init__(self, config: SGDConfig | None = None, lr: float | None = None, momentum: float | None = None):
        config = config or SGDConfig()
        self.lr = config.lr if lr is None else lr
        self.momentum = config.momentum if momentum is None else momentum
        self._velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self, model: Model) -> None:
        for block in model.blocks():
            for name, p in block.params.items():
                g = block.grads.get(name)
                if g is None:
                    continue
                if self.momentum:
                    key = (id(block), name)
                    v = self._velocity.get(key)
                    v = g.copy() if v is None else v * p.dtype.type(self.momentum) + g
                    self._velocity[key] = v
                    g = v
                p -= p.dtype.type(self.lr) * g
            block.zero_grad()


def backward_and_step(model: Model, loss: Loss, optimizer: SGD) -> Model:
    if model.tape is None:
        raise NoTape("backward_and_step called without a train-mode forward")
    backward(model, loss.grad)
    optimizer.step(model)
    return model


def predict_logits(model: Model, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    prev = model.mode
    model.eval()
    out = np.concatenate([forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
    model.mode = prev
    return out


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return 0.0
    return float((predict_logits(model, x).argmax(axis=1) == y).mean())


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def augment(batch: np.ndarray, rng: np.random.Generator, noise_std: float = 0.05, pad: int = 2) -> np.ndarray:
    """One random view: Gaussian jitter for vectors; crop-with-pad plus
    horizontal flip for (c, h, w) images."""
    if batch.ndim == 2:
        return (batch + rng.normal(0.0, noise_std, size=batch.shape)).astype(batch.dtype)
    n, _, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def as_input(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)
