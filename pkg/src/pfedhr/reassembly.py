"""Server-side layer decomposition, CKA layer distance, K-medoid grouping and
rule-based reassembly candidate search."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInput, EmptyUpload, ShapeMismatch, TooFewLayers
from .nncore import Block, Model, OpType
from .nncore.layers import LAYER_UNITS

log = logging.getLogger(__name__)

PROBE_BATCH = 256
MAX_SWAP_ITERATIONS = 50
DEFAULT_MAX_CANDIDATES = 32
# Distance assigned when both CKA terms vanish (dead layers): 1 / 1e-3.
MAX_DISTANCE = 1e3
# Allowed op-type transitions inside a candidate (FC never feeds CONV).
SUCCESSORS = {OpType.CONV: {OpType.CONV, OpType.FC}, OpType.FC: {OpType.FC}}


@dataclass(frozen=True, order=True)
class LayerRef:
    client_id: int
    layer_index: int
    op_type: OpType = field(compare=False)

    def __str__(self) -> str:
        return f"c{self.client_id}/L{self.layer_index}/{self.op_type.value}"


def _as_uploads(models) -> list[tuple[int, Model]]:
    if isinstance(models, dict):
        return sorted(models.items())
    out = []
    for i, item in enumerate(models):
        out.append(item if isinstance(item, tuple) else (i, item))
    return out


def decompose(models) -> list[tuple[LayerRef, Block]]:
    """One (LayerRef, unit) per body layer, per model, in model order.

    ``models`` is a list of models (client id = position), a list of
    ``(client_id, model)`` pairs, or a ``{client_id: model}`` dict.
    """
    uploads = _as_uploads(models)
    if not uploads:
        raise EmptyUpload("no models uploaded")
    out = []
    for cid, model in uploads:
        if not model.layers:
            raise EmptyUpload(f"model of client {cid} has no body layers")
        for h, unit in enumerate(model.layers):
            if not isinstance(unit, LAYER_UNITS):
                raise ShapeMismatch(f"client {cid} layer {h} is not a CONV/FC unit")
            out.append((LayerRef(cid, h, unit.op_type), unit))
    return out


def probe_batch(public_features: np.ndarray, seed: int, size: int = PROBE_BATCH) -> np.ndarray:
    """Fixed subset of public samples used for activation probing."""
    if len(public_features) <= size:
        return public_features
    idx = np.sort(np.random.default_rng(seed).choice(len(public_features), size, replace=False))
    return public_features[idx]


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1)


def layer_activations(unit: Block, public_batch: np.ndarray, upstream: Sequence[Block] = ()):
    """(input, output) activations of ``unit`` flattened to (n, features).

    ``upstream`` is the prefix of the source model preceding ``unit``; all
    blocks run in eval mode.
    """
    x = np.asarray(public_batch, dtype=np.float32)
    for block in upstream:
        x, _ = block.forward(x, train=False)
    y, _ = unit.forward(x, train=False)
    return _flat(x), _flat(y)


def model_activations(model: Model, public_batch: np.ndarray) -> list[np.ndarray]:
    """Flattened eval activations: entry h is the input of layer h, entry h+1 its output."""
    x = np.asarray(public_batch, dtype=np.float32)
    outs = [_flat(x)]
    for block in model.layers:
        x, _ = block.forward(x, train=False)
        outs.append(_flat(x))
    return outs


# -- CKA ------------------------------------------------------------------------


def _normalized_centered_gram(x: np.ndarray) -> np.ndarray | None:
    """H (X X^T) H scaled to unit Frobenius norm; ``None`` when it vanishes."""
    x = np.asarray(x, dtype=np.float64)
    raw_energy = float((x * x).sum())
    x = x - x.mean(axis=0, keepdims=True)  # X_c X_c^T == H X X^T H
    gram = x @ x.T
    norm = np.linalg.norm(gram)
    if norm == 0.0 or norm <= 1e-10 * raw_energy:
        return None
    return gram / norm


def cka(x: np.ndarray, y: np.ndarray, strict: bool = False) -> float:
    """Linear CKA between two activation matrices with the same sample count.

    A constant (all-zero after centring) input yields 0.0, or raises
    :class:`DegenerateInput` when ``strict``.
    """
    x, y = _flat(np.asarray(x)), _flat(np.asarray(y))
    if x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ShapeMismatch(f"CKA needs equal sample counts >= 2, got {x.shape[0]} and {y.shape[0]}")
    kx, ky = _normalized_centered_gram(x), _normalized_centered_gram(y)
    if kx is None or ky is None:
        if strict:
            raise DegenerateInput("centred Gram matrix is zero")
        return 0.0
    return float(np.clip((kx * ky).sum(), 0.0, 1.0))


def distance_from_cka(cka_in: float, cka_out: float) -> float:
    total = cka_in + cka_out
    return MAX_DISTANCE if total <= 1.0 / MAX_DISTANCE else 1.0 / total


def layer_distance(a, b) -> float:
    """(CKA(inputs) + CKA(outputs))^-1 between two layers.

    ``a`` and ``b`` are ``(input_acts, output_acts)`` pairs, e.g. from
    :func:`layer_activations`.
    """
    (xa, ya), (xb, yb) = a, b
    return distance_from_cka(cka(xa, xb), cka(ya, yb))


def distance_matrix(uploads, public_batch: np.ndarray) -> tuple[list[LayerRef], np.ndarray]:
    """Pairwise layer distances over every body layer of every upload.

    The diagonal is set to 0 so a medoid contributes nothing to the grouping
    objective (the formula itself gives 0.5 for a layer against itself).
    """
    uploads = _as_uploads(uploads)
    refs: list[LayerRef] = [ref for ref, _ in decompose(uploads)]
    grams_in, grams_out = [], []
    for _, model in uploads:
        acts = model_activations(model, public_batch)
        grams = [_normalized_centered_gram(a) for a in acts]
        grams_in.extend(grams[:-1])
        grams_out.extend(grams[1:])

    def sim(g1, g2):
        return 0.0 if g1 is None or g2 is None else float(np.clip((g1 * g2).sum(), 0.0, 1.0))

    n = len(refs)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = distance_from_cka(sim(grams_in[i], grams_in[j]), sim(grams_out[i], grams_out[j]))
            dist[i, j] = dist[j, i] = d
    return refs, dist


# -- grouping ---------------------------------------------------------------------


@dataclass
class LayerClustering:
    refs: list[LayerRef]
    groups: list[list[LayerRef]]
    medoids: list[LayerRef]
    distance_matrix: np.ndarray
    objective: float
    labels: np.ndarray
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.groups)

    def group_of(self, ref: LayerRef) -> int:
        return int(self.labels[self.refs.index(ref)])


def _assign(dist: np.ndarray, medoids: np.ndarray) -> np.ndarray:
    labels = np.argmin(dist[:, medoids], axis=1)
    labels[medoids] = np.arange(len(medoids))
    return labels


def _cost(dist: np.ndarray, medoids: np.ndarray) -> float:
    return float(dist[np.arange(len(dist)), medoids[_assign(dist, medoids)]].sum())


def pam(dist: np.ndarray, k: int, seed: int, max_iter: int = MAX_SWAP_ITERATIONS):
    """K-medoids by steepest-descent swaps from a seeded random start.

    Returns (sorted medoid indices, labels, objective history).
    """
    n = len(dist)
    rng = np.random.default_rng(seed)
    medoids = np.sort(rng.choice(n, size=k, replace=False))
    cost = _cost(dist, medoids)
    history = [cost]
    for _ in range(max_iter):
        best = (cost, None, None)
        is_medoid = np.zeros(n, bool)
        is_medoid[medoids] = True
        for slot in range(k):
            for o in np.flatnonzero(~is_medoid):
                trial = medoids.copy()
                trial[slot] = o
                c = _cost(dist, trial)
                if c < best[0] - 1e-12:
                    best = (c, slot, o)
        if best[1] is None:
            break
        medoids[best[1]] = best[2]
        medoids = np.sort(medoids)
        cost = best[0]
        history.append(cost)
    return medoids, _assign(dist, medoids), history


def group_layers(refs: Sequence[LayerRef], dist: np.ndarray, k: int, seed: int = 0) -> LayerClustering:
    refs = list(refs)
    dist = np.asarray(dist, dtype=np.float64)
    if k < 1:
        raise TooFewLayers("K must be >= 1")
    if k > len(refs):
        raise TooFewLayers(f"K={k} exceeds the {len(refs)} uploaded layers")
    if dist.shape != (len(refs), len(refs)):
        raise ShapeMismatch(f"distance matrix {dist.shape} does not match {len(refs)} layers")
    medoids, labels, history = pam(dist, k, seed)
    # Number groups shallow-to-deep (mean member layer index) so the ordered
    # group scan of the candidate search walks down the network.
    depth = [np.mean([refs[i].layer_index for i in np.flatnonzero(labels == g)]) for g in range(k)]
    order = sorted(range(k), key=lambda g: (depth[g], refs[medoids[g]]))
    rank = np.empty(k, dtype=int)
    rank[order] = np.arange(k)
    labels = rank[labels]
    medoids = medoids[order]
    groups = [sorted(refs[i] for i in np.flatnonzero(labels == g)) for g in range(k)]
    return LayerClustering(
        refs=refs,
        groups=groups,
        medoids=[refs[m] for m in medoids],
        distance_matrix=dist,
        objective=history[-1],
        labels=labels,
        history=history,
    )


# -- candidate search --------------------------------------------------------------


@dataclass(frozen=True)
class CandidateBlueprint:
    sequence: tuple[LayerRef, ...]
    group_ids: tuple[int, ...]

    @property
    def op_set(self) -> frozenset:
        return frozenset(r.op_type for r in self.sequence)

    @property
    def group_set(self) -> frozenset:
        return frozenset(self.group_ids)

    @property
    def key(self) -> tuple[tuple[int, int], ...]:
        return tuple((r.client_id, r.layer_index) for r in self.sequence)

    def __len__(self) -> int:
        return len(self.sequence)


def _extends(last: LayerRef, ref: LayerRef) -> bool:
    return ref.layer_index > last.layer_index and ref.op_type in SUCCESSORS[last.op_type]


def search_candidates(clustering: LayerClustering, op_set: Iterable[OpType] | None = None,
                      max_candidates: int = DEFAULT_MAX_CANDIDATES) -> list[CandidateBlueprint]:
    """Seed a candidate with every layer of every group, then sweep the groups
    in order appending the first layer of each group that keeps the layer
    index increasing and the op-type order legal. Candidates covering every
    op type and every group are kept, deduplicated, earliest first."""
    if op_set is None:
        op_set = {r.op_type for r in clustering.refs}
    op_set = frozenset(op_set)
    k = clustering.k
    found: dict[tuple, CandidateBlueprint] = {}
    for g, group in enumerate(clustering.groups):
        for seed_ref in group:
            seq, gids = [seed_ref], [g]
            for g2, other in enumerate(clustering.groups):
                for ref in other:
                    if _extends(seq[-1], ref):
                        seq.append(ref)
                        gids.append(g2)
                        break
            bp = CandidateBlueprint(tuple(seq), tuple(gids))
            if bp.op_set == op_set and len(bp.group_set) == k and bp.key not in found:
                found[bp.key] = bp
                if len(found) >= max_candidates:
                    return list(found.values())
    return list(found.values())


def dump_blueprint(bp: CandidateBlueprint) -> str:
    """One line per layer: client_id layer_index op_type group_id."""
    return "\n".join(
        f"{r.client_id} {r.layer_index} {r.op_type.value} {g}" for r, g in zip(bp.sequence, bp.group_ids)
    )
