"""Turn a candidate blueprint into a runnable network and finetune it on public data."""

from __future__ import annotations

import copy

import numpy as np

from .data import LabeledDataset
from .errors import LabelFlagMismatch, ShapeMismatch, UnresolvableRef
from .nncore import (
    SGD,
    ChannelProjectAdapter,
    DenseAdapter,
    FCUnit,
    Linear,
    Model,
    OpType,
    SGDConfig,
    augment,
    backward,
    compute_loss,
    forward,
    forward_features,
    iterate_minibatches,
)
from .nncore.layers import ADAPTERS, flat_size
from .reassembly import CandidateBlueprint, decompose

DEFAULT_FINETUNE_EPOCHS = 3
PROJECTION_WIDTH = 64


def layer_store(uploads) -> dict[tuple[int, int], object]:
    """(client_id, layer_index) -> unit for every uploaded body layer."""
    return {(ref.client_id, ref.layer_index): unit for ref, unit in decompose(uploads)}


def make_adapter(prev_spec, unit, depth: int, rng):
    """Adapter mapping ``prev_spec`` onto ``unit.in_spec``, or None when they agree."""
    prev_spec = tuple(prev_spec)
    if unit.op_type is OpType.FC:
        if flat_size(prev_spec) == unit.in_spec[0]:
            return None
        return DenseAdapter(prev_spec, unit.in_spec[0], depth, rng)
    if len(prev_spec) != 3:
        raise ShapeMismatch(f"cannot feed flat features {prev_spec} into a CONV unit")
    if prev_spec == unit.in_spec:
        return None
    return ChannelProjectAdapter(prev_spec, unit.in_spec, depth, rng)


def stitch(blueprint: CandidateBlueprint, store, num_classes: int, input_spec,
           depth: int = 1, seed: int = 0) -> Model:
    """Copy the blueprint's layers out of ``store`` and insert adapters wherever
    consecutive shapes disagree (the raw input counts as the first shape).

    The result is a :class:`Model` carrying ``blueprint``; donor units are
    deep-copied so later training never touches the store.
    """
    rng = np.random.default_rng(seed)
    spec = tuple(input_spec)
    layers = []
    for ref in blueprint.sequence:
        key = (ref.client_id, ref.layer_index)
        if key not in store:
            raise UnresolvableRef(f"layer {ref} not in this round's uploads")
        unit = copy.deepcopy(store[key])
        unit.zero_grad()
        adapter = make_adapter(spec, unit, depth, rng)
        if adapter is not None:
            layers.append(adapter)
        layers.append(unit)
        spec = unit.out_spec
    head = Linear(flat_size(spec), num_classes, rng)
    model = Model(layers, head, input_spec, template="stitched")
    model.blueprint = blueprint
    return model


def adapter_count(model: Model) -> int:
    return sum(isinstance(b, ADAPTERS) for b in model.layers)


def finetune(model: Model, public: LabeledDataset, epochs: int = DEFAULT_FINETUNE_EPOCHS,
             labeled: bool = True, seed: int = 0, sgd: SGDConfig | None = None,
             history: list | None = None) -> Model:
    """Briefly train a copy of ``model`` on public data.

    Labeled data use cross-entropy; unlabeled data use NT-Xent on two
    augmented views through the body plus a throwaway projection head (the
    classifier head is left untouched). ``epochs == 0`` returns ``model``
    itself. Mean per-epoch losses are appended to ``history`` if given.
    """
    if labeled and not public.labeled:
        raise LabelFlagMismatch("labeled finetuning requested on unlabeled public data")
    if epochs <= 0:
        return model
    sgd = sgd or SGDConfig()
    rng = np.random.default_rng(seed)
    model = model.clone().train()
    opt = SGD(sgd)
    x_all = public.features
    if labeled:
        for _ in range(epochs):
            losses = []
            for idx in iterate_minibatches(len(public), sgd.batch_size, rng):
                logits = forward(model, x_all[idx], rng)
                loss = compute_loss("CROSS_ENTROPY", logits, public.labels[idx])
                backward(model, loss.grad)
                opt.step(model)
                losses.append(loss.value)
            if history is not None:
                history.append(float(np.mean(losses)))
    else:
        proj = Model([FCUnit(flat_size(model.feature_spec), PROJECTION_WIDTH, rng, dropout=0.0)],
                     Linear(PROJECTION_WIDTH, PROJECTION_WIDTH, rng), (flat_size(model.feature_spec),))
        proj.train()
        proj_opt = SGD(sgd)
        for _ in range(epochs):
            losses = []
            for idx in iterate_minibatches(len(public), sgd.batch_size, rng):
                if len(idx) < 2:
                    continue
                x = x_all[idx]
                views = np.concatenate([augment(x, rng), augment(x, rng)])
                feats = forward_features(model, views, rng)
                z = forward(proj, feats.reshape(len(feats), -1), rng)
                n = len(idx)
                loss = compute_loss("NT_XENT_CONTRASTIVE", z[:n], z[n:])
                g_feat = backward(proj, np.concatenate(loss.grad))
                backward(model, g_feat.reshape(feats.shape))
                proj_opt.step(proj)
                opt.step(model)
                losses.append(loss.value)
            if history is not None and losses:
                history.append(float(np.mean(losses)))
    return model.eval()
