"""Heterogeneous client architectures M1..M4.

The channel/width table is our own stand-in (the original widths are not
published); what matters is the depth ordering M1 < M2 < M3 < M4 and that
every template starts with CONV blocks in image mode and ends with an FC
block before the classifier head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyTemplateList, UnknownTemplate
from .nncore import ConvUnit, FCUnit, Linear, Model, OpType


@dataclass(frozen=True)
class ArchTemplate:
    id: str
    block_sequence: tuple[tuple[OpType, int], ...]
    num_classes: int = 10

    @property
    def depth(self) -> int:
        return len(self.block_sequence)


C, F = OpType.CONV, OpType.FC

IMAGE_TABLE = {
    "M1": ((C, 8), (F, 64)),
    "M2": ((C, 8), (C, 16), (F, 64)),
    "M3": ((C, 8), (C, 16), (F, 128), (F, 64)),
    "M4": ((C, 8), (C, 16), (C, 32), (F, 128), (F, 64)),
}

VECTOR_TABLE = {
    "M1": ((F, 64), (F, 32)),
    "M2": ((F, 64), (F, 64), (F, 32)),
    "M3": ((F, 128), (F, 64), (F, 64), (F, 32)),
    "M4": ((F, 128), (F, 128), (F, 64), (F, 64), (F, 32)),
}

TEMPLATE_IDS = ("M1", "M2", "M3", "M4")


def get_template(name: str, num_classes: int, vector: bool = False) -> ArchTemplate:
    table = VECTOR_TABLE if vector else IMAGE_TABLE
    if name not in table:
        raise UnknownTemplate(name)
    return ArchTemplate(name, table[name], num_classes)


def templates_for(input_spec, num_classes: int, names=TEMPLATE_IDS) -> list[ArchTemplate]:
    vector = len(tuple(input_spec)) == 1
    return [get_template(n, num_classes, vector) for n in names]


def instantiate(template: ArchTemplate, seed: int, input_spec) -> Model:
    """Fresh randomly initialised model; pure in (template, seed, input_spec)."""
    if isinstance(template, str):
        raise UnknownTemplate(f"pass an ArchTemplate, got name {template!r}")
    input_spec = tuple(int(d) for d in input_spec)
    rng = np.random.default_rng(seed)
    layers = []
    spec = input_spec
    for op, width in template.block_sequence:
        if op is OpType.CONV:
            if len(spec) != 3:
                raise UnknownTemplate(f"{template.id}: CONV block needs image input, got {spec}")
            unit = ConvUnit(spec, width, rng)
        else:
            unit = FCUnit(int(np.prod(spec)), width, rng)
        layers.append(unit)
        spec = unit.out_spec
    head = Linear(int(np.prod(spec)), template.num_classes, rng)
    return Model(layers, head, input_spec, template=template.id)


def assign_templates(num_clients: int, templates, seed: int) -> dict[int, ArchTemplate]:
    """Balanced random assignment: each template used num_clients // len(templates)
    times (remainders go to a random subset of templates)."""
    templates = list(templates)
    if not templates:
        raise EmptyTemplateList("no templates to assign")
    if num_clients < len(templates):
        raise ValueError(f"need at least {len(templates)} clients, got {num_clients}")
    rng = np.random.default_rng(seed)
    pool = [templates[i % len(templates)] for i in range(num_clients - num_clients % len(templates))]
    pool += [templates[i] for i in rng.permutation(len(templates))[: num_clients % len(templates)]]
    order = rng.permutation(num_clients)
    return {cid: pool[int(j)] for cid, j in enumerate(order)}
