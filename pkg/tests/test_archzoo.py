from collections import Counter

import numpy as np
import pytest

from pfedhr import archzoo
from pfedhr.errors import EmptyTemplateList, UnknownTemplate
from pfedhr.nncore import OpType, forward


def test_m1_and_m4_image_layouts():
    m1 = archzoo.instantiate(archzoo.get_template("M1", 10), 0, (1, 28, 28))
    assert [(u.op_type, u.out_spec[0]) for u in m1.layers] == [(OpType.CONV, 8), (OpType.FC, 64)]
    m4 = archzoo.instantiate(archzoo.get_template("M4", 10), 0, (1, 28, 28))
    assert [(u.op_type, u.out_spec[0]) for u in m4.layers] == [
        (OpType.CONV, 8), (OpType.CONV, 16), (OpType.CONV, 32), (OpType.FC, 128), (OpType.FC, 64)
    ]


def test_depth_ordering_both_modes():
    for vector in (False, True):
        depths = [archzoo.get_template(t, 4, vector).depth for t in archzoo.TEMPLATE_IDS]
        assert depths == sorted(depths) and len(set(depths)) == 4


@pytest.mark.parametrize("vector", [False, True])
def test_every_template_produces_logits(vector):
    spec = (12,) if vector else (1, 12, 12)
    x = np.random.default_rng(0).random((3,) + spec).astype(np.float32)
    for t in archzoo.templates_for(spec, 5):
        model = archzoo.instantiate(t, 1, spec)
        assert forward(model, x).shape == (3, 5)
        first = model.layers[0].op_type
        assert first is (OpType.FC if vector else OpType.CONV)
        assert model.layers[-1].op_type is OpType.FC


def test_instantiate_is_deterministic():
    t = archzoo.get_template("M3", 4)
    a = archzoo.instantiate(t, 7, (1, 8, 8)).state()
    b = archzoo.instantiate(t, 7, (1, 8, 8)).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = archzoo.instantiate(t, 8, (1, 8, 8)).state()
    assert not np.array_equal(a["0.weight"], c["0.weight"])


def test_unknown_template():
    with pytest.raises(UnknownTemplate):
        archzoo.get_template("M9", 4)


@pytest.mark.parametrize("clients,each", [(12, 3), (4, 1), (100, 25)])
def test_assign_templates_balanced(clients, each):
    temps = archzoo.templates_for((8,), 4)
    assignment = archzoo.assign_templates(clients, temps, seed=0)
    assert sorted(assignment) == list(range(clients))
    assert set(Counter(t.id for t in assignment.values()).values()) == {each}


def test_assign_templates_empty():
    with pytest.raises(EmptyTemplateList):
        archzoo.assign_templates(4, [], 0)
