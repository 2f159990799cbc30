import numpy as np
import pytest

from loyalbench.compress import head_importance, head_prune
from loyalbench.errors import InvalidConfig, InvalidInput
from loyalbench.model import ClassifierModel


def _pruned_set(model):
    return {
        (li, hi)
        for li, layer in enumerate(model.layers)
        for hi in range(model.num_heads)
        if layer.gates[hi] == 0.0
    }


def test_importance_shape_and_sign(tiny):
    ds, teacher = tiny
    imp = head_importance(teacher, ds)
    assert imp.shape == (4, 4)
    assert np.all(imp >= 0.0)
    assert imp.max() > 0.0


def test_importance_deterministic(tiny):
    ds, teacher = tiny
    a = head_importance(teacher, ds)
    b = head_importance(teacher, ds)
    assert np.array_equal(a, b)


def test_prune_count_uses_floor(tiny):
    ds, teacher = tiny
    pruned = head_prune(teacher, ds, fraction=0.45)
    # 4 layers x 4 heads = 16 heads; floor(16 * 0.45) = 7
    assert len(_pruned_set(pruned)) == 7
    assert not _pruned_set(teacher)


def test_prune_picks_lowest_importance(tiny):
    ds, teacher = tiny
    imp = head_importance(teacher, ds)
    ranked = sorted(
        (imp[li, hi], li, hi) for li in range(4) for hi in range(4)
    )
    expected = {(li, hi) for _, li, hi in ranked[:7]}
    pruned = head_prune(teacher, ds, fraction=0.45)
    assert _pruned_set(pruned) == expected


def test_fraction_zero_is_noop(tiny):
    ds, teacher = tiny
    pruned = head_prune(teacher, ds, fraction=0.0)
    assert not _pruned_set(pruned)
    assert np.array_equal(pruned.layers[0].wq.data, teacher.layers[0].wq.data)


def test_fraction_bounds_rejected(tiny):
    ds, teacher = tiny
    for bad in (1.0, 1.5, -0.1):
        with pytest.raises(InvalidConfig):
            head_prune(teacher, ds, fraction=bad)


def test_pruned_heads_have_exactly_zero_importance(tiny):
    ds, teacher = tiny
    pruned = head_prune(teacher, ds, fraction=0.45)
    imp = head_importance(pruned, ds)
    dead = _pruned_set(pruned)
    for li, hi in dead:
        assert imp[li, hi] == 0.0
    alive = [(li, hi) for li in range(4) for hi in range(4) if (li, hi) not in dead]
    assert all(imp[li, hi] > 0.0 for li, hi in alive)


def test_second_round_skips_dead_heads(tiny):
    ds, teacher = tiny
    once = head_prune(teacher, ds, fraction=0.25)
    twice = head_prune(once, ds, fraction=0.25)
    first = _pruned_set(once)
    second = _pruned_set(twice)
    assert first < second
    assert len(second) == 8


def test_cannot_prune_every_active_head(tiny):
    ds, teacher = tiny
    nearly_dead = teacher.clone()
    for layer in nearly_dead.layers:
        layer.gates[:] = 0.0
    nearly_dead.layers[0].gates[0] = 1.0
    # floor(0.1 * 16) = 1 equals the single remaining active head
    with pytest.raises(InvalidConfig):
        head_prune(nearly_dead, ds, fraction=0.1)


def test_empty_split_rejected(tiny):
    ds, teacher = tiny
    import dataclasses

    empty = dataclasses.replace(ds, examples=[e for e in ds.examples if e.split != "dev"])
    with pytest.raises(InvalidInput):
        head_importance(teacher, empty)


def test_tie_break_prefers_lower_layer_then_head(tiny):
    ds, teacher = tiny
    model = ClassifierModel(
        vocab_size=teacher.tokenizer.vocab_size, num_classes=4, hidden=8,
        num_heads=2, num_layers=1, ffn=16, max_len=32, seed=1,
        tokenizer=teacher.tokenizer,
    )
    layer = model.layers[0]
    d = model.hidden // model.num_heads
    # make head 1 an exact clone of head 0: same q/k/v output columns
    # and the same output-projection rows, so both heads compute the
    # same values and collect bitwise-identical gate gradients
    for slot in ("wq", "wk", "wv"):
        w = getattr(layer, slot).data
        w[:, d:] = w[:, :d]
    layer.wo.data[d:, :] = layer.wo.data[:d, :]

    imp = head_importance(model, ds)
    assert imp[0, 0] == imp[0, 1]
    pruned = head_prune(model, ds, fraction=0.5)
    assert _pruned_set(pruned) == {(0, 0)}


def test_prune_leaves_original_untouched(tiny, frozen_teacher_guard):
    ds, teacher = tiny
    head_prune(teacher, ds, fraction=0.45)
