import numpy as np
import pytest

from loyalbench.compress import ReplacementSchedule, quantize_ptq, theseus_train
from loyalbench.errors import InvalidConfig
from loyalbench.model import truncate


class TestSchedule:
    def test_starts_at_base_probability(self):
        assert ReplacementSchedule(b=0.5, k=2e-5).p(0) == 0.5

    def test_linear_rise_midpoint(self):
        assert ReplacementSchedule(b=0.5, k=2e-5).p(12500) == pytest.approx(0.75)

    def test_reaches_certainty_at_expected_step(self):
        sched = ReplacementSchedule(b=0.5, k=2e-5)
        assert sched.p(25000) == 1.0
        assert sched.p(25001) == 1.0

    def test_probability_clipped_to_one(self):
        assert ReplacementSchedule(b=0.9, k=0.1).p(5) == 1.0

    def test_constant_when_k_zero(self):
        sched = ReplacementSchedule(b=0.3, k=0.0)
        assert sched.p(0) == sched.p(10**6) == 0.3

    def test_invalid_parameters_rejected(self):
        with pytest.raises(InvalidConfig):
            ReplacementSchedule(b=-0.1)
        with pytest.raises(InvalidConfig):
            ReplacementSchedule(b=1.1)
        with pytest.raises(InvalidConfig):
            ReplacementSchedule(b=0.5, k=-1e-6)

    def test_advance_moves_current_step(self):
        sched = ReplacementSchedule(b=0.0, k=0.25)
        probs = []
        for _ in range(5):
            probs.append(sched.p())
            sched.advance()
        assert probs == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_monotone_in_step(self):
        sched = ReplacementSchedule(b=0.2, k=1e-3)
        ps = [sched.p(t) for t in range(0, 2000, 50)]
        assert all(a <= b for a, b in zip(ps, ps[1:]))
        assert all(0.0 <= p <= 1.0 for p in ps)

    def test_draw_matches_probability_monte_carlo(self):
        sched = ReplacementSchedule(b=0.3, k=0.0)
        rng = np.random.default_rng(123)
        draws = np.array([sched.draw(rng, 2) for _ in range(10_000)])
        assert draws.shape == (10_000, 2)
        assert draws.mean() == pytest.approx(0.3, abs=0.02)
        # layers decide independently: joint rate factorizes
        both = np.mean(draws[:, 0] & draws[:, 1])
        assert both == pytest.approx(0.09, abs=0.02)

    def test_draw_deterministic_under_seeded_rng(self):
        sched = ReplacementSchedule(b=0.5, k=0.0)
        a = [sched.draw(np.random.default_rng(7), 4).tolist() for _ in range(3)]
        b = [sched.draw(np.random.default_rng(7), 4).tolist() for _ in range(3)]
        assert a == b

    def test_degenerate_extremes(self):
        rng = np.random.default_rng(0)
        assert ReplacementSchedule(b=1.0, k=0.0).draw(rng, 8).all()
        assert not ReplacementSchedule(b=0.0, k=0.0).draw(rng, 8).any()


def test_successor_has_half_depth(tiny):
    ds, teacher = tiny
    successor, history = theseus_train(teacher, ds, epochs=1, post_epochs=1, seed=0)
    assert successor.num_layers == 2
    assert len(history) == 2
    assert all(np.isfinite(h) for h in history)


def test_successor_initialized_from_lower_block_layers(tiny):
    ds, teacher = tiny
    successor, _ = theseus_train(teacher, ds, epochs=0, post_epochs=0, seed=0)
    for i in (0, 1):
        assert np.array_equal(
            successor.layers[i].wq.data, teacher.layers[2 * i].wq.data
        )
        assert np.array_equal(
            successor.layers[i].w2.data, teacher.layers[2 * i].w2.data
        )


def test_never_replacing_never_trains(tiny):
    ds, teacher = tiny
    sched = ReplacementSchedule(b=0.0, k=0.0)
    successor, _ = theseus_train(
        teacher, ds, schedule=sched, epochs=1, post_epochs=0, seed=0
    )
    # with replacement probability 0 the forward never touches the
    # successor layers, their gradients are exactly zero, and the
    # optimizer leaves them bit-identical to their initialization
    for i in (0, 1):
        assert np.array_equal(
            successor.layers[i].wq.data, teacher.layers[2 * i].wq.data
        )


def test_always_replacing_trains_layers_but_freezes_embeddings(tiny):
    ds, teacher = tiny
    sched = ReplacementSchedule(b=1.0, k=0.0)
    successor, _ = theseus_train(
        teacher, ds, schedule=sched, epochs=1, post_epochs=0, seed=0
    )
    assert not np.array_equal(successor.layers[0].wq.data, teacher.layers[0].wq.data)
    assert np.array_equal(successor.tok_emb.data, teacher.tok_emb.data)
    assert np.array_equal(successor.head_w.data, teacher.head_w.data)


def test_post_phase_trains_whole_successor(tiny):
    ds, teacher = tiny
    sched = ReplacementSchedule(b=0.0, k=0.0)
    successor, _ = theseus_train(
        teacher, ds, schedule=sched, epochs=0, post_epochs=1, seed=0
    )
    assert not np.array_equal(successor.tok_emb.data, teacher.tok_emb.data)


def test_odd_layer_count_rejected(tiny):
    ds, teacher = tiny
    with pytest.raises(InvalidConfig):
        theseus_train(truncate(teacher, 3), ds, epochs=1)


def test_quantized_teacher_rejected(tiny):
    ds, teacher = tiny
    q = quantize_ptq(teacher, ds.texts("dev")[:8])
    with pytest.raises(InvalidConfig):
        theseus_train(q, ds, epochs=1)


def test_bad_loss_choice_rejected(tiny):
    ds, teacher = tiny
    with pytest.raises(InvalidConfig):
        theseus_train(teacher, ds, loss_choice="hinge", epochs=1)


def test_deterministic_across_runs(tiny):
    ds, teacher = tiny
    a, ha = theseus_train(teacher, ds, epochs=1, post_epochs=1, seed=9)
    b, hb = theseus_train(teacher, ds, epochs=1, post_epochs=1, seed=9)
    assert ha == hb
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.params(), b.params()))


def test_kd_loss_variant_runs(tiny):
    ds, teacher = tiny
    successor, history = theseus_train(
        teacher, ds, loss_choice="kd", epochs=1, post_epochs=0, seed=0
    )
    assert successor.num_layers == 2
    assert np.isfinite(history[0])


def test_teacher_untouched_by_module_replacing(tiny, frozen_teacher_guard):
    ds, teacher = tiny
    theseus_train(teacher, ds, epochs=1, post_epochs=1, seed=0)
