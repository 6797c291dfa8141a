import math

import numpy as np
import pytest
import torch

from av_colearn.colearn import (
    OBJECTIVES,
    Y_NEG,
    Y_POS,
    LossBreakdown,
    MiningSelection,
    collate,
    compute_losses,
    cross_entropy,
    cyclic_mine,
    loss_ccol,
    loss_col,
    loss_grd_m,
    loss_grd_m_star_hat,
    loss_grd_s,
    loss_grd_s_star,
    loss_sep_aware,
    loss_sep_plain,
    mine_positive_solo,
    select_from_distances,
)
from av_colearn.exceptions import ConfigurationError, ContractViolation, InputError
from av_colearn.nets import GroundingScore, ModelState
from av_colearn.synthworld import build_split, materialize

F_S = torch.zeros(1, dtype=torch.float64)


def scored(*g0):
    """Object 'embeddings' the fixed grounder reads back as g[0]."""
    return torch.tensor([[v] for v in g0], dtype=torch.float64)


def test_cross_entropy_values():
    assert float(cross_entropy((0.8, 0.2), Y_POS)) == pytest.approx(0.22314, abs=1e-5)
    assert float(cross_entropy((0.1, 0.9), Y_NEG)) == pytest.approx(0.10536, abs=1e-5)
    assert float(cross_entropy(GroundingScore((1.0, 0.0)), Y_POS)) == pytest.approx(0.0, abs=1e-6)
    # clamped, not infinite
    assert float(cross_entropy((0.0, 1.0), Y_POS)) == pytest.approx(-math.log(1e-7))


def test_positive_mining(fixed_grounder):
    assert mine_positive_solo(F_S, scored(0.2, 0.7, 0.4), fixed_grounder) == 1
    assert mine_positive_solo(F_S, scored(0.3), fixed_grounder) == 0
    assert mine_positive_solo(F_S, scored(0.5, 0.5), fixed_grounder) == 0
    with pytest.raises(InputError):
        mine_positive_solo(F_S, [], fixed_grounder)


def test_positive_mining_is_the_argmax_of_g0(fixed_grounder):
    rng = np.random.default_rng(0)
    for trial in range(1000):
        g0 = rng.uniform(0.0, 1.0, size=rng.integers(1, 7))
        if trial % 2:
            g0 = np.round(g0, 1)  # exact ties resolve to the first index
        assert mine_positive_solo(F_S, scored(*g0), fixed_grounder) == int(np.argmax(g0))


def test_mixed_grounding_sums_the_best_positive_per_video(fixed_grounder):
    rng = np.random.default_rng(1)
    for _ in range(1000):
        videos = [rng.uniform(0.0, 1.0, size=rng.integers(1, 5)) for _ in range(2)]
        expected = sum(-math.log(max(float(v.max()), 1e-7)) for v in videos)
        value = loss_grd_m(F_S, [scored(*v) for v in videos], fixed_grounder)
        assert float(value) == pytest.approx(expected, rel=1e-12)


def test_saturated_scores_still_pick_the_largest(fixed_grounder):
    # both sit below the clamp, so their cross-entropies tie
    assert mine_positive_solo(F_S, scored(1e-9, 1e-8), fixed_grounder) == 1
    value = loss_grd_s(F_S, scored(1e-9, 1e-8), scored(0.0), fixed_grounder)
    assert float(value) == pytest.approx(-math.log(1e-7))


def test_solo_grounding_loss(fixed_grounder):
    value = loss_grd_s(F_S, scored(0.3, 0.8), scored(0.1), fixed_grounder)
    assert float(value) == pytest.approx(0.32850, abs=1e-5)
    assert float(loss_grd_s(F_S, scored(1.0), scored(0.0), fixed_grounder)) == pytest.approx(0.0, abs=1e-6)
    assert float(loss_grd_s(F_S, scored(0.5), scored(0.5), fixed_grounder)) == pytest.approx(1.38629, abs=1e-5)


def test_mixture_grounding_loss(fixed_grounder):
    value = loss_grd_m(F_S, [scored(0.9, 0.2), scored(0.4, 0.8)], fixed_grounder)
    assert float(value) == pytest.approx(0.32850, abs=1e-5)
    assert float(loss_grd_m(F_S, [scored(1.0), scored(1.0, 0.0)], fixed_grounder)) == pytest.approx(0.0, abs=1e-6)
    uniform = loss_grd_m(F_S, [scored(0.5, 0.5), scored(0.5)], fixed_grounder)
    assert float(uniform) == pytest.approx(2 * math.log(2), abs=1e-6)
    with pytest.raises(InputError):
        loss_grd_m(F_S, [scored(0.5), []], fixed_grounder)


def _spec(*rows):
    return torch.tensor(rows, dtype=torch.float64)


def test_plain_separation_loss():
    s1 = _spec([1.0, 1.0], [1.0, 1.0])
    s2 = torch.zeros(2, 2, dtype=torch.float64)
    value = loss_sep_plain([s1, s2], [0.5 * s1.unsqueeze(0), s2.unsqueeze(0)])
    assert float(value) == pytest.approx(0.5)

    exact = loss_sep_plain([s1, s1], [torch.stack([0.25 * s1, 0.75 * s1]), s1.unsqueeze(0)])
    assert float(exact) == 0.0
    zeros = loss_sep_plain([s1, 2 * s1], [torch.zeros(2, 2, 2), torch.zeros(1, 2, 2)])
    assert float(zeros) == pytest.approx(3.0)
    with pytest.raises(InputError):
        loss_sep_plain([s1, s2], [torch.zeros(1, 3, 2), s2.unsqueeze(0)])


def test_aware_separation_loss():
    g = torch.Generator().manual_seed(0)
    targets = [torch.rand(4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
    preds = [torch.rand(3, 4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
    ones = [torch.ones(3), torch.ones(3)]
    assert torch.equal(loss_sep_aware(targets, preds, ones), loss_sep_plain(targets, preds))

    gated = [torch.stack([targets[0], torch.rand(4, 4, generator=g, dtype=torch.float64)]),
             torch.stack([targets[1], 5 * torch.ones(4, 4, dtype=torch.float64)])]
    value = loss_sep_aware(targets, gated, [torch.tensor([1.0, 0.0]), torch.tensor([1.0, 0.0])])
    assert float(value) == 0.0

    muted = loss_sep_aware(targets, preds, [torch.zeros(3), torch.zeros(3)])
    assert float(muted) == pytest.approx(float(targets[0].mean() + targets[1].mean()))

    with pytest.raises(ContractViolation):
        loss_sep_aware(targets, preds, [torch.full((3,), 0.5), torch.ones(3)])


def test_separation_losses_scale_linearly():
    g = torch.Generator().manual_seed(1)
    targets = [torch.rand(4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
    preds = [torch.rand(2, 4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
    gates = [torch.tensor([1.0, 0.0]), torch.tensor([1.0, 1.0])]
    lam = 3.0
    assert float(loss_sep_plain([lam * t for t in targets], [lam * p for p in preds])) == pytest.approx(
        lam * float(loss_sep_plain(targets, preds)), rel=1e-12
    )
    assert float(loss_sep_aware([lam * t for t in targets], [lam * p for p in preds], gates)) == pytest.approx(
        lam * float(loss_sep_aware(targets, preds, gates)), rel=1e-12
    )


def test_gated_objects_receive_no_gradient():
    target = torch.rand(4, 4, dtype=torch.float64)
    a = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
    b = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
    loss = loss_sep_aware([target], [torch.stack([a, b])], [torch.tensor([1.0, 0.0])])
    loss.backward()
    assert torch.any(a.grad != 0)
    assert torch.all(b.grad == 0)


def test_distance_selection():
    assert select_from_distances([0.05, 0.5], 0.1) == (0, 1)
    assert select_from_distances([0.05, 0.08], 0.1) == (0, None)
    assert select_from_distances([0.3, 0.3], 0.1) == (0, 0)
    with pytest.raises(InputError):
        select_from_distances([], 0.1)


def test_distance_selection_on_random_vectors():
    rng = np.random.default_rng(2)
    for trial in range(1000):
        d = rng.uniform(0.0, 0.3, size=rng.integers(1, 7))
        if trial % 3 == 0:
            d = np.round(d, 1)
        epsilon = float(rng.choice([0.0, 0.1, 0.2]))
        n_hat, n_star = select_from_distances(d, epsilon)
        assert n_hat == int(np.argmin(d))
        first_max = int(np.argmax(d))
        assert n_star == (first_max if d[first_max] > epsilon else None)


def test_cyclic_mining():
    target = torch.ones(2, 2, dtype=torch.float64)
    preds = torch.stack([target.clone(), torch.zeros(2, 2, dtype=torch.float64), 0.5 * target])
    selection = cyclic_mine([preds, preds[:1]], [target, target], epsilon=0.1)
    assert selection.pos_index == (0, 0)
    assert selection.neg_index == (1, None)
    assert selection.distances[0].tolist() == [0.0, 1.0, 0.5]
    d = selection.distances[0]
    assert d[selection.pos_index[0]] == d.min()
    assert d[selection.neg_index[0]] > selection.epsilon and d[selection.neg_index[0]] == d.max()


def test_mined_grounding_losses(fixed_grounder):
    candidates = [scored(0.8, 0.1), scored(0.1, 0.8)]
    selection = MiningSelection(pos_index=(0, 1), neg_index=(1, 0), distances=((), ()), epsilon=0.1)
    m_hat = loss_grd_m_star_hat(selection, F_S, candidates, fixed_grounder)
    assert float(m_hat) == pytest.approx(0.65700, abs=1e-5)

    s_star = loss_grd_s_star(selection, [F_S, F_S], candidates, [scored(0.1), scored(0.1)], fixed_grounder)
    assert float(s_star) == pytest.approx(0.65700, abs=1e-5)

    perfect = MiningSelection((0, 0), (1, 1), ((), ()))
    assert float(loss_grd_m_star_hat(perfect, F_S, [scored(1.0, 0.0)] * 2, fixed_grounder)) == pytest.approx(0.0, abs=1e-6)


def test_absent_negatives_leave_only_positive_terms(fixed_grounder):
    candidates = [scored(0.9, 0.2), scored(0.4, 0.8)]
    selection = MiningSelection((0, 1), (None, None), ((), ()))
    m_hat = loss_grd_m_star_hat(selection, F_S, candidates, fixed_grounder)
    assert float(m_hat) == pytest.approx(float(loss_grd_m(F_S, candidates, fixed_grounder)))


def test_composites_are_sums():
    col = loss_col(torch.tensor(0.3), torch.tensor(0.2), torch.tensor(0.1))
    assert float(col.total) == pytest.approx(0.6)
    assert col.objective == "l_col"
    zero = loss_ccol(torch.tensor(0.0), torch.tensor(0.0), torch.tensor(0.0))
    assert float(zero.total) == 0.0

    rng = np.random.default_rng(0)
    for _ in range(20):
        parts = [torch.tensor(v, dtype=torch.float64) for v in rng.uniform(0, 5, 3)]
        ccol = loss_ccol(*parts)
        recorded = float(ccol.l_grd_s_star + ccol.l_sep_star + ccol.l_grd_m_star_hat)
        assert abs(float(ccol.l_ccol) - recorded) <= 1e-9


def test_missing_objective_term():
    with pytest.raises(ContractViolation):
        LossBreakdown(objective="l_col").total
    assert LossBreakdown(l_sep=torch.tensor(1.5), objective="l_sep").as_dict()["l_sep"] == 1.5


@pytest.fixture
def batch(world, stft_cfg):
    samples = [materialize(e, world, stft_cfg) for e in build_split("train", world).entries[:2]]
    return collate(samples, stft_cfg, generator=torch.Generator().manual_seed(0), dtype=torch.float64)


def test_collate_shapes(batch, stft_cfg):
    assert batch.mixtures.shape == (2, *stft_cfg.net_grid)
    assert batch.sounds.shape == (2, 2, *stft_cfg.net_grid)
    assert len(batch.features) == 2 and batch.features[0][0].shape == (2, 8)
    assert batch.audible[0][0].tolist() == [1.0, 0.0]
    for (n2, n1), (r1, r2) in zip(batch.negatives, batch.random_objects):
        assert 0 <= n2 < 2 and 0 <= n1 < 2 and 0 <= r1 < 2 and 0 <= r2 < 2


@pytest.mark.parametrize("objective", OBJECTIVES)
def test_every_objective_is_finite_and_non_negative(model64, batch, objective):
    breakdown = compute_losses(model64, batch, objective)
    assert torch.isfinite(breakdown.total)
    for name, value in breakdown.as_dict().items():
        assert value is None or value >= 0, name


def test_objective_terms(model64, batch):
    assert compute_losses(model64, batch, "grounding").as_dict()["l_sep_star"] is None
    random_obj = compute_losses(model64, batch, "random_obj").as_dict()
    assert random_obj["l_sep"] is not None and random_obj["l_grd_s"] is None
    col = compute_losses(model64, batch, "col")
    assert abs(float(col.l_col) - float(col.l_grd_s + col.l_sep_star + col.l_grd_m)) <= 1e-9
    ccol = compute_losses(model64, batch, "ccol")
    assert ccol.l_grd_s is None and ccol.l_grd_s_star is not None
    with pytest.raises(ConfigurationError):
        compute_losses(model64, batch, "sop")


def test_oracle_needs_labels(model64, batch):
    batch.audible[0] = (None, None)
    with pytest.raises(ConfigurationError):
        compute_losses(model64, batch, "oracle")


def test_fresh_grounding_loss_is_two_log_two_per_video(model64, batch):
    # zero-initialized head: every pair scores (0.5, 0.5)
    value = compute_losses(model64, batch, "grounding").total
    assert float(value) == pytest.approx(2 * 2 * math.log(2), abs=1e-9)


def test_random_object_baseline_never_grounds(arch, stft_cfg, batch):
    model = ModelState.fresh(arch, stft_cfg, seed=0, dtype=torch.float64).model
    loss = compute_losses(model, batch, "random_obj").total
    loss.backward()
    assert all(p.grad is None for p in model.audio_encoder.parameters())
    assert all(p.grad is None for p in model.grounder.parameters())


@pytest.mark.parametrize(
    "objective, term",
    [
        ("grounding", "l_grd_s"),
        ("random_obj", "l_sep"),
        ("oracle", "l_sep_star"),
        ("col", "l_sep_star"),
        ("col", "l_grd_m"),
        ("col", "l_col"),
        ("ccol", "l_ccol"),
    ],
)
def test_loss_gradients_match_finite_differences(arch, stft_cfg, batch, objective, term):
    model = ModelState.fresh(arch, stft_cfg, seed=2, dtype=torch.float64).model
    torch.nn.init.normal_(model.grounder.mlp[-1].weight, std=0.1)
    params = dict(model.named_parameters())

    def loss():
        return getattr(compute_losses(model, batch, objective), term)

    analytic = torch.autograd.grad(loss(), list(params.values()), allow_unused=True)
    h = 1e-5
    rng = np.random.default_rng(1)
    with torch.no_grad():
        for (name, p), grad in zip(params.items(), analytic):
            flat = p.view(-1)
            for i in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                original = flat[i].item()
                flat[i] = original + h
                up = loss().item()
                flat[i] = original - h
                down = loss().item()
                flat[i] = original
                numeric = (up - down) / (2 * h)
                expected = 0.0 if grad is None else grad.view(-1)[i].item()
                assert abs(numeric - expected) <= 1e-4 * max(1.0, abs(numeric), abs(expected)), name
