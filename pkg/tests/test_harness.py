import math

import numpy as np
import pytest
import torch

from panoexplore.dataset import SynthSpec, stack_samples, synth_generate
from panoexplore.glimpse import FULL_GRID, MICRO_GRID, BlockIndex, crop_batch, patch_index
from panoexplore.harness import (
    MIDDLE_ROWS,
    MetricReport,
    Policy,
    accuracy,
    classification_accuracy,
    evaluate,
    format_table,
    mse_metric,
    neighbour_table,
    read_curves,
    rmse_from_mse,
    rmse_metric,
    write_curves,
)
from panoexplore.memory import FitInMatrix, matrix_write
from panoexplore.nets import MICRO, Explorer, make_vgg
from panoexplore.trainer import EpisodeState, StepContext


def state_with(visited_ids, current, grid=FULL_GRID, seed=0, batch=1):
    visited = torch.zeros(batch, grid.patch_count, dtype=torch.bool)
    visited[:, list(visited_ids)] = True
    traj = [torch.full((batch,), current)] if current is not None else []
    return EpisodeState(len(traj), visited, None, np.random.default_rng(seed), traj)


def ctx_for(grid=FULL_GRID, recon=None, pano=None, batch=1):
    return StepContext(pano, torch.zeros(batch, grid.patch_count), recon, "eval", grid)


@pytest.fixture(scope="module")
def micro_imgs():
    imgs, labels = stack_samples(synth_generate(SynthSpec(count=12, seed=9)), 32, 64)
    return imgs, labels


# ---------------------------------------------------------------------------
# policies


def test_neighbourhood_wraps():
    table = neighbour_table(FULL_GRID)
    p = patch_index(BlockIndex(0, 4), FULL_GRID)
    cols = {int(q) % 16 for q in torch.nonzero(table[p]).flatten()}
    assert cols == {15, 0, 1}
    assert int(table[p].sum()) == 8
    assert int(table[patch_index(BlockIndex(5, 0), FULL_GRID)].sum()) == 5


def test_neighbourhood_draws_stay_adjacent():
    pol = Policy("neighborhood")
    center = patch_index(BlockIndex(0, 4), FULL_GRID)
    st = state_with({center}, center, seed=1)
    table = neighbour_table(FULL_GRID)
    for _ in range(200):
        assert table[center, int(pol(st, ctx_for()))]


def test_neighbourhood_fallback_when_surrounded():
    pol = Policy("neighborhood")
    center = patch_index(BlockIndex(8, 4), FULL_GRID)
    around = set(torch.nonzero(neighbour_table(FULL_GRID)[center]).flatten().tolist())
    st = state_with(around | {center}, center)
    for _ in range(50):
        assert int(pol(st, ctx_for())) not in around | {center}


def test_gt_oracle_picks_worst_patch():
    pano = torch.rand(1, 3, 128, 256)
    recon = pano.clone()
    recon[0, :, 48:64, 32:48] = 1 - recon[0, :, 48:64, 32:48]  # row 3, col 2 -> 50
    assert patch_index(BlockIndex(2, 3), FULL_GRID) == 50
    pol = Policy("gt-oracle")
    assert int(pol(state_with({1}, 1), ctx_for(recon=recon, pano=pano))) == 50
    # visited patches are never chosen again
    assert int(pol(state_with({50}, 50), ctx_for(recon=recon, pano=pano))) != 50


def test_random_is_uniform():
    pol = Policy("random")
    st = state_with({0, 1, 2}, 2, seed=5)
    draws = np.array([int(pol(st, ctx_for())) for _ in range(10_000)])
    assert not np.isin(draws, [0, 1, 2]).any()
    n, k = len(draws), 125
    freq = np.bincount(draws, minlength=128)[3:]
    p = 1 / k
    sigma = math.sqrt(n * p * (1 - p))
    assert np.mean(np.abs(freq - n * p) <= 3 * sigma) > 0.97
    chi2 = ((freq - n * p) ** 2 / (n * p)).sum()
    assert chi2 < k - 1 + 4 * math.sqrt(2 * (k - 1))


def test_middle_rows_policy():
    pol = Policy("middle-random")
    rows = set()
    st = state_with(set(), 0, seed=3)
    for _ in range(500):
        rows.add(int(pol(st, ctx_for())) // 16)
    assert rows == set(MIDDLE_ROWS)
    full = set(range(48, 80))
    st = state_with(full, 50)
    for _ in range(50):
        assert int(pol(st, ctx_for())) not in full


def test_policy_rejects_unknown_kind():
    with pytest.raises(ValueError):
        Policy("clairvoyant")


def test_policies_never_revisit_in_episodes(micro_imgs):
    imgs, _ = micro_imgs
    torch.manual_seed(0)
    model = Explorer(MICRO)
    for kind in ("random", "middle-random", "neighborhood", "gt-oracle", "learned"):
        rep = evaluate(model, imgs[:4], kind, T=40, seeds=(0,))
        assert len(rep.mse_curve) == 40


# ---------------------------------------------------------------------------
# metrics


def test_mse_examples(rng):
    x = torch.from_numpy(rng.random((2, 3, 32, 64)))
    assert torch.all(mse_metric(x, x) == 0)
    zero = torch.zeros(1, 3, 8, 8)
    assert float(mse_metric(zero + 0.5, zero)) == 250.0
    assert float(rmse_metric(zero + 0.5, zero)) == pytest.approx(127.5, abs=1e-12)
    with pytest.raises(ValueError):
        mse_metric(zero, torch.zeros(1, 3, 8, 9))


def test_mse_matches_scalar_loop(rng):
    a, b = rng.random((3, 16, 20)), rng.random((3, 16, 20))
    acc = 0.0
    for c in range(3):
        for i in range(16):
            for j in range(20):
                acc += (a[c, i, j] - b[c, i, j]) ** 2
    got = float(mse_metric(torch.from_numpy(a)[None], torch.from_numpy(b)[None]))
    assert abs(got - 1000 * acc / a.size) < 1e-9


def test_rmse_is_derived_from_mse(rng):
    a, b = torch.from_numpy(rng.random((4, 3, 8, 8))), torch.from_numpy(rng.random((4, 3, 8, 8)))
    assert torch.equal(rmse_metric(a, b), 255 * torch.sqrt(mse_metric(a, b) / 1000))


@pytest.mark.parametrize("mse, rmse", [(12.49, 28.5), (10.39, 26.0), (18.73, 34.9), (16.64, 32.9)])
def test_published_pairs(mse, rmse):
    assert abs(rmse_from_mse(mse) - rmse) <= 0.05


def test_monotone_information_with_exact_paste(micro_imgs):
    imgs, _ = micro_imgs
    pano = imgs[:2]
    grid = MICRO_GRID
    m = FitInMatrix.zeros(2, grid)
    rng = np.random.default_rng(0)
    fill = torch.full_like(pano, 0.5)
    prev = None
    for ids in rng.permutation(128)[:20]:
        centers = torch.tensor([int(ids), int(ids)])
        crop, valid = crop_batch(pano, centers, grid)
        m = matrix_write(m, crop, centers, valid, grid)
        cur = mse_metric(torch.where(m.occupancy, m.data, fill), pano)
        if prev is not None:
            assert torch.all(cur <= prev + 1e-12)
        prev = cur


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_curve_and_determinism(micro_imgs):
    imgs, _ = micro_imgs
    torch.manual_seed(1)
    model = Explorer(MICRO)
    a = evaluate(model, imgs, "random", T=4, seeds=(0, 1), batch_size=5)
    b = evaluate(model, imgs, "random", T=4, seeds=(0, 1), batch_size=5)
    assert len(a.mse_curve) == 4 and a.n_samples == 24
    assert a.mse_curve == b.mse_curve and a.rmse_curve == b.rmse_curve
    assert a.rmse_curve == [rmse_from_mse(m) for m in a.mse_curve]
    assert np.mean(a.per_image_final_mse) == pytest.approx(a.final_mse)


def test_evaluate_empty_split():
    with pytest.raises(ValueError):
        evaluate(Explorer(MICRO), torch.zeros(0, 3, 32, 64), "random", 2)


def test_accuracy_examples():
    labels = torch.arange(26)
    assert accuracy(torch.eye(26), labels) == 1.0
    with pytest.raises(ValueError):
        accuracy(torch.eye(2), torch.tensor([0, -1]))


def test_chance_level():
    g = torch.Generator().manual_seed(0)
    n = 5000
    logits = torch.rand(n, 26, generator=g)
    labels = torch.randint(0, 26, (n,), generator=g)
    acc = accuracy(logits, labels)
    p = 1 / 26
    assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_classification_accuracy_modes(micro_imgs):
    imgs, labels = micro_imgs
    torch.manual_seed(0)
    vgg = make_vgg(MICRO)
    acc = classification_accuracy(vgg, imgs, labels, "upper-bound")
    assert 0.0 <= acc <= 1.0
    model = Explorer(MICRO, "from-recon")
    assert 0.0 <= classification_accuracy(model, imgs, labels, "from-recon", T=3) <= 1.0
    with pytest.raises(ValueError):
        classification_accuracy(model, imgs, labels, "from-vector")
    with pytest.raises(ValueError):
        classification_accuracy(model, imgs, torch.full_like(labels, -1), "from-recon")


# ---------------------------------------------------------------------------
# report output


def test_curves_roundtrip_and_table(tmp_path):
    reps = [
        MetricReport("learned", [20.0, 12.49], [rmse_from_mse(20.0), rmse_from_mse(12.49)], 10, [0]),
        MetricReport("random", [20.0, 16.64], [rmse_from_mse(20.0), rmse_from_mse(16.64)], 10, [0]),
    ]
    path = tmp_path / "curves.csv"
    write_curves(reps, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "policy,step,mse,rmse,samples" and len(lines) == 1 + 4
    back = read_curves(path)
    assert [r.policy for r in back] == ["learned", "random"]
    assert back[0].mse_curve == [20.0, 12.49]
    table = format_table(back, reference=True)
    assert "Learned attention" in table and "12.49" in table and "28.5" in table
    assert "Side-kick Policy Learning" in table and "39.0" in table
    assert len(format_table(back).splitlines()) == 3 + 2
