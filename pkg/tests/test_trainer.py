import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnmtt.dataset import Frame, InMemoryDataset
from cnnmtt.model import build_model
from cnnmtt.raster import GridSpec, IntensityImage
from cnnmtt import trainer
from cnnmtt.trainer import (
    LossReport,
    TrainConfig,
    WindowSpec,
    batch_losses,
    evaluate_loss,
    train,
    windowed_loss,
)

from conftest import tiny_spec


def img(grid, values):
    return IntensityImage(grid, np.asarray(values, dtype=float))


def toy_dataset(grid, n=4, k=2, seed=0):
    r = np.random.default_rng(seed)
    w = grid.width_pixels
    frames = [
        Frame(0, i + 1, r.random((k, w, w)).astype(np.float32) * 1e-4, r.random((1, w, w)).astype(np.float32) * 1e-4, np.zeros((0, 2)))
        for i in range(n)
    ]
    return InMemoryDataset(frames, grid)


# --- windowed loss ----------------------------------------------------------


def test_window_spec_validation():
    with pytest.raises(ValueError):
        WindowSpec(100.0, 200.0)
    with pytest.raises(ValueError):
        WindowSpec(100.0, 0.0)


def test_loss_zero_for_perfect_prediction(small_grid):
    u = img(small_grid, np.random.default_rng(0).random((32, 32)))
    assert windowed_loss(u, u, 100.0) == 0.0


def test_loss_constant_difference(small_grid):
    # B = 16 px exactly so the window covers B^2 of area
    B = 16 * small_grid.resolution_rho
    p = img(small_grid, np.full((32, 32), 0.3))
    t = img(small_grid, np.zeros((32, 32)))
    assert windowed_loss(p, t, B) == pytest.approx(0.09, rel=1e-12)


def test_loss_matches_direct_summation():
    g = GridSpec(2.0, 8, (-7.0, -7.0))
    r = np.random.default_rng(3)
    p, t = r.normal(size=(8, 8)), r.normal(size=(8, 8))
    B = 9.0
    total = 0.0
    for i in range(8):
        for j in range(8):
            x, y = -7.0 + 2 * i, -7.0 + 2 * j
            if abs(x) < B / 2 and abs(y) < B / 2:
                total += (p[i, j] - t[i, j]) ** 2 * 4.0
    assert windowed_loss(img(g, p), img(g, t), B) == pytest.approx(total / B**2, rel=1e-12, abs=1e-15)


def test_loss_rejects_oversized_window(small_grid):
    u = img(small_grid, np.zeros((32, 32)))
    with pytest.raises(ValueError):
        windowed_loss(u, u, small_grid.extent * 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 31), st.integers(0, 31), st.floats(-10, 10))
def test_loss_ignores_pixels_outside_window(i, j, v):
    g = GridSpec.centered(250.0)
    r = np.random.default_rng(1)
    p, t = r.random((32, 32)), r.random((32, 32))
    B = 80.0
    before = windowed_loss(img(g, p), img(g, t), B)
    if g.inside(B)[i, j]:
        return
    p[i, j] = v
    assert windowed_loss(img(g, p), img(g, t), B) == before


@given(st.floats(0.01, 100.0))
def test_loss_scales_quadratically(alpha):
    g = GridSpec.centered(250.0)
    r = np.random.default_rng(2)
    p, t = r.random((32, 32)), r.random((32, 32))
    base = windowed_loss(img(g, p), img(g, t), 120.0)
    scaled = windowed_loss(img(g, t + alpha * (p - t)), img(g, t), 120.0)
    assert scaled == pytest.approx(alpha**2 * base, rel=1e-9)


def test_batch_loss_agrees_with_numpy_loss(small_grid, tiny_model):
    ds = toy_dataset(small_grid)
    x, u = ds.batch([0, 1])
    tiny_model.to(torch.float64)
    win = WindowSpec(200.0, 120.0)
    per = batch_losses(tiny_model, x, u, small_grid, win).detach().numpy()
    for k in range(2):
        xa = x[k] * small_grid.inside(200.0)[None]
        with torch.no_grad():
            pred = tiny_model.net(torch.as_tensor(xa[None], dtype=torch.float64))[0].numpy()
        want = windowed_loss(img(small_grid, pred), img(small_grid, u[k]), 120.0)
        assert per[k] == pytest.approx(want, rel=1e-10)


def test_padding_free_crop_matches_full_grid(monkeypatch, tiny_model):
    # 64 px grid, 32 px input window, receptive field 25 px: the crop is exact
    g = GridSpec.centered(500.0)
    ds = toy_dataset(g, n=4, seed=1)
    x, u = ds.batch([0, 1, 2, 3])
    tiny_model.to(torch.float64)
    win = WindowSpec(250.0, 6 * g.resolution_rho)
    mask_a, _ = trainer._masks(g, win, (0.0, 0.0), torch.float64)
    assert trainer._input_box(tiny_model, g, win, mask_a) is not None
    cropped = batch_losses(tiny_model, x, u, g, win).detach().numpy()
    monkeypatch.setattr(trainer, "_input_box", lambda *a: None)
    full = batch_losses(tiny_model, x, u, g, win).detach().numpy()
    np.testing.assert_allclose(cropped, full, rtol=1e-9, atol=0)
    assert full.max() > 0


# --- evaluation -------------------------------------------------------------


def test_evaluate_loss_zero_for_identical_pairs(small_grid):
    # a model whose output is always zero, on targets that are zero
    model = build_model(tiny_spec(), 0)
    with torch.no_grad():
        for p in model.net.parameters():
            p.zero_()
    ds = toy_dataset(small_grid)
    for f in ds._frames:
        f.target[:] = 0
    rep = evaluate_loss(model, ds, WindowSpec.full(small_grid))
    assert rep.mean_loss == 0.0 and rep.std_error == 0.0 and rep.num_samples == 4


def test_evaluate_loss_is_hand_average(small_grid, tiny_model):
    ds = toy_dataset(small_grid, n=2)
    win = WindowSpec.full(small_grid)
    rep = evaluate_loss(tiny_model, ds, win)
    singles = [evaluate_loss(tiny_model, InMemoryDataset([f], small_grid), win).mean_loss for f in ds._frames]
    assert rep.mean_loss == pytest.approx(np.mean(singles), rel=1e-6)
    again = evaluate_loss(tiny_model, ds, win)
    assert again.mean_loss == rep.mean_loss and again.std_error == rep.std_error


def test_loss_report_stats():
    rep = LossReport.from_samples([1.0, 2.0, 3.0, 4.0])
    assert rep.mean_loss == 2.5
    assert rep.std_error == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)


# --- training ---------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters(small_grid, tiny_model):
    before = tiny_model.parameters()
    train(tiny_model, toy_dataset(small_grid), WindowSpec.full(small_grid), TrainConfig(batch_size=2, learning_rate=0.0, epochs=3))
    for k, v in tiny_model.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_empty_dataset_rejected(small_grid, tiny_model):
    with pytest.raises(ValueError):
        train(tiny_model, InMemoryDataset([], small_grid), WindowSpec.full(small_grid), TrainConfig())


def test_overfits_single_sample(small_grid):
    model = build_model(tiny_spec(), 1)
    ds = toy_dataset(small_grid, n=1, seed=4)
    _, hist = train(model, ds, WindowSpec.full(small_grid), TrainConfig(batch_size=1, learning_rate=1e-3, epochs=500, weight_decay=0.0))
    assert hist[-1].mean_loss <= hist[0].mean_loss / 10


def test_training_is_deterministic(small_grid):
    runs = []
    for _ in range(2):
        model = build_model(tiny_spec(), 2)
        train(model, toy_dataset(small_grid, n=6), WindowSpec(200.0, 150.0), TrainConfig(batch_size=4, learning_rate=1e-3, epochs=3, seed=9))
        runs.append(model.parameters())
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


def test_history_reports_every_epoch(small_grid, tiny_model):
    seen = []
    _, hist = train(
        tiny_model, toy_dataset(small_grid), WindowSpec.full(small_grid),
        TrainConfig(batch_size=3, learning_rate=1e-4, epochs=4), on_epoch=lambda e, r, m: seen.append(e),
    )
    assert seen == [0, 1, 2, 3] and len(hist) == 4
    assert all(h.num_samples == 4 for h in hist)
