import os

import numpy as np
import pytest

from vsprompt import checkpoint
from vsprompt.autodiff import ShapeError, Tape, Tensor, backward, gradcheck, no_grad
from vsprompt.checkpoint import CheckpointError
from vsprompt.model import analytic_prompt_count, build, forward, grid_tiny, lrw_tiny, parameter_count
from vsprompt.prompts import (COMBINATIONS, PadPromptSet, apply_add, apply_cat, init_prompts, install_pad,
                              load_prompts, pad_layer_subset, parse_combination, save_prompts,
                              uninstall_pad)


@pytest.fixture(scope="module")
def grid():
    return build(grid_tiny(), 0).freeze()


def randomize(ps, rng, scale=0.2):
    for t in ps.tensors().values():
        t.data[...] = rng.normal(scale=scale, size=t.shape)
    return ps


def test_parse_combination():
    assert parse_combination("A+P+C") == {"A", "P", "C"}
    assert [len(parse_combination(c)) for c in COMBINATIONS] == [1, 1, 1, 2, 2, 2, 3]
    for bad in ("P+A", "", "A+A", "D"):
        with pytest.raises(ValueError, match="unknown prompt combination"):
            parse_combination(bad)


def test_init_shapes_and_values():
    cfg = grid_tiny()
    ps = init_prompts(cfg, "A+P+C", 0, cat_length=4)
    assert ps.combination == "A+P+C"
    assert ps.add.shape == (16, 16, 1) and not ps.add.data.any()
    assert sorted(ps.pad.rings) == [0, 1, 2] and all(not r.data.any() for r in ps.pad.rings.values())
    assert ps.cat.shape == (4, 64) and 0 < ps.cat.data.std() < 0.05
    same = init_prompts(cfg, "C", 0, cat_length=4)
    assert same.cat.data.tobytes() == ps.cat.data.tobytes()
    with pytest.raises(ValueError):
        init_prompts(cfg, "C", 0, cat_length=0)


def test_pad_subset_is_shallowest_first():
    cfg = lrw_tiny()
    assert pad_layer_subset(cfg, None) == list(range(8))
    assert pad_layer_subset(cfg, 3) == [0, 1, 2]
    with pytest.raises(ValueError):
        pad_layer_subset(cfg, 9)
    assert sorted(init_prompts(cfg, "P", 0, pad_layers=2).pad.rings) == [0, 1]


def test_apply_add_grad_is_sum_over_frames():
    x = Tensor(np.zeros((3, 4, 5, 1)))
    p = Tensor(np.zeros((4, 5, 1)), requires_grad=True)
    with Tape():
        backward(apply_add(x, p).sum())
    np.testing.assert_array_equal(p.grad, np.full((4, 5, 1), 3.0))
    with pytest.raises(ShapeError):
        apply_add(x, Tensor(np.zeros((5, 4, 1))))


def test_apply_cat_shapes_and_ordering():
    rng = np.random.default_rng(0)
    f, p = Tensor(rng.normal(size=(6, 8))), Tensor(rng.normal(size=(2, 8)))
    out = apply_cat(f, p)
    assert out.shape == (8, 8)
    np.testing.assert_array_equal(out.data[:2], p.data)
    np.testing.assert_array_equal(out.data[2:], f.data)
    batched = apply_cat(Tensor(rng.normal(size=(3, 6, 8))), p)
    assert batched.shape == (3, 8, 8)
    np.testing.assert_array_equal(batched.data[1, :2], p.data)
    with pytest.raises(ShapeError):
        apply_cat(f, Tensor(np.zeros((2, 7))))


def test_cat_prompt_receives_gradient(grid):
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(size=(1, 12, 16, 16, 1)))
    ps = init_prompts(grid.config, "C", 0).requires_grad_(True)
    with Tape():
        backward((forward(grid, x, ps) * Tensor(rng.normal(size=(1, 12, 11)))).sum())
    assert ps.cat.grad is not None and np.abs(ps.cat.grad).max() > 0


def test_install_uninstall_is_reversible(grid):
    model = grid.copy()
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(2, 12, 16, 16, 1))
    ps = randomize(init_prompts(model.config, "P", 0), rng)
    with no_grad():
        base = forward(model, x).data
        via_prompts = forward(model, x, ps).data
        install_pad(model, ps.pad)
        installed = forward(model, x).data
        uninstall_pad(model)
        after = forward(model, x).data
    np.testing.assert_array_equal(installed, via_prompts)
    np.testing.assert_array_equal(after, base)
    assert np.abs(installed - base).max() > 1e-6
    with pytest.raises(ShapeError, match="S\\^l"):
        install_pad(model, PadPromptSet({0: Tensor(np.zeros((3, 1)))}))


def test_combined_equals_sequential_application(grid):
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(size=(2, 12, 16, 16, 1)))
    ps = randomize(init_prompts(grid.config, "A+P+C", 0), rng)
    model = grid.copy()
    install_pad(model, ps.pad)
    with no_grad():
        cat_only = init_prompts(grid.config, "C", 0)
        cat_only.cat = ps.cat
        staged = forward(model, apply_add(x, ps.add), cat_only).data
        np.testing.assert_array_equal(forward(grid, x, ps).data, staged)


@pytest.mark.parametrize("combo", ["A", "P", "C", "A+P+C"])
def test_prompt_gradcheck(grid, combo):
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(size=(1, 4, 16, 16, 1)))
    ps = randomize(init_prompts(grid.config, combo, 0), rng, 0.05).requires_grad_(True)
    w = Tensor(rng.normal(size=(1, 4, 11)))
    tensors = list(ps.tensors().values())
    # ReLUs sit in the path, so the looser tolerance applies
    assert gradcheck(lambda: (forward(grid, x, ps) * w).sum(), tensors) < 1e-4


def test_save_load_round_trip(tmp_path, grid):
    cfg = grid.config
    ps = randomize(init_prompts(cfg, "A+P+C", 0, pad_layers=2, speaker="7"), np.random.default_rng(5))
    path = tmp_path / "p.vspt"
    save_prompts(ps, path, cfg)
    back = load_prompts(path, cfg)
    assert back.digest() == ps.digest()
    assert back.combination == "A+P+C" and back.speaker == "7" and sorted(back.pad.rings) == [0, 1]


def test_load_with_wrong_config_names_the_entry(tmp_path):
    ps = init_prompts(grid_tiny(), "A+P", 0)
    path = tmp_path / "p.vspt"
    save_prompts(ps, path, grid_tiny())
    with pytest.raises(CheckpointError, match="prompt.add"):
        load_prompts(path, grid_tiny(height=20))
    save_prompts(init_prompts(grid_tiny(), "P", 0), path, grid_tiny())
    with pytest.raises(CheckpointError, match="prompt.pad.0"):
        load_prompts(path, lrw_tiny())
    build(grid_tiny(), 0).save(tmp_path / "m.vspt")
    with pytest.raises(CheckpointError, match="not a prompt checkpoint"):
        load_prompts(tmp_path / "m.vspt", grid_tiny())


def test_cat_file_size_arithmetic(tmp_path):
    cfg = grid_tiny()
    for n_p in (1, 5):
        path = tmp_path / f"c{n_p}.vspt"
        save_prompts(init_prompts(cfg, "C", 0, cat_length=n_p), path, cfg)
        entries, meta = checkpoint.load(path)
        meta_bytes = len(checkpoint.encode({}, meta)) - 12
        name = len("prompt.cat")
        assert os.path.getsize(path) == 12 + (4 + name + 4 + 16 + 8 * n_p * cfg.dim) + meta_bytes


def test_lrw_ratios_stay_small():
    cfg = lrw_tiny()
    model = build(cfg, 0)
    full = parameter_count(model)["total"]
    for combo, limit in (("A+P+C", 0.05), ("C", 0.01)):
        analytic = analytic_prompt_count(cfg, combo)["prompt_total"] / full
        counted = parameter_count(model, init_prompts(cfg, combo, 0))["ratio"]
        assert analytic == counted < limit
