import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sendai.alignment import LatentTransform
from sendai.field_data import SensorSet, place_sensors_random, sample
from sendai.hf_pathway import (LossWeights, PeelConfig, PeelLayer, PeelLayerConfig, PeelStack, default_tau,
                               grid_coords, hf_forward, huber, infer, layer_loss, pe_bands, peel_apply, peel_train,
                               positional_encode, smoothness_loss, sparsity_weight)
from sendai.lf_pathway import ShredConfig, ShredModel, decode_lf, encode
from sendai.alignment import align
from sendai.spectral import FreqGrid, make_mask
from sendai.training import OptConfig


def peel_param_oracle(p, d_hf=64, enc=(128, 128), dec=(256, 256, 128), bands=16):
    def mlp(widths):
        n = 0
        for a, b in zip(widths[:-2], widths[1:-1]):
            n += a * b + b + 2 * b
        return n + widths[-2] * widths[-1] + widths[-1]
    pe = 2 + 4 * bands
    return mlp([p, *enc, d_hf]) + mlp([pe + d_hf, *dec, 1]) + 1


# --- positional encoding --------------------------------------------------------

def test_pe_at_origin():
    v = positional_encode(0.0, 0.0, pe_bands())
    assert v.shape == (66,)
    expected = [0.0, 0.0] + [0.0, 1.0, 0.0, 1.0] * 16
    assert np.allclose(v, expected, atol=0)


def test_pe_bands_log_spaced():
    b = pe_bands(16, 8.0)
    assert b[0] == pytest.approx(1.0) and b[-1] == pytest.approx(8.0)
    assert np.allclose(np.diff(np.log2(b)), 3.0 / 15)
    assert np.allclose(b, [2 ** (j * math.log2(8) / 15) for j in range(16)])


def test_pe_torch_matches_numpy():
    x = np.random.default_rng(0).uniform(size=7)
    y = np.random.default_rng(1).uniform(size=7)
    a = positional_encode(x, y, pe_bands())
    b = positional_encode(torch.as_tensor(x), torch.as_tensor(y), pe_bands()).numpy()
    assert np.allclose(a, b, atol=1e-12)


def test_grid_coords_row_major():
    c = grid_coords(3, 2)
    assert c.tolist() == [[0, 0], [0, 0.5], [1 / 3, 0], [1 / 3, 0.5], [2 / 3, 0], [2 / 3, 0.5]]


# --- peel layer -----------------------------------------------------------------

@pytest.mark.parametrize("p", [3, 64])
def test_peel_parameter_count(p):
    layer = PeelLayer(p, 8, 8)
    assert sum(t.numel() for t in layer.parameters()) == peel_param_oracle(p)
    assert layer.cfg.d_hf == 64 and layer.cfg.gamma_init == 0.1


def test_zero_gamma_gives_zero_field():
    layer = PeelLayer(3, 16, 1, PeelLayerConfig(gamma_init=0.0))
    out = hf_forward(np.ones(3), layer)
    assert out.shape == (16, 1) and np.all(out == 0)


def test_hf_forward_deterministic_and_batched():
    torch.manual_seed(0)
    layer = PeelLayer(3, 12, 10)
    r = np.random.default_rng(0).normal(size=(4, 3))
    a = hf_forward(r, layer)
    assert a.shape == (4, 12, 10)
    assert np.array_equal(a, hf_forward(r.copy(), layer))
    assert np.allclose(a[2], hf_forward(r[2], layer), atol=1e-6)


def test_split_first_layer_matches_direct_query():
    torch.manual_seed(1)
    layer = PeelLayer(3, 6, 5)
    r = torch.randn(3)
    with torch.no_grad():
        grid = layer(r)[0].reshape(-1)
        direct = layer.query(r, torch.as_tensor(grid_coords(6, 5), dtype=torch.float32))
    assert torch.allclose(grid, direct, atol=1e-5)


def test_hf_output_is_continuous_in_coordinates():
    torch.manual_seed(2)
    layer = PeelLayer(4, 32, 32)
    out = hf_forward(np.random.default_rng(2).normal(size=4), layer)
    full = out.max() - out.min()
    assert np.abs(np.diff(out, axis=0)).max() <= full
    assert np.abs(np.diff(out, axis=1)).max() <= full
    # refining the query grid between two pixels stays between finite bounds
    with torch.no_grad():
        coords = torch.stack([torch.linspace(0, 1 / 32, 50), torch.zeros(50)], -1)
        line = layer.query(torch.as_tensor(np.random.default_rng(2).normal(size=4), dtype=torch.float32), coords)
    assert torch.all(torch.isfinite(line)) and float(line.max() - line.min()) <= full


def test_wrong_residual_length():
    with pytest.raises(ValueError):
        PeelLayer(3, 8, 8)(torch.zeros(1, 4))


# --- smoothness -----------------------------------------------------------------

@pytest.mark.parametrize("kind", ["laplacian", "tv", "bilateral"])
def test_constant_frame_is_smooth(kind):
    assert smoothness_loss(np.full((8, 8), 2.5), kind) == 0.0
    assert smoothness_loss(np.full((16, 1), 2.5), kind) == 0.0


def test_linear_ramp():
    ramp = np.arange(8, dtype=float)[:, None].repeat(8, 1)
    assert smoothness_loss(ramp, "laplacian") == pytest.approx(0.0, abs=1e-12)
    assert smoothness_loss(ramp, "tv") > 0
    # tv oracle: 7 unit row differences per column, divided by the cell count
    assert smoothness_loss(ramp, "tv") == pytest.approx(7 * 8 / 64)


def test_bilateral_large_delta_is_half_tv_sum(rng):
    u = 0.01 * rng.normal(size=(10, 9))
    tv_sum = smoothness_loss(u, "tv") * u.size
    assert smoothness_loss(u, "bilateral", delta=1e6) == pytest.approx(0.5 * tv_sum, rel=1e-12)


def test_laplacian_one_dimensional_oracle(rng):
    u = rng.normal(size=(20, 1))
    second = u[2:, 0] + u[:-2, 0] - 2 * u[1:-1, 0]
    assert smoothness_loss(u, "laplacian") == pytest.approx(np.mean(second ** 2))


def test_huber_pieces():
    x = torch.tensor([-2.0, -0.05, 0.0, 0.05, 2.0])
    out = huber(x, 0.1)
    assert torch.allclose(out, torch.tensor([0.1 * 1.95, 0.00125, 0.0, 0.00125, 0.1 * 1.95]))


def test_unknown_smoothness():
    with pytest.raises(ValueError):
        smoothness_loss(np.zeros((4, 4)), "median")


# --- layer loss -----------------------------------------------------------------

def _setup(H=16, W=16, p=5, seed=0):
    s = place_sensors_random(H, W, p, 2, seed)
    mask = make_mask(FreqGrid(H, W))
    return s, mask


def test_defaults_match_reference_weights():
    w = LossWeights()
    assert (w.lam_sp, w.lam_sm, w.lam_topk, w.beta1, w.beta2) == (0.05, 0.1, 10.0, 100.0, 100.0)


def test_exact_fit_zero_sensor_and_magnitude_terms():
    s, mask = _setup()
    r = np.array([0.3, -0.2, 0.5, 0.1, -0.4])
    u = np.zeros((16, 16))
    u.reshape(-1)[list(s.indices)] = r
    _, parts = layer_loss(u, r, s, mask, 3, LossWeights(), tau=np.abs(r).sum() + 1.0)
    assert parts["sensor"] == 0.0 and parts["mag"] == 0.0


def test_zero_field_costs_residual_norm():
    s, mask = _setup()
    r = np.array([0.3, -0.2, 0.5, 0.1, -0.4])
    total, _ = layer_loss(np.zeros((16, 16)), r, s, mask, 2, LossWeights(), tau=1.0)
    assert total == np.sum(r ** 2)


def test_infinite_k_drops_topk():
    s, mask = _setup()
    u = np.random.default_rng(0).normal(size=(16, 16))
    r = np.zeros(5)
    a, pa = layer_loss(u, r, s, mask, math.inf, LossWeights(), tau=1e9)
    b, pb = layer_loss(u, r, s, mask, 1, LossWeights(lam_topk=0.0), tau=1e9)
    assert a == pytest.approx(b)


def test_magnitude_hinge():
    s, mask = _setup()
    u = np.full((16, 16), 0.1)
    _, parts = layer_loss(u, np.zeros(5), s, mask, 1, LossWeights(), tau=20.0)
    assert parts["mag"] == pytest.approx((25.6 - 20.0) ** 2)


def test_sparsity_schedule():
    assert [sparsity_weight(e, 0.05, 100) for e in (0, 99, 100, 150, 200, 500)] == \
        [0.0, 0.0, 0.0, 0.025, 0.05, 0.05]
    assert sparsity_weight(0, 0.05, 0) == 0.05


def test_default_tau():
    r = np.array([[1.0, -1.0], [0.5, -0.5]])
    assert default_tau(r, 100) == pytest.approx(2 * 0.75 * 100)


# --- stack ------------------------------------------------------------------------

def test_empty_stack_returns_base():
    s = place_sensors_random(32, 1, 3, 2, 0)
    base = np.random.default_rng(0).normal(size=(6, 32, 1))
    stack = peel_train(base, sample(base, s), s, PeelConfig(n_layers=0))
    assert len(stack) == 0
    u, parts = peel_apply(stack, base, sample(base, s))
    assert parts == [] and np.array_equal(u, base)


def test_assembly_is_exact_sum_and_exclusion_grows():
    rng = np.random.default_rng(3)
    s = place_sensors_random(32, 1, 4, 2, 3)
    y = np.arange(32)[None, :, None]
    t = np.arange(12)[:, None, None]
    truth = np.sin(2 * np.pi * 3 * y / 32 - 0.3 * t) + 0.5 * np.sin(2 * np.pi * 7 * y / 32 - 0.7 * t)
    base = np.zeros_like(truth)
    cfg = PeelConfig(n_layers=3, warmup=1, finetune_epochs=1, k_mode=[2])
    stack = peel_train(base, sample(truth, s), s, cfg, OptConfig(epochs=3, lr=1e-3, seed=0))
    u, parts = peel_apply(stack, base, sample(truth, s))
    expected = base.copy()
    for hf in parts:
        expected = expected + hf
    assert np.array_equal(u, expected)
    sizes = [r["exclusion_cells"] for r in stack.reports]
    assert sizes == sorted(sizes)
    assert all(not prm.requires_grad for layer in stack.layers for prm in layer.parameters())
    # each layer consumes the residual of the frozen layers before it
    r2 = sample(truth, s) - sample(base + parts[0], s)
    assert np.allclose(parts[1], hf_forward(r2, stack.layers[1]))
    assert {"k", "tau", "discovered", "exclusion_inherited", "history", "finetune_history"} <= stack.reports[0].keys()


def test_infer_paths():
    torch.manual_seed(0)
    H, W, p, L = 16, 1, 3, 4
    s = place_sensors_random(H, W, p, 2, 0)
    shred = ShredModel(p, H, W, ShredConfig(lags=L))
    g = LatentTransform()
    window = np.random.default_rng(0).normal(size=(L, p))
    lf = decode_lf(align(encode(window, shred), g), shred)
    assert np.allclose(infer(window, np.zeros(p), shred, g, None), lf)
    assert np.allclose(infer(window, np.zeros(p), shred, g, PeelStack([], s)), lf)
    layer = PeelLayer(p, H, W)
    stack = PeelStack([layer], s)
    now = sample(lf[None].astype(np.float64), s)[0]   # sensors already matched
    out = infer(window, now, shred, g, stack)
    assert np.all(np.isfinite(out))
    assert np.allclose(out - lf, hf_forward(np.zeros(p), layer), atol=1e-5)
    with pytest.raises(ValueError):
        infer(window, now, None, g, stack)


@pytest.mark.parametrize("ramp", [False, True])
def test_topk_weight_schedule(ramp):
    s = place_sensors_random(16, 1, 3, 1, 0)
    base = np.zeros((6, 16, 1))
    truth = np.sin(2 * np.pi * 2 * np.arange(16) / 16)[None, :, None] * np.ones((6, 1, 1))
    cfg = PeelConfig(n_layers=1, warmup=2, finetune_epochs=1, k_mode=[1], warmup_topk=ramp)
    stack = peel_train(base, sample(truth, s), s, cfg, OptConfig(epochs=6, lr=1e-3, seed=0))
    got = [h["lam_topk"] for h in stack.reports[0]["history"]]
    want = [sparsity_weight(e, 10.0, 2) for e in range(6)] if ramp else [10.0] * 6
    assert got == pytest.approx(want)
    assert [h["lam_topk"] for h in stack.reports[0]["finetune_history"]] == [10.0]
