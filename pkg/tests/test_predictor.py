import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.lib.stride_tricks import sliding_window_view

from pasturemon.hmap import read_manifest, read_sequence
from pasturemon.predictor import (ConvLstmCell, ModelFormatError, Network, NetworkConfig, NormStats, SequenceError,
                                  ShapeError, TrainConfig, TrainingDivergedError, build_sequences, check_gradients,
                                  compute_stats, convlstm_step, count_parameters, relative_error, resolvable_floor, denormalize, draw_masks,
                                  evaluate_loss, load_model, mc_predict, normalize, population_moments, save_model,
                                  train, write_prediction)
from pasturemon.predictor.sequences import SequenceSample

torch.set_num_threads(1)


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


# ---------------------------------------------------------------- numpy reference network

def np_conv(x, w, b=None):
    """x (C,H,W), w (O,C,k,k) with replicate padding."""
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (k // 2, k // 2), (k // 2, k // 2)), mode="edge")
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C,H,W,k,k)
    out = np.einsum("chwab,ocab->ohw", win, w)
    return out if b is None else out + b[:, None, None]


def np_cell(params, prefix, x, h, c):
    wx = params[prefix + ".conv_x.weight"]
    bx = params[prefix + ".conv_x.bias"]
    wh = params[prefix + ".conv_h.weight"]
    zx = np_conv(x, wx, bx)
    zh = np_conv(h, wh)
    n = h.shape[0]
    g = [zx[j * n:(j + 1) * n] + zh[j * n:(j + 1) * n] for j in range(4)]
    i = sig(g[0] + params[prefix + ".w_ci"] * c)
    f = sig(g[1] + params[prefix + ".w_cf"] * c)
    c = f * c + i * np.tanh(g[2])
    o = sig(g[3] + params[prefix + ".w_co"] * c)
    return o * np.tanh(c), c


def np_forward(net, inputs, horizon=None, masks=None):
    """Single-sample forward pass written independently of the torch module."""
    P = {k: v.detach().double().numpy() for k, v in net.state_dict().items()}
    c1, c2 = net.config.channels
    M, N = inputs.shape[1:]
    m = (lambda name: np.ones(net.mask_channels()[name])) if masks is None else (lambda name: masks[name])

    def feats(frame):
        f1 = np.tanh(np_conv(frame[None], P["conv1.weight"], P["conv1.bias"])) * m("conv1")[:, None, None]
        pooled = f1.reshape(c1, M // 2, 2, N // 2, 2).mean(axis=(2, 4))
        f2 = np.tanh(np_conv(pooled, P["conv2.weight"], P["conv2.bias"])) * m("conv2")[:, None, None]
        return f1, f2

    hf = np.zeros((c1, M, N)); cf = hf.copy()
    hh = np.zeros((c2, M // 2, N // 2)); ch = hh.copy()
    for t in range(inputs.shape[0]):
        f1, f2 = feats(inputs[t])
        hf, cf = np_cell(P, "enc_full", f1, hf, cf)
        hh, ch = np_cell(P, "enc_half", f2, hh, ch)
    prev = inputs[-1]
    out = []
    for _ in range(horizon or inputs.shape[0]):
        f1, f2 = feats(prev)
        hf, cf = np_cell(P, "dec_full", f1, hf, cf)
        hh, ch = np_cell(P, "dec_half", f2, hh, ch)
        of = hf * m("dec_full")[:, None, None]
        oh = hh * m("dec_half")[:, None, None]
        up = oh.repeat(2, axis=1).repeat(2, axis=2)
        mg = np.tanh(np_conv(np.concatenate([of, up]), P["merge.weight"], P["merge.bias"])) * m("merge")[:, None, None]
        prev = prev + np_conv(mg + of, P["out.weight"], P["out.bias"])[0]
        out.append(prev)
    return np.stack(out)


def small_net(rows=8, cols=8, channels=(2, 3), p=0.4, seed=0):
    torch.manual_seed(seed)
    return Network(NetworkConfig(rows, cols, channels, 3, p)).double()


# ---------------------------------------------------------------- sequences

def test_build_sequences_small_example():
    data = np.arange(8, dtype=float)[:, None, None] * np.ones((8, 2, 2))
    s = build_sequences(data, 1, 2)
    assert [x.origin for x in s] == [0, 1, 2, 3, 4]
    assert s[0].input_index == [0, 1] and s[0].target_index == [2, 3]
    np.testing.assert_array_equal(s[0].inputs[:, 0, 0], [0, 1])
    np.testing.assert_array_equal(s[0].targets[:, 0, 0], [2, 3])


def test_build_sequences_exact_length_unit_stride():
    assert len(build_sequences(np.zeros((6, 1, 1)), 1, 3)) == 1


def test_build_sequences_exact_length_wider_stride():
    # with stride > 1 every origin below the stride still fits
    s = build_sequences(np.zeros((12, 1, 1)), 3, 2)
    assert [x.origin for x in s] == [0, 1, 2]


def test_effective_horizon_sixty():
    s = build_sequences(np.zeros((120, 1, 1)), 4, 15)[0]
    assert s.target_index[-1] - s.input_index[-1] == 60
    assert s.target_index[0] - s.input_index[0] == 60


def test_build_sequences_errors():
    with pytest.raises(SequenceError):
        build_sequences(np.zeros((7, 1, 1)), 1, 4)
    with pytest.raises(SequenceError):
        build_sequences(np.zeros((10, 1, 1)), 0, 1)
    with pytest.raises(SequenceError):
        build_sequences(np.zeros((10, 1, 1)), 1, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 20))
def test_sequence_invariants(stride, alpha, extra):
    T = 2 * alpha * stride + extra
    samples = build_sequences(np.arange(T, dtype=float)[:, None, None], stride, alpha)
    assert len(samples) == T - (2 * alpha - 1) * stride
    for s in samples:
        ii, ti = s.input_index, s.target_index
        assert len(ii) == len(ti) == alpha
        assert np.all(np.diff(ii + ti) == stride)
        assert ti[0] == ii[-1] + stride
        assert 0 <= ii[0] and ti[-1] < T
        np.testing.assert_array_equal(s.inputs[:, 0, 0], ii)
        np.testing.assert_array_equal(s.targets[:, 0, 0], ti)


def test_origin_step_thins():
    s = build_sequences(np.zeros((20, 1, 1)), 1, 2, origin_step=5)
    assert [x.origin for x in s] == [0, 5, 10, 15]


def test_normalize_constant_dataset(caplog):
    with caplog.at_level(logging.WARNING):
        st_ = compute_stats(np.full((3, 2, 2), 7.0))
    assert st_ == NormStats(7.0, 1.0)
    assert "zero-variance" in caplog.text
    np.testing.assert_array_equal(normalize(np.full((2, 2), 9.0), st_), 2.0)


def test_normalize_roundtrip():
    rng = np.random.default_rng(0)
    maps = rng.uniform(50, 300, (5, 4, 4))
    s = compute_stats(maps)
    np.testing.assert_allclose(denormalize(normalize(maps, s), s), maps, rtol=0, atol=1e-12)
    assert abs(normalize(maps, s).mean()) < 1e-12
    assert normalize(maps, s).std() == pytest.approx(1.0)


def test_normalize_no_leakage():
    rng = np.random.default_rng(1)
    a = rng.normal(100, 10, (50, 3, 3))
    b = rng.normal(150, 10, (50, 3, 3))
    assert normalize(b, compute_stats(a)).mean() > 3


# ---------------------------------------------------------------- ConvLSTM cell

def zero_cell(cell):
    with torch.no_grad():
        for p in cell.parameters():
            p.zero_()
    return cell


def test_cell_zero_fixed_point():
    cell = zero_cell(ConvLstmCell(2, 3, (4, 4)).double())
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    h0, c0 = cell.zero_state(1, x)
    h, c = convlstm_step(cell, x, h0, c0)
    assert torch.all(h == 0) and torch.all(c == 0)


def scalar_lstm(x, h, c, P):
    i = sig(P["xi"] * x + P["hi"] * h + P["ci"] * c + P["bi"])
    f = sig(P["xf"] * x + P["hf"] * h + P["cf"] * c + P["bf"])
    c_new = f * c + i * math.tanh(P["xc"] * x + P["hc"] * h + P["bc"])
    o = sig(P["xo"] * x + P["ho"] * h + P["co"] * c_new + P["bo"])
    return o * math.tanh(c_new), c_new


def test_cell_scalar_oracle():
    rng = np.random.default_rng(5)
    cell = ConvLstmCell(1, 1, (1, 1), kernel=1).double()
    P = {k: float(v) for k, v in zip(["xi", "xf", "xc", "xo", "hi", "hf", "hc", "ho", "ci", "cf", "co",
                                      "bi", "bf", "bc", "bo"], rng.normal(size=15))}
    with torch.no_grad():
        cell.conv_x.weight.view(-1).copy_(torch.tensor([P["xi"], P["xf"], P["xc"], P["xo"]], dtype=torch.float64))
        cell.conv_h.weight.view(-1).copy_(torch.tensor([P["hi"], P["hf"], P["hc"], P["ho"]], dtype=torch.float64))
        cell.conv_x.bias.copy_(torch.tensor([P["bi"], P["bf"], P["bc"], P["bo"]], dtype=torch.float64))
        cell.w_ci.fill_(P["ci"]); cell.w_cf.fill_(P["cf"]); cell.w_co.fill_(P["co"])
    h, c = 0.3, -0.7
    ht = torch.full((1, 1, 1, 1), h, dtype=torch.float64)
    ct = torch.full((1, 1, 1, 1), c, dtype=torch.float64)
    for x in rng.normal(size=6):
        h, c = scalar_lstm(x, h, c, P)
        ht, ct = convlstm_step(cell, torch.full((1, 1, 1, 1), x, dtype=torch.float64), ht, ct)
        assert ht.item() == pytest.approx(h, abs=1e-14)
        assert ct.item() == pytest.approx(c, abs=1e-14)


def test_forget_gate_saturation():
    cell = zero_cell(ConvLstmCell(1, 2, (3, 3)).double())
    with torch.no_grad():
        cell.conv_x.bias[2:4] = 60.0
    c_prev = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    h, c = convlstm_step(cell, torch.zeros(1, 1, 3, 3, dtype=torch.float64),
                         torch.zeros(1, 2, 3, 3, dtype=torch.float64), c_prev)
    torch.testing.assert_close(c, c_prev, rtol=0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_gate_ranges(seed, scale):
    torch.manual_seed(seed)
    cell = ConvLstmCell(2, 3, (5, 5)).double()
    x = scale * torch.randn(2, 2, 5, 5, dtype=torch.float64)
    h0 = torch.rand(2, 3, 5, 5, dtype=torch.float64) * 2 - 1
    c0 = scale * torch.randn(2, 3, 5, 5, dtype=torch.float64)
    h, c, g = convlstm_step(cell, x, h0, c0, return_gates=True)
    for name in "ifo":
        assert torch.all((g[name] >= 0) & (g[name] <= 1))
    assert torch.all(h.abs() <= 1)
    # strict bounds hold away from float saturation
    if scale <= 1.0:
        assert torch.all((g["i"] > 0) & (g["i"] < 1)) and torch.all(h.abs() < 1)


def test_cell_shape_errors():
    cell = ConvLstmCell(2, 3, (4, 4))
    with pytest.raises(ShapeError):
        convlstm_step(cell, torch.zeros(1, 1, 4, 4), *cell.zero_state(1, torch.zeros(1)))
    with pytest.raises(ShapeError):
        convlstm_step(cell, torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 4), torch.zeros(1, 2, 4, 4))
    with pytest.raises(ShapeError):
        ConvLstmCell(1, 1, (4, 4), kernel=2)


def test_cell_initialization():
    torch.manual_seed(0)
    cell = ConvLstmCell(3, 4, (6, 6))
    b = cell.conv_x.bias.detach()
    assert torch.all(b[4:8] == 1.0)
    bound = math.sqrt(1 / (3 * 9))
    assert cell.conv_x.weight.abs().max() <= bound
    assert cell.conv_h.weight.abs().max() <= math.sqrt(1 / (4 * 9))
    assert tuple(cell.w_ci.shape) == (4, 6, 6)


# ---------------------------------------------------------------- network

def test_forward_deterministic():
    net = small_net()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    torch.testing.assert_close(net(x), net(x), rtol=0, atol=0)


@pytest.mark.parametrize("size", [16, 32, 64])
def test_forward_shape_contract(size):
    torch.manual_seed(0)
    net = Network(NetworkConfig(size, size))
    y = net(torch.randn(1, 3, size, size))
    assert tuple(y.shape) == (1, 3, size, size)
    assert tuple(net(torch.randn(1, 3, size, size), horizon=5).shape) == (1, 5, size, size)


def test_forward_dimension_errors():
    with pytest.raises(ShapeError):
        Network(NetworkConfig(15, 16))
    net = small_net()
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 2, 9, 8, dtype=torch.float64))
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 2, 16, 16, dtype=torch.float64))


def test_forward_zero_input_matches_layer_trace():
    net = small_net(seed=3)
    x = np.zeros((4, 8, 8))
    got = net(torch.as_tensor(x)[None]).detach().numpy()[0]
    want = np_forward(net, x)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    assert np.any(np.abs(want) > 1e-3)  # biases actually drive the output


def test_forward_random_input_matches_layer_trace():
    net = small_net(seed=4)
    x = np.random.default_rng(0).normal(size=(3, 8, 8))
    got = net(torch.as_tensor(x)[None], horizon=5).detach().numpy()[0]
    np.testing.assert_allclose(got, np_forward(net, x, horizon=5), rtol=0, atol=1e-12)


def test_forward_with_masks_matches_layer_trace():
    net = small_net(seed=5)
    x = np.random.default_rng(1).normal(size=(3, 8, 8))
    masks = draw_masks(net, [np.random.default_rng(7)], 0.4, like=torch.zeros(1, dtype=torch.float64))
    got = net(torch.as_tensor(x)[None], masks).detach().numpy()[0]
    want = np_forward(net, x, masks={k: v[0].numpy() for k, v in masks.items()})
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_masks_keep_rate_and_scale():
    net = small_net(channels=(8, 16))
    rngs = [np.random.default_rng(i) for i in range(2000)]
    masks = draw_masks(net, rngs, 0.4, like=torch.zeros(1, dtype=torch.float64))
    allv = torch.cat([m.ravel() for m in masks.values()])
    np.testing.assert_allclose(np.unique(allv.numpy()), [0.0, 1 / 0.6], rtol=1e-15)
    assert float((allv > 0).double().mean()) == pytest.approx(0.6, abs=0.01)
    assert draw_masks(net, rngs, 0.0) is None


# ---------------------------------------------------------------- MC dropout

def test_mc_p_zero_gives_zero_variance():
    net = small_net()
    r = mc_predict(net, np.random.default_rng(0).normal(100, 5, (3, 8, 8)), K=20, p=0.0, keep_samples=True)
    assert np.all(r.variances == 0)
    assert np.all(r.samples == r.samples[0])


def test_mc_single_sample():
    net = small_net()
    x = np.random.default_rng(0).normal(size=(3, 8, 8))
    r = mc_predict(net, x, K=1, p=0.4, keep_samples=True)
    assert np.all(r.variances == 0)
    np.testing.assert_array_equal(r.means, r.samples[0])


def test_mc_recomputation_oracle():
    net = small_net(channels=(4, 4))
    net.stats = NormStats(120.0, 15.0)
    x = np.random.default_rng(2).normal(120, 15, (3, 8, 8))
    r = mc_predict(net, x, K=500, p=0.4, seed=11, keep_samples=True)
    S = r.samples
    mean = np.zeros(S.shape[1:])
    for k in range(S.shape[0]):
        mean += S[k]
    mean /= S.shape[0]
    var = np.zeros(S.shape[1:])
    for k in range(S.shape[0]):
        var += (S[k] - mean) ** 2
    var /= S.shape[0]
    np.testing.assert_allclose(r.means, mean, rtol=0, atol=1e-12)
    np.testing.assert_allclose(r.variances, var, rtol=0, atol=1e-12)
    np.testing.assert_allclose(r.variances, S.var(axis=0), rtol=0, atol=1e-12)
    assert r.variances.min() >= 0 and r.variances.max() > 0
    assert r.means.shape == (3, 8, 8)


def test_mc_batching_matches_sequential():
    net = small_net()
    x = np.random.default_rng(3).normal(size=(3, 8, 8))
    a = mc_predict(net, x, K=13, p=0.4, seed=5, batch=64, keep_samples=True)
    b = mc_predict(net, x, K=13, p=0.4, seed=5, batch=1, keep_samples=True)
    np.testing.assert_allclose(a.samples, b.samples, rtol=0, atol=1e-13)


def test_mc_variance_order_invariant():
    net = small_net()
    r = mc_predict(net, np.random.default_rng(4).normal(size=(2, 8, 8)), K=40, p=0.4, keep_samples=True)
    perm = np.random.default_rng(0).permutation(40)
    _, v2 = population_moments(r.samples[perm])
    np.testing.assert_allclose(v2, r.variances, rtol=1e-12, atol=1e-15)


def test_mc_denormalizes_to_mm():
    net = small_net()
    net.stats = NormStats(100.0, 10.0)
    x = np.full((2, 8, 8), 100.0)
    r = mc_predict(net, x, K=3, p=0.0)
    raw = net(torch.zeros(1, 2, 8, 8, dtype=torch.float64)).detach().numpy()[0]
    np.testing.assert_allclose(r.means, raw * 10 + 100, rtol=1e-12)


def test_write_prediction(tmp_path):
    net = small_net()
    r = mc_predict(net, np.zeros((2, 8, 8)), K=4, p=0.4, seed=9)
    write_prediction(r, tmp_path)
    np.testing.assert_array_equal(read_sequence(tmp_path, "mean"), r.means)
    np.testing.assert_array_equal(read_sequence(tmp_path, "var"), r.variances)
    man = read_manifest(tmp_path / "manifest.txt")
    assert man["K"] == "4" and float(man["p"]) == 0.4 and man["seed"] == "9" and man["variance"] == "population"


# ---------------------------------------------------------------- training

def growing_sequence(alpha=3, size=8):
    yy, xx = np.mgrid[0:size, 0:size]
    base = 80 + 3 * xx + 2 * yy
    maps = np.stack([base + 5.0 * t for t in range(2 * alpha)])
    return SequenceSample(maps[:alpha], maps[alpha:], 1, 0)


def test_training_loss_decreases_on_constant_sample():
    s = SequenceSample(np.full((2, 8, 8), 50.0), np.full((2, 8, 8), 50.0), 1, 0)
    net = Network(NetworkConfig(8, 8, (2, 2), 3, 0.0)).double()
    torch.manual_seed(0)
    res = train(net, [s], [s], TrainConfig(lr=0.05, momentum=0.0, batch_size=1, max_epochs=200, patience=200))
    tl = np.array(res.train_loss)
    assert np.all(np.diff(tl) <= 0)
    assert evaluate_loss(net, torch.zeros(1, 2, 8, 8, dtype=torch.float64),
                         torch.zeros(1, 2, 8, 8, dtype=torch.float64)) <= 1e-3 * tl[0]


def test_lr_zero_leaves_parameters_and_stops_after_patience():
    s = growing_sequence()
    net = small_net(p=0.0)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    res = train(net, [s], [s], TrainConfig(lr=0.0, max_epochs=100, patience=10))
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])
    assert res.epochs == 11
    assert res.stopped_early and res.best_epoch == 0


def test_training_divergence_raises():
    s = growing_sequence()
    net = small_net(p=0.0)
    with pytest.raises(TrainingDivergedError):
        train(net, [s], [s], TrainConfig(lr=1e30, momentum=0.9, max_epochs=50))


def test_training_requires_samples():
    with pytest.raises(SequenceError):
        train(small_net(), [], [growing_sequence()])


def test_training_restores_best_parameters():
    s = growing_sequence()
    net = small_net(p=0.0)
    res = train(net, [s], [s], TrainConfig(lr=0.02, max_epochs=30, patience=30))
    assert res.best_epoch == int(np.argmin(res.val_loss))
    xs = torch.as_tensor(normalize(s.inputs, net.stats))[None]
    ys = torch.as_tensor(normalize(s.targets, net.stats))[None]
    assert evaluate_loss(net, xs, ys) == pytest.approx(min(res.val_loss), rel=1e-12)


def test_training_stats_from_training_split_only():
    a = growing_sequence()
    b = SequenceSample(a.inputs + 1000, a.targets + 1000, 1, 0)
    net = small_net(p=0.0)
    train(net, [a], [b], TrainConfig(lr=0.0, max_epochs=1))
    assert net.stats.mean == pytest.approx(np.concatenate([a.inputs, a.targets]).mean())


# ---------------------------------------------------------------- model file

def test_model_roundtrip(tmp_path):
    net = small_net()
    net.stats = NormStats(101.5, 7.25)
    save_model(net, tmp_path / "m.pstl")
    back = load_model(tmp_path / "m.pstl")
    assert back.config == net.config and back.stats == net.stats
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    torch.testing.assert_close(back(x), net(x), rtol=0, atol=0)
    raw = (tmp_path / "m.pstl").read_bytes()
    assert raw[:5] == b"PSTL1"
    n_params = count_parameters(net)
    assert raw.endswith(np.concatenate([v.numpy().ravel() for v in net.state_dict().values()]).astype("<f8").tobytes())
    assert len(raw) >= 8 * n_params


def test_model_bad_files(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE1" + b"\0" * 10)
    with pytest.raises(ModelFormatError):
        load_model(p)
    net = small_net()
    save_model(net, tmp_path / "m")
    raw = (tmp_path / "m").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-8])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "t")


# ---------------------------------------------------------------- gradients

def test_gradient_check_miniature():
    torch.manual_seed(0)
    net = Network(NetworkConfig(8, 8, (1, 2), 3, 0.0)).double()
    assert count_parameters(net) <= 2000
    rng = np.random.default_rng(0)
    x = torch.as_tensor(rng.normal(size=(1, 2, 8, 8)))
    y = torch.as_tensor(rng.normal(size=(1, 2, 8, 8)))
    rep = check_gradients(net, lambda: torch.mean((net(x) - y) ** 2))
    assert rep.pass_fraction >= 0.99
    assert np.max(np.abs(rep.analytic - rep.numeric)) < 1e-9


def test_relative_error_floor():
    a = np.array([1.0, 1e-9, 0.0])
    b = np.array([1.0 + 1e-5, 2e-9, 0.0])
    np.testing.assert_allclose(relative_error(a, b), [1e-5 / (1 + 1e-5), 0.5, 0.0])
    np.testing.assert_allclose(relative_error(a, b, 1e-6)[1], 1e-3)
    assert resolvable_floor(2.0, 1e-5, 1e-4) == pytest.approx(2 * np.finfo(float).eps / 1e-9)
