"""Signal autoencoder: masked loss values and gradient, GRU cell numerics,
window independence, schedules, and the overfit smoke test."""

import math
import time

import numpy as np
import pytest
import torch

from psvec.preprocess import VitalWindow
from psvec.signal_ae import (
    SignalAEConfig,
    SignalAutoencoder,
    SignalTrainConfig,
    masked_mse,
    train_signal_autoencoder,
    windows_to_tensors,
)
from psvec.errors import ConfigError
from psvec.training import step_lr

CFG = SignalAEConfig(n_channels=3, window=24, enc_hidden=16)


def random_windows(rng, n, w=24, n_ch=3, missing=0.3):
    out = []
    for _ in range(n):
        values = rng.normal(size=(w, n_ch))
        mask = (rng.random((w, n_ch)) >= missing).astype(np.int8)
        out.append(VitalWindow(values=values * mask, mask=mask, start=0))
    return out


def smooth_windows(rng, n, w=24, n_ch=3, missing=0.3, noise=0.02):
    """Structured windows (sinusoid family with offsets and mild noise), the
    kind of compressible series the autoencoder is built for."""
    out = []
    for _ in range(n):
        t = np.arange(w)
        values = np.stack(
            [
                rng.uniform(0.5, 2.0)
                * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t / w + rng.uniform(0, 2 * np.pi))
                + rng.normal(0, 0.3)
                + rng.normal(0, noise, w)
                for _ in range(n_ch)
            ],
            axis=1,
        )
        mask = (rng.random((w, n_ch)) >= missing).astype(np.int8)
        out.append(VitalWindow(values=values * mask, mask=mask, start=0))
    return out


class TestMaskedMSE:
    def test_all_masked_is_zero(self):
        s = torch.randn(4, 2)
        s_hat = torch.randn(4, 2)
        assert masked_mse(s, s_hat, torch.zeros(4, 2)).item() == 0.0

    def test_perfect_reconstruction_is_zero(self):
        s = torch.randn(4, 2)
        assert masked_mse(s, s.clone(), torch.ones(4, 2)).item() == 0.0

    def test_single_observed_entry(self):
        s = torch.tensor([[1.0, 2.0]])
        s_hat = torch.tensor([[0.0, 0.0]])
        m = torch.tensor([[1.0, 0.0]])
        assert masked_mse(s, s_hat, m).item() == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch_fatal(self):
        with pytest.raises(ValueError):
            masked_mse(torch.zeros(2, 2), torch.zeros(2, 3), torch.zeros(2, 2))

    def test_gradient_closed_form_and_finite_differences(self, rng):
        for _ in range(20):
            w, n_ch = int(rng.integers(2, 6)), int(rng.integers(1, 4))
            s = torch.tensor(rng.normal(size=(w, n_ch)), dtype=torch.float64)
            m = torch.tensor((rng.random((w, n_ch)) < 0.6).astype(float), dtype=torch.float64)
            s_hat = torch.tensor(rng.normal(size=(w, n_ch)), dtype=torch.float64, requires_grad=True)
            loss = masked_mse(s, s_hat, m)
            loss.backward()
            analytic = s_hat.grad.clone()

            closed_form = 2.0 * m * (s_hat.detach() - s) / max(1.0, m.sum().item())
            assert torch.allclose(analytic, closed_form, atol=1e-12)

            x = s_hat.detach().clone()
            numeric = torch.zeros_like(x)
            h = 1e-5
            flat, nflat = x.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                hi = masked_mse(s, x, m).item()
                flat[i] = orig - h
                lo = masked_mse(s, x, m).item()
                flat[i] = orig
                nflat[i] = (hi - lo) / (2 * h)
            denom = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-8)
            assert (analytic - numeric).abs().max().item() / denom < 1e-4

    def test_mask_zero_insensitivity(self, rng):
        w, n_ch = 6, 3
        s = torch.tensor(rng.normal(size=(w, n_ch)), dtype=torch.float64)
        m = torch.tensor((rng.random((w, n_ch)) < 0.5).astype(float), dtype=torch.float64)
        s_hat = torch.tensor(rng.normal(size=(w, n_ch)), dtype=torch.float64, requires_grad=True)
        loss_a = masked_mse(s, s_hat, m)
        grad_a = torch.autograd.grad(loss_a, s_hat)[0]

        corrupted = s + torch.tensor(rng.normal(size=(w, n_ch)) * 100) * (1 - m)
        loss_b = masked_mse(corrupted, s_hat, m)
        grad_b = torch.autograd.grad(loss_b, s_hat)[0]
        assert loss_a.item() == loss_b.item()
        assert torch.equal(grad_a, grad_b)


class TestEncoderDecoder:
    def test_config_requires_matching_decoder(self):
        with pytest.raises(ConfigError):
            SignalAEConfig(n_channels=2, enc_hidden=16, dec_hidden=100)

    def test_zero_input_deterministic(self):
        torch.manual_seed(0)
        model = SignalAutoencoder(CFG).eval()
        v = torch.zeros(1, CFG.window, CFG.n_channels)
        m = torch.zeros(1, CFG.window, CFG.n_channels)
        with torch.no_grad():
            a = model.encode_window(v, m)
            b = model.encode_window(v, m)
        assert torch.equal(a, b)
        assert a.shape == (1, CFG.summary_dim)

    def test_distinct_windows_distinct_summaries(self, rng):
        torch.manual_seed(1)
        model = SignalAutoencoder(CFG).eval()
        wins = random_windows(rng, 2)
        v, m = windows_to_tensors(wins)
        with torch.no_grad():
            summaries = model.encode_window(v, m)
        assert not torch.equal(summaries[0], summaries[1])

    def test_constant_window_time_reversal(self):
        torch.manual_seed(2)
        model = SignalAutoencoder(CFG).eval()
        v = torch.full((1, CFG.window, CFG.n_channels), 0.7)
        m = torch.ones(1, CFG.window, CFG.n_channels)
        with torch.no_grad():
            fwd = model.encode_window(v, m)
            rev = model.encode_window(torch.flip(v, dims=[1]), torch.flip(m, dims=[1]))
        assert torch.equal(fwd, rev)

    def test_decode_shape_and_determinism(self):
        torch.manual_seed(3)
        model = SignalAutoencoder(CFG).eval()
        summary = torch.randn(2, CFG.summary_dim)
        with torch.no_grad():
            a = model.decode_window(summary)
            b = model.decode_window(summary)
        assert a.shape == (2, CFG.window, CFG.n_channels)
        assert torch.equal(a, b)

    def test_window_independence(self, rng):
        torch.manual_seed(4)
        model = SignalAutoencoder(CFG).eval()
        wins = random_windows(rng, 3)
        v, m = windows_to_tensors(wins)
        v2 = v.clone()
        v2[2] += 5.0
        with torch.no_grad():
            a = model.encode_window(v, m)
            b = model.encode_window(v2, m)
        assert torch.equal(a[0], b[0])
        assert torch.equal(a[1], b[1])

    def test_single_window_overfit(self, rng):
        wins = smooth_windows(rng, 1)
        cfg = SignalAEConfig(n_channels=3, window=24, enc_hidden=16)
        model, _ = train_signal_autoencoder(
            wins, cfg, SignalTrainConfig(epochs=300, batch_size=1, decay_interval=300, seed=0)
        )
        v, m = windows_to_tensors(wins)
        with torch.no_grad():
            recon = model(v, m)
        assert masked_mse(v, recon, m).item() < 1e-3


def test_step_schedule_values():
    assert step_lr(49, 1e-3, 50) == pytest.approx(1e-3)
    assert step_lr(50, 1e-3, 50) == pytest.approx(1e-4)
    assert step_lr(100, 1e-3, 50) == pytest.approx(1e-5)


def test_gru_cell_matches_hand_computation():
    """One gated-recurrent step on a 2-dim toy with pinned weights."""
    torch.manual_seed(0)
    cell = torch.nn.GRUCell(2, 2)
    with torch.no_grad():
        cell.weight_ih.copy_(torch.arange(1, 13, dtype=torch.float32).reshape(6, 2) / 10.0)
        cell.weight_hh.copy_(torch.arange(12, 0, -1, dtype=torch.float32).reshape(6, 2) / 20.0)
        cell.bias_ih.copy_(torch.full((6,), 0.05))
        cell.bias_hh.copy_(torch.full((6,), -0.05))
    x = torch.tensor([[0.3, -0.4]])
    h = torch.tensor([[0.1, 0.2]])
    with torch.no_grad():
        got = cell(x, h)[0]

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    w_ih = (np.arange(1, 13).reshape(6, 2) / 10.0)
    w_hh = (np.arange(12, 0, -1).reshape(6, 2) / 20.0)
    b_ih = np.full(6, 0.05)
    b_hh = np.full(6, -0.05)
    xv = np.array([0.3, -0.4])
    hv = np.array([0.1, 0.2])
    gi = w_ih @ xv + b_ih
    gh = w_hh @ hv + b_hh
    expected = np.zeros(2)
    for d in range(2):
        r = sigmoid(gi[d] + gh[d])
        z = sigmoid(gi[2 + d] + gh[2 + d])
        n = math.tanh(gi[4 + d] + r * gh[4 + d])
        expected[d] = (1 - z) * n + z * hv[d]
    assert np.allclose(got.numpy(), expected, atol=1e-6)


@pytest.fixture(scope="module")
def trained_16():
    rng = np.random.default_rng(40)
    wins = smooth_windows(rng, 16)
    cfg = SignalAEConfig(n_channels=3, window=24, enc_hidden=32)
    # smoke-test optimizer: small batches so 100 epochs give enough updates
    t0 = time.time()
    model, log = train_signal_autoencoder(
        wins, cfg, SignalTrainConfig(epochs=100, batch_size=1, lr=3e-3, seed=0)
    )
    return wins, cfg, model, log, time.time() - t0


def test_overfit_16_windows(trained_16):
    wins, cfg, model, log, elapsed = trained_16
    v, m = windows_to_tensors(wins)
    with torch.no_grad():
        recon = model(v, m)
    assert masked_mse(v, recon, m).item() < 0.01
    assert elapsed < 300


def test_corrupting_masked_raw_values_leaves_training_identical(rng):
    """Values at mask=0 bins are overwritten by imputation before they can
    reach the model, so changing them upstream changes nothing downstream."""
    from psvec.preprocess import apply_normalizer, fit_normalizer, impute, stay_series, window_signals
    from psvec.records import VitalSample
    from conftest import make_record, make_stay

    def build(corrupt):
        records = []
        gen = np.random.default_rng(5)
        for i in range(4):
            vitals = []
            for h in range(24):
                mask = (gen.random(3) < 0.7).astype(np.int8)
                values = gen.normal(5.0, 2.0, 3) * mask
                if corrupt:
                    values = values + 1234.5 * (1 - mask)
                vitals.append(VitalSample(time=h, values=values, mask=mask))
            records.append(make_record(f"v{i}", [make_stay(f"v{i}-0", duration=24.0, vitals=vitals)]))
        stats = fit_normalizer(records, ["a", "b", "c"])
        records = apply_normalizer(records, stats)
        records = [impute(r, stats) for r in records]
        wins = []
        for rec in records:
            v, m = stay_series(rec.stays[0], 3)
            wins.extend(window_signals(v, m, 24))
        return wins

    cfg = SignalAEConfig(n_channels=3, window=24, enc_hidden=8)
    _, log_a = train_signal_autoencoder(build(False), cfg, SignalTrainConfig(epochs=3, seed=2))
    _, log_b = train_signal_autoencoder(build(True), cfg, SignalTrainConfig(epochs=3, seed=2))
    assert [r["loss"] for r in log_a] == [r["loss"] for r in log_b]
