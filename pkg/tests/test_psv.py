"""PSV assembly: pooling arithmetic, causality, monotone history, offsets."""

import numpy as np
import pytest
import torch

from psvec.code_encoder import CodeEncoderConfig, CodeSetEncoder
from psvec.psv import (
    PSVModel,
    assemble_psv,
    build_psv_batch,
    pool_signal_history,
    visit_code_steps,
    visit_series,
)
from psvec.records import VitalSample
from psvec.signal_ae import SignalAEConfig, SignalAutoencoder

from conftest import make_record, make_stay

N_CH = 2
VOCABS = {"diagnosis": 12, "medication": 10, "treatment": 8}
W = 6  # small window keeps fixtures readable


def tiny_model(seed=0, d_code=16):
    torch.manual_seed(seed)
    encoders = {
        m: CodeSetEncoder(CodeEncoderConfig(vocab_size=v, n_head=2, d_head=4, d_code=d_code,
                                            n_layers=1, max_sequence_length=128))
        for m, v in VOCABS.items()
    }
    signal = SignalAutoencoder(SignalAEConfig(n_channels=N_CH, window=W, enc_hidden=8))
    return PSVModel(encoders, signal).eval()


def hourly_vitals(rng, hours, n_ch=N_CH, missing=0.2):
    out = []
    for h in range(hours):
        mask = (rng.random(n_ch) >= missing).astype(np.int8)
        out.append(VitalSample(time=h, values=rng.normal(size=n_ch) * mask, mask=mask))
    return out


def sample_record(rng, visit_id="v0", hours=14, offset=0, codes=None):
    stay = make_stay(
        f"{visit_id}-0", offset=offset, duration=float(hours),
        codes=codes or {
            "diagnosis": [(1, 3), (1, 5), (4, 2)],
            "medication": [(0, 1), (7, 4)],
            "treatment": [(2, 6)],
        },
        vitals=hourly_vitals(rng, hours),
    )
    return make_record(visit_id, [stay])


class TestPooling:
    def test_singleton(self):
        h = torch.tensor([[1.0, -2.0, 3.0]])
        pooled = pool_signal_history(h)
        assert torch.equal(pooled, torch.tensor([1.0, -2.0, 3.0] * 3))

    def test_two_vector_arithmetic(self):
        hs = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
        pooled = pool_signal_history(hs)
        assert torch.equal(pooled[:2], torch.tensor([0.0, 2.0]))      # last
        assert torch.equal(pooled[2:4], torch.tensor([1.0, 2.0]))     # max
        assert torch.equal(pooled[4:], torch.tensor([0.5, 1.0]))      # mean

    def test_max_dominates_mean(self, rng):
        hs = torch.tensor(rng.normal(size=(5, 7)))
        pooled = pool_signal_history(hs)
        assert bool((pooled[7:14] >= pooled[14:] - 1e-12).all())

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            pool_signal_history(torch.zeros(0, 4))


class TestVisitSeries:
    def test_stays_placed_at_offsets(self, rng):
        stay_a = make_stay("a", offset=0, duration=3.0, vitals=hourly_vitals(rng, 3))
        stay_b = make_stay("b", offset=5, duration=2.0, vitals=hourly_vitals(rng, 2, missing=0.0))
        rec = make_record("v0", [stay_a, stay_b])
        values, mask = visit_series(rec, N_CH)
        assert values.shape == (7, N_CH)
        assert np.all(mask[3:5] == 0)            # gap between stays
        assert np.all(mask[5:7] == 1)

    def test_code_steps_group_and_truncate(self):
        rec = sample_record(np.random.default_rng(0))
        steps = visit_code_steps(rec, "diagnosis", t=3)
        assert steps == [(1, [3, 5])]
        steps_all = visit_code_steps(rec, "diagnosis", t=100)
        assert steps_all == [(1, [3, 5]), (4, [2])]

    def test_code_steps_use_absolute_hours(self):
        stay = make_stay("a", offset=10, duration=4.0, codes={"diagnosis": [(2, 1)]})
        rec = make_record("v0", [stay])
        assert visit_code_steps(rec, "diagnosis", t=100) == [(12, [1])]
        assert visit_code_steps(rec, "diagnosis", t=11) == []


class TestAssemble:
    def test_width_and_offsets(self, rng):
        model = tiny_model()
        rec = sample_record(rng)
        psv = assemble_psv(rec, 12, model, N_CH, VOCABS, W)
        d, sig = 16, 16  # d_code, summary width
        assert psv.vector.shape == (3 * d + 3 * sig + 5,)
        offsets = psv.offsets
        assert offsets["code_diagnosis"] == (0, d)
        assert offsets["signal"] == (3 * d, 3 * d + 3 * sig)
        assert offsets["demographics"][1] == psv.vector.shape[0]

    def test_offsets_roundtrip(self, rng):
        model = tiny_model()
        rec = sample_record(rng)
        psv = assemble_psv(rec, 12, model, N_CH, VOCABS, W)
        pieces = [psv.vector[lo:hi] for lo, hi in psv.offsets.values()]
        assert np.array_equal(np.concatenate(pieces), psv.vector)

    def test_full_scale_width(self, rng):
        model = tiny_model(d_code=256)
        enc = SignalAutoencoder(SignalAEConfig(n_channels=N_CH, window=W, enc_hidden=128))
        model = PSVModel(model.code_encoders, enc).eval()
        rec = sample_record(rng)
        psv = assemble_psv(rec, 6, model, N_CH, VOCABS, W)
        assert psv.vector.shape == (3 * 256 + 3 * 256 + 5,)  # 1541

    def test_determinism(self, rng):
        model = tiny_model()
        rec = sample_record(rng)
        a = assemble_psv(rec, 10, model, N_CH, VOCABS, W)
        b = assemble_psv(rec, 10, model, N_CH, VOCABS, W)
        assert np.array_equal(a.vector, b.vector)

    def test_causality_under_future_perturbation(self, rng):
        model = tiny_model(seed=3)
        t = 8
        for trial in range(20):
            rec = sample_record(rng, hours=14)
            base = assemble_psv(rec, t, model, N_CH, VOCABS, W)

            # perturb strictly-future data: codes after t, vitals at bins >= t
            rec.stays[0].codes["diagnosis"].append((t + 1 + trial % 3, int(rng.integers(0, 12))))
            rec.stays[0].codes["medication"].append((t + 2, int(rng.integers(0, 10))))
            for sample in rec.stays[0].vitals:
                if sample.time >= t:
                    sample.values = sample.values + rng.normal(size=N_CH) * 10
                    sample.mask = 1 - sample.mask
            after = assemble_psv(rec, t, model, N_CH, VOCABS, W)
            assert np.array_equal(base.vector, after.vector)

    def test_no_events_before_t_uses_no_event_path(self, rng):
        model = tiny_model()
        rec = sample_record(rng, codes={"diagnosis": [(9, 1)], "medication": [], "treatment": []})
        psv = assemble_psv(rec, 0, model, N_CH, VOCABS, W)
        assert psv.empty_signal_history is True
        assert np.array_equal(psv.vector[psv.offsets["signal"][0]:psv.offsets["signal"][1]],
                              np.zeros(3 * 16))

    def test_monotone_history(self, rng):
        model = tiny_model(seed=5)
        rec = sample_record(rng, hours=3 * W)
        values, mask = visit_series(rec, N_CH)

        def summaries(upto):
            from psvec.preprocess import window_signals
            wins = window_signals(values[:upto], mask[:upto], W)
            v = torch.as_tensor(np.stack([w.values for w in wins]), dtype=torch.float32)
            m = torch.as_tensor(np.stack([w.mask for w in wins]), dtype=torch.float32)
            with torch.no_grad():
                return model.signal_ae.encode_window(v, m)

        sig_lo, sig_hi = 3 * 16, 3 * 16 + 3 * 16
        for k in (1, 2, 3):
            psv = assemble_psv(rec, k * W, model, N_CH, VOCABS, W)
            e_s = torch.as_tensor(psv.vector[sig_lo:sig_hi], dtype=torch.float32)
            hs = summaries(k * W)
            assert hs.shape[0] == k
            assert torch.allclose(e_s[:16], hs[-1], atol=1e-6)                  # last replaced
            assert torch.allclose(e_s[16:32], hs.max(dim=0).values, atol=1e-6)  # max over history
            assert torch.allclose(e_s[32:], hs.mean(dim=0), atol=1e-6)          # running mean
        # elementwise max never decreases as history grows
        m1 = summaries(W).max(dim=0).values
        m2 = summaries(2 * W).max(dim=0).values
        assert bool((m2 >= m1 - 1e-12).all())

    def test_trailing_partial_window_included(self, rng):
        model = tiny_model()
        rec = sample_record(rng, hours=W + 3)
        psv_full = assemble_psv(rec, W, model, N_CH, VOCABS, W)
        psv_partial = assemble_psv(rec, W + 2, model, N_CH, VOCABS, W)
        sig = slice(3 * 16, 3 * 16 + 3 * 16)
        assert not np.array_equal(psv_full.vector[sig], psv_partial.vector[sig])


def test_batch_vs_single_consistency(rng):
    """Batched forward equals per-record assembly."""
    model = tiny_model(seed=9)
    recs = [sample_record(rng, visit_id=f"v{i}", hours=10 + i) for i in range(3)]
    batch = build_psv_batch([(r, 8) for r in recs], N_CH, VOCABS, W, 128)
    with torch.no_grad():
        stacked = model(batch).numpy()
    for i, rec in enumerate(recs):
        single = assemble_psv(rec, 8, model, N_CH, VOCABS, W)
        assert np.allclose(stacked[i], single.vector, atol=1e-6)
