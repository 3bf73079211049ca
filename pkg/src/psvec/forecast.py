"""Joint forecasting fine-tune: predict next-window codes and vitals from
the PSV, with gradual unfreezing of the pretrained blocks.

The code head scores the union vocabulary (all three modalities) with a
softmax; its term is the mean negative log-probability of every code
occurring within the next window.  The signal head decodes the next window
with the pretrained GRU decoder, started from a projection of the code and
signal representations, under the masked reconstruction error.  The two
terms are weighted half and half.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .psv import PSVBatch, PSVModel, build_psv_batch, visit_series
from .records import PatientRecord
from .training import batch_indices, check_finite, set_lr
from .util import MODALITIES, hash_state_dict

logger = logging.getLogger(__name__)


def filter_multistay(records: list[PatientRecord]) -> list[PatientRecord]:
    """Keep hospital visits with at least two ICU stays."""
    kept = [r for r in records if len(r.stays) >= 2]
    if not kept:
        raise DataError(
            f"no multi-stay visits among {len(records)} records; forecasting needs >= 2 stays per visit"
        )
    return kept


def union_vocab_offsets(vocab_sizes: dict[str, int]) -> dict[str, int]:
    offsets = {}
    pos = 0
    for m in MODALITIES:
        offsets[m] = pos
        pos += vocab_sizes[m]
    return offsets


@dataclass
class ForecastSample:
    record: PatientRecord
    t: int
    code_targets: list[int]         # union-vocabulary ids in (t, t+w]
    target_values: np.ndarray       # (w, |S|) next window
    target_mask: np.ndarray


def build_forecast_samples(
    records: list[PatientRecord],
    n_channels: int,
    vocab_sizes: dict[str, int],
    window: int,
) -> tuple[list[ForecastSample], int]:
    """Reference times at window boundaries t in {w, 2w, ...}; an element is
    kept when it has future codes or an observed next window, otherwise it
    is skipped and counted."""
    offsets = union_vocab_offsets(vocab_sizes)
    samples = []
    skipped = 0
    for rec in records:
        values, mask = visit_series(rec, n_channels)
        L = values.shape[0]
        for t in range(window, L, window):
            tv = np.zeros((window, n_channels))
            tm = np.zeros((window, n_channels), dtype=np.int8)
            stop = min(t + window, L)
            tv[: stop - t] = values[t:stop]
            tm[: stop - t] = mask[t:stop]
            targets = []
            for m in MODALITIES:
                for stay in rec.stays:
                    for hour, code in stay.codes[m]:
                        abs_hour = stay.offset + hour
                        if t < abs_hour <= t + window:
                            targets.append(offsets[m] + code)
            if not targets and not tm.any():
                skipped += 1
                continue
            samples.append(ForecastSample(rec, t, sorted(targets), tv, tm))
    if skipped:
        logger.info("skipped %d forecast elements with no future codes or window", skipped)
    return samples, skipped


def forecast_code_term(logits: torch.Tensor, target_lists: list[list[int]]) -> torch.Tensor:
    """Mean over examples (with targets) of the mean negative log-probability
    of each target code under the softmax over the union vocabulary."""
    log_probs = F.log_softmax(logits, dim=-1)
    per_example = []
    for b, targets in enumerate(target_lists):
        if not targets:
            continue
        idx = torch.as_tensor(targets, dtype=torch.int64)
        per_example.append(-log_probs[b, idx].mean())
    if not per_example:
        return torch.zeros((), dtype=logits.dtype)
    return torch.stack(per_example).mean()


class ForecastModel(nn.Module):
    """PSV encoders plus the two forecasting heads."""

    def __init__(self, psv_model: PSVModel, vocab_sizes: dict[str, int]):
        super().__init__()
        self.psv = psv_model
        self.vocab_sizes = dict(vocab_sizes)
        self.union_size = sum(vocab_sizes[m] for m in MODALITIES)
        self.code_head = nn.Linear(psv_model.psv_dim, self.union_size)
        feat_dim = 3 * psv_model.d_code + 3 * psv_model.signal_summary_dim
        self.signal_init = nn.Linear(feat_dim, psv_model.signal_ae.cfg.dec_hidden)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "heads": list(self.code_head.parameters()) + list(self.signal_init.parameters()),
            "signal_encoder": list(self.psv.signal_ae.encoder.parameters()),
            "code_encoders": list(self.psv.code_encoders.parameters()),
            "signal_decoder": list(self.psv.signal_ae.decoder.parameters())
            + list(self.psv.signal_ae.head.parameters()),
        }

    def loss_from_features(
        self,
        feats: torch.Tensor,
        z: torch.Tensor,
        target_lists: list[list[int]],
        target_values: torch.Tensor,
        target_mask: torch.Tensor,
    ) -> tuple[torch.Tensor, dict]:
        """Half code term plus half signal term, from the concatenated code
        and signal representations (feats) and demographics (z)."""
        from .signal_ae import masked_mse

        psv_vec = torch.cat([feats, z], dim=-1)
        logits = self.code_head(psv_vec)
        code_term = forecast_code_term(logits, target_lists)

        h0 = self.signal_init(feats)
        recon = self.psv.signal_ae.decode_window(h0)
        signal_term = masked_mse(target_values, recon, target_mask)

        total = 0.5 * code_term + 0.5 * signal_term
        parts = {"code_term": code_term.detach().item(), "signal_term": signal_term.detach().item()}
        return total, parts

    def loss(
        self,
        batch: PSVBatch,
        target_lists: list[list[int]],
        target_values: torch.Tensor,
        target_mask: torch.Tensor,
    ) -> tuple[torch.Tensor, dict]:
        reps = self.psv.code_representations(batch)
        pooled, _ = self.psv.signal_representation(batch)
        feats = torch.cat([reps[m] for m in MODALITIES] + [pooled], dim=-1)
        return self.loss_from_features(feats, batch.z, target_lists, target_values, target_mask)


@dataclass
class UnfreezeSchedule:
    """Cumulative stages of parameter-group names, newest parameters first."""

    stages: list[list[str]] = field(
        default_factory=lambda: [
            ["heads"],
            ["heads", "signal_encoder"],
            ["heads", "signal_encoder", "code_encoders"],
            ["heads", "signal_encoder", "code_encoders", "signal_decoder"],
        ]
    )
    epochs_per_stage: int = 2

    def validate(self, all_groups: set[str]) -> None:
        prev: set[str] = set()
        for stage in self.stages:
            cur = set(stage)
            unknown = cur - all_groups
            if unknown:
                raise ConfigError(f"unknown parameter groups in schedule: {sorted(unknown)}")
            if not prev <= cur:
                raise ConfigError("unfreeze stages must be cumulative")
            prev = cur
        if prev != all_groups:
            missing = all_groups - prev
            raise ConfigError(f"schedule never unfreezes groups: {sorted(missing)}")


@dataclass
class FinetuneConfig:
    batch_size: int = 64
    lr: float = 2.5e-4
    seed: int = 0


def _group_hashes(groups: dict[str, list[nn.Parameter]], names) -> dict[str, str]:
    return {
        name: hash_state_dict({str(i): p for i, p in enumerate(groups[name])})
        for name in names
    }


def finetune(
    model: ForecastModel,
    samples: list[ForecastSample],
    n_channels: int,
    window: int,
    schedule: UnfreezeSchedule | None = None,
    train_cfg: FinetuneConfig | None = None,
) -> list[dict]:
    """Stage-wise fine-tuning with the gradual-unfreeze schedule.

    Frozen parameter groups are hash-checked after every epoch; any drift
    aborts the run.  Returns the stage-wise loss log.
    """
    schedule = schedule or UnfreezeSchedule()
    train_cfg = train_cfg or FinetuneConfig()
    groups = model.parameter_groups()
    schedule.validate(set(groups))
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    max_seq = model.psv.code_encoders[MODALITIES[0]].cfg.max_sequence_length

    log = []
    model.train()
    for stage_idx, stage in enumerate(schedule.stages):
        active = set(stage)
        frozen = [name for name in groups if name not in active]
        for name, params in groups.items():
            for p in params:
                p.requires_grad_(name in active)
        frozen_before = _group_hashes(groups, frozen)
        trainable = [p for name in active for p in groups[name]]
        optimizer = torch.optim.Adam(trainable, lr=train_cfg.lr)
        set_lr(optimizer, train_cfg.lr)

        for epoch in range(schedule.epochs_per_stage):
            epoch_loss, epoch_code, epoch_signal, n_batches = 0.0, 0.0, 0.0, 0
            for ids in batch_indices(len(samples), train_cfg.batch_size, rng):
                batch_samples = [samples[i] for i in ids]
                psv_batch = build_psv_batch(
                    [(s.record, s.t) for s in batch_samples],
                    n_channels, model.vocab_sizes, window, max_seq,
                )
                tv = torch.as_tensor(np.stack([s.target_values for s in batch_samples]), dtype=torch.float32)
                tm = torch.as_tensor(np.stack([s.target_mask for s in batch_samples]), dtype=torch.float32)
                optimizer.zero_grad()
                loss, parts = model.loss(psv_batch, [s.code_targets for s in batch_samples], tv, tm)
                check_finite(loss, epoch, ids)
                loss.backward()
                optimizer.step()
                epoch_loss += loss.item()
                epoch_code += parts["code_term"]
                epoch_signal += parts["signal_term"]
                n_batches += 1
            frozen_after = _group_hashes(groups, frozen)
            if frozen_after != frozen_before:
                drifted = [n for n in frozen if frozen_after[n] != frozen_before[n]]
                raise RuntimeError(f"frozen parameter groups changed during stage {stage_idx}: {drifted}")
            log.append({
                "stage": stage_idx,
                "epoch": epoch,
                "loss": epoch_loss / max(n_batches, 1),
                "code_term": epoch_code / max(n_batches, 1),
                "signal_term": epoch_signal / max(n_batches, 1),
                "frozen": ",".join(sorted(frozen)),
                "frozen_digest": "|".join(frozen_after[n][:12] for n in sorted(frozen)),
            })
    for params in groups.values():
        for p in params:
            p.requires_grad_(True)
    model.eval()
    return log


def held_out_forecast_loss(
    model: ForecastModel,
    samples: list[ForecastSample],
    n_channels: int,
    window: int,
    batch_size: int = 64,
) -> float:
    """Average forecast loss over samples without updating parameters."""
    model.eval()
    max_seq = model.psv.code_encoders[MODALITIES[0]].cfg.max_sequence_length
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            psv_batch = build_psv_batch(
                [(s.record, s.t) for s in chunk], n_channels, model.vocab_sizes, window, max_seq
            )
            tv = torch.as_tensor(np.stack([s.target_values for s in chunk]), dtype=torch.float32)
            tm = torch.as_tensor(np.stack([s.target_mask for s in chunk]), dtype=torch.float32)
            loss, _ = model.loss(psv_batch, [s.code_targets for s in chunk], tv, tm)
            total += loss.item() * len(chunk)
            n += len(chunk)
    return total / max(n, 1)
