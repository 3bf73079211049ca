"""Patient Status Vector assembly.

The PSV at reference hour t concatenates the final hidden state of each
code tower (events at hours <= t), a pooled summary of all signal windows
up to t (last window, elementwise max, elementwise mean), and the encoded
demographics.  Assembly is causal: nothing after t can change the result.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .code_encoder import CodeSetEncoder, sequences_to_tensors
from .preprocess import stay_series, window_signals
from .records import PatientRecord
from .signal_ae import SignalAutoencoder
from .util import MODALITIES

logger = logging.getLogger(__name__)


@dataclass
class PSV:
    vector: np.ndarray
    reference_time: int
    offsets: dict[str, tuple[int, int]]
    empty_signal_history: bool


def visit_series(record: PatientRecord, n_channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Hourly (L, |S|) arrays over the whole hospital visit: each stay's
    series placed at its offset; hours outside any stay carry zero mask."""
    L = 0
    for stay in record.stays:
        L = max(L, stay.offset + max(1, math.ceil(stay.duration)))
    values = np.zeros((L, n_channels), dtype=np.float64)
    mask = np.zeros((L, n_channels), dtype=np.int8)
    for stay in record.stays:
        v, m = stay_series(stay, n_channels)
        stop = min(L, stay.offset + v.shape[0])
        if stop > stay.offset:
            values[stay.offset:stop] = v[: stop - stay.offset]
            mask[stay.offset:stop] = m[: stop - stay.offset]
    return values, mask


def visit_code_steps(record: PatientRecord, modality: str, t: int) -> list[tuple[int, list[int]]]:
    """All events of one modality at absolute visit hours <= t, grouped by
    hour.  Empty result means the no-event path."""
    by_hour: dict[int, list[int]] = {}
    for stay in record.stays:
        for hour, code in stay.codes[modality]:
            abs_hour = stay.offset + hour
            if abs_hour <= t:
                by_hour.setdefault(abs_hour, []).append(code)
    return [(h, sorted(by_hour[h])) for h in sorted(by_hour)]


def pool_signal_history(summaries: torch.Tensor) -> torch.Tensor:
    """[last; elementwise max; elementwise mean] over a (K, D) history."""
    if summaries.shape[0] == 0:
        raise ValueError("pool_signal_history requires a non-empty history")
    return torch.cat([summaries[-1], summaries.max(dim=0).values, summaries.mean(dim=0)])


@dataclass
class PSVBatch:
    code: dict[str, tuple[torch.Tensor, torch.Tensor, torch.Tensor]]  # multihot, hours, pad
    win_values: torch.Tensor        # (N, w, |S|) all windows of all examples
    win_mask: torch.Tensor
    win_example: torch.Tensor       # (N,) example index per window
    z: torch.Tensor                 # (B, |Z|)
    times: list[int]
    size: int


def build_psv_batch(
    samples: list[tuple[PatientRecord, int]],
    n_channels: int,
    vocab_sizes: dict[str, int],
    window: int,
    max_seq_len: int,
) -> PSVBatch:
    """Tensorize (record, t) pairs for a PSVModel forward pass.

    The trailing partial window at t is included (padded and masked) so the
    most recent vitals inform the pooled summary.
    """
    code = {}
    for m in MODALITIES:
        seqs = []
        for rec, t in samples:
            # event steps up to t plus a no-event query step stamped at t:
            # the final state then reads the history through attention
            # rather than echoing the last event's own codes
            steps = visit_code_steps(rec, m, t)
            steps = steps + [(max(0, min(t, max_seq_len - 1)), [])]
            seqs.append(steps)
        code[m] = sequences_to_tensors(seqs, vocab_sizes[m], max_seq_len)

    all_values, all_masks, example_idx = [], [], []
    for b, (rec, t) in enumerate(samples):
        values, mask = visit_series(rec, n_channels)
        values, mask = values[: max(0, t)], mask[: max(0, t)]
        for win in window_signals(values, mask, window):
            all_values.append(win.values)
            all_masks.append(win.mask)
            example_idx.append(b)
    if all_values:
        win_values = torch.as_tensor(np.stack(all_values), dtype=torch.float32)
        win_mask = torch.as_tensor(np.stack(all_masks), dtype=torch.float32)
    else:
        win_values = torch.zeros(0, window, n_channels)
        win_mask = torch.zeros(0, window, n_channels)
    z = torch.as_tensor(
        np.stack([rec.demographics.encode() for rec, _ in samples]), dtype=torch.float32
    )
    return PSVBatch(
        code=code,
        win_values=win_values,
        win_mask=win_mask,
        win_example=torch.as_tensor(example_idx, dtype=torch.int64),
        z=z,
        times=[t for _, t in samples],
        size=len(samples),
    )


class PSVModel(nn.Module):
    """All pretrained encoders bundled behind one differentiable forward."""

    def __init__(self, code_encoders: dict[str, CodeSetEncoder], signal_ae: SignalAutoencoder):
        super().__init__()
        self.code_encoders = nn.ModuleDict({m: code_encoders[m] for m in MODALITIES})
        self.signal_ae = signal_ae

    @property
    def d_code(self) -> int:
        return self.code_encoders[MODALITIES[0]].cfg.d_code

    @property
    def signal_summary_dim(self) -> int:
        return self.signal_ae.cfg.summary_dim

    @property
    def z_dim(self) -> int:
        return 5

    def offsets(self) -> dict[str, tuple[int, int]]:
        d = self.d_code
        sig = 3 * self.signal_summary_dim
        table = {}
        pos = 0
        for m in MODALITIES:
            table[f"code_{m}"] = (pos, pos + d)
            pos += d
        table["signal"] = (pos, pos + sig)
        pos += sig
        table["demographics"] = (pos, pos + self.z_dim)
        return table

    @property
    def psv_dim(self) -> int:
        return 3 * self.d_code + 3 * self.signal_summary_dim + self.z_dim

    def code_representations(self, batch: PSVBatch) -> dict[str, torch.Tensor]:
        reps = {}
        for m in MODALITIES:
            multihot, hours, pad = batch.code[m]
            hidden = self.code_encoders[m].encode(multihot, hours, pad)
            lengths = pad.sum(dim=1)
            last = (lengths - 1).clamp(min=0)
            reps[m] = hidden[torch.arange(hidden.shape[0]), last]
        return reps

    def signal_representation(self, batch: PSVBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Pooled signal history per example plus an emptiness flag."""
        D = self.signal_summary_dim
        pooled = torch.zeros(batch.size, 3 * D, dtype=torch.float32)
        empty = torch.ones(batch.size, dtype=torch.bool)
        if batch.win_values.shape[0] > 0:
            summaries = self.signal_ae.encode_window(batch.win_values, batch.win_mask)
            chunks = []
            for b in range(batch.size):
                mine = summaries[batch.win_example == b]
                if mine.shape[0] == 0:
                    chunks.append(torch.zeros(3 * D))
                else:
                    chunks.append(pool_signal_history(mine))
                    empty[b] = False
            pooled = torch.stack(chunks)
        return pooled, empty

    def forward(self, batch: PSVBatch) -> torch.Tensor:
        reps = self.code_representations(batch)
        pooled, _ = self.signal_representation(batch)
        parts = [reps[m] for m in MODALITIES] + [pooled, batch.z]
        return torch.cat(parts, dim=-1)

    def forward_slice(self, batch: PSVBatch, slice_name: str | None = None) -> torch.Tensor:
        """Compute only the requested PSV slice (skips the other towers)."""
        if slice_name is None:
            return self.forward(batch)
        if slice_name == "code":
            reps = self.code_representations(batch)
            return torch.cat([reps[m] for m in MODALITIES], dim=-1)
        if slice_name == "signal":
            pooled, _ = self.signal_representation(batch)
            return pooled
        raise ValueError(f"unknown PSV slice {slice_name!r}")


def assemble_psv(
    record: PatientRecord,
    t: int,
    model: PSVModel,
    n_channels: int,
    vocab_sizes: dict[str, int],
    window: int = 24,
) -> PSV:
    """Single-record PSV at hour t, computed in eval mode."""
    model.eval()
    batch = build_psv_batch(
        [(record, t)], n_channels, vocab_sizes, window,
        model.code_encoders[MODALITIES[0]].cfg.max_sequence_length,
    )
    with torch.no_grad():
        reps = model.code_representations(batch)
        pooled, empty = model.signal_representation(batch)
        vec = torch.cat([reps[m][0] for m in MODALITIES] + [pooled[0], batch.z[0]])
    return PSV(
        vector=vec.numpy().astype(np.float64),
        reference_time=t,
        offsets=model.offsets(),
        empty_signal_history=bool(empty[0]),
    )
