"""Comparison baselines: a skip-gram-objective transformer over code
streams, and the signal-only Seq2Seq probe (which reuses the pretrained
signal autoencoder directly).

The skip-gram towers share the code-autoencoder architecture but each step
predicts the codes of its neighboring steps (positions t-1 and t+1 in the
event sequence) instead of its own.
"""

from __future__ import annotations

import logging

import numpy as np
import torch

from .code_encoder import (
    CodeEncoderConfig,
    CodeSetEncoder,
    TrainConfig,
    ae_code_loss,
    sequences_to_tensors,
)
from .signal_ae import SignalAEConfig, SignalAutoencoder
from .psv import PSVModel
from .training import batch_indices, check_finite, cosine_lr, set_lr

logger = logging.getLogger(__name__)


def skipgram_targets(
    multihot: torch.Tensor, pad_mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Neighbor-step targets: the union of code sets at positions t-1 and
    t+1.  Steps with no real neighbor (single-step sequences) are masked
    out of the loss."""
    B, T, V = multihot.shape
    targets = torch.zeros_like(multihot)
    has_neighbor = torch.zeros(B, T, dtype=torch.bool)
    real = pad_mask
    if T > 1:
        targets[:, 1:] += multihot[:, :-1] * real[:, :-1].unsqueeze(-1)
        targets[:, :-1] += multihot[:, 1:] * real[:, 1:].unsqueeze(-1)
        has_neighbor[:, 1:] |= real[:, :-1]
        has_neighbor[:, :-1] |= real[:, 1:]
    targets = targets.clamp(max=1.0)
    return targets, has_neighbor & real


def train_skipgram_encoder(
    sequences: list[list[tuple[int, list[int]]]],
    cfg: CodeEncoderConfig,
    train_cfg: TrainConfig,
) -> tuple[CodeSetEncoder, list[dict]]:
    """Train one modality tower under the skip-gram objective."""
    torch.manual_seed(train_cfg.seed)
    model = CodeSetEncoder(cfg)
    multihot, hours, pad_mask = sequences_to_tensors(sequences, cfg.vocab_size, cfg.max_sequence_length)
    targets, step_mask = skipgram_targets(multihot, pad_mask)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    log = []
    model.train()
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.lr, train_cfg.cosine_period)
        set_lr(optimizer, lr)
        epoch_loss, n_batches = 0.0, 0
        for ids in batch_indices(len(sequences), train_cfg.batch_size, rng):
            idx = torch.as_tensor(ids, dtype=torch.int64)
            optimizer.zero_grad()
            _, logits = model(multihot[idx], hours[idx], pad_mask[idx])
            loss = ae_code_loss(logits, targets[idx], step_mask[idx])
            check_finite(loss, epoch, ids)
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1
        log.append({"epoch": epoch, "lr": lr, "loss": epoch_loss / max(n_batches, 1)})
    model.eval()
    return model, log


def wrap_code_encoders(
    code_encoders: dict[str, CodeSetEncoder], n_channels: int, enc_hidden: int = 8
) -> PSVModel:
    """Bundle code-only encoders behind the PSV interface with an inert
    signal autoencoder, so code-slice probes reuse the standard machinery."""
    dummy = SignalAutoencoder(SignalAEConfig(n_channels=n_channels, enc_hidden=enc_hidden))
    return PSVModel(code_encoders, dummy)


def wrap_signal_ae(signal_ae: SignalAutoencoder, vocab_sizes: dict[str, int]) -> PSVModel:
    """Bundle the signal autoencoder alone behind the PSV interface; the
    inert code towers are never evaluated for signal-slice probes."""
    encoders = {
        m: CodeSetEncoder(
            CodeEncoderConfig(vocab_size=vocab_sizes[m], n_head=1, d_head=4, d_code=8,
                              n_layers=1)
        )
        for m in vocab_sizes
    }
    return PSVModel(encoders, signal_ae)
