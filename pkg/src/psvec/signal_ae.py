"""Windowed sequence-to-sequence autoencoder for hourly vital signals.

The encoder is a bidirectional GRU over one window, with the observation
mask appended to the input features so imputed values are distinguishable
from observed ones.  The decoder reconstructs the window from the summary
alone (no teacher forcing), and the loss counts only observed entries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError
from .preprocess import VitalWindow
from .training import batch_indices, check_finite, set_lr, step_lr

logger = logging.getLogger(__name__)


@dataclass
class SignalAEConfig:
    n_channels: int
    window: int = 24
    enc_hidden: int = 128            # per direction; summary width is 2x
    dec_hidden: int = 0              # 0 -> 2 * enc_hidden (required match)
    step_dim: int = 8                # learned step-index input to the decoder

    def __post_init__(self):
        if self.dec_hidden == 0:
            self.dec_hidden = 2 * self.enc_hidden
        if self.dec_hidden != 2 * self.enc_hidden:
            raise ConfigError(
                "decoder hidden width must equal the concatenated encoder "
                f"output (2 x {self.enc_hidden}), got {self.dec_hidden}"
            )

    @property
    def summary_dim(self) -> int:
        return 2 * self.enc_hidden


@dataclass
class SignalTrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    decay_interval: int = 50
    decay_factor: float = 0.1
    seed: int = 0


def masked_mse(s: torch.Tensor, s_hat: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Squared error over observed entries, normalized by the observed count
    (floored at 1 so an all-masked input yields exactly 0)."""
    if s.shape != s_hat.shape or s.shape != m.shape:
        raise ValueError(
            f"shape mismatch: s {tuple(s.shape)}, s_hat {tuple(s_hat.shape)}, m {tuple(m.shape)}"
        )
    m = m.to(s.dtype)
    total = (m * (s - s_hat) ** 2).sum()
    return total / m.sum().clamp(min=1.0)


class SignalAutoencoder(nn.Module):
    def __init__(self, cfg: SignalAEConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.GRU(
            input_size=2 * cfg.n_channels,
            hidden_size=cfg.enc_hidden,
            bidirectional=True,
            batch_first=True,
        )
        self.step_embedding = nn.Embedding(cfg.window, cfg.step_dim)
        self.decoder = nn.GRU(
            input_size=cfg.summary_dim + cfg.step_dim,
            hidden_size=cfg.dec_hidden,
            batch_first=True,
        )
        self.head = nn.Linear(cfg.dec_hidden, cfg.n_channels)

    def encode_window(self, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Window summary: concatenated final forward and backward states.

        values/mask: (B, w, |S|) -> (B, 2 * enc_hidden).
        """
        x = torch.cat([values, mask.to(values.dtype)], dim=-1)
        _, h_n = self.encoder(x)
        # h_n: (2, B, enc_hidden) = (forward final, backward final)
        return torch.cat([h_n[0], h_n[1]], dim=-1)

    def decode_window(self, summary: torch.Tensor) -> torch.Tensor:
        """Reconstruction (B, w, |S|) from the summary alone, no teacher
        forcing: each decoder step sees the summary plus a learned step
        index, so the only content path is the bottleneck."""
        B = summary.shape[0]
        w = self.cfg.window
        steps = self.step_embedding(torch.arange(w, device=summary.device))
        rep = summary.unsqueeze(1).expand(B, w, summary.shape[-1])
        inputs = torch.cat([rep, steps.unsqueeze(0).expand(B, w, self.cfg.step_dim)], dim=-1)
        out, _ = self.decoder(inputs, summary.unsqueeze(0).contiguous())
        return self.head(out)

    def forward(self, values, mask):
        return self.decode_window(self.encode_window(values, mask))


def windows_to_tensors(windows: list[VitalWindow]) -> tuple[torch.Tensor, torch.Tensor]:
    values = torch.as_tensor(np.stack([w.values for w in windows]), dtype=torch.float32)
    mask = torch.as_tensor(np.stack([w.mask for w in windows]), dtype=torch.float32)
    return values, mask


def train_signal_autoencoder(
    windows: list[VitalWindow],
    cfg: SignalAEConfig,
    train_cfg: SignalTrainConfig,
) -> tuple[SignalAutoencoder, list[dict]]:
    """Minimize the masked reconstruction error over windows with Adam and
    stepwise learning-rate decay.  The final optimizer state is attached to
    the model for checkpointing."""
    torch.manual_seed(train_cfg.seed)
    model = SignalAutoencoder(cfg)
    values, mask = windows_to_tensors(windows)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    log = []
    model.train()
    for epoch in range(train_cfg.epochs):
        lr = step_lr(epoch, train_cfg.lr, train_cfg.decay_interval, train_cfg.decay_factor)
        set_lr(optimizer, lr)
        epoch_loss = 0.0
        n_batches = 0
        for ids in batch_indices(len(windows), train_cfg.batch_size, rng):
            idx = torch.as_tensor(ids, dtype=torch.int64)
            optimizer.zero_grad()
            recon = model(values[idx], mask[idx])
            loss = masked_mse(values[idx], recon, mask[idx])
            check_finite(loss, epoch, ids)
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1
        log.append({"epoch": epoch, "lr": lr, "loss": epoch_loss / max(n_batches, 1)})
    model.eval()
    model.final_optimizer_state = optimizer.state_dict()
    return model, log
