"""Per-modality transformer autoencoder over time-stamped code sets.

Each hour with at least one event is a step; the step input is the sum of
its code embeddings (a dedicated no-event vector when the set is empty)
plus a learned positional embedding indexed by hour.  A stack of causally
masked self-attention layers produces per-step hidden states; a linear head
reconstructs the step's multi-hot code set under a per-code Bernoulli
cross-entropy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError
from .training import batch_indices, check_finite, cosine_lr, set_lr

logger = logging.getLogger(__name__)


@dataclass
class CodeEncoderConfig:
    vocab_size: int
    n_head: int = 8
    d_head: int = 64
    d_code: int = 256
    n_layers: int = 2
    d_ff: int = 0                    # 0 -> 4 * d_code
    max_sequence_length: int = 768
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_code
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 2.5e-4
    cosine_period: int = 50
    seed: int = 0


class MultiHeadSelfAttention(nn.Module):
    """Self-attention with an explicit per-head width, so n_head * d_head
    need not equal the model width."""

    def __init__(self, d_model: int, n_head: int, d_head: int, dropout: float):
        super().__init__()
        self.n_head = n_head
        self.d_head = d_head
        inner = n_head * d_head
        self.q_proj = nn.Linear(d_model, inner)
        self.k_proj = nn.Linear(d_model, inner)
        self.v_proj = nn.Linear(d_model, inner)
        self.out_proj = nn.Linear(inner, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        # x: (B, T, d_model); attn_mask: (B, T, T) True where attention is allowed
        B, T, _ = x.shape
        q = self.q_proj(x).view(B, T, self.n_head, self.d_head).transpose(1, 2)
        k = self.k_proj(x).view(B, T, self.n_head, self.d_head).transpose(1, 2)
        v = self.v_proj(x).view(B, T, self.n_head, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~attn_mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.dropout(attn)
        out = (attn @ v).transpose(1, 2).reshape(B, T, self.n_head * self.d_head)
        return self.out_proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, cfg: CodeEncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_code)
        self.attn = MultiHeadSelfAttention(cfg.d_code, cfg.n_head, cfg.d_head, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_code)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_code, cfg.d_ff),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.d_ff, cfg.d_code),
        )
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, attn_mask):
        x = x + self.dropout(self.attn(self.norm1(x), attn_mask))
        x = x + self.dropout(self.ff(self.norm2(x)))
        return x


class CodeSetEncoder(nn.Module):
    """Transformer autoencoder for one code modality."""

    def __init__(self, cfg: CodeEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.code_embedding = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_code))
        self.no_event = nn.Parameter(torch.empty(cfg.d_code))
        self.pos_embedding = nn.Embedding(cfg.max_sequence_length, cfg.d_code)
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_code)
        self.recon_head = nn.Linear(cfg.d_code, cfg.vocab_size)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.normal_(self.code_embedding, std=0.02)
        nn.init.normal_(self.no_event, std=0.02)
        nn.init.normal_(self.pos_embedding.weight, std=0.02)

    def embed_steps(self, multihot: torch.Tensor, hours: torch.Tensor) -> torch.Tensor:
        """Step inputs from multi-hot code sets and their hour indices.

        multihot: (B, T, V); hours: (B, T) int64.  Empty sets take the
        no-event vector; the positional embedding is always added.
        """
        if multihot.shape[-1] != self.cfg.vocab_size:
            raise ValueError(
                f"multihot width {multihot.shape[-1]} does not match vocab {self.cfg.vocab_size}"
            )
        summed = multihot @ self.code_embedding
        empty = multihot.sum(dim=-1, keepdim=True) == 0
        summed = torch.where(empty, self.no_event.expand_as(summed), summed)
        pos = self.pos_embedding(hours.clamp(0, self.cfg.max_sequence_length - 1))
        return summed + pos

    def encode(
        self, multihot: torch.Tensor, hours: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        """Hidden states (B, T, d_code) under a causal attention mask.

        pad_mask: (B, T) True on real steps.  h_t attends to real steps at
        positions <= t only.
        """
        B, T, _ = multihot.shape
        x = self.embed_steps(multihot, hours)
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool, device=x.device))
        attn_mask = causal.unsqueeze(0) & pad_mask.unsqueeze(1)
        # every real step can at least attend to itself
        attn_mask = attn_mask | torch.eye(T, dtype=torch.bool, device=x.device).unsqueeze(0)
        for block in self.blocks:
            x = block(x, attn_mask)
        return self.final_norm(x)

    def reconstruct(self, hidden: torch.Tensor) -> torch.Tensor:
        """Vocabulary logits from the per-step bottleneck states."""
        return self.recon_head(hidden)

    def forward(self, multihot, hours, pad_mask):
        hidden = self.encode(multihot, hours, pad_mask)
        return hidden, self.reconstruct(hidden)


def ae_code_loss(logits: torch.Tensor, targets: torch.Tensor,
                 step_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Multi-label reconstruction loss: Bernoulli cross-entropy summed over
    the vocabulary, averaged over (real) steps.

    logits/targets: (..., T, V); step_mask: (..., T) True on steps that
    count.  Shapes must match exactly.
    """
    if logits.shape != targets.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} != targets {tuple(targets.shape)}")
    per_entry = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    per_step = per_entry.sum(dim=-1)
    if step_mask is None:
        return per_step.mean()
    step_mask = step_mask.to(per_step.dtype)
    denom = step_mask.sum().clamp(min=1.0)
    return (per_step * step_mask).sum() / denom


def sequences_to_tensors(
    sequences: list[list[tuple[int, list[int]]]],
    vocab_size: int,
    max_len: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad a batch of (hour, codes) step lists into model inputs.

    Sequences longer than max_len are truncated from the left (oldest
    steps dropped) with a warning.  Empty sequences become a single
    no-event step at hour 0.
    """
    prepared = []
    for seq in sequences:
        if not seq:
            seq = [(0, [])]
        if len(seq) > max_len:
            logger.warning("sequence of %d steps truncated to most recent %d", len(seq), max_len)
            seq = seq[-max_len:]
        prepared.append(seq)
    B = len(prepared)
    T = max(len(s) for s in prepared)
    multihot = torch.zeros(B, T, vocab_size)
    hours = torch.zeros(B, T, dtype=torch.int64)
    pad_mask = torch.zeros(B, T, dtype=torch.bool)
    for b, seq in enumerate(prepared):
        for t, (hour, codes) in enumerate(seq):
            for c in codes:
                if c >= vocab_size:
                    raise DataError(f"code id {c} out of vocabulary (size {vocab_size})")
                multihot[b, t, c] = 1.0
            hours[b, t] = hour
            pad_mask[b, t] = True
    return multihot, hours, pad_mask


def reconstruction_recall_at_k(logits: torch.Tensor, targets: torch.Tensor,
                               pad_mask: torch.Tensor) -> float:
    """Mean over steps of |top-k(logits) ∩ true set| / k with k the true set
    size; steps with empty sets are skipped."""
    scores = []
    B, T, _ = logits.shape
    for b in range(B):
        for t in range(T):
            if not pad_mask[b, t]:
                continue
            true = torch.nonzero(targets[b, t]).flatten()
            k = len(true)
            if k == 0:
                continue
            top = torch.topk(logits[b, t], k).indices
            scores.append(len(set(top.tolist()) & set(true.tolist())) / k)
    return float(np.mean(scores)) if scores else float("nan")


def train_code_autoencoder(
    sequences: list[list[tuple[int, list[int]]]],
    cfg: CodeEncoderConfig,
    train_cfg: TrainConfig,
) -> tuple[CodeSetEncoder, list[dict]]:
    """Train one modality's autoencoder; returns the model (with its final
    optimizer state attached for checkpointing) and an epoch loss log.
    Reconstruction targets are the input step sets themselves."""
    torch.manual_seed(train_cfg.seed)
    model = CodeSetEncoder(cfg)
    multihot, hours, pad_mask = sequences_to_tensors(sequences, cfg.vocab_size, cfg.max_sequence_length)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    log = []
    model.train()
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.lr, train_cfg.cosine_period)
        set_lr(optimizer, lr)
        epoch_loss = 0.0
        n_batches = 0
        for ids in batch_indices(len(sequences), train_cfg.batch_size, rng):
            idx = torch.as_tensor(ids, dtype=torch.int64)
            optimizer.zero_grad()
            _, logits = model(multihot[idx], hours[idx], pad_mask[idx])
            loss = ae_code_loss(logits, multihot[idx], pad_mask[idx])
            check_finite(loss, epoch, ids)
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1
        log.append({"epoch": epoch, "lr": lr, "loss": epoch_loss / max(n_batches, 1)})
    model.eval()
    model.final_optimizer_state = optimizer.state_dict()
    return model, log
