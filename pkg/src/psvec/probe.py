"""Downstream probing of frozen or fine-tuned representations on mortality
and readmission, the 5-run split protocol, and the ablation harness.

A probe is a two-layer rectifier MLP over one slice of the PSV (full
vector, code part, or signal part).  Frozen mode never updates encoder
parameters (hash-checked); semi-supervised mode first trains the probe on
frozen features, then fine-tunes probe and encoders jointly.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError
from .metrics import auroc, auprc, mean_std
from .psv import PSVModel, build_psv_batch
from .records import PatientRecord
from .training import batch_indices
from .util import MODALITIES, hash_state_dict, substream_seed

logger = logging.getLogger(__name__)

TASKS = ("mortality", "readmission")
SLICES = (None, "code", "signal")


@dataclass
class ProbeConfig:
    hidden_dim: int = 128
    dropout: float = 0.1
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    semi_epochs: int = 3
    semi_lr: float = 1e-4


@dataclass
class EvalProtocol:
    test_fraction: float = 0.15
    n_runs: int = 5
    seed: int = 0


@dataclass
class TaskExample:
    visit_id: str
    record: PatientRecord
    t: int                          # probe reference hour (end of stay)
    label: int


def task_examples(records: list[PatientRecord], task: str) -> list[TaskExample]:
    """One example per ICU stay, probed at the end of the stay.

    mortality: did the patient die during this stay; readmission: does
    another ICU stay follow within the same hospital visit.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    examples = []
    for rec in records:
        for stay in rec.stays:
            t = stay.offset + math.ceil(stay.duration)
            label = stay.mortality_label if task == "mortality" else stay.readmitted_label
            examples.append(TaskExample(rec.visit_id, rec, t, int(label)))
    return examples


def split_by_visit(
    examples: list[TaskExample], test_fraction: float, seed: int, max_tries: int = 20
) -> tuple[list[int], list[int]]:
    """Random split at hospital-visit granularity; resamples (with a logged
    seed bump) if the test side ends up single-class."""
    visit_ids = sorted({e.visit_id for e in examples})
    for attempt in range(max_tries):
        rng = np.random.default_rng(seed + attempt)
        shuffled = list(visit_ids)
        rng.shuffle(shuffled)
        n_test = max(1, int(round(test_fraction * len(shuffled))))
        test_visits = set(shuffled[:n_test])
        train_idx = [i for i, e in enumerate(examples) if e.visit_id not in test_visits]
        test_idx = [i for i, e in enumerate(examples) if e.visit_id in test_visits]
        test_labels = {examples[i].label for i in test_idx}
        train_labels = {examples[i].label for i in train_idx}
        if len(test_labels) == 2 and len(train_labels) == 2:
            return train_idx, test_idx
        logger.warning("degenerate split at seed %d; resampling", seed + attempt)
    raise ConfigError(f"could not find a two-class split in {max_tries} attempts")


class ProbeMLP(nn.Module):
    """Two fully connected layers with rectifier activation and dropout."""

    def __init__(self, in_dim: int, hidden_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden_dim, 1),
        )

    def forward(self, x):
        return self.net(x).squeeze(-1)


def slice_range(model: PSVModel, slice_name: str | None) -> tuple[int, int]:
    offsets = model.offsets()
    if slice_name is None:
        return 0, model.psv_dim
    if slice_name == "code":
        return 0, offsets["signal"][0]
    if slice_name == "signal":
        return offsets["signal"]
    raise ConfigError(f"unknown PSV slice {slice_name!r}")


def compute_features(
    model: PSVModel,
    examples: list[TaskExample],
    n_channels: int,
    vocab_sizes: dict[str, int],
    window: int,
    slice_name: str | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Frozen representation matrix (N, D) for the requested PSV slice."""
    model.eval()
    max_seq = model.code_encoders[MODALITIES[0]].cfg.max_sequence_length
    rows = []
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            batch = build_psv_batch(
                [(e.record, e.t) for e in chunk], n_channels, vocab_sizes, window, max_seq
            )
            rows.append(model.forward_slice(batch, slice_name).numpy())
    return np.concatenate(rows, axis=0).astype(np.float64)


def _fit_scaler(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-6] = 1.0
    return mean, std


def _train_mlp_on_features(
    x_train: np.ndarray, y_train: np.ndarray, cfg: ProbeConfig, seed: int
) -> tuple[ProbeMLP, np.ndarray, np.ndarray]:
    mean, std = _fit_scaler(x_train)
    xt = torch.as_tensor((x_train - mean) / std, dtype=torch.float32)
    yt = torch.as_tensor(y_train, dtype=torch.float32)
    torch.manual_seed(seed)
    probe = ProbeMLP(x_train.shape[1], cfg.hidden_dim, cfg.dropout)
    optimizer = torch.optim.Adam(probe.parameters(), lr=cfg.lr)
    loss_fn = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(seed)
    probe.train()
    for _ in range(cfg.epochs):
        for ids in batch_indices(len(xt), cfg.batch_size, rng):
            idx = torch.as_tensor(ids, dtype=torch.int64)
            optimizer.zero_grad()
            loss = loss_fn(probe(xt[idx]), yt[idx])
            loss.backward()
            optimizer.step()
    probe.eval()
    return probe, mean, std


def _score_features(probe: ProbeMLP, x: np.ndarray, mean, std) -> np.ndarray:
    with torch.no_grad():
        logits = probe(torch.as_tensor((x - mean) / std, dtype=torch.float32))
    return logits.numpy()


@dataclass
class ProbeResult:
    task: str
    mode: str
    slice_name: str | None
    runs: list[dict] = field(default_factory=list)
    auroc_mean: float = float("nan")
    auroc_std: float = float("nan")
    auprc_mean: float = float("nan")
    auprc_std: float = float("nan")
    encoder_hash_before: str = ""
    encoder_hash_after: str = ""

    def summarize(self):
        self.auroc_mean, self.auroc_std = mean_std([r["auroc"] for r in self.runs])
        self.auprc_mean, self.auprc_std = mean_std([r["auprc"] for r in self.runs])


def train_probe(
    model: PSVModel,
    examples: list[TaskExample],
    task: str,
    n_channels: int,
    vocab_sizes: dict[str, int],
    window: int,
    probe_cfg: ProbeConfig | None = None,
    protocol: EvalProtocol | None = None,
    mode: str = "frozen",
    slice_name: str | None = None,
) -> ProbeResult:
    """Run the 5-run split protocol for one representation and task.

    Frozen mode trains only the probe on precomputed features; the encoder
    hash is asserted unchanged.  Semi-supervised mode clones the encoders
    per run and fine-tunes them jointly after the frozen warm-up, so the
    shared model is never mutated.
    """
    probe_cfg = probe_cfg or ProbeConfig()
    protocol = protocol or EvalProtocol()
    if mode not in ("frozen", "semi"):
        raise ConfigError(f"unknown probe mode {mode!r}")

    result = ProbeResult(task=task, mode=mode, slice_name=slice_name)
    result.encoder_hash_before = hash_state_dict(model.state_dict())

    features = compute_features(model, examples, n_channels, vocab_sizes, window, slice_name)
    labels = np.asarray([e.label for e in examples], dtype=np.int64)

    for run in range(protocol.n_runs):
        run_seed = substream_seed(protocol.seed, f"{task}:{mode}:{slice_name}:run{run}")
        train_idx, test_idx = split_by_visit(examples, protocol.test_fraction, run_seed)
        x_train, y_train = features[train_idx], labels[train_idx]
        x_test, y_test = features[test_idx], labels[test_idx]
        probe, mean, std = _train_mlp_on_features(x_train, y_train, probe_cfg, run_seed)

        if mode == "semi":
            scores = _semi_supervised_scores(
                model, probe, mean, std, examples, train_idx, test_idx, labels,
                n_channels, vocab_sizes, window, probe_cfg, run_seed, slice_name,
            )
        else:
            scores = _score_features(probe, x_test, mean, std)

        result.runs.append({
            "run": run,
            "seed": run_seed,
            "auroc": auroc(scores, y_test),
            "auprc": auprc(scores, y_test),
            "n_train": len(train_idx),
            "n_test": len(test_idx),
        })

    result.encoder_hash_after = hash_state_dict(model.state_dict())
    if result.encoder_hash_before != result.encoder_hash_after:
        raise RuntimeError("encoder parameters changed during probing")
    result.summarize()
    return result


def _semi_supervised_scores(
    model, probe, mean, std, examples, train_idx, test_idx, labels,
    n_channels, vocab_sizes, window, probe_cfg, run_seed, slice_name,
) -> np.ndarray:
    """Joint fine-tune of a cloned encoder stack plus the warmed-up probe."""
    tuned = copy.deepcopy(model)
    tuned.train()
    max_seq = tuned.code_encoders[MODALITIES[0]].cfg.max_sequence_length
    mean_t = torch.as_tensor(mean, dtype=torch.float32)
    std_t = torch.as_tensor(std, dtype=torch.float32)
    params = list(tuned.parameters()) + list(probe.parameters())
    optimizer = torch.optim.Adam(params, lr=probe_cfg.semi_lr)
    loss_fn = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(run_seed + 1)
    probe.train()
    for _ in range(probe_cfg.semi_epochs):
        for ids in batch_indices(len(train_idx), probe_cfg.batch_size, rng):
            chunk = [examples[train_idx[i]] for i in ids]
            y = torch.as_tensor([labels[train_idx[i]] for i in ids], dtype=torch.float32)
            batch = build_psv_batch(
                [(e.record, e.t) for e in chunk], n_channels, vocab_sizes, window, max_seq
            )
            feats = (tuned.forward_slice(batch, slice_name) - mean_t) / std_t
            optimizer.zero_grad()
            loss = loss_fn(probe(feats), y)
            loss.backward()
            optimizer.step()
    tuned.eval()
    probe.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(test_idx), probe_cfg.batch_size):
            chunk = [examples[j] for j in test_idx[i:i + probe_cfg.batch_size]]
            batch = build_psv_batch(
                [(e.record, e.t) for e in chunk], n_channels, vocab_sizes, window, max_seq
            )
            feats = (tuned.forward_slice(batch, slice_name) - mean_t) / std_t
            out.append(probe(feats).numpy())
    return np.concatenate(out)


ABLATION_VARIANTS = (
    ("PSV (Code+Signal)", "frozen", None, "finetuned"),
    ("PSV (Code)", "frozen", "code", "finetuned"),
    ("PSV (Signal)", "frozen", "signal", "finetuned"),
    ("PSV (Semi-supervised)", "semi", None, "finetuned"),
    ("Skip-gram Transformer", "frozen", "code", "skipgram"),
    ("Seq2Seq (Unsupervised)", "frozen", "signal", "pretrained"),
    ("Seq2Seq (Semi-supervised)", "semi", "signal", "pretrained"),
)


def run_ablation(
    models: dict[str, PSVModel | None],
    cohorts: dict[str, list[PatientRecord]],
    tasks: list[str],
    n_channels: int,
    vocab_sizes: dict[str, int],
    window: int,
    probe_cfg: ProbeConfig | None = None,
    protocol: EvalProtocol | None = None,
) -> list[dict]:
    """Evaluate every PSV variant and baseline on each cohort and task.

    `models` maps checkpoint roles ("finetuned", "skipgram", "pretrained")
    to loaded models; a missing role marks its rows absent and the run
    continues.
    """
    rows = []
    for cohort_name, records in cohorts.items():
        for task in tasks:
            examples = task_examples(records, task)
            for label, mode, slice_name, role in ABLATION_VARIANTS:
                model = models.get(role)
                if model is None:
                    logger.warning("no %r checkpoint; skipping row %r", role, label)
                    rows.append({
                        "cohort": cohort_name, "task": task, "variant": label,
                        "status": "absent",
                        "auprc_mean": float("nan"), "auprc_std": float("nan"),
                        "auroc_mean": float("nan"), "auroc_std": float("nan"),
                    })
                    continue
                res = train_probe(
                    model, examples, task, n_channels, vocab_sizes, window,
                    probe_cfg, protocol, mode=mode, slice_name=slice_name,
                )
                rows.append({
                    "cohort": cohort_name, "task": task, "variant": label,
                    "status": "ok",
                    "auprc_mean": res.auprc_mean, "auprc_std": res.auprc_std,
                    "auroc_mean": res.auroc_mean, "auroc_std": res.auroc_std,
                })
    return rows
