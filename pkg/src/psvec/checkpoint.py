"""Versioned checkpoint containers.

One file per training stage: the three code towers, the signal
autoencoder, or the jointly fine-tuned forecast bundle.  Each holds the
model configuration echo, parameter tensors, optimizer and RNG state, and
per-modality vocabulary hashes, so a load reproduces forward outputs
bit-identically and a version mismatch fails loudly.
"""

from __future__ import annotations

import logging
from dataclasses import asdict
from pathlib import Path

import torch

from .code_encoder import CodeEncoderConfig, CodeSetEncoder
from .errors import DataError
from .forecast import ForecastModel
from .psv import PSVModel
from .signal_ae import SignalAEConfig, SignalAutoencoder
from .util import MODALITIES, sha256_json

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def vocab_hashes(vocab: dict[str, list[str]]) -> dict[str, str]:
    return {m: sha256_json(vocab[m]) for m in MODALITIES}


def _payload(kind: str, stage: str, config_echo: dict, vocab: dict[str, list[str]]) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "stage": stage,
        "config_echo": config_echo,
        "vocab_hashes": vocab_hashes(vocab),
        "torch_rng_state": torch.get_rng_state(),
    }


def _load(path: str | Path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(
            f"checkpoint {path} has format version {version!r}; this build reads {FORMAT_VERSION}"
        )
    if payload.get("kind") != kind:
        raise DataError(f"checkpoint {path} holds {payload.get('kind')!r}, expected {kind!r}")
    return payload


def _write(path: str | Path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def save_code_towers(
    path: str | Path,
    encoders: dict[str, CodeSetEncoder],
    stage: str,
    config_echo: dict,
    vocab: dict[str, list[str]],
    optimizer_states: dict | None = None,
    extra: dict | None = None,
) -> None:
    payload = _payload("code_towers", stage, config_echo, vocab)
    payload["code_configs"] = {m: asdict(encoders[m].cfg) for m in MODALITIES}
    payload["state_dicts"] = {m: encoders[m].state_dict() for m in MODALITIES}
    payload["optimizer_states"] = optimizer_states
    payload["extra"] = extra or {}
    _write(path, payload)


def load_code_towers(path: str | Path) -> tuple[dict[str, CodeSetEncoder], dict]:
    payload = _load(path, "code_towers")
    encoders = {}
    for m in MODALITIES:
        enc = CodeSetEncoder(CodeEncoderConfig(**payload["code_configs"][m]))
        enc.load_state_dict(payload["state_dicts"][m])
        enc.eval()
        encoders[m] = enc
    return encoders, payload


def save_signal_ae(
    path: str | Path,
    model: SignalAutoencoder,
    stage: str,
    config_echo: dict,
    vocab: dict[str, list[str]],
    optimizer_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    payload = _payload("signal_ae", stage, config_echo, vocab)
    payload["signal_config"] = asdict(model.cfg)
    payload["state_dict"] = model.state_dict()
    payload["optimizer_state"] = optimizer_state
    payload["extra"] = extra or {}
    _write(path, payload)


def load_signal_ae(path: str | Path) -> tuple[SignalAutoencoder, dict]:
    payload = _load(path, "signal_ae")
    model = SignalAutoencoder(SignalAEConfig(**payload["signal_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def save_forecast_model(
    path: str | Path,
    model: ForecastModel,
    stage: str,
    config_echo: dict,
    vocab: dict[str, list[str]],
    extra: dict | None = None,
) -> None:
    payload = _payload("forecast_model", stage, config_echo, vocab)
    payload["code_configs"] = {m: asdict(model.psv.code_encoders[m].cfg) for m in MODALITIES}
    payload["signal_config"] = asdict(model.psv.signal_ae.cfg)
    payload["vocab_sizes"] = model.vocab_sizes
    payload["state_dict"] = model.state_dict()
    payload["extra"] = extra or {}
    _write(path, payload)


def load_forecast_model(path: str | Path) -> tuple[ForecastModel, dict]:
    payload = _load(path, "forecast_model")
    encoders = {
        m: CodeSetEncoder(CodeEncoderConfig(**payload["code_configs"][m])) for m in MODALITIES
    }
    psv_model = PSVModel(encoders, SignalAutoencoder(SignalAEConfig(**payload["signal_config"])))
    model = ForecastModel(psv_model, payload["vocab_sizes"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def verify_vocab(payload: dict, vocab: dict[str, list[str]], path="") -> None:
    """Fail when a checkpoint was trained against different vocabularies."""
    expected = payload.get("vocab_hashes", {})
    actual = vocab_hashes(vocab)
    if expected != actual:
        raise DataError(f"vocabulary hash mismatch for checkpoint {path}: retrain or fix data")
