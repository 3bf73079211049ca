"""Run configuration: flat key-value sections, environment overrides, and
stable hashing.

Every hyperparameter of every stage lives here with its stock default.
Unknown sections or keys are rejected; values can be overridden with
PSV_<SECTION>_<KEY> environment variables.
"""

from __future__ import annotations

import configparser
import logging
from pathlib import Path

from .code_encoder import CodeEncoderConfig, TrainConfig
from .errors import ConfigError
from .forecast import FinetuneConfig, UnfreezeSchedule
from .probe import EvalProtocol, ProbeConfig
from .signal_ae import SignalAEConfig, SignalTrainConfig
from .synth import MechanismWeights, SynthConfig
from .util import sha256_json

logger = logging.getLogger(__name__)

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "runs/default"),
        "threads": (int, 1),
        "cohort": (str, "all"),
    },
    "data": {
        "source": (str, "synth"),
        "eicu_dir": (str, ""),
        "exclusion_burns": (str, "burn"),
        "exclusion_organ_donor": (str, "organ donor"),
        "exclusion_transplant": (str, "transplant"),
    },
    "cohorts": {
        "short": (str, "1,24"),
        "long": (str, "24,720"),
    },
    "synth": {
        "n_patients": (int, 200),
        "diagnosis_vocab": (int, 60),
        "medication_vocab": (int, 50),
        "treatment_vocab": (int, 40),
        "diagnosis_rate": (float, 3.075),
        "medication_rate": (float, 8.52),
        "treatment_rate": (float, 2.85),
        "n_vital_channels": (int, 4),
        "missing_rate": (float, 0.3),
        "sample_interval_min": (int, 10),
        "duration_log_mean": (float, 3.4),
        "duration_log_sd": (float, 0.5),
        "duration_min_h": (float, 2.0),
        "duration_max_h": (float, 120.0),
        "risk_set_size": (int, 6),
        "risk_plant_prob": (float, 0.35),
        "signal_drift_magnitude": (float, 3.0),
        "mort_bias": (float, -1.6),
        "mort_w_code": (float, 1.4),
        "mort_w_signal": (float, 1.4),
        "mort_w_interaction": (float, 0.8),
        "read_bias": (float, -1.2),
        "read_w_code": (float, 1.2),
        "read_w_signal": (float, 1.2),
        "read_w_interaction": (float, 0.6),
        "n_stays_min": (int, 1),
        "extra_stay_prob": (float, 0.08),
    },
    "code_ae": {
        "n_head": (int, 8),
        "d_head": (int, 64),
        "d_code": (int, 256),
        "n_layers": (int, 2),
        "d_ff": (int, 0),
        "max_sequence_length": (int, 768),
        "dropout": (float, 0.1),
        "epochs": (int, 200),
        "batch_size": (int, 64),
        "lr": (float, 2.5e-4),
        "cosine_period": (int, 50),
    },
    "signal_ae": {
        "window": (int, 24),
        "enc_hidden": (int, 128),
        "epochs": (int, 100),
        "batch_size": (int, 64),
        "lr": (float, 1e-3),
        "decay_interval": (int, 50),
        "decay_factor": (float, 0.1),
    },
    "finetune": {
        "epochs_per_stage": (int, 2),
        "batch_size": (int, 64),
        "lr": (float, 2.5e-4),
    },
    "probe": {
        "hidden_dim": (int, 128),
        "dropout": (float, 0.1),
        "epochs": (int, 40),
        "batch_size": (int, 64),
        "lr": (float, 1e-3),
        "semi_epochs": (int, 3),
        "semi_lr": (float, 1e-4),
    },
    "eval": {
        "test_fraction": (float, 0.15),
        "n_runs": (int, 5),
    },
}


class RunConfig:
    """Validated view over the configuration sections."""

    def __init__(self, values: dict[str, dict[str, object]]):
        self.values = values

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def load(cls, path: str | Path | None = None, apply_env: bool = True) -> "RunConfig":
        cfg = cls.defaults()
        if path is not None:
            parser = configparser.ConfigParser()
            parser.optionxform = str.lower
            read = parser.read(path)
            if not read:
                raise ConfigError(f"config file not found: {path}")
            for section in parser.sections():
                if section not in SCHEMA:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, raw in parser.items(section):
                    cfg._set(section, key, raw)
        if apply_env:
            import os

            for section, keys in SCHEMA.items():
                for key in keys:
                    name = f"PSV_{section.upper()}_{key.upper()}"
                    if name in os.environ:
                        cfg._set(section, key, os.environ[name])
                        logger.info("env override %s", name)
        return cfg

    def _set(self, section: str, key: str, raw: str) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        typ, _ = SCHEMA[section][key]
        try:
            self.values[section][key] = typ(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc

    def get(self, section: str, key: str):
        return self.values[section][key]

    def to_dict(self) -> dict:
        return {s: dict(keys) for s, keys in self.values.items()}

    def hash(self) -> str:
        return sha256_json(self.to_dict())

    def cohort_bounds(self, name: str) -> tuple[float, float]:
        if name == "all":
            return 0.0, float("inf")
        raw = self.values["cohorts"].get(name)
        if raw is None:
            raise ConfigError(f"unknown cohort {name!r}; define it under [cohorts]")
        try:
            lo, hi = (float(x) for x in str(raw).split(","))
        except ValueError as exc:
            raise ConfigError(f"cohort {name!r} must be 'min_h,max_h', got {raw!r}") from exc
        return lo, hi

    def exclusion_terms(self) -> dict[str, list[str]]:
        d = self.values["data"]
        return {
            "burns": [t.strip() for t in str(d["exclusion_burns"]).split(";") if t.strip()],
            "organ_donor": [t.strip() for t in str(d["exclusion_organ_donor"]).split(";") if t.strip()],
            "transplant": [t.strip() for t in str(d["exclusion_transplant"]).split(";") if t.strip()],
        }

    # ---- per-module config builders ----

    def synth_config(self) -> SynthConfig:
        s = self.values["synth"]
        return SynthConfig(
            seed=int(self.get("run", "seed")),
            n_patients=s["n_patients"],
            vocab_sizes={
                "diagnosis": s["diagnosis_vocab"],
                "medication": s["medication_vocab"],
                "treatment": s["treatment_vocab"],
            },
            codes_per_visit={
                "diagnosis": s["diagnosis_rate"],
                "medication": s["medication_rate"],
                "treatment": s["treatment_rate"],
            },
            n_vital_channels=s["n_vital_channels"],
            missing_rate=s["missing_rate"],
            sample_interval_min=s["sample_interval_min"],
            duration_log_mean=s["duration_log_mean"],
            duration_log_sd=s["duration_log_sd"],
            duration_min_h=s["duration_min_h"],
            duration_max_h=s["duration_max_h"],
            risk_set_size=s["risk_set_size"],
            risk_plant_prob=s["risk_plant_prob"],
            signal_drift_magnitude=s["signal_drift_magnitude"],
            mortality=MechanismWeights(
                bias=s["mort_bias"], w_code=s["mort_w_code"],
                w_signal=s["mort_w_signal"], w_interaction=s["mort_w_interaction"],
            ),
            readmission=MechanismWeights(
                bias=s["read_bias"], w_code=s["read_w_code"],
                w_signal=s["read_w_signal"], w_interaction=s["read_w_interaction"],
            ),
            n_stays_min=s["n_stays_min"],
            extra_stay_prob=s["extra_stay_prob"],
        )

    def code_encoder_config(self, vocab_size: int) -> CodeEncoderConfig:
        c = self.values["code_ae"]
        return CodeEncoderConfig(
            vocab_size=vocab_size, n_head=c["n_head"], d_head=c["d_head"],
            d_code=c["d_code"], n_layers=c["n_layers"], d_ff=c["d_ff"],
            max_sequence_length=c["max_sequence_length"], dropout=c["dropout"],
        )

    def code_train_config(self, seed: int) -> TrainConfig:
        c = self.values["code_ae"]
        return TrainConfig(
            epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"],
            cosine_period=c["cosine_period"], seed=seed,
        )

    def signal_ae_config(self, n_channels: int) -> SignalAEConfig:
        c = self.values["signal_ae"]
        return SignalAEConfig(n_channels=n_channels, window=c["window"], enc_hidden=c["enc_hidden"])

    def signal_train_config(self, seed: int) -> SignalTrainConfig:
        c = self.values["signal_ae"]
        return SignalTrainConfig(
            epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"],
            decay_interval=c["decay_interval"], decay_factor=c["decay_factor"], seed=seed,
        )

    def finetune_config(self, seed: int) -> FinetuneConfig:
        c = self.values["finetune"]
        return FinetuneConfig(batch_size=c["batch_size"], lr=c["lr"], seed=seed)

    def unfreeze_schedule(self) -> UnfreezeSchedule:
        return UnfreezeSchedule(epochs_per_stage=self.values["finetune"]["epochs_per_stage"])

    def probe_config(self) -> ProbeConfig:
        p = self.values["probe"]
        return ProbeConfig(
            hidden_dim=p["hidden_dim"], dropout=p["dropout"], epochs=p["epochs"],
            batch_size=p["batch_size"], lr=p["lr"],
            semi_epochs=p["semi_epochs"], semi_lr=p["semi_lr"],
        )

    def eval_protocol(self, seed: int) -> EvalProtocol:
        e = self.values["eval"]
        return EvalProtocol(test_fraction=e["test_fraction"], n_runs=e["n_runs"], seed=seed)
