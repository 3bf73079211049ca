"""Seeded synthetic EHR cohort generator with planted label signal.

Labels come from logistic mechanisms over known sufficient statistics
(risk-code counts and vital-drift latents), so a closed-form Bayes oracle
exists for every generated cohort.  Content and label randomness live on
separate per-visit substreams: re-running with different mechanism weights
reuses identical patient content, which lets one cohort carry several label
variants for ablation studies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError
from .records import DatasetMeta, Demographics, ICUStay, PatientRecord, VitalSample
from .util import MODALITIES, rng_for

logger = logging.getLogger(__name__)


@dataclass
class MechanismWeights:
    """Logistic label mechanism: bias + code*w_code + signal*w_signal +
    code*signal*w_interaction, over standardized sufficient statistics."""

    bias: float = -1.6
    w_code: float = 1.4
    w_signal: float = 1.4
    w_interaction: float = 0.8

    def logit(self, x_code: float, x_signal: float) -> float:
        return (
            self.bias
            + self.w_code * x_code
            + self.w_signal * x_signal
            + self.w_interaction * x_code * x_signal
        )


@dataclass
class SynthConfig:
    seed: int = 0
    n_patients: int = 200
    vocab_sizes: dict[str, int] = field(
        default_factory=lambda: {"diagnosis": 60, "medication": 50, "treatment": 40}
    )
    codes_per_visit: dict[str, float] = field(
        default_factory=lambda: {"diagnosis": 3.075, "medication": 8.52, "treatment": 2.85}
    )
    n_vital_channels: int = 4
    missing_rate: float = 0.3
    sample_interval_min: int = 10
    duration_log_mean: float = 3.4      # lognormal hours, ~30h median
    duration_log_sd: float = 0.5
    duration_min_h: float = 2.0
    duration_max_h: float = 120.0
    risk_set_size: int = 6
    risk_plant_prob: float = 0.35       # prob. a risk-modality draw comes from the risk set
    risk_propensity_sd: float = 0.8     # per-visit lognormal spread of that probability
    signal_drift_magnitude: float = 3.0
    signal_noise_scale: float = 4.0     # amplitude of the AR(1) component
    signal_offset_sd: float = 2.0       # per-patient channel offsets
    mortality: MechanismWeights = field(default_factory=MechanismWeights)
    readmission: MechanismWeights = field(
        default_factory=lambda: MechanismWeights(bias=-1.2, w_code=1.2, w_signal=1.2, w_interaction=0.6)
    )
    n_stays_min: int = 1
    extra_stay_prob: float = 0.08       # chance of a third stay after a readmission

    def validate(self) -> None:
        for rate in (self.missing_rate, self.risk_plant_prob, self.extra_stay_prob):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"rates must lie in [0,1], got {rate}")
        if self.vocab_sizes["diagnosis"] < self.risk_set_size:
            raise ConfigError("diagnosis vocab smaller than risk-code set")
        if self.vocab_sizes["medication"] < self.risk_set_size:
            raise ConfigError("medication vocab smaller than risk-code set")
        if self.n_patients < 1 or self.n_vital_channels < 1:
            raise ConfigError("n_patients and n_vital_channels must be positive")
        if self.duration_min_h >= self.duration_max_h:
            raise ConfigError("duration bounds inverted")

    def to_dict(self) -> dict:
        return asdict(self)


# per-channel synthetic baselines; channel 0 carries the mortality drift,
# channel 1 the readmission drift
def _channel_base(ch: int) -> float:
    return 60.0 + 12.0 * ch


def _vocab_names(cfg: SynthConfig) -> dict[str, list[str]]:
    prefix = {"diagnosis": "diag", "medication": "med", "treatment": "treat"}
    return {
        m: [f"{prefix[m]}_{i:04d}" for i in range(cfg.vocab_sizes[m])]
        for m in MODALITIES
    }


def _risk_standardizer(cfg: SynthConfig, modality: str) -> tuple[float, float]:
    """Fixed (center, scale) for raw risk-code counts, from Poisson thinning."""
    rate = cfg.codes_per_visit[modality]
    v = cfg.vocab_sizes[modality]
    p_risk = cfg.risk_plant_prob + (1.0 - cfg.risk_plant_prob) * cfg.risk_set_size / v
    mean = rate * p_risk
    return mean, math.sqrt(max(mean, 1e-9))


def _visit_risk_prob(rng, cfg: SynthConfig) -> float:
    """Per-visit planting probability: a persistent severity latent, so risk
    codes recur across the whole visit instead of arriving independently."""
    sd = cfg.risk_propensity_sd
    scale = math.exp(sd * rng.normal() - 0.5 * sd * sd)
    return float(min(cfg.risk_plant_prob * scale, 0.9))


def _draw_codes(rng, cfg: SynthConfig, modality: str, n: int, risk_p: float) -> list[int]:
    """Draw code ids; a risk_p fraction is planted from the risk set
    (indices [0, risk_set_size))."""
    v = cfg.vocab_sizes[modality]
    out = []
    for _ in range(n):
        if risk_p > 0.0 and rng.random() < risk_p:
            out.append(int(rng.integers(0, cfg.risk_set_size)))
        else:
            out.append(int(rng.integers(0, v)))
    return out


def _gen_stay_vitals(rng, cfg: SynthConfig, duration_h: float,
                     drift0: float, drift1: float) -> list[VitalSample]:
    n_ch = cfg.n_vital_channels
    total_min = int(duration_h * 60)
    times = np.arange(0, total_min, cfg.sample_interval_min)
    if len(times) == 0:
        return []
    n = len(times)
    offsets = rng.normal(0.0, cfg.signal_offset_sd, size=n_ch)
    phi = 0.9
    state = rng.normal(0.0, 1.0, size=n_ch)
    eps = rng.normal(0.0, 0.5, size=(n, n_ch))
    observed = rng.random((n, n_ch)) >= cfg.missing_rate

    states = np.empty((n, n_ch))
    for k in range(n):
        state = phi * state + eps[k]
        states[k] = state
    base = np.array([_channel_base(c) for c in range(n_ch)])
    values = base + offsets + cfg.signal_noise_scale * states
    frac = times / max(total_min, 1)
    values[:, 0] += cfg.signal_drift_magnitude * drift0 * frac
    if n_ch > 1:
        values[:, 1] += cfg.signal_drift_magnitude * drift1 * frac
    mask = observed.astype(np.int8)
    values = np.round(values * mask, 3)

    keep = np.nonzero(mask.any(axis=1))[0]
    return [VitalSample(time=int(times[k]), values=values[k], mask=mask[k]) for k in keep]


def _gen_visit(cfg: SynthConfig, idx: int) -> tuple[PatientRecord, list[dict]]:
    content = rng_for(cfg.seed, f"content:{idx}")
    labels = rng_for(cfg.seed, f"labels:{idx}")
    visit_id = f"v{idx:06d}"

    demo = Demographics(
        age=float(np.round(content.uniform(18.0, 90.0), 1)),
        weight=float(np.round(content.normal(80.0, 15.0), 1)),
        height=float(np.round(content.normal(170.0, 10.0), 1)),
        gender="F" if content.random() < 0.5 else "M",
    )

    # visit-level code budgets, split over stays by duration share
    budgets = {m: int(content.poisson(cfg.codes_per_visit[m])) for m in MODALITIES}
    risk_p_diag = _visit_risk_prob(content, cfg)
    risk_p_med = _visit_risk_prob(content, cfg)

    # readmission sufficient statistics live in the first stay
    g_read = float(content.normal(0.0, 1.0))
    u_read = float(labels.random())

    mc_center, mc_scale = _risk_standardizer(cfg, "diagnosis")
    rc_center, rc_scale = _risk_standardizer(cfg, "medication")

    stays: list[dict] = []
    durations: list[float] = []
    offset = int(content.integers(0, 7))

    def new_stay(stay_index: int) -> dict:
        nonlocal offset
        d = float(np.exp(content.normal(cfg.duration_log_mean, cfg.duration_log_sd)))
        d = float(np.round(min(max(d, cfg.duration_min_h), cfg.duration_max_h), 1))
        g_mort = float(content.normal(0.0, 1.0))
        u_mort = float(labels.random())
        stay = {
            "index": stay_index,
            "offset": offset,
            "duration": d,
            "g_mort": g_mort,
            "u_mort": u_mort,
            "codes": {m: [] for m in MODALITIES},
        }
        offset += math.ceil(d) + int(content.integers(1, 25))
        durations.append(d)
        return stay

    stays.append(new_stay(0))

    # the readmission mechanism reads the medication risk count, so those
    # codes are drawn now (they all land in stay 0) and the outcome decides
    # whether further stays exist
    med_codes = _draw_codes(content, cfg, "medication", budgets["medication"], risk_p_med)
    x_read_raw = sum(1 for c in med_codes if c < cfg.risk_set_size)
    z_read = (x_read_raw - rc_center) / rc_scale
    read_logit = cfg.readmission.logit(z_read, g_read)
    readmitted = u_read < _sigmoid(read_logit)

    n_stays = max(cfg.n_stays_min, 2 if readmitted else 1)
    if n_stays >= 2 and content.random() < cfg.extra_stay_prob:
        n_stays += 1
    while len(stays) < n_stays:
        stays.append(new_stay(len(stays)))

    total_dur = sum(durations)
    shares = [d / total_dur for d in durations]

    # medication codes all land in stay 0 (they back the readmission stat);
    # other modalities spread over stays by duration share
    for c in med_codes:
        hour = int(content.integers(0, max(1, math.ceil(durations[0]))))
        stays[0]["codes"]["medication"].append((hour, c))
    for modality in ("diagnosis", "treatment"):
        codes = _draw_codes(content, cfg, modality, budgets[modality],
                            risk_p_diag if modality == "diagnosis" else 0.0)
        for c in codes:
            j = int(content.choice(len(stays), p=shares))
            hour = int(content.integers(0, max(1, math.ceil(durations[j]))))
            stays[j]["codes"][modality].append((hour, c))

    built = []
    manifest_rows = []
    for j, stay in enumerate(stays):
        x_mort_raw = sum(1 for _, c in stay["codes"]["diagnosis"] if c < cfg.risk_set_size)
        z_mort = (x_mort_raw - mc_center) / mc_scale
        mort_logit = cfg.mortality.logit(z_mort, stay["g_mort"])
        mortality = stay["u_mort"] < _sigmoid(mort_logit)
        drift1 = g_read if j == 0 else 0.0
        vitals = _gen_stay_vitals(content, cfg, stay["duration"], stay["g_mort"], drift1)
        stay_id = f"{visit_id}-{j}"
        built.append(
            ICUStay(
                stay_id=stay_id,
                offset=stay["offset"],
                duration=stay["duration"],
                codes={m: sorted(stay["codes"][m]) for m in MODALITIES},
                vitals=vitals,
                mortality_label=bool(mortality),
                readmitted_label=j < len(stays) - 1,
            )
        )
        manifest_rows.append({
            "visit_id": visit_id,
            "stay_id": stay_id,
            "stay_index": j,
            "mort_code_count": x_mort_raw,
            "mort_drift": stay["g_mort"],
            "mort_logit": mort_logit,
            "mort_label": int(mortality),
            "read_code_count": x_read_raw if j == 0 else None,
            "read_drift": g_read if j == 0 else None,
            "read_logit": read_logit if j == 0 else None,
            "read_label": int(built[-1].readmitted_label),
        })
    return PatientRecord(visit_id=visit_id, stays=built, demographics=demo), manifest_rows


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def generate_cohort(cfg: SynthConfig) -> tuple[DatasetMeta, list[PatientRecord], dict]:
    """Generate a cohort in the raw interchange format plus a ground-truth
    manifest (mechanism parameters and per-stay sufficient statistics)."""
    cfg.validate()
    records = []
    rows = []
    for idx in range(cfg.n_patients):
        rec, stay_rows = _gen_visit(cfg, idx)
        records.append(rec)
        rows.extend(stay_rows)
    meta = DatasetMeta(
        stage="raw",
        vitals_time_unit="minute",
        channels=[f"ch{c}" for c in range(cfg.n_vital_channels)],
        vocab=_vocab_names(cfg),
        extra={"source": "synth"},
    )
    manifest = {"config": cfg.to_dict(), "stays": rows}
    return meta, records, manifest


def generate_multistay_visits(cfg: SynthConfig) -> tuple[DatasetMeta, list[PatientRecord], dict]:
    """Same generator with every hospital visit forced to >= 2 ICU stays."""
    import copy as _copy

    cfg = _copy.deepcopy(cfg)
    cfg.n_stays_min = max(cfg.n_stays_min, 2)
    return generate_cohort(cfg)


def bayes_oracle_auc(manifest: dict, task: str = "mortality") -> float:
    """AUC of the true mechanism logits against the sampled labels: the
    ceiling any classifier can reach on this cohort."""
    from .metrics import auroc

    if task == "mortality":
        scores = [r["mort_logit"] for r in manifest["stays"]]
        labels = [r["mort_label"] for r in manifest["stays"]]
    else:
        scores = [r["read_logit"] for r in manifest["stays"] if r["stay_index"] == 0]
        labels = [r["read_label"] for r in manifest["stays"] if r["stay_index"] == 0]
    return auroc(scores, labels)
