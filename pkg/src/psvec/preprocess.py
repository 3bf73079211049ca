"""Preprocessing: exclusions, hourly binning, normalization, imputation,
windowing, and cohort selection.

All functions are pure over records (inputs are deep-copied where mutation
would otherwise leak), so they can be parallelized across patients without
changing output.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .records import DatasetMeta, NormalizerStats, PatientRecord, VitalSample
from .util import MODALITIES

logger = logging.getLogger(__name__)

MIN_AGE_YEARS = 16.0

# The source categories name exclusions but not code sets; these are
# configurable substring matches against code strings.
DEFAULT_EXCLUSION_TERMS = {
    "burns": ["burn"],
    "organ_donor": ["organ donor"],
    "transplant": ["transplant"],
}


@dataclass
class ExclusionTally:
    age_missing: int = 0
    age_below_min: int = 0
    by_category: dict[str, int] = field(default_factory=dict)
    retained: int = 0

    def total_excluded(self) -> int:
        return self.age_missing + self.age_below_min + sum(self.by_category.values())


def apply_exclusions(
    records: list[PatientRecord],
    vocab: dict[str, list[str]],
    terms: dict[str, list[str]] | None = None,
) -> tuple[list[PatientRecord], ExclusionTally]:
    """Drop patients younger than 16 (or with missing age) and patients whose
    code strings match any configured exclusion category.

    Pure filter; applying it twice removes nothing the second time.
    """
    terms = DEFAULT_EXCLUSION_TERMS if terms is None else terms
    lowered = {cat: [t.lower() for t in ts] for cat, ts in terms.items()}
    tally = ExclusionTally(by_category={cat: 0 for cat in lowered})

    kept = []
    for rec in records:
        if rec.demographics.age is None:
            tally.age_missing += 1
            logger.info("excluding %s: missing age", rec.visit_id)
            continue
        if rec.demographics.age < MIN_AGE_YEARS:
            tally.age_below_min += 1
            continue
        hit = _match_category(rec, vocab, lowered)
        if hit is not None:
            tally.by_category[hit] += 1
            continue
        kept.append(rec)
    tally.retained = len(kept)
    return kept, tally


def _match_category(rec: PatientRecord, vocab, lowered) -> str | None:
    for stay in rec.stays:
        for mod in MODALITIES:
            names = vocab.get(mod, [])
            for _, code_id in stay.codes[mod]:
                if code_id >= len(names):
                    continue
                name = names[code_id].lower()
                for cat, ts in lowered.items():
                    if any(t in name for t in ts):
                        return cat
    return None


def bin_samples(samples: list[VitalSample], duration: float, n_channels: int) -> list[VitalSample]:
    """Down-sample minute-stamped vitals to hourly bins.

    Each channel value is the median of its observed values in the bin;
    mask=1 iff at least one observation fell in the bin.  Bins with no
    observations at all are still emitted (all-zero mask), so the series is
    dense over [0, ceil(duration)).  Observations at or past the stay end
    clamp into the final bin.
    """
    n_bins = max(0, math.ceil(duration))
    if n_bins == 0:
        return []
    per_bin: list[list[list[float]]] = [
        [[] for _ in range(n_channels)] for _ in range(n_bins)
    ]
    for sample in samples:
        b = min(int(sample.time) // 60, n_bins - 1)
        for ch in range(n_channels):
            if sample.mask[ch]:
                per_bin[b][ch].append(float(sample.values[ch]))
    binned = []
    for b in range(n_bins):
        values = np.zeros(n_channels, dtype=np.float64)
        mask = np.zeros(n_channels, dtype=np.int8)
        for ch in range(n_channels):
            obs = per_bin[b][ch]
            if obs:
                values[ch] = float(np.median(obs))
                mask[ch] = 1
        binned.append(VitalSample(time=b, values=values, mask=mask))
    return binned


def bin_vitals(record: PatientRecord, n_channels: int) -> PatientRecord:
    """Apply `bin_samples` to every stay of one record."""
    rec = copy.deepcopy(record)
    for stay in rec.stays:
        stay.vitals = bin_samples(stay.vitals, stay.duration, n_channels)
    return rec


def fit_normalizer(
    train_records: list[PatientRecord], channel_names: list[str]
) -> NormalizerStats:
    """Per-channel mean/std/median over observed hourly entries, plus the
    same statistics for continuous demographics.

    Channels never observed (or constant) in the fitting records are marked
    degenerate and dropped from the active feature set instead of being
    scaled by an epsilon.
    """
    n_ch = len(channel_names)
    observed: list[list[float]] = [[] for _ in range(n_ch)]
    for rec in train_records:
        for stay in rec.stays:
            for sample in stay.vitals:
                for ch in range(n_ch):
                    if sample.mask[ch]:
                        observed[ch].append(float(sample.values[ch]))

    mean = np.zeros(n_ch)
    std = np.zeros(n_ch)
    median = np.zeros(n_ch)
    active = []
    for ch in range(n_ch):
        if not observed[ch]:
            logger.warning("channel %s never observed in fitting data; dropped", channel_names[ch])
            continue
        arr = np.asarray(observed[ch])
        mean[ch] = arr.mean()
        std[ch] = arr.std()
        median[ch] = np.median(arr)
        if std[ch] <= 0.0:
            logger.warning("channel %s has zero variance; dropped", channel_names[ch])
            continue
        active.append(ch)

    demo = {"age": [], "weight": [], "height": []}
    for rec in train_records:
        d = rec.demographics
        for name, value in (("age", d.age), ("weight", d.weight), ("height", d.height)):
            if value is not None:
                demo[name].append(float(value))
    demo_mean = np.zeros(3)
    demo_std = np.ones(3)
    demo_median = np.zeros(3)
    for i, name in enumerate(("age", "weight", "height")):
        if demo[name]:
            arr = np.asarray(demo[name])
            demo_mean[i] = arr.mean()
            demo_median[i] = np.median(arr)
            s = arr.std()
            if s > 0:
                demo_std[i] = s
            else:
                logger.warning("demographic %s has zero variance; z-scores collapse to 0", name)
        else:
            logger.warning("demographic %s never observed; z-scores collapse to 0", name)

    return NormalizerStats(
        channel_names=list(channel_names),
        mean=mean, std=std, median=median, active=active,
        demo_mean=demo_mean, demo_std=demo_std, demo_median=demo_median,
    )


def apply_normalizer(records: list[PatientRecord], stats: NormalizerStats) -> list[PatientRecord]:
    """Z-score observed vital entries and continuous demographics.

    Degenerate channels are removed from both values and masks, so the
    downstream feature set contains active channels only.
    """
    active = np.asarray(stats.active, dtype=np.int64)
    out = []
    for rec in records:
        rec = copy.deepcopy(rec)
        for stay in rec.stays:
            for sample in stay.vitals:
                vals = sample.values[active]
                mask = sample.mask[active]
                norm = np.zeros(len(active), dtype=np.float64)
                for k, ch in enumerate(active):
                    if mask[k]:
                        norm[k] = (vals[k] - stats.mean[ch]) / stats.std[ch]
                sample.values = norm
                sample.mask = mask.astype(np.int8)
        d = rec.demographics
        d.age = _norm_demo(d.age, stats, 0)
        d.weight = _norm_demo(d.weight, stats, 1)
        d.height = _norm_demo(d.height, stats, 2)
        out.append(rec)
    return out


def _norm_demo(value, stats: NormalizerStats, idx: int):
    if value is None:
        return None
    return (float(value) - stats.demo_mean[idx]) / stats.demo_std[idx]


def impute(record: PatientRecord, stats: NormalizerStats) -> PatientRecord:
    """Fill masked-out entries on the normalized hourly series.

    A gap is filled with the patient's running mean of values observed
    earlier in the same stay; channels with no prior observation fall back
    to the global median (z-scored).  Missing demographics fall back to the
    global demographic median.  Masks are never modified.
    """
    rec = copy.deepcopy(record)
    active = list(stats.active)
    global_median_z = np.array(
        [(stats.median[ch] - stats.mean[ch]) / stats.std[ch] for ch in active]
    )
    for stay in rec.stays:
        running_sum = np.zeros(len(active))
        running_count = np.zeros(len(active))
        for sample in stay.vitals:
            for k in range(len(active)):
                if sample.mask[k]:
                    continue
                if running_count[k] > 0:
                    sample.values[k] = running_sum[k] / running_count[k]
                else:
                    sample.values[k] = global_median_z[k]
            # update history after filling, so imputation is strictly causal
            for k in range(len(active)):
                if sample.mask[k]:
                    running_sum[k] += sample.values[k]
                    running_count[k] += 1
    d = rec.demographics
    for i, name in enumerate(("age", "weight", "height")):
        if getattr(d, name) is None:
            setattr(d, name, float((stats.demo_median[i] - stats.demo_mean[i]) / stats.demo_std[i]))
    return rec


def stay_series(stay, n_channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense (T, |S|) value and mask arrays for one stay's hourly series."""
    if not stay.vitals:
        return np.zeros((0, n_channels)), np.zeros((0, n_channels), dtype=np.int8)
    T = max(s.time for s in stay.vitals) + 1
    values = np.zeros((T, n_channels), dtype=np.float64)
    mask = np.zeros((T, n_channels), dtype=np.int8)
    for s in stay.vitals:
        values[s.time] = s.values
        mask[s.time] = s.mask
    return values, mask


@dataclass
class VitalWindow:
    """Fixed-length (w, |S|) slice of the hourly series with its mask.

    Padding rows past the end of the series carry zero values and zero mask.
    """

    values: np.ndarray
    mask: np.ndarray
    start: int          # hour of the first row

    @property
    def width(self) -> int:
        return self.values.shape[1]


def window_signals(values: np.ndarray, mask: np.ndarray, w: int = 24) -> list[VitalWindow]:
    """Split an hourly series into ceil(T/w) consecutive non-overlapping
    windows, zero-padding the final partial window with mask=0 rows."""
    T = values.shape[0]
    if T == 0:
        return []
    n_ch = values.shape[1]
    windows = []
    for start in range(0, T, w):
        stop = min(start + w, T)
        v = np.zeros((w, n_ch), dtype=np.float64)
        m = np.zeros((w, n_ch), dtype=np.int8)
        v[: stop - start] = values[start:stop]
        m[: stop - start] = mask[start:stop]
        windows.append(VitalWindow(values=v, mask=m, start=start))
    return windows


@dataclass
class CohortStats:
    n_visits: int
    n_stays: int
    codes_per_visit: dict[str, float]
    vocab_sizes: dict[str, int]
    signal_length_avg: float
    signal_length_min: int
    signal_length_max: int
    n_mortality: int
    n_readmissions: int

    def to_dict(self) -> dict:
        return {
            "n_visits": self.n_visits,
            "n_stays": self.n_stays,
            **{f"{m}_vocab": self.vocab_sizes.get(m, 0) for m in MODALITIES},
            **{f"{m}_per_visit": round(self.codes_per_visit.get(m, 0.0), 4) for m in MODALITIES},
            "signal_length_avg": round(self.signal_length_avg, 2),
            "signal_length_min": self.signal_length_min,
            "signal_length_max": self.signal_length_max,
            "n_mortality": self.n_mortality,
            "n_readmissions": self.n_readmissions,
        }


def signal_length_hours(stay, time_unit: str) -> int:
    """Number of hour bins containing at least one observed value."""
    hours = set()
    for sample in stay.vitals:
        if np.any(np.asarray(sample.mask) == 1):
            hours.add(int(sample.time) // 60 if time_unit == "minute" else int(sample.time))
    return len(hours)


def select_cohort(
    records: list[PatientRecord],
    min_h: float,
    max_h: float,
    meta: DatasetMeta | None = None,
) -> tuple[list[PatientRecord], CohortStats]:
    """Keep ICU stays with min_h <= duration <= max_h; drop hospital visits
    left with no stays; report cohort statistics."""
    if min_h >= max_h:
        raise ConfigError(f"cohort bounds must satisfy min < max, got [{min_h}, {max_h}]")
    kept = []
    for rec in records:
        stays = [s for s in rec.stays if min_h <= s.duration <= max_h]
        if stays:
            kept.append(PatientRecord(rec.visit_id, stays, rec.demographics))

    time_unit = meta.vitals_time_unit if meta else "hour"
    vocab_sizes = meta.vocab_sizes() if meta else {}
    n_stays = sum(len(r.stays) for r in kept)
    code_counts = {m: 0 for m in MODALITIES}
    lengths = []
    n_mort = 0
    n_read = 0
    for rec in kept:
        for stay in rec.stays:
            for m in MODALITIES:
                code_counts[m] += len(stay.codes[m])
            lengths.append(signal_length_hours(stay, time_unit))
            n_mort += int(stay.mortality_label)
            n_read += int(stay.readmitted_label)
    n_visits = len(kept)
    stats = CohortStats(
        n_visits=n_visits,
        n_stays=n_stays,
        codes_per_visit={m: (code_counts[m] / n_visits if n_visits else 0.0) for m in MODALITIES},
        vocab_sizes=vocab_sizes,
        signal_length_avg=float(np.mean(lengths)) if lengths else 0.0,
        signal_length_min=int(np.min(lengths)) if lengths else 0,
        signal_length_max=int(np.max(lengths)) if lengths else 0,
        n_mortality=n_mort,
        n_readmissions=n_read,
    )
    return kept, stats


def preprocess_dataset(
    meta: DatasetMeta,
    records: list[PatientRecord],
    exclusion_terms: dict[str, list[str]] | None = None,
) -> tuple[DatasetMeta, list[PatientRecord], ExclusionTally]:
    """Run the full preprocessing chain: exclusions, hourly binning,
    normalization (fit on the given records), imputation.

    Returns a new dataset at stage "preprocessed" with hourly vitals over
    the active channels only.
    """
    if meta.stage != "raw":
        raise ConfigError(f"preprocess expects a raw dataset, got stage={meta.stage!r}")
    records, tally = apply_exclusions(records, meta.vocab, exclusion_terms)
    n_ch = len(meta.channels)
    if meta.vitals_time_unit == "minute":
        records = [bin_vitals(r, n_ch) for r in records]
    stats = fit_normalizer(records, meta.channels)
    records = apply_normalizer(records, stats)
    records = [impute(r, stats) for r in records]
    new_meta = DatasetMeta(
        stage="preprocessed",
        vitals_time_unit="hour",
        channels=[meta.channels[ch] for ch in stats.active],
        vocab=meta.vocab,
        normalizer=stats,
        extra=dict(meta.extra),
    )
    return new_meta, records, tally
