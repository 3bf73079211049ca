"""Command-line pipeline: gen-data, preprocess, pretrain-codes,
pretrain-signals, finetune, embed, eval, report.

Each command reads the run configuration, executes its stage inside the
run directory, and writes a manifest (inputs, config hash, git revision,
wall time).  Exit codes: 0 ok, 1 usage/config, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, checkpoint, report
from .code_encoder import train_code_autoencoder
from .config import RunConfig
from .eicu import ingest_eicu
from .errors import ConfigError, DataError, NumericError
from .forecast import ForecastModel, build_forecast_samples, filter_multistay, finetune
from .preprocess import preprocess_dataset, select_cohort, window_signals
from .probe import task_examples, train_probe
from .psv import PSVModel, assemble_psv, visit_code_steps, visit_series
from .records import load_dataset, save_dataset
from .signal_ae import train_signal_autoencoder
from .synth import generate_cohort
from .training import write_loss_log
from .util import (
    MODALITIES,
    configure_torch_determinism,
    substream_seed,
    write_manifest,
)

logger = logging.getLogger(__name__)

REPR_LABELS = {
    ("psv", "frozen"): "PSV (Code+Signal)",
    ("code", "frozen"): "PSV (Code)",
    ("signal", "frozen"): "PSV (Signal)",
    ("psv", "semi"): "PSV (Semi-supervised)",
    ("skipgram", "frozen"): "Skip-gram Transformer",
    ("seq2seq", "frozen"): "Seq2Seq (Unsupervised)",
    ("seq2seq", "semi"): "Seq2Seq (Semi-supervised)",
}


def _require(path: Path, producer: str, what: str) -> None:
    if not path.exists():
        raise DataError(f"missing {what} at {path}; produce it with `{producer}` first")


def _load_processed(run_dir: Path):
    data_dir = run_dir / "data" / "processed"
    _require(data_dir / "meta.json", "preprocess", "preprocessed dataset")
    return load_dataset(data_dir)


def _cohort_records(cfg: RunConfig, meta, records, cohort_name: str):
    lo, hi = cfg.cohort_bounds(cohort_name)
    kept, _ = select_cohort(records, lo, hi, meta)
    return kept


def _sequences(records, modality: str):
    return [visit_code_steps(rec, modality, 10**9) for rec in records]


def _collect_windows(records, n_channels: int, window: int):
    windows = []
    for rec in records:
        values, mask = visit_series(rec, n_channels)
        windows.extend(window_signals(values, mask, window))
    return windows


def cmd_gen_data(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.get("run", "out_dir"))
    out = Path(args.out) if getattr(args, "out", None) else run_dir / "data" / "raw"
    t0 = time.time()
    source = cfg.get("data", "source")
    if source == "synth":
        meta, records, manifest = generate_cohort(cfg.synth_config())
        save_dataset(out, meta, records)
        with open(out / "synth_manifest.json", "w") as f:
            json.dump(manifest, f, sort_keys=True)
            f.write("\n")
        inputs = ["<synthetic>"]
    elif source == "eicu":
        eicu_dir = cfg.get("data", "eicu_dir")
        if not eicu_dir:
            raise ConfigError("source=eicu requires [data] eicu_dir")
        meta, records = ingest_eicu(eicu_dir)
        save_dataset(out, meta, records)
        inputs = [str(eicu_dir)]
    else:
        raise ConfigError(f"unknown data source {source!r}; expected synth or eicu")
    write_manifest(out, config_hash=cfg.hash(), inputs=inputs, wall_time_s=time.time() - t0,
                   extra={"n_records": len(records)})
    print(f"wrote {len(records)} hospital visits to {out}")
    return 0


def cmd_preprocess(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.get("run", "out_dir"))
    raw_dir = run_dir / "data" / "raw"
    _require(raw_dir / "meta.json", "gen-data", "raw dataset")
    t0 = time.time()
    meta, records = load_dataset(raw_dir)
    new_meta, processed, tally = preprocess_dataset(meta, records, cfg.exclusion_terms())
    out = run_dir / "data" / "processed"
    save_dataset(out, new_meta, processed)

    stats_rows = []
    cohort_names = ["all"] + sorted(cfg.values["cohorts"])
    for name in cohort_names:
        lo, hi = cfg.cohort_bounds(name)
        _, stats = select_cohort(processed, lo, hi, new_meta)
        stats_rows.append({"cohort": name, "min_h": lo, "max_h": hi, **stats.to_dict()})
    import csv as _csv

    with open(out / "cohort_stats.csv", "w", newline="") as f:
        writer = _csv.DictWriter(f, fieldnames=list(stats_rows[0].keys()))
        writer.writeheader()
        writer.writerows(stats_rows)

    write_manifest(out, config_hash=cfg.hash(), inputs=[str(raw_dir)],
                   wall_time_s=time.time() - t0,
                   extra={"excluded": tally.total_excluded(), "retained": tally.retained})
    print(f"preprocessed {tally.retained} visits ({tally.total_excluded()} excluded) -> {out}")
    return 0


def cmd_pretrain_codes(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.get("run", "out_dir"))
    meta, records = _load_processed(run_dir)
    records = _cohort_records(cfg, meta, records, cfg.get("run", "cohort"))
    t0 = time.time()
    seed = int(cfg.get("run", "seed"))
    encoders = {}
    for m in MODALITIES:
        sequences = _sequences(records, m)
        enc_cfg = cfg.code_encoder_config(len(meta.vocab[m]))
        train_cfg = cfg.code_train_config(substream_seed(seed, f"code_ae:{m}"))
        model, log = train_code_autoencoder(sequences, enc_cfg, train_cfg)
        encoders[m] = model
        write_loss_log(run_dir / "logs" / f"code_ae_{m}.csv", log)
        logger.info("code_ae[%s] final loss %.4f", m, log[-1]["loss"] if log else float("nan"))
    path = run_dir / "checkpoints" / "code_ae.pt"
    checkpoint.save_code_towers(
        path, encoders, "code_ae", cfg.to_dict(), meta.vocab,
        optimizer_states={m: encoders[m].final_optimizer_state for m in MODALITIES},
    )
    write_manifest(path.parent, config_hash=cfg.hash(),
                   inputs=[str(run_dir / "data" / "processed")], wall_time_s=time.time() - t0)
    print(f"wrote {path}")
    return 0


def cmd_pretrain_signals(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.get("run", "out_dir"))
    meta, records = _load_processed(run_dir)
    records = _cohort_records(cfg, meta, records, cfg.get("run", "cohort"))
    t0 = time.time()
    seed = int(cfg.get("run", "seed"))
    n_channels = len(meta.channels)
    ae_cfg = cfg.signal_ae_config(n_channels)
    windows = _collect_windows(records, n_channels, ae_cfg.window)
    if not windows:
        raise DataError("no signal windows in the cohort; nothing to pretrain")
    train_cfg = cfg.signal_train_config(substream_seed(seed, "signal_ae"))
    model, log = train_signal_autoencoder(windows, ae_cfg, train_cfg)
    write_loss_log(run_dir / "logs" / "signal_ae.csv", log)
    path = run_dir / "checkpoints" / "signal_ae.pt"
    checkpoint.save_signal_ae(path, model, "signal_ae", cfg.to_dict(), meta.vocab,
                              optimizer_state=model.final_optimizer_state)
    write_manifest(path.parent, config_hash=cfg.hash(),
                   inputs=[str(run_dir / "data" / "processed")], wall_time_s=time.time() - t0)
    print(f"wrote {path} ({len(windows)} windows)")
    return 0


def cmd_finetune(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.get("run", "out_dir"))
    meta, records = _load_processed(run_dir)
    records = _cohort_records(cfg, meta, records, cfg.get("run", "cohort"))
    ckpt_dir = Path(args.from_dir) if getattr(args, "from_dir", None) else run_dir / "checkpoints"
    code_path = ckpt_dir / "code_ae.pt"
    signal_path = ckpt_dir / "signal_ae.pt"
    _require(code_path, "pretrain-codes", "code autoencoder checkpoint")
    _require(signal_path, "pretrain-signals", "signal autoencoder checkpoint")
    t0 = time.time()
    encoders, code_payload = checkpoint.load_code_towers(code_path)
    signal_ae, _ = checkpoint.load_signal_ae(signal_path)
    checkpoint.verify_vocab(code_payload, meta.vocab, code_path)

    multistay = filter_multistay(records)
    n_channels = len(meta.channels)
    window = signal_ae.cfg.window
    vocab_sizes = meta.vocab_sizes()
    samples, skipped = build_forecast_samples(multistay, n_channels, vocab_sizes, window)
    if not samples:
        raise DataError("no forecast samples after filtering; cohort too short for the window")
    model = ForecastModel(PSVModel(encoders, signal_ae), vocab_sizes)
    seed = int(cfg.get("run", "seed"))
    log = finetune(
        model, samples, n_channels, window,
        schedule=cfg.unfreeze_schedule(),
        train_cfg=cfg.finetune_config(substream_seed(seed, "finetune")),
    )
    write_loss_log(run_dir / "logs" / "finetune.csv", log)
    path = run_dir / "checkpoints" / "finetuned.pt"
    checkpoint.save_forecast_model(path, model, "finetuned", cfg.to_dict(), meta.vocab,
                                   extra={"n_samples": len(samples), "skipped": skipped})
    write_manifest(path.parent, config_hash=cfg.hash(),
                   inputs=[str(code_path), str(signal_path)], wall_time_s=time.time() - t0)
    print(f"wrote {path} ({len(samples)} forecast samples, {skipped} skipped)")
    return 0


def _load_psv_model(run_dir: Path) -> PSVModel:
    fine_path = run_dir / "checkpoints" / "finetuned.pt"
    if fine_path.exists():
        model, _ = checkpoint.load_forecast_model(fine_path)
        return model.psv
    code_path = run_dir / "checkpoints" / "code_ae.pt"
    signal_path = run_dir / "checkpoints" / "signal_ae.pt"
    _require(code_path, "pretrain-codes", "code autoencoder checkpoint")
    _require(signal_path, "pretrain-signals", "signal autoencoder checkpoint")
    encoders, _ = checkpoint.load_code_towers(code_path)
    signal_ae, _ = checkpoint.load_signal_ae(signal_path)
    return PSVModel(encoders, signal_ae)


def cmd_embed(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.get("run", "out_dir"))
    meta, records = _load_processed(run_dir)
    cohort = args.cohort or cfg.get("run", "cohort")
    records = _cohort_records(cfg, meta, records, cohort)
    model = _load_psv_model(run_dir)
    t0 = time.time()
    n_channels = len(meta.channels)
    vocab_sizes = meta.vocab_sizes()
    window = model.signal_ae.cfg.window
    out_dir = run_dir / "embeddings"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"psv_{cohort}.jsonl"
    n = 0
    with open(out_path, "w") as f:
        for rec in records:
            for stay in rec.stays:
                t = stay.offset + math.ceil(stay.duration)
                psv = assemble_psv(rec, t, model, n_channels, vocab_sizes, window)
                f.write(json.dumps({
                    "visit_id": rec.visit_id,
                    "stay_id": stay.stay_id,
                    "t": t,
                    "offsets": {k: list(v) for k, v in psv.offsets.items()},
                    "vector": [float(x) for x in psv.vector],
                }, sort_keys=True))
                f.write("\n")
                n += 1
    write_manifest(out_dir, config_hash=cfg.hash(),
                   inputs=[str(run_dir / "checkpoints")], wall_time_s=time.time() - t0)
    print(f"wrote {n} PSVs to {out_path}")
    return 0


def _eval_model(cfg: RunConfig, run_dir: Path, meta, records, repr_name: str):
    """Resolve (model, slice) for a representation; baselines train lazily."""
    vocab_sizes = meta.vocab_sizes()
    n_channels = len(meta.channels)
    seed = int(cfg.get("run", "seed"))
    if repr_name in ("psv", "code", "signal"):
        fine_path = run_dir / "checkpoints" / "finetuned.pt"
        _require(fine_path, "finetune", "fine-tuned checkpoint")
        model, _ = checkpoint.load_forecast_model(fine_path)
        slice_name = None if repr_name == "psv" else repr_name
        return model.psv, slice_name
    if repr_name == "skipgram":
        path = run_dir / "checkpoints" / "skipgram.pt"
        if not path.exists():
            logger.info("training skip-gram baseline (cached at %s)", path)
            encoders = {}
            for m in MODALITIES:
                enc_cfg = cfg.code_encoder_config(len(meta.vocab[m]))
                train_cfg = cfg.code_train_config(substream_seed(seed, f"skipgram:{m}"))
                enc, log = baselines.train_skipgram_encoder(_sequences(records, m), enc_cfg, train_cfg)
                encoders[m] = enc
                write_loss_log(run_dir / "logs" / f"skipgram_{m}.csv", log)
            checkpoint.save_code_towers(path, encoders, "skipgram", cfg.to_dict(), meta.vocab)
        encoders, _ = checkpoint.load_code_towers(path)
        return baselines.wrap_code_encoders(encoders, n_channels), "code"
    if repr_name == "seq2seq":
        signal_path = run_dir / "checkpoints" / "signal_ae.pt"
        _require(signal_path, "pretrain-signals", "signal autoencoder checkpoint")
        signal_ae, _ = checkpoint.load_signal_ae(signal_path)
        return baselines.wrap_signal_ae(signal_ae, vocab_sizes), "signal"
    raise ConfigError(f"unknown representation {repr_name!r}")


def cmd_eval(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.get("run", "out_dir"))
    meta, records = _load_processed(run_dir)
    records = _cohort_records(cfg, meta, records, args.cohort)
    t0 = time.time()
    model, slice_name = _eval_model(cfg, run_dir, meta, records, args.repr)
    examples = task_examples(records, args.task)
    seed = int(cfg.get("run", "seed"))
    protocol = cfg.eval_protocol(substream_seed(seed, f"eval:{args.task}:{args.cohort}"))
    result = train_probe(
        model, examples, args.task, len(meta.channels), meta.vocab_sizes(),
        model.signal_ae.cfg.window, cfg.probe_config(), protocol,
        mode=args.mode, slice_name=slice_name,
    )
    variant = REPR_LABELS.get((args.repr, args.mode), f"{args.repr} ({args.mode})")
    out_dir = run_dir / "results"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"eval_{args.task}_{args.cohort}_{args.repr}_{args.mode}.csv"
    import csv as _csv

    with open(out_path, "w", newline="") as f:
        writer = _csv.DictWriter(f, fieldnames=[
            "task", "cohort", "variant", "repr", "mode", "run", "seed",
            "auroc", "auprc", "n_train", "n_test",
        ])
        writer.writeheader()
        for row in result.runs:
            writer.writerow({
                "task": args.task, "cohort": args.cohort, "variant": variant,
                "repr": args.repr, "mode": args.mode, **row,
            })
    write_manifest(out_dir, config_hash=cfg.hash(), inputs=[str(run_dir / "checkpoints")],
                   wall_time_s=time.time() - t0)
    print(
        f"{variant} on {args.task}/{args.cohort}: "
        f"AU-ROC {result.auroc_mean:.4f} (± {result.auroc_std:.4f}), "
        f"AU-PR {result.auprc_mean:.4f} (± {result.auprc_std:.4f}) -> {out_path}"
    )
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.get("run", "out_dir"))
    written = report.write_report(run_dir)
    if not written:
        print(f"nothing to report under {run_dir} (run `eval` first)")
        return 0
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psvec",
        description="Two-step unsupervised patient-status-vector pipeline",
    )
    parser.add_argument("--config", help="path to a run configuration file")
    parser.add_argument("--run-dir", help="override [run] out_dir")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic cohort (or ingest eICU CSVs)")
    p_gen.add_argument("--out", default=None, help="dataset directory (default: <run-dir>/data/raw)")
    sub.add_parser("preprocess", help="exclusions, binning, normalization, imputation")
    sub.add_parser("pretrain-codes", help="train the three code autoencoders")
    sub.add_parser("pretrain-signals", help="train the signal autoencoder")
    p_ft = sub.add_parser("finetune", help="joint forecasting fine-tune with gradual unfreezing")
    p_ft.add_argument("--from", dest="from_dir", default=None,
                      help="directory holding the autoencoder checkpoints (default: <run-dir>/checkpoints)")

    p_embed = sub.add_parser("embed", help="write one PSV per ICU stay")
    p_embed.add_argument("--cohort", default=None, help="cohort name from [cohorts] or 'all'")

    p_eval = sub.add_parser("eval", help="probe a representation on a downstream task")
    p_eval.add_argument("--task", choices=["mortality", "readmission"], required=True)
    p_eval.add_argument("--cohort", default="all")
    p_eval.add_argument("--mode", choices=["frozen", "semi"], default="frozen")
    p_eval.add_argument("--repr", choices=["psv", "code", "signal", "skipgram", "seq2seq"],
                        default="psv")

    sub.add_parser("report", help="tables and figures from run artifacts")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "pretrain-codes": cmd_pretrain_codes,
    "pretrain-signals": cmd_pretrain_signals,
    "finetune": cmd_finetune,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; our contract reserves 2 for data
        return 0 if exc.code == 0 else 1
    try:
        cfg = RunConfig.load(args.config)
        if args.run_dir:
            cfg.values["run"]["out_dir"] = args.run_dir
        configure_torch_determinism(int(cfg.get("run", "threads")))
        np.seterr(all="warn")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
