"""Shared helpers: deterministic sub-seeding, hashing, small I/O utilities."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

MODALITIES = ("diagnosis", "medication", "treatment")


def substream_seed(root_seed: int, name: str) -> int:
    """Derive a stage-specific seed from the root seed.

    Named substreams keep stages independent: changing e.g. the eval seed
    cannot perturb pretraining randomness.
    """
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**32)


def rng_for(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root_seed, name))


def seed_torch(root_seed: int, name: str) -> torch.Generator:
    """Seed torch's global RNG for a named stage and return a local generator."""
    seed = substream_seed(root_seed, name)
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def configure_torch_determinism(num_threads: int = 1) -> None:
    # Single-threaded CPU math keeps reductions bit-reproducible run to run.
    torch.set_num_threads(num_threads)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj) -> str:
    """Hash of a canonical JSON serialization (key order independent)."""
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def hash_state_dict(state_dict: dict) -> str:
    """Order-independent hash of parameter tensors; used for freeze contracts."""
    h = hashlib.sha256()
    for key in sorted(state_dict):
        h.update(key.encode())
        h.update(state_dict[key].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def git_describe(cwd: str | Path | None = None) -> str:
    import subprocess

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, cwd=cwd, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(stage_dir: str | Path, *, config_hash: str, inputs: list[str],
                   wall_time_s: float, extra: dict | None = None) -> None:
    stage_dir = Path(stage_dir)
    stage_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": config_hash,
        "inputs": inputs,
        "git": git_describe(),
        "wall_time_s": round(wall_time_s, 3),
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    with open(stage_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def ensure_dir(path: str | Path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
