"""Fit directories: one ``.npy`` matrix per chain plus a JSON manifest."""

from __future__ import annotations

import json
import subprocess
from pathlib import Path

import numpy as np

from .. import __version__
from ..models import Registry
from .sampler import PosteriorSamples, SamplerConfig

MANIFEST = "manifest.json"
SUMMARY = "summary.json"


def code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def save_samples(samples: PosteriorSamples, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, draws in enumerate(samples.chains):
        name = f"chain_{k:02d}.npy"
        np.save(out / name, np.ascontiguousarray(draws, dtype=np.float64))
        files.append(name)
    manifest = {
        "format": "diseasemap-samples/1",
        "chains": files,
        "registry": samples.registry.to_json(),
        "config": samples.config.to_dict() if samples.config else None,
        "seed": samples.config.seed if samples.config else None,
        "acceptance": samples.acceptance,
        "model": samples.model,
        "code_version": code_version(),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_samples(fit_dir) -> PosteriorSamples:
    fit_dir = Path(fit_dir)
    manifest = json.loads((fit_dir / MANIFEST).read_text())
    chains = [np.load(fit_dir / f) for f in manifest["chains"]]
    config = SamplerConfig(**manifest["config"]) if manifest.get("config") else None
    return PosteriorSamples(
        chains=chains,
        registry=Registry.from_json(manifest["registry"]),
        acceptance=manifest.get("acceptance", {}),
        config=config,
        model=manifest.get("model", {}),
    )
