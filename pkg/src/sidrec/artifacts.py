"""Versioned on-disk artifacts: checkpoints, SID maps, JSON stage outputs.

Every artifact records the structural config hash of the run that produced
it; downstream stages refuse inputs whose hash disagrees with their own
configuration.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .config import PipelineConfig

VERSION = 1

Sid = tuple[int, ...]


class ArtifactError(RuntimeError):
    """Missing, malformed, or incompatible stage artifact."""


def _header(kind: str, cfg: PipelineConfig, seed: int) -> dict:
    return {
        "format": f"sidrec-{kind}",
        "version": VERSION,
        "config_hash": cfg.structural_hash(),
        "seed": seed,
    }


def _check_header(header: dict, kind: str, path, cfg: PipelineConfig | None) -> None:
    fmt = header.get("format")
    if fmt != f"sidrec-{kind}":
        raise ArtifactError(f"{path}: expected a sidrec-{kind} artifact, found {fmt!r}")
    if header.get("version") != VERSION:
        raise ArtifactError(f"{path}: unsupported artifact version {header.get('version')}")
    if cfg is not None and header.get("config_hash") != cfg.structural_hash():
        raise ArtifactError(
            f"{path}: config hash mismatch (artifact {header.get('config_hash')}, "
            f"current {cfg.structural_hash()}); the structural configuration changed "
            "between stages — regenerate upstream artifacts or restore the config"
        )


def require(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact: expected {what} at {path}")
    return path


def save_json(path: str | Path, kind: str, cfg: PipelineConfig, seed: int, payload: dict) -> None:
    record = {**_header(kind, cfg, seed), **payload}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path: str | Path, kind: str, cfg: PipelineConfig | None = None) -> dict:
    path = require(path, f"{kind} artifact")
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    _check_header(record, kind, path, cfg)
    return record


def save_checkpoint(
    path: str | Path, kind: str, cfg: PipelineConfig, seed: int, payload: dict
) -> None:
    torch.save({**_header(kind, cfg, seed), "config": cfg.to_dict(), **payload}, path)


def load_checkpoint(path: str | Path, kind: str, cfg: PipelineConfig | None = None) -> dict:
    path = require(path, f"{kind} checkpoint")
    record = torch.load(path, weights_only=False)
    _check_header(record, kind, path, cfg)
    return record


def write_sid_map(path: str | Path, sid_map: dict[str, Sid]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in sorted(sid_map):
            codes = ",".join(str(c) for c in sid_map[item])
            fh.write(f"{item}\t{codes}\n")


def read_sid_map(path: str | Path) -> dict[str, Sid]:
    path = require(path, "SID map")
    out: dict[str, Sid] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ArtifactError(f"{path}:{lineno}: expected item<TAB>codes")
            out[parts[0]] = tuple(int(c) for c in parts[1].split(","))
    return out


def save_meta(path: str | Path, kind: str, cfg: PipelineConfig, seed: int) -> None:
    """Sidecar header for plain TSV artifacts."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_header(kind, cfg, seed), fh, indent=2, sort_keys=True)
        fh.write("\n")


def check_meta(path: str | Path, kind: str, cfg: PipelineConfig) -> None:
    path = require(path, f"{kind} metadata")
    with open(path, encoding="utf-8") as fh:
        _check_header(json.load(fh), kind, path, cfg)
