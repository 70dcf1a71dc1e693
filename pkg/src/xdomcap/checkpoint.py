"""Checkpoint I/O: a key=value text manifest plus one little-endian float64 blob.

Layout of ``<dir>/manifest.txt``::

    format=xdomcap-ckpt-1
    role=captioner
    rng_seed=0
    blob=params.bin
    config.hidden_dim=64
    param=embed shape=40x32 offset=0 init=uniform(-0.08,0.08)
    ...

``offset`` counts float64 elements (not bytes) from the start of the blob.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .autodiff import ParamStore

FORMAT = "xdomcap-ckpt-1"
MANIFEST = "manifest.txt"
BLOB = "params.bin"


class CheckpointError(ValueError):
    pass


def save(path, params: ParamStore, role: str, config: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format={FORMAT}", f"role={role}", f"rng_seed={params.rng_seed}", f"blob={BLOB}"]
    for k, v in (config or {}).items():
        lines.append(f"config.{k}={v}")
    chunks = []
    offset = 0
    for name, t in params.items():
        shape = "x".join(str(n) for n in t.shape) or "scalar"
        lines.append(f"param={name} shape={shape} offset={offset} init={params.init_schemes[name]}")
        chunks.append(t.data.astype("<f8").ravel())
        offset += t.data.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    # write blob first, manifest last, each via rename so readers never see a torn pair
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(blob.astype("<f8").tobytes())
    os.replace(tmp, path / BLOB)
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path / MANIFEST)


def read_manifest(path) -> tuple[dict[str, str], dict[str, str], list[dict[str, str]]]:
    header: dict[str, str] = {}
    config: dict[str, str] = {}
    entries: list[dict[str, str]] = []
    text = (Path(path) / MANIFEST).read_text()
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("param="):
            fields = dict(tok.split("=", 1) for tok in line.split(" "))
            fields["name"] = fields.pop("param")
            entries.append(fields)
        elif line.startswith("config."):
            k, v = line[len("config."):].split("=", 1)
            config[k] = v
        else:
            k, v = line.split("=", 1)
            header[k] = v
    if header.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {header.get('format')!r}")
    return header, config, entries


def load(path, role: str | None = None) -> tuple[ParamStore, dict[str, str]]:
    """Return the stored parameters and the raw ``config.*`` strings."""
    path = Path(path)
    header, config, entries = read_manifest(path)
    if role is not None and header.get("role") != role:
        raise CheckpointError(f"expected role {role!r}, checkpoint has {header.get('role')!r}")
    blob = np.frombuffer((path / header.get("blob", BLOB)).read_bytes(), dtype="<f8")
    params = ParamStore(int(header.get("rng_seed", 0)))
    for e in entries:
        shape = () if e["shape"] == "scalar" else tuple(int(n) for n in e["shape"].split("x"))
        size = int(np.prod(shape)) if shape else 1
        off = int(e["offset"])
        if off + size > blob.size:
            raise CheckpointError(f"blob too short for parameter {e['name']}")
        params.add(e["name"], blob[off:off + size].reshape(shape).astype(np.float64), e.get("init", "given"))
    return params, config
