"""Checkpoint container: a zip archive holding ``manifest.json`` plus one raw
little-endian payload per parameter (and, optionally, its Adam moments).

Entries carry a fixed timestamp so identical models give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

FORMAT = "gliomaseg-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _add(zf: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, named_params: list, manifest_extra: dict | None = None,
                    include_optimizer: bool = True) -> Path:
    """Write ``[(name, Parameter), ...]`` to ``path``.

    ``manifest_extra`` is merged into the manifest (op list, seed, step count,
    model config...).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, p in named_params:
            dt = np.dtype(p.data.dtype).newbyteorder("<")
            _add(zf, f"params/{name}.bin", np.ascontiguousarray(p.data, dtype=dt).tobytes())
            entry = {"name": name, "shape": list(p.data.shape), "dtype": dt.str}
            if include_optimizer:
                _add(zf, f"adam/{name}.m.bin", np.ascontiguousarray(p.m, dtype="<f8").tobytes())
                _add(zf, f"adam/{name}.v.bin", np.ascontiguousarray(p.v, dtype="<f8").tobytes())
                entry["adam_step"] = int(p.step)
            entries.append(entry)
        manifest = {"format": FORMAT, "version": VERSION, "params": entries}
        manifest.update(manifest_extra or {})
        _add(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(manifest, {name: (values, m, v, step)})``."""
    try:
        zf = zipfile.ZipFile(Path(path))
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint container ({exc})") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path}: manifest.json missing") from None
        if manifest.get("format") != FORMAT or "version" not in manifest:
            raise CheckpointError(f"{path}: missing format/version tag")
        if manifest["version"] != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {manifest['version']}")
        names = set(zf.namelist())
        tensors = {}
        for entry in manifest["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            vals = np.frombuffer(zf.read(f"params/{name}.bin"), dtype=entry["dtype"])
            if vals.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: payload size mismatch for {name}")
            vals = vals.reshape(shape).astype(np.dtype(entry["dtype"]).newbyteorder("="))
            m = v = None
            if f"adam/{name}.m.bin" in names:
                m = np.frombuffer(zf.read(f"adam/{name}.m.bin"), dtype="<f8").reshape(shape).copy()
                v = np.frombuffer(zf.read(f"adam/{name}.v.bin"), dtype="<f8").reshape(shape).copy()
            tensors[name] = (vals, m, v, int(entry.get("adam_step", 0)))
    return manifest, tensors
