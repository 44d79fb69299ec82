"""Single-file checkpoint container.

A checkpoint is an uncompressed zip archive with fixed timestamps (so equal
contents give equal bytes) holding:

``manifest.txt``
    ``key value`` header lines (kind, seed, model config, head config)
    followed by one ``entry <name> <dtype> <d0,d1,...>`` line per tensor.
``data.bin``
    the tensors as raw little-endian arrays, concatenated in manifest order.
``extra_manifest.txt`` / ``extra.bin`` (optional)
    the same layout for auxiliary tensors such as optimizer moments.
``state.json`` (optional)
    small JSON document with trainer bookkeeping.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .model import ModelConfig, ParameterStore
from .speaker_head import SpeakerHeadConfig

FORMAT = "oskdft-checkpoint 1"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_NAMES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


class Checkpoint(NamedTuple):
    store: ParameterStore
    extra: dict[str, torch.Tensor]
    state: dict


def _fmt_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _fmt_dc(obj) -> str:
    return " ".join(f"{k}={_fmt_value(v)}" for k, v in asdict(obj).items())


def _parse_dc(cls, text: str):
    kw = dict(item.split("=", 1) for item in text.split())
    out = {}
    for f in fields(cls):
        if f.name not in kw:
            raise CheckpointError(f"{cls.__name__} field {f.name} missing from manifest")
        raw = kw[f.name]
        if f.name == "cnn_strides":
            out[f.name] = tuple(int(x) for x in raw.split(","))
        elif f.type in ("int", int):
            out[f.name] = int(raw)
        elif f.type in ("float", float):
            out[f.name] = float(raw)
        else:
            out[f.name] = raw
    return cls(**out)


def _pack(tensors: dict[str, torch.Tensor]) -> tuple[list[str], bytes]:
    lines, chunks = [], []
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        dtype = str(t.dtype).replace("torch.", "")
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"entry {name} {dtype} {shape}")
        chunks.append(t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes())
    return lines, b"".join(chunks)


def _unpack(lines: list[str], blob: bytes) -> dict[str, torch.Tensor]:
    out, offset = {}, 0
    for line in lines:
        _, name, dtype, shape = (line.split(" ") + [""])[:4]
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        np_dtype = np.dtype(_DTYPES[_NAMES[dtype]])
        n = int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize
        if offset + n > len(blob):
            raise CheckpointError(f"truncated payload at entry {name}")
        arr = np.frombuffer(blob, dtype=np_dtype, count=n // np_dtype.itemsize, offset=offset)
        out[name] = torch.from_numpy(arr.reshape(dims).astype(np_dtype.newbyteorder("="), copy=True))
        offset += n
    if offset != len(blob):
        raise CheckpointError("payload longer than manifest describes")
    return out


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path: str | Path, store: ParameterStore, extra: dict[str, torch.Tensor] | None = None,
                    state: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"format {FORMAT}", f"kind {store.kind}", f"seed {store.seed}",
              f"config {_fmt_dc(store.config)}",
              f"head {_fmt_dc(store.head) if store.head is not None else 'none'}"]
    lines, blob = _pack(store.entries)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write(zf, "manifest.txt", ("\n".join(header + lines) + "\n").encode())
        _write(zf, "data.bin", blob)
        if extra:
            xlines, xblob = _pack(extra)
            _write(zf, "extra_manifest.txt", ("\n".join(xlines) + "\n").encode())
            _write(zf, "extra.bin", xblob)
        if state is not None:
            _write(zf, "state.json", json.dumps(state, sort_keys=True, indent=1).encode())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
        lines = zf.read("manifest.txt").decode().splitlines()
        blob = zf.read("data.bin")
        extra = {}
        if "extra_manifest.txt" in names:
            extra = _unpack(zf.read("extra_manifest.txt").decode().splitlines(), zf.read("extra.bin"))
        state = json.loads(zf.read("state.json")) if "state.json" in names else {}
    header = {}
    entries = []
    for line in lines:
        key, _, rest = line.partition(" ")
        if key == "entry":
            entries.append(line)
        else:
            header[key] = rest
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unrecognised format {header.get('format')!r}")
    cfg = _parse_dc(ModelConfig, header["config"])
    head = None if header["head"] == "none" else _parse_dc(SpeakerHeadConfig, header["head"])
    store = ParameterStore(_unpack(entries, blob), cfg, int(header["seed"]), header["kind"], head)
    store.validate()
    return Checkpoint(store, extra, state)


def load_checkpoint(path: str | Path) -> ParameterStore:
    return read_checkpoint(path).store
