"""Flat on-disk weight archive and pretrained loading.

Layout of an archive directory::

    index.json   {"format_version": 1, "source": ..., "tensors": {name: {shape, dtype, offset, length}}}
    weights.bin  little-endian float32 blobs, row-major, concatenated
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, LoadError

FORMAT_VERSION = 1
INDEX_NAME = "index.json"
BLOB_NAME = "weights.bin"
_DTYPE = np.dtype("<f4")


@dataclass
class WeightArchive:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    source: str = "unknown"
    format_version: int = FORMAT_VERSION

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name):
        return name in self.entries

    @classmethod
    def from_state_dict(cls, state_dict, source="state_dict", skip=()):
        entries = {}
        for name, tensor in state_dict.items():
            if name.endswith("num_batches_tracked") or any(name.startswith(p) for p in skip):
                continue
            entries[name] = tensor.detach().cpu().numpy().astype(_DTYPE)
        return cls(entries, source=source)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {}
        offset = 0
        with open(directory / BLOB_NAME, "wb") as fh:
            for name in sorted(self.entries):
                blob = np.ascontiguousarray(self.entries[name], dtype=_DTYPE).tobytes()
                fh.write(blob)
                index[name] = {
                    "shape": list(self.entries[name].shape),
                    "dtype": "float32",
                    "offset": offset,
                    "length": len(blob),
                }
                offset += len(blob)
        meta = {"format_version": self.format_version, "source": self.source, "tensors": index}
        (directory / INDEX_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "WeightArchive":
        directory = Path(directory)
        try:
            meta = json.loads((directory / INDEX_NAME).read_text())
            blob = (directory / BLOB_NAME).read_bytes()
        except FileNotFoundError as exc:
            raise LoadError(f"incomplete weight archive at {directory}: {exc.filename} missing") from None
        if meta.get("format_version") != FORMAT_VERSION:
            raise LoadError(f"unsupported archive format {meta.get('format_version')!r}")
        entries = {}
        for name, info in meta["tensors"].items():
            if info.get("dtype", "float32") != "float32":
                raise LoadError(f"{name}: unsupported dtype {info['dtype']}")
            shape = tuple(info["shape"])
            start, length = info["offset"], info["length"]
            if length != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize or start + length > len(blob):
                raise LoadError(f"{name}: stored length {length} does not match shape {shape}")
            entries[name] = np.frombuffer(blob, _DTYPE, count=length // 4, offset=start).reshape(shape).copy()
        return cls(entries, source=meta.get("source", "unknown"))


def load_pretrained(backbone, archive: WeightArchive) -> int:
    """Copy archive tensors into ``backbone``; returns the number loaded.

    Every backbone tensor must be present with an identical shape. Extra
    archive entries (e.g. classification heads) are ignored.
    """
    if backbone.config.channel_scale != 1:
        raise ConfigError("pretrained loading requires channel_scale = 1")
    names = backbone.archive_names()
    missing = [n for n in names if n not in archive]
    if missing:
        raise LoadError(f"archive is missing {len(missing)} tensor(s): {', '.join(missing)}")
    state = backbone.net.state_dict()
    for name in names:
        if tuple(state[name].shape) != archive.entries[name].shape:
            raise LoadError(
                f"shape mismatch for {name}: model {tuple(state[name].shape)} vs archive {archive.entries[name].shape}"
            )
    with torch.no_grad():
        for name in names:
            state[name].copy_(torch.from_numpy(archive.entries[name]))
    return len(names)


def _rules(kind):
    text = resources.files("denrescov").joinpath("data/torchvision_names.json").read_text()
    return json.loads(text)[str(getattr(kind, "value", kind))]


def convert_torchvision(state_dict, kind) -> WeightArchive:
    """Rename a torchvision ImageNet state dict into a backbone archive."""
    rules = _rules(kind)
    renamed = {}
    for name, tensor in state_dict.items():
        if any(name.startswith(p) for p in rules["drop_prefixes"]):
            continue
        for rule in rules["rewrite"]:
            name = re.sub(rule["pattern"], rule["join"], name)
        renamed[name] = tensor
    return WeightArchive.from_state_dict(renamed, source=f"imagenet:{getattr(kind, 'value', kind)}")


def load_pretrained_dir(model, weights_dir) -> int:
    """Load ``<weights_dir>/<kind>/`` archives into every backbone of ``model``."""
    total = 0
    for backbone in model.backbone_modules():
        archive = WeightArchive.load(Path(weights_dir) / backbone.config.kind.value)
        total += load_pretrained(backbone, archive)
    return total
