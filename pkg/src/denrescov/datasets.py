"""Dataset recipes (DXR1-DXR4) and Monte Carlo train/test splits.

Source cohorts are directories with one subdirectory per class, e.g.
``source2/covid/*.png``. Class subdirectory names are matched
case-insensitively against :data:`CLASS_ALIASES`.
"""
from __future__ import annotations

import csv
import io
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import CompositionError, ConfigError, DataError
from .seeding import rng_for

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
SOURCES = ("source1", "source2", "source3")
CLASS_ALIASES = {
    "covid": ("covid", "covid-19", "covid19"),
    "pneumonia": ("pneumonia",),
    "tb": ("tb", "tuberculosis"),
    "healthy": ("healthy", "normal"),
}

# recipe: classes in vocabulary order, then per-class list of (source, count)
RECIPES = {
    "DXR1": {
        "classes": ("pneumonia", "healthy"),
        "draws": {"pneumonia": [("source1", 3883)], "healthy": [("source1", 1350)]},
    },
    "DXR2": {
        "classes": ("covid", "pneumonia", "healthy"),
        "draws": {
            "covid": [("source2", 69)],
            "pneumonia": [("source2", 79)],
            "healthy": [("source2", 79)],
        },
    },
    "DXR3": {
        "classes": ("covid", "pneumonia", "tb", "healthy"),
        "draws": {
            "covid": [("source2", 69)],
            "pneumonia": [("source2", 79)],
            "tb": [("source3", 79)],
            "healthy": [("source2", 79)],
        },
    },
    "DXR4": {
        "classes": ("covid", "pneumonia", "tb", "healthy"),
        "draws": {
            "covid": [("source2", 69)],
            "pneumonia": [("source2", 79), ("source1", 221)],
            "tb": [("source3", 310)],
            "healthy": [("source1", 110), ("source2", 110), ("source3", 110)],
        },
        # per-source healthy quotas are nominal; shortfalls move to other sources
        "flexible": {"healthy"},
    },
}


@dataclass(frozen=True)
class ImageSample:
    id: str
    path: str
    label: str
    source: str


@dataclass
class DatasetManifest:
    name: str
    classes: list[str]
    samples: list[ImageSample]
    seed: int = 0

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = [k for k, v in Counter(ids).items() if v > 1]
            raise DataError(f"duplicate sample ids: {dup[:5]}")
        bad = {s.label for s in self.samples} - set(self.classes)
        if bad:
            raise DataError(f"labels {sorted(bad)} not in class vocabulary {self.classes}")

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]

    def subset(self, ids) -> "DatasetManifest":
        by_id = {s.id: s for s in self.samples}
        return DatasetManifest(self.name, list(self.classes), [by_id[i] for i in ids], self.seed)

    def labels_index(self) -> list[int]:
        lookup = {c: i for i, c in enumerate(self.classes)}
        return [lookup[s.label] for s in self.samples]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "path", "label", "source"])
        for s in self.samples:
            writer.writerow([s.id, s.path, s.label, s.source])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8", newline="\n")
        return path

    @classmethod
    def read(cls, path, name=None, classes=None) -> "DatasetManifest":
        path = Path(path)
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                rows = list(csv.DictReader(fh))
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}") from None
        if rows and set(rows[0]) != {"id", "path", "label", "source"}:
            raise DataError(f"{path}: header must be id,path,label,source")
        samples = [ImageSample(r["id"], r["path"], r["label"], r["source"]) for r in rows]
        if classes is None:
            name = name or path.stem
            recipe = RECIPES.get(name.upper())
            present = {s.label for s in samples}
            if recipe and present <= set(recipe["classes"]):
                classes = list(recipe["classes"])
            else:
                classes = sorted(present)
        return cls(name or path.stem, list(classes), samples)


def sanitize(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._/-]+", "_", text)


def list_class_images(source_dir, label) -> list[Path]:
    """Sorted image files of one class inside a source directory."""
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise DataError(f"source directory not found: {source_dir}")
    aliases = CLASS_ALIASES[label]
    files = []
    for sub in sorted(source_dir.iterdir()):
        if sub.is_dir() and sub.name.lower() in aliases:
            files.extend(p for p in sub.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    return sorted(files)


def _choose(candidates, count, seed, *labels):
    rng = rng_for(seed, *labels)
    picked = rng.choice(len(candidates), size=count, replace=False)
    return [candidates[i] for i in sorted(picked)]


def compose_dataset(name, source_dirs: dict, seed: int = 0) -> DatasetManifest:
    """Build a recipe's manifest by seeded sampling from the source cohorts.

    ``source_dirs`` maps ``source1``/``source2``/``source3`` to directories.
    Selection works on sorted file lists, so the result does not depend on
    directory listing order.
    """
    key = str(name).upper()
    if key not in RECIPES:
        raise ConfigError(f"unknown dataset recipe {name!r}; choose from {sorted(RECIPES)}")
    recipe = RECIPES[key]
    needed = {src for draws in recipe["draws"].values() for src, _ in draws}
    for src in sorted(needed):
        if src not in source_dirs or source_dirs[src] is None:
            raise ConfigError(f"{key} needs a directory for {src}")
        if not Path(source_dirs[src]).is_dir():
            raise DataError(f"source directory not found: {source_dirs[src]}")

    samples = []
    for label in recipe["classes"]:
        draws = recipe["draws"][label]
        pools = {src: list_class_images(source_dirs[src], label) for src, _ in draws}
        quotas = dict(draws)
        if label in recipe.get("flexible", ()):
            quotas = _rebalance(quotas, {s: len(p) for s, p in pools.items()})
        shortfalls = [
            f"{src} has {len(pools[src])}, needs {n} (short {n - len(pools[src])})"
            for src, n in quotas.items()
            if len(pools[src]) < n
        ]
        if shortfalls:
            raise CompositionError(f"{key}: class '{label}' undersupplied: " + "; ".join(shortfalls))
        for src, n in quotas.items():
            root = Path(source_dirs[src])
            # keyed by cohort draw, not recipe, so DXR3 reuses DXR2's images
            for path in _choose(pools[src], n, seed, "draw", label, src):
                rel = path.relative_to(root).with_suffix("")
                sid = sanitize(f"{src}/{rel.as_posix()}")
                samples.append(ImageSample(sid, str(path), label, src))
    return DatasetManifest(key, list(recipe["classes"]), samples, seed)


def _rebalance(quotas, available):
    """Move any per-source deficit to sources with spare images, in source order."""
    quotas = dict(quotas)
    deficit = 0
    for src, n in quotas.items():
        if available[src] < n:
            deficit += n - available[src]
            quotas[src] = available[src]
    for src in quotas:
        if not deficit:
            break
        take = min(deficit, available[src] - quotas[src])
        quotas[src] += take
        deficit -= take
    if deficit:
        # report against the nominal quotas
        first = next(iter(quotas))
        quotas[first] += deficit
    return quotas


def class_counts(samples, classes=None) -> dict[str, int]:
    """Per-class tally of a manifest or a list of samples/labels."""
    if isinstance(samples, DatasetManifest):
        classes = samples.classes if classes is None else classes
        samples = samples.samples
    labels = [s.label if isinstance(s, ImageSample) else s for s in samples]
    counts = Counter(labels)
    keys = list(classes) if classes is not None else sorted(counts)
    return {c: counts.get(c, 0) for c in keys}


# ------------------------------------------------------------------ splits


@dataclass
class SplitPlan:
    folds: list[tuple[list[str], list[str]]] = field(default_factory=list)
    train_fraction: float = 0.7
    seed: int = 0

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for k, (train, test) in enumerate(self.folds, start=1):
            for part, ids in (("train", train), ("test", test)):
                path = directory / f"fold{k}_{part}.csv"
                path.write_text("id\n" + "".join(f"{i}\n" for i in ids), encoding="utf-8", newline="\n")
                written.append(path)
        return written

    @classmethod
    def read(cls, directory) -> "SplitPlan":
        directory = Path(directory)
        folds = []
        k = 1
        while (directory / f"fold{k}_train.csv").exists():
            parts = []
            for part in ("train", "test"):
                lines = (directory / f"fold{k}_{part}.csv").read_text(encoding="utf-8").splitlines()
                parts.append([line for line in lines[1:] if line])
            folds.append(tuple(parts))
            k += 1
        if not folds:
            raise DataError(f"no fold files in {directory}")
        return cls(folds)


def train_size(n: int, fraction: float) -> int:
    """``round(fraction * n)`` with halves rounded up, on the exact value of ``fraction``."""
    product = Fraction(fraction) * n
    return int(product + Fraction(1, 2)) if product >= 0 else 0


def monte_carlo_split(manifest_or_ids, folds: int = 4, train_fraction: float = 0.7, seed: int = 0,
                      stratify: bool = False) -> SplitPlan:
    """Independent shuffle-and-cut splits; folds may overlap each other."""
    if folds < 1:
        raise ConfigError(f"folds must be >= 1, got {folds}")
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if isinstance(manifest_or_ids, DatasetManifest):
        ids = sorted(manifest_or_ids.ids)
        label_of = {s.id: s.label for s in manifest_or_ids.samples}
    else:
        ids = sorted(manifest_or_ids)
        label_of = None
        if stratify:
            raise ConfigError("stratified splits need a manifest")
    n_train = train_size(len(ids), train_fraction)
    if n_train == 0 or n_train == len(ids):
        raise ConfigError(
            f"train_fraction {train_fraction} on {len(ids)} samples leaves an empty train or test set"
        )
    plan = SplitPlan([], train_fraction, seed)
    for k in range(folds):
        rng = rng_for(seed, "split", k)
        if stratify:
            train, test = [], []
            for label in sorted(set(label_of.values())):
                group = [i for i in ids if label_of[i] == label]
                order = rng.permutation(len(group))
                cut = train_size(len(group), train_fraction)
                train += [group[j] for j in order[:cut]]
                test += [group[j] for j in order[cut:]]
        else:
            order = rng.permutation(len(ids))
            train = [ids[j] for j in order[:n_train]]
            test = [ids[j] for j in order[n_train:]]
        plan.folds.append((train, test))
    return plan


__all__ = [
    "ImageSample",
    "DatasetManifest",
    "SplitPlan",
    "RECIPES",
    "compose_dataset",
    "monte_carlo_split",
    "class_counts",
    "train_size",
]
