"""Datasets: in-memory containers, the on-disk layout, PGM import, synthetic tasks.

On-disk layout::

    root/manifest.json
    root/<split>/<class_id>/<sample_idx>.ten

Each ``.ten`` file uses the checkpoint record format with one record named
``"x"``.  Images are stored as ``H x W x C`` arrays already scaled to [0, 1];
when the manifest geometry is ``1 x 1 x C`` the samples are plain vectors of
length ``C``.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError
from .tensor import encode_tensors, load_tensors

SPLITS = ("base", "validation", "novel")
MANIFEST_KEYS = {"name", "height", "width", "channels", "splits", "rotate4", "class_sigma"}


@dataclass
class ClassRecord:
    class_id: str
    samples: np.ndarray
    sigma: float | None = None  # ground-truth spread, synthetic data only

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class LabeledDataset:
    classes: list[ClassRecord]
    split: str = "base"
    name: str = ""

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"{self.split}: duplicate class ids")
        shapes = {c.samples.shape[1:] for c in self.classes}
        if len(shapes) > 1:
            raise ConfigError(f"{self.split}: mixed sample shapes {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def class_ids(self) -> list[str]:
        return [c.class_id for c in self.classes]

    @property
    def sample_shape(self) -> tuple:
        return self.classes[0].samples.shape[1:] if self.classes else ()

    def index_of(self, class_id: str) -> int:
        for i, c in enumerate(self.classes):
            if c.class_id == class_id:
                return i
        raise KeyError(class_id)


def rotate4(data: LabeledDataset) -> LabeledDataset:
    """Each image class spawns three siblings rotated by 90, 180 and 270 degrees."""
    if len(data.sample_shape) != 3:
        raise ConfigError("rotation augmentation needs image samples (H, W, C)")
    out = []
    for c in data.classes:
        out.append(c)
        for k in (1, 2, 3):
            out.append(ClassRecord(f"{c.class_id}_rot{90 * k}",
                                   np.ascontiguousarray(np.rot90(c.samples, k=k, axes=(1, 2))), c.sigma))
    return LabeledDataset(out, data.split, data.name)


# ----------------------------------------------------------------------------
# manifest + sample files


def _natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{path}: manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    unknown = set(manifest) - MANIFEST_KEYS
    if unknown:
        raise DataError(f"{path}: unknown manifest keys {sorted(unknown)}")
    for key in ("name", "height", "width", "channels", "splits"):
        if key not in manifest:
            raise DataError(f"{path}: manifest lacks {key!r}")
    splits = manifest["splits"]
    if not isinstance(splits, dict) or set(splits) - set(SPLITS):
        raise DataError(f"{path}: splits must be a mapping over {SPLITS}")
    seen: dict[str, str] = {}
    for split, ids in splits.items():
        for cid in ids:
            if cid in seen:
                raise DataError(f"{path}: class {cid!r} listed in both {seen[cid]} and {split}")
            seen[cid] = split
    return manifest


def load_dataset(manifest_path) -> dict[str, LabeledDataset]:
    """Load every split listed in the manifest; applies rotation when flagged."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    H, W, C = int(manifest["height"]), int(manifest["width"]), int(manifest["channels"])
    shape = (C,) if H == 1 and W == 1 else (H, W, C)
    sigmas = manifest.get("class_sigma", {})
    out = {}
    for split, ids in manifest["splits"].items():
        classes = []
        for cid in ids:
            cdir = root / split / cid
            if not cdir.is_dir():
                raise DataError(f"{cdir}: class directory missing")
            files = sorted((f for f in cdir.iterdir() if f.suffix == ".ten"), key=lambda f: _natural_key(f.stem))
            if not files:
                raise DataError(f"{cdir}: class directory is empty")
            samples = np.empty((len(files),) + shape)
            for i, f in enumerate(files):
                rec = load_tensors(f)
                if "x" not in rec:
                    raise DataError(f"{f}: no record named 'x' at byte offset 8")
                x = rec["x"]
                if x.size != H * W * C:
                    raise DataError(f"{f}: sample has {x.size} values, manifest geometry needs {H * W * C}")
                samples[i] = x.reshape(shape)
            classes.append(ClassRecord(cid, samples, sigmas.get(cid)))
        data = LabeledDataset(classes, split, manifest["name"])
        if manifest.get("rotate4", False):
            data = rotate4(data)
        out[split] = data
    return out


def write_dataset(root, splits: Mapping[str, LabeledDataset], name: str, rotate: bool = False) -> Path:
    """Write datasets in the standard layout; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shapes = {d.sample_shape for d in splits.values() if len(d)}
    if len(shapes) != 1:
        raise ConfigError(f"splits disagree on sample shape: {shapes}")
    (shape,) = shapes
    H, W, C = (1, 1, shape[0]) if len(shape) == 1 else shape
    sigma = {}
    for split, data in splits.items():
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        for c in data.classes:
            cdir = root / split / c.class_id
            cdir.mkdir(parents=True, exist_ok=True)
            for i, x in enumerate(c.samples):
                (cdir / f"{i}.ten").write_bytes(encode_tensors({"x": x}))
            if c.sigma is not None:
                sigma[c.class_id] = float(c.sigma)
    manifest = {
        "name": name, "height": H, "width": W, "channels": C,
        "splits": {s: d.class_ids for s, d in splits.items()},
        "rotate4": bool(rotate),
    }
    if sigma:
        manifest["class_sigma"] = sigma
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------------------
# PGM import


def read_pgm(path) -> np.ndarray:
    """Decode an 8-bit P5 (binary) or P2 (ASCII) PGM into an H x W x 1 array in [0, 1]."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise DataError(f"{path}: truncated PGM header at byte offset {pos}")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append((buf[start:pos], start))
    magic = tokens[0][0]
    if magic not in (b"P5", b"P2"):
        raise DataError(f"{path}: not a PGM file (magic {magic!r}) at byte offset 0")
    try:
        width, height, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header at byte offset {tokens[1][1]}") from exc
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval} at byte offset {tokens[3][1]}")
    n = width * height
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        if pos + n > len(buf):
            raise DataError(f"{path}: truncated pixel data at byte offset {pos}")
        pixels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    else:
        vals = buf[pos:].split()
        if len(vals) < n:
            raise DataError(f"{path}: truncated pixel data at byte offset {pos}")
        pixels = np.array([int(v) for v in vals[:n]], dtype=np.uint8)
    return (pixels.astype(np.float64) / 255.0).reshape(height, width, 1)


def import_pgm_tree(src_root, out_root, name: str, rotate: bool = False) -> Path:
    """Convert ``src_root/<split>/<class>/*.pgm`` into the standard layout."""
    src_root = Path(src_root)
    splits = {}
    for split in SPLITS:
        sdir = src_root / split
        if not sdir.is_dir():
            continue
        classes = []
        for cdir in sorted((d for d in sdir.iterdir() if d.is_dir()), key=lambda d: _natural_key(d.name)):
            files = sorted(cdir.glob("*.pgm"), key=lambda f: _natural_key(f.stem))
            if not files:
                raise DataError(f"{cdir}: class directory is empty")
            classes.append(ClassRecord(cdir.name, np.stack([read_pgm(f) for f in files])))
        splits[split] = LabeledDataset(classes, split, name)
    if not splits:
        raise DataError(f"{src_root}: no split directories found")
    return write_dataset(out_root, splits, name, rotate=rotate)


# ----------------------------------------------------------------------------
# synthetic tasks


@dataclass
class SyntheticTaskSpec:
    """Gaussian clusters, one per class, each with its own isotropic spread.

    Class means are drawn uniformly from ``[-box, box]^latent_dim`` and
    placed in ``R^dim`` through a fixed random orthonormal basis; noise is
    isotropic in all ``dim`` coordinates.  ``latent_dim=None`` uses the full
    space.  With ``variance_mode="smooth"`` a class's sigma is a linear
    function of the first latent coordinate, so nearby classes have similar
    spread.  ``"independent"`` draws sigma uniformly, unrelated to the mean.
    """

    n_classes: int = 50
    dim: int = 32
    samples_per_class: int = 100
    box: float = 3.0
    sigma_lo: float = 0.3
    sigma_hi: float = 1.5
    seed: int = 0
    latent_dim: int | None = None
    n_validation: int = 0
    n_novel: int = 10
    variance_mode: str = "smooth"
    name: str = "synthetic"

    def validate(self) -> None:
        if not self.sigma_lo > 0:
            raise ConfigError(f"sigma_lo must be > 0, got {self.sigma_lo}")
        if self.sigma_hi < self.sigma_lo:
            raise ConfigError("sigma_hi must be >= sigma_lo")
        if self.n_classes < 1 or self.dim < 1 or self.samples_per_class < 1 or self.box <= 0:
            raise ConfigError("n_classes, dim, samples_per_class and box must be positive")
        if self.latent_dim is not None and not 1 <= self.latent_dim <= self.dim:
            raise ConfigError(f"latent_dim must lie in [1, dim], got {self.latent_dim}")
        if self.n_validation + self.n_novel > self.n_classes:
            raise ConfigError("more validation + novel classes than classes")
        if self.variance_mode not in ("smooth", "independent"):
            raise ConfigError(f"unknown variance_mode {self.variance_mode!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticTaskSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec


def gen_synthetic(spec: SyntheticTaskSpec) -> dict[str, LabeledDataset]:
    spec.validate()
    k = spec.dim if spec.latent_dim is None else spec.latent_dim
    if k == spec.dim:
        basis = np.eye(spec.dim)
    else:
        basis, _ = np.linalg.qr(np.random.default_rng([spec.seed, 1 << 20]).standard_normal((spec.dim, k)))
    classes = []
    for c in range(spec.n_classes):
        rng = np.random.default_rng([spec.seed, c])
        z = rng.uniform(-spec.box, spec.box, size=k)
        mean = basis @ z
        if spec.variance_mode == "smooth":
            frac = (z[0] + spec.box) / (2 * spec.box)
            sigma = spec.sigma_lo + (spec.sigma_hi - spec.sigma_lo) * frac
        else:
            sigma = rng.uniform(spec.sigma_lo, spec.sigma_hi)
        samples = mean + sigma * rng.standard_normal((spec.samples_per_class, spec.dim))
        classes.append(ClassRecord(f"c{c:04d}", samples, float(sigma)))
    n_base = spec.n_classes - spec.n_validation - spec.n_novel
    out = {"base": LabeledDataset(classes[:n_base], "base", spec.name)}
    if spec.n_validation:
        out["validation"] = LabeledDataset(classes[n_base:n_base + spec.n_validation], "validation", spec.name)
    if spec.n_novel:
        out["novel"] = LabeledDataset(classes[n_base + spec.n_validation:], "novel", spec.name)
    return out
