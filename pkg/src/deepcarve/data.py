"""Weakly labelled datasets: on-disk layout, a synthetic generator with
controllable attribute co-occurrence, co-occurrence statistics and batching."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .tensor import Rng, Tensor

IMAGE_SUFFIXES = (".png", ".pgm")
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class Split:
    images: Tensor                      # [N, C, H, W] in [0, 1]
    ids: list[str]
    weak_labels: np.ndarray | None = None   # [N] int, train/val
    full_labels: np.ndarray | None = None   # [N, M] bool, test

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class WeakDataset:
    attributes: list[str]
    train: Split
    val: Split
    test: Split

    @property
    def num_classes(self) -> int:
        return len(self.attributes)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.images.shape[1:])

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return getattr(self, name)

    def class_members(self, m: int) -> np.ndarray:
        """Indices of training items whose weak label is ``m``."""
        return np.flatnonzero(self.train.weak_labels == m)

    def validate(self) -> None:
        M = self.num_classes
        for name in ("train", "val"):
            s = self.split(name)
            if s.weak_labels is None or s.weak_labels.shape != (len(s),):
                raise DatasetError(f"{name}: every item needs exactly one weak label")
            if len(s) and (s.weak_labels.min() < 0 or s.weak_labels.max() >= M):
                raise DatasetError(f"{name}: weak label out of range")
        for m in range(M):
            if not np.any(self.train.weak_labels == m):
                raise DatasetError(f"train: class {m} ({self.attributes[m]}) has no images")
        t = self.test
        if t.full_labels is None or t.full_labels.shape != (len(t), M):
            raise DatasetError("test: full label matrix missing or misshapen")
        if len(t) and not t.full_labels.any(axis=1).all():
            raise DatasetError("test: every item needs at least one label")

    def fingerprint(self) -> str:
        """Hash of all labels and pixels, used to audit that training never mutates them."""
        h = hashlib.sha256()
        h.update("\n".join(self.attributes).encode())
        for name in SPLITS:
            s = self.split(name)
            h.update(np.ascontiguousarray(s.images).tobytes())
            h.update("\n".join(s.ids).encode())
            for arr in (s.weak_labels, s.full_labels):
                if arr is not None:
                    h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- disk format

def _read_image(path: Path) -> Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from None
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr[..., :3].transpose(2, 0, 1)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


def _write_image(path: Path, img: Tensor) -> None:
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    else:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)


def _image_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _stack(images: list[Tensor], what: str) -> Tensor:
    if not images:
        return np.zeros((0, 1, 1, 1))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{what}: images have differing shapes {sorted(shapes)}")
    return np.stack(images)


def _load_weak_split(root: Path, name: str, attributes: list[str]) -> Split:
    d = root / name
    index = {a: i for i, a in enumerate(attributes)}
    if not d.is_dir():
        if name == "val":
            return Split(np.zeros((0, 1, 1, 1)), [], np.zeros(0, dtype=np.int64))
        raise DatasetError(f"missing directory {d}")
    for sub in sorted(p.name for p in d.iterdir() if p.is_dir()):
        if sub not in index:
            raise DatasetError(f"{d / sub}: unknown attribute {sub!r}")
    images, ids, labels = [], [], []
    for m, attr in enumerate(attributes):
        cdir = d / attr
        files = _image_files(cdir) if cdir.is_dir() else []
        if name == "train" and not files:
            raise DatasetError(f"{name}: class {attr!r} is empty")
        for f in files:
            images.append(_read_image(f))
            ids.append(f.stem)
            labels.append(m)
    return Split(_stack(images, name), ids, np.asarray(labels, dtype=np.int64))


def _load_test(root: Path, attributes: list[str]) -> Split:
    index = {a: i for i, a in enumerate(attributes)}
    labels_csv = root / "test" / "labels.csv"
    img_dir = root / "test" / "images"
    if not labels_csv.is_file():
        raise DatasetError(f"missing {labels_csv}")
    files = {p.stem: p for p in _image_files(img_dir)} if img_dir.is_dir() else {}
    images, ids, rows = [], [], []
    with labels_csv.open(newline="") as fh:
        for row in csv.reader(fh, skipinitialspace=True):
            if not row or row[0].startswith("#") or row[0] == "image_id":
                continue
            if len(row) != 2:
                raise DatasetError(f"{labels_csv}: expected 'image_id, attr;attr', got {row}")
            image_id, names = row[0].strip(), [n.strip() for n in row[1].split(";") if n.strip()]
            vec = np.zeros(len(attributes), dtype=bool)
            for n in names:
                if n not in index:
                    raise DatasetError(f"{labels_csv}: unknown attribute {n!r} for {image_id}")
                vec[index[n]] = True
            if image_id not in files:
                raise DatasetError(f"{labels_csv}: no image file for {image_id}")
            images.append(_read_image(files[image_id]))
            ids.append(image_id)
            rows.append(vec)
    full = np.stack(rows) if rows else np.zeros((0, len(attributes)), dtype=bool)
    return Split(_stack(images, "test"), ids, full_labels=full)


def load_dataset(root) -> WeakDataset:
    root = Path(root)
    attr_file = root / "attributes.txt"
    if not attr_file.is_file():
        raise DatasetError(f"missing {attr_file}")
    attributes = [ln.strip() for ln in attr_file.read_text().splitlines() if ln.strip()]
    if len(set(attributes)) != len(attributes):
        raise DatasetError(f"{attr_file}: duplicate attribute names")
    ds = WeakDataset(attributes, _load_weak_split(root, "train", attributes),
                     _load_weak_split(root, "val", attributes), _load_test(root, attributes))
    ds.validate()
    return ds


def write_dataset(ds: WeakDataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "attributes.txt").write_text("".join(a + "\n" for a in ds.attributes))
    for name in ("train", "val"):
        s = ds.split(name)
        for a in ds.attributes:
            (root / name / a).mkdir(parents=True, exist_ok=True)
        for img, iid, m in zip(s.images, s.ids, s.weak_labels):
            _write_image(root / name / ds.attributes[m] / f"{iid}.png", img)
    (root / "test" / "images").mkdir(parents=True, exist_ok=True)
    with (root / "test" / "labels.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "labels"])
        for img, iid, row in zip(ds.test.images, ds.test.ids, ds.test.full_labels):
            _write_image(root / "test" / "images" / f"{iid}.png", img)
            w.writerow([iid, ";".join(a for a, on in zip(ds.attributes, row) if on)])
    write_cooccurrence_csv(root / "cooccurrence_test.csv", cooccurrence(ds, "test"), ds.attributes)
    return root


# ---------------------------------------------------------------- synthetic data

MOTIFS = ("hstripes", "vstripes", "blobs", "checker", "diagonal", "rings", "gradient", "corner")


@dataclass
class SynthSpec:
    num_attributes: int = 4
    image_size: int = 32
    channels: int = 1
    cooccurrence: np.ndarray | float = 0.4
    noise: float = 0.1
    amplitude: float = 0.35
    background: float = 0.1
    seed: int = 0
    motifs: Sequence[str] | None = None
    attributes: Sequence[str] | None = None
    overlap_fraction: float = 0.0
    secondary_amplitude: float = 1.0      # contrast of co-occurring motifs relative to the drawn one
    q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        M = self.num_attributes
        if M < 1:
            raise ValueError("num_attributes must be >= 1")
        motifs = list(self.motifs or MOTIFS[:M])
        if len(motifs) != M or any(m not in MOTIFS for m in motifs):
            raise ValueError(f"need {M} motifs drawn from {MOTIFS}, got {motifs}")
        self.motifs = motifs
        self.attributes = list(self.attributes or motifs)
        if len(self.attributes) != M:
            raise ValueError("attribute names must match num_attributes")
        q = np.asarray(self.cooccurrence, dtype=float)
        if q.ndim == 0:
            q = np.full((M, M), float(q))
        elif q.ndim == 1 and q.size == M * M:
            q = q.reshape(M, M)             # row-major, as written in a flat config
        if q.shape != (M, M):
            raise ValueError(f"co-occurrence matrix must be {M}x{M}, got {q.shape}")
        q = q.copy()
        np.fill_diagonal(q, 1.0)
        if q.min() < 0 or q.max() > 1:
            raise ValueError("co-occurrence probabilities must lie in [0, 1]")
        self.q = q
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if not 0.0 < self.secondary_amplitude <= 1.0:
            raise ValueError("secondary_amplitude must lie in (0, 1]")


def _coords(n: int):
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    return y / n, x / n


def render_motif(name: str, n: int, rng: np.random.Generator) -> Tensor:
    """Zero-mean full-frame texture in roughly [-0.5, 0.5], jittered per call."""
    y, x = _coords(n)
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(5.0, 7.0)
    if name == "hstripes":
        t = 0.5 * np.sin(2 * np.pi * freq * y + phase)
    elif name == "vstripes":
        t = 0.5 * np.sin(2 * np.pi * freq * x + phase)
    elif name == "diagonal":
        t = 0.5 * np.sin(2 * np.pi * freq * (x + y) / np.sqrt(2) + phase)
    elif name == "checker":
        t = 0.5 * np.sign(np.sin(2 * np.pi * 4 * x + phase) * np.sin(2 * np.pi * 4 * y + phase))
    elif name == "rings":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        t = 0.5 * np.sin(2 * np.pi * freq * np.hypot(y - cy, x - cx) + phase)
    elif name == "blobs":
        t = np.zeros((n, n))
        for cy, cx in rng.uniform(0.0, 1.0, size=(6, 2)):
            t += np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * 0.06 ** 2))
        t = t - t.mean()
        t = 0.5 * t / max(np.abs(t).max(), 1e-12)
    elif name == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        t = np.cos(ang) * (x - 0.5) + np.sin(ang) * (y - 0.5)
    elif name == "corner":
        t = np.full((n, n), -0.1)
        s = n // 4
        cy, cx = rng.integers(0, 2, size=2) * (n - s)
        t[cy:cy + s, cx:cx + s] = 0.5
    else:
        raise ValueError(f"unknown motif {name!r}")
    return t


def render_image(spec: SynthSpec, present: np.ndarray, rng: np.random.Generator,
                 cls: int | None = None) -> Tensor:
    """Motifs in ``present`` over the background; motifs other than ``cls``
    are drawn at ``secondary_amplitude`` times the usual contrast."""
    n, C = spec.image_size, spec.channels
    img = np.full((C, n, n), spec.background)
    for m in np.flatnonzero(present):
        # non-negative texture: absent motifs leave the background untouched
        tex = render_motif(spec.motifs[m], n, rng) + 0.5
        amp = spec.amplitude if cls is None or m == cls else spec.amplitude * spec.secondary_amplitude
        if C == 1:
            img += amp * tex
        else:
            tint = np.abs(np.sin(np.arange(C) * 1.7 + m * 2.3)) + 0.3
            img += amp * tint[:, None, None] * tex
    img += rng.normal(0.0, spec.noise, size=img.shape)
    # quantize so a PNG round trip is exact
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _draw_present(spec: SynthSpec, cls: int, rng: np.random.Generator) -> np.ndarray:
    present = rng.random(spec.num_attributes) < spec.q[cls]
    present[cls] = True
    return present


def generate_synthetic(spec: SynthSpec, counts: dict[str, int], out=None) -> WeakDataset:
    """Render a dataset where every train/val image carries only the label of
    the class it was drawn for, while test images list every rendered motif.

    ``counts`` gives images per class for ``train``, ``val`` and ``test``.
    """
    M = spec.num_attributes
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    splits = {}
    for name in SPLITS:
        per_class = int(counts.get(name, 0))
        images, ids, weak, full = [], [], [], []
        for m in range(M):
            for k in range(per_class):
                present = _draw_present(spec, m, rng)
                img = render_image(spec, present, rng, m)
                iid = f"{name}_{m:02d}_{k:05d}"
                images.append(img)
                ids.append(iid)
                weak.append(m)
                full.append(present)
                if name != "test" and spec.overlap_fraction and rng.random() < spec.overlap_fraction:
                    others = np.flatnonzero(present & (np.arange(M) != m))
                    if others.size:
                        images.append(img)
                        ids.append(iid)
                        weak.append(int(rng.choice(others)))
                        full.append(present)
        if name == "test":
            splits[name] = Split(_stack(images, name), ids, full_labels=np.asarray(full, dtype=bool))
        else:
            order = sorted(range(len(ids)), key=lambda i: (weak[i], ids[i]))
            splits[name] = Split(_stack([images[i] for i in order], name), [ids[i] for i in order],
                                 np.asarray([weak[i] for i in order], dtype=np.int64))
    if not len(splits["test"]):
        splits["test"].full_labels = np.zeros((0, M), dtype=bool)
    ds = WeakDataset(list(spec.attributes), splits["train"], splits["val"], splits["test"])
    if out is not None:
        write_dataset(ds, out)
    return ds


# ---------------------------------------------------------------- statistics

@dataclass
class CooccurrenceMatrix:
    values: np.ndarray    # [M, M], row i conditioned on attribute i
    defined: np.ndarray   # [M] bool, False where no image contains attribute i


def cooccurrence(ds: WeakDataset, split: str = "test") -> CooccurrenceMatrix:
    """Entry ``(i, j)``: fraction of images containing ``i`` that also contain ``j``."""
    s = ds.split(split)
    if s.full_labels is None:
        raise DatasetError(f"split {split!r} has no full labels")
    L = s.full_labels.astype(np.int64)
    both = L.T @ L
    rows = np.diag(both)
    defined = rows > 0
    values = np.zeros(both.shape)
    values[defined] = both[defined] / rows[defined, None]
    return CooccurrenceMatrix(values, defined)


def write_cooccurrence_csv(path, cm: CooccurrenceMatrix, attributes: list[str]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attribute", *attributes, "defined"])
        for a, row, ok in zip(attributes, cm.values, cm.defined):
            w.writerow([a, *(f"{v:.6f}" for v in row), int(ok)])


def batch_iterator(ds: WeakDataset, split: str, batch_size: int, rng: Rng,
                   targets: np.ndarray | None = None) -> Iterator[tuple[Tensor, np.ndarray]]:
    """One shuffled pass; yields ``(images, weak labels)`` or rows of ``targets``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    s = ds.split(split)
    labels = s.weak_labels if targets is None else targets
    order = rng.permutation(len(s))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield s.images[idx], labels[idx]
