"""Top-K precision with K taken from the ground truth, per-attribute
breakdown and first-layer filter grids."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import WeakDataset
from .loss import sigmoid
from .nn import Network, predict_logits

PER_ATTRIBUTE_DEFINITION = (
    "per-attribute precision = mean per-image precision over test images whose "
    "ground truth contains the attribute"
)


def predict_topk(probabilities, k: int) -> set[int]:
    p = np.asarray(probabilities, dtype=float)
    if not 1 <= k <= p.shape[0]:
        raise ValueError(f"K must lie in [1, {p.shape[0]}], got {k}")
    # stable sort keeps the lower index first among equal probabilities
    return set(int(i) for i in np.argsort(-p, kind="stable")[:k])


def precision(truth, predicted) -> float:
    truth, predicted = set(truth), set(predicted)
    if len(truth) != len(predicted):
        raise ValueError(f"|T| = {len(truth)} but |P| = {len(predicted)}")
    if not predicted:
        raise ValueError("empty prediction set")
    return len(truth & predicted) / len(predicted)


def topk_accuracy(truth, predicted) -> float:
    """Conventional top-K hit: 1 if any prediction is correct."""
    return float(bool(set(truth) & set(predicted)))


@dataclass
class ImageRecord:
    image_id: str
    k: int
    truth: list[int]
    predicted: list[int]
    true_positives: int

    @property
    def precision(self) -> float:
        return self.true_positives / self.k


@dataclass
class PrecisionReport:
    mean_precision: float
    per_attribute: dict[str, float | None]
    records: list[ImageRecord] = field(default_factory=list)
    attributes: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "mean_precision": self.mean_precision,
            "num_images": len(self.records),
            "per_attribute": self.per_attribute,
            "per_attribute_definition": PER_ATTRIBUTE_DEFINITION,
        }

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        name = self.attributes
        with (out_dir / "per_image.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "k", "truth", "predicted", "true_positives", "precision"])
            for r in self.records:
                w.writerow([r.image_id, r.k, ";".join(name[i] for i in r.truth),
                            ";".join(name[i] for i in r.predicted), r.true_positives,
                            repr(r.precision)])


def report_from_probabilities(probs: np.ndarray, full_labels: np.ndarray, ids: list[str],
                              attributes: list[str]) -> PrecisionReport:
    if len(probs) == 0:
        raise ValueError("empty test set")
    records = []
    for iid, p, row in zip(ids, probs, full_labels):
        truth = [int(i) for i in np.flatnonzero(row)]
        pred = predict_topk(p, len(truth))
        records.append(ImageRecord(iid, len(truth), truth, sorted(pred), len(set(truth) & pred)))
    per_image = np.array([r.precision for r in records])
    per_attr: dict[str, float | None] = {}
    for m, a in enumerate(attributes):
        sel = full_labels[:, m]
        per_attr[a] = float(per_image[sel].mean()) if sel.any() else None
    return PrecisionReport(float(per_image.mean()), per_attr, records, list(attributes))


def evaluate(net: Network, dataset: WeakDataset) -> PrecisionReport:
    test = dataset.test
    if len(test) == 0:
        raise ValueError("empty test set")
    probs = sigmoid(predict_logits(net, test.images))
    return report_from_probabilities(probs, test.full_labels, test.ids, dataset.attributes)


def filter_grid(weights: np.ndarray) -> np.ndarray:
    """Tile ``[O, C, k, k]`` filters into a ``[rows*(k+1)+1, cols*(k+1)+1(, 3)]``
    image in [0, 1] with 0-valued separators. Three-channel filters stay RGB,
    others are averaged over channels."""
    O, C, k, _ = weights.shape
    rgb = C == 3
    cols = math.ceil(math.sqrt(O))
    rows = math.ceil(O / cols)
    shape = (rows * (k + 1) + 1, cols * (k + 1) + 1) + ((3,) if rgb else ())
    grid = np.zeros(shape)
    for n in range(O):
        f = weights[n].transpose(1, 2, 0) if rgb else weights[n].mean(axis=0)
        lo, hi = f.min(), f.max()
        tile = np.full(f.shape, 0.5) if hi - lo <= 0 else (f - lo) / (hi - lo)
        r, c = divmod(n, cols)
        y, x = 1 + r * (k + 1), 1 + c * (k + 1)
        grid[y:y + k, x:x + k] = tile
    return grid


def export_filter_grid(net: Network, layer_id, out_path) -> Path:
    """Write the filters of conv layer ``layer_id`` (index or ``"conv<i>"``) as PGM/PNG."""
    if isinstance(layer_id, str):
        idx = int(layer_id[4:]) if layer_id.startswith("conv") and layer_id[4:].isdigit() else -1
    else:
        idx = int(layer_id)
    if not 0 <= idx < len(net.specs) or net.specs[idx].kind != "conv":
        raise ValueError(f"layer {layer_id!r} is not a conv layer; conv layers are {net.conv_taps}")
    grid = filter_grid(net.params[f"conv{idx}.W"])
    q = np.round(grid * 255.0).astype(np.uint8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix.lower() == ".pgm" and q.ndim == 3:
        q = np.round(grid.mean(axis=2) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB" if q.ndim == 3 else "L").save(out_path)
    return out_path
