"""Pseudo-label generation from conv feature-map response statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetError, WeakDataset
from .loss import NEGATIVE, POSITIVE
from .nn import Network, extract_feature_responses, forward
from .tensor import Tensor

DEAD_MAP_EPS = 1e-8
DEFAULT_GAMMA = 0.7


@dataclass
class ResponseHistogram:
    h: Tensor                  # [F, M] mean response of map f over class m
    counts: np.ndarray         # [M] images per class
    map_ids: list[str]         # "conv<i>:<channel>" per row of h


@dataclass
class PseudoLabelSet:
    iteration: int
    labels: Tensor             # [N, M]
    gamma: float
    ids: list[str] | None = None


def map_ids(net: Network) -> list[str]:
    return [f"{tap}:{ch}" for tap in net.conv_taps
            for ch in range(net.specs[net.tap_layer(tap)].out_channels)]


def feature_responses(net: Network, images, batch_size: int = 256) -> Tensor:
    """``[N, F]`` spatial-mean responses of every conv map, inference mode."""
    mode = net.mode
    net.eval()
    chunks = []
    try:
        for i in range(0, len(images), batch_size):
            _, trace = forward(net, images[i:i + batch_size])
            per_tap = extract_feature_responses(trace)
            chunks.append(np.concatenate([per_tap[t] for t in net.conv_taps], axis=1))
    finally:
        net.mode = mode
    if not chunks:
        return np.zeros((0, len(map_ids(net))))
    return np.concatenate(chunks, axis=0)


def histogram_from_responses(responses: Tensor, labels: np.ndarray, num_classes: int,
                             ids: list[str] | None = None) -> ResponseHistogram:
    F = responses.shape[1]
    h = np.zeros((F, num_classes))
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in range(num_classes):
        members = labels == m
        counts[m] = int(members.sum())
        if counts[m] == 0:
            raise DatasetError(f"class {m} has no training images")
        h[:, m] = responses[members].mean(axis=0)
    return ResponseHistogram(h, counts, ids or [f"map{f}" for f in range(F)])


def compute_response_histogram(net: Network, dataset: WeakDataset) -> ResponseHistogram:
    responses = feature_responses(net, dataset.train.images)
    return histogram_from_responses(responses, dataset.train.weak_labels, dataset.num_classes,
                                    map_ids(net))


def pseudo_labels_from_responses(responses: Tensor, labels: np.ndarray, h: Tensor,
                                 gamma: float = DEFAULT_GAMMA, positive: float = POSITIVE,
                                 negative: float = NEGATIVE) -> Tensor:
    """Per map, credit class ``m`` with ``v / h`` when ``gamma*h <= v <= h``,
    else ``negative``; the observed class always gets ``positive``.
    Credits are averaged over maps."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if responses.shape[1] != h.shape[0]:
        raise ValueError(f"responses cover {responses.shape[1]} feature maps, histogram has {h.shape[0]}")
    v = responses[:, :, None]          # [N, F, 1]
    hh = h[None, :, :]                 # [1, F, M]
    live = hh >= DEAD_MAP_EPS
    band = live & (gamma * hh <= v) & (v <= hh)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(band, v / np.where(live, hh, 1.0), negative)
    # a mean of per-map credits lies in [negative, 1]; clip only undoes rounding
    b = np.clip(z.mean(axis=1), negative, 1.0)
    b[np.arange(len(labels)), labels] = positive
    return b


def generate_pseudo_labels(net: Network, dataset: WeakDataset, hist: ResponseHistogram,
                           gamma: float = DEFAULT_GAMMA, iteration: int = 0,
                           positive: float = POSITIVE, negative: float = NEGATIVE) -> PseudoLabelSet:
    if hist.map_ids != map_ids(net) or hist.h.shape[1] != dataset.num_classes:
        raise ValueError("histogram feature maps or classes do not match the network/dataset")
    responses = feature_responses(net, dataset.train.images)
    labels = pseudo_labels_from_responses(responses, dataset.train.weak_labels, hist.h, gamma,
                                          positive, negative)
    return PseudoLabelSet(iteration, labels, gamma, list(dataset.train.ids))


def carve(net: Network, dataset: WeakDataset, gamma: float = DEFAULT_GAMMA, iteration: int = 0,
          positive: float = POSITIVE, negative: float = NEGATIVE):
    """Histogram and pseudo-labels from a single inference pass over the training set."""
    responses = feature_responses(net, dataset.train.images)
    hist = histogram_from_responses(responses, dataset.train.weak_labels, dataset.num_classes,
                                    map_ids(net))
    labels = pseudo_labels_from_responses(responses, dataset.train.weak_labels, hist.h, gamma,
                                          positive, negative)
    return hist, PseudoLabelSet(iteration, labels, gamma, list(dataset.train.ids))


def carving_schedule(epoch: int, warmup_epochs: int, period: int) -> bool:
    return epoch >= warmup_epochs and (epoch - warmup_epochs) % period == 0


def write_pseudo_labels_csv(path, pls: PseudoLabelSet, attributes: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = pls.ids or [str(i) for i in range(len(pls.labels))]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", *(f"class_{m}" for m in range(len(attributes)))])
        for iid, row in zip(ids, pls.labels):
            w.writerow([iid, *(repr(float(x)) for x in row)])


def write_histogram_csv(path, hist: ResponseHistogram, attributes: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_map", *attributes])
        w.writerow(["count", *(int(c) for c in hist.counts)])
        for fid, row in zip(hist.map_ids, hist.h):
            w.writerow([fid, *(repr(float(x)) for x in row)])
