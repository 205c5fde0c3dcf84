"""PNG / CSV / JSON persistence for images, label maps, masks and reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image


def save_image(path, image) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float32)
    return data / np.float32(255.0)


def save_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected H x W label map, got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def load_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"{path}: label PNG must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def save_mask(path, mask) -> None:
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    Image.fromarray(mask.astype(bool)).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("1")) > 0).astype(np.uint8)


def save_entropy(path, entropy, vmax: float | None = None) -> dict:
    """Write an entropy map as 8-bit PNG plus ``<name>.json`` holding the scale.

    ``vmax`` defaults to the map maximum; pass ``ln C`` for run-comparable images.
    """
    entropy = np.asarray(entropy, dtype=np.float64)
    path = Path(path)
    top = float(entropy.max()) if vmax is None else float(vmax)
    scale = 255.0 / top if top > 0 else 0.0
    data = np.round(np.clip(entropy * scale, 0, 255)).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")
    meta = {"vmin": 0.0, "vmax": top, "scale": scale, "units": "nats"}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return meta


def load_entropy(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with Image.open(path) as im:
        data = np.asarray(im, dtype=np.float64)
    return data / meta["scale"] if meta["scale"] else np.zeros_like(data)


def write_confusion_csv(path, cm, class_names=None) -> None:
    cm = np.asarray(cm)
    names = list(class_names) if class_names else [str(i) for i in range(cm.shape[0])]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["gt\\pred", *names])
        for name, row in zip(names, cm):
            w.writerow([name, *[int(v) for v in row]])


def read_confusion_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)


def write_iou_csv(path, per_class_iou, mean_iou, class_names=None) -> None:
    names = list(class_names) if class_names else [str(i) for i in range(len(per_class_iou))]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "iou"])
        for name, v in zip(names, per_class_iou):
            w.writerow([name, "" if np.isnan(v) else repr(float(v))])
        w.writerow(["mean", repr(float(mean_iou))])
