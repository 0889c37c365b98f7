"""Sources of base MNIST digits."""
from __future__ import annotations

import importlib.util
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .idx import load_mnist_idx


def bundled_mnist_path() -> Path | None:
    """Path of the 5,000-digit MNIST sample shipped inside ``mlxtend``, if installed."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        return None
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    return path if path.exists() else None


def load_bundled_mnist() -> tuple[np.ndarray, np.ndarray]:
    """Images (5000, 28, 28) in [0, 1] and int64 labels, 500 per digit."""
    path = bundled_mnist_path()
    if path is None:
        raise ConfigError("no MNIST IDX paths given and the bundled sample (pip install mlxtend) is unavailable")
    table = np.loadtxt(path, delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.float64) / 255.0, table[:, -1].copy()


def load_mnist(images_path: str | Path | None = None,
               labels_path: str | Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Real IDX files when both paths are given, otherwise the bundled sample."""
    if images_path is None and labels_path is None:
        return load_bundled_mnist()
    for field_name, p in (("mnist_images", images_path), ("mnist_labels", labels_path)):
        if p is None or not Path(p).exists():
            raise ConfigError(f"{field_name}: file not found: {p}")
    return load_mnist_idx(images_path, labels_path)
