"""Versioned regressor file and its metadata sidecar.

Layout:
  line 1   TASFAR-MODEL <version>
  line 2   JSON header: layer_sizes, dropout_rate, activation
  rest     little-endian float64, per layer the weight matrix (row-major) then the bias
"""
import json
from pathlib import Path
from typing import Optional

import numpy as np

from common.errors import DataIOError, SchemaError
from common.logger import get_logger
from common.models import Dataset, Standardizer
from model.regressor import Regressor

logger = get_logger("model_file")

MAGIC = "TASFAR-MODEL"
FORMAT_VERSION = 1


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save_model(model: Regressor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"layer_sizes": list(model.layer_sizes), "dropout_rate": model.dropout_rate,
              "activation": model.activation.value}
    with path.open("wb") as f:
        f.write(f"{MAGIC} {FORMAT_VERSION}\n".encode("ascii"))
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        for w, b in zip(model.weights, model.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    logger.info(f"Saved model {header['layer_sizes']} → {path}")
    return path


def load_model(path: str | Path) -> Regressor:
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"model file not found: {path}")
    raw = path.read_bytes()
    first, _, rest = raw.partition(b"\n")
    parts = first.decode("ascii", errors="replace").split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise SchemaError(f"{path.name} is not a model file")
    if parts[1] != str(FORMAT_VERSION):
        raise SchemaError(f"{path.name}: unsupported model format version {parts[1]}")
    header_line, _, payload = rest.partition(b"\n")
    try:
        header = json.loads(header_line)
        sizes = [int(s) for s in header["layer_sizes"]]
    except (ValueError, KeyError, TypeError) as e:
        raise SchemaError(f"{path.name}: bad header ({e})") from e

    values = np.frombuffer(payload, dtype="<f8")
    expected = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
    if values.size != expected or len(payload) % 8:
        raise SchemaError(f"{path.name}: payload holds {len(payload)} bytes, "
                          f"expected {expected * 8}")
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(values[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in).astype(float))
        pos += fan_out * fan_in
        biases.append(values[pos:pos + fan_out].astype(float))
        pos += fan_out
    return Regressor(layer_sizes=tuple(sizes), weights=weights, biases=biases,
                     activation=header.get("activation", "relu"),
                     dropout_rate=float(header.get("dropout_rate", 0.0)))


# ── Sidecar ──────────────────────────────────────────────────────────────────

def save_meta(path: str | Path, data: Dataset) -> Path:
    """Column names and feature transform of the training data."""
    meta = {
        "feature_names": data.feature_names,
        "label_names": data.label_names,
        "transform": data.transform.model_dump() if data.transform is not None else None,
    }
    out = meta_path(path)
    out.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return out


def load_meta(path: str | Path) -> Optional[dict]:
    """Returns None when the model has no sidecar."""
    src = meta_path(path)
    if not src.exists():
        return None
    try:
        meta = json.loads(src.read_text(encoding="utf-8"))
        transform = meta.get("transform")
        meta["transform"] = Standardizer.model_validate(transform) if transform else None
    except ValueError as e:
        raise SchemaError(f"{src.name}: {e}") from e
    return meta
