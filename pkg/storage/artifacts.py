"""Run artifacts: manifest JSON and CSV exports.

All files of one run go into one output directory; nothing here appends to an
existing file.
"""
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from common.logger import get_logger
from common.models import (Dataset, LabelDensityMap, PseudoLabelSet, RunReport,
                           UncertainPrediction, stack_predictions)

logger = get_logger("artifacts")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str)


def write_json(payload: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(payload) + "\n", encoding="utf-8")
    return path


def write_manifest(report: RunReport, path: str | Path) -> Path:
    path = write_json(report.model_dump(mode="json"), path)
    logger.info("Manifest → %s", path)
    return path


def write_pseudo_labels_csv(pseudo: PseudoLabelSet, path: str | Path,
                            label_names: Sequence[str] = ()) -> Path:
    rows = []
    for p in pseudo.labels:
        names = list(label_names) or [f"y{d}" for d in range(len(p.value))]
        row = {"source_index": p.source_index}
        row.update({f"pseudo_{n}": v for n, v in zip(names, p.value)})
        row.update({"beta": p.credibility, "window_cells": p.locality_cells,
                    "fallback": int(p.fallback)})
        rows.append(row)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)
    logger.info("[CSV] Saved %d pseudo-labels → %s", len(rows), path)
    return path


def density_map_frame(dmap: LabelDensityMap) -> pd.DataFrame:
    """Header rows (dims, y0, ym, g, K) followed by one row per cell."""
    spec = dmap.spec
    header = [
        {"key": "dims", "value": spec.dims},
        *({"key": f"y0_{d}", "value": spec.y0[d]} for d in range(spec.dims)),
        *({"key": f"ym_{d}", "value": spec.ym[d]} for d in range(spec.dims)),
        *({"key": f"g_{d}", "value": spec.g[d]} for d in range(spec.dims)),
        {"key": "K", "value": dmap.count},
    ]
    cells = []
    for idx in np.ndindex(*spec.shape):
        row = {f"i{d}": j for d, j in enumerate(idx)}
        row.update({f"center_{d}": float(spec.centers(d)[j]) for d, j in enumerate(idx)})
        row["density"] = float(dmap.densities[idx])
        cells.append(row)
    return pd.concat([pd.DataFrame(header), pd.DataFrame(cells)], ignore_index=True)


def write_density_map_csv(dmap: LabelDensityMap, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    density_map_frame(dmap).to_csv(path, index=False)
    logger.info("[CSV] Density map %s → %s", dmap.spec.shape, path)
    return path


def write_predictions_csv(data: Dataset, source: np.ndarray, adapted: np.ndarray,
                          mc_predictions: Sequence[UncertainPrediction],
                          confident_rows: Sequence[int], path: str | Path,
                          label_names: Sequence[str] = ()) -> Path:
    """One row per target example, enough to recompute every reported metric.

    ``source``/``adapted`` are deterministic outputs; ``mc_predictions`` are the
    dropout means and uncertainties the confidence split was made from.
    """
    mc_mean, unc = stack_predictions(mc_predictions)
    source = np.asarray(source, dtype=float).reshape(len(data), -1)
    adapted = np.asarray(adapted, dtype=float).reshape(len(data), -1)
    names = list(label_names) or data.label_names or [f"y{d}" for d in range(source.shape[1])]
    df = pd.DataFrame({"index": np.arange(len(data))})
    for d, n in enumerate(names):
        if data.labels is not None:
            df[n] = data.labels[:, d]
        df[f"source_{n}"] = source[:, d]
        df[f"adapted_{n}"] = adapted[:, d]
        df[f"mc_mean_{n}"] = mc_mean[:, d]
        df[f"uncertainty_{n}"] = unc[:, d]
    confident = np.zeros(len(data), dtype=int)
    confident[list(confident_rows)] = 1
    df["confident"] = confident
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path


def write_dataset_csv(data: Dataset, path: str | Path) -> Path:
    """Features in raw units plus label columns."""
    df = pd.DataFrame(data.raw_features(), columns=data.feature_names)
    if data.labels is not None:
        for d, n in enumerate(data.label_names):
            df[n] = data.labels[:, d]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    logger.info("[CSV] Saved %d rows → %s", len(df), path)
    return path


def write_tables(tables: dict[str, pd.DataFrame], out_dir: str | Path,
                 prefix: str = "sweep") -> dict[str, str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, df in tables.items():
        p = out_dir / f"{prefix}_{name}.csv"
        df.to_csv(p, index=False)
        paths[name] = str(p)
    return paths


def read_density_map_header(path: str | Path) -> Optional[dict]:
    """Header keys of an exported map, or None if the file has none."""
    df = pd.read_csv(path)
    if "key" not in df.columns:
        return None
    head = df[df["key"].notna()]
    return dict(zip(head["key"], head["value"]))
