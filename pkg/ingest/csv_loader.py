"""Tabular CSV ingestor (comma-separated, UTF-8, header row)."""
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from common.errors import DataError, DataIOError
from common.models import Dataset, Standardizer
from ingest.base import BaseIngestor


class CSVIngestor(BaseIngestor):
    def load(self, path: str | Path, label_columns: Sequence[str] = (),
             feature_columns: Optional[Sequence[str]] = None,
             standardize: bool | Standardizer = True, tag: str = "") -> Dataset:
        """Parse numeric columns, drop unusable rows, standardize features.

        ``standardize`` is True (fit on this file), False (raw features) or a
        Standardizer recorded on another split.
        """
        path = Path(path)
        if not path.exists():
            raise DataIOError(f"file not found: {path}")
        df = pd.read_csv(path, encoding="utf-8")
        label_columns = list(label_columns)
        if feature_columns is None:
            feature_columns = [c for c in df.columns if c not in label_columns]
        feature_columns = list(feature_columns)
        self.validate(df, feature_columns + label_columns)

        numeric = (df[feature_columns + label_columns]
                   .apply(pd.to_numeric, errors="coerce")
                   .replace([np.inf, -np.inf], np.nan))
        usable = numeric.notna().all(axis=1)
        dropped = int((~usable).sum())
        if dropped:
            self.logger.warning(f"{path.name}: dropped {dropped} rows with missing or non-numeric values")
        numeric = numeric[usable]
        if numeric.empty:
            raise DataError(f"{path.name}: no usable rows")

        raw = numeric[feature_columns].to_numpy(dtype=float)
        if isinstance(standardize, Standardizer):
            transform = standardize
        elif standardize:
            transform = Standardizer.fit(raw)
            flat = [n for n, z in zip(feature_columns, transform.zero_variance) if z]
            if flat:
                self.logger.warning(f"{path.name}: zero-variance features left at 0: {flat}")
        else:
            transform = None
        features = transform.apply(raw) if transform is not None else raw
        labels = numeric[label_columns].to_numpy(dtype=float) if label_columns else None

        self.logger.info(f"Loaded {len(numeric)} rows from {path.name} "
                         f"({len(feature_columns)} features, {len(label_columns)} labels)")
        return Dataset(features=features, labels=labels, tag=tag or path.stem,
                       feature_names=feature_columns, label_names=label_columns,
                       dropped_rows=dropped, transform=transform)


def load_csv(path: str | Path, label_columns: Sequence[str] = (),
             feature_columns: Optional[Sequence[str]] = None,
             standardize: bool | Standardizer = True, tag: str = "") -> Dataset:
    return CSVIngestor().load(path, label_columns, feature_columns, standardize, tag)
