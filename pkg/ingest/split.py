"""Source/target and holdout splitting."""
import operator
from typing import Literal

import numpy as np
from pydantic import BaseModel

from common.errors import ConfigurationError, DataError, SchemaError
from common.logger import get_logger
from common.models import Dataset

logger = get_logger("split")

OPS = {
    "<":  operator.lt,
    "<=": operator.le,
    ">":  operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}


class SplitRule(BaseModel):
    """Rows where ``column <op> value`` holds go to the target side."""
    op: Literal["<", "<=", ">", ">=", "==", "!="]
    value: float


def _column(data: Dataset, name: str) -> np.ndarray:
    if name in data.feature_names:
        # rules are written in raw units, not standardized ones
        return data.raw_features()[:, data.feature_names.index(name)]
    if data.labels is not None and name in data.label_names:
        return data.labels[:, data.label_names.index(name)]
    raise SchemaError(f"no column named {name!r}")


def split_by_predicate(data: Dataset, predicate_column: str,
                       predicate: SplitRule) -> tuple[Dataset, Dataset]:
    """Return (source, target)."""
    mask = OPS[predicate.op](_column(data, predicate_column), predicate.value)
    rows = np.arange(len(data))
    for side, count in (("target", int(mask.sum())), ("source", int((~mask).sum()))):
        if count == 0:
            raise DataError(f"{side} side of the split on {predicate_column} "
                            f"{predicate.op} {predicate.value} is empty")
    source = data.subset(rows[~mask], tag="source")
    target = data.subset(rows[mask], tag="target")
    logger.info(f"Split on {predicate_column} {predicate.op} {predicate.value}: "
                f"source={len(source)} target={len(target)}")
    return source, target


def holdout_split(data: Dataset, fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random (rest, holdout) partition with ``fraction`` of rows held out."""
    if not 0 < fraction < 1:
        raise ConfigurationError(f"holdout fraction must be in (0, 1), got {fraction}")
    n = len(data)
    n_hold = int(round(n * fraction))
    if n_hold == 0 or n_hold == n:
        raise DataError(f"{n} rows are too few for a {fraction:.0%} holdout")
    order = np.random.default_rng(seed).permutation(n)
    return (data.subset(np.sort(order[n_hold:])),
            data.subset(np.sort(order[:n_hold])))
