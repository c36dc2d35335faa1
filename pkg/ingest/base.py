"""Base ingestor abstract class."""
from abc import ABC, abstractmethod
from typing import Iterable

import pandas as pd

from common.errors import SchemaError
from common.logger import get_logger
from common.models import Dataset


class BaseIngestor(ABC):
    def __init__(self):
        self.logger = get_logger(self.__class__.__name__)

    @abstractmethod
    def load(self, *args, **kwargs) -> Dataset:
        """Return a Dataset with finite features (and labels when requested)."""
        pass

    def validate(self, df: pd.DataFrame, required: Iterable[str]) -> None:
        missing = [c for c in required if c not in df.columns]
        if missing:
            raise SchemaError(f"missing columns: {missing} (have {list(df.columns)})")
