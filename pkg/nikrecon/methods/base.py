import dataclasses
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from nikrecon.classic import DynamicImage
from nikrecon.experiment import ExperimentConfig
from nikrecon.navigator import NavigatorSignal
from nikrecon.simulator import CoilMaps, KSpaceDataset
from nikrecon.utils import ConfigError

LOG = logging.getLogger(__name__)

METHOD_CLASSES = {}


@dataclasses.dataclass(frozen=True)
class ReconContext:
    cfg: ExperimentConfig
    dataset: KSpaceDataset  # nav column holds the navigator in use
    navigator: NavigatorSignal
    bins: List[KSpaceDataset]
    coils: CoilMaps
    out_dir: Path
    checkpoint: Optional[Path] = None

    @property
    def query_navs(self) -> List[float]:
        """
        Navigator value representing every motion bin (its mean).
        """
        return [float(np.mean(b.spoke_nav)) for b in self.bins]


class BaseMethod(ABC):
    name: str = ""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    @abstractmethod
    def reconstruct(self, ctx: ReconContext) -> DynamicImage:
        raise NotImplementedError

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        METHOD_CLASSES[cls.name] = cls


def get_method(name: str, cfg: ExperimentConfig) -> BaseMethod:
    if name not in METHOD_CLASSES:
        raise ConfigError(
            f"Unsupported reconstruction method {name!r} - try one of {sorted(METHOD_CLASSES)!r}"
        )
    return METHOD_CLASSES[name](cfg)


def method_names() -> Sequence[str]:
    return sorted(METHOD_CLASSES)
