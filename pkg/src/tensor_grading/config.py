"""
Run configuration: defaults, JSON file, then command-line overrides.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

from tensor_grading.volume_core import TensorGradingError

logger = logging.getLogger(__name__)

PATH_KEYS = ("dataset", "roi")
EXECUTION_KEYS = ("threads",)


class InvalidConfigError(TensorGradingError):
    """
    run configuration missing, malformed or out of range
    """


@dataclass
class RunConfig:
    """
    Every parameter of a pipeline run.

    * dataset: dataset manifest (relative paths in a config file resolve against the file)
    * roi: ROI volume overriding the manifest's
    * radii: patch radii of the patch-size comparison; empty means ``radius`` only
    * leave_out: size of the contiguous template groups held out during template grading
    * n_folds: k-fold passes instead of random splits when set
    """

    dataset: Optional[str] = None
    roi: Optional[str] = None
    out_dir: str = "tensor_grading_output"
    radius: int = 1
    radii: List[int] = field(default_factory=list)
    n_per_class: int = 50
    rho: float = 0.2
    lam: float = 0.09
    C: float = 1.0
    n_iter: int = 100
    test_fraction: float = 0.2
    n_folds: Optional[int] = None
    leave_out: int = 10
    distance_mode: str = "per-voxel"
    disp_sign: str = "minus"
    nonneg: bool = False
    tol: float = 1e-7
    max_iter: int = 10000
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        """
        Raise InvalidConfigError on the first out-of-range parameter.
        """
        radii = self.radii or [self.radius]
        if any(not isinstance(r, int) or r < 0 for r in radii + [self.radius]):
            raise InvalidConfigError("Patch radii should be nonnegative integers.")
        if self.n_per_class < 1:
            raise InvalidConfigError("n_per_class should be at least 1.")
        if self.rho < 0 or self.lam < 0:
            raise InvalidConfigError("rho and lam should be nonnegative.")
        if self.C <= 0:
            raise InvalidConfigError("C should be positive.")
        if self.n_iter < 1:
            raise InvalidConfigError("n_iter should be at least 1.")
        if not 0.0 < self.test_fraction < 1.0:
            raise InvalidConfigError("test_fraction should lie strictly between 0 and 1.")
        if self.n_folds is not None and self.n_folds < 2:
            raise InvalidConfigError("n_folds should be at least 2.")
        if self.leave_out < 1:
            raise InvalidConfigError("leave_out should be at least 1.")
        if self.distance_mode not in ("per-voxel", "whole-patch"):
            raise InvalidConfigError("distance_mode should be 'per-voxel' or 'whole-patch'.")
        if self.disp_sign not in ("minus", "plus"):
            raise InvalidConfigError("disp_sign should be 'minus' or 'plus'.")
        if self.tol <= 0 or self.max_iter < 1:
            raise InvalidConfigError("tol should be positive and max_iter at least 1.")
        if self.threads < 1:
            raise InvalidConfigError("threads should be at least 1.")

    def as_dict(self) -> Dict[str, object]:
        """
        Plain dict of every parameter, recorded in run.json.
        """
        return asdict(self)

    def report_echo(self) -> Dict[str, object]:
        """
        Parameters echoed into evaluation reports; execution settings such as the thread count are left out
        so that reports do not depend on them.
        """
        echo = self.as_dict()
        for key in EXECUTION_KEYS:
            del echo[key]
        return echo


def load_run_config(path: Optional[str | Path] = None, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """
    Defaults, then the JSON file at ``path``, then every override that is not None.
    """
    known = {item.name for item in fields(RunConfig)}
    values: Dict[str, object] = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise InvalidConfigError(f"Cannot read configuration file {path}.") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"Configuration file {path.name} is not valid JSON.") from exc
        if not isinstance(data, dict):
            raise InvalidConfigError(f"Configuration file {path.name} should hold a JSON object.")
        for key, value in data.items():
            if key not in known:
                raise InvalidConfigError(f"Unknown configuration key '{key}'.")
            if key in PATH_KEYS and value is not None and not Path(value).is_absolute():
                value = str(path.parent / value)
            values[key] = value
    for key, value in (overrides or {}).items():
        if key not in known:
            raise InvalidConfigError(f"Unknown configuration key '{key}'.")
        if value is not None:
            values[key] = value
    config = RunConfig(**values)
    config.validate()
    logger.debug("run configuration %s", config.as_dict())
    return config
