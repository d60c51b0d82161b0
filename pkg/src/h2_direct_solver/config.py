"""
Run configuration shared by the CLI and the benchmark harness.

Values come from three layers, later ones winning:

    built-in defaults  <  --config file.toml  <  explicit command-line flags

The TOML file holds the same keys as RunConfig, either at the top level or in
a [run] table.
"""

from __future__ import annotations

import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import InvalidInputError
from .geometry_tree import FIXTURE_FAMILIES, PointCloud, fixture_points
from .kernels import KERNEL_KINDS, KernelSpec
from .storage.points import load_points

# Set up logging
logger = logging.getLogger(__name__)


def parse_complex(value: Any) -> complex:
    """Accept numbers, "2+0.5j" strings or [re, im] pairs."""
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    try:
        if isinstance(value, str):
            return complex(value.replace(" ", ""))
        return complex(value)
    except (TypeError, ValueError) as e:
        raise InvalidInputError(f"Cannot parse complex value {value!r}") from e


@dataclass
class RunConfig:
    """
    Parameters of one build / factor / solve run.

    Defaults follow the reference experiment setup: leafsize 25, eta 1,
    eps_h2 1e-3.
    """

    geometry: str = "rod-1d"
    points: int = 400
    points_file: Optional[Path] = None
    kernel: str = "laplace"
    wavenumber: complex = 1.0
    diagonal_shift: float = 1.0
    scale_diagonal: bool = True
    real_bases: bool = True
    leafsize: int = 25
    eta: float = 1.0
    eps_h2: float = 1e-3
    eps_fill_in: float = 1e-5
    stop_level: Optional[int] = None
    seed: int = 0
    dense_guard: int = 20_000
    out: Path = Path("h2_out")

    def validate(self) -> "RunConfig":
        """
        Check value ranges.

        Returns:
            self, for chaining

        Raises:
            InvalidInputError: On the first out-of-range value
        """
        if self.points_file is None and self.geometry not in FIXTURE_FAMILIES:
            raise InvalidInputError(f"Unknown geometry '{self.geometry}', expected one of {FIXTURE_FAMILIES}")
        if self.kernel not in KERNEL_KINDS or self.kernel == "custom":
            raise InvalidInputError(f"Kernel must be 'laplace' or 'helmholtz', got '{self.kernel}'")
        if self.points < 1:
            raise InvalidInputError(f"points must be >= 1, got {self.points}")
        if self.leafsize < 1:
            raise InvalidInputError(f"leafsize must be >= 1, got {self.leafsize}")
        if not self.eta > 0:
            raise InvalidInputError(f"eta must be > 0, got {self.eta}")
        for name in ("eps_h2", "eps_fill_in"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise InvalidInputError(f"{name} must lie in (0, 1), got {value}")
        w = complex(self.wavenumber)
        if not (math.isfinite(w.real) and math.isfinite(w.imag)):
            raise InvalidInputError(f"wavenumber must be finite, got {self.wavenumber}")
        if self.stop_level is not None and self.stop_level < 0:
            raise InvalidInputError(f"stop_level must be >= 0, got {self.stop_level}")
        if self.dense_guard < 1:
            raise InvalidInputError(f"dense_guard must be >= 1, got {self.dense_guard}")
        return self

    def kernel_spec(self) -> KernelSpec:
        if self.kernel == "helmholtz":
            return KernelSpec.helmholtz(self.wavenumber, self.diagonal_shift, self.scale_diagonal)
        return KernelSpec.laplace(self.diagonal_shift, self.scale_diagonal)

    def point_cloud(self) -> PointCloud:
        """Points from the points file if one is set, otherwise the seeded fixture."""
        if self.points_file is not None:
            return load_points(self.points_file)
        return fixture_points(self.geometry, self.points, seed=self.seed)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        w = complex(self.wavenumber)
        data["wavenumber"] = [w.real, w.imag]
        data["points_file"] = str(self.points_file) if self.points_file is not None else None
        data["out"] = str(self.out)
        return data

    def merged(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Copy with every non-None override applied."""
        return replace(self, **_coerce({k: v for k, v in overrides.items() if v is not None}))

    @classmethod
    def from_toml(cls, path: Path, base: Optional["RunConfig"] = None) -> "RunConfig":
        """
        Load a configuration file on top of `base` (defaults if omitted).

        Raises:
            InvalidInputError: Unknown keys or malformed TOML
            OSError: If the file cannot be read
        """
        path = Path(path)
        with path.open("rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise InvalidInputError(f"{path}: {e}") from e
        data = data.get("run", data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidInputError(f"{path}: unknown configuration keys {unknown}")
        logger.info(f"Loaded configuration from {path}: {sorted(data)}")
        return (base or cls()).merged(data)


def _coerce(values: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(values)
    if "wavenumber" in out:
        out["wavenumber"] = parse_complex(out["wavenumber"])
    for key in ("points_file", "out"):
        if key in out:
            out[key] = Path(out[key])
    return out
