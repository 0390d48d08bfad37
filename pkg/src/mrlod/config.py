"""Experiment configuration: defaults, file parsing, CLI overrides, validation.

Config files are flat ``key=value`` text; command-line ``--key value`` pairs
override file values, which override the per-experiment defaults. Numbers
accept plain decimals, fractions ("1/8") and power notation ("2^-3").
"""

import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .mesh import MeshError, dyadic_exponent

__all__ = ["ConfigError", "ExperimentConfig", "parse_number", "parse_number_list"]

EXPERIMENTS = ("convergence", "stabilization", "varcoeff", "scattering", "decay")
PROBLEMS = ("helmholtz", "poisson")
VARIANT_CHOICES = ("stabilized", "normal", "both")
STRATEGIES = ("direct_all", "direct_first_gmres_rest")
SOURCES = ("sin_cos", "bump")
BOUNDARIES = ("robin", "dirichlet")
GEOMETRIES = ("unit_square", "square_with_hole")
COEFFS = ("constant", "inclusions")


class ConfigError(ValueError):
    pass


def parse_number(text):
    """Parse "0.125", "1/8" or "2^-3" into a float."""
    s = str(text).strip()
    try:
        if "^" in s:
            base, exp = s.split("^", 1)
            return float(base) ** float(exp)
        if "/" in s:
            num, den = s.split("/", 1)
            return float(num) / float(den)
        return float(s)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse number {text!r}") from exc


def parse_number_list(text):
    return [parse_number(part) for part in str(text).split(",") if part.strip()]


@dataclass
class ExperimentConfig:
    experiment: str = "convergence"
    problem: str = "helmholtz"
    variant: str = "stabilized"
    kappa: list = field(default_factory=lambda: [1.0])
    H1: float = 0.5
    HL: list = field(default_factory=lambda: [2.0 ** -k for k in range(1, 6)])
    hfine: float = 2.0 ** -7
    m: list = field(default_factory=lambda: [1, 2, 3])
    m_per_level: list | None = None
    source: str = "sin_cos"
    source_r: float = 0.125
    source_x0: float = 0.5
    source_y0: float = 0.5
    source_amplitude: float = 10000.0
    boundary: str = "robin"
    geometry: str = "unit_square"
    hole: list = field(default_factory=lambda: [0.375, 0.375, 0.625, 0.625])
    coeff: str = "constant"
    coeff_value: float = 1.0
    coeff_eps: float = 2.0 ** -5
    coeff_lo: float = 1.0
    coeff_hi: float = 16.0
    strategy: str = "direct_all"
    restart: int = 50
    rtol: float = 1e-6
    maxiter: int = 2000
    fov_samples: int = 100
    seed: int = 1729
    parallel: bool = False

    # -- construction -----------------------------------------------------

    @classmethod
    def defaults_for(cls, experiment: str) -> "ExperimentConfig":
        """Desk-scale defaults mirroring the reference experiment setups."""
        if experiment not in EXPERIMENTS:
            raise ConfigError(
                f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
        cfg = cls(experiment=experiment)
        if experiment == "stabilization":
            cfg.problem = "poisson"
            cfg.variant = "both"
            cfg.kappa = [0.0]
            cfg.boundary = "dirichlet"
            cfg.HL = [2.0 ** -k for k in range(3, 7)]
            cfg.H1 = cfg.HL[0]
            cfg.m = [1, 2, 3, 4]
        elif experiment == "varcoeff":
            cfg.kappa = [4.0]
            cfg.H1 = 2.0 ** -3
            cfg.HL = [2.0 ** -k for k in range(3, 6)]
            cfg.m = [2]
            cfg.coeff = "inclusions"
            cfg.source = "bump"
        elif experiment == "scattering":
            cfg.kappa = [16.0]
            cfg.H1 = 2.0 ** -3
            cfg.HL = [2.0 ** -6]
            cfg.m = [2]
            cfg.geometry = "square_with_hole"
            cfg.source = "bump"
            cfg.source_r = 0.05
            cfg.source_x0 = 0.125
            cfg.source_y0 = 0.125
            cfg.strategy = "direct_first_gmres_rest"
        elif experiment == "decay":
            cfg.kappa = [2.0]
            cfg.H1 = 2.0 ** -3
            cfg.HL = [2.0 ** -3]
            cfg.hfine = 2.0 ** -6
            cfg.m = [0]
        return cfg

    _LIST_FIELDS = {"kappa": float, "HL": float, "m": int, "hole": float,
                    "m_per_level": int}
    _NUM_FIELDS = {"H1", "hfine", "source_r", "source_x0", "source_y0",
                   "source_amplitude", "coeff_value", "coeff_eps", "coeff_lo",
                   "coeff_hi", "rtol"}
    _INT_FIELDS = {"restart", "maxiter", "fov_samples", "seed"}
    _BOOL_FIELDS = {"parallel"}

    def set_key(self, key: str, raw: str) -> None:
        names = {f.name for f in fields(self)}
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        if key in self._LIST_FIELDS:
            caster = self._LIST_FIELDS[key]
            setattr(self, key, [caster(v) for v in parse_number_list(raw)])
        elif key in self._NUM_FIELDS:
            setattr(self, key, parse_number(raw))
        elif key in self._INT_FIELDS:
            setattr(self, key, int(parse_number(raw)))
        elif key in self._BOOL_FIELDS:
            setattr(self, key, str(raw).strip().lower() in ("1", "true", "yes", "on"))
        else:
            setattr(self, key, str(raw).strip())

    def apply_file(self, path) -> None:
        try:
            with open(path) as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(
                            f"{path}:{lineno}: expected key=value, got {line!r}")
                    key, val = line.split("=", 1)
                    self.set_key(key.strip(), val.strip())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc

    # -- derived ------------------------------------------------------------

    def levels_for(self, HL: float) -> int:
        ratio = self.H1 / HL
        L = round(np.log2(ratio)) + 1 if ratio > 0 else 0
        if L < 1 or abs(self.H1 * 2.0 ** (1 - L) - HL) > 1e-12:
            raise ConfigError(
                f"H_L={HL} is not reachable from H1={self.H1} by halving")
        return L

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.variant not in VARIANT_CHOICES:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == "both" and self.experiment != "stabilization":
            raise ConfigError("variant=both is only valid for stabilization")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}")
        if self.boundary not in BOUNDARIES:
            raise ConfigError(f"unknown boundary {self.boundary!r}")
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"unknown geometry {self.geometry!r}")
        if self.coeff not in COEFFS:
            raise ConfigError(f"unknown coefficient kind {self.coeff!r}")
        if not self.kappa:
            raise ConfigError("kappa list is empty")
        for k in self.kappa:
            if self.problem == "helmholtz" and k <= 0:
                raise ConfigError(f"helmholtz needs kappa > 0, got {k}")
            if self.problem == "poisson" and k != 0:
                raise ConfigError("poisson mode requires kappa=0")
        if self.problem == "helmholtz" and self.boundary != "robin":
            raise ConfigError("helmholtz runs need the robin outer boundary")
        try:
            dyadic_exponent(self.H1)
            dyadic_exponent(self.hfine)
            for HL in self.HL:
                dyadic_exponent(HL)
        except MeshError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.HL:
            raise ConfigError("H_L sweep is empty")
        for HL in self.HL:
            if self.experiment != "stabilization":
                self.levels_for(HL)
            if self.hfine > HL / 2:
                raise ConfigError(
                    f"fine mesh {self.hfine} too coarse for H_L={HL}: bubbles "
                    "need hfine <= H_L/2")
            if self.hfine > HL / 4:
                warnings.warn(
                    f"hfine={self.hfine} is above H_L/4 for H_L={HL}; corrector "
                    "resolution is marginal", stacklevel=2)
        if self.m_per_level is not None and self.experiment != "stabilization":
            Lmax = self.levels_for(min(self.HL))
            if len(self.m_per_level) != Lmax:
                raise ConfigError(
                    f"m_per_level needs {Lmax} entries, got {len(self.m_per_level)}")
        if any(mm < 0 for mm in self.m):
            raise ConfigError("oversampling m must be >= 0")
        if self.geometry == "square_with_hole":
            if len(self.hole) != 4:
                raise ConfigError("hole needs 4 coordinates x0,y0,x1,y1")
        if self.coeff == "inclusions":
            dyadic_exponent(self.coeff_eps)
            step = 0.25 * self.coeff_eps / self.hfine
            if abs(step - round(step)) > 1e-12 or round(step) < 1:
                raise ConfigError(
                    f"inclusion grid eps={self.coeff_eps} not resolved by "
                    f"hfine={self.hfine}")
            if not (0 < self.coeff_lo <= self.coeff_hi):
                raise ConfigError("inclusion value range must satisfy 0 < lo <= hi")
        if self.restart < 1:
            raise ConfigError("restart must be >= 1")
        if self.rtol <= 0:
            raise ConfigError("rtol must be positive")
        if self.fov_samples < 1:
            raise ConfigError("fov_samples must be >= 1")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, list):
                out[f.name] = ",".join(str(v) for v in val)
            else:
                out[f.name] = str(val)
        return out

    def m_for_level(self, level: int, m_default: int) -> int:
        if self.m_per_level is not None:
            return int(self.m_per_level[level - 1])
        return int(m_default)
