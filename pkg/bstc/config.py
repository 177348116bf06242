import dataclasses
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from loguru import logger

from bstc.constant import ConfigError


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("BSTC_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class BaseMeasure:
    """Base measure P0: N(mu0, Sigma0) for beta times Beta_(-1,1)(a_xi, b_xi) for xi."""

    mu0: np.ndarray
    sigma0: np.ndarray
    a_xi: float = 1.0
    b_xi: float = 1.0

    def __post_init__(self):
        mu0 = np.asarray(self.mu0, dtype=float)
        sigma0 = np.atleast_2d(np.asarray(self.sigma0, dtype=float))
        if sigma0.shape != (mu0.size, mu0.size):
            raise ConfigError(
                "Base measure dimension mismatch",
                {"mu0": mu0.size, "Sigma0": sigma0.shape},
            )
        if not np.allclose(sigma0, sigma0.T) or np.linalg.eigvalsh(sigma0).min() <= 0:
            raise ConfigError("Sigma0 must be symmetric positive definite")
        if self.a_xi <= 0 or self.b_xi <= 0:
            raise ConfigError(
                "Beta shape parameters must be positive",
                {"a_xi": self.a_xi, "b_xi": self.b_xi},
            )
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "sigma0", sigma0)

    @property
    def dim(self) -> int:
        return self.mu0.size

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.sigma0)

    def draw(self, rng: np.random.Generator, size: int = 1):
        """Draw `size` (beta, xi) pairs from P0."""
        betas = rng.multivariate_normal(self.mu0, self.sigma0, size=size)
        xis = 2.0 * rng.beta(self.a_xi, self.b_xi, size=size) - 1.0
        # keep xi strictly inside (-1, 1)
        xis = np.clip(xis, -1.0 + 1e-12, 1.0 - 1e-12)
        return betas, xis


@dataclass
class ChainConfig:
    iterations: int = 25000
    burn_in: int = 10000
    thin: int = 3
    seed: int = 0
    n_aux: int = 20
    a_sigma2: float = 3.0
    b_sigma2: float = 2.0
    a_tau2: float = 3.0
    b_tau2: float = 2.0
    a_rho: float = 6.0
    b_rho: float = 1.0
    a_alpha: float = 3.0
    b_alpha: float = 2.0
    mu0: Optional[list] = None  # None -> zero vector
    sigma0: Optional[list] = None  # diagonal of Sigma0, None -> identity
    a_xi: float = 1.0
    b_xi: float = 1.0
    mh_step_rho: float = 0.3
    mh_step_xi: float = 0.25
    fixed_partition: Optional[list] = None
    n_chains: int = 1
    log_every: int = 1000
    adapt: bool = True
    init: str = "default"
    workers: int = field(default_factory=_default_workers)
    joint_entropy_scale: str = "sum"

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def base_measure(self, p: int) -> BaseMeasure:
        dim = p + 1
        mu0 = np.zeros(dim) if self.mu0 is None else np.asarray(self.mu0, float)
        if self.sigma0 is None:
            sigma0 = np.eye(dim)
        else:
            diag = np.asarray(self.sigma0, float)
            if diag.size == 1:
                diag = np.repeat(diag, dim)
            sigma0 = np.diag(diag)
        if mu0.size == 1 and dim > 1:
            mu0 = np.repeat(mu0, dim)
        if mu0.size != dim:
            raise ConfigError(
                "mu0 length does not match the predictor count",
                {"mu0": mu0.size, "p+1": dim},
            )
        return BaseMeasure(mu0, sigma0, self.a_xi, self.b_xi)

    def validate(self) -> "ChainConfig":
        if self.iterations < 1:
            raise ConfigError("iterations must be positive", {"iterations": self.iterations})
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError(
                "burn_in must be smaller than iterations",
                {"burn_in": self.burn_in, "iterations": self.iterations},
            )
        if self.thin < 1:
            raise ConfigError("thin must be at least 1", {"thin": self.thin})
        if self.n_aux < 1:
            raise ConfigError("n_aux must be at least 1", {"n_aux": self.n_aux})
        if self.n_chains < 1:
            raise ConfigError("n_chains must be at least 1", {"n_chains": self.n_chains})
        for key in (
            "a_sigma2", "b_sigma2", "a_tau2", "b_tau2", "a_rho", "b_rho",
            "a_alpha", "b_alpha", "a_xi", "b_xi", "mh_step_rho", "mh_step_xi",
        ):
            if not getattr(self, key) > 0:
                raise ConfigError("Value must be positive", {"Key": key, "Value": getattr(self, key)})
        if self.sigma0 is not None and min(self.sigma0) <= 0:
            raise ConfigError("sigma0 entries must be positive", {"Key": "sigma0"})
        if self.init not in ("default", "prior"):
            raise ConfigError("Unknown initialization", {"Key": "init", "Value": self.init})
        if self.joint_entropy_scale not in ("sum", "mean"):
            raise ConfigError(
                "Unknown joint entropy scale",
                {"Key": "joint_entropy_scale", "Value": self.joint_entropy_scale},
            )
        return self

    def replace(self, **changes) -> "ChainConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    @classmethod
    def preset(cls, name: str) -> "ChainConfig":
        if name not in PRESETS:
            raise ConfigError("Unknown preset", {"Preset": name})
        return cls(**PRESETS[name])

    @classmethod
    def from_mapping(cls, items: dict, base: Optional["ChainConfig"] = None) -> "ChainConfig":
        config = base if base is not None else cls()
        changes = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in items.items():
            if key not in types:
                raise ConfigError("Unknown configuration key", {"Key": key})
            changes[key] = _convert(key, raw, getattr(cls(), key))
        return dataclasses.replace(config, **changes)

    @classmethod
    def from_file(cls, path, base: Optional["ChainConfig"] = None) -> "ChainConfig":
        if not os.path.isfile(path):
            raise ConfigError("Config file does not exist", {"File": path})
        items = {}
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f, start=1):
                line = line.split("#")[0].strip()
                if line == "":
                    continue
                if "=" not in line:
                    raise ConfigError("Expected `key = value`", {"Line": n})
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in {f.name for f in dataclasses.fields(cls)}:
                    raise ConfigError("Unknown configuration key", {"Key": key, "Line": n})
                items[key] = value
        logger.debug(f"Read {len(items)} configuration keys from {path}")
        return cls.from_mapping(items, base)

    @classmethod
    def from_meta(cls, items: dict) -> "ChainConfig":
        """Rebuild the configuration echoed into a chain's `meta` file."""
        known = {f.name for f in dataclasses.fields(cls)}
        return cls.from_mapping({k: v for k, v in items.items() if k in known})

    def to_items(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, (list, tuple, np.ndarray)):
                value = ",".join(str(v) for v in value)
            out[f.name] = str(value)
        return out


def _convert(key, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key in ("mu0", "sigma0"):
            return [float(v) for v in text.split(",")]
        if key == "fixed_partition":
            return [int(v) for v in text.split(",")]
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError("Invalid configuration value", {"Key": key, "Value": raw})


PRESETS = {
    "production": {},
    "multichain": {
        "iterations": 9000,
        "burn_in": 5000,
        "thin": 1,
        "n_chains": 25,
        "init": "prior",
    },
    "seven-region": {
        "iterations": 10000,
        "burn_in": 5000,
        "thin": 1,
        "a_rho": 1.0,
        "b_rho": 1.0,
    },
}
