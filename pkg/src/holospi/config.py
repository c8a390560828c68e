"""Run configuration: line-oriented ``key = value`` files with defaults
matching the simulation protocol used throughout (10000 frames at 1e5
photons, d ~ N(7, 1) px, t ~ N(0, 1)^2 px, contrast 11, 37x37 initial
support, 2050-pixel shrinkwrap every 5 iterations, 50 difference-map steps
at beta = 1).
"""

import hashlib
import logging
import math
from dataclasses import dataclass, fields

from .errors import ConfigError

log = logging.getLogger("holospi")


@dataclass
class RunConfig:
    # detector
    size: int = 185
    r_min: float = 4.0
    r_max: float = -1.0          # -1 -> floor(size/2)
    # test object
    real_size: int = 50
    n_blobs: int = 30
    object_seed: int = 7
    # single-particle simulation
    n_frames: int = 10000
    photons_per_frame: float = 1e5
    d_mean: float = 7.0
    d_std: float = 1.0
    t_std: float = 1.0
    contrast: float = 11.0
    # latent grid
    n_rot: int = 120
    shift_extent: float = 2.0
    shift_step: float = 0.5
    d_min: float = 4.0
    d_max: float = 10.0
    d_step: float = 0.5
    diameter_top_k: int = 3      # 0 disables per-frame diameter restriction
    # EMC engine
    n_iterations: int = 30
    early_exit_change: float = 0.01
    fluence_mode: str = "fixed-1"      # or "per-frame-ML"
    priors: str = "uniform"            # or "gaussian"
    resp_floor: float = 1e-10
    rate_floor: float = 1e-20
    class_occupancy_eps_rel: float = 1e-3
    phasing_mode: str = "dm"           # or "none" (intensity-model mode)
    snapshot_every: int = 5
    init_scale: float = 0.01
    # phase retrieval
    dm_iters: int = 50
    beta: float = 1.0
    shrinkwrap_sigma: float = 2.0
    support_n_inside: int = 2050
    shrinkwrap_every: int = 5
    support_init: int = 37
    concur_uniform: bool = False
    divide_ratio_printed: bool = False
    # lattice reference
    lattice_type: str = "triangular"   # or "square"
    lattice_a: float = 30.0
    cell_diameter: float = 10.0
    cell_contrast: float = 1.0
    probe_n: float = 100.0
    peak_q_max: float = 0.2
    lattice_photons_scale: float = 2e-4
    lattice_n_rot: int = 60
    lattice_n_cell: int = 24
    lattice_n_frames: int = 5000
    lattice_n_iterations: int = 20
    # run control
    seed: int = 1
    workers: int = 0             # 0 -> all cores

    def finalize(self) -> "RunConfig":
        if self.r_max < 0:
            self.r_max = float(math.floor(self.size / 2))
        self._check()
        return self

    def _check(self):
        req = {
            "n_frames": self.n_frames >= 1,
            "photons_per_frame": self.photons_per_frame > 0,
            "d_std": self.d_std >= 0,
            "t_std": self.t_std >= 0,
            "contrast": self.contrast >= 0,
            "n_rot": self.n_rot >= 1,
            "shift_step": self.shift_step > 0,
            "d_step": self.d_step > 0,
            "d_min": 0 < self.d_min <= self.d_max,
            "n_iterations": self.n_iterations >= 1,
            "beta": self.beta != 0,
            "dm_iters": self.dm_iters >= 0,
            "support_n_inside": self.support_n_inside >= 1,
            "support_init": self.support_init >= 1,
            "shrinkwrap_every": self.shrinkwrap_every >= 1,
            "snapshot_every": self.snapshot_every >= 1,
            "fluence_mode": self.fluence_mode in ("fixed-1", "per-frame-ML"),
            "priors": self.priors in ("uniform", "gaussian"),
            "phasing_mode": self.phasing_mode in ("dm", "none"),
            "lattice_type": self.lattice_type in ("triangular", "square"),
            "lattice_a": self.lattice_a > 0,
            "probe_n": self.probe_n > 0,
            "peak_q_max": self.peak_q_max > 0,
            "workers": self.workers >= 0,
        }
        for key, ok in req.items():
            if not ok:
                raise ConfigError(f"config key {key} violates its constraint "
                                  f"(value {getattr(self, key)!r})")


_FIELD_TYPES = {
    f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
    for f in fields(RunConfig)
}


def _coerce(key: str, raw: str, lineno: int):
    typ = _FIELD_TYPES[key]
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError("expected a boolean")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: cannot parse value for key {key}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys rejected."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, raw, lineno))
    cfg.finalize()
    for f in fields(cfg):
        log.info("config %s = %r", f.name, getattr(cfg, f.name))
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_hash(cfg: RunConfig) -> int:
    """Stable 64-bit hash of the canonical key=value listing."""
    canon = "\n".join(f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg))
    digest = hashlib.sha256(canon.encode()).digest()
    return int.from_bytes(digest[:8], "little")
