"""Key-value experiment configuration.

An INI-style file with one section per settings group::

    [desk]
    k = 50
    [episode]
    attack = boundary
    trials = 20
    [nes]
    sigma = 0.001

Every key can also be given on the command line as ``--section.key value``;
the root seed comes from ``--seed``, then ``QW_SEED``, then ``[run] seed``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, replace

from .. import attacks as atk
from ..detector import BanPolicy
from .desk import SEED_ENV, DeskConfig
from .episode import EpisodeConfig

# settings that are not dataclass fields
RUN_DEFAULTS = {
    "seed": 0,
    "cache_dir": "",
    "out": "",
    "k_list": (1, 5, 10, 25, 50, 100),
    "host": "127.0.0.1",
    "port": 8707,
    "soft": False,
    "trial": 0,
    "suite": ("nes", "boundary", "hybrid"),
    "log_level": "INFO",
}

ECONOMICS_DEFAULTS = {
    "detections": 97.0,
    "buffer_hours": 100.0,
    "buffer_queries": 10000.0,
    "undefended_queries": 13400.0,
    "price_per_1000": 1.5,
}

SECTIONS = {
    "desk": DeskConfig,
    "episode": EpisodeConfig,
    "ban": BanPolicy,
    "nes": atk.NesParams,
    "boundary": atk.BoundaryParams,
    "hybrid": atk.HybridParams,
}

# nested or derived fields that get their own section / come from elsewhere
SKIP = {("desk", "seed"), ("episode", "seed"), ("episode", "ban"), ("episode", "nes"), ("episode", "boundary"),
        ("episode", "hybrid"), ("nes", "blinding"), ("nes", "soft"), ("boundary", "blinding"),
        ("hybrid", "surrogate")}


def _defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls) if (_section_of(cls), f.name) not in SKIP}


def _section_of(cls) -> str:
    return next(name for name, c in SECTIONS.items() if c is cls)


def known_keys() -> dict[str, dict]:
    keys = {name: _defaults(cls) for name, cls in SECTIONS.items()}
    keys["run"] = dict(RUN_DEFAULTS)
    keys["economics"] = dict(ECONOMICS_DEFAULTS)
    return keys


def coerce(default, text: str):
    """Parse ``text`` into the type of ``default``."""
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if default and len(set(map(type, default))) > 1:
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated values, got {text!r}")
            return tuple(coerce(d, p) for d, p in zip(default, parts))
        elem = default[0] if default else ""
        return tuple(coerce(elem, p) for p in parts)
    if default is None:
        return None if text.lower() in ("", "none") else text
    return text


@dataclass
class Settings:
    values: dict = field(default_factory=known_keys)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, text: str) -> None:
        if section not in self.values or key not in self.values[section]:
            raise KeyError(f"unknown config key {section}.{key}")
        default = known_keys()[section][key]
        self.values[section][key] = coerce(default, text)

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    def desk(self) -> DeskConfig:
        return replace(DeskConfig(), seed=self.seed, **self.values["desk"])

    def episode(self) -> EpisodeConfig:
        ep = self.values["episode"]
        nes_changed = self.values["nes"] != _defaults(atk.NesParams)
        nes = atk.NesParams(**self.values["nes"]) if nes_changed else None
        return EpisodeConfig(seed=self.seed, ban=BanPolicy(**self.values["ban"]), nes=nes,
                             boundary=atk.BoundaryParams(**self.values["boundary"]),
                             hybrid=atk.HybridParams(**self.values["hybrid"]), **ep)

    @property
    def cache_dir(self) -> str | None:
        return self.values["run"]["cache_dir"] or None


def load_settings(path=None, overrides: dict | None = None, env=None) -> Settings:
    """File, then environment seed, then explicit overrides (``"section.key" -> text``)."""
    env = os.environ if env is None else env
    s = Settings()
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        with open(path) as fh:
            cp.read_file(fh)
        for section in cp.sections():
            for key, text in cp.items(section):
                s.set(section, key, text)
    if SEED_ENV in env:
        s.set("run", "seed", env[SEED_ENV])
    for dotted, text in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        s.set(section, key, text)
    return s


def dump_settings(s: Settings, path) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    for section, vals in s.values.items():
        cp[section] = {k: _fmt(v) for k, v in vals.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v)
