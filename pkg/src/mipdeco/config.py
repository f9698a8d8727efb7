"""Flat ``key = value`` configuration files with sections.

Example::

    [instance]
    kind = poisson
    h = 0.0625
    n_t = 10
    m = 3
    S = 2
    seed = 0

    [ipa]
    p_max = 50
    strategy = global

Unknown sections or keys are rejected with the offending name in the message.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .harness import InstanceSpec
from .ipm import IpmSettings
from .penalty import IpaSettings


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


SCHEMA = {
    "instance": {"kind": str, "h": float, "n_t": int, "m": int, "S": int, "seed": int, "T": float},
    "ipa": {"epsilon0": float, "sigma": float, "eps_feas": float, "p_max": int, "theta": _opt_int,
            "strategy": str, "rng_seed": int, "max_outer": int, "decrease_rtol": float},
    "ipm": {"mu0": float, "mu_factor": float, "kkt_tol": float, "mu_floor": float, "gamma": float,
            "eta_rule": str, "step_fraction": float, "gmres_restart": int, "gmres_max_iter": int,
            "max_gmres_failures": int, "keep_residual_history": _bool, "step_rule": str,
            "predictor_corrector": _bool, "direct_fallback": _bool, "max_iter": int},
    "mor": {"r": _opt_int, "tol": _opt_float},
    "output": {"dir": str, "plots": _bool, "residual_history": _bool},
    "experiment": {"instances": int, "workers": int},
}


@dataclass
class RunConfig:
    instance: InstanceSpec = field(default_factory=InstanceSpec)
    ipa: IpaSettings = field(default_factory=IpaSettings)
    ipm: IpmSettings = field(default_factory=IpmSettings)
    mor: dict = field(default_factory=lambda: {"r": None, "tol": 1e-5})
    output: dict = field(default_factory=lambda: {"dir": None, "plots": True, "residual_history": False})
    experiment: dict = field(default_factory=lambda: {"instances": 10, "workers": 1})

    def as_dict(self) -> dict:
        from dataclasses import asdict

        return {"instance": asdict(self.instance), "ipa": asdict(self.ipa), "ipm": asdict(self.ipm),
                "mor": dict(self.mor), "output": dict(self.output), "experiment": dict(self.experiment)}


def parse_sections(text: str) -> dict:
    """Parse and type-check; returns ``{section: {key: value}}`` with only the given keys."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive (``S``)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    out = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        out[sec] = {}
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key '{sec}.{key}'")
            try:
                out[sec][key] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"invalid value for '{sec}.{key}': {raw!r} ({exc})") from exc
    return out


def build_config(sections: dict) -> RunConfig:
    cfg = RunConfig()
    try:
        if "instance" in sections:
            cfg.instance = InstanceSpec(**sections["instance"])
        if "ipa" in sections:
            cfg.ipa = IpaSettings(**sections["ipa"])
        if "ipm" in sections:
            cfg.ipm = IpmSettings(**sections["ipm"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for name in ("mor", "output", "experiment"):
        getattr(cfg, name).update(sections.get(name, {}))
    return cfg


def load_config(path=None, text: str | None = None) -> RunConfig:
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return build_config(parse_sections(text or ""))
