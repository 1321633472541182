"""Campaign configuration: INI-style sections of ``key = value``, or JSON.

Every key is checked against :data:`SCHEMA` before anything runs. Errors
carry the file, line (INI only), section and key, e.g.
``campaign.ini:7: [ofdm] n_subcarriers: expected an integer >= 2, got 'x'``.
"""

from __future__ import annotations

import configparser
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..chest import SaConfig
from ..scene import (GROUND_GAMMA, WALL_GAMMA, MotionModel, RsuState, SceneGeometry,
                     intersection_scene)
from ..waveform import ArrayConfig, OfdmConfig

ALL_VARIANTS = ("EECLB-LOS", "EECLB-NLOS", "BM1", "BM2", "BM3", "BM4")
FILTER_VARIANTS = ("EECLB-LOS", "EECLB-NLOS", "BM1", "BM2")


class ConfigError(ValueError):
    def __init__(self, msg, source=None, line=None, section=None, key=None):
        loc = ""
        if source:
            loc += f"{source}:"
        if line:
            loc += f"{line}:"
        if loc:
            loc += " "
        if section:
            loc += f"[{section}]"
            loc += f" {key}: " if key else ": "
        super().__init__(loc + msg)
        self.source, self.line, self.section, self.key = source, line, section, key


# --- value parsers --------------------------------------------------------------

def _int(lo=None, hi=None):
    def p(s):
        try:
            v = int(str(s).strip(), 0)
        except ValueError:
            raise ValueError(f"expected an integer{'' if lo is None else f' >= {lo}'}, got {s!r}")
        if lo is not None and v < lo:
            raise ValueError(f"expected an integer >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ValueError(f"expected an integer <= {hi}, got {v}")
        return v
    return p


def _float(lo=None, hi=None, strict_lo=False):
    def p(s):
        try:
            v = float(str(s).strip())
        except ValueError:
            raise ValueError(f"expected a number, got {s!r}")
        if not math.isfinite(v):
            raise ValueError(f"expected a finite number, got {s!r}")
        if lo is not None and (v < lo or (strict_lo and v == lo)):
            raise ValueError(f"expected a number {'>' if strict_lo else '>='} {lo}, got {v}")
        if hi is not None and v > hi:
            raise ValueError(f"expected a number <= {hi}, got {v}")
        return v
    return p


def _bool(s):
    if isinstance(s, bool):
        return s
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _vector(n):
    def p(s):
        parts = s if isinstance(s, (list, tuple)) else re.split(r"[,\s]+", str(s).strip())
        try:
            v = [float(x) for x in parts if str(x) != ""]
        except ValueError:
            raise ValueError(f"expected {n} comma-separated numbers, got {s!r}")
        if len(v) != n or not all(math.isfinite(x) for x in v):
            raise ValueError(f"expected {n} comma-separated numbers, got {s!r}")
        return tuple(v)
    return p


def _choice(*opts):
    def p(s):
        t = str(s).strip()
        if t not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}, got {s!r}")
        return t
    return p


def _variants(s):
    parts = s if isinstance(s, (list, tuple)) else [x for x in re.split(r"[,\s]+", str(s).strip()) if x]
    out = []
    for v in parts:
        name = str(v).upper()
        if name not in ALL_VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {', '.join(ALL_VARIANTS)}")
        if name not in out:
            out.append(name)
    return tuple(out)


SCHEMA = {
    "campaign": {
        "runs": (_int(1), 100),
        "seed": (_int(0, 2**64 - 1), 0),
        "variants": (_variants, ALL_VARIANTS),
        "gating": (_choice("both", "on", "off"), "both"),
        "rtt_mode": (_choice("sum", "average"), "sum"),
        "mse_mode": (_choice("full", "scalar"), "full"),
        "processing_time": (_float(0.0), 1e-3),
        "clock_bias_max": (_float(0.0), 0.0),
        "log_steps": (_bool, True),
    },
    "trajectory": {
        "y_start": (_float(), -70.0),
        "y_end": (_float(), 70.0),
        "speed": (_float(0.0, strict_lo=True), 14.0),
        "epoch": (_float(0.0, strict_lo=True), 0.1),
        "lane_x": (_float(), 1.6),
        "height": (_float(0.0, strict_lo=True), 1.5),
    },
    "scene": {
        "rsu_position": (_vector(3), (0.0, 0.0, 10.0)),
        "rsu_orientation": (_vector(3), (0.0, 0.0, 0.0)),
        "buildings": (_choice("intersection", "none"), "intersection"),
        "wall_gamma": (_float(0.0, 1.0, strict_lo=True), abs(WALL_GAMMA)),
        "ground_gamma": (_float(0.0, 1.0, strict_lo=True), abs(GROUND_GAMMA)),
        "ground": (_bool, True),
    },
    "ofdm": {
        "n_subcarriers": (_int(2), 288),
        "subcarrier_spacing": (_float(0.0, strict_lo=True), 60e3),
        "n_symbols": (_int(1), 12),
        "carrier_freq": (_float(0.0, strict_lo=True), 5.9e9),
        "tx_power_dbm": (_float(), 10.0),
        "noise_psd_dbm_hz": (_float(), -174.0),
        "noise_figure_db": (_float(0.0), 8.0),
        "noise_scale": (_float(0.0), 1.0),
    },
    "array": {
        "n_x": (_int(1), 4),
        "n_z": (_int(1), 2),
    },
    "sa": {
        "n_x_aug": (_int(0), 2),
        "n_z_aug": (_int(0), 2),
        "max_rank": (_int(1), 6),
        "als_max_iters": (_int(1), 200),
        "als_tol": (_float(0.0), 1e-8),
        "restarts": (_int(1), 5),
        "rank_improvement": (_float(0.0, 1.0), 0.05),
        "floor_db": (_float(), 6.0),
        "cru_aug": (_int(0), 3),
    },
    "tracker": {
        "step": (_float(0.0, strict_lo=True), 0.01),
        "substeps": (_int(1), 10),
        "sigma_a": (_float(0.0), 0.1),
        "beta": (_float(0.0, strict_lo=True), 11.34),
        "prior_std": (_vector(6), (5.0, 5.0, 0.01, 1.0, 1.0, 0.01)),
        "random_prior": (_bool, True),
    },
}


@dataclass
class CampaignConfig:
    values: dict = field(default_factory=dict)
    source: str | None = None

    def __post_init__(self):
        full = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for s, kv in self.values.items():
            full.setdefault(s, {}).update(kv)
        self.values = full
        self._check_cross()

    def __getitem__(self, section):
        return self.values[section]

    def replace(self, **overrides) -> "CampaignConfig":
        """Copy with ``section__key=value`` overrides (values parsed by the schema)."""
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for name, raw in overrides.items():
            s, _, k = name.partition("__")
            if s not in SCHEMA or k not in SCHEMA[s]:
                raise ConfigError("unknown key", section=s, key=k)
            try:
                vals[s][k] = SCHEMA[s][k][0](raw)
            except ValueError as exc:
                raise ConfigError(str(exc), section=s, key=k) from None
        return CampaignConfig(vals, self.source)

    def _check_cross(self):
        o, sa, t = self.values["ofdm"], self.values["sa"], self.values["trajectory"]
        if o["n_subcarriers"] - sa["n_x_aug"] - sa["n_z_aug"] < 2:
            raise ConfigError("augmentation leaves fewer than two frequency samples",
                              self.source, section="sa", key="n_x_aug")
        if o["n_subcarriers"] - 2 * sa["cru_aug"] < 2:
            raise ConfigError("CRU augmentation leaves fewer than two frequency samples",
                              self.source, section="sa", key="cru_aug")
        tr = self.values["tracker"]
        if abs(tr["step"] * tr["substeps"] - t["epoch"]) > 1e-9 * t["epoch"]:
            raise ConfigError(f"step * substeps must equal the trajectory epoch ({t['epoch']} s)",
                              self.source, section="tracker", key="substeps")
        if abs(t["y_end"] - t["y_start"]) < t["speed"] * t["epoch"]:
            raise ConfigError("trajectory shorter than one epoch", self.source,
                              section="trajectory", key="y_end")
        try:
            self.geometry()
            RsuState(np.array(self.values["scene"]["rsu_position"]),
                     np.array(self.values["scene"]["rsu_orientation"]))
        except ValueError as exc:
            raise ConfigError(str(exc), self.source, section="scene") from None

    # --- typed views ---------------------------------------------------------
    @property
    def runs(self) -> int:
        return self.values["campaign"]["runs"]

    @property
    def seed(self) -> int:
        return self.values["campaign"]["seed"]

    @property
    def variants(self) -> tuple:
        return self.values["campaign"]["variants"]

    @property
    def gating_modes(self) -> tuple:
        g = self.values["campaign"]["gating"]
        return {"both": (True, False), "on": (True,), "off": (False,)}[g]

    def ofdm(self) -> OfdmConfig:
        o = dict(self.values["ofdm"])
        o.pop("noise_scale")
        return OfdmConfig(**o)

    @property
    def noise_scale(self) -> float:
        return self.values["ofdm"]["noise_scale"]

    def array(self) -> ArrayConfig:
        a = self.values["array"]
        return ArrayConfig(n_x=a["n_x"], n_z=a["n_z"], wavelength=self.ofdm().wavelength)

    def sa(self) -> SaConfig:
        s = dict(self.values["sa"])
        s.pop("cru_aug")
        return SaConfig(**s)

    def cru_sa(self) -> SaConfig:
        s = dict(self.values["sa"])
        aug = s.pop("cru_aug")
        s["n_x_aug"] = s["n_z_aug"] = aug
        return SaConfig(**s)

    def rsu(self) -> RsuState:
        s = self.values["scene"]
        return RsuState(np.array(s["rsu_position"]), np.array(s["rsu_orientation"]))

    def geometry(self) -> SceneGeometry:
        s = self.values["scene"]
        wall = s["wall_gamma"] * np.exp(1j * np.pi)
        ground = s["ground_gamma"] * np.exp(1j * np.pi)
        boxes = [] if s["buildings"] == "none" else list(intersection_scene().buildings)
        return SceneGeometry(boxes, wall, ground, s["ground"])

    def motion(self) -> MotionModel:
        t = self.values["tracker"]
        return MotionModel(T=t["step"], sigma_a=t["sigma_a"])

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, tuple):
                return list(v)
            return v
        return {s: {k: conv(v) for k, v in kv.items()} for s, kv in self.values.items()}


def _validate(raw: dict, source, lines=None) -> dict:
    out = {}
    for section, kv in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section; expected one of {', '.join(SCHEMA)}", source,
                              (lines or {}).get((section, None)), section)
        if not isinstance(kv, dict):
            raise ConfigError("section must map keys to values", source, section=section)
        out[section] = {}
        for key, val in kv.items():
            line = (lines or {}).get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key; expected one of {', '.join(SCHEMA[section])}",
                                  source, line, section, key)
            try:
                out[section][key] = SCHEMA[section][key][0](val)
            except ValueError as exc:
                raise ConfigError(str(exc), source, line, section, key) from None
    return out


def _line_index(text: str) -> dict:
    idx, section = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            idx.setdefault((section, None), n)
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m and section is not None:
            idx.setdefault((section, m.group(1).strip().lower()), n)
    return idx


def parse_ini(text: str, source: str | None = None) -> CampaignConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source or "<string>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        msg = str(exc).splitlines()[0]
        raise ConfigError(f"syntax error: {msg}", source, line) from None
    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    return CampaignConfig(_validate(raw, source, _line_index(text)), source)


def parse_json(text: str, source: str | None = None) -> CampaignConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", source, exc.lineno) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object of sections", source)
    return CampaignConfig(_validate(raw, source), source)


def load_config(path) -> CampaignConfig:
    """Read an INI (default) or JSON (``.json`` suffix or leading ``{``) config.

    Raises ``OSError`` when the file cannot be read and :class:`ConfigError`
    on any content problem.
    """
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        return parse_json(text, str(path))
    return parse_ini(text, str(path))


def default_config(**overrides) -> CampaignConfig:
    cfg = CampaignConfig({})
    return cfg.replace(**overrides) if overrides else cfg


DEFAULT_INI = "\n".join(
    [f"[{s}]\n" + "\n".join(
        f"{k} = {', '.join(map(str, d)) if isinstance(d, tuple) else d}"
        for k, (_, d) in keys.items()) + "\n" for s, keys in SCHEMA.items()]
)
