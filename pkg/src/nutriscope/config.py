"""Experiment configuration: schema, file parsing, validation, fingerprint.

Config files are line-oriented ``key = value`` text under ``[section]``
headers. Every key must belong to the schema; unknown sections or keys are
rejected before any compute happens.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from types import SimpleNamespace

from .errors import ConfigError

_PRESETS = {
    "baseline": (False, False, False),
    "fusion": (True, False, False),
    "fusion-adapter": (True, True, False),
    "full": (True, True, True),
}


def _boolean(text):
    t = str(text).strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got '{text}'")


def _csv_int(text):
    return [int(x) for x in str(text).split(",") if x.strip() != ""]


def _csv_float(text):
    return [float(x) for x in str(text).split(",") if x.strip() != ""]


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "root": (str, "runs/corpus"),
        "samples": (int, 200),
        "canvas": (int, 64),
        "items_min": (int, 1),
        "items_max": (int, 4),
        "split_train": (int, 7),
        "split_test": (int, 3),
        "master_seed": (int, 0),
        "pool_size": (int, 60),
        "baseline_distance": (float, 0.5),
        "previews": (_boolean, False),
        "generate": (_boolean, True),
    },
    "model": {
        "stages": (int, 4),
        "widths": (_csv_int, [16, 32, 64, 128]),
        "unify_width": (int, 64),
        "unify_grid": (int, 4),
        "attn_dim": (int, 64),
        "use_fusion": (_boolean, True),
        "use_adapter": (_boolean, True),
        "use_masked_head": (_boolean, True),
        "mask_reduction": (int, 4),
        "hard_mask": (_boolean, False),
        "keep_fraction": (float, 0.5),
        "dtype": (str, "float32"),
    },
    "fusion": {
        "lowpass_cutoff": (float, 0.25),
        "cutoff_per_stage": (_csv_float, []),
        "temperature": (float, 0.07),
    },
    "depth": {
        "provider": (str, "corrupt"),
        "corrupt_scale": (float, 1.25),
        "corrupt_shift": (float, 0.05),
        "distortion_amp": (float, 0.05),
        "noise_sd": (float, 0.0),
        "max_depth": (float, 1.0),
        "aux_weight": (float, 0.0),
    },
    "train": {
        "epochs": (int, 150),
        "batch_size": (int, 8),
        "learning_rate": (float, 1e-3),
        "weight_decay": (float, 1e-5),
        "seed": (int, 0),
        "align_weight": (float, 0.1),
        "smoothing": (float, 0.3),
        "val_fraction": (float, 0.1),
        "checkpoint_every": (int, 0),
        "out_dir": (str, "runs/exp"),
        "preset": (str, ""),
    },
}


class Config:
    """Validated experiment description; sections as attribute namespaces."""

    def __init__(self, values=None):
        for section, keys in SCHEMA.items():
            ns = SimpleNamespace(**{k: default for k, (_, default) in keys.items()})
            setattr(self, section, ns)
        if values:
            for (section, key), raw in values.items():
                self._assign(section, key, raw)
        self.finalize()

    def _assign(self, section, key, raw):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        parser, _ = SCHEMA[section][key]
        try:
            value = parser(raw) if isinstance(raw, str) else raw
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
        setattr(getattr(self, section), key, value)

    def finalize(self):
        """Apply the preset (if any) and check every invariant."""
        preset = self.train.preset
        if preset:
            if preset not in _PRESETS:
                raise ConfigError(
                    f"unknown preset '{preset}', choose from {sorted(_PRESETS)}"
                )
            fusion, adapter, head = _PRESETS[preset]
            self.model.use_fusion = fusion
            self.model.use_adapter = adapter
            self.model.use_masked_head = head
        self.validate()
        return self

    def validate(self):
        d, m, f, dp, t = self.data, self.model, self.fusion, self.depth, self.train
        checks = [
            (d.samples >= 2, "data.samples must be >= 2"),
            (d.items_min >= 1 and d.items_max >= d.items_min,
             "data item count range is empty"),
            (d.split_train >= 1 and d.split_test >= 1,
             "split ratio parts must be >= 1"),
            (d.pool_size >= 1, "data.pool_size must be >= 1"),
            (d.baseline_distance > 0, "data.baseline_distance must be > 0"),
            (m.stages >= 1, "model.stages must be >= 1"),
            (len(m.widths) == m.stages,
             f"model.widths needs {m.stages} entries, got {len(m.widths)}"),
            (all(a < b for a, b in zip(m.widths, m.widths[1:])),
             "model.widths must be strictly increasing"),
            (d.canvas >= 2 ** m.stages,
             f"data.canvas {d.canvas} too small for {m.stages} stride-2 stages"),
            (not m.use_masked_head or d.canvas // 2 ** m.stages >= m.unify_grid,
             f"deepest stage ({d.canvas // 2 ** m.stages}px) is smaller than "
             f"model.unify_grid {m.unify_grid}"),
            (m.unify_width >= 1 and m.unify_grid >= 1 and m.attn_dim >= 1,
             "model head extents must be >= 1"),
            (0 < m.keep_fraction <= 1, "model.keep_fraction must be in (0, 1]"),
            (m.dtype in ("float32", "float64"),
             f"model.dtype must be float32 or float64, got '{m.dtype}'"),
            (0 <= f.lowpass_cutoff <= 1, "fusion.lowpass_cutoff must be in [0, 1]"),
            (not f.cutoff_per_stage or len(f.cutoff_per_stage) == m.stages,
             "fusion.cutoff_per_stage must match model.stages"),
            (all(0 <= c <= 1 for c in f.cutoff_per_stage),
             "per-stage cutoffs must be in [0, 1]"),
            (f.temperature > 0, "fusion.temperature must be > 0"),
            (dp.provider in ("corrupt", "file"),
             f"depth.provider must be corrupt or file, got '{dp.provider}'"),
            (dp.corrupt_scale != 0, "depth.corrupt_scale must be nonzero"),
            (dp.max_depth > 0, "depth.max_depth must be > 0"),
            (dp.aux_weight >= 0, "depth.aux_weight must be >= 0"),
            (t.epochs >= 0, "train.epochs must be >= 0"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.learning_rate > 0, "train.learning_rate must be > 0"),
            (t.weight_decay >= 0, "train.weight_decay must be >= 0"),
            (0 < t.smoothing <= 1, "train.smoothing must be in (0, 1]"),
            (t.align_weight >= 0, "train.align_weight must be >= 0"),
            (0 <= t.val_fraction <= 0.5, "train.val_fraction must be in [0, 0.5]"),
            (t.checkpoint_every >= 0, "train.checkpoint_every must be >= 0"),
            (m.use_adapter <= (m.use_fusion or m.use_masked_head),
             "the depth adapter requires fusion or the masked head"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    # -- serialization ----------------------------------------------------

    def to_dict(self):
        return {
            section: {k: getattr(getattr(self, section), k) for k in keys}
            for section, keys in SCHEMA.items()
        }

    def to_text(self):
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                value = getattr(getattr(self, section), key)
                if isinstance(value, list):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = "true" if value else "false"
                out.write(f"{key} = {value}\n")
            out.write("\n")
        return out.getvalue()

    def stage_cutoffs(self):
        if self.fusion.cutoff_per_stage:
            return list(self.fusion.cutoff_per_stage)
        return [self.fusion.lowpass_cutoff] * self.model.stages

    def hard_keep_count(self):
        return max(1, round(self.model.keep_fraction * self.model.unify_width))

    def architecture_fingerprint(self):
        """Hash of everything that determines parameter names and shapes."""
        arch = {k: v for k, v in self.to_dict()["model"].items()
                if k not in ("dtype", "hard_mask", "keep_fraction")}
        blob = json.dumps(arch, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def copy(self, overrides=None):
        values = {}
        for section, keys in SCHEMA.items():
            for key in keys:
                values[(section, key)] = getattr(getattr(self, section), key)
        if overrides:
            values.update(overrides)
        return Config(values)


def load_config(path=None, overrides=None):
    """Read a config file (optional) and apply ``section.key=value`` overrides."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, strict=True)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                values[(section, key)] = raw
    for item in overrides or []:
        try:
            dotted, raw = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
        except ValueError:
            raise ConfigError(
                f"override '{item}' is not of the form section.key=value"
            ) from None
        values[(section.strip(), key.strip())] = raw.strip()
    return Config(values)


def config_from_dict(payload):
    values = {}
    for section, keys in payload.items():
        for key, value in keys.items():
            values[(section, key)] = value
    return Config(values)
