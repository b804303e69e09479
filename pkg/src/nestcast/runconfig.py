"""Run configuration: sectioned key = value text with a strict schema.

Every knob of every pipeline stage lives in one schema table. Parsing fills
missing keys with defaults and rejects unknown sections, unknown keys,
duplicates, and type errors with the offending location named. Rendering is
canonical (schema order, one blank line between sections), so a rendered
config parses back to an equal RunConfig and re-renders byte-identically;
the sha256 of that canonical text is the config hash stamped into run
manifests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

# kind -> (parse str -> value, render value -> str)
# "auto" stands for None in the int_or_auto kind; "median" likewise for
# float_or_median (the sigma heuristic).

_TRUE, _FALSE = "true", "false"


def _parse_bool(s: str) -> bool:
    if s == _TRUE:
        return True
    if s == _FALSE:
        return False
    raise ValueError(f"expected {_TRUE!r} or {_FALSE!r}, got {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(float(p) for p in parts)


def _parse_ints(s: str) -> tuple[int, ...]:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _render_float(v: float) -> str:
    return repr(float(v))


_KINDS = {
    "int": (int, str),
    "float": (float, _render_float),
    "bool": (_parse_bool, lambda v: _TRUE if v else _FALSE),
    "str": (str, str),
    "floats": (_parse_floats, lambda v: ", ".join(repr(float(x)) for x in v)),
    "ints": (_parse_ints, lambda v: ", ".join(str(int(x)) for x in v)),
    "int_or_auto": (
        lambda s: None if s == "auto" else int(s),
        lambda v: "auto" if v is None else str(v),
    ),
    "float_or_median": (
        lambda s: None if s == "median" else float(s),
        lambda v: "median" if v is None else repr(float(v)),
    ),
}

# section -> key -> (kind, default)
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "data": {
        "n_regions": ("int", 3),
        "nodes_per_region": ("int", 16),
        "n_days": ("int", 14),
        "steps_per_day": ("int", 96),
        "channels": ("int", 1),
        "noise_sigma": ("float", 1.0),
        "separation": ("float", 5.0),
        "node_offset_sigma": ("float", 0.25),
        "regime_period_days": ("float", 0.0),
        "regime_strength": ("float", 0.0),
        "wander_strength": ("float", 0.0),
        "wander_lag": ("int", 4),
        "start_offset": ("int", 0),
        "seed": ("int", 0),
    },
    "split": {
        "train": ("float", 0.6),
        "val": ("float", 0.2),
        "test": ("float", 0.2),
    },
    "regions": {
        "n_regions": ("int_or_auto", None),
        "m_ratio": ("float", 0.2),
        "n_chunks": ("int", 100),
        "sigma": ("float_or_median", None),
        "affinity_mode": ("str", "subsequence"),
        "kmeans_n_init": ("int", 10),
        "kmeans_max_iter": ("int", 300),
        "seed": ("int", 0),
    },
    "model": {
        "lookback": ("int", 12),
        "patch_len": ("int", 4),
        "embed_dim": ("int", 32),
        "attn_dim": ("int_or_auto", None),
        "layers": ("int", 2),
        "quantiles": ("floats", (0.1, 0.5, 0.9)),
        "huber_delta": ("float", 1.0),
        "use_mlp": ("bool", True),
        "cross_attention": ("bool", True),
        "guidance_mode": ("str", "future"),
    },
    "train": {
        "epochs": ("int", 50),
        "batch_size": ("int", 32),
        "lr": ("float", 3e-4),
        "beta1": ("float", 0.9),
        "beta2": ("float", 0.999),
        "eps": ("float", 1e-8),
        "weight_decay": ("float", 0.01),
        "clip_norm": ("float", 5.0),
        "lam1": ("float", 0.1),
        "lam2": ("float", 0.2),
        "ss_gamma": ("float", 0.97),
        "ss_floor": ("float", 0.25),
        "patience": ("int", 30),
        "seed": ("int", 0),
        "val_batch": ("int", 256),
    },
    "eval": {
        "horizon": ("int", 12),
        "offsets": ("ints", (16, 20, 24, 36, 48)),
        "mape_threshold": ("float", 1e-4),
        "stride": ("int_or_auto", None),
    },
    "bench": {
        "sizes": ("ints", (512, 1024, 2048)),
        "n_regions": ("int", 64),
        "embed_dim": ("int", 32),
        "layers": ("int", 2),
        "batch": ("int", 1),
        "n_runs": ("int", 10),
        "n_warmup": ("int", 2),
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(
            {
                section: {key: default for key, (_, default) in keys.items()}
                for section, keys in SCHEMA.items()
            }
        )

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls.defaults()
        seen: set[tuple[str, str]] = set()
        section = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"line {lineno}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            if section is None:
                raise ConfigError(f"line {lineno}: key outside any [section]")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in SCHEMA[section]:
                raise ConfigError(f"line {lineno}: unknown key {key!r} in section [{section}]")
            if (section, key) in seen:
                raise ConfigError(f"line {lineno}: duplicate key {key!r} in section [{section}]")
            seen.add((section, key))
            kind, _ = SCHEMA[section][key]
            parse, _ = _KINDS[kind]
            try:
                cfg.values[section][key] = parse(value)
            except ValueError as exc:
                raise ConfigError(
                    f"line {lineno}: bad value for {section}.{key}: {exc}"
                ) from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def render(self) -> str:
        chunks = []
        for section, keys in SCHEMA.items():
            lines = [f"[{section}]"]
            for key, (kind, _) in keys.items():
                _, render = _KINDS[kind]
                lines.append(f"{key} = {render(self.values[section][key])}")
            chunks.append("\n".join(lines))
        return "\n\n".join(chunks) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.render())

    def sha256(self) -> str:
        return hashlib.sha256(self.render().encode()).hexdigest()

    def replace(self, section: str, **updates) -> "RunConfig":
        """Copy with some keys of one section changed (names are validated)."""
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values = {sec: dict(keys) for sec, keys in self.values.items()}
        for key, value in updates.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[section][key] = value
        return RunConfig(values)
