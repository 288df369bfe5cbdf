"""Run configuration: plain ``key = value`` sections with defaults for every
field and a canonical serialization that round-trips byte-identically.

The phantom geometry lives in ``[phantom]`` plus one ``[phantom.region.N]``
section per region, so a config file fully determines the benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .phantom import PhantomSpec, RegionSpec, default_spec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "out"


@dataclass(frozen=True)
class DataSection:
    n_train: int = 200
    age_low: float = 13.0
    age_high: float = 91.0
    sex_balance: float = 0.5


@dataclass(frozen=True)
class CodecSection:
    n_c: int = 64
    n_d: int = 16
    hidden: int = 8
    beta: float = 0.25
    learning_rate: float = 0.002
    iterations: int = 5000


@dataclass(frozen=True)
class GLMSection:
    age_low: float = 13.0
    age_high: float = 91.0


@dataclass(frozen=True)
class DiffusionSection:
    n_i: int = 2
    steps: int = 16
    schedule: str = "linear"
    denoiser: str = "neural"
    epochs: int = 6
    learning_rate: float = 0.003
    d_model: int = 32
    hidden: int = 64


@dataclass(frozen=True)
class SynthSection:
    count: int = 300
    age_low: float = 13.0
    age_high: float = 91.0


@dataclass(frozen=True)
class EvalSection:
    threshold: float = 0.35
    n_replication: int = 300
    folds: int = 2
    pool_sizes: tuple[int, ...] = (0, 50, 200)
    ridge_lambda: float = 1.0
    real_train_n: int = 20
    accel_n: int = 100
    accel_age_low: float = 13.0
    accel_age_high: float = 45.0
    accel_scale: float = 2.0
    holdout_n: int = 100


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    phantom: PhantomSpec = field(default_factory=default_spec)
    data: DataSection = field(default_factory=DataSection)
    codec: CodecSection = field(default_factory=CodecSection)
    glm: GLMSection = field(default_factory=GLMSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    synth: SynthSection = field(default_factory=SynthSection)
    eval: EvalSection = field(default_factory=EvalSection)


_SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "codec": CodecSection,
    "glm": GLMSection,
    "diffusion": DiffusionSection,
    "synth": SynthSection,
    "eval": EvalSection,
}

_PHANTOM_KEYS = {"grid", "noise_sigma", "background_intensity"}
_REGION_KEYS = {"center", "base_radii", "age_coeff", "sex_offset", "intensity", "complexity"}


def _format_value(value) -> str:
    if isinstance(value, bool):
        raise ConfigError("boolean config values are not supported")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return value
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    raise ConfigError(f"cannot serialize config value {value!r}")


def _parse_typed(text: str, template, where: str):
    """Parse ``text`` to the type of ``template`` (int/float/str/tuple)."""
    try:
        if isinstance(template, bool):
            raise ConfigError(f"{where}: boolean values unsupported")
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, str):
            return text
        if isinstance(template, tuple):
            parts = [p.strip() for p in text.split(",")] if text.strip() else []
            elem = template[0] if template else 0
            return tuple(_parse_typed(p, elem, where) for p in parts)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc
    raise ConfigError(f"{where}: unsupported value type")


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; stable key order, LF endings."""
    lines: list[str] = []
    for name, cls in _SECTIONS.items():
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(cls):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    lines.append("[phantom]")
    lines.append(f"grid = {_format_value(tuple(cfg.phantom.grid))}")
    lines.append(f"noise_sigma = {_format_value(cfg.phantom.noise_sigma)}")
    lines.append(f"background_intensity = {_format_value(cfg.phantom.background_intensity)}")
    lines.append("")
    for i, region in enumerate(cfg.phantom.regions, start=1):
        lines.append(f"[phantom.region.{i}]")
        lines.append(f"center = {_format_value(tuple(float(c) for c in region.center))}")
        lines.append(f"base_radii = {_format_value(tuple(float(c) for c in region.base_radii))}")
        lines.append(f"age_coeff = {_format_value(tuple(float(c) for c in region.age_coeff))}")
        lines.append(f"sex_offset = {_format_value(tuple(float(c) for c in region.sex_offset))}")
        lines.append(f"intensity = {_format_value(float(region.intensity))}")
        lines.append(f"complexity = {_format_value(float(region.complexity))}")
        lines.append("")
    return "\n".join(lines)


def _raw_sections(text: str):
    """Split config text into {section: {key: (value, line_no)}}."""
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current: str | None = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not current:
                raise ConfigError(f"line {line_no}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {line_no}: key outside any section")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"line {line_no}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (value.strip(), line_no)
    return sections


def _build_section(cls, raw: dict[str, tuple[str, int]], name: str):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    for key, (text, line_no) in raw.items():
        if key not in known:
            raise ConfigError(f"line {line_no}: unknown key {key!r} in [{name}]")
        values[key] = _parse_typed(text, getattr(defaults, key), f"line {line_no}")
    return replace(defaults, **values)


def _build_phantom(sections) -> PhantomSpec:
    base = default_spec()
    raw = sections.get("phantom", {})
    grid = tuple(base.grid)
    noise_sigma = base.noise_sigma
    background = base.background_intensity
    for key, (text, line_no) in raw.items():
        if key == "grid":
            grid = tuple(int(v) for v in _parse_typed(text, (0, 0, 0), f"line {line_no}"))
        elif key == "noise_sigma":
            noise_sigma = _parse_typed(text, 0.0, f"line {line_no}")
        elif key == "background_intensity":
            background = _parse_typed(text, 0.0, f"line {line_no}")
        else:
            raise ConfigError(f"line {line_no}: unknown key {key!r} in [phantom]")

    region_sections = sorted(
        (name for name in sections if name.startswith("phantom.region.")),
        key=lambda n: int(n.rsplit(".", 1)[1]),
    )
    if region_sections:
        expected = [f"phantom.region.{i}" for i in range(1, len(region_sections) + 1)]
        if region_sections != expected:
            raise ConfigError(
                f"phantom regions must be numbered 1..K contiguously, got {region_sections}"
            )
        regions = []
        for name in region_sections:
            raw_r = sections[name]
            vals = {}
            for key, (text, line_no) in raw_r.items():
                if key not in _REGION_KEYS:
                    raise ConfigError(f"line {line_no}: unknown key {key!r} in [{name}]")
                template = 0.0 if key in ("intensity", "complexity") else (0.0, 0.0, 0.0)
                vals[key] = _parse_typed(text, template, f"line {line_no}")
            missing = {"center", "base_radii", "intensity"} - set(vals)
            if missing:
                raise ConfigError(f"[{name}] missing keys: {sorted(missing)}")
            regions.append(
                RegionSpec(
                    center=vals["center"],
                    base_radii=vals["base_radii"],
                    age_coeff=vals.get("age_coeff", (0.0, 0.0, 0.0)),
                    sex_offset=vals.get("sex_offset", (0.0, 0.0, 0.0)),
                    intensity=vals["intensity"],
                    complexity=vals.get("complexity", 0.0),
                )
            )
        regions = tuple(regions)
    else:
        regions = base.regions
    try:
        return PhantomSpec(
            grid=grid, regions=regions, noise_sigma=noise_sigma,
            background_intensity=background,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid phantom geometry: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse config text; every missing field falls back to its default."""
    sections = _raw_sections(text)
    for name in sections:
        if name not in _SECTIONS and name != "phantom" and not name.startswith("phantom.region."):
            first_line = min(ln for _, ln in sections[name].values()) if sections[name] else 0
            raise ConfigError(f"line {first_line}: unknown section [{name}]")
    built = {
        name: _build_section(cls, sections.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(phantom=_build_phantom(sections), **built)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides on top of a parsed config."""
    if not overrides:
        return cfg
    text = serialize_config(cfg)
    sections = _raw_sections(text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, _, value = item.partition("=")
        path = path.strip()
        if "." not in path:
            raise ConfigError(f"override key {path!r} must be section.key")
        section, _, key = path.rpartition(".")
        if section not in sections:
            sections[section] = {}
        sections[section][key] = (value.strip(), 0)
    # re-serialize through the raw representation
    lines = []
    for name, kv in sections.items():
        lines.append(f"[{name}]")
        for key, (val, _) in kv.items():
            lines.append(f"{key} = {val}")
        lines.append("")
    return parse_config("\n".join(lines))
