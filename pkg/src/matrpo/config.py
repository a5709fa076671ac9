"""Run configuration: an INI file with fixed sections and typed keys."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

ALGORITHMS = ("matrpo", "centralized", "independent")
ENVIRONMENTS = ("navigation", "matrix")


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.replace(",", " ").split()) if text else ()


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(float(t) for t in text.replace(",", " ").split()) if text else ()


def _edges(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for tok in text.replace(",", " ").split():
        a, _, b = tok.partition("-")
        out.append((int(a), int(b)))
    return tuple(out)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return " ".join(f"{a}-{b}" for a, b in value)
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _key(section: str, parse=str, required: bool = False, **kw):
    return field(metadata={"section": section, "parse": parse, "required": required}, **kw)


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = _key("run", required=True, default="matrpo")
    seed: int = _key("run", int, required=True, default=0)
    iterations: int = _key("run", int, default=150)
    output_dir: str = _key("run", default="runs/run")
    checkpoint_every: int = _key("run", int, default=50)

    environment: str = _key("env", default="navigation")
    n_agents: int = _key("env", int, default=3)
    horizon: int = _key("env", int, default=100)
    dt: float = _key("env", float, default=0.1)
    damping: float = _key("env", float, default=0.25)
    force: float = _key("env", float, default=1.0)
    agent_radius: float = _key("env", float, default=0.15)
    arena: float = _key("env", float, default=1.0)
    n_actions: int = _key("env", int, default=2)
    payoff_seed: int = _key("env", int, default=0)

    topology: str = _key("graph", default="ring")
    edges: tuple = _key("graph", _edges, default=())
    psi: tuple = _key("graph", _floats, default=())

    policy_hidden: tuple = _key("model", _ints, default=(32, 32))
    value_hidden: tuple = _key("model", _ints, default=(32, 32))
    policy_out_scale: float = _key("model", float, default=0.01)

    steps_per_iter: int = _key("optim", int, default=2000)
    gamma: float = _key("optim", float, default=0.995)
    gae_lambda: float = _key("optim", float, default=0.97)
    step_size: float = _key("optim", float, default=0.003)
    beta: float = _key("optim", float, default=1.0)
    admm_iters: int = _key("optim", int, default=100)
    cg_iters: int = _key("optim", int, default=10)
    cg_tol: float = _key("optim", float, default=1e-10)
    cg_damping: float = _key("optim", float, default=1e-3)
    cg_precondition: bool = _key("optim", _bool, default=True)
    backstop: bool = _key("optim", _bool, default=True)
    backstop_factor: float = _key("optim", float, default=1.5)
    normalize_advantages: bool = _key("optim", _bool, default=True)
    value_epochs: int = _key("optim", int, default=25)
    value_lr: float = _key("optim", float, default=1e-2)
    value_method: str = _key("optim", default="lbfgs")

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"run.algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.environment not in ENVIRONMENTS:
            raise ConfigError(f"env.environment must be one of {ENVIRONMENTS}, got {self.environment!r}")
        if self.value_method not in ("gd", "lbfgs"):
            raise ConfigError(f"optim.value_method must be 'gd' or 'lbfgs', got {self.value_method!r}")
        if self.topology not in ("ring", "edges"):
            raise ConfigError(f"graph.topology must be 'ring' or 'edges', got {self.topology!r}")
        if self.n_agents < 1:
            raise ConfigError("env.n_agents must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("optim.gamma must lie in [0, 1)")
        if self.step_size <= 0 or self.beta <= 0:
            raise ConfigError("optim.step_size and optim.beta must be positive")
        if self.iterations < 0 or self.admm_iters < 1 or self.cg_iters < 1:
            raise ConfigError("iteration counts must be positive")
        if self.steps_per_iter < self.horizon_len:
            raise ConfigError("optim.steps_per_iter must cover at least one episode")

    @property
    def horizon_len(self) -> int:
        return 1 if self.environment == "matrix" else self.horizon

    @property
    def n_paths(self) -> int:
        return self.steps_per_iter // self.horizon_len

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_ini(self) -> str:
        sections: dict[str, list[str]] = {}
        for f in fields(self):
            sections.setdefault(f.metadata["section"], []).append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())


SECTIONS = tuple(dict.fromkeys(f.metadata["section"] for f in fields(RunConfig)))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            f = known.get(key)
            if f is None or f.metadata["section"] != section:
                raise ConfigError(f"{source}: unknown key '{key}' in section [{section}]")
            try:
                values[key] = f.metadata["parse"](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key} = {raw!r}: {exc}") from exc
    missing = [f"{f.metadata['section']}.{f.name}" for f in fields(RunConfig)
               if f.metadata["required"] and f.name not in values]
    if missing:
        raise ConfigError(f"{source}: missing required keys: {', '.join(missing)}")
    return RunConfig(**values)


def load_config(path) -> tuple[RunConfig, str]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, str(path)), text
