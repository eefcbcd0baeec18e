"""Experiment configuration: strict line-based ``key = value`` files.

Unknown keys, type errors, and out-of-domain values are rejected with the
offending line number. Auto-resolved defaults (beta from the conflict ratio,
topology cadence from the step budget) are applied by ``resolve`` so a
RunConfig always carries concrete values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


class ConfigError(ValueError):
    pass


METHODS = ("erm", "erm_rw", "set", "rigl", "rest", "mrm")
SPARSE_METHODS = ("set", "rigl", "rest")
WEIGHTED_METHODS = ("erm_rw", "rest")

# reweighting schedule keyed by bias-conflict ratio
BETA_BY_RATIO = {0.005: 10.0, 0.01: 30.0, 0.02: 50.0, 0.05: 80.0}


@dataclass
class RunConfig:
    method: str = ""
    run_id: str = ""
    # dataset
    source: str = "synthetic_glyphs"
    idx_dir: str = ""
    n_train: int = 10000
    n_test: int = 2000
    conflict_ratio: float = 0.01
    data_seed: int = 0
    # loop
    steps: int = 3000
    batch: int = 128
    lr: float = 1e-2
    wd: float = 1e-4
    eval_every: int = 0          # 0 -> steps // 10
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    # sparsity
    density: float = 0.05
    allocation: str = "erk"
    growth: str = ""             # "" -> by method (set: random, else gradient)
    r0: float = 0.3
    delta_t: int = 0             # 0 -> 1000 scaled by steps/3000
    t_end: int = -1              # -1 -> 75% of steps
    # reweighting
    beta: float = 0.0            # 0 -> resolved from conflict_ratio
    # masked-retraining baseline
    mrm_pretrain_steps: int = 600
    mrm_probe_steps: int = 300
    mrm_alpha: float = 2e-4
    mrm_rounds: int = 1
    # sweep
    sweep_axis: str = ""
    sweep_values: list = field(default_factory=list)
    # output
    out: str = ""


def _parse_int(s):
    return int(s, 0)


def _parse_float(s):
    return float(s)


def _parse_str(s):
    return s


def _parse_int_list(s):
    return [int(tok) for tok in s.split(",") if tok.strip()]


def _parse_float_list(s):
    return [float(tok) for tok in s.split(",") if tok.strip()]


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


# key -> (parser, domain check or None, human-readable domain)
SCHEMA = {
    "method": (_parse_str, lambda v: v in METHODS, f"one of {', '.join(METHODS)}"),
    "run_id": (_parse_str, None, ""),
    "source": (_parse_str, lambda v: v in ("synthetic_glyphs", "idx_files"),
               "synthetic_glyphs or idx_files"),
    "idx_dir": (_parse_str, None, ""),
    "n_train": (_parse_int, _positive, "> 0"),
    "n_test": (_parse_int, _positive, "> 0"),
    "conflict_ratio": (_parse_float, lambda v: 0.0 < v < 1.0, "in (0,1)"),
    "data_seed": (_parse_int, _non_negative, ">= 0"),
    "steps": (_parse_int, lambda v: v >= 2, ">= 2"),
    "batch": (_parse_int, _positive, "> 0"),
    "lr": (_parse_float, _positive, "> 0"),
    "wd": (_parse_float, _non_negative, ">= 0"),
    "eval_every": (_parse_int, _non_negative, ">= 0 (0 = auto)"),
    "seeds": (_parse_int_list, lambda v: len(v) > 0, "non-empty int list"),
    "density": (_parse_float, lambda v: 0.0 < v <= 1.0, "in (0,1]"),
    "allocation": (_parse_str, lambda v: v in ("uniform", "er", "erk"),
                   "uniform, er or erk"),
    "growth": (_parse_str, lambda v: v in ("gradient", "random"),
               "gradient or random"),
    "r0": (_parse_float, lambda v: 0.0 <= v < 1.0, "in [0,1)"),
    "delta_t": (_parse_int, _non_negative, ">= 0 (0 = auto)"),
    "t_end": (_parse_int, lambda v: v >= -1, ">= -1 (-1 = auto)"),
    "beta": (_parse_float, lambda v: v == 0.0 or v >= 1.0, ">= 1 (0 = auto)"),
    "mrm_pretrain_steps": (_parse_int, _positive, "> 0"),
    "mrm_probe_steps": (_parse_int, _positive, "> 0"),
    "mrm_alpha": (_parse_float, _non_negative, ">= 0"),
    "mrm_rounds": (_parse_int, _positive, "> 0"),
    "sweep_axis": (_parse_str, lambda v: v in ("density", "ratio"),
                   "density or ratio"),
    "sweep_values": (_parse_float_list, lambda v: len(v) > 0,
                     "non-empty float list"),
    "out": (_parse_str, None, ""),
}


def parse_config(text, strict=True) -> RunConfig:
    """Parse key = value lines ('#' comments) into a validated RunConfig."""
    values = {}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            if strict:
                errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        parser, check, domain = SCHEMA[key]
        try:
            parsed = parser(value)
        except ValueError:
            errors.append(f"line {lineno}: cannot parse {key} value {value!r}")
            continue
        if check is not None and not check(parsed):
            errors.append(f"line {lineno}: {key} = {value} out of domain ({domain})")
            continue
        if key in values:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        values[key] = parsed
    if errors:
        raise ConfigError("; ".join(errors))
    if "method" not in values:
        raise ConfigError("missing required key 'method'")
    cfg = RunConfig(**values)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: RunConfig):
    if cfg.source == "idx_files" and not cfg.idx_dir:
        raise ConfigError("source = idx_files requires idx_dir")
    if cfg.method not in WEIGHTED_METHODS and cfg.beta not in (0.0, 1.0):
        raise ConfigError(
            f"beta = {cfg.beta} is only meaningful for methods "
            f"{', '.join(WEIGHTED_METHODS)}; method {cfg.method} trains unweighted")
    if cfg.n_train < cfg.batch:
        raise ConfigError(f"n_train = {cfg.n_train} smaller than batch = {cfg.batch}")
    if cfg.eval_every:
        total = cfg.steps if cfg.method != "mrm" else \
            cfg.mrm_pretrain_steps * (1 + cfg.mrm_rounds)
        if total % cfg.eval_every or total // cfg.eval_every < 2:
            raise ConfigError(
                f"eval_every = {cfg.eval_every} must divide the step budget "
                f"({total}) and report at least twice")


def resolve_beta(cfg: RunConfig) -> float:
    """The group weight actually used by a run."""
    if cfg.method not in WEIGHTED_METHODS:
        return 1.0
    if cfg.beta:
        return cfg.beta
    for ratio, beta in BETA_BY_RATIO.items():
        if abs(cfg.conflict_ratio - ratio) < 1e-9:
            return beta
    raise ConfigError(
        f"no default beta for conflict_ratio = {cfg.conflict_ratio}; known "
        f"ratios are {sorted(BETA_BY_RATIO)} - set beta explicitly")


def resolve_growth(cfg: RunConfig) -> str:
    if cfg.growth:
        return cfg.growth
    return "random" if cfg.method == "set" else "gradient"


def resolve_delta_t(cfg: RunConfig) -> int:
    if cfg.delta_t:
        return cfg.delta_t
    if cfg.steps >= 3000:
        return 1000
    return max(1, round(1000 * cfg.steps / 3000))


def resolve_t_end(cfg: RunConfig) -> int:
    return cfg.t_end if cfg.t_end >= 0 else int(0.75 * cfg.steps)


def default_run_id(cfg: RunConfig) -> str:
    if cfg.run_id:
        return cfg.run_id
    parts = [cfg.method, f"r{cfg.conflict_ratio:g}"]
    if cfg.method in SPARSE_METHODS:
        parts.append(f"d{cfg.density:g}")
    if cfg.method in WEIGHTED_METHODS:
        parts.append(f"b{resolve_beta(cfg):g}")
    return "-".join(parts)


def config_with(cfg: RunConfig, **overrides) -> RunConfig:
    out = replace(cfg, **overrides)
    _cross_validate(out)
    return out


def describe_defaults() -> str:
    """Key/default/domain listing for --help."""
    lines = []
    defaults = RunConfig()
    for f in fields(RunConfig):
        _, _, domain = SCHEMA[f.name]
        default = getattr(defaults, f.name)
        if isinstance(default, list):
            default = ",".join(str(v) for v in default) or "(empty)"
        lines.append(f"  {f.name:<20} default: {default!s:<12} {domain}")
    return "\n".join(lines)
