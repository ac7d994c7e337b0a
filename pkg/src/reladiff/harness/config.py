"""Run configuration: one flat dataclass, loaded from JSON with env overrides.

Any field can be overridden from the environment as ``RELADIFF_<FIELD>``
(upper case), e.g. ``RELADIFF_EPOCHS=5`` or ``RELADIFF_DIMS=[16,16]``. Values
are parsed as JSON when possible and fall back to the raw string.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from ..diffusion import SIGMA_KINDS, make_schedule, scaled_schedule
from ..errors import ConfigError
from ..nn import DiscriminatorConfig, GeneratorConfig

ENV_PREFIX = "RELADIFF_"
CONFIG_VERSION = 1


@dataclass
class RunConfig:
    # data
    dims: tuple = (32, 32)
    num_regions: int = 5
    n_train: int = 300
    n_test: int = 20
    manifest: str = "data/phantoms/manifest.json"
    out_dir: str = "runs/default"
    # diffusion
    T: int = 200
    beta_1: float = 0.0005
    beta_T: float = 0.0195
    beta_ref_steps: int = 1000  # endpoints are quoted for this many steps; 0 uses them literally
    sigma_kind: str = "sqrt_beta"
    # optimisation
    batch_size: int = 3
    epochs: int = 30
    lr_g: float = 5e-5
    lr_d: float = 5e-6
    lambda_adv: float = 0.1
    gp_weight: float = 1.0
    # ablation toggles; all on is the full model
    use_relativistic: bool = True
    use_gp: bool = True
    use_t1: bool = True
    use_t2f: bool = True
    # networks
    base_width: int = 16
    depth: int = 3
    embed_dim: int = 32
    use_bottleneck_attention: bool = False
    disc_widths: tuple = (16, 32, 1)
    disc_norm: str = "batch"
    # bookkeeping
    seed: int = 0
    keep_checkpoints: int = 3
    sample_batch: int = 60
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.disc_widths = tuple(int(w) for w in self.disc_widths)

    # -- derived -------------------------------------------------------------

    @property
    def cond_channels(self) -> list[str]:
        return [n for n, on in (("t1", self.use_t1), ("t2f", self.use_t2f)) if on]

    def generator_config(self, num_tracers: int = 3) -> GeneratorConfig:
        return GeneratorConfig(
            in_channels=1 + len(self.cond_channels), base_width=self.base_width, depth=self.depth,
            num_tracers=num_tracers, embed_dim=self.embed_dim,
            use_bottleneck_attention=self.use_bottleneck_attention, spatial_dims=len(self.dims),
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(widths=self.disc_widths, norm_kind=self.disc_norm,
                                   spatial_dims=len(self.dims))

    def schedule(self):
        if self.beta_ref_steps:
            return scaled_schedule(self.T, self.beta_1, self.beta_T, self.beta_ref_steps, self.sigma_kind)
        return make_schedule(self.T, self.beta_1, self.beta_T, self.sigma_kind)

    def validate(self) -> "RunConfig":
        if len(self.dims) not in (2, 3) or min(self.dims) < 4:
            raise ConfigError("dims", f"need 2 or 3 extents >= 4, got {self.dims}")
        for name in ("T", "batch_size", "epochs", "n_train", "n_test", "sample_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("lr_g", "lr_d"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, f"must be > 0, got {getattr(self, name)}")
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv", f"must be >= 0, got {self.lambda_adv}")
        if self.sigma_kind not in SIGMA_KINDS:
            raise ConfigError("sigma_kind", f"must be one of {SIGMA_KINDS}, got {self.sigma_kind!r}")
        if not self.cond_channels:
            raise ConfigError("use_t1/use_t2f", "at least one conditioning channel must stay on")
        if self.beta_ref_steps < 0:
            raise ConfigError("beta_ref_steps", f"must be >= 0, got {self.beta_ref_steps}")
        if self.keep_checkpoints < 0:
            raise ConfigError("keep_checkpoints", f"must be >= 0, got {self.keep_checkpoints}")
        self.schedule()
        self.generator_config().validate()
        self.discriminator_config().validate()
        return self

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"], d["disc_widths"] = list(self.dims), list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known - {"version"})
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        return cls(**{k: v for k, v in d.items() if k in known})


def _parse_env(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(name, f"not a boolean: {value!r}")
        return bool(value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected a {type(default).__name__}, got {value!r}") from None
    if isinstance(default, tuple) and not isinstance(value, (list, tuple)):
        raise ConfigError(name, f"expected a list, got {value!r}")
    return value


def load_config(path: str | None = None, env=None, **overrides) -> RunConfig:
    """Defaults, then the JSON file, then ``RELADIFF_*`` variables, then kwargs."""
    env = os.environ if env is None else env
    merged = asdict(RunConfig())
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", f"{path} must hold a JSON object")
        if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError("version", f"unsupported config version {data['version']}")
        data.pop("version", None)
        unknown = sorted(set(data) - set(merged))
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        merged.update(data)
    defaults = asdict(RunConfig())
    for f in fields(RunConfig):
        key = ENV_PREFIX + f.name.upper()
        if key in env:
            merged[f.name] = _parse_env(env[key])
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for name, value in list(merged.items()):
        merged[name] = _coerce(name, value, defaults[name])
    return RunConfig.from_dict(merged).validate()


def save_config(cfg: RunConfig, path: str):
    from ..volume import atomic_write_bytes

    payload = {"version": CONFIG_VERSION, **cfg.to_dict()}
    atomic_write_bytes(path, json.dumps(payload, indent=1, sort_keys=True).encode("utf-8"))
