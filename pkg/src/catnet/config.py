"""Run configuration shared by the CLI, checkpoints and experiment scripts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .refine import MAX_DEPTH, MODES, ModelConfig, RefineConfig
from .proto import ProtoConfig
from .encoder import EncoderConfig
from .attention import AttentionConfig


class ConfigValidationError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: str = ""
    out: str = ""
    iters: int = 2000
    lr: float = 0.001
    depth: int = 4
    alpha: float = 20.0
    tau: float = 0.5
    tau_hat: float = 0.4
    setting: str = "both"
    mode: str = "bidir"
    ablate_modes: str = "s2q,q2s,bidir"
    ablate_depths: str = "1,2,3,4,5"
    resume: str = ""
    image_size: int = 32
    folds: int = 5
    fold: int = 0
    n_classes: int = 10
    samples_per_class: int = 10
    log_interval: int = 100
    tied: bool = False
    aux_loss: bool = True
    deep_supervision: bool = False
    num_heads: int = 4
    embed_dim: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise ConfigValidationError(msg)

        if not 0.0 < self.tau_hat < self.tau < 1.0:
            bad(f"need 0 < tau_hat < tau < 1 (got tau={self.tau}, tau_hat={self.tau_hat})")
        if self.alpha <= 0:
            bad("alpha must be positive")
        if not 1 <= self.depth <= MAX_DEPTH:
            bad(f"depth must be in [1, {MAX_DEPTH}]")
        if self.setting not in ("1", "2", "both"):
            bad("setting must be 1, 2 or both")
        if self.mode not in MODES:
            bad(f"mode must be one of {MODES}")
        for m in self.modes():
            if m not in MODES:
                bad(f"unknown ablation mode {m!r}")
        for d in self.depths():
            if not 1 <= d <= MAX_DEPTH:
                bad(f"ablation depth {d} outside [1, {MAX_DEPTH}]")
        if self.iters < 0 or self.lr < 0:
            bad("iters and lr must be non-negative")
        if self.log_interval < 1:
            bad("log_interval must be >= 1")
        if self.folds < 2 or not 0 <= self.fold < self.folds:
            bad("fold must index one of >= 2 folds")
        if self.image_size % 4 or self.image_size < 16:
            bad("image_size must be a multiple of 4 and >= 16")
        if self.embed_dim % self.num_heads:
            bad("embed_dim must be divisible by num_heads")

    def modes(self) -> list[str]:
        return [m for m in self.ablate_modes.split(",") if m]

    def depths(self) -> list[int]:
        try:
            return [int(d) for d in self.ablate_depths.split(",") if d]
        except ValueError as e:
            raise ConfigValidationError(f"bad ablation depths {self.ablate_depths!r}") from e

    def model_config(self) -> ModelConfig:
        d = self.embed_dim
        return ModelConfig(
            image_size=self.image_size,
            encoder=EncoderConfig(stage_channels=(d // 4, d // 2, d), embed_dim=d),
            refine=RefineConfig(
                num_iterations=self.depth,
                mode=self.mode,
                tied=self.tied,
                attention=AttentionConfig(embed_dim=d, num_heads=self.num_heads),
                proto=ProtoConfig(self.alpha, self.tau, self.tau_hat),
            ),
            aux_mife_loss=self.aux_loss,
            deep_supervision=self.deep_supervision,
        )

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: getattr(f.type, "__name__", f.type) for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise ConfigValidationError(f"bad config line {line!r}")
            kw[key] = _parse(types[key], val.strip())
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(typ: str, val: str):
    try:
        if typ == "bool":
            if val not in ("true", "false"):
                raise ValueError(val)
            return val == "true"
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
    except ValueError as e:
        raise ConfigValidationError(f"cannot parse {val!r} as {typ}") from e
    return val
