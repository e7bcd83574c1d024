"""Architecture configuration: schema, validation, presets, digests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

PACKAGE_POLICIES = ("concat_per_phase", "merge_single")


@dataclass
class ArchConfig:
    """Hyperparameters of the toy ViT plus selector placement and targets.

    ``attn_dim`` and ``ffn_dim`` default to ``embed_dim`` (the flat-backbone
    convention) but stay independent fields because the cost model treats
    them as separate axes. ``phase_rates`` are cumulative pruned fractions
    of the prunable tokens, one per selector, in effect from the block after
    that selector onward.
    """

    blocks: int
    embed_dim: int
    heads: int
    image_size: int
    patch_size: int
    num_classes: int
    attn_dim: int | None = None
    ffn_dim: int | None = None
    channels: int = 1
    use_cls_token: bool = True
    selector_positions: list[int] = field(default_factory=list)
    phase_rates: list[float] = field(default_factory=list)
    package_policy: str = "concat_per_phase"
    gumbel_tau: float = 0.5

    def __post_init__(self):
        if self.attn_dim is None:
            self.attn_dim = self.embed_dim
        if self.ffn_dim is None:
            self.ffn_dim = self.embed_dim
        self.validate()

    # -- derived geometry ---------------------------------------------------
    @property
    def patches_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.patches_per_side ** 2

    @property
    def tokens(self) -> int:
        """Sequence length entering block 1 (patches plus class token)."""
        return self.num_patches + (1 if self.use_cls_token else 0)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def validate(self) -> None:
        def bad(path: str, msg: str):
            raise ConfigError(f"{path}: {msg}")

        for name in ("blocks", "embed_dim", "heads", "image_size",
                     "patch_size", "num_classes", "attn_dim", "ffn_dim",
                     "channels"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                bad(name, f"must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size != 0:
            bad("patch_size", f"{self.patch_size} does not divide image_size "
                              f"{self.image_size}")
        if self.embed_dim % self.heads != 0:
            bad("heads", f"embed_dim {self.embed_dim} not divisible by "
                         f"{self.heads}")
        if self.head_dim % 4 != 0:
            bad("heads", f"per-head dim {self.head_dim} must be a multiple "
                         f"of 4 for the scoring pipeline")
        if self.attn_dim % self.heads != 0:
            bad("attn_dim", f"{self.attn_dim} not divisible by heads "
                            f"{self.heads}")
        if self.package_policy not in PACKAGE_POLICIES:
            bad("package_policy", f"must be one of {PACKAGE_POLICIES}")
        if not self.gumbel_tau > 0:
            bad("gumbel_tau", "must be positive")
        pos = self.selector_positions
        if any(not isinstance(p, int) for p in pos):
            bad("selector_positions", "entries must be integers")
        if any(p < 1 or p > self.blocks - 1 for p in pos):
            bad("selector_positions", f"entries must lie in [1, {self.blocks - 1}]")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            bad("selector_positions", "entries must be strictly increasing")
        rates = self.phase_rates
        if len(rates) != len(pos):
            bad("phase_rates", f"expected {len(pos)} entries to match "
                               f"selector_positions, got {len(rates)}")
        if any(not (0.0 <= r < 1.0) for r in rates):
            bad("phase_rates", "entries must lie in [0, 1)")
        if any(b < a for a, b in zip(rates, rates[1:])):
            bad("phase_rates", "cumulative rates must be nondecreasing")

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


_FIELD_NAMES = {f.name for f in fields(ArchConfig)}


def config_from_dict(data: dict) -> ArchConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(data) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ArchConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path: str | Path) -> ArchConfig:
    """Load and validate a JSON config file; unknown keys are rejected."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def serialize_config(config: ArchConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_json() + "\n")


def preset(name: str) -> ArchConfig:
    """Named architecture presets for analysis commands."""
    if name == "deit-t":
        return ArchConfig(blocks=12, embed_dim=192, heads=3, image_size=224,
                          patch_size=16, num_classes=1000, channels=3,
                          selector_positions=[3, 6, 9],
                          phase_rates=[0.3, 0.5, 0.7])
    if name == "deit-s":
        return ArchConfig(blocks=12, embed_dim=384, heads=6, image_size=224,
                          patch_size=16, num_classes=1000, channels=3,
                          selector_positions=[3, 6, 9],
                          phase_rates=[0.3, 0.5, 0.7])
    if name == "toy":
        return ArchConfig(blocks=3, embed_dim=16, heads=2, image_size=16,
                          patch_size=4, num_classes=2,
                          selector_positions=[1], phase_rates=[0.3])
    raise ConfigError(f"unknown preset {name!r}; known: deit-t, deit-s, toy")
