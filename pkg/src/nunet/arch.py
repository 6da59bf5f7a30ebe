"""NU-net architecture family.

Builds U-net backbones of arbitrary odd depth, nested multi-out U-net
(MOU) refinement modules, and multi-step down-sampling short connections
(MDSC), all driven by a single declarative config. The canonical NU-net
is a depth-15 backbone carrying six MOUs (depths 11, 9, 7, 5, 3, 1) and
three MDSCs (stages 1->3, 3->5, 5->7).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .errors import ConfigError, ShapeError

MDSC_WIDTH = 32

VARIANT_NAMES = ("unet", "deeper", "deeper_mou", "deeper_mou_mdsc")

SKIP_FUSION_MODES = ("concat+sum", "concat")


def conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    """3x3 conv (bias) + per-channel batch norm (affine) + ReLU."""
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    """Backbone stage: two successive conv blocks."""
    return nn.Sequential(conv_block(in_ch, out_ch), conv_block(out_ch, out_ch))


@dataclass(frozen=True)
class ChannelSchedule:
    """Per-stage channel widths: width(i) = min(base_width * 2**(i-1), cap)."""

    base_width: int = 32
    cap: int = 512

    def __post_init__(self):
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.cap < self.base_width:
            raise ConfigError(f"cap {self.cap} is below base_width {self.base_width}")

    def width(self, stage: int) -> int:
        if stage < 1:
            raise ConfigError(f"stage index must be >= 1, got {stage}")
        return min(self.base_width * 2 ** (stage - 1), self.cap)


@dataclass(frozen=True)
class BackboneConfig:
    """U-shaped backbone: L encoder stages, bottleneck, L decoder stages."""

    depth: int = 15
    channels: ChannelSchedule = field(default_factory=ChannelSchedule)
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 3 or self.depth % 2 == 0:
            raise ConfigError(f"backbone depth must be an odd integer >= 3, got {self.depth}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")

    @property
    def levels(self) -> int:
        """Number of encoder stages L; depth = 2L + 1."""
        return (self.depth - 1) // 2

    @property
    def divisor(self) -> int:
        """Input H and W must be divisible by 2**L."""
        return 2 ** self.levels


@dataclass(frozen=True)
class MOUConfig:
    """Multi-out U-net embedded at one encoder stage.

    Constant channel width throughout, one conv block per stage, and a
    side conv emitting each intermediate decoder output.
    """

    stage_index: int
    depth: int
    channels: int

    def __post_init__(self):
        if self.depth < 1 or self.depth % 2 == 0:
            raise ConfigError(f"MOU depth must be an odd integer >= 1, got {self.depth}")
        if self.channels < 1:
            raise ConfigError(f"MOU channels must be >= 1, got {self.channels}")
        if self.stage_index < 1:
            raise ConfigError(f"MOU stage_index must be >= 1, got {self.stage_index}")

    @property
    def internal_levels(self) -> int:
        """Number of internal downsamplings (D - 1) / 2."""
        return (self.depth - 1) // 2


@dataclass(frozen=True)
class MDSCConfig:
    """Short connection: 4x4/stride-4 max pool + 3x3 conv block of width 32.

    Bridges the output of encoder stage `source_stage` into the input of
    stage `source_stage + 2` (the pool factor 4 spans exactly two scales).
    """

    source_stage: int

    def __post_init__(self):
        if self.source_stage < 1:
            raise ConfigError(f"MDSC source_stage must be >= 1, got {self.source_stage}")

    @property
    def target_stage(self) -> int:
        return self.source_stage + 2


def mou_depth_schedule(levels: int) -> list[int]:
    """Depths of the MOUs at stages 1..L-1: D_i = 2(L - i) - 1.

    For L = 7 this is [11, 9, 7, 5, 3, 1].
    """
    if levels < 2:
        raise ConfigError(f"need at least 2 encoder stages for an MOU schedule, got {levels}")
    return [2 * (levels - i) - 1 for i in range(1, levels)]


@dataclass(frozen=True)
class NUNetConfig:
    """Complete architecture description for one network of the family."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mous: tuple[MOUConfig, ...] = ()
    mdscs: tuple[MDSCConfig, ...] = ()
    skip_fusion: str = "concat+sum"
    input_size: int = 256
    seed: int = 0

    def __post_init__(self):
        L = self.backbone.levels
        if self.skip_fusion not in SKIP_FUSION_MODES:
            raise ConfigError(
                f"unknown skip_fusion {self.skip_fusion!r}; valid: {', '.join(SKIP_FUSION_MODES)}"
            )
        seen = set()
        for m in self.mous:
            if not 1 <= m.stage_index <= L - 1:
                raise ConfigError(
                    f"MOU stage {m.stage_index} outside 1..{L - 1} for depth {self.backbone.depth}"
                )
            if m.stage_index in seen:
                raise ConfigError(f"duplicate MOU at stage {m.stage_index}")
            seen.add(m.stage_index)
            max_depth = 2 * (L - m.stage_index) - 1
            if m.depth > max_depth:
                raise ConfigError(
                    f"MOU at stage {m.stage_index} has depth {m.depth}; "
                    f"maximum for this stage is {max_depth}"
                )
            expected = self.backbone.channels.width(m.stage_index)
            if m.channels != expected:
                raise ConfigError(
                    f"MOU at stage {m.stage_index} must use the stage width {expected}, "
                    f"got {m.channels}"
                )
        targets = set()
        for c in self.mdscs:
            if c.target_stage > L:
                raise ConfigError(
                    f"MDSC {c.source_stage}->{c.target_stage} exceeds stage count {L}"
                )
            if c.target_stage in targets:
                raise ConfigError(f"duplicate MDSC into stage {c.target_stage}")
            targets.add(c.target_stage)
        if self.input_size % self.backbone.divisor != 0:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by {self.backbone.divisor} "
                f"(required by depth {self.backbone.depth})"
            )

    @classmethod
    def canonical(cls, base_width: int = 32, cap: int = 512, in_channels: int = 1,
                  input_size: int = 256, seed: int = 0) -> "NUNetConfig":
        """Depth-15 backbone, six MOUs on the standard schedule, three MDSCs."""
        schedule = ChannelSchedule(base_width=base_width, cap=cap)
        backbone = BackboneConfig(depth=15, channels=schedule, in_channels=in_channels)
        L = backbone.levels
        mous = tuple(
            MOUConfig(stage_index=i, depth=d, channels=schedule.width(i))
            for i, d in enumerate(mou_depth_schedule(L), start=1)
        )
        mdscs = (MDSCConfig(1), MDSCConfig(3), MDSCConfig(5))
        return cls(backbone=backbone, mous=mous, mdscs=mdscs,
                   input_size=input_size, seed=seed)

    def to_text(self) -> str:
        """Key-value serialization (the on-disk architecture config format)."""
        L = self.backbone.levels
        auto = tuple(mou_depth_schedule(L)) if L >= 2 else ()
        depths = tuple(m.depth for m in sorted(self.mous, key=lambda m: m.stage_index))
        if not self.mous:
            mou = "none"
        elif depths == auto and len(self.mous) == L - 1:
            mou = "auto"
        else:
            mou = ",".join(f"{m.stage_index}:{m.depth}" for m in
                           sorted(self.mous, key=lambda m: m.stage_index))
        mdsc = ",".join(f"{c.source_stage}-{c.target_stage}" for c in self.mdscs) or "none"
        lines = [
            f"depth = {self.backbone.depth}",
            f"base_width = {self.backbone.channels.base_width}",
            f"cap = {self.backbone.channels.cap}",
            f"in_channels = {self.backbone.in_channels}",
            f"mou = {mou}",
            f"mdsc = {mdsc}",
            f"skip_fusion = {self.skip_fusion}",
            f"input_size = {self.input_size}",
            f"seed = {self.seed}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NUNetConfig":
        """Parse the key-value config format (inverse of to_text)."""
        kv: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            kv[key] = value

        def take_int(key: str, default: int) -> int:
            if key not in kv:
                return default
            try:
                return int(kv.pop(key))
            except ValueError as exc:
                raise ConfigError(f"{key} must be an integer, got {kv[key]!r}") from exc

        depth = take_int("depth", 15)
        base_width = take_int("base_width", 32)
        cap = take_int("cap", 512)
        in_channels = take_int("in_channels", 1)
        input_size = take_int("input_size", 256)
        seed = take_int("seed", 0)
        mou_spec = kv.pop("mou", "auto")
        mdsc_spec = kv.pop("mdsc", "none")
        skip_fusion = kv.pop("skip_fusion", "concat+sum")
        if kv:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(kv))}")

        schedule = ChannelSchedule(base_width=base_width, cap=cap)
        backbone = BackboneConfig(depth=depth, channels=schedule, in_channels=in_channels)
        L = backbone.levels
        mous: tuple[MOUConfig, ...]
        if mou_spec == "none":
            mous = ()
        elif mou_spec == "auto":
            if L < 2:
                mous = ()
            else:
                mous = tuple(
                    MOUConfig(stage_index=i, depth=d, channels=schedule.width(i))
                    for i, d in enumerate(mou_depth_schedule(L), start=1)
                )
        else:
            entries = []
            for item in mou_spec.split(","):
                item = item.strip()
                try:
                    stage_s, depth_s = item.split(":")
                    entries.append((int(stage_s), int(depth_s)))
                except ValueError as exc:
                    raise ConfigError(
                        f"bad mou entry {item!r}; expected 'stage:depth'"
                    ) from exc
            mous = tuple(
                MOUConfig(stage_index=s, depth=d, channels=schedule.width(s))
                for s, d in entries
            )
        if mdsc_spec == "none":
            mdscs: tuple[MDSCConfig, ...] = ()
        else:
            pairs = []
            for item in mdsc_spec.split(","):
                item = item.strip()
                try:
                    src_s, dst_s = item.split("-")
                    src, dst = int(src_s), int(dst_s)
                except ValueError as exc:
                    raise ConfigError(f"bad mdsc entry {item!r}; expected 'src-dst'") from exc
                if dst != src + 2:
                    raise ConfigError(
                        f"mdsc {item!r}: target must be source + 2 (pool factor 4 spans two scales)"
                    )
                pairs.append(MDSCConfig(src))
            mdscs = tuple(pairs)
        return cls(backbone=backbone, mous=mous, mdscs=mdscs, skip_fusion=skip_fusion,
                   input_size=input_size, seed=seed)

    def fingerprint(self) -> str:
        """Stable hash of the resolved config (used to stamp outputs)."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


class MultiOutUNet(nn.Module):
    """Mini U-net with constant width, one conv block per stage.

    forward(x) returns (final, intermediates): `final` is at the input
    scale with the input channel count; `intermediates` holds one tensor
    per internal scale (coarsest first), each emitted through its own
    conv block. Depth 1 degenerates to a single conv block and an empty
    intermediate list.
    """

    def __init__(self, cfg: MOUConfig, emit_intermediates: bool = True):
        super().__init__()
        self.cfg = cfg
        d = cfg.internal_levels
        c = cfg.channels
        self.pool = nn.MaxPool2d(2)
        self.enc = nn.ModuleList(conv_block(c, c) for _ in range(d))
        self.bottom = conv_block(c, c)
        self.ups = nn.ModuleList(nn.ConvTranspose2d(c, c, 2, stride=2) for _ in range(d))
        self.dec = nn.ModuleList(conv_block(2 * c, c) for _ in range(d))
        n_emit = d if emit_intermediates else 0
        self.emit = nn.ModuleList(conv_block(c, c) for _ in range(n_emit))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        d = len(self.enc)
        skips = []
        h = x
        for enc in self.enc:
            h = enc(h)
            skips.append(h)
            h = self.pool(h)
        h = self.bottom(h)
        outs: list[torch.Tensor] = []
        if self.emit:
            outs.append(self.emit[0](h))
        for k in range(d):
            h = self.ups[k](h)
            h = self.dec[k](torch.cat([h, skips[d - 1 - k]], dim=1))
            if self.emit and k < d - 1:
                outs.append(self.emit[k + 1](h))
        return h, outs

    def intermediate_levels(self) -> list[int]:
        """Relative downsampling level of each intermediate (coarsest first)."""
        d = self.cfg.internal_levels
        return list(range(d, 0, -1))


class NUNet(nn.Module):
    """Backbone U-net plus optional MOU refinement and MDSC connections.

    With no MOUs and no MDSCs this is exactly the plain backbone. The
    skip into decoder level i concatenates the encoder feature with the
    MOU final output when stage i carries an MOU; intermediate MOU
    outputs are projected by 1x1 convs to the width of their scale and
    summed into the matching refinement stream (skip_fusion "concat+sum").
    """

    def __init__(self, cfg: NUNetConfig):
        super().__init__()
        self.cfg = cfg
        bb = cfg.backbone
        L = bb.levels
        width = bb.channels.width
        route_xf = cfg.skip_fusion == "concat+sum"
        mou_by_stage = {m.stage_index: m for m in cfg.mous}
        self._mdsc_by_target = {c.target_stage: c for c in cfg.mdscs}
        self._mdsc_by_source = {c.source_stage: c for c in cfg.mdscs}

        self.pool = nn.MaxPool2d(2)
        self.enc = nn.ModuleList()
        for i in range(1, L + 1):
            in_ch = bb.in_channels if i == 1 else width(i - 1)
            if i in self._mdsc_by_target:
                in_ch += MDSC_WIDTH
            self.enc.append(double_conv(in_ch, width(i)))
        self.bottom = double_conv(width(L), width(L + 1))

        self.mous = nn.ModuleDict(
            {str(i): MultiOutUNet(m, emit_intermediates=route_xf)
             for i, m in sorted(mou_by_stage.items())}
        )
        self.xf_proj = nn.ModuleDict()
        if route_xf:
            for i, m in sorted(mou_by_stage.items()):
                for r in range(1, m.internal_levels + 1):
                    j = i + r
                    self.xf_proj[f"{i}_{j}"] = nn.Conv2d(m.channels, width(j), 1)

        self.mdscs = nn.ModuleDict(
            {str(c.source_stage): nn.Sequential(nn.MaxPool2d(4), conv_block(width(c.source_stage), MDSC_WIDTH))
             for c in cfg.mdscs}
        )

        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(L, 0, -1):
            self.ups.append(nn.ConvTranspose2d(width(i + 1), width(i), 2, stride=2))
            skip_ch = 2 * width(i) if i in mou_by_stage else width(i)
            self.dec.append(double_conv(width(i) + skip_ch, width(i)))
        self.head = nn.Conv2d(width(1), 1, 1)

    @property
    def divisor(self) -> int:
        return self.cfg.backbone.divisor

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4:
            raise ShapeError(f"expected input of shape (B, C, H, W), got {tuple(x.shape)}")
        expected_c = self.cfg.backbone.in_channels
        if x.shape[1] != expected_c:
            raise ShapeError(f"expected {expected_c} input channel(s), got {x.shape[1]}")
        h, w = x.shape[2], x.shape[3]
        div = self.divisor
        if h % div or w % div:
            raise ShapeError(
                f"input {h}x{w} is invalid: H and W must be divisible by {div} "
                f"for a depth-{self.cfg.backbone.depth} backbone"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        L = self.cfg.backbone.levels
        feats: dict[int, torch.Tensor] = {}
        mdsc_pending: dict[int, torch.Tensor] = {}
        h = x
        for i in range(1, L + 1):
            if i in self._mdsc_by_target:
                h = torch.cat([h, mdsc_pending.pop(i)], dim=1)
            h = self.enc[i - 1](h)
            feats[i] = h
            if i in self._mdsc_by_source:
                mdsc_pending[i + 2] = self.mdscs[str(i)](h)
            h = self.pool(h)
        h = self.bottom(h)

        refined: dict[int, torch.Tensor] = {}
        xf_sums: dict[int, torch.Tensor] = {}
        for key, mou in self.mous.items():
            i = int(key)
            final, outs = mou(feats[i])
            refined[i] = final
            for level, out in zip(mou.intermediate_levels(), outs):
                j = i + level
                proj = self.xf_proj[f"{i}_{j}"](out)
                xf_sums[j] = xf_sums[j] + proj if j in xf_sums else proj
        for j, extra in xf_sums.items():
            refined[j] = refined[j] + extra

        for idx, i in enumerate(range(L, 0, -1)):
            h = self.ups[idx](h)
            skip = feats[i]
            if i in refined:
                skip = torch.cat([skip, refined[i]], dim=1)
            h = self.dec[idx](torch.cat([h, skip], dim=1))
        return torch.sigmoid(self.head(h))


def build_backbone(cfg: BackboneConfig, seed: int = 0, input_size: int | None = None) -> NUNet:
    """Plain U-net: L encoder stages, bottleneck, L decoder stages, sigmoid head."""
    if input_size is None:
        input_size = max(256, cfg.divisor)
        input_size -= input_size % cfg.divisor
    full = NUNetConfig(backbone=cfg, mous=(), mdscs=(), input_size=input_size, seed=seed)
    return build_nunet(full)


def build_mou(cfg: MOUConfig, seed: int = 0) -> MultiOutUNet:
    """Standalone multi-out U-net module."""
    torch.manual_seed(seed)
    return MultiOutUNet(cfg)


def build_nunet(cfg: NUNetConfig) -> NUNet:
    """Build the full network described by cfg with seeded initialization."""
    torch.manual_seed(cfg.seed)
    return NUNet(cfg)


def variant_config(name: str, base_width: int = 32, cap: int = 512, in_channels: int = 1,
                   input_size: int = 256, seed: int = 0) -> NUNetConfig:
    """Config for one of the ablation-ladder variants."""
    if name not in VARIANT_NAMES:
        raise ConfigError(
            f"unknown variant {name!r}; valid names: {', '.join(VARIANT_NAMES)}"
        )
    schedule = ChannelSchedule(base_width=base_width, cap=cap)
    if name == "unet":
        backbone = BackboneConfig(depth=9, channels=schedule, in_channels=in_channels)
        return NUNetConfig(backbone=backbone, input_size=input_size, seed=seed)
    canonical = NUNetConfig.canonical(base_width=base_width, cap=cap, in_channels=in_channels,
                                      input_size=input_size, seed=seed)
    if name == "deeper":
        return replace(canonical, mous=(), mdscs=())
    if name == "deeper_mou":
        return replace(canonical, mdscs=())
    return canonical


def build_variant(name: str, **kwargs) -> NUNet:
    """Build an ablation-ladder variant by name (see VARIANT_NAMES)."""
    return build_nunet(variant_config(name, **kwargs))
