"""Model assembly: dual-branch encoder, channel-attention fusion, staggered decoder.

Resolution levels are indexed 0..stages-1, level i sitting at 1/2^(i+1) of
the input patch. The convolutional branch emits one feature map per level.
The graph branch shares levels 2..stages-1: a stem reduces the patch 4x,
then each graph stage runs its blocks and downsamples once. Fused maps
(channel attention over the concatenated branches) skip into the deep
decoder levels, raw convolutional texture maps into the two shallow ones,
and the final level runs at full resolution without a skip.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import graph as gr
from .autodiff import ConvParams, Tensor
from .errors import ConfigError, DimensionMismatchError, FileFormatError

CHECKPOINT_MAGIC = b"V3DU\x001"


@dataclass
class ModelConfig:
    """Architecture description; every knob the builder consumes."""

    stages: int
    cnn_channels: list[int]
    vig_channels: list[int]
    vig_units_per_stage: list[int]
    ffn_layers_per_block: int = 2
    knn_k: int = 7
    num_classes: int = 2
    patch_shape: tuple[int, int, int] = (32, 64, 64)
    use_vig3d: bool = True
    use_channel_attention: bool = True
    use_offset_decoder: bool = True
    knn_space: str = "feature"
    fusion_squeeze: int = 4
    decoder_fullres_channels: int = 0  # 0 = derive from cnn_channels[0]
    profile: str = "custom"

    def __post_init__(self):
        self.cnn_channels = list(self.cnn_channels)
        self.vig_channels = list(self.vig_channels)
        self.vig_units_per_stage = list(self.vig_units_per_stage)
        self.patch_shape = tuple(self.patch_shape)
        self.validate()

    def validate(self) -> None:
        s = self.stages
        if s < 3:
            raise ConfigError(f"need at least 3 stages (2 texture + 1 fused), got {s}")
        if len(self.cnn_channels) != s:
            raise ConfigError(f"cnn_channels must list {s} entries, got {len(self.cnn_channels)}")
        if len(self.vig_channels) != s:
            raise ConfigError(f"vig_channels must list {s} entries, got {len(self.vig_channels)}")
        if len(self.vig_units_per_stage) != s - 2:
            raise ConfigError(
                f"vig_units_per_stage must list one entry per graph stage "
                f"(stages-2 = {s - 2}), got {len(self.vig_units_per_stage)}"
            )
        if min(self.cnn_channels) < 1 or min(self.vig_channels) < 1:
            raise ConfigError("channel widths must be positive")
        if self.knn_k < 1:
            raise ConfigError(f"knn_k must be >= 1, got {self.knn_k}")
        if self.use_vig3d and min(self.vig_units_per_stage) < 1:
            raise ConfigError("vig_units_per_stage entries must be >= 1 when use_vig3d")
        if self.ffn_layers_per_block < 2:
            raise ConfigError("ffn_layers_per_block must be >= 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.patch_shape) != 3 or min(self.patch_shape) < 1:
            raise ConfigError(f"patch_shape must be 3 positive dims, got {self.patch_shape}")
        div = 1 << s
        for axis, n in zip(("depth", "height", "width"), self.patch_shape):
            if n % div != 0:
                raise ConfigError(f"patch {axis} {n} not divisible by 2^stages = {div}")
        if self.knn_space not in ("feature", "spatial"):
            raise ConfigError(f"knn_space must be 'feature' or 'spatial', got '{self.knn_space}'")
        if self.fusion_squeeze < 1:
            raise ConfigError("fusion_squeeze must be >= 1")
        if self.use_vig3d:
            deepest = [n >> (s - 1) for n in self.patch_shape]
            n_deep = deepest[0] * deepest[1] * deepest[2]
            if self.knn_k > n_deep - 1:
                raise ConfigError(
                    f"knn_k={self.knn_k} infeasible: deepest graph stage has {n_deep} nodes"
                )

    @property
    def fullres_channels(self) -> int:
        if self.decoder_fullres_channels > 0:
            return self.decoder_fullres_channels
        return max(4, self.cnn_channels[0] // 4)

    def stem_grid(self, spatial=None) -> tuple[int, int, int]:
        d, h, w = spatial if spatial is not None else self.patch_shape
        return (d // 4, h // 4, w // 4)

    def node_count(self, spatial=None) -> int:
        g = self.stem_grid(spatial)
        return g[0] * g[1] * g[2]


PROFILES: dict[str, dict] = {
    # Desk-scale default: trains on a laptop-class CPU in minutes.
    "tiny": dict(
        stages=4,
        cnn_channels=[16, 32, 64, 64],
        vig_channels=[16, 32, 64, 64],
        vig_units_per_stage=[1, 2],
        ffn_layers_per_block=2,
        knn_k=7,
        num_classes=2,
        patch_shape=(32, 64, 64),
    ),
    # Smallest config that still exercises every structural element; used by
    # the end-to-end finite-difference checks.
    "micro": dict(
        stages=3,
        cnn_channels=[2, 2, 3],
        vig_channels=[2, 2, 3],
        vig_units_per_stage=[1],
        ffn_layers_per_block=2,
        knn_k=2,
        num_classes=2,
        patch_shape=(8, 8, 8),
    ),
    # Full-scale reference configuration (documentation; not exercised by the
    # test suite). Patch chosen to satisfy isotropic halving at 6 stages.
    "large": dict(
        stages=6,
        cnn_channels=[32, 64, 128, 256, 320, 320],
        vig_channels=[32, 64, 128, 256, 320, 320],
        vig_units_per_stage=[2, 4, 16, 2],
        ffn_layers_per_block=2,
        knn_k=7,
        num_classes=2,
        patch_shape=(64, 192, 192),
    ),
}


def config_from_profile(profile: str, **overrides) -> ModelConfig:
    try:
        base = dict(PROFILES[profile])
    except KeyError:
        raise ConfigError(f"unknown profile '{profile}' (have {sorted(PROFILES)})") from None
    base.update(overrides)
    return ModelConfig(profile=profile, **base)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvBlock:
    """conv -> instance norm -> ReLU."""

    conv: ConvParams
    gamma: Tensor
    beta: Tensor


@dataclass
class FusionParams:
    """Channel-attention gate for one fused level; optional width projection.

    mlp1/mlp2 are None when the model fuses by plain concatenation.
    """

    mlp1: ad.LinearParams | None
    mlp2: ad.LinearParams | None
    project: ConvParams | None = None


@dataclass
class DecoderLevel:
    upconv: ConvParams
    block1: ConvBlock
    block2: ConvBlock
    head: ConvParams | None = None


@dataclass
class GraphStage:
    blocks: list[gr.GraphBlockParams]
    down: ConvParams


@dataclass
class _Params:
    cnn_blocks: list[ConvBlock] = field(default_factory=list)
    cnn_down: list[ConvParams] = field(default_factory=list)
    stem: list[ConvBlock] = field(default_factory=list)
    pos_embedding: Tensor | None = None
    graph_stages: list[GraphStage] = field(default_factory=list)
    fusion: dict[int, FusionParams] = field(default_factory=dict)
    decoder: list[DecoderLevel] = field(default_factory=list)


class SegmentationModel:
    """Built parameters plus the forward pass; immutable during forwards."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self._names: list[str] = []
        self._tensors: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed))

    # -- building ----------------------------------------------------------

    def _register(self, name: str, tensor: Tensor) -> Tensor:
        self._names.append(name)
        self._tensors[name] = tensor
        return tensor

    def _reg_conv(self, name: str, params: ConvParams) -> ConvParams:
        self._register(f"{name}.kernel", params.kernel)
        if params.bias is not None:
            self._register(f"{name}.bias", params.bias)
        return params

    def _reg_linear(self, name: str, params: ad.LinearParams) -> ad.LinearParams:
        self._register(f"{name}.weight", params.weight)
        self._register(f"{name}.bias", params.bias)
        return params

    def _conv_block(self, rng, name, in_ch, out_ch, kernel=3, stride=1, pad=1) -> ConvBlock:
        conv = self._reg_conv(
            f"{name}.conv",
            ad.make_conv(rng, out_ch, in_ch, kernel, (stride,) * 3, (pad,) * 3),
        )
        gamma = self._register(f"{name}.gamma", Tensor(np.ones(out_ch), requires_grad=True))
        beta = self._register(f"{name}.beta", Tensor(np.zeros(out_ch), requires_grad=True))
        return ConvBlock(conv, gamma, beta)

    def _graph_block(self, rng, name, channels) -> gr.GraphBlockParams:
        cfg = self.config
        hidden = max(1, channels * 4)
        widths = [channels] + [hidden] * (cfg.ffn_layers_per_block - 1) + [channels]
        ffn = [
            self._reg_linear(f"{name}.ffn{i}", ad.make_linear(rng, widths[i + 1], widths[i]))
            for i in range(cfg.ffn_layers_per_block)
        ]
        return gr.GraphBlockParams(
            w_in=self._reg_linear(f"{name}.w_in", ad.make_linear(rng, channels, channels)),
            update=self._reg_linear(f"{name}.update", ad.make_linear(rng, channels, 2 * channels)),
            w_out=self._reg_linear(f"{name}.w_out", ad.make_linear(rng, channels, channels)),
            ffn=ffn,
        )

    def _build(self, rng) -> None:
        cfg = self.config
        s = cfg.stages
        p = _Params()

        prev = 1
        for i in range(s):
            p.cnn_blocks.append(self._conv_block(rng, f"cnn.s{i}", prev, cfg.cnn_channels[i]))
            p.cnn_down.append(
                self._reg_conv(f"cnn.s{i}.down", ad.make_conv(rng, cfg.cnn_channels[i], cfg.cnn_channels[i], 2, (2, 2, 2)))
            )
            prev = cfg.cnn_channels[i]

        self._vig_width: dict[int, int] = {}
        if cfg.use_vig3d:
            v0, v1 = cfg.vig_channels[0], cfg.vig_channels[1]
            p.stem.append(self._conv_block(rng, "vig.stem0", 1, v0, stride=2))
            p.stem.append(self._conv_block(rng, "vig.stem1", v0, v1, stride=2))
            p.stem.append(self._conv_block(rng, "vig.stem2", v1, v1, stride=1))
            n_nodes = cfg.node_count()
            p.pos_embedding = self._register(
                "vig.pos_embedding",
                Tensor(ad.uniform_init(rng, (n_nodes, v1), v1), requires_grad=True),
            )
            for j in range(s - 2):
                width = cfg.vig_channels[j + 1]
                out_width = cfg.vig_channels[j + 2]
                blocks = [
                    self._graph_block(rng, f"vig.g{j}.b{u}", width)
                    for u in range(cfg.vig_units_per_stage[j])
                ]
                down = self._reg_conv(f"vig.g{j}.down", ad.make_conv(rng, out_width, width, 2, (2, 2, 2)))
                p.graph_stages.append(GraphStage(blocks, down))
                self._vig_width[j + 2] = out_width

            for i in self.fused_levels():
                project = None
                if self._vig_width[i] != cfg.cnn_channels[i]:
                    project = self._reg_conv(
                        f"fuse.l{i}.project",
                        ad.make_conv(rng, cfg.cnn_channels[i], self._vig_width[i], 1),
                    )
                mlp1 = mlp2 = None
                if cfg.use_channel_attention:
                    total = self._fused_width(i)
                    hidden = max(1, total // cfg.fusion_squeeze)
                    mlp1 = self._reg_linear(f"fuse.l{i}.mlp1", ad.make_linear(rng, hidden, total))
                    mlp2 = self._reg_linear(f"fuse.l{i}.mlp2", ad.make_linear(rng, total, hidden))
                if mlp1 is not None or project is not None:
                    p.fusion[i] = FusionParams(mlp1=mlp1, mlp2=mlp2, project=project)

        current = self._seed_width()
        for step, level in enumerate(self._decoder_targets()):
            width = cfg.fullres_channels if level == "full" else cfg.cnn_channels[level]
            name = f"dec.l{level}"
            upconv = self._reg_conv(name + ".up", ad.make_conv_transpose(rng, current, width, 2, (2, 2, 2)))
            skip = self._skip_width(level)
            block1 = self._conv_block(rng, name + ".c1", width + skip, width)
            block2 = self._conv_block(rng, name + ".c2", width, width)
            head = None
            if step > 0:
                head = self._reg_conv(name + ".head", ad.make_conv(rng, cfg.num_classes, width, 1))
            p.decoder.append(DecoderLevel(upconv, block1, block2, head))
            current = width

        self.params = p

    # -- structure queries --------------------------------------------------

    def fused_levels(self) -> list[int]:
        return list(range(2, self.config.stages)) if self.config.use_vig3d else []

    def _fused_width(self, level: int) -> int:
        cfg = self.config
        if not cfg.use_vig3d:
            return cfg.cnn_channels[level]
        vig_w = self._vig_width[level]
        if vig_w != cfg.cnn_channels[level]:  # projection reconciles the widths
            vig_w = cfg.cnn_channels[level]
        return cfg.cnn_channels[level] + vig_w

    def _seed_width(self) -> int:
        return self._fused_width(self.config.stages - 1)

    def _decoder_targets(self) -> list:
        return list(range(self.config.stages - 2, -1, -1)) + ["full"]

    def supervised_levels(self) -> list:
        """Decoder levels carrying a logit head, finest first."""
        return ["full"] + list(range(0, self.config.stages - 2))

    def _skip_width(self, level) -> int:
        cfg = self.config
        if level == "full":
            return 0
        if not cfg.use_vig3d:
            return cfg.cnn_channels[level]
        if cfg.use_offset_decoder:
            return self._fused_width(level) if level >= 2 else cfg.cnn_channels[level]
        extra = self._fused_width(level) if level >= 2 else 0
        return cfg.cnn_channels[level] + extra

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self._names]

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor, spatial_override: tuple[int, int, int] | None = None):
        """Run the network; returns (final logits, aux logits list, finest first).

        spatial_override permits alternate input sizes for shape checks on
        configs without a positional table (use_vig3d=False); the default
        contract is that x matches config.patch_shape.
        """
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != 1:
            raise DimensionMismatchError("channel", 1, x.shape[1] if x.ndim == 5 else None)
        expected = spatial_override or cfg.patch_shape
        if cfg.use_vig3d and tuple(expected) != tuple(cfg.patch_shape):
            raise ConfigError("positional table binds graph models to their configured patch shape")
        if tuple(x.shape[2:]) != tuple(expected):
            raise DimensionMismatchError("spatial", tuple(expected), tuple(x.shape[2:]))
        p = self.params

        cnn_feats = []
        h = x
        for i in range(cfg.stages):
            h = self._run_conv_block(h, p.cnn_blocks[i])
            h = ad.conv3d(h, p.cnn_down[i])
            cnn_feats.append(h)

        fused: dict[int, Tensor] = {}
        if cfg.use_vig3d:
            vig_feats = self._run_graph_branch(x)
            for i in self.fused_levels():
                vf = vig_feats[i]
                fp = p.fusion.get(i)
                if fp is not None and fp.project is not None:
                    vf = ad.conv3d(vf, fp.project)
                if cfg.use_channel_attention:
                    fused[i] = channel_attention_fuse(cnn_feats[i], vf, fp)
                else:
                    fused[i] = ad.concat([cnn_feats[i], vf], axis=1)

        if cfg.use_vig3d:
            current = fused[cfg.stages - 1]
        else:
            current = cnn_feats[cfg.stages - 1]

        outputs: dict = {}
        for level, dec in zip(self._decoder_targets(), p.decoder):
            current = ad.conv_transpose3d(current, dec.upconv)
            skips = self._skips_for(level, cnn_feats, fused)
            if skips:
                current = ad.concat(skips + [current], axis=1)
            current = self._run_conv_block(current, dec.block1)
            current = self._run_conv_block(current, dec.block2)
            if dec.head is not None:
                outputs[level] = ad.conv3d(current, dec.head)

        final = outputs["full"]
        aux = [outputs[lvl] for lvl in self.supervised_levels()[1:]]
        return final, aux

    def _skips_for(self, level, cnn_feats, fused):
        cfg = self.config
        if level == "full":
            return []
        if not cfg.use_vig3d:
            return [cnn_feats[level]]
        if cfg.use_offset_decoder:
            return [fused[level]] if level >= 2 else [cnn_feats[level]]
        return [cnn_feats[level], fused[level]] if level >= 2 else [cnn_feats[level]]

    @staticmethod
    def _run_conv_block(x: Tensor, blk: ConvBlock) -> Tensor:
        return ad.relu(ad.instance_norm3d(ad.conv3d(x, blk.conv), blk.gamma, blk.beta))

    def _run_graph_branch(self, x: Tensor) -> dict[int, Tensor]:
        cfg = self.config
        p = self.params
        h = x
        for blk in p.stem:
            h = self._run_conv_block(h, blk)
        feats: dict[int, Tensor] = {}
        for j, stage in enumerate(p.graph_stages):
            spatial = h.shape[2:]
            samples = []
            for b in range(h.shape[0]):
                nodes, pos = gr.grid_to_nodes(h, b)
                if j == 0:
                    nodes = ad.add(nodes, p.pos_embedding)
                for blk in stage.blocks:
                    nodes = gr.graph_block(nodes, cfg.knn_k, blk, cfg.knn_space, pos)
                samples.append(gr.nodes_to_grid(nodes, spatial))
            h = samples[0] if len(samples) == 1 else ad.concat(samples, axis=0)
            h = ad.conv3d(h, stage.down)
            feats[j + 2] = h
        return feats

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "SegmentationModel":
        return load_checkpoint(path)


def channel_attention_fuse(cnn_f: Tensor, vig_f: Tensor, fp: FusionParams) -> Tensor:
    """Concatenate the branches and gate channels: pool -> MLP -> sigmoid -> scale."""
    if cnn_f.shape[2:] != vig_f.shape[2:]:
        raise DimensionMismatchError("spatial", tuple(cnn_f.shape[2:]), tuple(vig_f.shape[2:]))
    merged = ad.concat([cnn_f, vig_f], axis=1)
    b, c = merged.shape[:2]
    pooled = ad.reshape(ad.global_avg_pool(merged), (b, c))
    gate = ad.sigmoid(ad.linear(ad.relu(ad.linear(pooled, fp.mlp1)), fp.mlp2))
    return ad.broadcast_mul_channels(merged, ad.reshape(gate, (b, c, 1, 1, 1)))


# ---------------------------------------------------------------------------
# configuration text round trip

_CONFIG_FIELDS = {
    "stages": int,
    "cnn_channels": "int_list",
    "vig_channels": "int_list",
    "vig_units_per_stage": "int_list",
    "ffn_layers_per_block": int,
    "knn_k": int,
    "num_classes": int,
    "patch_shape": "int_tuple",
    "use_vig3d": "bool",
    "use_channel_attention": "bool",
    "use_offset_decoder": "bool",
    "knn_space": str,
    "fusion_squeeze": int,
    "decoder_fullres_channels": int,
    "profile": str,
}


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for name, kind in _CONFIG_FIELDS.items():
        value = getattr(cfg, name)
        if kind in ("int_list", "int_tuple"):
            text = ",".join(str(v) for v in value)
        elif kind == "bool":
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    values: dict = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line: '{line}'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        kind = _CONFIG_FIELDS[key]
        if kind == "int_list":
            values[key] = [int(v) for v in val.split(",") if v]
        elif kind == "int_tuple":
            values[key] = tuple(int(v) for v in val.split(",") if v)
        elif kind == "bool":
            if val not in ("true", "false"):
                raise ConfigError(f"config key '{key}' expects true/false, got '{val}'")
            values[key] = val == "true"
        elif kind is int:
            values[key] = int(val)
        else:
            values[key] = val
    missing = set(_CONFIG_FIELDS) - set(values)
    if missing:
        raise ConfigError(f"config missing keys: {sorted(missing)}")
    return ModelConfig(**values)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, model: SegmentationModel) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg_block = config_to_text(model.config).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_block)))
    buf.write(cfg_block)
    named = model.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name, tensor in named:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", tensor.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(n)
    if len(data) != n:
        raise FileFormatError(f"truncated checkpoint while reading {what}", offset)
    return data


def load_checkpoint(path) -> SegmentationModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FileFormatError(f"bad checkpoint magic {magic!r}", 0)
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfg_text = _read_exact(fh, cfg_len, "config block").decode("utf-8")
        config = config_from_text(cfg_text)
        model = SegmentationModel(config, seed=0)
        expected = dict(model.named_parameters())
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        if count != len(expected):
            raise FileFormatError(
                f"checkpoint lists {count} parameters, config implies {len(expected)}", fh.tell() - 4
            )
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "parameter name").decode("utf-8")
            if name not in expected:
                raise FileFormatError(f"unexpected parameter '{name}'", fh.tell() - name_len)
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dimension"))[0] for _ in range(ndim)
            )
            tensor = expected[name]
            if shape != tensor.shape:
                raise FileFormatError(
                    f"parameter '{name}' has shape {shape}, config implies {tensor.shape}",
                    fh.tell(),
                )
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
            raw = _read_exact(fh, n_bytes, f"data of '{name}'")
            tensor.data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            seen.add(name)
        tail = fh.read(1)
        if tail:
            raise FileFormatError("trailing bytes after last parameter", fh.tell() - 1)
    return model


# ---------------------------------------------------------------------------
# whole-volume inference


def sliding_window_predict(
    volume: np.ndarray,
    model: SegmentationModel,
    overlap: float = 0.5,
    spatial_override: tuple[int, int, int] | None = None,
) -> np.ndarray:
    """Tile a volume with patch-sized windows, average softmax maps, argmax.

    Windows shift flush to the boundary; volumes smaller than the patch are
    reflect-padded and cropped after. Deterministic window order.
    """
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise DimensionMismatchError("rank", 3, volume.ndim)
    patch = spatial_override or model.config.patch_shape

    pads = [max(0, patch[i] - volume.shape[i]) for i in range(3)]
    padded = volume
    if any(pads):
        padded = np.pad(volume, [(0, p) for p in pads], mode="reflect")

    starts = []
    for i in range(3):
        stride = max(1, int(round(patch[i] * (1.0 - overlap))))
        pos = list(range(0, padded.shape[i] - patch[i] + 1, stride))
        if pos[-1] != padded.shape[i] - patch[i]:
            pos.append(padded.shape[i] - patch[i])
        starts.append(pos)

    probs = np.zeros((model.config.num_classes,) + padded.shape)
    counts = np.zeros(padded.shape)
    with ad.no_grad():
        for z in starts[0]:
            for y in starts[1]:
                for x in starts[2]:
                    window = padded[z : z + patch[0], y : y + patch[1], x : x + patch[2]]
                    logits, _ = model.forward(
                        Tensor(window[None, None]), spatial_override=spatial_override
                    )
                    soft = ad.softmax_channel(logits).data[0]
                    probs[:, z : z + patch[0], y : y + patch[1], x : x + patch[2]] += soft
                    counts[z : z + patch[0], y : y + patch[1], x : x + patch[2]] += 1.0
    probs /= counts
    labels = probs.argmax(axis=0).astype(np.uint8)
    return labels[: volume.shape[0], : volume.shape[1], : volume.shape[2]]


def ablation_variant(cfg: ModelConfig, **flags) -> ModelConfig:
    """Copy of a config with ablation switches changed."""
    return replace(cfg, **flags)
