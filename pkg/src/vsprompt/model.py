"""Recognizer assembly: visual front-end, transformer back-end, linear predictor."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import ShapeError, Tensor, add, concat, log_softmax, mean, relu, reshape, transpose
from .layers import (
    ConvLayer,
    PaddingSpec,
    TransformerBlock,
    attention_block,
    conv2d_forward,
    conv3d_forward,
    layer_norm,
    linear,
    pad_region_size,
    positional_encoding,
)

MODES = ("ctc_sentence", "word_classification")


@dataclass(frozen=True)
class ConvSpec:
    kind: str  # "3d" or "2d"
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, int, int, int]  # left, right, top, bottom
    temporal_pad: int = 0
    residual: bool = False  # add the input of the previous layer before the ReLU


@dataclass(frozen=True)
class ModelConfig:
    name: str
    mode: str
    frames: int
    height: int
    width: int
    channels: int
    front_end: tuple[ConvSpec, ...]
    dim: int
    depth: int
    heads: int
    ffn_dim: int
    num_classes: int  # V (CTC vocabulary without blank) or K (word classes)
    pooling: str = "flatten"  # spatial reduction before the projection: "flatten" | "avg"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["front_end"] = [asdict(c) for c in self.front_end]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["front_end"] = tuple(
            ConvSpec(**{**c, "kernel": tuple(c["kernel"]), "stride": tuple(c["stride"]),
                        "padding": tuple(c["padding"])})
            for c in d["front_end"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def output_size(self) -> int:
        return self.num_classes + 1 if self.mode == "ctc_sentence" else self.num_classes

    def layer_geometry(self) -> list[tuple[int, int, int]]:
        """Input ``(C, H, W)`` of every conv layer, plus the front-end output as the last item.

        Raises ShapeError if the declared layers do not chain.
        """
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        C, H, W = self.channels, self.height, self.width
        geo = []
        seen_2d = False
        prev_in = None
        for i, spec in enumerate(self.front_end):
            if spec.kind not in ("2d", "3d"):
                raise ValueError(f"conv layer {i}: kind must be '2d' or '3d', got {spec.kind!r}")
            if spec.kind == "3d" and seen_2d:
                raise ShapeError(f"conv layer {i}: 3d convolutions must precede 2d ones")
            seen_2d |= spec.kind == "2d"
            nk = 3 if spec.kind == "3d" else 2
            if len(spec.kernel) != nk or len(spec.stride) != nk:
                raise ShapeError(f"conv layer {i}: {spec.kind} needs {nk}-d kernel and stride")
            if spec.kind == "3d" and (spec.stride[0] != 1 or spec.kernel[0] != 2 * spec.temporal_pad + 1):
                raise ShapeError(f"conv layer {i}: temporal axis must be length-preserving "
                                 "(stride 1, kernel 2*temporal_pad+1)")
            geo.append((C, H, W))
            L, R, U, B = spec.padding
            kh, kw = spec.kernel[-2:]
            sh, sw = spec.stride[-2:]
            Ho, Wo = (H + U + B - kh) // sh + 1, (W + L + R - kw) // sw + 1
            if Ho < 1 or Wo < 1:
                raise ShapeError(f"conv layer {i}: output would be empty from input {H}x{W}")
            if spec.residual and (prev_in is None or prev_in != (spec.out_channels, Ho, Wo)):
                raise ShapeError(f"conv layer {i}: residual shape {prev_in} != output "
                                 f"{(spec.out_channels, Ho, Wo)}")
            prev_in = (C, H, W)
            C, H, W = spec.out_channels, Ho, Wo
        geo.append((C, H, W))
        if self.dim % self.heads:
            raise ShapeError(f"model dim {self.dim} not divisible by {self.heads} heads")
        return geo

    @property
    def feature_size(self) -> int:
        C, H, W = self.layer_geometry()[-1]
        return C * H * W if self.pooling == "flatten" else C


def grid_tiny(vocab: int = 10, frames: int = 12, height: int = 16, width: int = 16,
              channels: int = 1) -> ModelConfig:
    """Sentence-level CTC recognizer: one 3d conv, two 2d convs, 2-layer back-end, D=64."""
    return ModelConfig(
        name="grid-tiny", mode="ctc_sentence", frames=frames, height=height, width=width,
        channels=channels,
        front_end=(
            ConvSpec("3d", 8, (3, 3, 3), (1, 2, 2), (1, 1, 1, 1), temporal_pad=1),
            ConvSpec("2d", 16, (3, 3), (2, 2), (1, 1, 1, 1)),
            ConvSpec("2d", 16, (3, 3), (1, 1), (1, 1, 1, 1)),
        ),
        dim=64, depth=2, heads=4, ffn_dim=128, num_classes=vocab, pooling="flatten")


def lrw_tiny(classes: int = 10, frames: int = 12, height: int = 16, width: int = 16,
             channels: int = 1) -> ModelConfig:
    """Word classifier: 3d stem plus seven residual-style 2d convs, 4-layer back-end, D=128."""
    return ModelConfig(
        name="lrw-tiny", mode="word_classification", frames=frames, height=height, width=width,
        channels=channels,
        front_end=(
            ConvSpec("3d", 8, (3, 5, 5), (1, 2, 2), (2, 2, 2, 2), temporal_pad=1),
            ConvSpec("2d", 8, (3, 3), (1, 1), (1, 1, 1, 1)),
            ConvSpec("2d", 8, (3, 3), (1, 1), (1, 1, 1, 1), residual=True),
            ConvSpec("2d", 16, (3, 3), (2, 2), (1, 1, 1, 1)),
            ConvSpec("2d", 16, (3, 3), (1, 1), (1, 1, 1, 1)),
            ConvSpec("2d", 16, (3, 3), (1, 1), (1, 1, 1, 1), residual=True),
            ConvSpec("2d", 32, (3, 3), (2, 2), (1, 1, 1, 1)),
            ConvSpec("2d", 32, (3, 3), (1, 1), (1, 1, 1, 1)),
        ),
        dim=128, depth=4, heads=4, ffn_dim=256, num_classes=classes, pooling="avg")


PRESETS = {"grid-tiny": grid_tiny, "lrw-tiny": lrw_tiny}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        return PRESETS[name](**overrides)
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------- the model

@dataclass
class RecognizerModel:
    config: ModelConfig
    params: dict[str, Tensor]
    convs: list[ConvLayer]
    blocks: list[TransformerBlock]
    frozen: bool = False
    _pe_cache: dict = field(default_factory=dict, repr=False)

    # parameter groups ------------------------------------------------
    def group(self, name: str) -> dict[str, Tensor]:
        prefix = {"front": "front.", "back": "back.", "pred": "pred."}[name]
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def freeze(self) -> "RecognizerModel":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def set_trainable(self, names) -> None:
        names = set(names)
        unknown = names - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        for k, t in self.params.items():
            t.requires_grad = k in names
        self.frozen = not names

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def digest(self) -> str:
        return checkpoint.digest(self.state())

    def tensor_digests(self) -> dict[str, str]:
        return {k: checkpoint.digest({k: v.data}) for k, v in self.params.items()}

    def copy(self) -> "RecognizerModel":
        return copy.deepcopy(self)

    def pad_shapes(self) -> dict[int, tuple[int, int]]:
        """Ring shape ``(S, C)`` for every conv layer that pads."""
        geo = self.config.layer_geometry()
        out = {}
        for i, spec in enumerate(self.config.front_end):
            if any(spec.padding):
                C, H, W = geo[i]
                out[i] = (pad_region_size(H, W, *spec.padding), C)
        return out

    def positional(self, T: int) -> np.ndarray:
        if T not in self._pe_cache:
            self._pe_cache[T] = positional_encoding(T, self.config.dim)
        return self._pe_cache[T]

    # io -------------------------------------------------------------
    def save(self, path) -> None:
        checkpoint.save(path, self.state(), {"kind": "model", "config": self.config.to_dict(),
                                             "config_digest": self.config.digest()})

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(entries))
        extra = sorted(set(entries) - set(self.params))
        if missing or extra:
            raise checkpoint.CheckpointError(
                f"checkpoint entries do not match model: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, t in self.params.items():
            if entries[k].shape != t.shape:
                raise checkpoint.CheckpointError(
                    f"entry {k!r}: checkpoint shape {entries[k].shape} != model shape {t.shape}")
        for k, t in self.params.items():
            t.data[...] = entries[k]


def load_model(path) -> RecognizerModel:
    entries, meta = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise checkpoint.CheckpointError(f"{path} is not a model checkpoint")
    model = build(ModelConfig.from_dict(meta["config"]), seed=0)
    model.load_state(entries)
    return model


def build(config: ModelConfig, seed: int) -> RecognizerModel:
    """Deterministic initialization: He-normal convs, Xavier-uniform linears, unit norms."""
    geo = config.layer_geometry()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    convs = []
    for i, spec in enumerate(config.front_end):
        cin = geo[i][0]
        kshape = (spec.out_channels, cin) + tuple(spec.kernel)
        fan_in = cin * int(np.prod(spec.kernel))
        k = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), kshape), name=f"front.conv{i}.kernel")
        b = Tensor(np.zeros(spec.out_channels), name=f"front.conv{i}.bias")
        params[k.name], params[b.name] = k, b
        convs.append(ConvLayer(k, b, tuple(spec.stride), PaddingSpec(*spec.padding),
                               layer_index=i, temporal_pad=spec.temporal_pad))

    def xavier(name, n_in, n_out):
        bound = math.sqrt(6.0 / (n_in + n_out))
        params[name] = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), name=name)

    def const(name, n, value):
        params[name] = Tensor(np.full(n, float(value)), name=name)

    D = config.dim
    xavier("front.proj.weight", config.feature_size, D)
    const("front.proj.bias", D, 0.0)
    blocks = []
    for j in range(config.depth):
        blk = TransformerBlock.init(D, config.heads, config.ffn_dim, rng)
        for k, t in blk.params().items():
            t.name = f"back.block{j}.{k}"
            params[t.name] = t
        blocks.append(blk)
    const("back.ln_f.gamma", D, 1.0)
    const("back.ln_f.beta", D, 0.0)
    xavier("pred.weight", D, config.output_size)
    const("pred.bias", config.output_size, 0.0)
    return RecognizerModel(config, params, convs, blocks)


# ---------------------------------------------------------------- forward pieces

def _check_prompts(model: RecognizerModel, prompts) -> None:
    cfg = model.config
    if prompts is None:
        return
    if prompts.add is not None:
        want = (cfg.height, cfg.width, cfg.channels)
        if prompts.add.shape != want:
            raise ShapeError(f"addition prompt has shape {prompts.add.shape}, expected {want}")
    if prompts.pad is not None:
        shapes = model.pad_shapes()
        for l, ring in prompts.pad.rings.items():
            if l not in shapes:
                raise ShapeError(f"padding prompt for layer {l}: layer has no padding region")
            if ring.shape != shapes[l]:
                raise ShapeError(f"padding prompt for layer {l} has shape {ring.shape}, expected {shapes[l]}")
    if prompts.cat is not None:
        if prompts.cat.ndim != 2 or prompts.cat.shape[1] != cfg.dim or prompts.cat.shape[0] < 1:
            raise ShapeError(f"concatenation prompt has shape {prompts.cat.shape}, expected (N_p, {cfg.dim})")


def front_end(model: RecognizerModel, video: Tensor, rings: dict | None = None) -> Tensor:
    """``[N, T, H, W, C]`` video to ``[N, T, D]`` frame features."""
    cfg = model.config
    N, T = video.shape[:2]
    h = transpose(video, (0, 4, 1, 2, 3))  # [N, C, T, H, W]
    prev_in = None
    flat = False
    for layer, spec in zip(model.convs, cfg.front_end):
        if rings and layer.layer_index in rings:
            layer = ConvLayer(layer.kernel, layer.bias, layer.stride,
                              PaddingSpec(*layer.padding.sizes, ring=rings[layer.layer_index]),
                              layer.layer_index, layer.temporal_pad)
        if spec.kind == "3d":
            out = conv3d_forward(h, layer)
        else:
            if not flat:  # [N, C, T, H, W] -> [N*T, C, H, W]
                C_, H_, W_ = h.shape[1], h.shape[3], h.shape[4]
                h = reshape(transpose(h, (0, 2, 1, 3, 4)), (N * T, C_, H_, W_))
                flat = True
            out = conv2d_forward(h, layer)
        if spec.residual:
            out = add(out, prev_in)
        prev_in = h
        h = relu(out)
    if flat:
        C_, H_, W_ = h.shape[1:]
        h = reshape(h, (N, T, C_, H_, W_))
    else:
        h = transpose(h, (0, 2, 1, 3, 4))
    if cfg.pooling == "flatten":
        h = reshape(h, (N, T, -1))
    else:
        h = mean(reshape(h, (N, T, h.shape[2], -1)), axis=-1)
    return linear(h, model.params["front.proj.weight"], model.params["front.proj.bias"])


def back_end(model: RecognizerModel, feats: Tensor, cat: Tensor | None = None) -> Tensor:
    """Positional terms on frames, optional prompt rows prepended, then the encoder.

    Returns only the frame positions, ``[N, T, D]``.
    """
    N, T, D = feats.shape
    h = add(feats, Tensor(model.positional(T)))
    n_p = 0
    if cat is not None:
        n_p = cat.shape[0]
        h = concat([add(Tensor(np.zeros((N, n_p, D))), cat), h], axis=1)
    for blk in model.blocks:
        h = attention_block(h, blk)
    h = layer_norm(h, model.params["back.ln_f.gamma"], model.params["back.ln_f.beta"])
    return h[:, n_p:, :] if n_p else h


def predictor(model: RecognizerModel, h: Tensor) -> Tensor:
    if model.config.mode == "word_classification":
        h = mean(h, axis=1)
    out = linear(h, model.params["pred.weight"], model.params["pred.bias"])
    return log_softmax(out, axis=-1) if model.config.mode == "ctc_sentence" else out


def forward(model: RecognizerModel, video, prompts=None) -> Tensor:
    """Run ``P(B(F(video + add) with pad rings) ++ cat)``.

    ``video`` is ``[T, H, W, C]`` or a batch ``[N, T, H, W, C]``. CTC mode
    returns per-frame log-probabilities ``[(N,) T, V+1]``; word mode returns
    class logits ``[(N,) K]``.
    """
    video = video if isinstance(video, Tensor) else Tensor(video)
    single = video.ndim == 4
    if single:
        video = reshape(video, (1,) + video.shape)
    cfg = model.config
    if video.ndim != 5 or video.shape[2:] != (cfg.height, cfg.width, cfg.channels):
        raise ShapeError(f"video shape {video.shape} does not match model input "
                         f"(T, {cfg.height}, {cfg.width}, {cfg.channels})")
    if cfg.mode == "word_classification" and video.shape[1] != cfg.frames:
        raise ShapeError(f"word mode expects {cfg.frames} frames, got {video.shape[1]}")
    _check_prompts(model, prompts)
    if prompts is not None and prompts.add is not None:
        video = add(video, prompts.add)
    rings = prompts.pad.rings if prompts is not None and prompts.pad is not None else None
    feats = front_end(model, video, rings)
    h = back_end(model, feats, prompts.cat if prompts is not None else None)
    out = predictor(model, h)
    return reshape(out, out.shape[1:]) if single else out


# ---------------------------------------------------------------- accounting

def parameter_count(model: RecognizerModel | None = None, prompts=None) -> dict:
    """Exact parameter counts by group, read off the tensors themselves."""
    out: dict = {}
    if model is not None:
        for g, key in (("front", "front_end"), ("back", "back_end"), ("pred", "predictor")):
            out[key] = sum(t.size for t in model.group(g).values())
        out["total"] = out["front_end"] + out["back_end"] + out["predictor"]
    if prompts is not None:
        out["add"] = prompts.add.size if prompts.add is not None else 0
        out["pad"] = sum(r.size for r in prompts.pad.rings.values()) if prompts.pad is not None else 0
        out["cat"] = prompts.cat.size if prompts.cat is not None else 0
        out["prompt_total"] = out["add"] + out["pad"] + out["cat"]
        if model is not None:
            out["ratio"] = out["prompt_total"] / out["total"]
    return out


def analytic_parameter_count(config: ModelConfig) -> dict:
    """The same totals as :func:`parameter_count`, from layer formulas alone."""
    geo = config.layer_geometry()
    front = 0
    for (cin, _, _), spec in zip(geo, config.front_end):
        front += spec.out_channels * cin * math.prod(spec.kernel) + spec.out_channels
    D, F = config.dim, config.ffn_dim
    front += config.feature_size * D + D
    per_block = 2 * 2 * D + 4 * (D * D + D) + (D * F + F) + (F * D + D)
    back = config.depth * per_block + 2 * D
    pred = D * config.output_size + config.output_size
    return {"front_end": front, "back_end": back, "predictor": pred, "total": front + back + pred}


def analytic_prompt_count(config: ModelConfig, combination: str, pad_layers=None, cat_length: int = 5) -> dict:
    """Prompt sizes from the config: frame area, ring formula, and ``N_p * D``."""
    parts = set(combination.split("+"))
    geo = config.layer_geometry()
    padded = [i for i, s in enumerate(config.front_end) if any(s.padding)]
    layers = padded if pad_layers is None else list(pad_layers)
    add_n = config.height * config.width * config.channels if "A" in parts else 0
    pad_n = 0
    if "P" in parts:
        for i in layers:
            C, H, W = geo[i]
            pad_n += pad_region_size(H, W, *config.front_end[i].padding) * C
    cat_n = cat_length * config.dim if "C" in parts else 0
    return {"add": add_n, "pad": pad_n, "cat": cat_n, "prompt_total": add_n + pad_n + cat_n}
