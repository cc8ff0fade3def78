"""Speaker-specific prompts: input addition, padding rings, and concatenated rows."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import ShapeError, Tensor, add, concat
from .layers import PaddingSpec, pad_region_size
from .model import ModelConfig, RecognizerModel

COMBINATIONS = ("A", "P", "C", "A+P", "A+C", "P+C", "A+P+C")
CAT_INIT_STD = 0.02


@dataclass
class PadPromptSet:
    rings: dict[int, Tensor] = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.rings)


@dataclass
class PromptSet:
    add: Tensor | None = None
    pad: PadPromptSet | None = None
    cat: Tensor | None = None
    speaker: str = ""

    @property
    def combination(self) -> str:
        parts = [k for k, v in (("A", self.add), ("P", self.pad), ("C", self.cat)) if v is not None]
        return "+".join(parts)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        if self.add is not None:
            out["prompt.add"] = self.add
        if self.pad is not None:
            for l in sorted(self.pad.rings):
                out[f"prompt.pad.{l}"] = self.pad.rings[l]
        if self.cat is not None:
            out["prompt.cat"] = self.cat
        return out

    def groups(self) -> dict[str, list[Tensor]]:
        """Tensors keyed by learning-rate group ("add", "pad", "cat")."""
        g = {}
        if self.add is not None:
            g["add"] = [self.add]
        if self.pad is not None:
            g["pad"] = [self.pad.rings[l] for l in sorted(self.pad.rings)]
        if self.cat is not None:
            g["cat"] = [self.cat]
        return g

    def requires_grad_(self, flag: bool = True) -> "PromptSet":
        for t in self.tensors().values():
            t.requires_grad = flag
        return self

    def copy(self) -> "PromptSet":
        dup = lambda t: None if t is None else Tensor(t.data.copy(), t.requires_grad)
        pad = None if self.pad is None else PadPromptSet({l: dup(r) for l, r in self.pad.rings.items()})
        return PromptSet(dup(self.add), pad, dup(self.cat), self.speaker)

    def digest(self) -> str:
        return checkpoint.digest({k: t.data for k, t in self.tensors().items()})


def parse_combination(label: str) -> frozenset[str]:
    parts = label.split("+")
    if label not in COMBINATIONS:
        raise ValueError(f"unknown prompt combination {label!r}; expected one of {COMBINATIONS}")
    return frozenset(parts)


def pad_layer_subset(config: ModelConfig, n_layers: int | None) -> list[int]:
    """The first ``n_layers`` padded conv layers, shallowest first (all if None)."""
    padded = [i for i, s in enumerate(config.front_end) if any(s.padding)]
    if n_layers is None:
        return padded
    if not 1 <= n_layers <= len(padded):
        raise ValueError(f"pad layer count {n_layers} outside 1..{len(padded)}")
    return padded[:n_layers]


def init_prompts(model_config: ModelConfig, combination: str, seed: int, *,
                 pad_layers: int | None = None, cat_length: int = 5, speaker: str = "") -> PromptSet:
    """Zero Add/Pad prompts (exact baseline start) and small-Gaussian Cat rows."""
    parts = parse_combination(combination)
    cfg = model_config
    ps = PromptSet(speaker=speaker)
    if "A" in parts:
        ps.add = Tensor(np.zeros((cfg.height, cfg.width, cfg.channels)), name="prompt.add")
    if "P" in parts:
        shapes = build_pad_shapes(cfg)
        ps.pad = PadPromptSet({l: Tensor(np.zeros(shapes[l]), name=f"prompt.pad.{l}")
                               for l in pad_layer_subset(cfg, pad_layers)})
    if "C" in parts:
        if cat_length < 1:
            raise ValueError("concatenation prompt length must be >= 1")
        rng = np.random.default_rng(seed)
        ps.cat = Tensor(rng.normal(0.0, CAT_INIT_STD, (cat_length, cfg.dim)), name="prompt.cat")
    return ps


def build_pad_shapes(config: ModelConfig) -> dict[int, tuple[int, int]]:
    geo = config.layer_geometry()
    return {i: (pad_region_size(geo[i][1], geo[i][2], *s.padding), geo[i][0])
            for i, s in enumerate(config.front_end) if any(s.padding)}


def apply_add(video: Tensor, p: Tensor) -> Tensor:
    """Add one frame-shaped prompt to every frame."""
    if video.shape[-p.ndim:] != p.shape:
        raise ShapeError(f"addition prompt {p.shape} does not match frame shape {video.shape[-p.ndim:]}")
    return add(video, p)


def apply_cat(features: Tensor, p: Tensor) -> Tensor:
    """Prepend prompt rows along time: ``[T, D]`` (or ``[N, T, D]``) -> ``N_p + T`` rows."""
    if p.ndim != 2 or p.shape[1] != features.shape[-1]:
        raise ShapeError(f"concatenation prompt {p.shape} does not match feature dim {features.shape[-1]}")
    if features.ndim == 2:
        return concat([p, features], axis=0)
    lead = features.shape[:-2]
    return concat([add(Tensor(np.zeros(lead + p.shape)), p), features], axis=-2)


def install_pad(model: RecognizerModel, pads: PadPromptSet) -> None:
    """Switch the targeted conv layers from zero padding to the given rings."""
    shapes = model.pad_shapes()
    for l, ring in pads.rings.items():
        if l not in shapes:
            raise ShapeError(f"layer {l} has no padding region to replace")
        if ring.shape != shapes[l]:
            raise ShapeError(f"ring for layer {l} has shape {ring.shape}, expected {shapes[l]} "
                             f"(S^l = {shapes[l][0]})")
    for l, ring in pads.rings.items():
        sizes = model.convs[l].padding.sizes
        model.convs[l].padding = PaddingSpec(*sizes, ring=ring)


def uninstall_pad(model: RecognizerModel) -> None:
    for layer in model.convs:
        layer.padding = PaddingSpec(*layer.padding.sizes)


def save_prompts(prompts: PromptSet, path, model_config: ModelConfig) -> None:
    meta = {"kind": "prompts", "speaker": prompts.speaker, "combination": prompts.combination,
            "config_digest": model_config.digest()}
    checkpoint.save(path, {k: t.data for k, t in prompts.tensors().items()}, meta)


def load_prompts(path, model_config: ModelConfig) -> PromptSet:
    """Read prompts and check every entry against ``model_config``."""
    entries, meta = checkpoint.load(path)
    if meta.get("kind") != "prompts":
        raise checkpoint.CheckpointError(f"{path} is not a prompt checkpoint")
    cfg = model_config
    pad_shapes = build_pad_shapes(cfg)
    ps = PromptSet(speaker=meta.get("speaker", ""))
    rings = {}
    for name, arr in entries.items():
        if name == "prompt.add":
            want = (cfg.height, cfg.width, cfg.channels)
        elif name == "prompt.cat":
            want = (arr.shape[0], cfg.dim) if arr.ndim == 2 else ("N_p", cfg.dim)
        elif name.startswith("prompt.pad."):
            l = int(name.rsplit(".", 1)[1])
            want = pad_shapes.get(l, "no padding region")
        else:
            raise checkpoint.CheckpointError(f"unexpected entry {name!r} in prompt checkpoint")
        if arr.shape != want:
            raise checkpoint.CheckpointError(
                f"entry {name!r}: shape {arr.shape} does not match model config {cfg.name} (expected {want})")
        t = Tensor(arr, name=name)
        if name == "prompt.add":
            ps.add = t
        elif name == "prompt.cat":
            ps.cat = t
        else:
            rings[int(name.rsplit(".", 1)[1])] = t
    if rings:
        ps.pad = PadPromptSet(dict(sorted(rings.items())))
    if meta.get("combination") not in (None, ps.combination):
        raise checkpoint.CheckpointError(
            f"combination label {meta['combination']!r} disagrees with stored entries ({ps.combination!r})")
    return ps
