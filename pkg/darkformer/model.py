"""Triple-branch video transformer over one shared parameter set.

The source and target branches run the same divided space-time encoder. The bridge
branch starts from an embedded token stream and, at every layer, adds cross-attention
from the previous source states (queries) to the previous target states (keys and
values), followed by the block's MLP. All three branches read the same
:class:`ModelParams`, so their gradients accumulate into one storage per parameter.
"""

import logging
from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np

from darkformer import tensor as T
from darkformer.attention import AttentionMap, AttentionParams, attend_cross, attend_space, attend_time
from darkformer.tensor import ShapeError, Tensor
from darkformer.tokenizer import tokenize
from darkformer.types import AttentionMode, BridgeInit, ClipSpec, PairBatch, VideoClip

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters."""

    clip: ClipSpec
    heads: int = 4
    layers: int = 2
    # MLP hidden width is mlp_ratio * D
    mlp_ratio: int = 2
    num_classes: int = 8
    attention_mode: AttentionMode = AttentionMode.SpaceTime
    cross_attention: bool = True
    # temporal and spatial passes use one W_Q/W_K/W_V per block when True
    share_qkv: bool = True
    bridge_init: BridgeInit = BridgeInit.Source

    def validate(self) -> str | None:
        """Return a description of the first violated invariant, or None."""
        if (msg := self.clip.validate()) is not None:
            return msg
        if self.heads < 1 or self.clip.dim % self.heads:
            return f"dim {self.clip.dim} is not divisible by heads {self.heads}"
        if self.layers < 0:
            return f"layers must be >= 0, got {self.layers}"
        if self.mlp_ratio < 1:
            return f"mlp_ratio must be >= 1, got {self.mlp_ratio}"
        if self.num_classes < 2:
            return f"num_classes must be >= 2, got {self.num_classes}"
        return None


@dataclass(frozen=True)
class ModelParams:
    """Named parameter tensors plus the config that shaped them.

    Names follow ``embed.*``, ``blocks.<l>.*`` and ``head.*``. Every name maps to
    exactly one Tensor; all branches look parameters up here.
    """

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def parameters(self) -> list[Tensor]:
        """All parameter tensors in name order."""
        return [self.tensors[name] for name in sorted(self.tensors)]

    def zero_grad(self) -> None:
        """Drop every accumulated gradient."""
        for t in self.tensors.values():
            t.zero_grad()

    def num_values(self) -> int:
        """Total count of scalar parameters."""
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        """Deep copy with independent storage and no gradients."""
        return ModelParams(
            config=self.config,
            tensors={name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in self.tensors.items()},
        )

    def attention(self, layer: int, kind: str) -> AttentionParams:
        """Projections of one attention pass ('time', 'space' or 'cross') in a block."""
        prefix = f"blocks.{layer}"
        qkv_prefix = f"{prefix}.space" if kind == "space" and not self.config.share_qkv else f"{prefix}.attn"
        return AttentionParams(
            w_q=self[f"{qkv_prefix}.w_q"],
            w_k=self[f"{qkv_prefix}.w_k"],
            w_v=self[f"{qkv_prefix}.w_v"],
            w_o=self[f"{prefix}.attn.w_o_{kind}"],
            heads=self.config.heads,
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every parameter the config implies."""
    d, spec = config.clip.dim, config.clip
    hidden = config.mlp_ratio * d
    shapes: dict[str, tuple[int, ...]] = {
        "embed.E": (spec.patch_size, d),
        "embed.pos": (spec.seq_len, d),
        "embed.cls": (d,),
    }
    for layer in range(config.layers):
        p = f"blocks.{layer}"
        for name in ("w_q", "w_k", "w_v", "w_o_time", "w_o_space", "w_o_cross"):
            shapes[f"{p}.attn.{name}"] = (d, d)
        if not config.share_qkv:
            for name in ("w_q", "w_k", "w_v"):
                shapes[f"{p}.space.{name}"] = (d, d)
        for ln in ("ln_time", "ln_space", "ln_cross", "ln_mlp"):
            shapes[f"{p}.{ln}.gain"] = (d,)
            shapes[f"{p}.{ln}.bias"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, hidden)
        shapes[f"{p}.mlp.b1"] = (hidden,)
        shapes[f"{p}.mlp.w2"] = (hidden, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    shapes["head.ln.gain"] = (d,)
    shapes["head.ln.bias"] = (d,)
    shapes["head.w"] = (d, config.num_classes)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Create parameters for config.

    Matrices and positions are drawn from N(0, 0.02²), biases and the class token start
    at zero, layernorm gains at one. Tensors are drawn in sorted name order.

    Raises:
    -------
        ValueError:
            When the config is invalid.
    """
    if (msg := config.validate()) is not None:
        raise ValueError(msg)
    tensors = {}
    for name, shape in sorted(param_shapes(config).items()):
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".b", ".b1", ".b2")) or name == "embed.cls":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    params = ModelParams(config=config, tensors=tensors)
    logger.debug("initialized %d tensors, %d values", len(params), params.num_values())
    return params


@dataclass(frozen=True)
class BranchOutput:
    """Logits [B, K], token states Z^0..Z^L, and per-layer attention maps when requested."""

    logits: Tensor
    states: list[Tensor]
    maps: list[dict[str, AttentionMap]] = field(default_factory=list)

    @property
    def features(self) -> Tensor:
        """Final class-token states [B, D] before the head layernorm."""
        return self.states[-1][:, 0, :]


@dataclass(frozen=True)
class TripleOutput:
    """Outputs of the source, target and bridge branches.

    bridge is None when cross-attention is disabled.
    """

    source: BranchOutput
    target: BranchOutput
    bridge: BranchOutput | None


def _ln(z: Tensor, params: ModelParams, name: str) -> Tensor:
    return T.layernorm(z, params[f"{name}.gain"], params[f"{name}.bias"])


def _mlp(z: Tensor, params: ModelParams, layer: int) -> Tensor:
    p = f"blocks.{layer}.mlp"
    hidden = T.gelu(T.matmul(z, params[f"{p}.w1"]) + params[f"{p}.b1"])
    return T.matmul(hidden, params[f"{p}.w2"]) + params[f"{p}.b2"]


def classify(z: Tensor, params: ModelParams) -> Tensor:
    """Shared classifier: head layernorm then linear map of the class token of z [B, T, D]."""
    return T.matmul(_ln(z[:, 0, :], params, "head.ln"), params["head.w"]) + params["head.b"]


def _as_batch(clips: VideoClip | np.ndarray, spec: ClipSpec) -> np.ndarray:
    frames = clips.frames[None] if isinstance(clips, VideoClip) else clips
    if frames.ndim == 4:
        frames = frames[None]
    if frames.shape[1:] != (spec.frames, spec.height, spec.width, spec.channels):
        raise ShapeError(
            f"clip shape {frames.shape[1:]} does not match (N, H, W, C) = "
            f"{(spec.frames, spec.height, spec.width, spec.channels)}"
        )
    return frames


def embed_clips(clips: VideoClip | np.ndarray, params: ModelParams) -> Tensor:
    """Tokenize one clip or a batch [B, N, H, W, C] into Z^0 [B, 1 + M·N, D]."""
    spec = params.config.clip
    frames = _as_batch(clips, spec)
    return tokenize(frames, spec, params["embed.E"], params["embed.pos"], params["embed.cls"]).tokens


def encoder_block(
    z: Tensor, params: ModelParams, layer: int, maps: dict[str, AttentionMap] | None = None
) -> Tensor:
    """One block: temporal then spatial attention sublayers and the MLP, each pre-norm residual."""
    cfg = params.config
    n, m = cfg.clip.frames, cfg.clip.patches_per_frame
    p = f"blocks.{layer}"
    if cfg.attention_mode.uses_time:
        out, amap = attend_time(_ln(z, params, f"{p}.ln_time"), params.attention(layer, "time"), n, m)
        z = z + out
        if maps is not None:
            maps["time"] = amap
    if cfg.attention_mode.uses_space:
        out, amap = attend_space(_ln(z, params, f"{p}.ln_space"), params.attention(layer, "space"), n, m)
        z = z + out
        if maps is not None:
            maps["space"] = amap
    return z + _mlp(_ln(z, params, f"{p}.ln_mlp"), params, layer)


def forward_branch(clips: VideoClip | np.ndarray, params: ModelParams, keep_maps: bool = False) -> BranchOutput:
    """Run one branch of the encoder.

    Parameters:
    -----------
        clips: VideoClip | np.ndarray
            One clip, or a batch [B, N, H, W, C] matching the config's ClipSpec.
        params: ModelParams
            Shared parameters.
        keep_maps: bool
            Keep every attention map in the output.

    Returns:
    --------
        BranchOutput:
            Logits [B, K] from the class token of the final layer, and Z^0..Z^L.

    Raises:
    -------
        ShapeError:
            When the clips do not match the ClipSpec.
    """
    z = embed_clips(clips, params)
    states = [z]
    all_maps: list[dict[str, AttentionMap]] = []
    for layer in range(params.config.layers):
        maps: dict[str, AttentionMap] | None = {} if keep_maps else None
        z = encoder_block(z, params, layer, maps)
        states.append(z)
        if maps is not None:
            all_maps.append(maps)
        logger.trace("layer %d state %s", layer, z.shape)  # type: ignore[attr-defined]
    return BranchOutput(logits=classify(z, params), states=states, maps=all_maps)


def forward_bridge(
    source: BranchOutput, target: BranchOutput, params: ModelParams, keep_maps: bool = False
) -> BranchOutput:
    """Run the bridge branch from cached source and target states.

    Z^0 is chosen by the config's bridge_init. Layer l adds
    attend_cross(LN(Z_source^{l-1}), LN(Z_target^{l-1})) to the bridge state and then
    applies the block's MLP sublayer.
    """
    cfg = params.config
    match cfg.bridge_init:
        case BridgeInit.Source:
            z = source.states[0]
        case BridgeInit.Target:
            z = target.states[0]
        case BridgeInit.Mean:
            z = T.scale(source.states[0] + target.states[0], 0.5)
    states = [z]
    all_maps: list[dict[str, AttentionMap]] = []
    for layer in range(cfg.layers):
        ln = f"blocks.{layer}.ln_cross"
        out, amap = attend_cross(
            _ln(source.states[layer], params, ln),
            _ln(target.states[layer], params, ln),
            params.attention(layer, "cross"),
        )
        z = z + out
        z = z + _mlp(_ln(z, params, f"blocks.{layer}.ln_mlp"), params, layer)
        states.append(z)
        if keep_maps:
            all_maps.append({"cross": amap})
    return BranchOutput(logits=classify(z, params), states=states, maps=all_maps)


def forward_triple(pair: PairBatch, params: ModelParams, keep_maps: bool = False) -> TripleOutput:
    """Run source, target and bridge branches over a batch of same-label pairs.

    Raises:
    -------
        ValueError:
            When any pair's source and target labels differ, or the batch is empty.
    """
    if len(pair) == 0:
        raise ValueError("forward_triple: empty pair batch")
    if bad := pair.mismatched():
        raise ValueError(f"forward_triple: label mismatch in pairs {bad}")
    source = forward_branch(pair.source_frames(), params, keep_maps)
    target = forward_branch(pair.target_frames(), params, keep_maps)
    bridge = forward_bridge(source, target, params, keep_maps) if params.config.cross_attention else None
    return TripleOutput(source=source, target=target, bridge=bridge)


@dataclass(frozen=True)
class Prediction:
    """Predicted classes [B] and class probabilities [B, K]."""

    classes: np.ndarray
    probabilities: np.ndarray


def infer(clips: VideoClip | np.ndarray, params: ModelParams) -> Prediction:
    """Classify clips with a single branch; no second domain is read."""
    with T.no_grad():
        logits = forward_branch(clips, params).logits
        probs = T.softmax(logits, axis=-1).data
    return Prediction(classes=np.argmax(logits.data, axis=-1), probabilities=probs)
