"""The full 3-stage recognition model, its size variants, and a FLOP estimator.

Layout per forward pass (square input, side divisible by patch_size * 2^3):

    stem (two 3x3 conv blocks, stride 1)
      -> [stage: parse/mask/abstract + conv block] x 3
      -> global average pool -> project to the embedding width
      -> add the three context impressions
      -> 2-layer MLP head (final layer zero-initialized)

Channels double and spatial dims halve at every stage; the patch grid side
therefore halves too (P_l = H_l / patch_size). The parser can be swapped for
the spatial-attention or plain-field baselines, or disabled entirely, which
reduces the model to a plain convolutional trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from . import gaze, parsers
from .errors import ConfigError, DimensionError, NumericError

PARSER_MODES = ("shift", "spatial_attention", "plain_field", "none")

# (embed_dim, ca_layers, ca_heads, stem_channels) per variant
VARIANT_TABLE = {
    "S": (384, 2, 6, 32),
    "B": (768, 3, 12, 48),
    "L": (1024, 4, 16, 64),
    "XL": (1280, 5, 16, 80),
    "H": (1664, 6, 16, 96),
}

VALID_PATCH_SIZES = (2, 4, 8)


@dataclass
class ModelConfig:
    input_size: int = 32
    in_channels: int = 3
    stem_channels: int = 8
    patch_size: int = 4
    stages: int = 3
    embed_dim: int = 64
    ca_layers: int = 1
    ca_heads: int = 4
    parser_mode: str = "shift"
    context_impression_enabled: bool = True
    band_pass: bool = True
    block_norm: bool = True
    ca_ffn: bool = True
    variant_name: str = "custom"
    num_classes: int = 4

    def validate(self):
        if self.stages != 3:
            raise ConfigError(f"stages must be 3, got {self.stages}")
        if self.patch_size not in VALID_PATCH_SIZES:
            raise ConfigError(f"patch_size must be one of {VALID_PATCH_SIZES}")
        if self.input_size % (self.patch_size * 2 ** self.stages):
            raise ConfigError(
                f"input_size {self.input_size} not divisible by "
                f"patch_size * 2^stages = {self.patch_size * 2 ** self.stages}")
        if self.embed_dim % self.ca_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"{self.ca_heads} heads")
        if self.parser_mode not in PARSER_MODES:
            raise ConfigError(f"parser_mode must be one of {PARSER_MODES}, "
                              f"got '{self.parser_mode}'")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        return self

    def stage_channels(self, stage):
        """Input channels of stage `stage` (0-based)."""
        return self.stem_channels * 2 ** stage

    def stage_side(self, stage):
        return self.input_size // 2 ** stage

    def grid_side(self, stage):
        return self.stage_side(stage) // self.patch_size


def build_variant(name, k, input_size=64, num_classes=4, **overrides):
    """Config for one named size variant at latent patch size k."""
    if name not in VARIANT_TABLE:
        raise ConfigError(f"unknown variant '{name}'; choose from {sorted(VARIANT_TABLE)}")
    embed_dim, ca_layers, ca_heads, stem_channels = VARIANT_TABLE[name]
    cfg = ModelConfig(input_size=input_size, stem_channels=stem_channels,
                      patch_size=k, embed_dim=embed_dim, ca_layers=ca_layers,
                      ca_heads=ca_heads, variant_name=name, num_classes=num_classes)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.validate()


# ---------------------------------------------------------------------------
# config file format: line-oriented `key = value`
# ---------------------------------------------------------------------------

_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def _parse_value(field_type, raw, key):
    if field_type is bool:
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ConfigError(f"key '{key}': expected a boolean, got '{raw}'") from None
    if field_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key '{key}': expected an integer, got '{raw}'") from None
    return raw


def load_model_config(path):
    """Read a `key = value` config file; every ModelConfig field is required,
    unknown keys are errors."""
    spec = {f.name: f.type for f in fields(ModelConfig)}
    types = {"input_size": int, "in_channels": int, "stem_channels": int,
             "patch_size": int, "stages": int, "embed_dim": int,
             "ca_layers": int, "ca_heads": int, "num_classes": int,
             "parser_mode": str, "variant_name": str,
             "context_impression_enabled": bool, "band_pass": bool,
             "block_norm": bool, "ca_ffn": bool}
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in spec:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            if key in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            seen[key] = _parse_value(types[key], raw, key)
    missing = sorted(set(spec) - set(seen))
    if missing:
        raise ConfigError(f"{path}: missing config key '{missing[0]}'")
    return ModelConfig(**seen).validate()


def save_model_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(ModelConfig):
            value = getattr(cfg, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{f.name} = {value}\n")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    logits: ad.Tensor
    stage_masks: list
    stage_embeddings: list
    fused: ad.Tensor


@dataclass
class ConvBlockParams:
    w: ad.Tensor
    b: ad.Tensor
    norm_g: ad.Tensor | None
    norm_b: ad.Tensor | None


class ProNextModel:
    """Parameter container plus forward pass. Single-owner during a
    forward/backward; share read-only across threads only after training."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg.validate()
        self.rng = np.random.default_rng(seed)
        self.params = {}
        self._build()

    # -- construction -----------------------------------------------------

    def _register(self, name, tensor):
        self.params[name] = tensor
        return tensor

    def _conv_block(self, name, cin, cout):
        rng = self.rng
        blk = ConvBlockParams(
            w=self._register(f"{name}.w", ad.trunc_normal(rng, (3, 3, cin, cout))),
            b=self._register(f"{name}.b", ad.zeros_param(cout)),
            norm_g=None, norm_b=None)
        if self.cfg.block_norm:
            blk.norm_g = self._register(f"{name}.norm_g",
                                        ad.Tensor(np.ones(cout), requires_grad=True))
            blk.norm_b = self._register(f"{name}.norm_b", ad.zeros_param(cout))
        return blk

    def _register_tree(self, prefix, obj):
        """Register every Tensor reachable from a dataclass tree."""
        if isinstance(obj, ad.Tensor):
            obj.requires_grad = True
            self._register(prefix, obj)
            return
        if isinstance(obj, list):
            for i, item in enumerate(obj):
                self._register_tree(f"{prefix}{i}", item)
            return
        if hasattr(obj, "__dataclass_fields__"):
            for f in fields(obj):
                child = getattr(obj, f.name)
                if isinstance(child, (ad.Tensor, list)) or hasattr(child, "__dataclass_fields__"):
                    self._register_tree(f"{prefix}.{f.name}", child)

    def _build(self):
        cfg = self.cfg
        self.stem = [self._conv_block("stem.block0", cfg.in_channels, cfg.stem_channels),
                     self._conv_block("stem.block1", cfg.stem_channels, cfg.stem_channels)]
        self.stage_parsers = []
        self.stage_params = []
        self.post_blocks = []
        for l in range(cfg.stages):
            C = cfg.stage_channels(l)
            if cfg.parser_mode == "shift" or cfg.parser_mode == "plain_field":
                parser = parsers.init_shift_parser(self.rng, channels=C)
            elif cfg.parser_mode == "spatial_attention":
                parser = parsers.init_sa_parser(self.rng)
            else:
                parser = None
            if parser is not None:
                self._register_tree(f"stage{l}.parser", parser)
            self.stage_parsers.append(parser)

            stage = gaze.init_gaze_stage(self.rng, C=C, k=cfg.patch_size,
                                         D=cfg.embed_dim, ca_layers=cfg.ca_layers,
                                         heads=cfg.ca_heads, ffn_enabled=cfg.ca_ffn)
            self._register_tree(f"stage{l}.gaze", stage)
            self.stage_params.append(stage)
            self.post_blocks.append(self._conv_block(f"stage{l}.post", 2 * C, 2 * C))

        final_c = cfg.stage_channels(cfg.stages)
        self.fuse_w = self._register("head.fuse_w",
                                     ad.trunc_normal(self.rng, (final_c, cfg.embed_dim)))
        self.fuse_b = self._register("head.fuse_b", ad.zeros_param(cfg.embed_dim))
        self.mlp_w1 = self._register("head.mlp_w1",
                                     ad.trunc_normal(self.rng, (cfg.embed_dim, cfg.embed_dim)))
        self.mlp_b1 = self._register("head.mlp_b1", ad.zeros_param(cfg.embed_dim))
        # zero-init final layer: step-0 logits are exactly zero
        self.mlp_w2 = self._register("head.mlp_w2",
                                     ad.zeros_param((cfg.embed_dim, cfg.num_classes)))
        self.mlp_b2 = self._register("head.mlp_b2", ad.zeros_param(cfg.num_classes))

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self):
        return dict(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def num_parameters(self):
        return sum(t.size for t in self.params.values())

    def load_state(self, arrays):
        for name, tensor in self.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter '{name}'")
            if arrays[name].shape != tensor.shape:
                raise DimensionError(f"parameter '{name}' shape mismatch")
            tensor.data = arrays[name].astype(tensor.dtype)

    # -- forward ------------------------------------------------------------

    def _apply_block(self, h, blk):
        h = ad.conv2d(h, blk.w, blk.b, stride=1, padding=1)
        if blk.norm_g is not None:
            h = ad.block_norm(h, blk.norm_g, blk.norm_b)
        return ad.gelu(h)

    def forward(self, x, mode="hard", zero_context=False):
        """x: (B, H, W, C) array or Tensor. mode 'soft' replaces the binary
        mask with raw probabilities everywhere (gradient checking only)."""
        cfg = self.cfg
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x)
        if x.ndim != 4:
            raise DimensionError("forward expects a batched (B, H, W, C) input")
        if x.shape[1] != cfg.input_size or x.shape[3] != cfg.in_channels:
            raise DimensionError(
                f"input {x.shape[1:]} does not match configured "
                f"{(cfg.input_size, cfg.input_size, cfg.in_channels)}")

        h = x
        for blk in self.stem:
            h = self._apply_block(h, blk)

        masks, embeddings = [], []
        for l in range(cfg.stages):
            side_in, chan_in = h.shape[1], h.shape[3]
            if cfg.parser_mode == "none":
                out = gaze.plain_abstract(h, self.stage_params[l])
            else:
                out = gaze.gaze_shift(
                    h, cfg.patch_size, cfg.parser_mode, self.stage_parsers[l],
                    self.stage_params[l], mode=mode, band_pass=cfg.band_pass,
                    context_enabled=cfg.context_impression_enabled)
            h = self._apply_block(out.f_next, self.post_blocks[l])
            if h.shape[1] != side_in // 2 or h.shape[3] != 2 * chan_in:
                raise DimensionError("stage contract violated: expected spatial "
                                     "halving and channel doubling")
            masks.append(out.mask)
            embeddings.append(out.e_c)

        pooled = ad.global_avg_pool(h)                           # (B, 8*C0)
        fused = ad.linear(pooled, self.fuse_w, self.fuse_b)      # (B, D)
        if cfg.context_impression_enabled and cfg.parser_mode != "none" and not zero_context:
            for e_c in embeddings:
                fused = ad.add(fused, e_c)
        hidden = ad.gelu(ad.linear(fused, self.mlp_w1, self.mlp_b1))
        logits = ad.linear(hidden, self.mlp_w2, self.mlp_b2)
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("non-finite logits in forward pass")
        return Prediction(logits=logits, stage_masks=masks,
                          stage_embeddings=embeddings, fused=fused)

    def predict_classes(self, x):
        with ad.no_grad():
            pred = self.forward(x)
        return np.argmax(pred.logits.data, axis=1)


def loss_and_grads(model, pred, target):
    """Cross-entropy loss plus a full backward pass through all parameters.

    Returns (loss tensor, {name: gradient array}). Parameters with no path to
    the loss (e.g. parser weights when the mask saturates) map to zeros.
    """
    loss = ad.softmax_cross_entropy(pred.logits, target)
    model.zero_grad()
    loss.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in model.params.items()}
    return loss, grads


# ---------------------------------------------------------------------------
# analytic FLOP estimator
# ---------------------------------------------------------------------------


def _conv_flops(side, kh, kw, cin, cout):
    return side * side * kh * kw * cin * cout * 2


def _field_net_flops(P):
    w = parsers.FIELD_WIDTH
    per_cell = 9 * (2 * w + 4 * w * w + w * 1) * 2 + w * 1 * 2  # six convs + 1x1 skip
    return P * P * per_cell


def _attention_flops(P, token_width, D, layers, ffn):
    """Worst-case split: n_focal = n_context = P^2 / 2."""
    n = P * P
    nf = nc = n / 2
    total = n * token_width * D * 2          # shared token projection
    total += n * 9 * D * 2                   # depthwise position encoding
    per_layer = (nf + 2 * nc + nf) * D * D * 2   # Q, K, V, O projections
    per_layer += 2 * nf * nc * D * 2             # logits and weighted sum
    if ffn:
        per_layer += 2 * nf * D * D * 2          # two D x D feed-forward mats
    return total + layers * per_layer


def flop_count(cfg):
    """Estimated GFLOPs per forward pass (multiply-accumulate = 2 FLOPs).

    Counts convolutions, attention matmuls, projections, and the MLP head;
    deformable sampling adds 8 FLOPs per kernel tap. Attention uses the
    worst-case half/half focal-context split. The closed-form hand derivation
    for the S/8 desk configuration lives in docs/flops_hand_count.md.
    """
    cfg.validate()
    total = 0.0
    side = cfg.input_size
    total += _conv_flops(side, 3, 3, cfg.in_channels, cfg.stem_channels)
    total += _conv_flops(side, 3, 3, cfg.stem_channels, cfg.stem_channels)

    for l in range(cfg.stages):
        C = cfg.stage_channels(l)
        H = cfg.stage_side(l)
        P = cfg.grid_side(l)
        half = H // 2
        if cfg.parser_mode == "shift":
            total += P * P * C * 2 * 2                      # 1x1 condition conv
            total += _field_net_flops(P)
        elif cfg.parser_mode == "plain_field":
            total += _field_net_flops(P)
        elif cfg.parser_mode == "spatial_attention":
            total += P * P * 2 * 1 * 2
        total += _conv_flops(half, 3, 3, C, 2 * 9)          # offset conv
        total += half * half * 9 * C * 8                    # bilinear taps
        total += _conv_flops(half, 3, 3, C, 2 * C)          # deformable contraction
        if cfg.parser_mode != "none" and cfg.context_impression_enabled:
            total += _attention_flops(P, cfg.patch_size ** 2 * C, cfg.embed_dim,
                                      cfg.ca_layers, cfg.ca_ffn)
        total += _conv_flops(half, 3, 3, 2 * C, 2 * C)      # post conv block

    final_c = cfg.stage_channels(cfg.stages)
    total += final_c * cfg.embed_dim * 2
    total += cfg.embed_dim * cfg.embed_dim * 2
    total += cfg.embed_dim * cfg.num_classes * 2
    return total / 1e9
