"""The two encoder-decoder reconstruction architectures.

Variant "vit_vit" is a transformer generator: patch embedding, a ViT encoder,
a short ViT decoder, and a linear patch unembedding. Variant "vit_cnn" keeps
the ViT encoder but decodes with transposed-conv upsampling stages that
consume encoder hidden states at configured layers through skip connections.

A Model is a flat registry of named Parameters plus a PeftState holding any
injected fine-tuning modules; ``forward`` is a pure function of both. Blocks
are described by structural metadata (``Model.layout``) so fine-tuning code
and tests can walk the architecture without re-deriving it.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .errors import ConfigError, DimensionError

VIT_VIT = "vit_vit"
VIT_CNN = "vit_cnn"

# Without an explicit override, additive methods inject only into the first
# layers of the generator variant; the vit_cnn variant is fully injectable.
VIT_VIT_ENCODER_PEFT_LAYERS = 3
VIT_VIT_DECODER_PEFT_LAYERS = 2

_MIN_STAGE_CHANNELS = 4


@dataclass(frozen=True)
class ArchConfig:
    variant: str = VIT_CNN
    volume_size: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 2
    mlp_ratio: int = 4
    skip_layer_indices: tuple = ()
    conv_token_mixing: bool = False
    max_peft_encoder_layers: int = 0  # 0 means "variant default"
    max_peft_decoder_layers: int = 0

    def __post_init__(self):
        if self.variant not in (VIT_VIT, VIT_CNN):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.volume_size % self.patch_size:
            raise ConfigError(f"volume_size {self.volume_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.encoder_layers < 1 or self.decoder_layers < 1 or self.mlp_ratio < 1:
            raise ConfigError("encoder_layers, decoder_layers and mlp_ratio must be >= 1")
        if self.variant == VIT_CNN:
            if self.patch_size < 2 or self.patch_size & (self.patch_size - 1):
                raise ConfigError(f"vit_cnn needs a power-of-two patch_size, got {self.patch_size}")
            skips = self.skips()
            if list(skips) != sorted(set(skips)) or any(i < 1 or i > self.encoder_layers for i in skips):
                raise ConfigError(f"skip_layer_indices {skips} must be strictly increasing within 1..{self.encoder_layers}")

    @property
    def grid(self):
        return self.volume_size // self.patch_size

    @property
    def tokens(self):
        return self.grid ** 3

    @property
    def decoder_stages(self):
        return int(round(math.log2(self.patch_size)))

    def skips(self):
        return tuple(self.skip_layer_indices) or tuple(range(1, self.encoder_layers + 1))

    def stage_channels(self, j):
        """Channel width entering stage j+1 / leaving stage j (j=0 is the embedding)."""
        return max(self.embed_dim >> j, _MIN_STAGE_CHANNELS)

    def skip_groups(self):
        """Deepest skips feed the earliest (coarsest) decoder stage."""
        rev = list(reversed(self.skips()))
        return [[int(i) for i in part] for part in np.array_split(rev, self.decoder_stages)]

    def peft_encoder_layers(self):
        if self.max_peft_encoder_layers:
            return min(self.max_peft_encoder_layers, self.encoder_layers)
        if self.variant == VIT_VIT:
            return min(VIT_VIT_ENCODER_PEFT_LAYERS, self.encoder_layers)
        return self.encoder_layers

    def peft_decoder_layers(self):
        n = self.decoder_layers if self.variant == VIT_VIT else self.decoder_stages
        if self.max_peft_decoder_layers:
            return min(self.max_peft_decoder_layers, n)
        if self.variant == VIT_VIT:
            return min(VIT_VIT_DECODER_PEFT_LAYERS, n)
        return n

    def as_dict(self):
        return asdict(self)


@dataclass
class Parameter:
    """A named model weight; trainable=False pins it against optimizer steps."""

    path: str
    tensor: Tensor
    kind: str
    trainable: bool = True

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        self.tensor.requires_grad = bool(flag)


@dataclass(frozen=True)
class BlockSpec:
    """Structural metadata for one named block of the architecture."""

    path: str
    kind: str  # patch_embed|pos_embed|norm|attention|mlp|token_conv|conv|conv_transpose|channel_norm|head_linear|head_conv
    dims: tuple
    scope: str
    layer: int = 0


@dataclass
class LoraSite:
    site: str
    rank: int
    alpha: float
    target: str  # linear|conv|conv_transpose


@dataclass
class AdapterSite:
    block: str
    hidden: int
    conv: bool


@dataclass
class SsfSite:
    site: str
    dim: int
    absorb: str  # norm|channel_norm|linear|conv|conv_transpose


@dataclass
class PromptState:
    scope: str
    count: int
    start_layer: int


@dataclass
class PeftState:
    lora: dict = field(default_factory=dict)
    adapters: dict = field(default_factory=dict)
    ssf: dict = field(default_factory=dict)
    prompts: dict = field(default_factory=dict)
    lora_merged: bool = False
    ssf_folded: bool = False


class Model:
    """Parameter registry + structural layout + injected PEFT state."""

    def __init__(self, config):
        self.config = config
        self.params = {}
        self.layout = []
        self.peft = PeftState()

    def add_param(self, path, data, kind):
        if path in self.params:
            raise ConfigError(f"duplicate parameter path {path}")
        self.params[path] = Parameter(path, Tensor(data, requires_grad=True), kind)

    def remove_param(self, path):
        del self.params[path]

    def t(self, path):
        return self.params[path].tensor

    def paths(self):
        return list(self.params)

    def parameter_count(self):
        return sum(p.tensor.size for p in self.params.values())

    def trainable_count(self):
        return sum(p.tensor.size for p in self.params.values() if p.trainable)

    def zero_grads(self):
        for p in self.params.values():
            p.tensor.grad = None

    def state_arrays(self):
        """path -> copy of raw values, in registry order."""
        return {path: p.tensor.data.copy() for path, p in self.params.items()}


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal draw with out-of-range values redrawn (bound is in units of std)."""
    out = rng.normal(0.0, std, size=shape)
    limit = bound * std
    while True:
        mask = np.abs(out) > limit
        if not mask.any():
            return out
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))


def _add_norm(model, rng, path, dim, scope, layer, kind="norm"):
    model.add_param(path + ".gamma", np.ones(dim), "gamma")
    model.add_param(path + ".beta", np.zeros(dim), "beta")
    model.layout.append(BlockSpec(path, kind, (dim,), scope, layer))


def _add_linear(model, rng, path, out_dim, in_dim, scope, layer, kind="linear"):
    model.add_param(path + ".weight", trunc_normal(rng, (out_dim, in_dim)), "weight")
    model.add_param(path + ".bias", np.zeros(out_dim), "bias")
    if kind != "linear":  # attention projections are covered by their attention spec
        model.layout.append(BlockSpec(path, kind, (out_dim, in_dim), scope, layer))


def _add_conv(model, rng, path, c_out, c_in, kk, scope, layer, transposed=False, kind=None):
    shape = (c_in, c_out, kk, kk, kk) if transposed else (c_out, c_in, kk, kk, kk)
    model.add_param(path + ".weight", trunc_normal(rng, shape), "weight")
    model.add_param(path + ".bias", np.zeros(c_out), "bias")
    model.layout.append(
        BlockSpec(path, kind or ("conv_transpose" if transposed else "conv"), (c_out, c_in, kk), scope, layer)
    )


def _add_vit_block(model, rng, prefix, cfg, scope, layer):
    d = cfg.embed_dim
    hidden = cfg.mlp_ratio * d
    _add_norm(model, rng, prefix + ".norm1", d, scope, layer)
    for proj in ("q", "k", "v", "out"):
        _add_linear(model, rng, f"{prefix}.attn.{proj}", d, d, scope, layer)
    model.layout.append(BlockSpec(prefix + ".attn", "attention", (d,), scope, layer))
    if cfg.conv_token_mixing:
        model.add_param(prefix + ".attn.token_conv.weight", trunc_normal(rng, (d, 3, 3, 3)), "weight")
        model.add_param(prefix + ".attn.token_conv.bias", np.zeros(d), "bias")
        model.layout.append(BlockSpec(prefix + ".attn.token_conv", "token_conv", (d,), scope, layer))
    _add_norm(model, rng, prefix + ".norm2", d, scope, layer)
    _add_linear(model, rng, prefix + ".mlp.fc1", hidden, d, scope, layer)
    _add_linear(model, rng, prefix + ".mlp.fc2", d, hidden, scope, layer)
    model.layout.append(BlockSpec(prefix + ".mlp", "mlp", (d, hidden), scope, layer))


def build_model(config, seed=0):
    """Deterministically initialized model; every parameter starts trainable."""
    cfg = config
    model = Model(cfg)
    rng = np.random.default_rng(seed)
    d, p = cfg.embed_dim, cfg.patch_size

    _add_linear(model, rng, "encoder.patch_embed", d, p ** 3, "encoder", 0, kind="patch_embed")
    model.add_param("encoder.pos_embed", trunc_normal(rng, (cfg.tokens, d)), "pos_embed")
    model.layout.append(BlockSpec("encoder.pos_embed", "pos_embed", (cfg.tokens, d), "encoder", 0))
    for i in range(1, cfg.encoder_layers + 1):
        _add_vit_block(model, rng, f"encoder.layer{i}", cfg, "encoder", i)
    _add_norm(model, rng, "encoder.norm", d, "encoder", 0)

    if cfg.variant == VIT_VIT:
        for i in range(1, cfg.decoder_layers + 1):
            _add_vit_block(model, rng, f"decoder.layer{i}", cfg, "decoder", i)
        _add_norm(model, rng, "decoder.norm", d, "decoder", 0)
        _add_linear(model, rng, "decoder.head", p ** 3, d, "decoder", 0, kind="head_linear")
    else:
        groups = cfg.skip_groups()
        for j in range(1, cfg.decoder_stages + 1):
            stage = f"decoder.stage{j}"
            c_in, c_out = cfg.stage_channels(j - 1), cfg.stage_channels(j)
            _add_conv(model, rng, stage + ".upconv", c_out, c_in, 2, "decoder", j, transposed=True)
            for layer_idx in groups[j - 1]:
                for m in range(1, j + 1):
                    _add_conv(
                        model, rng, f"{stage}.skip{layer_idx}.conv{m}",
                        cfg.stage_channels(m), cfg.stage_channels(m - 1), 2, "decoder", j, transposed=True,
                    )
            fuse_in = c_out * (1 + len(groups[j - 1]))
            _add_conv(model, rng, stage + ".fuse", c_out, fuse_in, 3, "decoder", j)
            _add_norm(model, rng, stage + ".norm", c_out, "decoder", j, kind="channel_norm")
        _add_conv(model, rng, "decoder.head", 1, cfg.stage_channels(cfg.decoder_stages), 1, "decoder", 0, kind="head_conv")
    return model


# -- forward pass --------------------------------------------------------------

def _patchify(x, g, p):
    t = T.reshape(x, (g, p, g, p, g, p))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))
    return T.reshape(t, (g * g * g, p * p * p))


def _unpatchify(t, g, p):
    t = T.reshape(t, (g, g, g, p, p, p))
    t = T.transpose(t, (0, 3, 1, 4, 2, 5))
    return T.reshape(t, (1, g * p, g * p, g * p))


def _tokens_to_grid(tok, g, d):
    t = T.reshape(tok, (g, g, g, d))
    return T.transpose(t, (3, 0, 1, 2))


def insert_prompts(bank, tokens, layer_index, start_layer):
    """Prepend the prompt bank at the input of start_layer, else pass through."""
    if bank is None or layer_index != start_layer or bank.shape[0] == 0:
        return tokens
    return T.concat([bank, tokens], axis=0)


def _strip_prompts(tok, prompt_count):
    if prompt_count:
        return tok[prompt_count:, :]
    return tok


def _ssf_maybe(model, site, x, channel_first=False):
    ssf = model.peft.ssf.get(site)
    if ssf is None:
        return x
    gamma, beta = model.t(site + ".ssf.gamma"), model.t(site + ".ssf.beta")
    if channel_first:
        shape = (ssf.dim, 1, 1, 1)
        gamma, beta = T.reshape(gamma, shape), T.reshape(beta, shape)
    return x * gamma + beta


def _linear_op(model, prefix, x):
    w = model.t(prefix + ".weight")
    y = T.matmul(x, T.transpose(w, (1, 0)))
    lora = model.peft.lora.get(prefix)
    if lora is not None:
        a, b = model.t(prefix + ".lora_a"), model.t(prefix + ".lora_b")
        y = y + T.matmul(T.matmul(x, T.transpose(a, (1, 0))), T.transpose(b, (1, 0))) * (lora.alpha / lora.rank)
    return y + model.t(prefix + ".bias")


def _conv_op(model, prefix, x, stride=1, pad=0, transposed=False):
    w = model.t(prefix + ".weight")
    lora = model.peft.lora.get(prefix)
    if lora is not None:
        a, b = model.t(prefix + ".lora_a"), model.t(prefix + ".lora_b")
        delta = T.matmul(b, a) * (lora.alpha / lora.rank)
        if transposed:
            ci, co, kk = w.shape[0], w.shape[1], w.shape[2]
            delta = T.transpose(T.reshape(delta, (co, ci, kk, kk, kk)), (1, 0, 2, 3, 4))
        else:
            delta = T.reshape(delta, w.shape)
        w = w + delta
    y = T.conv_transpose3d(x, w, stride, pad) if transposed else T.conv3d(x, w, stride, pad)
    bias = model.t(prefix + ".bias")
    return y + T.reshape(bias, (bias.size, 1, 1, 1))


def _channel_norm(model, prefix, x, eps=1e-5):
    c = x.shape[0]
    mu = T.mean(x, axis=(1, 2, 3), keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=(1, 2, 3), keepdims=True)
    xhat = xc * T.pow_scalar(var + eps, -0.5)
    gamma = T.reshape(model.t(prefix + ".gamma"), (c, 1, 1, 1))
    beta = T.reshape(model.t(prefix + ".beta"), (c, 1, 1, 1))
    return xhat * gamma + beta


def _token_mix(model, prefix, x, g):
    """Depthwise conv over the token grid; prompt tokens bypass the mixing."""
    d = x.shape[-1]
    n_prompts = x.shape[0] - g ** 3
    patches = x[n_prompts:, :] if n_prompts else x
    grid = _tokens_to_grid(patches, g, d)
    mixed = T.dwconv3d(grid, model.t(prefix + ".weight"), pad=1)
    mixed = mixed + T.reshape(model.t(prefix + ".bias"), (d, 1, 1, 1))
    mixed_tok = T.reshape(T.transpose(mixed, (1, 2, 3, 0)), (g ** 3, d))
    mixed_tok = patches + mixed_tok
    if n_prompts:
        return T.concat([x[:n_prompts, :], mixed_tok], axis=0)
    return mixed_tok


def _attention(model, prefix, x, cfg):
    heads = cfg.num_heads
    d = cfg.embed_dim
    dh = d // heads
    if cfg.conv_token_mixing:
        x = _token_mix(model, prefix + ".token_conv", x, cfg.grid)
    n = x.shape[0]

    def split(t):
        return T.transpose(T.reshape(t, (n, heads, dh)), (1, 0, 2))

    q = split(_linear_op(model, prefix + ".q", x))
    k = split(_linear_op(model, prefix + ".k", x))
    v = split(_linear_op(model, prefix + ".v", x))
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (dh ** -0.5)
    ctx = T.matmul(T.softmax(scores), v)
    ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, d))
    return _linear_op(model, prefix + ".out", ctx)


def _adapter_vit(model, block, h):
    site = model.peft.adapters.get(block)
    if site is None:
        return h
    inner = T.gelu(_linear_op(model, block + ".adapter.down", h))
    return h + _linear_op(model, block + ".adapter.up", inner)


def _vit_block(model, prefix, x, cfg):
    h = T.layer_norm(x, model.t(prefix + ".norm1.gamma"), model.t(prefix + ".norm1.beta"))
    h = _ssf_maybe(model, prefix + ".norm1", h)
    a = _attention(model, prefix + ".attn", h, cfg)
    a = _ssf_maybe(model, prefix + ".attn", a)
    x = x + a
    h = T.layer_norm(x, model.t(prefix + ".norm2.gamma"), model.t(prefix + ".norm2.beta"))
    h = _ssf_maybe(model, prefix + ".norm2", h)
    m = T.gelu(_linear_op(model, prefix + ".mlp.fc1", h))
    m = _linear_op(model, prefix + ".mlp.fc2", m)
    m = _ssf_maybe(model, prefix + ".mlp", m)
    m = _adapter_vit(model, prefix, m)
    return x + m


def encoder_states(model, x):
    """Per-layer encoder outputs (prompt slots included while VPT is active)."""
    cfg = model.config
    _check_input(cfg, x)
    tok = _patchify(x, cfg.grid, cfg.patch_size)
    tok = _linear_op(model, "encoder.patch_embed", tok)
    tok = tok + model.t("encoder.pos_embed")
    bank_state = model.peft.prompts.get("encoder")
    bank = model.t("encoder.prompts.bank") if bank_state and bank_state.count else None
    start = bank_state.start_layer if bank_state else 0
    states = []
    for i in range(1, cfg.encoder_layers + 1):
        tok = insert_prompts(bank, tok, i, start)
        tok = _vit_block(model, f"encoder.layer{i}", tok, cfg)
        states.append(tok)
    return states


def _encoder_prompt_count(model, layer_index=None):
    """Prompt slots present in the encoder state of a given layer (default: last)."""
    bank = model.peft.prompts.get("encoder")
    if bank is None:
        return 0
    if layer_index is None:
        layer_index = model.config.encoder_layers
    return bank.count if layer_index >= bank.start_layer else 0


def _adapter_cnn(model, stage, feat):
    site = model.peft.adapters.get(stage)
    if site is None:
        return feat
    inner = T.gelu(_conv_op(model, stage + ".adapter.down", feat))
    return feat + _conv_op(model, stage + ".adapter.up", inner)


def _decode_cnn(model, states, zeroed_skip_layers):
    cfg = model.config
    final = _strip_prompts(states[-1], _encoder_prompt_count(model))
    final = T.layer_norm(final, model.t("encoder.norm.gamma"), model.t("encoder.norm.beta"))
    feat = _tokens_to_grid(final, cfg.grid, cfg.embed_dim)
    groups = cfg.skip_groups()
    for j in range(1, cfg.decoder_stages + 1):
        stage = f"decoder.stage{j}"
        feat = _conv_op(model, stage + ".upconv", feat, stride=2, transposed=True)
        feat = _ssf_maybe(model, stage + ".upconv", feat, channel_first=True)
        parts = [feat]
        for layer_idx in groups[j - 1]:
            stripped = _strip_prompts(states[layer_idx - 1], _encoder_prompt_count(model, layer_idx))
            sf = _tokens_to_grid(stripped, cfg.grid, cfg.embed_dim)
            for m in range(1, j + 1):
                site = f"{stage}.skip{layer_idx}.conv{m}"
                sf = _conv_op(model, site, sf, stride=2, transposed=True)
                sf = _ssf_maybe(model, site, sf, channel_first=True)
                sf = T.gelu(sf)
            if layer_idx in zeroed_skip_layers:
                sf = sf * 0.0
            parts.append(sf)
        feat = T.concat(parts, axis=0)
        feat = _conv_op(model, stage + ".fuse", feat, pad=1)
        feat = _ssf_maybe(model, stage + ".fuse", feat, channel_first=True)
        feat = _channel_norm(model, stage + ".norm", feat)
        feat = _ssf_maybe(model, stage + ".norm", feat, channel_first=True)
        feat = T.gelu(feat)
        feat = _adapter_cnn(model, stage, feat)
    out = _conv_op(model, "decoder.head", feat)
    return _ssf_maybe(model, "decoder.head", out, channel_first=True)


def _decode_vit(model, states):
    cfg = model.config
    final = _strip_prompts(states[-1], _encoder_prompt_count(model))
    tok = T.layer_norm(final, model.t("encoder.norm.gamma"), model.t("encoder.norm.beta"))
    bank_state = model.peft.prompts.get("decoder")
    bank = model.t("decoder.prompts.bank") if bank_state and bank_state.count else None
    start = bank_state.start_layer if bank_state else 0
    for i in range(1, cfg.decoder_layers + 1):
        tok = insert_prompts(bank, tok, i, start)
        tok = _vit_block(model, f"decoder.layer{i}", tok, cfg)
    tok = _strip_prompts(tok, bank_state.count if bank_state else 0)
    tok = T.layer_norm(tok, model.t("decoder.norm.gamma"), model.t("decoder.norm.beta"))
    tok = _linear_op(model, "decoder.head", tok)
    return _unpatchify(tok, cfg.grid, cfg.patch_size)


def _check_input(cfg, x):
    s = cfg.volume_size
    if tuple(x.shape) != (1, s, s, s):
        raise DimensionError(f"expected input of shape (1, {s}, {s}, {s}), got {tuple(x.shape)}")


def forward(model, x, zeroed_skip_layers=frozenset()):
    """Reconstruct a volume; same shape out as in. Pure in (params, input, peft)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    states = encoder_states(model, x)
    if model.config.variant == VIT_VIT:
        return _decode_vit(model, states)
    return _decode_cnn(model, states, frozenset(zeroed_skip_layers))
