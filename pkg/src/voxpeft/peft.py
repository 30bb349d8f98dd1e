"""The six parameter-efficient fine-tuning methods.

Selective methods (layernorm, bitfit) only flip ``trainable`` on existing
parameters. Additive methods (lora, adapters, ssf, vpt) inject new trainable
parameters and alter the forward pass through the model's PeftState; at
injection every additive method is an exact identity (LoRA B, adapter
up-projection, and SSF shifts start at zero; SSF scales start at one).

On the generator variant, additive injection is restricted to the first
encoder/decoder layers (see ArchConfig.peft_*_layers); selective methods
always see the whole selector scope.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, FeasibilityError, IdempotencyError
from .models import (
    VIT_CNN,
    VIT_VIT,
    AdapterSite,
    LoraSite,
    PromptState,
    SsfSite,
    Tensor,
    insert_prompts,
    trunc_normal,
)

LAYERNORM, BITFIT, LORA, ADAPTERS, SSF, VPT = "layernorm", "bitfit", "lora", "adapters", "ssf", "vpt"
SELECTIVE_KINDS = (LAYERNORM, BITFIT)
ADDITIVE_KINDS = (LORA, ADAPTERS, SSF, VPT)
METHOD_KINDS = SELECTIVE_KINDS + ADDITIVE_KINDS

_LORA_RANKS = (1, 4, 8, 16)
_ADAPTER_REDUCTIONS = (1, 4, 8, 16, 32)
_BIAS_KINDS = ("bias", "beta")  # bitfit's notion of a bias term
_CONV_KINDS = ("conv", "conv_transpose", "head_conv")


@dataclass(frozen=True)
class PeftMethod:
    """Declarative description of one method and its hyperparameters."""

    kind: str
    lora_rank: int = 4
    lora_alpha: float = 0.0  # 0 means "equal to rank" (scaling 1)
    lora_targets: tuple = ("q", "k")
    adapter_reduction: int = 8
    vpt_num_prompts: int = 8
    vpt_start_layer: int = 2
    ssf_sites: tuple = ("layernorm", "mhsa", "mlp")

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}; known: {METHOD_KINDS}")
        if self.kind == LORA:
            if self.lora_rank not in _LORA_RANKS:
                raise ConfigError(f"lora_rank must be one of {_LORA_RANKS}, got {self.lora_rank}")
            bad = set(self.lora_targets) - {"q", "k", "v", "out"}
            if bad or not self.lora_targets:
                raise ConfigError(f"lora_targets must be a non-empty subset of q/k/v/out, got {self.lora_targets}")
        if self.kind == ADAPTERS and self.adapter_reduction not in _ADAPTER_REDUCTIONS:
            raise ConfigError(f"adapter_reduction must be one of {_ADAPTER_REDUCTIONS}, got {self.adapter_reduction}")
        if self.kind == VPT:
            # vpt_num_prompts == 0 is an allowed degenerate bank (exact no-op).
            if self.vpt_num_prompts < 0:
                raise ConfigError("vpt_num_prompts must be >= 0")
            if self.vpt_start_layer < 2:
                raise ConfigError("vpt_start_layer must be >= 2 (never the first layer)")
        if self.kind == SSF:
            bad = set(self.ssf_sites) - {"layernorm", "mhsa", "mlp"}
            if bad or not self.ssf_sites:
                raise ConfigError(f"ssf_sites must be a non-empty subset of layernorm/mhsa/mlp, got {self.ssf_sites}")

    @property
    def alpha(self):
        return self.lora_alpha if self.lora_alpha else float(self.lora_rank)


@dataclass
class LoraPair:
    """Low-rank factors beside a frozen weight; update = b @ a * (alpha/rank)."""

    a: Tensor
    b: Tensor
    rank: int
    alpha: float

    @property
    def scaling(self):
        return self.alpha / self.rank


def lora_forward(x, w, bias, pair):
    """x @ w.T + bias plus the scaled low-rank path (x @ a.T) @ b.T."""
    d_out, d_in = w.shape
    if pair.rank > min(d_in, d_out):
        raise ConfigError(f"lora rank {pair.rank} exceeds min{d_out, d_in}")
    y = T.matmul(x, T.transpose(w, (1, 0)))
    y = y + T.matmul(T.matmul(x, T.transpose(pair.a, (1, 0))), T.transpose(pair.b, (1, 0))) * pair.scaling
    return y + bias


def freeze_all(model):
    """Flip every parameter to trainable=False (idempotent)."""
    for p in model.params.values():
        p.set_trainable(False)
    return model


def _scopes(selector):
    if selector == "model":
        return ("encoder", "decoder")
    if selector in ("encoder", "decoder"):
        return (selector,)
    raise ConfigError(f"selector must be encoder|decoder|model, got {selector!r}")


def bias_paths(model, scopes=("encoder", "decoder")):
    return [p.path for p in model.params.values() if p.kind in _BIAS_KINDS and p.path.split(".")[0] in scopes]


def norm_param_paths(model, scopes):
    paths = []
    for spec in model.layout:
        if spec.kind in ("norm", "channel_norm") and spec.scope in scopes:
            paths += [spec.path + ".gamma", spec.path + ".beta"]
    return paths


def _vit_layer_range(model, scope):
    cfg = model.config
    if scope == "encoder":
        return range(1, cfg.peft_encoder_layers() + 1)
    if cfg.variant != VIT_VIT:
        return range(0)
    return range(1, cfg.peft_decoder_layers() + 1)


def _cnn_conv_blocks(model):
    """Injectable conv-like blocks of the CNN decoder (head included)."""
    cfg = model.config
    limit = cfg.peft_decoder_layers()
    return [
        spec
        for spec in model.layout
        if spec.scope == "decoder" and spec.kind in _CONV_KINDS and (spec.layer == 0 or spec.layer <= limit)
    ]


def _apply_layernorm(model, scopes):
    changed = norm_param_paths(model, scopes)
    if not changed:
        raise FeasibilityError(f"no normalization layers under {scopes}")
    for path in changed:
        model.params[path].set_trainable(True)
    return changed


def _apply_bitfit(model, scopes):
    changed = bias_paths(model, scopes)
    for path in changed:
        model.params[path].set_trainable(True)
    return changed


def _apply_lora(model, scopes, method, rng):
    cfg = model.config
    created = []
    for scope in scopes:
        sites = []
        if scope == "encoder" or cfg.variant == VIT_VIT:
            d = cfg.embed_dim
            if method.lora_rank > d:
                raise ConfigError(f"lora rank {method.lora_rank} exceeds projection width {d}")
            for i in _vit_layer_range(model, scope):
                for target in method.lora_targets:
                    sites.append((f"{scope}.layer{i}.attn.{target}", "linear", d, d))
        else:
            for spec in _cnn_conv_blocks(model):
                c_out, c_in, kk = spec.dims
                d_in = c_in * kk ** 3
                if min(c_out, d_in) >= method.lora_rank:
                    sites.append((spec.path, spec.kind if spec.kind != "head_conv" else "conv", c_out, d_in))
        if not sites:
            raise FeasibilityError(f"lora rank {method.lora_rank} fits no block in scope {scope!r}")
        for site, target, d_out, d_in in sites:
            model.add_param(site + ".lora_a", trunc_normal(rng, (method.lora_rank, d_in)), "lora_a")
            model.add_param(site + ".lora_b", np.zeros((d_out, method.lora_rank)), "lora_b")
            model.peft.lora[site] = LoraSite(site, method.lora_rank, method.alpha, target)
            created += [site + ".lora_a", site + ".lora_b"]
    return created


def _apply_adapters(model, scopes, method, rng):
    cfg = model.config
    created = []
    for scope in scopes:
        if scope == "encoder" or cfg.variant == VIT_VIT:
            d = cfg.embed_dim
            hidden = d // method.adapter_reduction
            if hidden < 1:
                raise ConfigError(f"adapter_reduction {method.adapter_reduction} leaves no bottleneck at width {d}")
            for i in _vit_layer_range(model, scope):
                block = f"{scope}.layer{i}"
                model.add_param(block + ".adapter.down.weight", trunc_normal(rng, (hidden, d)), "weight")
                model.add_param(block + ".adapter.down.bias", np.zeros(hidden), "bias")
                model.add_param(block + ".adapter.up.weight", np.zeros((d, hidden)), "weight")
                model.add_param(block + ".adapter.up.bias", np.zeros(d), "bias")
                model.peft.adapters[block] = AdapterSite(block, hidden, conv=False)
                created += [block + f".adapter.{n}" for n in ("down.weight", "down.bias", "up.weight", "up.bias")]
        else:
            for j in range(1, cfg.peft_decoder_layers() + 1):
                stage = f"decoder.stage{j}"
                c = cfg.stage_channels(j)
                hidden = max(1, c // method.adapter_reduction)
                model.add_param(stage + ".adapter.down.weight", trunc_normal(rng, (hidden, c, 1, 1, 1)), "weight")
                model.add_param(stage + ".adapter.down.bias", np.zeros(hidden), "bias")
                model.add_param(stage + ".adapter.up.weight", np.zeros((c, hidden, 1, 1, 1)), "weight")
                model.add_param(stage + ".adapter.up.bias", np.zeros(c), "bias")
                model.peft.adapters[stage] = AdapterSite(stage, hidden, conv=True)
                created += [stage + f".adapter.{n}" for n in ("down.weight", "down.bias", "up.weight", "up.bias")]
    return created


def _ssf_vit_sites(model, scope, families):
    d = model.config.embed_dim
    sites = []
    for i in _vit_layer_range(model, scope):
        block = f"{scope}.layer{i}"
        if "layernorm" in families:
            sites.append(SsfSite(block + ".norm1", d, "norm"))
        if "mhsa" in families:
            sites.append(SsfSite(block + ".attn", d, "linear"))
        if "layernorm" in families:
            sites.append(SsfSite(block + ".norm2", d, "norm"))
        if "mlp" in families:
            sites.append(SsfSite(block + ".mlp", d, "linear"))
    return sites


def _ssf_cnn_sites(model):
    """After every conv and every per-channel norm in the decoder."""
    sites = []
    cfg = model.config
    limit = cfg.peft_decoder_layers()
    for spec in model.layout:
        if spec.scope != "decoder" or (spec.layer and spec.layer > limit):
            continue
        if spec.kind in _CONV_KINDS:
            kind = "conv_transpose" if spec.kind == "conv_transpose" else "conv"
            sites.append(SsfSite(spec.path, spec.dims[0], kind))
        elif spec.kind == "channel_norm":
            sites.append(SsfSite(spec.path, spec.dims[0], "channel_norm"))
    return sites


def _apply_ssf(model, scopes, method, rng):
    created = []
    for scope in scopes:
        if scope == "encoder" or model.config.variant == VIT_VIT:
            sites = _ssf_vit_sites(model, scope, method.ssf_sites)
        else:
            sites = _ssf_cnn_sites(model)
        if not sites:
            raise FeasibilityError(f"no ssf sites under scope {scope!r}")
        for site in sites:
            model.add_param(site.site + ".ssf.gamma", np.ones(site.dim), "ssf_gamma")
            model.add_param(site.site + ".ssf.beta", np.zeros(site.dim), "ssf_beta")
            model.peft.ssf[site.site] = site
            created += [site.site + ".ssf.gamma", site.site + ".ssf.beta"]
    return created


def _apply_vpt(model, scopes, method, rng):
    cfg = model.config
    created = []
    for scope in scopes:
        if scope == "decoder":
            if cfg.variant == VIT_CNN:
                raise FeasibilityError("vpt cannot target a cnn decoder (no token sequence)")
            n_layers = cfg.decoder_layers
        else:
            n_layers = cfg.encoder_layers
        if n_layers < method.vpt_start_layer:
            raise ConfigError(
                f"vpt_start_layer {method.vpt_start_layer} exceeds the {n_layers} layers of scope {scope!r}"
            )
        path = f"{scope}.prompts.bank"
        model.add_param(path, trunc_normal(rng, (method.vpt_num_prompts, cfg.embed_dim)), "prompt")
        model.peft.prompts[scope] = PromptState(scope, method.vpt_num_prompts, method.vpt_start_layer)
        created.append(path)
    return created


def apply(method, selector, model, seed=0):
    """Attach one method to the selector scope; returns (model, touched paths).

    Selective methods flip trainable flags only; additive methods create new
    trainable parameters and register them in the model's PeftState.
    """
    scopes = _scopes(selector)
    rng = np.random.default_rng(seed)
    if method.kind == LAYERNORM:
        paths = _apply_layernorm(model, scopes)
    elif method.kind == BITFIT:
        paths = _apply_bitfit(model, scopes)
    elif method.kind == LORA:
        paths = _apply_lora(model, scopes, method, rng)
    elif method.kind == ADAPTERS:
        paths = _apply_adapters(model, scopes, method, rng)
    elif method.kind == SSF:
        paths = _apply_ssf(model, scopes, method, rng)
    else:
        paths = _apply_vpt(model, scopes, method, rng)
    return model, sorted(paths)


# -- inference-time reparameterization ----------------------------------------

def merge_lora(model):
    """Fold every LoRA update into its frozen weight and drop the factors."""
    if model.peft.lora_merged:
        raise IdempotencyError("lora factors were already merged into the weights")
    if not model.peft.lora:
        raise ConfigError("no lora sites to merge")
    for site, ls in model.peft.lora.items():
        a = model.params[site + ".lora_a"].tensor.data
        b = model.params[site + ".lora_b"].tensor.data
        delta = (b @ a) * (ls.alpha / ls.rank)
        w = model.params[site + ".weight"].tensor
        if ls.target == "conv_transpose":
            ci, co, kk = w.shape[0], w.shape[1], w.shape[2]
            delta = delta.reshape(co, ci, kk, kk, kk).transpose(1, 0, 2, 3, 4)
        else:
            delta = delta.reshape(w.shape)
        w.data += delta
        model.remove_param(site + ".lora_a")
        model.remove_param(site + ".lora_b")
    model.peft.lora.clear()
    model.peft.lora_merged = True
    return model


def fold_ssf(model):
    """Absorb every SSF scale/shift into the affine op it follows.

    Returns the list of sites that could not be folded and stay runtime
    (none arise with the built-in site inventory, where every site follows
    a norm, linear, or conv).
    """
    if model.peft.ssf_folded:
        raise IdempotencyError("ssf sites were already folded")
    if not model.peft.ssf:
        raise ConfigError("no ssf sites to fold")
    retained = []
    for site, ss in list(model.peft.ssf.items()):
        gamma = model.params[site + ".ssf.gamma"].tensor.data
        beta = model.params[site + ".ssf.beta"].tensor.data
        if ss.absorb in ("norm", "channel_norm"):
            g = model.params[site + ".gamma"].tensor
            b = model.params[site + ".beta"].tensor
            b.data = b.data * gamma + beta
            g.data = g.data * gamma
        elif ss.absorb == "linear":
            target = site + (".out" if site.endswith(".attn") else ".fc2")
            w = model.params[target + ".weight"].tensor
            b = model.params[target + ".bias"].tensor
            w.data = w.data * gamma[:, None]
            b.data = b.data * gamma + beta
        elif ss.absorb == "conv":
            w = model.params[site + ".weight"].tensor
            b = model.params[site + ".bias"].tensor
            w.data = w.data * gamma[:, None, None, None, None]
            b.data = b.data * gamma + beta
        elif ss.absorb == "conv_transpose":
            w = model.params[site + ".weight"].tensor
            b = model.params[site + ".bias"].tensor
            w.data = w.data * gamma[None, :, None, None, None]
            b.data = b.data * gamma + beta
        else:
            retained.append(site)
            continue
        model.remove_param(site + ".ssf.gamma")
        model.remove_param(site + ".ssf.beta")
        del model.peft.ssf[site]
    model.peft.ssf_folded = True
    return retained


__all__ = [
    "ADAPTERS",
    "ADDITIVE_KINDS",
    "BITFIT",
    "LAYERNORM",
    "LORA",
    "METHOD_KINDS",
    "SELECTIVE_KINDS",
    "SSF",
    "VPT",
    "LoraPair",
    "PeftMethod",
    "apply",
    "bias_paths",
    "fold_ssf",
    "freeze_all",
    "insert_prompts",
    "lora_forward",
    "merge_lora",
    "norm_param_paths",
]
