"""Composition of per-scope PEFT methods, plan enumeration, and accounting.

A MixPlan names one fine-tuning configuration: independent encoder and
decoder methods, an optional bias-unfreeze across all layers, or one of the
two trivial baselines. ``enumerate_combinations`` yields every feasible
mixed pair for a variant (12 for the generator, 9 for the conv-decoder
variant). ``dry_run_count`` reproduces ``compose`` + ``count_params``
arithmetically from the config alone, without allocating weights, and the
two are cross-checked in the tests.
"""

from dataclasses import dataclass, field, asdict

from . import peft
from .errors import ConfigError, FeasibilityError
from .models import VIT_CNN, VIT_VIT
from .peft import ADAPTERS, BITFIT, LAYERNORM, LORA, SSF, VPT, PeftMethod

NO_FT = "no_ft"
FULL_FT = "full_ft"


@dataclass(frozen=True)
class MixPlan:
    encoder_method: PeftMethod = None
    decoder_method: PeftMethod = None
    bitfit_all_layers: bool = False
    baseline: str = "none"

    def __post_init__(self):
        if self.baseline not in ("none", NO_FT, FULL_FT):
            raise ConfigError(f"baseline must be none|{NO_FT}|{FULL_FT}, got {self.baseline!r}")
        if self.baseline != "none" and (self.encoder_method or self.decoder_method or self.bitfit_all_layers):
            raise ConfigError(f"baseline {self.baseline} does not combine with methods")

    def label(self):
        if self.baseline == NO_FT:
            return "no-ft"
        if self.baseline == FULL_FT:
            return "full-ft"
        parts = []
        if self.encoder_method:
            parts.append("enc:" + method_label(self.encoder_method))
        if self.decoder_method:
            parts.append("dec:" + method_label(self.decoder_method))
        if self.bitfit_all_layers:
            parts.append("bitfit")
        return "+".join(parts) if parts else "frozen"


def method_label(m):
    if m.kind == LORA:
        return f"lora(r={m.lora_rank})"
    if m.kind == ADAPTERS:
        return f"adapters(rf={m.adapter_reduction})"
    if m.kind == VPT:
        return f"vpt(p={m.vpt_num_prompts})"
    return m.kind


@dataclass
class ParamReport:
    total: int
    trainable: int
    fraction: float
    per_module: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "total": self.total,
            "trainable": self.trainable,
            "fraction": self.fraction,
            "per_module": {k: list(v) for k, v in self.per_module.items()},
        }


def count_params(model):
    """Exact totals by walking the parameter registry (injected params included)."""
    per = {}
    for p in model.params.values():
        prefix = p.path.split(".")[0]
        total, trainable = per.get(prefix, (0, 0))
        per[prefix] = (total + p.tensor.size, trainable + (p.tensor.size if p.trainable else 0))
    total = sum(t for t, _ in per.values())
    trainable = sum(tr for _, tr in per.values())
    return ParamReport(total, trainable, (trainable / total) if total else 0.0, per)


def compose(plan, model, seed=0):
    """Apply a MixPlan to a model in place; returns (model, ParamReport)."""
    if plan.baseline == NO_FT:
        peft.freeze_all(model)
        return model, count_params(model)
    if plan.baseline == FULL_FT:
        for p in model.params.values():
            p.set_trainable(True)
        return model, count_params(model)
    if model.config.variant == VIT_CNN and plan.decoder_method and plan.decoder_method.kind == VPT:
        raise FeasibilityError("plan puts vpt on a cnn decoder")
    peft.freeze_all(model)
    if plan.encoder_method:
        peft.apply(plan.encoder_method, "encoder", model, seed=seed)
    if plan.decoder_method:
        peft.apply(plan.decoder_method, "decoder", model, seed=seed + 1)
    if plan.bitfit_all_layers:
        peft.apply(PeftMethod(BITFIT), "model", model)
    return model, count_params(model)


# -- plan catalogue ------------------------------------------------------------

_MIX_KIND_ORDER = (LORA, ADAPTERS, VPT, SSF)
_VIT_VIT_DECODER_KINDS = (LORA, ADAPTERS, SSF, VPT)
_VIT_CNN_DECODER_KINDS = (LORA, ADAPTERS, SSF)


def default_method(variant, role, kind):
    """Per-variant default hyperparameters for each method and scope."""
    if kind == LORA:
        return PeftMethod(LORA, lora_rank=8 if variant == VIT_VIT else 4)
    if kind == ADAPTERS:
        if variant == VIT_VIT:
            return PeftMethod(ADAPTERS, adapter_reduction=8)
        return PeftMethod(ADAPTERS, adapter_reduction=16 if role == "encoder" else 4)
    if kind == VPT:
        return PeftMethod(VPT, vpt_num_prompts=8 if variant == VIT_VIT else 50)
    return PeftMethod(kind)


def enumerate_combinations(variant):
    """Every feasible mixed encoder/decoder pair (distinct kinds, bitfit on)."""
    if variant not in (VIT_VIT, VIT_CNN):
        raise ConfigError(f"unknown variant {variant!r}")
    decoder_kinds = _VIT_VIT_DECODER_KINDS if variant == VIT_VIT else _VIT_CNN_DECODER_KINDS
    plans = []
    for enc_kind in _MIX_KIND_ORDER:
        for dec_kind in decoder_kinds:
            if dec_kind == enc_kind:
                continue
            plans.append(
                MixPlan(
                    encoder_method=default_method(variant, "encoder", enc_kind),
                    decoder_method=default_method(variant, "decoder", dec_kind),
                    bitfit_all_layers=True,
                )
            )
    return plans


def petite_plan(variant):
    """The best mixed recipe per variant, with bias tuning across all layers."""
    if variant == VIT_VIT:
        return MixPlan(
            encoder_method=default_method(variant, "encoder", VPT),
            decoder_method=default_method(variant, "decoder", LORA),
            bitfit_all_layers=True,
        )
    return MixPlan(
        encoder_method=default_method(variant, "encoder", LORA),
        decoder_method=default_method(variant, "decoder", SSF),
        bitfit_all_layers=True,
    )


def single_method_plan(variant, kind):
    """One method applied to the whole model (vpt stays encoder-only)."""
    enc = default_method(variant, "encoder", kind) if kind in (LORA, ADAPTERS, VPT, SSF) else PeftMethod(kind)
    if kind == VPT:
        return MixPlan(encoder_method=enc)
    dec = default_method(variant, "decoder", kind) if kind in (LORA, ADAPTERS, SSF) else PeftMethod(kind)
    return MixPlan(encoder_method=enc, decoder_method=dec)


# -- dry-run accounting (closed-form, no weight allocation) ---------------------

def _vit_block_weights(cfg):
    d = cfg.embed_dim
    h = cfg.mlp_ratio * d
    n = 4 * (d * d + d) + (h * d + h) + (d * h + d) + 4 * d  # attn + mlp + two norms
    if cfg.conv_token_mixing:
        n += d * 27 + d
    return n


def _vit_block_biases(cfg):
    d = cfg.embed_dim
    h = cfg.mlp_ratio * d
    n = 4 * d + h + d  # attn projections + fc1 + fc2
    if cfg.conv_token_mixing:
        n += d
    return n


def _encoder_counts(cfg):
    d, p = cfg.embed_dim, cfg.patch_size
    n_layers = cfg.encoder_layers
    total = (d * p ** 3 + d) + cfg.tokens * d + n_layers * _vit_block_weights(cfg) + 2 * d
    biases = d + n_layers * _vit_block_biases(cfg)
    betas = n_layers * 2 * d + d
    gammas = betas
    return {"total": total, "bias": biases, "beta": betas, "gamma": gammas}


def _cnn_stage_convs(cfg):
    """(path-ish id, c_out, c_in, kk, stage) for every decoder conv incl. head."""
    convs = []
    groups = cfg.skip_groups()
    for j in range(1, cfg.decoder_stages + 1):
        c_in, c_out = cfg.stage_channels(j - 1), cfg.stage_channels(j)
        convs.append(("upconv", c_out, c_in, 2, j))
        for layer_idx in groups[j - 1]:
            for m in range(1, j + 1):
                convs.append((f"skip{layer_idx}.conv{m}", cfg.stage_channels(m), cfg.stage_channels(m - 1), 2, j))
        convs.append(("fuse", c_out, c_out * (1 + len(groups[j - 1])), 3, j))
    convs.append(("head", 1, cfg.stage_channels(cfg.decoder_stages), 1, 0))
    return convs


def _decoder_counts(cfg):
    d, p = cfg.embed_dim, cfg.patch_size
    if cfg.variant == VIT_VIT:
        total = cfg.decoder_layers * _vit_block_weights(cfg) + 2 * d + (p ** 3 * d + p ** 3)
        biases = cfg.decoder_layers * _vit_block_biases(cfg) + p ** 3
        betas = cfg.decoder_layers * 2 * d + d
        return {"total": total, "bias": biases, "beta": betas, "gamma": betas}
    total = biases = 0
    for _, c_out, c_in, kk, _ in _cnn_stage_convs(cfg):
        total += c_out * c_in * kk ** 3 + c_out
        biases += c_out
    norm_c = sum(cfg.stage_channels(j) for j in range(1, cfg.decoder_stages + 1))
    total += 2 * norm_c
    return {"total": total, "bias": biases, "beta": norm_c, "gamma": norm_c}


def _additive_count(cfg, scope, method):
    if method is None or method.kind in (LAYERNORM, BITFIT):
        return 0
    d = cfg.embed_dim
    vit_side = scope == "encoder" or cfg.variant == VIT_VIT
    n_layers = cfg.peft_encoder_layers() if scope == "encoder" else cfg.peft_decoder_layers()
    if method.kind == VPT:
        return method.vpt_num_prompts * d
    if method.kind == LORA:
        r = method.lora_rank
        if vit_side:
            return n_layers * len(method.lora_targets) * 2 * r * d
        count = 0
        for _, c_out, c_in, kk, stage in _cnn_stage_convs(cfg):
            if stage and stage > n_layers:
                continue
            d_in = c_in * kk ** 3
            if min(c_out, d_in) >= r:
                count += r * d_in + c_out * r
        return count
    if method.kind == ADAPTERS:
        rf = method.adapter_reduction
        if vit_side:
            h = d // rf
            return n_layers * (h * d + h + d * h + d)
        count = 0
        for j in range(1, n_layers + 1):
            c = cfg.stage_channels(j)
            h = max(1, c // rf)
            count += h * c + h + c * h + c
        return count
    if method.kind == SSF:
        if vit_side:
            per_block = 2 * ("layernorm" in method.ssf_sites) + ("mhsa" in method.ssf_sites) + ("mlp" in method.ssf_sites)
            return n_layers * per_block * 2 * d
        count = 0
        for _, c_out, _, _, stage in _cnn_stage_convs(cfg):
            if stage and stage > n_layers:
                continue
            count += 2 * c_out
        count += sum(2 * cfg.stage_channels(j) for j in range(1, n_layers + 1))
        return count
    raise ConfigError(f"unknown method kind {method.kind!r}")


def dry_run_count(config, plan):
    """ParamReport a composed model of this config would produce, from shapes alone."""
    scopes = {"encoder": _encoder_counts(config), "decoder": _decoder_counts(config)}
    per_module = {}
    for scope, counts in scopes.items():
        if plan.baseline == FULL_FT:
            per_module[scope] = (counts["total"], counts["total"])
            continue
        if plan.baseline == NO_FT:
            per_module[scope] = (counts["total"], 0)
            continue
        method = plan.encoder_method if scope == "encoder" else plan.decoder_method
        kind = method.kind if method else None
        inc_gamma = kind == LAYERNORM
        inc_beta = kind in (LAYERNORM, BITFIT) or plan.bitfit_all_layers
        inc_bias = kind == BITFIT or plan.bitfit_all_layers
        added = _additive_count(config, scope, method)
        trainable = added
        trainable += counts["gamma"] if inc_gamma else 0
        trainable += counts["beta"] if inc_beta else 0
        trainable += counts["bias"] if inc_bias else 0
        per_module[scope] = (counts["total"] + added, trainable)
    total = sum(t for t, _ in per_module.values())
    trainable = sum(tr for _, tr in per_module.values())
    return ParamReport(total, trainable, (trainable / total) if total else 0.0, per_module)


# -- plan (de)serialization -----------------------------------------------------

def plan_to_dict(plan):
    return {
        "encoder_method": asdict(plan.encoder_method) if plan.encoder_method else None,
        "decoder_method": asdict(plan.decoder_method) if plan.decoder_method else None,
        "bitfit_all_layers": plan.bitfit_all_layers,
        "baseline": plan.baseline,
    }


def plan_from_dict(d):
    def method(m):
        if m is None:
            return None
        m = dict(m)
        m["lora_targets"] = tuple(m.get("lora_targets", ("q", "k")))
        m["ssf_sites"] = tuple(m.get("ssf_sites", ("layernorm", "mhsa", "mlp")))
        return PeftMethod(**m)

    return MixPlan(
        encoder_method=method(d.get("encoder_method")),
        decoder_method=method(d.get("decoder_method")),
        bitfit_all_layers=bool(d.get("bitfit_all_layers", False)),
        baseline=d.get("baseline", "none"),
    )
