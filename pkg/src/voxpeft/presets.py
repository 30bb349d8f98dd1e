"""Named fine-tuning plans and per-(variant, method) hyperparameter presets.

The hyperparameter tables ship one row per method and model variant
(learning rate, weight decay, optimizer, schedule, epochs). Desk-scale runs
shrink the epoch counts tenfold; everything else is unchanged. Mixed plans
that pair two different methods reuse the variant's "petite" row.
"""

from .errors import ConfigError
from .mixpeft import FULL_FT, NO_FT, MixPlan, petite_plan, single_method_plan
from .models import VIT_CNN, VIT_VIT
from .optim import COSINE_ANNEAL, WARMUP_COSINE
from .peft import METHOD_KINDS
from .training import Hyperparams

_FULL_EPOCHS = {VIT_VIT: 150, VIT_CNN: 200}
_DESK_DIVISOR = 10

# rows: method key -> (learning_rate, weight_decay, optimizer, schedule)
_HP_TABLE = {
    VIT_VIT: {
        "full_ft": (1e-3, 1e-5, "adam", COSINE_ANNEAL),
        "layernorm": (1e-3, 1e-5, "adam", COSINE_ANNEAL),
        "bitfit": (1e-3, 1e-5, "adam", COSINE_ANNEAL),
        "lora": (1e-3, 1e-5, "adam", COSINE_ANNEAL),
        "adapters": (1e-2, 1e-5, "adamw", COSINE_ANNEAL),
        "vpt": (1e-3, 1e-5, "adamw", COSINE_ANNEAL),
        "ssf": (1e-2, 1e-6, "adamw", COSINE_ANNEAL),
        "petite": (1e-3, 1e-5, "adamw", COSINE_ANNEAL),
    },
    VIT_CNN: {
        "full_ft": (1e-3, 1e-5, "adamw", WARMUP_COSINE),
        "layernorm": (1e-3, 1e-5, "adamw", WARMUP_COSINE),
        "bitfit": (1e-3, 1e-5, "adamw", WARMUP_COSINE),
        "lora": (1e-3, 1e-4, "adamw", WARMUP_COSINE),
        "adapters": (1e-2, 1e-4, "adamw", WARMUP_COSINE),
        "vpt": (1e-2, 1e-5, "adamw", WARMUP_COSINE),
        "ssf": (1e-2, 1e-5, "adamw", COSINE_ANNEAL),
        "petite": (1e-3, 1e-5, "adamw", COSINE_ANNEAL),
    },
}

PLAN_PRESET_NAMES = ("no-ft", "full-ft", "petite", "petite-vitvit", "petite-vitcnn") + METHOD_KINDS


def plan_preset(name, variant):
    """Resolve a preset name to a MixPlan for the given architecture variant."""
    key = name.strip().lower().replace("_", "-")
    if key == "no-ft":
        return MixPlan(baseline=NO_FT)
    if key == "full-ft":
        return MixPlan(baseline=FULL_FT)
    if key == "petite":
        return petite_plan(variant)
    if key in ("petite-vitvit", "petite-vitcnn"):
        wanted = VIT_VIT if key.endswith("vitvit") else VIT_CNN
        if wanted != variant:
            raise ConfigError(f"preset {name!r} targets {wanted}, but the architecture is {variant}")
        return petite_plan(variant)
    if key in METHOD_KINDS:
        return single_method_plan(variant, key)
    raise ConfigError(f"unknown plan preset {name!r}; known: {PLAN_PRESET_NAMES}")


def _method_key(plan):
    if plan.baseline != "none":
        return "full_ft"
    enc = plan.encoder_method.kind if plan.encoder_method else None
    dec = plan.decoder_method.kind if plan.decoder_method else None
    if enc and dec and enc != dec:
        return "petite"
    return enc or dec or "full_ft"


def hyperparam_preset(variant, plan, desk=True, seed=0):
    """Hyperparams for a plan per the preset tables (desk scale: epochs / 10)."""
    if variant not in _HP_TABLE:
        raise ConfigError(f"unknown variant {variant!r}")
    lr, wd, opt, schedule = _HP_TABLE[variant][_method_key(plan)]
    epochs = _FULL_EPOCHS[variant] // (_DESK_DIVISOR if desk else 1)
    return Hyperparams(
        learning_rate=lr, weight_decay=wd, optimizer=opt, schedule=schedule,
        epochs=epochs, batch_size=6, seed=seed,
    )
