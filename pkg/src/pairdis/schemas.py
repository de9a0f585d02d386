"""JSON schemas for CLI configs; validation errors carry exact key paths."""

import jsonschema

from .losses import DISTANCE_KINDS


class ConfigValidationError(ValueError):
    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.reason = message


_LOSS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lambda1": {"type": "number", "minimum": 0},
        "lambda2": {"type": "number", "minimum": 0},
        "sparsity_s": {"type": "number", "exclusiveMinimum": 0,
                       "exclusiveMaximum": 1},
        "distance_kind": {"enum": list(DISTANCE_KINDS)},
        "kl_weight": {"type": "number", "minimum": 0, "maximum": 1},
        "m_clamp_eps": {"type": "number", "exclusiveMinimum": 0},
        "sigma_floor": {"type": "number", "exclusiveMinimum": 0},
        "invmax_floor": {"type": "number", "exclusiveMinimum": 0},
        "cosine_floor": {"type": "number", "exclusiveMinimum": 0},
        "mmd_bandwidth_sq": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "invmax_on": {"type": "boolean"},
    },
}

_MODEL = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "image_hw": {"type": "integer", "minimum": 4},
        "conv_channels": {"type": "array", "items": {"type": "integer", "minimum": 1},
                          "minItems": 3, "maxItems": 3},
        "kernel": {"type": "integer", "minimum": 1},
        "latent_common": {"type": "integer", "minimum": 1},
        "latent_specific": {"type": "integer", "minimum": 1},
        "sigma_floor": {"type": "number", "exclusiveMinimum": 0},
        "dtype": {"enum": ["float32", "float64"]},
        "in_channels": {"type": "integer", "minimum": 1},
    },
}

_TRAIN = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "loss": _LOSS,
        "seed": {"type": "integer", "minimum": 0},
        "encoder_lr_scale_finetune": {"type": "number", "minimum": 0, "maximum": 1},
        "anneal_epochs": {"type": ["integer", "null"], "minimum": 0},
        "kl_anneal": {"type": "boolean"},
    },
}

_PAIR_COUNTS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["n_neg", "n_pos"],
    "properties": {
        "n_neg": {"type": "integer", "minimum": 0},
        "n_pos": {"type": "integer", "minimum": 0},
    },
}

SCHEMAS = {
    "gen-data": {
        "type": "object",
        "additionalProperties": False,
        "required": ["variant", "train", "test"],
        "properties": {
            "hw": {"type": "integer", "minimum": 4},
            "n_images": {"type": "integer", "minimum": 10},
            "variant": {"enum": ["R", "B", "RB", "none"]},
            "seed": {"type": "integer", "minimum": 0},
            "test_fraction": {"type": "number", "exclusiveMinimum": 0,
                              "exclusiveMaximum": 1},
            "train": _PAIR_COUNTS,
            "test": _PAIR_COUNTS,
            "mnist": {
                "type": "object",
                "additionalProperties": False,
                "required": ["images", "labels"],
                "properties": {"images": {"type": "string"},
                               "labels": {"type": "string"}},
            },
        },
    },
    "pretrain": {
        "type": "object",
        "additionalProperties": False,
        "required": ["data"],
        "properties": {
            "data": {"type": "string"},
            "model": _MODEL,
            "train": _TRAIN,
            "select_negatives": {"type": "boolean"},
        },
    },
    "finetune": {
        "type": "object",
        "additionalProperties": False,
        "required": ["data", "checkpoint"],
        "properties": {
            "data": {"type": "string"},
            "checkpoint": {"type": "string"},
            "model": _MODEL,
            "train": _TRAIN,
        },
    },
    "eval": {
        "type": "object",
        "additionalProperties": False,
        "required": ["data", "checkpoint"],
        "properties": {
            "data": {"type": "string"},
            "checkpoint": {"type": "string"},
            "model": _MODEL,
            "threshold": {"type": "number", "minimum": 0, "maximum": 1},
        },
    },
    "detect-unsup": {
        "type": "object",
        "additionalProperties": False,
        "required": ["data", "checkpoint"],
        "properties": {
            "data": {"type": "string"},
            "checkpoint": {"type": "string"},
            "model": _MODEL,
            "method": {"enum": ["kmeans", "vae_rec"]},
        },
    },
    "ablate": {
        "type": "object",
        "additionalProperties": False,
        "required": ["axis", "grid", "data"],
        "properties": {
            "axis": {"enum": ["distance_kind", "sparsity_s", "invmax_on"]},
            "grid": {"type": "array", "minItems": 1},
            "data": {
                "type": "object",
                "additionalProperties": False,
                "required": ["negatives", "labeled", "test"],
                "properties": {"negatives": {"type": "string"},
                               "labeled": {"type": "string"},
                               "test": {"type": "string"}},
            },
            "model": _MODEL,
            "pretrain": _TRAIN,
            "finetune": _TRAIN,
            "repeats": {"type": "integer", "minimum": 1},
        },
    },
    "interpolate": {
        "type": "object",
        "additionalProperties": False,
        "required": ["data", "checkpoint"],
        "properties": {
            "data": {"type": "string"},
            "checkpoint": {"type": "string"},
            "model": _MODEL,
            "which": {"enum": ["common", "specific"]},
            "steps": {"type": "integer", "minimum": 2},
            "pair_index": {"type": "integer", "minimum": 0},
        },
    },
    "project": {
        "type": "object",
        "additionalProperties": False,
        "required": ["data", "checkpoint"],
        "properties": {
            "data": {"type": "string"},
            "checkpoint": {"type": "string"},
            "model": _MODEL,
            "max_images": {"type": "integer", "minimum": 3},
        },
    },
    "report": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "run_dir": {"type": "string"},
        },
    },
}


def _json_path(error) -> str:
    parts = ["$"]
    for p in error.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts)


def validate_config(config: dict, command: str) -> None:
    """Check a config dict against its command schema; raise with the key path."""
    if command not in SCHEMAS:
        raise ConfigValidationError(f"no schema for command {command!r}")
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(config),
                    key=lambda e: (len(list(e.absolute_path)), str(e.absolute_path)))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigValidationError(err.message, _json_path(err))