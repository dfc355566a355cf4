"""JSON Schemas (draft 2020-12) for the report files the CLI writes."""

_RATE = {"type": "number", "minimum": 0, "maximum": 1}
_RATES = {"type": "array", "items": _RATE}
_COUNT = {"type": "integer", "minimum": 0}

CMC = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "joint identification report",
    "type": "object",
    "required": ["kind", "ranks", "rates", "metric", "gallery_rule", "n_probes", "n_classes"],
    "properties": {
        "kind": {"const": "cmc"},
        "ranks": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "rates": _RATES,
        "metric": {"enum": ["seuclidean", "cosine"]},
        "gallery_rule": {"enum": ["first", "random"]},
        "n_probes": _COUNT,
        "n_classes": _COUNT,
        "excluded_classes": {"type": "array"},
        "provenance": {"type": "object"},
    },
}

_CATEGORY = {
    "type": "object",
    "required": ["pairs", "false_matches", "fmr"],
    "properties": {"pairs": _COUNT, "false_matches": _COUNT,
                   "fmr": {"oneOf": [_RATE, {"type": "null"}]}},
}

ROC = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "joint verification report",
    "type": "object",
    "required": ["kind", "fmr", "tmr", "thresholds", "metric", "n_genuine", "n_impostor",
                 "tmr_at_1", "tmr_at_5"],
    "properties": {
        "kind": {"const": "roc"},
        "fmr": _RATES,
        "tmr": _RATES,
        "thresholds": {"type": "array", "items": {"type": ["number", "null"]}},
        "metric": {"enum": ["seuclidean", "cosine"]},
        "n_genuine": _COUNT,
        "n_impostor": _COUNT,
        "tmr_at_1": _RATE,
        "tmr_at_5": _RATE,
        "breakdown_threshold": {"type": ["number", "null"]},
        "impostor_breakdown": {
            "oneOf": [{"type": "null"}, {
                "type": "object",
                "required": ["same_subject_diff_sensor", "diff_subject_same_sensor", "diff_both"],
                "additionalProperties": _CATEGORY,
            }],
        },
        "provenance": {"type": "object"},
    },
}

PRNU_ID = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "sensor identification report",
    "type": "object",
    "required": ["kind", "sensors", "enhance", "n_images", "accuracy", "assignments"],
    "properties": {
        "kind": {"const": "prnu_id"},
        "sensors": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "enhance": {"type": "boolean"},
        "n_images": _COUNT,
        "accuracy": {"oneOf": [_RATE, {"type": "null"}]},
        "assignments": {"type": "array", "items": {
            "type": "object",
            "required": ["sample_id", "true_sensor", "assigned_sensor", "scores"],
            "properties": {"scores": {"type": "array", "items": {
                "type": "number", "minimum": -1, "maximum": 1}}},
        }},
    },
}

SWEEP = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "embedding-size sweep",
    "type": "object",
    "required": ["kind", "rows", "selected_k", "accuracy_measure", "metric"],
    "properties": {
        "kind": {"const": "sweep"},
        "rows": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "required": ["k", "tmr_at_5", "tmr_at_1", "rank1", "n_val"],
            "properties": {"k": {"type": "integer", "minimum": 1}, "tmr_at_5": _RATE,
                           "tmr_at_1": _RATE, "rank1": _RATE, "n_val": _COUNT},
        }},
        "selected_k": {"type": "integer", "minimum": 1},
        "accuracy_measure": {"const": "tmr_at_5"},
        "metric": {"enum": ["seuclidean", "cosine"]},
    },
}

BY_KIND = {"cmc": CMC, "roc": ROC, "prnu_id": PRNU_ID, "sweep": SWEEP}
