use serde_json::{json, Value};

fn item() -> Value {
    json!({
        "type": "object",
        "required": ["index", "task_id", "stimulus"],
        "properties": {
            "index": {"type": "integer", "minimum": 0},
            "task_id": {"type": "string", "enum": [
                "stroop", "countermanding", "simple_span", "complex_span",
                "cancellation", "pasat", "running_span2", "running_span3"
            ]},
            "stimulus": {"oneOf": [{"const": "unit"}, {"type": "integer", "minimum": 0}]}
        }
    })
}

/// JSON description of every endpoint and its payloads.
pub fn api_schema() -> Value {
    json!({
        "version": 1,
        "endpoints": [
            {"method": "GET", "path": "/healthz"},
            {"method": "GET", "path": "/schema"},
            {"method": "GET", "path": "/model/info", "errors": {"503": "no model loaded"}},
            {
                "method": "POST", "path": "/sessions",
                "request": {"$ref": "#/definitions/CreateSessionRequest"},
                "response": {"$ref": "#/definitions/CreateSessionResponse"},
                "errors": {"422": "invalid budget", "503": "no model loaded"}
            },
            {
                "method": "POST", "path": "/sessions/{id}/response",
                "request": {"$ref": "#/definitions/SubmitRequest"},
                "response": {"$ref": "#/definitions/SubmitResponse"},
                "errors": {
                    "404": "unknown session",
                    "409": "item_echo is stale, duplicated or the session is done",
                    "422": "outcome does not fit the task family"
                }
            },
            {
                "method": "GET", "path": "/sessions/{id}/estimates",
                "response": {"$ref": "#/definitions/EstimatesResponse"},
                "errors": {"404": "unknown session"}
            }
        ],
        "definitions": {
            "PendingItem": item(),
            "CreateSessionRequest": {
                "type": "object",
                "properties": {
                    "participant_label": {"type": "string"},
                    "budget": {"type": "integer", "minimum": 26},
                    "seed": {"type": "integer", "minimum": 0}
                }
            },
            "CreateSessionResponse": {
                "type": "object",
                "required": ["session_id", "seed", "budget", "phase", "first_item", "items_remaining"],
                "properties": {
                    "session_id": {"type": "string"},
                    "seed": {"type": "integer"},
                    "budget": {"type": "integer"},
                    "phase": {"enum": ["primer", "active", "done"]},
                    "first_item": {"$ref": "#/definitions/PendingItem"},
                    "items_remaining": {"type": "integer"}
                }
            },
            "SubmitRequest": {
                "type": "object",
                "required": ["item_echo", "outcome"],
                "properties": {
                    "item_echo": {"$ref": "#/definitions/PendingItem"},
                    "outcome": {
                        "description": "response time in ms for timing tasks, true/false for binary tasks",
                        "oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"type": "boolean"}]
                    },
                    "client_latency_ms": {"type": "number"}
                }
            },
            "SubmitResponse": {
                "type": "object",
                "required": ["accepted_index", "done", "phase", "next_item", "items_remaining", "estimates_summary"],
                "properties": {
                    "accepted_index": {"type": "integer"},
                    "done": {"type": "boolean"},
                    "phase": {"enum": ["primer", "active", "done"]},
                    "next_item": {"oneOf": [{"$ref": "#/definitions/PendingItem"}, {"type": "null"}]},
                    "items_remaining": {"type": "integer"},
                    "estimates_summary": {"type": "object"}
                }
            },
            "EstimatesResponse": {
                "type": "object",
                "required": ["session_id", "phase", "theta", "parameters", "q", "mi_snapshot", "pending_item"],
                "properties": {
                    "session_id": {"type": "string"},
                    "participant_label": {"type": "string"},
                    "phase": {"enum": ["primer", "active", "done"]},
                    "budget": {"type": "integer"},
                    "seed": {"type": "integer"},
                    "items_delivered": {"type": "integer"},
                    "items_remaining": {"type": "integer"},
                    "pending_item": {"oneOf": [{"$ref": "#/definitions/PendingItem"}, {"type": "null"}]},
                    "theta": {"type": "array", "items": {"type": "number"}, "minItems": 12, "maxItems": 12},
                    "parameters": {"type": "object"},
                    "q": {"type": "object", "properties": {
                        "m": {"type": "array", "items": {"type": "number"}},
                        "log_s": {"type": "array", "items": {"type": "number"}}
                    }},
                    "mi_snapshot": {"type": "object", "additionalProperties": {"type": "number"}},
                    "created_ms": {"type": "integer"},
                    "updated_ms": {"type": "integer"}
                }
            }
        },
        "errors": {
            "type": "object",
            "required": ["error", "message"],
            "properties": {"error": {"type": "string"}, "message": {"type": "string"}}
        }
    })
}
