"""Workload files: JSON arrays of inference requests."""

from __future__ import annotations

import json
import os

from .errors import WorkloadError
from .graph import ModelGraph, parse_graph, validate_graph
from .models import build_synthetic_model
from .scheduler import InferenceRequest


def load_model_file(path: str) -> ModelGraph:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise WorkloadError(f"model file not found: {path}") from None
    g = parse_graph(text)
    problems = validate_graph(g)
    if problems:
        lines = "; ".join(v.message for v in problems)
        raise WorkloadError(f"model '{path}' failed validation: {lines}")
    return g


def load_workload(path: str, model_paths: list[str] | None = None
                  ) -> list[InferenceRequest]:
    """Parse a workload file, resolving model files and synthetic specs.

    model_file entries resolve against the workload's directory, then
    against the --model registrations (matched by basename).
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise WorkloadError(f"workload file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise WorkloadError(f"workload {path} is not valid JSON: {e.msg}") from None
    if not isinstance(doc, list):
        raise WorkloadError("workload must be a JSON array of requests")

    registry = {os.path.basename(p): p for p in model_paths or []}
    base_dir = os.path.dirname(os.path.abspath(path))
    out: list[InferenceRequest] = []
    model_cache: dict[str, ModelGraph] = {}
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict):
            raise WorkloadError(f"workload entry {i} is not an object")
        rid = str(entry.get("request_id", f"req{i}"))
        if "model" in entry:
            spec = dict(entry["model"])
            kind = spec.pop("kind", None)
            if kind is None:
                raise WorkloadError(f"request '{rid}': synthetic model needs 'kind'")
            model = build_synthetic_model(kind, **spec)
        elif "model_file" in entry:
            mf = entry["model_file"]
            path_try = mf if os.path.isabs(mf) else os.path.join(base_dir, mf)
            if not os.path.exists(path_try):
                path_try = registry.get(os.path.basename(mf), path_try)
            if path_try not in model_cache:
                model_cache[path_try] = load_model_file(path_try)
            model = model_cache[path_try]
        else:
            raise WorkloadError(f"request '{rid}': needs 'model_file' or 'model'")
        req = InferenceRequest(
            request_id=rid,
            model=model,
            batch=int(entry.get("batch", 1)),
            arrival=int(entry.get("arrival_cycle", 0)),
            kind=str(entry.get("kind", "static")),
            prompt_len=int(entry.get("prompt_len", 0)),
            gen_tokens=int(entry.get("gen_tokens", 0)),
            background=bool(entry.get("background", False)),
            bindings={str(k): int(v)
                      for k, v in entry.get("bindings", {}).items()},
        )
        req.validate()
        out.append(req)
    return out
