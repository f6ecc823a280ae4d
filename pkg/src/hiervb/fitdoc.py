"""Fit-document serialization: a versioned, diffable JSON snapshot of a fit.

The document round-trips the variational state losslessly (floats are
written with shortest-round-trip repr) and carries enough metadata to
rebuild the model, its approximation graph, and the quality report.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import SchemaVersionError
from .graph import ApproximationGraph, VariationalState

SCHEMA_VERSION = 1


def _summaries_payload(quality) -> dict | None:
    if quality is None:
        return None
    return {
        "r_squared": quality.r_squared,
        "n_samples": quality.n_samples,
        "residual_variance": quality.residual_variance,
        "logp_variance": quality.logp_variance,
        "clamped": quality.clamped,
        "natgrad_norm": quality.natgrad_norm,
        "summaries": [
            {
                "name": row.name,
                "mean": row.mean,
                "sd": row.sd,
                "q05": row.q05,
                "q50": row.q50,
                "q95": row.q95,
            }
            for row in quality.summaries
        ],
    }


def fit_document(
    model_name: str,
    model_params: dict,
    data_path: str | None,
    result,
    graph: ApproximationGraph,
) -> dict:
    """Assemble the on-disk document for a fit result."""
    blocks = []
    for b in graph.blocks:
        blocks.append(
            {
                "name": b.name,
                "family": b.family.name,
                "k": b.k,
                "n_features": b.n_features,
                "coefficients": [list(map(float, row)) for row in result.state[b.name]],
            }
        )
    trace_z = result.z_trace
    return {
        "schema_version": SCHEMA_VERSION,
        "model": {"name": model_name, "params": model_params, "data_path": data_path},
        "method": result.method,
        "seed": result.seed,
        "config": result.config,
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "failure": result.failure,
        "quality": _summaries_payload(result.quality),
        "trace_summary": {
            "final_z": float(trace_z[-1]) if len(trace_z) else None,
            "mean_alpha_last_50": (
                float(np.mean(result.alpha_trace[-50:]))
                if len(result.alpha_trace)
                else None
            ),
            "zero_alpha_iterations": int(np.sum(np.asarray(result.alpha_trace) == 0.0)),
        },
        "blocks": blocks,
    }


def write_fit_document(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_fit_document(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"fit document at {path} has schema version {version}; this build "
            f"reads version {SCHEMA_VERSION}"
        )
    return doc


def state_from_document(doc: dict, graph: ApproximationGraph) -> VariationalState:
    """Rebuild the variational state; requires a structurally matching graph."""
    coefs = {}
    for entry in doc["blocks"]:
        name = entry["name"]
        if name not in graph.by_name:
            raise SchemaVersionError(
                f"document block '{name}' does not exist in the rebuilt graph"
            )
        block = graph.by_name[name]
        arr = np.array(entry["coefficients"], dtype=float)
        if arr.shape != (block.n_features, block.k):
            raise SchemaVersionError(
                f"document block '{name}' has coefficients of shape {arr.shape}, "
                f"expected {(block.n_features, block.k)}"
            )
        coefs[name] = arr
    missing = [b.name for b in graph.blocks if b.name not in coefs]
    if missing:
        raise SchemaVersionError(f"document is missing blocks {missing}")
    return VariationalState(coefs)
