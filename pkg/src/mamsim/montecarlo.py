"""Replicate batches: parallel execution, shard persistence, combination.

Shard container format (``.shard``): a self-describing binary file holding
one JSON record per replicate.  All integers are little-endian.

    magic            8 bytes  b"MAMSHD01"
    header_length    u32
    header           UTF-8 JSON: format/engine versions, design
                     fingerprint, canonical design document, seed range,
                     record count, extended level, creation timestamp
    n_records        u64
    records          n_records x (u32 length + UTF-8 JSON record)

Records are sorted by seed and serialised canonically, so the bytes after
the header depend only on (design, seed set): batches produced with
different worker counts are byte-identical.  ``combine_shard_files``
streams records straight from input shards to the output, checking seed
disjointness and design fingerprints on the way.  A JSON export of the
same content is provided for interoperability.
"""

from __future__ import annotations

import heapq
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone

from . import __version__
from .config import (
    ValidatedSpec,
    canonical_document,
    document_diff,
    null_variant,
)
from .engine import TrialResult, run_trial

MAGIC = b"MAMSHD01"
FORMAT_VERSION = 1
WORKER_CAP_ENV = "MAMSIM_MAX_WORKERS"


class ShardError(ValueError):
    """Unreadable, incompatible, or mutually inconsistent shards."""


@dataclass
class BatchResult:
    """Aggregated replicate results for one design and seed set."""

    fingerprint: str
    seeds: tuple[int, ...]
    extended: int
    spec_document: dict
    results: list[TrialResult]
    results_null: list[TrialResult] | None
    engine_version: str
    created_at: str


def resolve_workers(flag: int | None) -> int:
    """Worker count policy: an explicit flag wins over the env-var cap."""
    if flag is not None:
        if flag < 1:
            raise ShardError("worker count must be >= 1")
        return flag
    available = os.cpu_count() or 1
    cap = int(os.environ.get(WORKER_CAP_ENV, "0") or "0")
    return min(available, cap) if cap > 0 else available


def run_batch(
    validated: ValidatedSpec,
    seeds=None,
    workers: int = 1,
) -> BatchResult:
    """Run one replicate per seed, distributed over worker processes.

    The result is independent of ``workers``: replicates are keyed by seed
    and merged in seed order, so parallelism never changes the output.
    When the design sets ``h0_mode`` each seed is also run under the
    matched global-null variant.
    """
    spec = validated.spec
    if seeds is None:
        seeds = spec.seeds
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ShardError("no seeds to run")
    if len(set(seeds)) != len(seeds):
        dupes = sorted({s for s in seeds if seeds.count(s) > 1})
        raise ShardError(f"duplicate seeds: {_preview(dupes)}")
    if workers < 1:
        raise ShardError("worker count must be >= 1")
    seeds = sorted(seeds)

    null_spec = null_variant(validated) if spec.h0_mode else None
    chunks = [c for c in _chunk(seeds, workers) if c]
    if len(chunks) == 1 or workers == 1:
        pairs = [_run_chunk(validated, null_spec, seeds)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_chunk, validated, null_spec, chunk)
                for chunk in chunks
            ]
            pairs = [f.result() for f in futures]

    results = [r for res, _ in pairs for r in res]
    nulls = [r for _, res in pairs for r in (res or [])]
    return BatchResult(
        fingerprint=validated.fingerprint,
        seeds=tuple(seeds),
        extended=spec.extended,
        spec_document=canonical_document(spec, include_seeds=False),
        results=results,
        results_null=nulls if spec.h0_mode else None,
        engine_version=__version__,
        created_at=datetime.now(timezone.utc).isoformat(),
    )


def _chunk(seeds, workers):
    size, extra = divmod(len(seeds), workers)
    out, start = [], 0
    for i in range(workers):
        end = start + size + (1 if i < extra else 0)
        out.append(seeds[start:end])
        start = end
    return out


def _run_chunk(validated, null_spec, seeds):
    results = [run_trial(validated, s) for s in seeds]
    nulls = [run_trial(null_spec, s) for s in seeds] if null_spec else None
    return results, nulls


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def _record_bytes(batch: BatchResult, i: int) -> bytes:
    doc = {"seed": batch.seeds[i], "result": batch.results[i].to_dict()}
    if batch.results_null is not None:
        doc["null_result"] = batch.results_null[i].to_dict()
    return _dump(doc)


def _dump(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _header_doc(batch: BatchResult) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "engine_version": batch.engine_version,
        "fingerprint": batch.fingerprint,
        "spec_document": batch.spec_document,
        "seed_min": min(batch.seeds),
        "seed_max": max(batch.seeds),
        "n_records": len(batch.seeds),
        "extended": batch.extended,
        "has_null": batch.results_null is not None,
        "created_at": batch.created_at,
    }


def save_shard(batch: BatchResult, path) -> None:
    with open(path, "wb") as fh:
        header = _dump(_header_doc(batch))
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(batch.seeds)))
        for i in range(len(batch.seeds)):
            rec = _record_bytes(batch, i)
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)


def save_shard_json(batch: BatchResult, path) -> None:
    """Plain-JSON export of a batch, for interoperability."""
    doc = {
        "header": _header_doc(batch),
        "records": [
            json.loads(_record_bytes(batch, i)) for i in range(len(batch.seeds))
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise ShardError(f"corrupt shard {path}: truncated file")
    return data


def _read_header(fh, path) -> dict:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ShardError(f"corrupt shard {path}: bad magic bytes")
    (header_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
    try:
        header = json.loads(_read_exact(fh, header_len, path))
    except json.JSONDecodeError as exc:
        raise ShardError(f"corrupt shard {path}: bad header ({exc.msg})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ShardError(
            f"shard {path} has format version {header.get('format_version')}, "
            f"expected {FORMAT_VERSION}"
        )
    return header


def read_shard_sections(path) -> tuple[dict, bytes]:
    """Header dict plus the raw record region (used for byte comparisons)."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    return header, payload


def read_shard_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _iter_records(path):
    """Yield raw record bytes from a shard without loading them all."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        (n_records,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        if n_records != header["n_records"]:
            raise ShardError(f"corrupt shard {path}: record count mismatch")
        for _ in range(n_records):
            (length,) = struct.unpack("<I", _read_exact(fh, 4, path))
            yield _read_exact(fh, length, path)


def load_shard(path) -> BatchResult:
    if _looks_like_json(path):
        return _load_shard_json(path)
    header = read_shard_header(path)
    seeds, results, nulls = [], [], [] if header["has_null"] else None
    for raw in _iter_records(path):
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ShardError(f"corrupt shard {path}: bad record ({exc.msg})") from None
        seeds.append(doc["seed"])
        results.append(TrialResult.from_dict(doc["result"]))
        if nulls is not None:
            nulls.append(TrialResult.from_dict(doc["null_result"]))
    return BatchResult(
        fingerprint=header["fingerprint"],
        seeds=tuple(seeds),
        extended=header["extended"],
        spec_document=header["spec_document"],
        results=results,
        results_null=nulls,
        engine_version=header["engine_version"],
        created_at=header["created_at"],
    )


def _looks_like_json(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(MAGIC)) != MAGIC and str(path).endswith(".json")


def _load_shard_json(path) -> BatchResult:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    header = doc["header"]
    if header.get("format_version") != FORMAT_VERSION:
        raise ShardError(f"shard {path}: unsupported format version")
    nulls = [] if header["has_null"] else None
    results, seeds = [], []
    for rec in doc["records"]:
        seeds.append(rec["seed"])
        results.append(TrialResult.from_dict(rec["result"]))
        if nulls is not None:
            nulls.append(TrialResult.from_dict(rec["null_result"]))
    return BatchResult(
        fingerprint=header["fingerprint"],
        seeds=tuple(seeds),
        extended=header["extended"],
        spec_document=header["spec_document"],
        results=results,
        results_null=nulls,
        engine_version=header["engine_version"],
        created_at=header["created_at"],
    )


# --------------------------------------------------------------------------
# combination
# --------------------------------------------------------------------------


def _check_compatible(headers_or_batches) -> None:
    first = headers_or_batches[0]
    for other in headers_or_batches[1:]:
        if other["fingerprint"] != first["fingerprint"]:
            paths = document_diff(first["spec_document"], other["spec_document"])
            raise ShardError(
                "shards come from different designs; differing field(s): "
                + (", ".join(paths) if paths else "<none; header mismatch?>")
            )
        if other["extended"] != first["extended"]:
            raise ShardError("shards disagree on the extended level")


def _check_disjoint(seed_sets) -> None:
    seen: set[int] = set()
    overlap: set[int] = set()
    for s in seed_sets:
        overlap |= seen & set(s)
        seen |= set(s)
    if overlap:
        raise ShardError(f"overlapping seed sets: {_preview(sorted(overlap))}")


def _preview(values, limit: int = 20) -> str:
    text = ", ".join(map(str, values[:limit]))
    if len(values) > limit:
        text += f", ... ({len(values)} total)"
    return text


def combine_shards(batches) -> BatchResult:
    """Merge disjoint-seed batches from the same design into one batch."""
    batches = list(batches)
    if not batches:
        raise ShardError("no shards to combine")
    _check_compatible([_header_doc(b) for b in batches])
    _check_disjoint([b.seeds for b in batches])

    triples = []
    for b in batches:
        nulls = b.results_null or [None] * len(b.seeds)
        triples += list(zip(b.seeds, b.results, nulls))
    triples.sort(key=lambda t: t[0])
    has_null = batches[0].results_null is not None
    return BatchResult(
        fingerprint=batches[0].fingerprint,
        seeds=tuple(t[0] for t in triples),
        extended=batches[0].extended,
        spec_document=batches[0].spec_document,
        results=[t[1] for t in triples],
        results_null=[t[2] for t in triples] if has_null else None,
        engine_version=batches[0].engine_version,
        created_at=datetime.now(timezone.utc).isoformat(),
    )


def combine_shard_files(paths, out_path) -> dict:
    """Stream-combine shard files into one output shard.

    Runs two passes: the first reads only seeds to verify disjointness, the
    second copies record bytes verbatim in seed order via a k-way merge.
    Record payloads are never held in memory all at once, and the output is
    byte-identical to a monolithic run over the union of the seed sets.
    Returns the combined header.
    """
    if not paths:
        raise ShardError("no shards to combine")
    headers = [read_shard_header(p) for p in paths]
    _check_compatible(headers)
    _check_disjoint(
        [[json.loads(raw)["seed"] for raw in _iter_records(p)] for p in paths]
    )

    def keyed(path):
        for raw in _iter_records(path):
            yield json.loads(raw)["seed"], raw

    merged = heapq.merge(*(keyed(p) for p in paths), key=lambda t: t[0])
    total = sum(h["n_records"] for h in headers)
    header = dict(headers[0])
    header["n_records"] = total
    header["seed_min"] = min(h["seed_min"] for h in headers)
    header["seed_max"] = max(h["seed_max"] for h in headers)
    header["created_at"] = datetime.now(timezone.utc).isoformat()

    with open(out_path, "wb") as fh:
        blob = _dump(header)
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", total))
        for _, raw in merged:
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
    return header
