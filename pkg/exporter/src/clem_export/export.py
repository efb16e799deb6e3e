"""Run a frozen pretrained masked-LM encoder over text and write CLEM.

One record per non-empty input line, ids are 1-based line numbers, K is the
model's hidden size and T the tokenizer's token count for the line (special
tokens included as ordinary columns). Embeddings come straight from the last
hidden layer: no pooling, no normalization, only float32 truncation and
optional sequence-length truncation.

CLEM layout (little-endian): magic b"CLEM" | u32 version=1 | u32 K | u64 N,
then per record u64 id | 8-byte space-padded ASCII lang tag | u32 T |
K*T float32 row-major.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger("clem_export")

CLEM_MAGIC = b"CLEM"
CLEM_VERSION = 1


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    model_id: str  # hub name or local directory
    input_path: str
    lang: str
    output_path: str
    batch_size: int = 16
    max_length: int = 128

    def __post_init__(self):
        if self.batch_size < 1:
            raise ExportError("batch_size must be >= 1")
        if self.max_length < 2:
            raise ExportError("max_length must leave room for the special tokens")
        tag = self.lang.encode("ascii", errors="ignore")
        if not 1 <= len(self.lang.encode("ascii", errors="ignore")) <= 8 or \
                tag.decode("ascii", errors="ignore") != self.lang:
            raise ExportError("lang tag must be 1..8 ASCII bytes")


def write_clem(path, dim: int, records) -> None:
    """records: iterable of (id, lang, matrix) with float32 (K, T) matrices."""
    records = list(records)
    with open(path, "wb") as f:
        f.write(CLEM_MAGIC)
        f.write(struct.pack("<IIQ", CLEM_VERSION, dim, len(records)))
        for rid, lang, matrix in records:
            f.write(struct.pack("<Q", rid))
            f.write(lang.encode("ascii").ljust(8))
            f.write(struct.pack("<I", matrix.shape[1]))
            f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def _tokenizer_hash(tokenizer) -> str:
    vocab = tokenizer.get_vocab()
    h = hashlib.sha256()
    for token, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
        h.update(f"{idx}:{token}\n".encode("utf-8"))
    return h.hexdigest()


def _load_model(model_id: str):
    import torch
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except Exception as exc:
        raise ExportError(f"could not load model {model_id!r}: {exc}") from exc
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return torch.no_grad, tokenizer, model


def export(job: ExportJob) -> dict:
    """Export a sentence file; returns the manifest (also written to disk)."""
    import torch

    no_grad, tokenizer, model = _load_model(job.model_id)
    hidden = int(model.config.hidden_size)

    try:
        text = Path(job.input_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"cannot read input: {exc}") from exc

    lines, skipped = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            lines.append((lineno, line))
        else:
            skipped.append(lineno)
            log.warning("line %d is empty, skipping", lineno)

    records = []
    truncated = []
    for start in range(0, len(lines), job.batch_size):
        batch = lines[start:start + job.batch_size]
        texts = [line for _, line in batch]
        full_lengths = [len(ids) for ids in tokenizer(texts, truncation=False)["input_ids"]]
        enc = tokenizer(texts, truncation=True, max_length=job.max_length,
                        padding=True, return_tensors="pt")
        try:
            with no_grad():
                out = model(**enc).last_hidden_state  # (B, L, H)
        except RuntimeError as exc:
            if "out of memory" in str(exc).lower():
                raise ExportError(
                    f"out of memory at batch_size={job.batch_size}; "
                    "retry with a smaller --batch-size") from exc
            raise
        lengths = enc["attention_mask"].sum(dim=1).tolist()
        for offset, ((lineno, _), n_tok, full) in enumerate(
                zip(batch, lengths, full_lengths)):
            if full > n_tok:
                truncated.append(lineno)
                log.warning("line %d truncated from %d to %d tokens",
                            lineno, full, n_tok)
            matrix = out[offset, :n_tok, :].numpy().T.astype(np.float32)
            records.append((lineno, job.lang, matrix))

    write_clem(job.output_path, hidden, records)

    manifest = {
        "model_id": job.model_id,
        "hidden_size": hidden,
        "tokenizer_hash": _tokenizer_hash(tokenizer),
        "lang": job.lang,
        "input_path": str(job.input_path),
        "output_path": str(job.output_path),
        "batch_size": job.batch_size,
        "max_length": job.max_length,
        "input_lines": len(lines) + len(skipped),
        "exported_records": len(records),
        "skipped_lines": skipped,
        "truncated_lines": truncated,
        "special_tokens_kept": True,
    }
    manifest_path = Path(str(job.output_path) + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return manifest
