"""Embedding corpora, relatedness lists and the synthetic generator.

File formats (all little-endian):

  CLEM embedding corpus
    magic  b"CLEM" | u32 version=1 | u32 K | u64 N
    record u64 id | 8-byte ASCII lang tag, space padded | u32 T
           | K*T float32, row-major (K rows, T columns)

  pair lists are UTF-8 TSV: two integer id columns for rank mode, a third
  integer class-label column for classify mode.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CorpusFormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedFileError",
    "DimensionMismatchError",
    "PairFormatError",
    "UnknownIdError",
    "SynthConfigError",
    "EmbeddingRecord",
    "EmbeddingCorpus",
    "RelatednessList",
    "SynthConfig",
    "write_corpus",
    "read_corpus",
    "read_pairs",
    "write_pairs",
    "gen_synthetic",
    "carve_mining_task",
    "index_corpora",
    "corpus_fingerprint",
]

CLEM_MAGIC = b"CLEM"
CLEM_VERSION = 1


class CorpusFormatError(ValueError):
    """Base class for corpus/pair parse failures; parsing never panics."""


class BadMagicError(CorpusFormatError):
    pass


class VersionMismatchError(CorpusFormatError):
    pass


class TruncatedFileError(CorpusFormatError):
    pass


class DimensionMismatchError(CorpusFormatError):
    pass


class PairFormatError(CorpusFormatError):
    pass


class UnknownIdError(ValueError):
    """A pair entry references an id absent from the bound corpora."""


class SynthConfigError(ValueError):
    pass


@dataclass
class EmbeddingRecord:
    """One sentence: a K x T matrix of contextualized token embeddings."""

    id: int
    lang: str
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise DimensionMismatchError(
                f"record {self.id}: matrix must be K x T with T >= 1, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise CorpusFormatError(f"record {self.id}: non-finite embedding values")
        if self.id < 0:
            raise CorpusFormatError(f"negative record id {self.id}")
        tag = self.lang.encode("ascii", errors="strict") if self.lang else b""
        if not 1 <= len(tag) <= 8:
            raise CorpusFormatError(f"record {self.id}: lang tag must be 1..8 ASCII bytes")

    @property
    def token_count(self) -> int:
        return self.matrix.shape[1]


@dataclass
class EmbeddingCorpus:
    """Ordered records sharing one embedding dimension K; ids are unique."""

    dim: int
    records: list[EmbeddingRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.matrix.shape[0] != self.dim:
                raise DimensionMismatchError(
                    f"record {rec.id} has K={rec.matrix.shape[0]}, corpus K={self.dim}")
            if rec.id in seen:
                raise CorpusFormatError(f"duplicate record id {rec.id}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def ids(self) -> list[int]:
        return [rec.id for rec in self.records]

    def by_id(self) -> dict[int, EmbeddingRecord]:
        return {rec.id: rec for rec in self.records}

    def subset(self, ids) -> "EmbeddingCorpus":
        index = self.by_id()
        try:
            return EmbeddingCorpus(self.dim, [index[i] for i in ids])
        except KeyError as exc:
            raise UnknownIdError(f"id {exc.args[0]} not in corpus") from None


@dataclass
class RelatednessList:
    """Supervision pairs; labels are present only in classify mode."""

    mode: str
    entries: list[tuple]

    def __post_init__(self):
        if self.mode not in ("classify", "rank"):
            raise PairFormatError(f"unknown mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        if self.mode != "classify":
            raise PairFormatError("num_classes only defined for classify mode")
        c = max(label for _, _, label in self.entries) + 1
        if c < 2:
            raise PairFormatError(f"classify lists need >= 2 classes, found {c}")
        return c

    def referenced_ids(self) -> set[int]:
        out = set()
        for entry in self.entries:
            out.add(entry[0])
            out.add(entry[1])
        return out

    def check_bound(self, index: dict[int, EmbeddingRecord]) -> None:
        for entry in self.entries:
            for rid in entry[:2]:
                if rid not in index:
                    raise UnknownIdError(f"pair references unknown id {rid}")


def index_corpora(corpora) -> dict[int, EmbeddingRecord]:
    """Merge corpora into one id -> record map; ids must be globally unique."""
    index: dict[int, EmbeddingRecord] = {}
    for corpus in corpora:
        for rec in corpus:
            if rec.id in index:
                raise CorpusFormatError(f"id {rec.id} appears in more than one corpus")
            index[rec.id] = rec
    return index


# ---------------------------------------------------------------------------
# CLEM binary corpus format
# ---------------------------------------------------------------------------

def write_corpus(corpus: EmbeddingCorpus, path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CLEM_MAGIC)
        f.write(struct.pack("<IIQ", CLEM_VERSION, corpus.dim, len(corpus)))
        for rec in corpus:
            tag = rec.lang.encode("ascii").ljust(8)
            f.write(struct.pack("<Q", rec.id))
            f.write(tag)
            f.write(struct.pack("<I", rec.token_count))
            f.write(rec.matrix.astype("<f4", copy=False).tobytes())


class _Cursor:
    """Bounds-checked reader over an in-memory byte string.

    Corrupted length fields can claim absurd payload sizes; every take() is
    checked against the actual buffer so parsing stays total (no panics, no
    giant allocations) on arbitrary input.
    """

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends inside {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def _read_exact(f, n: int, what: str) -> bytes:
    if isinstance(f, _Cursor):
        return f.take(n, what)
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"file ends inside {what}")
    return data


def read_corpus(path) -> EmbeddingCorpus:
    path = Path(path)
    cur = _Cursor(path.read_bytes())
    magic = cur.take(4, "magic") if len(cur.data) >= 4 else cur.data
    if magic != CLEM_MAGIC:
        raise BadMagicError(f"{path.name}: expected CLEM magic, got {magic!r}")
    version, dim, count = struct.unpack("<IIQ", cur.take(16, "header"))
    if version != CLEM_VERSION:
        raise VersionMismatchError(f"{path.name}: version {version}, expected {CLEM_VERSION}")
    if dim == 0:
        raise DimensionMismatchError(f"{path.name}: embedding dimension 0")
    records = []
    for n in range(count):
        rid, = struct.unpack("<Q", cur.take(8, f"record {n} id"))
        tag = cur.take(8, f"record {n} lang tag")
        try:
            lang = tag.decode("ascii").rstrip(" ")
        except UnicodeDecodeError:
            raise CorpusFormatError(f"record {n}: lang tag is not ASCII") from None
        tcount, = struct.unpack("<I", cur.take(4, f"record {n} token count"))
        if tcount == 0:
            raise DimensionMismatchError(f"record id {rid}: token count 0")
        raw = cur.take(4 * dim * tcount, f"record {n} payload")
        matrix = np.frombuffer(raw, dtype="<f4").reshape(dim, tcount)
        try:
            records.append(EmbeddingRecord(rid, lang, matrix))
        except ValueError as exc:
            if isinstance(exc, CorpusFormatError):
                raise
            raise CorpusFormatError(str(exc)) from None
    if not cur.exhausted:
        raise CorpusFormatError(f"{path.name}: trailing bytes after {count} records")
    return EmbeddingCorpus(dim, records)


def corpus_fingerprint(corpus: EmbeddingCorpus) -> str:
    """sha256 over the corpus content; used by the frozen-base contract."""
    h = hashlib.sha256()
    h.update(struct.pack("<IQ", corpus.dim, len(corpus)))
    for rec in corpus:
        h.update(struct.pack("<Q", rec.id))
        h.update(rec.lang.encode("ascii"))
        h.update(struct.pack("<I", rec.token_count))
        h.update(rec.matrix.astype("<f4", copy=False).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# TSV pair lists
# ---------------------------------------------------------------------------

def read_pairs(path, mode: str) -> RelatednessList:
    if mode not in ("classify", "rank"):
        raise PairFormatError(f"unknown mode {mode!r}")
    want = 3 if mode == "classify" else 2
    entries = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise PairFormatError(f"{path}: not valid UTF-8") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != want:
            raise PairFormatError(
                f"{path}:{lineno}: expected {want} columns for {mode} mode, got {len(cols)}")
        try:
            values = [int(c) for c in cols]
        except ValueError:
            raise PairFormatError(f"{path}:{lineno}: non-integer field") from None
        if values[0] < 0 or values[1] < 0:
            raise PairFormatError(f"{path}:{lineno}: negative id")
        if mode == "classify":
            if values[2] < 0:
                raise PairFormatError(f"{path}:{lineno}: negative class label")
            entries.append((values[0], values[1], values[2]))
        else:
            entries.append((values[0], values[1], None))
    return RelatednessList(mode, entries)


def write_pairs(pairs: RelatednessList, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for entry in pairs.entries:
            if pairs.mode == "classify":
                f.write(f"{entry[0]}\t{entry[1]}\t{entry[2]}\n")
            else:
                f.write(f"{entry[0]}\t{entry[1]}\n")


# ---------------------------------------------------------------------------
# synthetic multilingual generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Deterministic multilingual embedding generator settings.

    Sentence i carries the same latent across languages, mapped into the
    first latent_dim coordinates; each language adds a fixed offset on the
    remaining coordinates, and every token gets isotropic noise. The
    shared/nuisance split is axis-aligned so a closed-form oracle lens
    (zero the last K - latent_dim coordinates) exists for tests.
    """

    languages: tuple = ("syn0", "syn1", "syn2")
    sentences_per_language: int = 500
    latent_dim: int = 16
    embed_dim: int = 64
    token_range: tuple = (4, 12)
    shared_gain: float = 1.0
    offset_gain: float = 4.0
    noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not self.languages:
            raise SynthConfigError("need at least one language")
        if len(set(self.languages)) != len(self.languages):
            raise SynthConfigError("duplicate language tags")
        if self.sentences_per_language < 1:
            raise SynthConfigError("sentences_per_language must be >= 1")
        if not 1 <= self.latent_dim < self.embed_dim:
            raise SynthConfigError(
                f"need 1 <= latent_dim < embed_dim, got {self.latent_dim} / {self.embed_dim}")
        if not (1 <= self.token_range[0] <= self.token_range[1]):
            raise SynthConfigError(f"bad token_range {self.token_range}")
        # nominal experiment configs keep offset_gain > shared_gain; degenerate
        # values are allowed so tests can switch the offset or noise off
        if self.shared_gain <= 0:
            raise SynthConfigError("shared_gain must be > 0")
        if self.offset_gain < 0 or self.noise_sigma < 0:
            raise SynthConfigError("offset_gain and noise_sigma must be >= 0")


def synth_record_id(lang_index: int, sentence: int) -> int:
    """Globally unique id for sentence ``sentence`` of language ``lang_index``."""
    return (lang_index + 1) * 10_000_000 + sentence


def gen_synthetic(cfg: SynthConfig):
    """Generate one corpus per language plus the gold cross-lingual alignment.

    Returns (corpora, gold): ``corpora`` maps lang tag -> EmbeddingCorpus and
    ``gold`` maps (lang_a, lang_b) with a < b in config order -> list of
    aligned (id_a, id_b). Same seed, same output, bit for bit.
    """
    rng = np.random.default_rng(cfg.seed)
    dz, K = cfg.latent_dim, cfg.embed_dim
    nuis = K - dz

    shared_map = np.linalg.qr(rng.standard_normal((dz, dz)))[0]
    offsets = []
    for _ in cfg.languages:
        q = rng.standard_normal(nuis)
        q *= np.sqrt(nuis) / np.linalg.norm(q)
        offsets.append(q)

    latents = rng.standard_normal((cfg.sentences_per_language, dz))
    signal = cfg.shared_gain * (latents @ shared_map.T)

    corpora = {}
    for li, lang in enumerate(cfg.languages):
        records = []
        for i in range(cfg.sentences_per_language):
            tcount = int(rng.integers(cfg.token_range[0], cfg.token_range[1] + 1))
            e = np.zeros((K, tcount))
            e[:dz, :] = signal[i][:, None]
            if cfg.offset_gain > 0:
                e[dz:, :] = cfg.offset_gain * offsets[li][:, None]
            if cfg.noise_sigma > 0:
                e += cfg.noise_sigma * rng.standard_normal((K, tcount))
            records.append(EmbeddingRecord(synth_record_id(li, i), lang, e))
        corpora[lang] = EmbeddingCorpus(K, records)

    gold = {}
    for a in range(len(cfg.languages)):
        for b in range(a + 1, len(cfg.languages)):
            gold[(cfg.languages[a], cfg.languages[b])] = [
                (synth_record_id(a, i), synth_record_id(b, i))
                for i in range(cfg.sentences_per_language)
            ]
    return corpora, gold


def carve_mining_task(corpora: dict, lang_src: str, lang_tgt: str,
                      n_shared: int, n_unique: int, offset: int = 0):
    """Carve a mining task out of aligned corpora.

    Starting at sentence ``offset``, the first ``n_shared`` sentences appear
    on both sides (the planted pairs); each side then gets ``n_unique``
    sentences the other side does not have. Returns
    (src_corpus, tgt_corpus, gold_pairs).
    """
    src_all, tgt_all = corpora[lang_src], corpora[lang_tgt]
    need = offset + n_shared + 2 * n_unique
    if len(src_all) < need or len(tgt_all) < need:
        raise SynthConfigError(
            f"need >= {need} sentences per language, have {len(src_all)}/{len(tgt_all)}")
    lo = offset
    mid = offset + n_shared
    src = EmbeddingCorpus(src_all.dim, src_all.records[lo:mid + n_unique])
    tgt = EmbeddingCorpus(
        tgt_all.dim, tgt_all.records[lo:mid] + tgt_all.records[mid + n_unique:need])
    gold_pairs = [(src.records[i].id, tgt.records[i].id) for i in range(n_shared)]
    return src, tgt, gold_pairs
