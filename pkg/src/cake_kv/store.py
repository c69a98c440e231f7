"""Content-addressed on-disk store for KV-cache chunk payloads.

Layout under ``root``::

    <root>/<hh>/<digest>.kv     one file per chunk, hh = first two hex chars
    <root>/manifest.v1          committed entries, one per line

Manifest line format (tab separated, version 1)::

    digest  relpath  token_count  codec  encoded_bytes  uncompressed_bytes

A put writes the payload to a temp file, renames it into place, then
rewrites the manifest via temp-file-and-rename.  An entry is therefore
visible only after both renames, so a crash between steps leaves at most
an orphaned payload file, never a torn entry.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from .codecs import IDENTITY, Codec, get_codec
from .model import ModelProfile, RequestSpec, chunk_bytes, split_into_chunks

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.v1"
MANIFEST_HEADER = "#cake-kv manifest v1"
_ZERO_KEY = bytes(32)


class StoreError(Exception):
    pass


class MissingChunkError(StoreError, KeyError):
    pass


class CorruptChunkError(StoreError):
    pass


class ChunkConflictError(StoreError):
    pass


@dataclass(frozen=True, order=True)
class ChunkKey:
    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != 32:
            raise ValueError("chunk key digest must be 32 bytes")

    @classmethod
    def from_hex(cls, text: str) -> ChunkKey:
        return cls(bytes.fromhex(text))

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex

    def __repr__(self) -> str:
        return f"ChunkKey({self.hex[:12]}...)"


@dataclass(frozen=True)
class ChunkMeta:
    token_count: int
    codec: str
    encoded_bytes: int
    uncompressed_bytes: int


def chain_hash(prev_key: ChunkKey | None, tokens: Sequence[int]) -> ChunkKey:
    """SHA-256 over the previous key (or 32 zero bytes) and the tokens as LE uint32."""
    if len(tokens) == 0:
        raise ValueError("cannot hash an empty token chunk")
    h = hashlib.sha256(prev_key.digest if prev_key is not None else _ZERO_KEY)
    if isinstance(tokens, np.ndarray):
        h.update(tokens.astype("<u4", copy=False).tobytes())
    else:
        h.update(struct.pack(f"<{len(tokens)}I", *tokens))
    return ChunkKey(h.digest())


def chunk_keys(tokens: Sequence[int], chunk_size: int) -> list[ChunkKey]:
    keys: list[ChunkKey] = []
    prev = None
    for chunk in split_into_chunks(len(tokens), chunk_size):
        prev = chain_hash(prev, tokens[chunk.token_start : chunk.token_end])
        keys.append(prev)
    return keys


class ChunkStore:
    """Filesystem-backed chunk store; readers are lock-free, writers serialize."""

    def __init__(self, root: str | Path, create: bool = True) -> None:
        self.root = Path(root)
        if create:
            try:
                self.root.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StoreError(f"cannot create store at {self.root}: {exc}") from exc
        elif not self.root.is_dir():
            raise StoreError(f"no store at {self.root}")
        self._lock = threading.Lock()
        self._entries: dict[ChunkKey, tuple[str, ChunkMeta]] = {}
        self._batch_depth = 0
        self._dirty = False
        self._load_manifest()

    # -- manifest -----------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def _load_manifest(self) -> None:
        path = self.manifest_path
        if not path.exists():
            return
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 6:
                    raise CorruptChunkError(f"{path}:{lineno}: expected 6 fields")
                digest, rel, tokens, codec, enc, raw = parts
                meta = ChunkMeta(int(tokens), codec, int(enc), int(raw))
                self._entries[ChunkKey.from_hex(digest)] = (rel, meta)

    def _write_manifest(self) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        lines = [MANIFEST_HEADER]
        for key in sorted(self._entries):
            rel, m = self._entries[key]
            lines.append(
                f"{key.hex}\t{rel}\t{m.token_count}\t{m.codec}\t{m.encoded_bytes}\t{m.uncompressed_bytes}"
            )
        try:
            with tmp.open("w") as fh:
                fh.write("\n".join(lines) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.manifest_path)
        except OSError as exc:
            raise StoreError(f"manifest update failed: {exc}") from exc

    @contextlib.contextmanager
    def batch(self) -> Iterator[ChunkStore]:
        """Defer manifest rewrites until the outermost batch exits.

        Entries put inside the batch are readable in-process immediately but
        only become durable when the batch commits.
        """
        with self._lock:
            self._batch_depth += 1
        try:
            yield self
        finally:
            with self._lock:
                self._batch_depth -= 1
                if self._batch_depth == 0 and self._dirty:
                    self._write_manifest()
                    self._dirty = False

    # -- primitives ---------------------------------------------------------

    def path_for(self, key: ChunkKey) -> Path:
        return self.root / key.hex[:2] / f"{key.hex}.kv"

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: ChunkKey) -> bool:
        return self.contains(key)

    def keys(self) -> list[ChunkKey]:
        return list(self._entries)

    def contains(self, key: ChunkKey) -> bool:
        return key in self._entries

    def meta(self, key: ChunkKey) -> ChunkMeta:
        try:
            return self._entries[key][1]
        except KeyError:
            raise MissingChunkError(key.hex) from None

    def put(self, key: ChunkKey, payload: bytes, meta: ChunkMeta) -> None:
        if len(payload) != meta.encoded_bytes:
            raise StoreError(
                f"payload is {len(payload)} bytes but meta declares {meta.encoded_bytes}"
            )
        with self._lock:
            existing = self._entries.get(key)
            if existing is not None:
                if existing[1] == meta and self._read(key, existing) == bytes(payload):
                    return
                raise ChunkConflictError(f"different payload already stored under {key.hex}")
            path = self.path_for(key)
            tmp = path.with_suffix(".part")
            try:
                path.parent.mkdir(exist_ok=True)
                with tmp.open("wb") as fh:
                    fh.write(payload)
                os.replace(tmp, path)
            except OSError as exc:
                with contextlib.suppress(OSError):
                    tmp.unlink()
                raise StoreError(f"writing {path} failed: {exc}") from exc
            self._entries[key] = (str(path.relative_to(self.root)), meta)
            if self._batch_depth:
                self._dirty = True
                return
            try:
                self._write_manifest()
            except StoreError:
                del self._entries[key]
                raise

    def get(self, key: ChunkKey) -> tuple[bytes, ChunkMeta]:
        entry = self._entries.get(key)
        if entry is None:
            raise MissingChunkError(key.hex)
        return self._read(key, entry), entry[1]

    def open_chunk(self, key: ChunkKey) -> tuple[BinaryIO, ChunkMeta]:
        """Open a chunk file for streaming reads after checking its size."""
        entry = self._entries.get(key)
        if entry is None:
            raise MissingChunkError(key.hex)
        path = self._checked_path(entry)
        return path.open("rb"), entry[1]

    def _checked_path(self, entry: tuple[str, ChunkMeta]) -> Path:
        rel, meta = entry
        path = self.root / rel
        try:
            size = path.stat().st_size
        except OSError as exc:
            raise CorruptChunkError(f"chunk file {path} unreadable: {exc}") from exc
        if size != meta.encoded_bytes:
            raise CorruptChunkError(
                f"{path} is {size} bytes, manifest says {meta.encoded_bytes}"
            )
        return path

    def _read(self, key: ChunkKey, entry: tuple[str, ChunkMeta]) -> bytes:
        path = self._checked_path(entry)
        data = path.read_bytes()
        if len(data) != entry[1].encoded_bytes:
            raise CorruptChunkError(f"short read on {path}")
        return data

    def verify(self) -> list[str]:
        """Return a list of problems; empty when every entry checks out."""
        problems = []
        for key, entry in self._entries.items():
            try:
                self._checked_path(entry)
            except CorruptChunkError as exc:
                problems.append(str(exc))
        return problems

    def total_encoded_bytes(self) -> int:
        return sum(m.encoded_bytes for _, m in self._entries.values())


def synth_tokens(total_tokens: int, seed: int, vocab_size: int = 32000) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return rng.integers(0, vocab_size, size=total_tokens, dtype=np.uint32)


def synth_payload(nbytes: int, seed: int, index: int) -> bytes:
    """Seed-derived fp16 values in [-1, 1) laid out as raw bytes."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, index]))
    if nbytes % 2:
        return rng.bytes(nbytes)
    vals = rng.random(nbytes // 2, dtype=np.float32) * 2.0 - 1.0
    return vals.astype("<f2").tobytes()


def populate(
    store: ChunkStore,
    request: RequestSpec,
    profile: ModelProfile,
    seed: int,
    codec: Codec | str = IDENTITY,
) -> list[ChunkKey]:
    """Write every chunk of a synthetic prompt into ``store``; returns keys in order."""
    codec = get_codec(codec)
    tokens = synth_tokens(request.total_tokens, seed)
    chunks = split_into_chunks(request.total_tokens, request.chunk_size)
    keys = chunk_keys(tokens, request.chunk_size)
    with store.batch():
        for chunk, key in zip(chunks, keys):
            if store.contains(key):
                continue
            raw = synth_payload(chunk_bytes(profile, chunk), seed, chunk.index)
            encoded = codec.encode(raw)
            meta = ChunkMeta(chunk.token_count, codec.id, len(encoded), len(raw))
            store.put(key, encoded, meta)
            logger.debug("stored chunk %d (%d bytes) as %s", chunk.index, len(encoded), key.hex[:12])
    return keys


def request_keys(request: RequestSpec, seed: int) -> list[ChunkKey]:
    """Keys ``populate`` would produce, without touching any store."""
    return chunk_keys(synth_tokens(request.total_tokens, seed), request.chunk_size)
