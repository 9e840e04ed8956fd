"""Append-only JSONL cache of agent interactions.

Every (disclosure, agent, model, prompt, seed) combination maps to at most
one immutable record. The file is human-inspectable, crash-tolerant (a
truncated final line is dropped with a warning), and never rewritten in
place, so feature building, training, and evaluation can replay it
bit-for-bit without re-querying any model.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

from .domain import AgentOutput, Lens

logger = logging.getLogger(__name__)


class CacheIntegrityError(RuntimeError):
    """A key was re-put with a different payload, or the file contradicts itself."""


class CacheCorruptionError(RuntimeError):
    """A non-final line in the store file failed to parse."""


@dataclass(frozen=True)
class CacheKey:
    disclosure_id: str
    lens: Lens
    model_name: str
    prompt_hash: str
    seed: int

    def to_dict(self) -> dict:
        # Field order is fixed so serialized keys hash stably.
        return {
            "disclosure_id": self.disclosure_id,
            "lens": self.lens.value,
            "model_name": self.model_name,
            "prompt_hash": self.prompt_hash,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CacheKey":
        return cls(
            disclosure_id=d["disclosure_id"],
            lens=Lens(d["lens"]),
            model_name=d["model_name"],
            prompt_hash=d["prompt_hash"],
            seed=int(d["seed"]),
        )

    @classmethod
    def for_output(cls, output: AgentOutput) -> "CacheKey":
        return cls(
            disclosure_id=output.disclosure_id,
            lens=output.agent,
            model_name=output.model_name,
            prompt_hash=output.prompt_hash,
            seed=output.seed,
        )


@dataclass(frozen=True)
class CacheRecord:
    key: CacheKey
    output: AgentOutput
    created_at: datetime

    def to_dict(self) -> dict:
        return {
            "key": self.key.to_dict(),
            "output": self.output.to_dict(),
            "created_at": self.created_at.isoformat(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CacheRecord":
        return cls(
            key=CacheKey.from_dict(d["key"]),
            output=AgentOutput.from_dict(d["output"]),
            created_at=datetime.fromisoformat(d["created_at"]),
        )


def make_record(output: AgentOutput) -> CacheRecord:
    return CacheRecord(
        key=CacheKey.for_output(output),
        output=output,
        created_at=datetime.now(timezone.utc),
    )


class CacheStore:
    """Single-writer, multi-reader JSONL store keyed by :class:`CacheKey`."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._records: dict[CacheKey, CacheRecord] = {}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self._load()
        self._fh = self.path.open("ab")

    def _load(self) -> None:
        data = self.path.read_bytes()
        offset = 0
        segments = data.split(b"\n")
        for i, segment in enumerate(segments):
            is_final = i == len(segments) - 1
            if segment:
                try:
                    record = CacheRecord.from_dict(json.loads(segment.decode("utf-8")))
                except (ValueError, KeyError, UnicodeDecodeError) as exc:
                    if is_final:
                        # Unterminated final line: a crash artifact, not corruption.
                        logger.warning(
                            "%s: dropping truncated final line at byte offset %d",
                            self.path,
                            offset,
                        )
                        break
                    raise CacheCorruptionError(
                        f"{self.path}: corrupted line at byte offset {offset}: {exc}"
                    ) from None
                if record.key in self._records:
                    existing = self._records[record.key]
                    if existing.output != record.output:
                        raise CacheIntegrityError(
                            f"{self.path}: conflicting payloads for key {record.key}"
                        )
                self._records[record.key] = record
            offset += len(segment) + 1

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._records

    def get(self, key: CacheKey) -> CacheRecord | None:
        return self._records.get(key)

    def put(self, record: CacheRecord) -> None:
        """Durably append one record; re-putting identical payloads is a no-op."""
        existing = self._records.get(record.key)
        if existing is not None:
            if existing.output != record.output:
                raise CacheIntegrityError(
                    f"key already stored with a different payload: {record.key}"
                )
            return
        line = json.dumps(record.to_dict(), ensure_ascii=False) + "\n"
        self._fh.write(line.encode("utf-8"))
        self._fh.flush()
        self._records[record.key] = record

    def sync(self) -> None:
        """fsync the append handle (call on batch boundaries)."""
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def missing(self, expected: Iterable[CacheKey]) -> list[CacheKey]:
        """Expected keys with no stored record; empty means coverage is complete."""
        return [key for key in expected if key not in self._records]

    def records(self) -> Iterator[CacheRecord]:
        return iter(self._records.values())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()

    def __enter__(self) -> "CacheStore":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()
