"""Deterministic context-splitting utilities referenced by decomposition plans."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Mapping

# Form feed is the conventional page marker for plain text; callers may override
# with any regex.
PAGE_DELIMITER = "\f"

# Markdown ATX ("## Title") and Setext ("Title\n-----") headings.
_HEADING = re.compile(
    r"^(?:#{1,6} [^\n]*|[A-Z][^\n]{0,80}\n[=-]{3,}(?=\n|$))", re.MULTILINE
)

STRATEGY_KINDS = ("by_chars", "by_page", "by_section", "multi_page")


@dataclass(frozen=True)
class Chunk:
    doc_index: int
    chunk_index: int
    text: str
    char_span: tuple[int, int]

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("chunk text must be non-empty")

    @property
    def chunk_id(self) -> str:
        return f"{self.doc_index}_{self.chunk_index}"


def chunk_by_chars(
    doc: str, size: int, overlap: int = 0, doc_index: int = 0
) -> list[Chunk]:
    """Sliding window of `size` chars advancing by `size - overlap` each step."""
    if size < 1:
        raise ValueError("size must be >= 1")
    if not 0 <= overlap < size:
        raise ValueError("overlap must satisfy 0 <= overlap < size")
    stride = size - overlap
    chunks = []
    for index, start in enumerate(range(0, len(doc), stride)):
        end = min(start + size, len(doc))
        chunks.append(Chunk(doc_index, index, doc[start:end], (start, end)))
    return chunks


def _page_spans(doc: str, delimiter: str | None) -> list[tuple[int, int]]:
    """Spans of non-empty pages, excluding the delimiter characters."""
    pattern = re.compile(delimiter if delimiter is not None else re.escape(PAGE_DELIMITER))
    spans = []
    start = 0
    for match in pattern.finditer(doc):
        if match.start() > start:
            spans.append((start, match.start()))
        start = match.end()
    if len(doc) > start:
        spans.append((start, len(doc)))
    return spans


def chunk_by_page(
    doc: str, delimiter: str | None = None, doc_index: int = 0
) -> list[Chunk]:
    """Split on the page delimiter; empty pages are dropped."""
    return [
        Chunk(doc_index, index, doc[start:end], (start, end))
        for index, (start, end) in enumerate(_page_spans(doc, delimiter))
    ]


def chunk_on_multiple_pages(
    doc: str,
    pages_per_chunk: int,
    delimiter: str | None = None,
    doc_index: int = 0,
) -> list[Chunk]:
    """Group consecutive pages into runs of `pages_per_chunk` pages.

    Each chunk is the raw document slice from the first to the last page of its
    run, so interior page delimiters are preserved verbatim and the count is
    ceil(num_pages / pages_per_chunk).
    """
    if pages_per_chunk < 1:
        raise ValueError("pages_per_chunk must be >= 1")
    pages = _page_spans(doc, delimiter)
    chunks = []
    for index, group_start in enumerate(range(0, len(pages), pages_per_chunk)):
        group = pages[group_start : group_start + pages_per_chunk]
        start, end = group[0][0], group[-1][1]
        chunks.append(Chunk(doc_index, index, doc[start:end], (start, end)))
    return chunks


def chunk_by_section(doc: str, doc_index: int = 0) -> list[Chunk]:
    """Split at heading boundaries; a preamble before the first heading is kept.

    Documents without headings come back as a single chunk.
    """
    if not doc:
        return []
    heading_starts = [m.start() for m in _HEADING.finditer(doc)]
    if not heading_starts:
        return [Chunk(doc_index, 0, doc, (0, len(doc)))]
    boundaries = heading_starts + [len(doc)]
    spans: list[tuple[int, int]] = []
    if heading_starts[0] > 0:
        spans.append((0, _trim_newline(doc, heading_starts[0])))
    for start, next_start in zip(boundaries, boundaries[1:]):
        end = _trim_newline(doc, next_start) if next_start < len(doc) else next_start
        spans.append((start, end))
    return [
        Chunk(doc_index, index, doc[start:end], (start, end))
        for index, (start, end) in enumerate(spans)
        if end > start
    ]


def _trim_newline(doc: str, boundary: int) -> int:
    """Drop the single line break immediately before a section boundary."""
    if boundary > 0 and doc[boundary - 1] == "\n":
        return boundary - 1
    return boundary


@dataclass(frozen=True)
class ChunkingStrategy:
    """Named splitting strategy with its parameters; kinds are a closed enum."""

    kind: str
    chunk_size_chars: int | None = None
    overlap_chars: int = 0
    pages_per_chunk: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown chunking strategy {self.kind!r}")
        if self.kind == "by_chars":
            if self.chunk_size_chars is None or self.chunk_size_chars < 1:
                raise ValueError("by_chars requires chunk_size_chars >= 1")
            if not 0 <= self.overlap_chars < self.chunk_size_chars:
                raise ValueError("overlap_chars must satisfy 0 <= overlap < size")
        if self.kind == "multi_page":
            if self.pages_per_chunk is None or self.pages_per_chunk < 1:
                raise ValueError("multi_page requires pages_per_chunk >= 1")

    def split(self, doc: str, doc_index: int = 0) -> list[Chunk]:
        if self.kind == "by_chars":
            assert self.chunk_size_chars is not None
            return chunk_by_chars(
                doc, self.chunk_size_chars, self.overlap_chars, doc_index
            )
        if self.kind == "by_page":
            return chunk_by_page(doc, doc_index=doc_index)
        if self.kind == "by_section":
            return chunk_by_section(doc, doc_index=doc_index)
        assert self.pages_per_chunk is not None
        return chunk_on_multiple_pages(doc, self.pages_per_chunk, doc_index=doc_index)

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "ChunkingStrategy":
        """Parse the plan wire format {"strategy": ..., "params": {...}}."""
        kind = obj.get("strategy")
        if not isinstance(kind, str):
            raise ValueError("chunking.strategy must be a string")
        params = obj.get("params") or {}
        if not isinstance(params, Mapping):
            raise ValueError("chunking.params must be an object")
        known = {"chunk_size_chars", "overlap_chars", "pages_per_chunk"}
        unknown = set(params) - known
        if unknown:
            raise ValueError(f"unknown chunking params: {sorted(unknown)}")
        return cls(
            kind=kind,
            chunk_size_chars=params.get("chunk_size_chars"),
            overlap_chars=params.get("overlap_chars", 0),
            pages_per_chunk=params.get("pages_per_chunk"),
        )

    def to_json_dict(self) -> dict[str, Any]:
        params: dict[str, Any] = {}
        if self.chunk_size_chars is not None:
            params["chunk_size_chars"] = self.chunk_size_chars
        if self.overlap_chars:
            params["overlap_chars"] = self.overlap_chars
        if self.pages_per_chunk is not None:
            params["pages_per_chunk"] = self.pages_per_chunk
        return {"strategy": self.kind, "params": params}
