import pytest
from hypothesis import given
from hypothesis import strategies as st

from tandem.chunking import (
    Chunk,
    ChunkingStrategy,
    chunk_by_chars,
    chunk_by_page,
    chunk_by_section,
    chunk_on_multiple_pages,
)


def texts(chunks: list[Chunk]) -> list[str]:
    return [c.text for c in chunks]


class TestChunkByChars:
    def test_no_overlap(self):
        assert texts(chunk_by_chars("abcdef", 4, 0)) == ["abcd", "ef"]

    def test_with_overlap_matches_stride_enumeration(self):
        # Oracle: offsets advance by size - overlap until the doc is exhausted.
        doc, size, overlap = "abcdef", 4, 2
        expected = []
        start = 0
        while start < len(doc):
            expected.append(doc[start : start + size])
            start += size - overlap
        assert expected == ["abcd", "cdef", "ef"]
        assert texts(chunk_by_chars(doc, size, overlap)) == expected

    def test_empty_doc(self):
        assert chunk_by_chars("", 1000, 0) == []

    def test_bad_params(self):
        with pytest.raises(ValueError):
            chunk_by_chars("abc", 0, 0)
        with pytest.raises(ValueError):
            chunk_by_chars("abc", 4, 4)

    @given(st.text(min_size=1, max_size=300), st.integers(1, 50))
    def test_no_overlap_partitions_the_document(self, doc, size):
        chunks = chunk_by_chars(doc, size, 0)
        assert "".join(texts(chunks)) == doc
        position = 0
        for chunk in chunks:
            assert chunk.char_span[0] == position
            position = chunk.char_span[1]
        assert position == len(doc)

    @given(st.text(min_size=1, max_size=300), st.integers(2, 50), st.integers(0, 48))
    def test_spans_match_text(self, doc, size, overlap):
        overlap = min(overlap, size - 1)
        for chunk in chunk_by_chars(doc, size, overlap):
            start, end = chunk.char_span
            assert chunk.text == doc[start:end]


class TestChunkByPage:
    def test_three_pages(self):
        assert texts(chunk_by_page("p1\fp2\fp3")) == ["p1", "p2", "p3"]

    def test_single_page(self):
        assert texts(chunk_by_page("single page")) == ["single page"]

    def test_empty_pages_dropped(self):
        assert texts(chunk_by_page("a\f\fb")) == ["a", "b"]

    def test_custom_delimiter(self):
        assert texts(chunk_by_page("a--b--c", delimiter="--")) == ["a", "b", "c"]

    def test_chunk_ids_sequential(self):
        chunks = chunk_by_page("a\fb\fc", doc_index=2)
        assert [c.chunk_id for c in chunks] == ["2_0", "2_1", "2_2"]

    @given(st.lists(st.text(alphabet=st.characters(blacklist_characters="\f"),
                            max_size=20), max_size=10))
    def test_round_trip_modulo_empty_pages(self, pages):
        doc = "\f".join(pages)
        rebuilt = "\f".join(texts(chunk_by_page(doc)))
        assert rebuilt == "\f".join(p for p in pages if p)


class TestChunkOnMultiplePages:
    def test_seven_pages_in_fives(self):
        doc = "\f".join(f"page{i}" for i in range(7))
        chunks = chunk_on_multiple_pages(doc, 5)
        assert len(chunks) == 2
        assert chunks[0].text.count("\f") == 4  # 5 pages
        assert chunks[1].text.count("\f") == 1  # 2 pages

    def test_one_page_per_chunk_reduces_to_page_split(self):
        doc = "alpha\fbeta\f\fgamma"
        assert texts(chunk_on_multiple_pages(doc, 1)) == texts(chunk_by_page(doc))

    def test_hundred_pages_single_chunk(self):
        doc = "\f".join(f"p{i}" for i in range(100))
        chunks = chunk_on_multiple_pages(doc, 100)
        assert len(chunks) == 1
        assert chunks[0].text == doc

    def test_spans_match_source(self):
        doc = "a\fbb\fccc\fdddd\fe"
        for chunk in chunk_on_multiple_pages(doc, 2):
            start, end = chunk.char_span
            assert chunk.text == doc[start:end]

    def test_requires_positive_group(self):
        with pytest.raises(ValueError):
            chunk_on_multiple_pages("a\fb", 0)


class TestChunkBySection:
    def test_two_headings(self):
        assert texts(chunk_by_section("## A\nx\n## B\ny")) == ["## A\nx", "## B\ny"]

    def test_no_headings_whole_doc(self):
        assert texts(chunk_by_section("no headings here")) == ["no headings here"]

    def test_preamble_kept(self):
        doc = "intro\n## A\nx"
        chunks = chunk_by_section(doc)
        assert texts(chunks) == ["intro", "## A\nx"]
        for chunk in chunks:
            start, end = chunk.char_span
            assert chunk.text == doc[start:end]

    def test_setext_heading(self):
        doc = "Overview\n====\nbody\n## Next\nmore"
        assert texts(chunk_by_section(doc)) == ["Overview\n====\nbody", "## Next\nmore"]

    def test_empty_doc(self):
        assert chunk_by_section("") == []


class TestStrategy:
    def test_kind_strings_are_closed(self):
        with pytest.raises(ValueError):
            ChunkingStrategy("by_tokens")

    def test_by_chars_requires_size(self):
        with pytest.raises(ValueError):
            ChunkingStrategy("by_chars")

    def test_multi_page_requires_pages(self):
        with pytest.raises(ValueError):
            ChunkingStrategy("multi_page")

    def test_json_round_trip(self):
        strategy = ChunkingStrategy("by_chars", chunk_size_chars=100, overlap_chars=10)
        rebuilt = ChunkingStrategy.from_json_dict(strategy.to_json_dict())
        assert rebuilt == strategy

    def test_unknown_param_rejected(self):
        with pytest.raises(ValueError):
            ChunkingStrategy.from_json_dict(
                {"strategy": "by_page", "params": {"page_size": 3}}
            )

    def test_dispatch_matches_functions(self):
        doc = "a\fb\fc\fd"
        assert texts(ChunkingStrategy("by_page").split(doc)) == texts(chunk_by_page(doc))
        assert texts(
            ChunkingStrategy("multi_page", pages_per_chunk=2).split(doc)
        ) == texts(chunk_on_multiple_pages(doc, 2))

    def test_determinism(self):
        doc = "x" * 1000 + "\f" + "y" * 500
        for strategy in (
            ChunkingStrategy("by_chars", chunk_size_chars=64, overlap_chars=8),
            ChunkingStrategy("by_page"),
            ChunkingStrategy("by_section"),
            ChunkingStrategy("multi_page", pages_per_chunk=2),
        ):
            first = strategy.split(doc)
            second = strategy.split(doc)
            assert first == second
            starts = [c.char_span[0] for c in first]
            assert starts == sorted(starts)
