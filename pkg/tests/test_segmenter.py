import dataclasses
import random

import pytest

from protofsm.augment.segmenter import (
    Segmenter,
    SegmenterConfig,
    SeparatorTable,
    chunk_manifest,
    detect_language,
    load_separator_tables,
    read_chunk_manifest,
    reconstruct,
    segment,
    write_chunk_manifest,
)
from protofsm.errors import ConfigError, IntegrityError


ALPHABET = "abcdefghij    \n\n\t{}();*#_=+-/"


def random_document(rng: random.Random) -> str:
    return "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 3000)))


def random_c_file(rng: random.Random, index: int) -> str:
    parts = [f"/* generated source {index} */\n#include <stdio.h>\n\n"]
    for i in range(rng.randint(1, 12)):
        kind = rng.random()
        if kind < 0.2:
            fields = "".join(f"    int field_{j};\n" for j in range(rng.randint(1, 8)))
            parts.append(f"typedef struct {{\n{fields}}} type_{i}_t;\n\n")
        elif kind < 0.3:
            values = ",\n".join(f"    VALUE_{i}_{j}" for j in range(rng.randint(1, 6)))
            parts.append(f"enum kind_{i} {{\n{values}\n}};\n\n")
        else:
            body = "".join(f"    counter += {j};\n" for j in range(rng.randint(1, 60)))
            parts.append(f"static int handler_{i}(int counter)\n{{\n{body}    return counter;\n}}\n\n")
    return "".join(parts)


def check_properties(text: str, chunks, config: SegmenterConfig):
    assert reconstruct(chunks) == text
    for chunk in chunks:
        assert len(chunk.core) <= config.max_chunk_size
        if len(chunks) > 1:
            assert len(chunk.core) >= config.min_chunk_size
    for prev, chunk in zip(chunks, chunks[1:]):
        assert chunk.overlap_len == min(config.overlap, len(prev.core))
        if chunk.overlap_len:
            assert chunk.text[: chunk.overlap_len] == prev.core[-chunk.overlap_len :]
    if chunks:
        assert chunks[0].overlap_len == 0


def test_random_documents_keep_every_bound():
    rng = random.Random(2024)
    for _ in range(200):
        max_size = rng.randint(20, 400)
        config = SegmenterConfig(
            max_chunk_size=max_size,
            min_chunk_size=rng.randint(0, max_size // 2),
            overlap=rng.randint(0, max_size - 1),
        )
        text = random_document(rng)
        doc_path = rng.choice(["a.c", "b.py", "c.txt", "d.go"])
        check_properties(text, segment(text, config, doc_path), config)


def test_c_corpus_keeps_every_bound():
    rng = random.Random(50)
    config = SegmenterConfig(max_chunk_size=600, min_chunk_size=150, overlap=80)
    segmenter = Segmenter(config)
    for i in range(60):
        text = random_c_file(rng, i)
        check_properties(text, segmenter.segment(text, f"src/file_{i}.c"), config)


def test_c_chunks_start_at_function_headers():
    text = "".join(f"int f{i}(void)\n{{\n" + "    x++;\n" * 10 + "}\n\n" for i in range(3))
    config = SegmenterConfig(max_chunk_size=150, min_chunk_size=50, overlap=0)
    chunks = segment(text, config, "sm.c")
    assert [c.start for c in chunks] == [0, 108, 216]
    assert all(c.core.startswith("int f") for c in chunks)


def test_small_document_is_one_chunk():
    chunks = segment("int x;\n", SegmenterConfig(max_chunk_size=100, min_chunk_size=50, overlap=10), "a.c")
    assert len(chunks) == 1
    assert chunks[0].text == "int x;\n"
    assert chunks[0].ref == "a.c#0"


def test_empty_document():
    assert segment("", doc_path="a.c") == []
    assert reconstruct([]) == ""


def test_fixed_language_ignores_syntax():
    text = "int f(void)\n{\n}\n" * 40
    config = SegmenterConfig(max_chunk_size=100, min_chunk_size=10, overlap=0, language="fixed")
    chunks = segment(text, config, "a.c")
    assert [c.start for c in chunks[:-1]] == list(range(0, 100 * (len(chunks) - 1), 100))
    assert reconstruct(chunks) == text


def test_invalid_utf8_is_replaced(caplog):
    chunks = segment(b"abc\xff\ndef\n", doc_path="bad.c")
    assert "�" in chunks[0].text
    assert "invalid UTF-8 replaced" in caplog.text


def test_reconstruct_detects_gaps_and_bad_ordinals():
    text = "line\n" * 200
    chunks = segment(text, SegmenterConfig(max_chunk_size=100, min_chunk_size=20, overlap=10), "a.txt")
    with pytest.raises(IntegrityError):
        reconstruct([chunks[0], chunks[2]])
    shifted = dataclasses.replace(chunks[1], start=chunks[1].start + 1)
    with pytest.raises(IntegrityError):
        reconstruct([chunks[0], shifted, *chunks[2:]])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"max_chunk_size": 0},
        {"max_chunk_size": 100, "min_chunk_size": 100},
        {"max_chunk_size": 100, "min_chunk_size": 10, "overlap": 100},
        {"chars_per_token": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SegmenterConfig(**kwargs)


def test_separator_table_must_end_with_empty_pattern():
    with pytest.raises(ConfigError):
        SeparatorTable("x", ("\n",))
    with pytest.raises(ConfigError):
        SeparatorTable("x", ("(", ""))


def test_separator_override_is_merged(tmp_path):
    override = tmp_path / "separators.yaml"
    override.write_text("languages:\n  text:\n    - '(?<=;)'\n    - ''\n", encoding="utf-8")
    tables = load_separator_tables(str(override))
    assert tables["text"].separators == ("(?<=;)", "")
    assert "c" in tables
    segmenter = Segmenter(SegmenterConfig(max_chunk_size=8, min_chunk_size=0, overlap=0), tables)
    chunks = segmenter.segment("aaa;bbb;ccc;", "x.txt")
    assert [c.core for c in chunks] == ["aaa;bbb;", "ccc;"]


def test_detect_language():
    assert detect_language("src/a.h") == "c"
    assert detect_language("src/a.HPP") == "cpp"
    assert detect_language("lib/x.rs") == "text"


def test_chunk_manifest_round_trip(tmp_path):
    chunks = segment("line\n" * 50, SegmenterConfig(max_chunk_size=60, min_chunk_size=10, overlap=5), "a.txt")
    path = write_chunk_manifest(chunks, tmp_path / "chunks.json")
    assert read_chunk_manifest(path) == chunk_manifest(chunks)
    assert read_chunk_manifest(path)[1]["overlap_len"] == 5
