import random
from fractions import Fraction

import pytest
from conftest import write_repo

from protofsm.augment.code_filter import (
    DocumentMatch,
    FilterConfig,
    ancestors,
    builtin_keywords,
    format_selection,
    list_sources,
    parse_keywords,
    protocol_key,
    resolve_keywords,
    scan,
    select_module,
)
from protofsm.errors import ConfigError, EmptyRepo, NoModuleFound, RepoIOError, UnknownProtocol
from protofsm.model.utils import silent


KEYWORDS = """
# test keywords
[rfc]
IKE_SA_INIT
IKE_AUTH
CREATE_CHILD_SA

[expert]
word:SA
"""


@pytest.fixture
def keywords():
    return parse_keywords(KEYWORDS, "IKEv2")


@pytest.fixture
def planted_repo(tmp_path):
    return write_repo(
        tmp_path / "repo",
        {
            "src/ike/init.c": "int handle(void) { return IKE_SA_INIT; }\n",
            "src/ike/auth.c": "void ike_auth(void) { send(IKE_AUTH); }\n",
            "src/ike/child.c": "void child(void) { send(CREATE_CHILD_SA); }\n",
            "src/util/list.c": "struct node { struct node *next; };\n",
            "src/util/str.c": "int length(const char *s) { return 0; }\n",
            "src/util/mem.c": "void *grow(void *p) { return p; }\n",
            "main.c": "int main(void) { return 0; }\n",
            "docs/notes.md": "IKE_SA_INIT explained\n",
            ".git/config": "IKE_SA_INIT\n",
        },
    )


def test_parse_keywords_sections_and_tokens(keywords):
    assert [(k.pattern, k.source, k.whole_token) for k in keywords.keywords] == [
        ("IKE_SA_INIT", "rfc", False),
        ("IKE_AUTH", "rfc", False),
        ("CREATE_CHILD_SA", "rfc", False),
        ("SA", "expert", True),
    ]


def test_whole_token_matching(keywords):
    sa = keywords.keywords[-1]
    assert sa.count("ike_sa->state") == 1
    assert sa.count("SA_STATE") == 1
    assert sa.count("SAFE USAGE") == 0


def test_substring_matching_is_case_insensitive(keywords):
    assert dict(keywords.hits("s2n_IKE_sa_init_handler")) == {"IKE_SA_INIT": 1, "SA": 1}


def test_parse_keywords_errors():
    with pytest.raises(ConfigError):
        parse_keywords("[vendor]\nFOO\n", "x")
    with pytest.raises(ConfigError):
        parse_keywords("(unclosed\n", "x")
    with pytest.raises(ConfigError):
        parse_keywords("# only comments\n", "x")


def test_builtin_keywords():
    assert protocol_key("TLS 1.3") == "tls"
    assert protocol_key("IKEv2") == "ikev2"
    ks = builtin_keywords("IKEv2")
    assert any(k.pattern == "IKE_SA_INIT" for k in ks.keywords)
    assert builtin_keywords("tls").hits("s2n_client_hello_recv")


def test_unknown_protocol_needs_a_keyword_file(tmp_path):
    with pytest.raises(UnknownProtocol):
        resolve_keywords("gopher")
    path = tmp_path / "gopher.txt"
    path.write_text("GOPHER_MENU\n", encoding="utf-8")
    assert resolve_keywords("gopher", path).keywords[0].pattern == "GOPHER_MENU"


def test_ancestors():
    assert ancestors("src/sm/a.c") == [".", "src", "src/sm"]
    assert ancestors("a.c") == ["."]


def test_scan_marks_sources_and_skips_hidden(planted_repo, keywords):
    matches = scan(planted_repo, keywords, progress=silent)
    by_path = {m.path: m for m in matches}
    assert ".git/config" not in by_path
    assert not by_path["docs/notes.md"].is_source
    assert by_path["src/ike/init.c"].matched
    assert not by_path["src/util/list.c"].matched
    assert [m.path for m in matches] == sorted(by_path)


def test_scan_skips_binary_files(tmp_path, keywords, caplog):
    repo = write_repo(tmp_path, {"a.c": "IKE_AUTH\n", "blob.c": b"IKE_AUTH\x00\x01\x02"})
    matches = scan(repo, keywords, progress=silent)
    assert [m.path for m in matches] == ["a.c"]
    assert "skipping binary file blob.c" in caplog.text


def test_scan_empty_repo(tmp_path, keywords):
    repo = write_repo(tmp_path, {"README.md": "nothing here\n"})
    with pytest.raises(EmptyRepo):
        scan(repo, keywords, progress=silent)


def test_scan_missing_root(tmp_path, keywords):
    with pytest.raises(RepoIOError):
        scan(tmp_path / "missing", keywords, progress=silent)


def test_list_sources_respects_extensions(planted_repo):
    sources = list_sources(planted_repo, FilterConfig(extensions=(".C",)))
    assert "main.c" in sources
    assert "docs/notes.md" not in sources


def test_select_module_returns_planted_directory(planted_repo, keywords):
    selection = select_module(scan(planted_repo, keywords, progress=silent))
    assert selection.chosen_dir == "src/ike"
    assert selection.match_rate == Fraction(1)
    rows = {r.dir: r for r in selection.table}
    assert rows["."].rate == Fraction(3, 7)
    assert rows["src"].rate == Fraction(3, 6)
    assert rows["src/util"].rate == 0
    assert selection.to_document()["table"][0] == {"dir": "src/ike", "matched_docs": 3, "total_docs": 3, "rate": "1/1"}
    assert "src/ike" in format_selection(selection)


def test_select_module_tie_break_is_deterministic():
    matches = [
        DocumentMatch("b/x.c", True, True, (("K", 1),)),
        DocumentMatch("b/y.c", True, True, (("K", 1),)),
        DocumentMatch("a/x.c", True, True, (("K", 1),)),
        DocumentMatch("a/y.c", True, True, (("K", 1),)),
        DocumentMatch("c/x.c", True, False),
        DocumentMatch("c/y.c", True, False),
    ]
    expected = select_module(matches)
    assert expected.chosen_dir == "a"
    rng = random.Random(3)
    for _ in range(20):
        shuffled = matches[:]
        rng.shuffle(shuffled)
        assert select_module(shuffled) == expected


def test_select_module_prefers_more_matches_then_shallower():
    matches = [
        DocumentMatch("deep/er/x.c", True, True, (("K", 1),)),
        DocumentMatch("deep/er/y.c", True, True, (("K", 1),)),
        DocumentMatch("wide/a.c", True, True, (("K", 1),)),
        DocumentMatch("wide/b.c", True, True, (("K", 1),)),
        DocumentMatch("wide/c.c", True, True, (("K", 1),)),
    ]
    # "." has rate 1 with 5 matches and wins over every subdirectory
    assert select_module(matches).chosen_dir == "."
    assert select_module(matches[:2]).chosen_dir == "."


def test_select_module_min_docs():
    matches = [
        DocumentMatch("sm/a.c", True, True, (("K", 1),)),
        DocumentMatch("util/a.c", True, False),
        DocumentMatch("util/b.c", True, False),
    ]
    assert select_module(matches, min_docs=1).chosen_dir == "sm"
    assert select_module(matches, min_docs=2).chosen_dir == "."
    with pytest.raises(NoModuleFound):
        select_module(matches, min_docs=4)


def test_select_module_weighted_by_hits():
    matches = [
        DocumentMatch("few/a.c", True, True, (("K", 1),)),
        DocumentMatch("few/b.c", True, True, (("K", 1),)),
        DocumentMatch("many/a.c", True, True, (("K", 9),)),
        DocumentMatch("many/b.c", True, True, (("K", 9),)),
    ]
    assert select_module(matches).chosen_dir == "."
    weighted = select_module(matches, weight_by_hits=True, hit_saturation=5)
    assert weighted.chosen_dir == "many"
    assert weighted.match_rate == Fraction(1)


def test_select_module_without_any_match():
    with pytest.raises(NoModuleFound):
        select_module([DocumentMatch("a.c", True, False), DocumentMatch("b.c", True, False)])
