import pytest

from wfbench.suffix import DomainError, SuffixList, etld1, normalize_host


@pytest.mark.parametrize("name,expected", [
    ("img.example.com", "example.com"),
    ("www.example.com", "example.com"),
    ("example.com", "example.com"),
    ("a.b.example.co.uk", "example.co.uk"),
    ("fonts.gstatic.com", "gstatic.com"),
    ("https://www.Example.COM:8443/path?q=1", "example.com"),
    ("cdn.example.com.", "example.com"),
    ("203.0.113.7", "203.0.113.7"),
    ("host.internal-unknown-tld", "host.internal-unknown-tld"),
    ("a.b.c.unknowntld", "c.unknowntld"),
])
def test_bundled_list(name, expected):
    assert etld1(name) == expected


def test_platform_suffixes_are_public():
    # github.io is a private-section suffix in the list
    assert etld1("user.github.io") == "user.github.io"
    assert etld1("fbcdn.net") != etld1("facebook.com")


def test_rules_wildcard_and_exception():
    psl = SuffixList(["// comment", "com", "*.ck", "!www.ck", "uk", "co.uk"])
    assert psl.registrable_domain("a.b.ck") == "a.b.ck"
    assert psl.registrable_domain("x.a.b.ck") == "a.b.ck"
    assert psl.registrable_domain("www.ck") == "www.ck"
    assert psl.registrable_domain("sub.www.ck") == "www.ck"
    assert psl.registrable_domain("x.y.co.uk") == "y.co.uk"
    # a bare public suffix is returned unchanged
    assert psl.registrable_domain("co.uk") == "co.uk"


@pytest.mark.parametrize("bad", ["", "   ", "a b.com", "http://", "x@y.com"])
def test_unparseable(bad):
    with pytest.raises(DomainError):
        etld1(bad)


def test_normalize_host():
    assert normalize_host("Example.com:80") == "example.com"
    assert normalize_host("example.com/a/b") == "example.com"
