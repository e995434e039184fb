"""Registrable-domain (eTLD+1) lookup against a bundled public suffix list.

Rules follow the publicsuffix.org algorithm (exact, wildcard and exception
rules).  Names matching no rule fall back to their last two labels.
"""
from __future__ import annotations

import functools
import ipaddress
import re
from importlib import resources
from urllib.parse import urlsplit

_LABEL = re.compile(r"^[^\s/@:?#*]+$")


class DomainError(ValueError):
    pass


class SuffixList:
    def __init__(self, rules):
        self.exact: set[str] = set()
        self.wildcard: set[str] = set()
        self.exception: set[str] = set()
        for rule in rules:
            rule = rule.strip().lower()
            if not rule or rule.startswith("//"):
                continue
            rule = rule.split()[0]
            if rule.startswith("!"):
                self.exception.add(rule[1:])
            elif rule.startswith("*."):
                self.wildcard.add(rule[2:])
            else:
                self.exact.add(rule)

    @classmethod
    def from_file(cls, path: str) -> "SuffixList":
        with open(path, encoding="utf-8") as fh:
            return cls(fh)

    def public_suffix_length(self, labels: list[str]) -> int:
        """Number of trailing labels forming the public suffix."""
        best = 1  # implicit "*" rule
        for i in range(len(labels)):
            candidate = ".".join(labels[i:])
            n = len(labels) - i
            if candidate in self.exception:
                return n - 1
            if candidate in self.exact:
                best = max(best, n)
            parent = ".".join(labels[i + 1:])
            if parent and parent in self.wildcard:
                best = max(best, n)
        return best

    def registrable_domain(self, name: str) -> str:
        host = normalize_host(name)
        try:
            ipaddress.ip_address(host)
            return host
        except ValueError:
            pass
        labels = host.split(".")
        if not all(_LABEL.match(l) for l in labels):
            raise DomainError(f"unparseable domain {name!r}")
        n = self.public_suffix_length(labels)
        if n >= len(labels):
            # the name is itself a public suffix
            return host
        return ".".join(labels[-(n + 1):])


def normalize_host(name: str) -> str:
    if not isinstance(name, str) or not name.strip():
        raise DomainError(f"unparseable domain {name!r}")
    host = name.strip().lower()
    if "://" in host:
        host = urlsplit(host).hostname or ""
    else:
        host = host.split("/", 1)[0]
        if host.count(":") == 1:
            host = host.split(":", 1)[0]
    host = host.strip(".")
    if not host or " " in host:
        raise DomainError(f"unparseable domain {name!r}")
    return host


@functools.lru_cache(maxsize=1)
def default_suffix_list() -> SuffixList:
    text = resources.files("wfbench").joinpath("data/public_suffix_list.dat").read_text(encoding="utf-8")
    return SuffixList(text.splitlines())


@functools.lru_cache(maxsize=65536)
def etld1(name: str) -> str:
    """Registrable domain of a host name or URL using the bundled list."""
    return default_suffix_list().registrable_domain(name)
