"""Bundled toy fixtures: a 20-sample corpus, two KB slices, and stopwords.

These exist so the test suite and CLI examples run without external data.
They are installed as regular files, so paths work with plain open().
"""

from importlib import resources


def asset_path(name: str):
    """Filesystem path of a bundled data file."""
    return resources.files(__package__) / name


MINI_CORPUS = "mini_corpus.jsonl"
KB_CONCEPTNET = "mini_kb_conceptnet.tsv"
KB_WORDNET = "mini_kb_wordnet.tsv"
STOPWORDS = "stopwords.txt"
