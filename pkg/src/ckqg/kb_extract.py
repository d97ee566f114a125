"""Knowledge triple retrieval and alignment filtering.

Triples come from tab-separated KB dumps. For a (passage, question) pair we
retrieve every triple whose head shares a non-stop token with the passage,
then keep only triples whose head appears contiguously in the passage and
whose tail appears contiguously in the question (swapping head and tail when
the match is reversed). Matching is surface-form: lowercased tokens with
surrounding punctuation stripped, no lemmatization.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

RELATIONS = ("Synonymy", "RelatedTo", "IsA", "Hypernymy", "Hyponymy", "Others")
RELATION_IDS = {r: i for i, r in enumerate(RELATIONS)}
SOURCES = ("ConceptNet", "WordNet")

_CANONICAL = {r.lower(): r for r in RELATIONS[:-1]}


class KBParseError(ValueError):
    pass


def normalize_relation(raw: str) -> str:
    """Map a raw relation string onto the six labels; unknown → Others."""
    return _CANONICAL.get(raw.strip().lower(), "Others")


def normalize_token(token: str) -> str:
    return token.lower().strip(string.punctuation)


def concept_tokens(concept: str) -> tuple[str, ...]:
    """Normalized token sequence of a (possibly multi-word) concept."""
    return tuple(t for t in (normalize_token(p) for p in concept.split()) if t)


@dataclass(frozen=True)
class KnowledgeTriple:
    head: str
    relation: str
    tail: str
    source: str


@dataclass(frozen=True)
class AlignedTriple:
    """A kept triple with its match locations.

    head_positions index into the passage, tail_positions into the question;
    swapped records that the stored orientation reverses the KB entry.
    """
    triple: KnowledgeTriple
    head_positions: tuple[int, ...]
    tail_positions: tuple[int, ...]
    swapped: bool = False


class TripleStore:
    """Deduplicated triples plus a head-token inverted index.

    Read-only after loading; the index maps each token of each head to the
    ids of triples it occurs in, so retrieval is a token-lookup union.
    """

    def __init__(self):
        self.triples: list[KnowledgeTriple] = []
        self._seen: set[tuple[str, str, str, str]] = set()
        self.index: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.triples)

    def add(self, triple: KnowledgeTriple) -> None:
        key = (triple.head, triple.relation, triple.tail, triple.source)
        if key in self._seen:
            return
        self._seen.add(key)
        tid = len(self.triples)
        self.triples.append(triple)
        for tok in set(concept_tokens(triple.head)):
            self.index.setdefault(tok, []).append(tid)


def load_knowledge_base(path: str | Path, source: str) -> TripleStore:
    """Parse a `head<TAB>relation<TAB>tail` dump into a TripleStore.

    Lines starting with '#' and blank lines are skipped. A line with the
    wrong field count, or one whose head or tail is empty after
    normalization, is a parse error reported with its line number.
    """
    if source not in SOURCES:
        raise ValueError(f"unknown KB source '{source}'")
    store = TripleStore()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise KBParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            head = " ".join(concept_tokens(fields[0]))
            tail = " ".join(concept_tokens(fields[2]))
            if not head or not tail:
                raise KBParseError(f"{path}:{lineno}: empty concept after normalization")
            store.add(KnowledgeTriple(head, normalize_relation(fields[1]), tail, source))
    return store


def load_stopwords(path: str | Path) -> frozenset[str]:
    words = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            word = line.strip()
            if word and not word.startswith("#"):
                words.add(word)
    return frozenset(words)


def retrieve_candidates(passage_tokens: list[str], stopwords: frozenset[str],
                        store: TripleStore) -> list[KnowledgeTriple]:
    """All triples whose head shares a non-stop token with the passage.

    Tokens must already be normalized the same way the store was built
    (lowercase, punctuation-stripped). Result order is store insertion order.
    """
    hits: set[int] = set()
    for tok in passage_tokens:
        if tok and tok not in stopwords:
            hits.update(store.index.get(tok, ()))
    return [store.triples[i] for i in sorted(hits)]


def find_span(needle: tuple[str, ...], haystack: list[str]) -> tuple[int, ...] | None:
    """Indices of the first contiguous occurrence of needle, or None."""
    n = len(needle)
    if n == 0 or n > len(haystack):
        return None
    for start in range(len(haystack) - n + 1):
        if tuple(haystack[start:start + n]) == needle:
            return tuple(range(start, start + n))
    return None


def align_filter(candidates: list[KnowledgeTriple], passage_tokens: list[str],
                 question_tokens: list[str]) -> list[AlignedTriple]:
    """Keep triples bridging passage and question.

    A candidate survives iff its head occurs contiguously in the passage and
    its tail occurs contiguously in the question. When the reverse holds
    (head in question, tail in passage) the triple is kept with head and
    tail swapped so the stored head is always the passage-side concept.
    """
    kept: list[AlignedTriple] = []
    for cand in candidates:
        head_toks = concept_tokens(cand.head)
        tail_toks = concept_tokens(cand.tail)
        hp = find_span(head_toks, passage_tokens)
        tp = find_span(tail_toks, question_tokens)
        if hp is not None and tp is not None:
            kept.append(AlignedTriple(cand, hp, tp, swapped=False))
            continue
        hp = find_span(tail_toks, passage_tokens)
        tp = find_span(head_toks, question_tokens)
        if hp is not None and tp is not None:
            flipped = KnowledgeTriple(cand.tail, cand.relation, cand.head, cand.source)
            kept.append(AlignedTriple(flipped, hp, tp, swapped=True))
    return kept


def merge_dedup(a: list[AlignedTriple], b: list[AlignedTriple]) -> list[AlignedTriple]:
    """Concatenate keeping first occurrence per (head, relation, tail).

    The key ignores source so the same fact from both KBs collapses to one.
    """
    out: list[AlignedTriple] = []
    seen: set[tuple[str, str, str]] = set()
    for item in list(a) + list(b):
        key = (item.triple.head, item.triple.relation, item.triple.tail)
        if key not in seen:
            seen.add(key)
            out.append(item)
    return out


def select_training_triple(aligned: list[AlignedTriple]) -> AlignedTriple | None:
    """Pick the triple to train on: Synonymy first, then the label order,
    with list position breaking ties."""
    if not aligned:
        return None
    return min(enumerate(aligned),
               key=lambda it: (RELATION_IDS[it[1].triple.relation], it[0]))[1]


def extract_for_sample(passage_tokens: list[str], question_tokens: list[str],
                       stopwords: frozenset[str],
                       stores: list[TripleStore]) -> list[AlignedTriple]:
    """Retrieve + filter against each store, then merge across sources."""
    merged: list[AlignedTriple] = []
    for store in stores:
        cands = retrieve_candidates(passage_tokens, stopwords, store)
        merged = merge_dedup(merged, align_filter(cands, passage_tokens, question_tokens))
    return merged


def partition_dataset(samples):
    """Split into (equipped, pure): equipped samples carry ≥1 aligned triple.

    Accepts any objects with a `triples` attribute; relative order kept.
    """
    equipped = [s for s in samples if s.triples]
    pure = [s for s in samples if not s.triples]
    return equipped, pure


@dataclass
class StatsReport:
    total_samples: int
    equipped_count: int
    pure_count: int
    equipped_fraction: float
    triples_per_equipped_sample: float
    relation_histogram: dict[str, float]


def stats_report(equipped, pure) -> StatsReport:
    total = len(equipped) + len(pure)
    counts = {r: 0 for r in RELATIONS}
    n_triples = 0
    for s in equipped:
        for item in s.triples:
            counts[item.triple.relation] += 1
            n_triples += 1
    hist = {r: (counts[r] / n_triples if n_triples else 0.0) for r in RELATIONS}
    return StatsReport(
        total_samples=total,
        equipped_count=len(equipped),
        pure_count=len(pure),
        equipped_fraction=(len(equipped) / total if total else 0.0),
        triples_per_equipped_sample=(
            sum(len(s.triples) for s in equipped) / len(equipped) if equipped else 0.0),
        relation_histogram=hist,
    )
