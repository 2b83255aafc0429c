"""Prompt templates, stored as versioned in-package text resources.

Placeholders use single braces and are substituted with ``str.replace``:
{n}, {query}, {embedding}, {content}. Each {embedding} expands to exactly one
passage-special position when assembled.

The rank templates keep the per-candidate prompt cost at exactly one
position: the only per-candidate literal text is the bracket pair around the
special slot, and brackets are punctuation the hashing tokenizer drops. This
is what makes the measured prompt length grow by exactly one token per added
candidate, matching the closed-form cost model.
"""

from __future__ import annotations

from dataclasses import dataclass

TEMPLATE_VERSION = "v1"


@dataclass(frozen=True)
class RankTemplate:
    kind: str
    preamble: str
    passage_block: str
    epilogue: str


RANK_EMBEDDING_ONLY = RankTemplate(
    kind="rank-embedding-only",
    preamble=(
        "I will provide you with {n} passages, each with a special token "
        "representing the passage enclosed in []. Rank the passages based on "
        "their relevance to the search query: {query}."
    ),
    passage_block=" [{embedding}]",
    epilogue=(
        " Search Query: {query} Rank the {n} passages above based on their "
        "relevance to the search query in descending order. Only output the "
        "{n} unique special token in the ranking."
    ),
)

RANK_WITH_CONTENT = RankTemplate(
    kind="rank-embedding-plus-content",
    preamble=(
        "I will provide you with {n} passages, each with a special token "
        "representing the passage enclosed in [], followed by the original "
        "text. Rank the passages based on their relevance to the search "
        "query: {query}."
    ),
    passage_block=" [{embedding}] {content}",
    epilogue=RANK_EMBEDDING_ONLY.epilogue,
)

# Instruction variants for the text-reconstruction stage; one is drawn
# uniformly per sample.
ALIGN_TEMPLATES: tuple[str, ...] = (
    "Given the passage: {embedding}, reconstruct the original text.",
    "Passage: {embedding} means the same as",
    "Passage: {embedding} Can you say the above text again?",
    "{embedding} Please provide a reconstruction of the preceding passage.",
    "Passage: {embedding} is about what?",
    "{embedding} Could you give me a different version of the passage above?",
    "Passage: {embedding} Please offer a restatement of the provided passage.",
    "Passage: {embedding}, which means:",
)
