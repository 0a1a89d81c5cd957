"""Dialogue ingestion, tokenization, vocabulary, and example carving.

Input corpora are UTF-8 JSON arrays of records
``{"situation": str, "problem_type": str, "dialog": [{"speaker", "content"}]}``
with speakers drawn from {seeker, supporter}. Each supporter turn that has at
least one earlier seeker turn yields one training example: the [CLS]/[SEP]
joined context prefix, the situation, the most recent seeker utterance span,
and the supporter turn as the decoding target.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

SEEKER = "seeker"
SUPPORTER = "supporter"

PAD, UNK, CLS, SEP, BOS, EOS = 0, 1, 2, 3, 4, 5
RESERVED_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"]

# Closed label set shipped with the repo, mirroring the dataset's 12
# distress categories. Configs may override, but unknown labels are
# always rejected (the classifier head has fixed width).
PROBLEM_TYPES = [
    "academic pressure",
    "alcohol abuse",
    "appearance anxiety",
    "breakup with partner",
    "conflict with parents",
    "issues with children",
    "job crisis",
    "ongoing depression",
    "problems with friends",
    "procrastination",
    "school bullying",
    "sleep problems",
]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_SPECIAL_RE = re.compile(r"(\[PAD\]|\[UNK\]|\[CLS\]|\[SEP\]|\[BOS\]|\[EOS\])")


class CorpusFormatError(ValueError):
    """Input file does not parse as a dialogue corpus."""


class LabelError(ValueError):
    """A record carries a problem type outside the closed label set."""


class ValidationError(ValueError):
    """A record violates a structural invariant."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; punctuation marks stay
    as their own tokens. Reserved markers like [SEP] survive as single tokens
    so decoded contexts re-encode to the same ids."""
    out: list[str] = []
    for part in _SPECIAL_RE.split(text):
        if not part:
            continue
        if part in RESERVED_TOKENS:
            out.append(part)
        else:
            out.extend(_TOKEN_RE.findall(part.lower()))
    return out


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


@dataclass
class Dialogue:
    situation: str
    problem_type: str
    turns: list[tuple[str, str]]  # (speaker, text)
    dialogue_id: int = 0


@dataclass
class Vocab:
    """Token/id mapping with six reserved ids pinned at 0..5."""

    token_to_id: dict[str, int]
    id_to_token: list[str]

    def __len__(self):
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, text: str) -> list[int]:
        return [self.encode_token(t) for t in tokenize(text)]

    def decode(self, ids: list[int]) -> str:
        return detokenize([self.id_to_token[i] for i in ids])

    def save(self, path):
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        id_to_token: list[str] = []
        for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            if not line:
                continue
            try:
                tok, idx = line.split("\t")
            except ValueError:
                raise CorpusFormatError(f"vocab line {ln}: expected 'token<TAB>id'") from None
            if int(idx) != len(id_to_token):
                raise CorpusFormatError(f"vocab line {ln}: non-contiguous id {idx}")
            id_to_token.append(tok)
        if id_to_token[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise CorpusFormatError("vocab file must start with the six reserved tokens")
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token)

    def content_hash(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()


@dataclass
class TrainingExample:
    """One supporter turn carved from a dialogue, ready for encoding.

    last_seeker_span is a half-open (start, stop) position range within
    context_ids covering the kept tokens of the most recent seeker utterance.
    """

    context_ids: list[int]
    situation_ids: list[int]
    intention_text: str
    last_seeker_span: tuple[int, int]
    target_ids: list[int]
    label_id: int
    dialogue_id: int = 0
    seeker_turn_index: int = 0
    last_seeker_text: str = ""


def load_corpus(path, problem_types: list[str] | None = None) -> list[Dialogue]:
    """Parse a JSON corpus file into dialogues, validating structure and labels."""
    labels = problem_types if problem_types is not None else PROBLEM_TYPES
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(records, list):
        raise CorpusFormatError(f"{path}: expected a JSON array of dialogue records")
    dialogues = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "situation" not in rec or "dialog" not in rec:
            raise CorpusFormatError(f"record {i}: expected keys situation/problem_type/dialog")
        if "problem_type" not in rec or rec["problem_type"] not in labels:
            raise LabelError(f"record {i}: unknown problem_type {rec.get('problem_type')!r}")
        turns = []
        if not rec["dialog"]:
            raise ValidationError(f"record {i}: empty turn list")
        for j, turn in enumerate(rec["dialog"]):
            if not isinstance(turn, dict) or "speaker" not in turn or "content" not in turn:
                raise CorpusFormatError(f"record {i} turn {j}: expected speaker/content")
            if turn["speaker"] not in (SEEKER, SUPPORTER):
                raise ValidationError(f"record {i} turn {j}: unknown speaker {turn['speaker']!r}")
            turns.append((turn["speaker"], turn["content"]))
        dialogues.append(Dialogue(rec["situation"], rec["problem_type"], turns, dialogue_id=i))
    return dialogues


def build_vocab(dialogues: list[Dialogue], min_freq: int = 1) -> Vocab:
    """Count tokens over situations and turns; keep those with frequency >=
    min_freq, ordered by (frequency desc, token asc) after the reserved ids."""
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    for d in dialogues:
        counts.update(tokenize(d.situation))
        for _, text in d.turns:
            counts.update(tokenize(text))
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq and t not in RESERVED_TOKENS),
        key=lambda t: (-counts[t], t),
    )
    id_to_token = RESERVED_TOKENS + kept
    return Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def _truncate_context(pieces: list[list[int]], last_seeker_idx: int, max_len: int):
    """Front-truncate [CLS] + SEP-terminated utterances to max_len tokens.

    Whole utterances older than the last seeker utterance go first; if the
    remainder still overflows (or the seeker utterance alone is longer than
    max_len - 3) the seeker utterance loses tokens from its own front, but
    never below one token. Utterances trailing the seeker turn are dropped
    whole, oldest first, only as a last resort.
    """
    kept = [list(p) for p in pieces]
    start = 0
    total = 1 + sum(len(p) for p in kept)
    while total > max_len and start < last_seeker_idx:
        total -= len(kept[start])
        start += 1
    seeker = kept[last_seeker_idx]
    utter_len = len(seeker) - 1  # excluding the terminating [SEP]
    keep_tokens = utter_len
    if utter_len > max_len - 3:
        keep_tokens = max_len - 3
    overflow = total - max_len
    if overflow > 0:
        keep_tokens = min(keep_tokens, utter_len - overflow)
    keep_tokens = max(1, keep_tokens)
    if keep_tokens < utter_len:
        total -= utter_len - keep_tokens
        kept[last_seeker_idx] = seeker[utter_len - keep_tokens:]
    drop_after = last_seeker_idx + 1
    while total > max_len and drop_after < len(kept):
        total -= len(kept[drop_after])
        kept[drop_after] = []
        drop_after += 1
    return kept[start:], last_seeker_idx - start


def make_examples(d: Dialogue, vocab: Vocab, max_len: int,
                  max_target_len: int = 40,
                  problem_types: list[str] | None = None) -> list[TrainingExample]:
    """Carve one example per supporter turn that follows at least one seeker
    turn. Contexts are [CLS]-prefixed, [SEP]-terminated per utterance, and
    front-truncated to max_len while always keeping the most recent seeker
    utterance's tokens (the local-connection span)."""
    if max_len < 8:
        raise ValueError(f"max_len must be >= 8, got {max_len}")
    examples = []
    situation_ids = [vocab.encode_token(t) for t in tokenize(d.situation)]
    label_id = label_index(d.problem_type, problem_types)
    for t_idx, (speaker, text) in enumerate(d.turns):
        if speaker != SUPPORTER:
            continue
        prefix = d.turns[:t_idx]
        pieces = [
            [vocab.encode_token(tok) for tok in tokenize(txt)] + [SEP]
            for _, txt in prefix
        ]
        # the local-connection span needs tokens, so skip empty seeker turns
        seeker_turns = [
            j for j, (s, _) in enumerate(prefix) if s == SEEKER and len(pieces[j]) > 1
        ]
        if not seeker_turns:
            continue
        last_seeker = seeker_turns[-1]
        kept, seeker_pos = _truncate_context(pieces, last_seeker, max_len)
        context_ids = [CLS]
        span = (0, 0)
        for j, piece in enumerate(kept):
            if j == seeker_pos:
                span = (len(context_ids), len(context_ids) + len(piece) - 1)
            context_ids.extend(piece)
        target_tokens = [vocab.encode_token(tok) for tok in tokenize(text)][:max_target_len]
        examples.append(
            TrainingExample(
                context_ids=context_ids,
                situation_ids=situation_ids,
                intention_text="",
                last_seeker_span=span,
                target_ids=[BOS] + target_tokens + [EOS],
                label_id=label_id,
                dialogue_id=d.dialogue_id,
                seeker_turn_index=last_seeker,
                last_seeker_text=prefix[last_seeker][1],
            )
        )
    return examples


def label_index(problem_type: str, problem_types: list[str] | None = None) -> int:
    labels = problem_types if problem_types is not None else PROBLEM_TYPES
    try:
        return labels.index(problem_type)
    except ValueError:
        raise LabelError(f"unknown problem_type {problem_type!r}") from None
