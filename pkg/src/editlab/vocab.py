"""Tiny word-level vocabulary and a greedy longest-match tokenizer."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import BadToken, EmptyInput

BOS = "<bos>"
UNK = "<unk>"
EOS = "<eos>"
SPECIALS = (BOS, UNK, EOS)

FUNCTION_WORDS = (
    "Q", ":", "?", ".", ",", "the", "of", "is", "in", "at", "a", "by", "for",
    "to", "and", "tell", "me", "about", "what", "who", "where", "does", "work",
    "live", "speak", "play", "known", "as",
)
RELATION_WORDS = (
    "employer", "city", "language", "sport", "home", "team", "capital", "author",
)
SUBJECTS = (
    "Mike", "John", "Anna", "Sara", "Omar", "Liam", "Emma", "Noah", "Olga",
    "Ivan", "Yuki", "Kenji", "Ravi", "Priya", "Lena", "Hugo", "Nina", "Paul",
    "Rosa", "Tariq", "Mei", "Chen", "Ada", "Alan", "Grace", "Linus", "Marie",
    "Niels", "Carl", "Elsa", "Felix", "Greta", "Hans", "Ines", "Jonas", "Karl",
    "Lara", "Milo", "Nora", "Otto", "Pia", "Quinn", "Rita", "Sven", "Tom",
    "Uma", "Vera", "Wes", "Xena", "Yara", "Zoe", "Bruno", "Clara", "Dario",
)
OBJECT_WORDS = (
    "Illinois", "Massachusetts", "Institute", "Technology", "Apple", "Google",
    "Paris", "London", "Berlin", "Tokyo", "Rome", "Madrid", "Oslo", "Cairo",
    "Lima", "French", "German", "Spanish", "English", "Japanese", "chess",
    "tennis", "soccer", "golf", "rugby", "New", "York", "Stanford",
    "University", "Oxford", "Boston", "Chicago",
)


@dataclass(frozen=True)
class Vocab:
    """Ordered list of distinct token strings with a reserved BOS and UNK marker.

    ``EOS`` is optional; when present it is used as the decoding stop token.
    """

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(tokens) < 4:
            raise ValueError("vocabulary needs at least 4 tokens")
        index = {tok: i for i, tok in enumerate(tokens)}
        if len(index) != len(tokens):
            raise ValueError("vocabulary tokens must be distinct")
        for marker in (BOS, UNK):
            if marker not in index:
                raise ValueError(f"vocabulary is missing the {marker} marker")
        if any(not tok for tok in tokens):
            raise ValueError("empty token string")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def eos_id(self) -> int | None:
        return self._index.get(EOS)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise BadToken(f"token {token!r} not in vocabulary") from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise BadToken(f"token id {token_id} out of range [0, {len(self.tokens)})")
        return self.tokens[token_id]

    def matchable(self) -> list[tuple[str, int]]:
        """Non-special tokens, longest first (ties by id) for longest-match scanning."""
        items = [(t, i) for i, t in enumerate(self.tokens) if t not in SPECIALS]
        items.sort(key=lambda ti: (-len(ti[0]), ti[1]))
        return items


def default_vocab() -> Vocab:
    return Vocab(SPECIALS + FUNCTION_WORDS + RELATION_WORDS + SUBJECTS + OBJECT_WORDS)


def _encode(text: str, vocab: Vocab) -> list[int]:
    candidates = vocab.matchable()
    ids: list[int] = []
    i, n = 0, len(text)
    in_unknown = False
    while i < n:
        if text[i].isspace():
            i += 1
            in_unknown = False
            continue
        for tok, tid in candidates:
            if text.startswith(tok, i):
                ids.append(tid)
                i += len(tok)
                in_unknown = False
                break
        else:
            # a run of unmatched characters collapses into a single UNK
            if not in_unknown:
                ids.append(vocab.unk_id)
                in_unknown = True
            i += 1
    return ids


def tokenize(text: str, vocab: Vocab, add_bos: bool = True) -> list[int]:
    """Greedy longest-match tokenization; whitespace separates tokens and is dropped.

    Raises:
        EmptyInput: if ``text`` has no non-whitespace characters.
    """
    if not text or not text.strip():
        raise EmptyInput("cannot tokenize empty text")
    ids = _encode(text, vocab)
    return [vocab.bos_id] + ids if add_bos else ids


def encode_answer(text: str, vocab: Vocab) -> list[int]:
    """Tokenize an answer string (no BOS)."""
    return tokenize(text, vocab, add_bos=False)


def detokenize(ids, vocab: Vocab) -> str:
    skip = {vocab.bos_id}
    if vocab.eos_id is not None:
        skip.add(vocab.eos_id)
    return " ".join(vocab.token_of(int(i)) for i in ids if int(i) not in skip)
