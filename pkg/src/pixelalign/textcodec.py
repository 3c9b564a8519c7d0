"""Word-level vocabulary and tokenizer for the closed caption grammar."""

from __future__ import annotations

from dataclasses import dataclass, field

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_VOCAB = 256


@dataclass
class Vocabulary:
    word_to_id: dict[str, int]
    id_to_word: dict[int, str] = field(init=False)

    def __post_init__(self):
        self.id_to_word = {i: w for w, i in self.word_to_id.items()}

    def __len__(self) -> int:
        return len(self.word_to_id)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    def encode(self, text: str) -> list[int]:
        """Whitespace-tokenize and map to ids; unknown words become UNK."""
        return [self.word_to_id.get(w, UNK_ID) for w in text.split()]

    def decode(self, ids) -> str:
        """Inverse of encode for in-vocab text; raises on out-of-range ids."""
        words = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.word_to_id):
                raise ValueError(f"token id {i} out of range for vocabulary of size {len(self)}")
            words.append(self.id_to_word[i])
        return " ".join(words)

    def save(self, path) -> None:
        lines = [f"{self.id_to_word[i]}\t{i}" for i in range(len(self))]
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def build_vocab(corpus) -> Vocabulary:
    """Build a vocabulary from caption strings: specials first, then words sorted lexicographically."""
    if not corpus:
        raise ValueError("build_vocab requires a nonempty corpus")
    words = set()
    for caption in corpus:
        words.update(caption.split())
    words -= set(SPECIALS)
    mapping = {w: i for i, w in enumerate(SPECIALS)}
    for w in sorted(words):
        mapping[w] = len(mapping)
    if len(mapping) > MAX_VOCAB:
        raise ValueError(f"vocabulary size {len(mapping)} exceeds the {MAX_VOCAB}-entry cap")
    return Vocabulary(mapping)


def load_vocab(path) -> Vocabulary:
    mapping: dict[str, int] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}: malformed vocabulary line {lineno}: {line!r}")
            mapping[parts[0]] = int(parts[1])
    for i, special in enumerate(SPECIALS):
        if mapping.get(special) != i:
            raise ValueError(f"{path}: special token {special} missing or misnumbered")
    return Vocabulary(mapping)
