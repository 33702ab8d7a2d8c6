"""Greedy longest-prefix subword tokenization over a fixed vocabulary."""

import logging
from typing import Dict, Iterable, List, Sequence, Set

logger = logging.getLogger(__name__)

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"
MASK = "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIAL_TOKENS))


def greedy_subword_tokenize(word: str, vocab: Set[str]) -> List[str]:
    """
    Split ``word`` by repeatedly taking the longest vocabulary prefix.

    If at any point no prefix of the remainder is in the vocabulary, the
    whole word becomes a single unknown token.

    Args:
        word: Word to split
        vocab: Subword strings

    Returns:
        Subword pieces, or ``[UNK]`` alone
    """
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        while end > start and word[start:end] not in vocab:
            end -= 1
        if end == start:
            return [UNK]
        pieces.append(word[start:end])
        start = end
    return pieces


class SubwordVocab:
    """Subword strings with stable ids; the specials take ids 0 to 4."""

    def __init__(self, subwords: Iterable[str]):
        """Initialize the vocabulary; duplicates and specials in ``subwords`` are dropped."""
        self.tokens: List[str] = list(SPECIAL_TOKENS)
        for piece in subwords:
            if piece and piece not in self.tokens:
                self.tokens.append(piece)
        self.ids: Dict[str, int] = {token: i for i, token in enumerate(self.tokens)}
        self.pieces: Set[str] = set(self.tokens[len(SPECIAL_TOKENS):])

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, piece: str) -> int:
        """Id of ``piece``, or the unknown id."""
        return self.ids.get(piece, UNK_ID)


def encode_sentence(words: Sequence[str], vocab: SubwordVocab) -> List[int]:
    """Tokenize every word of a sentence and map the pieces to ids."""
    ids = []
    for word in words:
        ids.extend(vocab.id_of(piece) for piece in greedy_subword_tokenize(word, vocab.pieces))
    return ids
