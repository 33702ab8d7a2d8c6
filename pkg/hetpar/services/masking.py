"""Masked-token and next-sentence instance construction."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hetpar.errors import ConfigurationError, CorpusTooSmallError
from hetpar.schemas.data import MaskedInstance
from hetpar.services.rng import SeededRng
from hetpar.services.tokenizer import CLS_ID, MASK_ID, SEP_ID, SPECIAL_TOKENS

logger = logging.getLogger(__name__)

# documents → sentences → token ids
Corpus = Sequence[Sequence[Sequence[int]]]

BRANCH_MASK = "mask"
BRANCH_RANDOM = "random"
BRANCH_KEEP = "keep"


@dataclass
class MaskResult:
    """Tokens after masking, plus what was masked and how."""

    tokens: List[int]
    positions: List[int]
    labels: List[int]
    branches: List[str]


def mask_tokens(
    tokens: Sequence[int],
    rng: SeededRng,
    vocab_size: int,
    p_select: float = 0.15,
    mask_prob: float = 0.8,
    random_prob: float = 0.1,
    eligible: Optional[Sequence[int]] = None,
) -> MaskResult:
    """
    Select tokens for prediction and corrupt them.

    Each eligible position is selected with probability ``p_select``. A
    selected token becomes ``[MASK]`` with probability ``mask_prob``, a
    uniformly drawn non-special id with probability ``random_prob``, and
    stays unchanged otherwise. The original tokens are kept as labels.

    Args:
        tokens: Token ids
        rng: Generator; two draws per selected position, one per unselected
        vocab_size: Vocabulary size including the specials
        p_select: Selection probability
        mask_prob: Share of selections replaced by [MASK]
        random_prob: Share of selections replaced by a random id
        eligible: Positions that may be selected; defaults to every position

    Returns:
        MaskResult
    """
    if not 0.0 <= p_select <= 1.0:
        raise ConfigurationError(f"p_select must be in [0, 1], got {p_select}")
    if mask_prob < 0 or random_prob < 0 or mask_prob + random_prob > 1.0:
        raise ConfigurationError(f"Branch probabilities {mask_prob}/{random_prob} do not form a distribution")
    first_regular = len(SPECIAL_TOKENS)
    if vocab_size <= first_regular:
        raise ConfigurationError(f"vocab_size {vocab_size} leaves no regular tokens")

    out = list(tokens)
    positions, labels, branches = [], [], []
    candidates = range(len(out)) if eligible is None else eligible
    for position in candidates:
        if rng.random() >= p_select:
            continue
        positions.append(position)
        labels.append(out[position])
        branch = rng.random()
        if branch < mask_prob:
            out[position] = MASK_ID
            branches.append(BRANCH_MASK)
        elif branch < mask_prob + random_prob:
            out[position] = first_regular + rng.bounded(vocab_size - first_regular)
            branches.append(BRANCH_RANDOM)
        else:
            branches.append(BRANCH_KEEP)
    return MaskResult(tokens=out, positions=positions, labels=labels, branches=branches)


def make_nsp_pair(corpus: Corpus, rng: SeededRng, positive_prob: float = 0.5) -> Tuple[List[int], List[int], int]:
    """
    Draw a sentence pair for next-sentence prediction.

    With probability ``positive_prob`` B is A's successor in the same
    document (label 1); otherwise B is a random sentence of another
    document (label 0).

    Args:
        corpus: Documents of tokenized sentences
        rng: Generator
        positive_prob: Probability of a positive pair

    Returns:
        (sentence A, sentence B, label)

    Raises:
        CorpusTooSmallError: Fewer than two documents, or a document with fewer than two sentences
    """
    if len(corpus) < 2:
        raise CorpusTooSmallError(f"Need at least 2 documents for sentence pairs, got {len(corpus)}")
    short = [i for i, doc in enumerate(corpus) if len(doc) < 2]
    if short:
        raise CorpusTooSmallError(f"Documents {short} have fewer than 2 sentences")

    doc_id = rng.bounded(len(corpus))
    document = corpus[doc_id]
    sentence_id = rng.bounded(len(document) - 1)
    first = list(document[sentence_id])

    if rng.random() < positive_prob:
        return first, list(document[sentence_id + 1]), 1

    other = rng.bounded(len(corpus) - 1)
    if other >= doc_id:
        other += 1
    other_doc = corpus[other]
    return first, list(other_doc[rng.bounded(len(other_doc))]), 0


def assemble_pair(a: Sequence[int], b: Sequence[int], max_seq_len: int) -> Tuple[List[int], List[int]]:
    """
    Lay out ``[CLS] A [SEP] B [SEP]`` with segment ids.

    While the pair is too long, the longer sentence loses its last token
    (B on ties).

    Returns:
        (tokens, segments); segments are 0 through the first [SEP], then 1
    """
    budget = max_seq_len - 3
    if budget < 2:
        raise ConfigurationError(f"max_seq_len {max_seq_len} cannot hold a sentence pair")
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()

    tokens = [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return tokens, segments


def build_masked_instance(
    corpus: Corpus,
    rng: SeededRng,
    vocab_size: int,
    max_seq_len: int,
    p_select: float = 0.15,
    positive_prob: float = 0.5,
) -> MaskedInstance:
    """Draw a sentence pair, lay it out, and mask its non-special tokens."""
    a, b, label = make_nsp_pair(corpus, rng, positive_prob)
    tokens, segments = assemble_pair(a, b, max_seq_len)
    eligible = [i for i, t in enumerate(tokens) if t not in (CLS_ID, SEP_ID)]
    masked = mask_tokens(tokens, rng, vocab_size, p_select=p_select, eligible=eligible)
    return MaskedInstance(
        tokens=masked.tokens,
        segments=segments,
        mask_positions=masked.positions,
        mask_labels=masked.labels,
        nsp_label=label,
    )


def instance_record(instance: MaskedInstance) -> dict:
    """Shard record of a masked instance; field order is the masked-token model's."""
    return {
        "tokens": np.asarray(instance.tokens, dtype=np.int64),
        "segments": np.asarray(instance.segments, dtype=np.int64),
        "mask_positions": np.asarray(instance.mask_positions, dtype=np.int64),
        "mask_labels": np.asarray(instance.mask_labels, dtype=np.int64),
        "nsp_label": np.asarray(instance.nsp_label, dtype=np.int64),
    }
