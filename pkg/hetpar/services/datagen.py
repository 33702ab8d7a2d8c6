"""Deterministic synthetic datasets written as shards."""

import logging
import os
from itertools import product
from typing import Callable, Dict, List

import numpy as np

from hetpar.errors import ConfigurationError
from hetpar.schemas.run import RunConfig
from hetpar.services.masking import Corpus, build_masked_instance, instance_record
from hetpar.services.rng import SeededRng
from hetpar.services.shards import Record, write_shard
from hetpar.services.tokenizer import SPECIAL_TOKENS, SubwordVocab, encode_sentence

logger = logging.getLogger(__name__)

LETTERS = "abcdefghijklmnopqrstuvwxyz"
MAX_BASE_LETTERS = 12
UNKNOWN_LETTER = "z"
CLUSTER_SCALE = 4.0
BAND_PROB = 0.7


def generate_synthetic_classify(n: int, d_in: int, n_classes: int, rng: SeededRng) -> List[Record]:
    """
    Gaussian clusters, one per class, far enough apart to be separable.

    Args:
        n: Number of instances
        d_in: Feature dimension
        n_classes: Number of classes
        rng: Generator

    Returns:
        Records with ``features`` (float64 vector) and ``label``
    """
    centers = CLUSTER_SCALE * rng.normal_array(n_classes * d_in).reshape(n_classes, d_in)
    records = []
    for _ in range(n):
        label = rng.bounded(n_classes)
        features = centers[label] + rng.normal_array(d_in)
        records.append({"features": features.astype(np.float64), "label": np.asarray(label, dtype=np.int64)})
    return records


def generate_synthetic_sequence(
    n: int, vocab_size: int, n_classes: int, max_seq_len: int, rng: SeededRng
) -> List[Record]:
    """
    Token sequences whose label is the band most of their tokens fall in.

    Regular ids are split into ``n_classes`` contiguous bands. Each sequence
    favors one band; the label is recomputed as the most frequent band
    (lowest band on ties).

    Returns:
        Records with ``tokens`` and ``label``
    """
    first = len(SPECIAL_TOKENS)
    regular = vocab_size - first
    if regular < n_classes:
        raise ConfigurationError(f"vocab_size {vocab_size} has fewer regular ids than {n_classes} classes")
    bands = np.array_split(np.arange(first, vocab_size), n_classes)
    min_len = min(4, max_seq_len)

    records = []
    for _ in range(n):
        length = min_len + rng.bounded(max_seq_len - min_len + 1)
        favored = rng.bounded(n_classes)
        tokens = []
        for _ in range(length):
            if rng.random() < BAND_PROB:
                band = bands[favored]
                tokens.append(int(band[rng.bounded(len(band))]))
            else:
                tokens.append(first + rng.bounded(regular))
        counts = [sum(1 for t in tokens if band[0] <= t <= band[-1]) for band in bands]
        label = int(np.argmax(counts))
        records.append({"tokens": np.asarray(tokens, dtype=np.int64), "label": np.asarray(label, dtype=np.int64)})
    return records


def build_synthetic_vocab(vocab_size: int) -> SubwordVocab:
    """Single letters first, then letter pairs, until the vocabulary is full."""
    regular = vocab_size - len(SPECIAL_TOKENS)
    base = LETTERS[: min(MAX_BASE_LETTERS, regular)]
    pieces = list(base)
    for a, b in product(base, repeat=2):
        if len(pieces) >= regular:
            break
        pieces.append(a + b)
    return SubwordVocab(pieces)


def generate_corpus(n_documents: int, vocab: SubwordVocab, rng: SeededRng, unknown_rate: float = 0.02) -> Corpus:
    """
    Documents of random words, tokenized with the greedy subword rule.

    A small share of words carry a letter outside the vocabulary, so they
    tokenize to [UNK].
    """
    letters = [piece for piece in vocab.tokens if len(piece) == 1]
    corpus = []
    for _ in range(n_documents):
        document = []
        for _ in range(2 + rng.bounded(7)):
            words = []
            for _ in range(3 + rng.bounded(10)):
                word = "".join(letters[rng.bounded(len(letters))] for _ in range(1 + rng.bounded(5)))
                if rng.random() < unknown_rate:
                    word += UNKNOWN_LETTER
                words.append(word)
            document.append(encode_sentence(words, vocab))
        corpus.append(document)
    return corpus


def generate_mlm_nsp(n: int, vocab_size: int, max_seq_len: int, rng: SeededRng, p_select: float = 0.15) -> List[Record]:
    """Masked sentence-pair instances over a synthetic corpus."""
    vocab = build_synthetic_vocab(vocab_size)
    corpus = generate_corpus(max(2, n // 8), vocab, rng)
    return [instance_record(build_masked_instance(corpus, rng, vocab_size, max_seq_len, p_select)) for _ in range(n)]


def write_dataset(records: List[Record], out_dir: str, n_shards: int) -> List[str]:
    """
    Split records into ``n_shards`` contiguous shards.

    Returns:
        Shard paths in global order
    """
    os.makedirs(out_dir, exist_ok=True)
    bounds = np.linspace(0, len(records), n_shards + 1).astype(int)
    paths = []
    for i in range(n_shards):
        path = os.path.join(out_dir, f"shard_{i:05d}.hsd")
        write_shard(records[bounds[i] : bounds[i + 1]], path)
        paths.append(path)
    return paths


GENERATORS: Dict[str, Callable[[RunConfig, SeededRng], List[Record]]] = {
    "synthetic-classify": lambda c, rng: generate_synthetic_classify(c.n_instances, c.d_in, c.n_classes, rng),
    "synthetic-sequence": lambda c, rng: generate_synthetic_sequence(
        c.n_instances, c.vocab_size, c.n_classes, c.max_seq_len, rng
    ),
    "mlm-nsp": lambda c, rng: generate_mlm_nsp(c.n_instances, c.vocab_size, c.max_seq_len, rng),
}


def generate_dataset(config: RunConfig, out_dir: str) -> List[str]:
    """
    Generate the configured task from ``config.seed`` and write its shards.

    Args:
        config: Run config; task, seed, sizes and n_shards are used
        out_dir: Output directory

    Returns:
        Shard paths
    """
    generator = GENERATORS.get(config.task)
    if not generator:
        raise ConfigurationError(f"Unknown task: {config.task}")

    records = generator(config, SeededRng(config.seed))
    paths = write_dataset(records, out_dir, config.n_shards)
    logger.info(f"Generated {len(records)} {config.task} instances into {len(paths)} shards under {out_dir}")
    return paths
