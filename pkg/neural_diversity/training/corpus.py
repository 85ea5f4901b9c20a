"""Seeded synthetic byte corpus with learnable structure.

Every sequence starts with BOS and then repeats one of a small set of
random templates, each byte being replaced by a random byte with
probability `noise`. The templates are what the model can learn; the noise
keeps the task from being trivial. Multiple-choice probes pair a context
taken from a template with its true continuation and with the
continuation of another template.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from neural_diversity.errors import ConfigError
from neural_diversity.model.config import BOS_ID, BYTE_VOCAB
from neural_diversity.utils import SeedStreams

logger = logging.getLogger(__name__)

# templates are drawn from printable ASCII
ALPHABET = np.arange(32, 127)


@dataclass(frozen=True)
class CorpusSpec:
    """Generator parameters of a corpus.

    Attributes:
        n_templates (int): Number of distinct templates.
        template_len (int): Bytes per template.
        noise (float): Per-byte substitution probability, in [0, 1).
        seq_len (int): Tokens per sequence, BOS included.
        n_train (int): Training sequences.
        n_eval (int): Held-out sequences.
        n_probes (int): Multiple-choice probes.
        probe_len (int): Bytes of each probe continuation.
        seed (int): Seed of the data stream.
    """

    n_templates: int = 8
    template_len: int = 24
    noise: float = 0.1
    seq_len: int = 128
    n_train: int = 2048
    n_eval: int = 256
    n_probes: int = 128
    probe_len: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_templates < 2 or self.template_len < 2:
            self._reject(f"Need >= 2 templates of >= 2 bytes, got {self.n_templates}x{self.template_len}.")
        if not 0.0 <= self.noise < 1.0:
            self._reject(f"noise must lie in [0, 1), got {self.noise}.")
        if self.seq_len < 2 or self.n_train < 1 or self.n_eval < 1:
            self._reject(f"Invalid sizes seq_len={self.seq_len}, n_train={self.n_train}, n_eval={self.n_eval}.")
        if not 1 <= self.probe_len < self.template_len:
            self._reject(f"probe_len must lie in [1, {self.template_len}), got {self.probe_len}.")

    @staticmethod
    def _reject(msg: str) -> None:
        logger.error(msg)
        raise ConfigError(msg)


@dataclass
class McProbe:
    """Two candidate continuations of one context; `true` is the template's."""

    context: np.ndarray
    true: np.ndarray
    distractor: np.ndarray


@dataclass
class Corpus:
    """Generated token arrays, each row one sequence of `spec.seq_len` ids.

    Attributes:
        spec (CorpusSpec): Generator parameters.
        templates (np.ndarray): (n_templates, template_len) byte templates.
        train (np.ndarray): (n_train, seq_len) training sequences.
        eval (np.ndarray): (n_eval, seq_len) held-out sequences.
        probes (list[McProbe]): Multiple-choice probes.
    """

    spec: CorpusSpec
    templates: np.ndarray
    train: np.ndarray
    eval: np.ndarray
    probes: list[McProbe] = field(default_factory=list)

    @property
    def token_count(self) -> int:
        return int(self.train.size + self.eval.size)

    def fingerprint(self) -> str:
        """SHA-256 of every generated array, in a fixed order."""
        digest = hashlib.sha256()
        for arr in [self.templates, self.train, self.eval]:
            digest.update(np.ascontiguousarray(arr).tobytes())
        for probe in self.probes:
            for arr in (probe.context, probe.true, probe.distractor):
                digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()


def _sequences(rng: np.random.Generator, templates: np.ndarray, n: int, spec: CorpusSpec) -> np.ndarray:
    body = spec.seq_len - 1
    reps = -(-body // spec.template_len) + 1
    choice = rng.integers(0, len(templates), size=n)
    start = rng.integers(0, spec.template_len, size=n)
    tiled = np.tile(templates, (1, reps))
    rows = np.stack([tiled[c, s : s + body] for c, s in zip(choice, start)])
    flip = rng.random(rows.shape) < spec.noise
    rows = np.where(flip, rng.integers(0, BYTE_VOCAB, size=rows.shape), rows)
    return np.concatenate([np.full((n, 1), BOS_ID), rows], axis=1).astype(np.int64)


def _probes(rng: np.random.Generator, templates: np.ndarray, spec: CorpusSpec) -> list[McProbe]:
    probes = []
    ctx_len = min(spec.template_len, spec.seq_len - spec.probe_len - 1)
    for _ in range(spec.n_probes):
        true_id, other_id = rng.choice(len(templates), size=2, replace=False)
        context = np.concatenate([[BOS_ID], templates[true_id, :ctx_len]])
        cont = np.tile(templates[true_id], 2)[ctx_len : ctx_len + spec.probe_len]
        distractor = np.tile(templates[other_id], 2)[ctx_len : ctx_len + spec.probe_len]
        if np.array_equal(cont, distractor):
            distractor = (distractor + 1) % BYTE_VOCAB
        probes.append(McProbe(context.astype(np.int64), cont.astype(np.int64), distractor.astype(np.int64)))
    return probes


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Generate the corpus of `spec`; bit-identical for equal specs.

    Args:
        spec (CorpusSpec): Generator parameters, seed included.

    Returns:
        Corpus: Templates, train and held-out sequences, and probes.
    """
    seeds = SeedStreams(spec.seed)
    templates = seeds.rng("data", 0).choice(ALPHABET, size=(spec.n_templates, spec.template_len))
    train = _sequences(seeds.rng("data", 1), templates, spec.n_train, spec)
    held_out = _sequences(seeds.rng("data", 2), templates, spec.n_eval, spec)
    probes = _probes(seeds.rng("data", 3), templates, spec)
    corpus = Corpus(spec, templates.astype(np.int64), train, held_out, probes)
    logger.info(
        "Generated a corpus of %s tokens from %s templates (noise %s).",
        corpus.token_count,
        spec.n_templates,
        spec.noise,
    )
    return corpus


def batch_at(corpus: Corpus, step: int, batch_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Training batch of `step`: inputs and next-token targets.

    The rows depend only on (seed, step), so a resumed run sees the same
    batches as an uninterrupted one.

    Returns:
        tuple[np.ndarray, np.ndarray]: (B, T-1) inputs and (B, T-1) targets.
    """
    rows = SeedStreams(seed).rng("data", 100, step).integers(0, len(corpus.train), size=batch_size)
    seqs = corpus.train[rows]
    return seqs[:, :-1], seqs[:, 1:]


def eval_batches(corpus: Corpus, n: int, batch_size: int):
    """Yield (inputs, targets) over the first `n` held-out sequences."""
    n = min(n, len(corpus.eval))
    for start in range(0, n, batch_size):
        seqs = corpus.eval[start : min(start + batch_size, n)]
        yield seqs[:, :-1], seqs[:, 1:]
