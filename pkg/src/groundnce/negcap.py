"""Context-preserving negative captions via masked-word substitution.

Given a caption with a noun masked out, a language-model scorer proposes
plausible fill-ins. Candidates are then re-ranked by p(s'|c) / q(s'|s,c),
where q conditions on the original word: words the scorer still finds
likely once it has seen the true noun are probably synonyms or hypernyms
(still true of the image) and get demoted, leaving substitutions that are
plausible in context yet false. The kept words, embedded inside the
substituted caption, become the negatives of the language loss.

Scorers are pluggable; :class:`TableLm` realizes the interface with
explicit probability tables read from JSON, which is what the synthetic
data generator emits.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .attention import CaptionTokens
from .errors import DataFormatError, MissingNegativesError, ShapeError
from .losses import LangSelection

logger = logging.getLogger(__name__)

MASK_TOKEN = "[MASK]"
SIGNATURE_SEP = ""

DEFAULT_N_CANDIDATES = 30
DEFAULT_N_KEEP = 25

# Candidates the conditioned table has (effectively) never seen get their
# probability floored instead of producing infinite rank scores; the ratio
# is a plausibility proxy, not a probability.
Q_FLOOR = 1e-8


def context_signature(tokens: Sequence[str], mask_position: int) -> str:
    """Tokens joined by the separator with the mask token at the slot."""
    parts = list(tokens)
    parts[mask_position] = MASK_TOKEN
    return SIGNATURE_SEP.join(parts)


def caption_signature(tokens: Sequence[str], position: int) -> str:
    return SIGNATURE_SEP.join(tokens) + f"#{position}"


def caption_sha(tokens: Sequence[str]) -> str:
    return hashlib.sha256(SIGNATURE_SEP.join(tokens).encode("utf-8")).hexdigest()


def sentence_context_vector(
    tokens: Sequence[str],
    context_vectors: dict[str, np.ndarray],
    strength: float,
) -> np.ndarray | float:
    """Sentence-level component shared by every token of a caption.

    The mean of the per-word context vectors of the tokens that have one,
    scaled by ``strength``. Substituting a single word moves it only by
    O(1/n), so substituted captions keep (almost exactly) the context of
    the original, while unrelated captions land elsewhere.
    """
    if strength <= 0 or not context_vectors:
        return 0.0
    rows = [context_vectors[t] for t in tokens if t in context_vectors]
    if not rows:
        return 0.0
    return strength * np.mean(rows, axis=0)


class LmScorer(Protocol):
    """Masked-word probabilities and token embeddings for one vocabulary."""

    def masked_distribution(self, tokens: Sequence[str], mask_position: int) -> dict[str, float]:
        """p(word | context with the given position masked)."""

    def conditioned_distribution(self, tokens: Sequence[str], position: int) -> dict[str, float]:
        """q(word | full caption including the original word at position)."""

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        """(n, d_w) feature rows for the caption; deterministic."""


@dataclass
class MaskedCaption:
    tokens: list[str]
    mask_position: int
    original_noun: str

    def __post_init__(self) -> None:
        if not 0 <= self.mask_position < len(self.tokens):
            raise ShapeError("mask position out of range")
        if self.tokens[self.mask_position] != self.original_noun:
            raise ShapeError("original_noun must match the masked token")


@dataclass
class Candidate:
    word: str
    p_given_c: float
    q_given_sc: float | None = None
    rank_score: float | None = None


@dataclass
class NegativeWord:
    word: str
    tokens: list[str]
    feature: np.ndarray


@dataclass
class NegativeCaptionSet:
    original: MaskedCaption
    negatives: list[NegativeWord] = field(default_factory=list)

    def __post_init__(self) -> None:
        for neg in self.negatives:
            if neg.word == self.original.original_noun:
                raise ShapeError("a negative equals the original noun")

    def feature_matrix(self) -> np.ndarray:
        return np.stack([np.asarray(n.feature, dtype=np.float64) for n in self.negatives])


def top_candidates(
    masked: MaskedCaption, lm: LmScorer, n_cand: int = DEFAULT_N_CANDIDATES
) -> list[Candidate]:
    """The n_cand most likely fill-ins for the masked slot.

    The original word and its synonyms are deliberately not filtered here;
    that is the re-ranking step's job. Ties break lexicographically.
    """
    if n_cand < 1:
        raise ShapeError("n_cand must be at least 1")
    dist = lm.masked_distribution(masked.tokens, masked.mask_position)
    if not dist:
        raise ShapeError("scorer returned an empty masked distribution")
    ranked = sorted(dist.items(), key=lambda kv: (-kv[1], kv[0]))
    return [Candidate(word=w, p_given_c=p) for w, p in ranked[:n_cand] if p > 0]


def rerank_and_keep(
    candidates: Sequence[Candidate],
    masked: MaskedCaption,
    lm: LmScorer,
    n_keep: int = DEFAULT_N_KEEP,
) -> NegativeCaptionSet:
    """Score candidates by p/q, drop the original noun, keep the best n_keep.

    Each kept word is spliced into the caption and embedded there so its
    feature vector reflects the surrounding context.
    """
    q_dist = lm.conditioned_distribution(masked.tokens, masked.mask_position)
    scored: list[Candidate] = []
    for cand in candidates:
        if cand.word == masked.original_noun:
            continue
        q = max(float(q_dist.get(cand.word, 0.0)), Q_FLOOR)
        scored.append(
            Candidate(
                word=cand.word,
                p_given_c=cand.p_given_c,
                q_given_sc=q,
                rank_score=cand.p_given_c / q,
            )
        )
    scored.sort(key=lambda c: (-c.rank_score, c.word))
    negatives = []
    for cand in scored[:n_keep]:
        tokens = list(masked.tokens)
        tokens[masked.mask_position] = cand.word
        feature = np.asarray(lm.embed(tokens), dtype=np.float64)[masked.mask_position]
        negatives.append(NegativeWord(word=cand.word, tokens=tokens, feature=feature))
    return NegativeCaptionSet(original=masked, negatives=negatives)


def negatives_for_position(
    tokens: Sequence[str],
    position: int,
    lm: LmScorer,
    n_cand: int = DEFAULT_N_CANDIDATES,
    n_keep: int = DEFAULT_N_KEEP,
) -> NegativeCaptionSet:
    """Deterministic two-step construction for a fixed noun position."""
    masked = MaskedCaption(
        tokens=list(tokens), mask_position=position, original_noun=tokens[position]
    )
    return rerank_and_keep(top_candidates(masked, lm, n_cand), masked, lm, n_keep)


def make_negatives(
    caption: CaptionTokens,
    lm: LmScorer,
    seed: int,
    n_cand: int = DEFAULT_N_CANDIDATES,
    n_keep: int = DEFAULT_N_KEEP,
) -> tuple[int, NegativeCaptionSet] | None:
    """Draw one noun uniformly and build its negative set.

    Returns None for captions without nouns (skipped by the language loss).
    """
    if not caption.noun_indices:
        return None
    rng = np.random.default_rng(seed)
    position = int(rng.choice(caption.noun_indices))
    return position, negatives_for_position(caption.tokens, position, lm, n_cand, n_keep)


# ---------------------------------------------------------------------------
# Table-backed scorer.
# ---------------------------------------------------------------------------


class TableLm:
    """LmScorer backed by explicit lookup tables.

    Distributions are keyed by context/caption signatures; a missing key
    falls back to the uniform distribution over the vocabulary with a
    warning, so unseen contexts degrade gracefully instead of failing.

    ``embed_noise`` contextualizes the per-word base vectors: each token's
    embedding is displaced by a pseudo-random offset derived from a hash of
    the caption and position, so the same word embeds differently in
    different captions (deterministically), like a real contextual encoder.
    """

    def __init__(
        self,
        vocab: Sequence[str],
        embeddings: dict[str, np.ndarray],
        masked: dict[str, dict[str, float]],
        conditioned: dict[str, dict[str, float]],
        embed_noise: float = 0.0,
        context_vectors: dict[str, np.ndarray] | None = None,
        context_strength: float = 0.0,
    ) -> None:
        self.vocab = list(vocab)
        self.embeddings = {w: np.asarray(v, dtype=np.float64) for w, v in embeddings.items()}
        self.masked = masked
        self.conditioned = conditioned
        self.embed_noise = float(embed_noise)
        self.context_vectors = {
            w: np.asarray(v, dtype=np.float64) for w, v in (context_vectors or {}).items()
        }
        self.context_strength = float(context_strength)
        if not self.vocab:
            raise DataFormatError("table LM has an empty vocabulary")
        dims = {v.shape for v in self.embeddings.values()}
        if len(dims) > 1:
            raise DataFormatError(f"inconsistent embedding dims: {dims}")

    def _uniform(self) -> dict[str, float]:
        p = 1.0 / len(self.vocab)
        return {w: p for w in self.vocab}

    def masked_distribution(self, tokens: Sequence[str], mask_position: int) -> dict[str, float]:
        sig = context_signature(tokens, mask_position)
        dist = self.masked.get(sig)
        if dist is None:
            logger.warning("masked context not in table, using uniform: %r", sig)
            return self._uniform()
        return dist

    def conditioned_distribution(self, tokens: Sequence[str], position: int) -> dict[str, float]:
        sig = caption_signature(tokens, position)
        dist = self.conditioned.get(sig)
        if dist is None:
            logger.warning("conditioned caption not in table, using uniform: %r", sig)
            return self._uniform()
        return dist

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        rows = []
        sig = SIGNATURE_SEP.join(tokens)
        sentence = sentence_context_vector(tokens, self.context_vectors, self.context_strength)
        for position, tok in enumerate(tokens):
            if tok not in self.embeddings:
                raise DataFormatError(f"no embedding for token {tok!r}")
            base = self.embeddings[tok] + sentence
            if self.embed_noise > 0:
                digest = hashlib.sha256(f"{sig}{position}".encode("utf-8")).digest()
                ctx_rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
                base = base + self.embed_noise * ctx_rng.standard_normal(base.shape[0])
            rows.append(base)
        return np.stack(rows)

    def save(self, path: str | Path) -> None:
        payload = {
            "vocab": self.vocab,
            "embeddings": {w: v.tolist() for w, v in self.embeddings.items()},
            "masked": self.masked,
            "conditioned": self.conditioned,
            "embed_noise": self.embed_noise,
            "context_vectors": {w: v.tolist() for w, v in self.context_vectors.items()},
            "context_strength": self.context_strength,
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")


def table_lm_from_file(path: str | Path) -> TableLm:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON") from exc
    try:
        return TableLm(
            vocab=payload["vocab"],
            embeddings=payload["embeddings"],
            masked=payload["masked"],
            conditioned=payload["conditioned"],
            embed_noise=payload.get("embed_noise", 0.0),
            context_vectors=payload.get("context_vectors"),
            context_strength=payload.get("context_strength", 0.0),
        )
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing field {exc}") from exc


# ---------------------------------------------------------------------------
# Negative cache and training-time providers.
# ---------------------------------------------------------------------------


def save_negative_cache(
    path: str | Path, entries: dict[tuple[str, int], NegativeCaptionSet]
) -> None:
    """Write negative sets keyed by (caption hash, noun position) as JSONL."""
    with open(path, "w", encoding="utf-8") as fh:
        for (sha, position), negset in entries.items():
            record = {
                "caption_sha": sha,
                "position": position,
                "tokens": negset.original.tokens,
                "original": negset.original.original_noun,
                "negatives": [
                    {
                        "word": n.word,
                        "tokens": n.tokens,
                        "feature": [float(v) for v in n.feature],
                    }
                    for n in negset.negatives
                ],
            }
            fh.write(json.dumps(record) + "\n")


def load_negative_cache(path: str | Path) -> dict[tuple[str, int], NegativeCaptionSet]:
    entries: dict[tuple[str, int], NegativeCaptionSet] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                masked = MaskedCaption(
                    tokens=record["tokens"],
                    mask_position=record["position"],
                    original_noun=record["original"],
                )
                negatives = [
                    NegativeWord(
                        word=n["word"],
                        tokens=n["tokens"],
                        feature=np.asarray(n["feature"], dtype=np.float64),
                    )
                    for n in record["negatives"]
                ]
                entries[(record["caption_sha"], record["position"])] = NegativeCaptionSet(
                    original=masked, negatives=negatives
                )
            except (KeyError, json.JSONDecodeError, ShapeError) as exc:
                raise DataFormatError(f"{path}: bad record on line {line_no + 1}") from exc
    return entries


def build_negative_cache(
    captions: Sequence[CaptionTokens],
    lm: LmScorer,
    n_cand: int = DEFAULT_N_CANDIDATES,
    n_keep: int = DEFAULT_N_KEEP,
) -> dict[tuple[str, int], NegativeCaptionSet]:
    """Precompute negative sets for every noun position of every caption."""
    entries: dict[tuple[str, int], NegativeCaptionSet] = {}
    for caption in captions:
        sha = caption_sha(caption.tokens)
        for position in caption.noun_indices:
            key = (sha, position)
            if key not in entries:
                entries[key] = negatives_for_position(
                    caption.tokens, position, lm, n_cand, n_keep
                )
    return entries


class CachedNegatives:
    """Training-time provider reading precomputed context-preserving sets."""

    def __init__(
        self,
        cache: dict[tuple[str, int], NegativeCaptionSet],
        allow_missing: bool = False,
    ) -> None:
        self.cache = cache
        self.allow_missing = allow_missing

    def select(self, caption: CaptionTokens, rng: np.random.Generator) -> LangSelection | None:
        if not caption.noun_indices:
            return None
        position = int(rng.choice(caption.noun_indices))
        entry = self.cache.get((caption_sha(caption.tokens), position))
        if entry is None:
            if self.allow_missing:
                logger.warning("no cached negatives for noun position %d", position)
                return None
            raise MissingNegativesError(
                f"no cached negatives for caption {caption.tokens!r} position {position}"
            )
        if not entry.negatives:
            return None
        return LangSelection(
            noun_index=position,
            words=[n.word for n in entry.negatives],
            features=entry.feature_matrix(),
        )


class RandomCaptionNegatives:
    """Baseline provider: negatives are noun tokens of random corpus captions.

    The drawn features are the contextualized vectors those nouns carry in
    their own captions, mirroring what sampling whole random captions from
    the training data would contrast against.
    """

    def __init__(self, captions: Sequence[CaptionTokens], n_keep: int = DEFAULT_N_KEEP) -> None:
        self.n_keep = n_keep
        self.pool_words: list[str] = []
        rows = []
        for caption in captions:
            for idx in caption.noun_indices:
                self.pool_words.append(caption.tokens[idx])
                rows.append(caption.features[idx])
        if not rows:
            raise ShapeError("corpus has no noun tokens to sample negatives from")
        self.pool_features = np.stack(rows)

    def select(self, caption: CaptionTokens, rng: np.random.Generator) -> LangSelection | None:
        if not caption.noun_indices:
            return None
        position = int(rng.choice(caption.noun_indices))
        picks = rng.integers(0, len(self.pool_words), size=self.n_keep)
        return LangSelection(
            noun_index=position,
            words=[self.pool_words[i] for i in picks],
            features=self.pool_features[picks],
        )
