"""Closed synthetic vocabulary and prompt token sequences."""

from __future__ import annotations

from dataclasses import dataclass

PAD = "<pad>"
NULL = "<null>"

COLOR_WORDS = ("red", "yellow", "green", "cyan", "blue", "magenta")
SHAPE_WORDS = ("square", "circle", "triangle")
MOTION_WORDS = (
    "sliding", "moving", "turning", "right", "left", "up", "down", "forward",
    "then", "in", "an", "arc", "zigzag", "camera", "panning", "static",
)
FILLER_WORDS = ("a", "on", "with", "plain", "gradient", "background", "small", "large")

VOCAB: tuple[str, ...] = (PAD, NULL) + FILLER_WORDS + COLOR_WORDS + SHAPE_WORDS + MOTION_WORDS
TOKEN_IDS = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = TOKEN_IDS[PAD]
NULL_ID = TOKEN_IDS[NULL]
VOCAB_SIZE = len(VOCAB)

# long enough for "a red square moving forward then turning left"
CONTEXT_LENGTH = 8


@dataclass(frozen=True)
class PromptSpec:
    tokens: tuple[int, ...]
    raw_text: str

    def __post_init__(self):
        for tok in self.tokens:
            if not 0 <= tok < VOCAB_SIZE:
                raise ValueError(f"token id {tok} outside vocabulary of size {VOCAB_SIZE}")


def tokenize(text: str, context_length: int = CONTEXT_LENGTH) -> PromptSpec:
    """Map whitespace-separated words to ids and right-pad to ``context_length``."""
    words = text.lower().split()
    unknown = [w for w in words if w not in TOKEN_IDS]
    if unknown:
        raise ValueError(f"out-of-vocabulary words: {unknown}")
    if len(words) > context_length:
        raise ValueError(f"prompt has {len(words)} words, context length is {context_length}")
    ids = [TOKEN_IDS[w] for w in words]
    ids += [PAD_ID] * (context_length - len(ids))
    return PromptSpec(tuple(ids), " ".join(words))


def null_prompt(context_length: int = CONTEXT_LENGTH) -> PromptSpec:
    return PromptSpec((NULL_ID,) + (PAD_ID,) * (context_length - 1), "")
