"""Closed vocabulary shared by the caption grammar and the text encoder.

Captions follow the template "a {color} {kind}[ and a {color} {kind}]*".
Condition-extraction tasks use a fixed two-token label instead of a caption.
The whole vocabulary is closed and small so the text encoder can learn it
from scratch.
"""

from __future__ import annotations

# Palette index order is load-bearing: segmentation labels are derived from it.
PALETTE_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "black")

# RGB in [-1, 1], one entry per palette name.
PALETTE_RGB = (
    (1.0, -1.0, -1.0),
    (-1.0, 1.0, -1.0),
    (-1.0, -1.0, 1.0),
    (1.0, 1.0, -1.0),
    (-1.0, 1.0, 1.0),
    (1.0, -1.0, 1.0),
    (1.0, 1.0, 1.0),
    (-1.0, -1.0, -1.0),
)

SHAPE_KINDS = ("circle", "square", "triangle")

PAD_TOKEN = "<pad>"

# Fixed text labels for the condition-extraction ("forward") tasks.
FIXED_LABELS = {
    "depth": "depth maps",
    "hed": "hed maps",
    "seg": "segmentation maps",
}

TOKENS = (
    (PAD_TOKEN, "a", "and")
    + PALETTE_NAMES
    + SHAPE_KINDS
    + ("depth", "hed", "segmentation", "maps")
)

TOKEN_TO_ID = {tok: i for i, tok in enumerate(TOKENS)}
PAD_ID = TOKEN_TO_ID[PAD_TOKEN]

VOCAB_SIZE = len(TOKENS)
MAX_TOKENS = 16

assert VOCAB_SIZE <= 32, "vocabulary must stay closed and small"


class UnknownTokenError(ValueError):
    """Raised when a caption contains a word outside the closed vocabulary."""


def tokenize(text: str) -> list[int]:
    """Whitespace-tokenize `text` into vocabulary ids.

    Raises UnknownTokenError for out-of-vocabulary words and ValueError if
    the caption exceeds MAX_TOKENS.
    """
    ids = []
    for word in text.split():
        if word not in TOKEN_TO_ID:
            raise UnknownTokenError(f"token {word!r} is not in the closed vocabulary")
        ids.append(TOKEN_TO_ID[word])
    if len(ids) > MAX_TOKENS:
        raise ValueError(f"caption has {len(ids)} tokens, max is {MAX_TOKENS}")
    return ids
