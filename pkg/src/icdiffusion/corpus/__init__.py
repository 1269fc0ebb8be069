from .scenes import (
    CANVAS_MARGIN,
    MAX_SHAPES,
    SceneSpec,
    SceneSpecError,
    ShapeSpec,
    caption,
    render_scene,
    sample_scene,
    validate_scene,
)
from .store import (
    Corpus,
    CorpusConfig,
    CorpusError,
    CorpusRecord,
    HeldOutAccessError,
    build_corpus,
    from_uint8,
    load_png,
    manifest_fingerprint,
    save_png,
    to_uint8,
)
from .transforms import (
    HELD_OUT_KINDS,
    TRAINING_KINDS,
    SEG_LABELS,
    TransformKind,
    apply_transform,
    quantize_to_palette,
)

__all__ = [
    "CANVAS_MARGIN",
    "MAX_SHAPES",
    "SceneSpec",
    "SceneSpecError",
    "ShapeSpec",
    "caption",
    "render_scene",
    "sample_scene",
    "validate_scene",
    "Corpus",
    "CorpusConfig",
    "CorpusError",
    "CorpusRecord",
    "HeldOutAccessError",
    "build_corpus",
    "from_uint8",
    "load_png",
    "manifest_fingerprint",
    "save_png",
    "to_uint8",
    "HELD_OUT_KINDS",
    "TRAINING_KINDS",
    "SEG_LABELS",
    "TransformKind",
    "apply_transform",
    "quantize_to_palette",
]
