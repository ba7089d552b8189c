"""Self-contained toy model family used to exercise the full pipeline."""
from .backend import (
    PerceptualPyramid,
    ToyBackend,
    ToyBuildConfig,
    ToyCertificate,
    ToyEncoder,
    ToyMapping,
    build_toy_models,
    load_toy_backend,
    save_toy_backend,
)
from .scene import (
    BG,
    GEOM,
    HUE,
    IDENT,
    PARAM_DIM,
    SyntheticClip,
    ToySceneParams,
    canonical_params,
    landmarks_for_params,
    make_synthetic_video,
    render_scene,
    sample_scene_params,
    transform_scene_params,
)

__all__ = [
    "PerceptualPyramid",
    "ToyBackend",
    "ToyBuildConfig",
    "ToyCertificate",
    "ToyEncoder",
    "ToyMapping",
    "build_toy_models",
    "load_toy_backend",
    "save_toy_backend",
    "BG",
    "GEOM",
    "HUE",
    "IDENT",
    "PARAM_DIM",
    "SyntheticClip",
    "ToySceneParams",
    "canonical_params",
    "landmarks_for_params",
    "make_synthetic_video",
    "render_scene",
    "sample_scene_params",
    "transform_scene_params",
]
