from .primitives import Box, Capsule, RoomBox, Sphere
from .scene import (
    Camera,
    CameraConfig,
    DeformableAgent,
    Limb,
    MovableObject,
    Scene,
    SceneConfig,
    StaticObject,
    compute_nonrigid_proportion,
    depth_image,
    look_at,
    random_scene,
    render_depth,
    sample_camera_poses,
    select_frame_pair,
)
from .pairs import OverlapBin, PairConfig, ScenePair, Split, build_pair, frozen_twin, overlap_ratio
from .dataset import (
    DatasetConfig,
    PairRecord,
    generate_dataset,
    generate_pairs,
    load_dataset,
    load_pair,
    read_manifest,
    rebuild_attempt,
    write_manifest,
)
