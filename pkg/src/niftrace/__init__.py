"""Direct-lighting Monte Carlo renderer whose secondary-ray visibility can
come from a reference two-level BVH or from small learned models over
per-object feature grids."""

from .bvh import (
    BottomLevelBvh,
    HitRecord,
    ScenePack,
    TopLevelBvh,
    build_bottom,
    build_top,
    pack_scene,
    trace_closest,
    trace_occluded,
    trace_occluded_by_object,
)
from .geometry import (
    Aabb,
    InnerQuery,
    OuterQuery,
    Ray,
    SphericalCoord,
    Triangle,
    dir_to_spherical,
    ray_aabb_intersect,
    ray_triangle_intersect,
    spherical_to_dir,
    transform_inner,
    transform_outer,
)
from .grids import (
    AdamParams,
    FeatureGrid1D,
    FeatureGrid2D,
    grid_bytes,
    init_grid_1d,
    init_grid_2d,
    lookup_1d,
    lookup_2d,
)
from .mlp import Mlp, build_mlp, l2_loss, xavier_init
from .nif import (
    InnerConfig,
    NifBackend,
    NifConfig,
    NifModel,
    OuterConfig,
    SampleSet,
    build_model,
    collect_samples,
    encode_inner,
    encode_outer,
    infer_geometry,
    infer_occlusion,
    memory_report,
    train,
)
from .renderer import (
    AreaLight,
    BvhBackend,
    Camera,
    EnvironmentLight,
    HdrImage,
    OracleBackend,
    PointLight,
    RenderConfig,
    Scene,
    SceneObject,
    TabledCdf,
    build_light_cdf,
    error_image,
    psnr,
    render,
    sample_cdf,
    sample_light_dir,
    sample_uniform_dir,
    shade_pass_nif,
    tonemap_srgb8,
)
from .scene_io import (
    load_checkpoint,
    load_obj,
    load_scene,
    read_pfm,
    save_checkpoint,
    save_image,
    write_bench_csv,
    write_pfm,
)

__version__ = "0.1.0"
