import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from marshmallow import (RAISE, Schema, ValidationError, fields, post_load, validate,
                         validates, validates_schema)

from app.models.bev import BevConfig
from app.utils.errors import ConfigError, InputOutputError

SECTIONS = ('grid', 'model', 'loss', 'train', 'ransac', 'data', 'eval')


@dataclass(frozen=True)
class GridSection:
    extent: tuple = (-20.0, 20.0, -20.0, 20.0, -3.0, 3.0)
    resolution: tuple = (64, 64, 16)
    window: int = 3


@dataclass(frozen=True)
class ModelSection:
    channels: tuple = (32, 64, 128, 256)
    descriptor_dim: int = 32
    overlap_level: int = 4
    seed: int = 7
    max_keypoints: int = 250
    overlap_threshold: float = 0.5


@dataclass(frozen=True)
class LossSection:
    w_desc: float = 1.0
    w_det: float = 1.0
    w_reg: float = 1.0
    w_bce: float = 1.0
    w_sg: float = 1.0
    delta_p: float = 0.1
    delta_n: float = 1.4
    circle_scale: float = 10.0
    positive_radius_cells: float = 1.5
    safe_radius_factor: float = 2.0
    anchors: int = 128
    max_negatives: int = 32
    deep_anchors: int = 64


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 500
    checkpoint_every: int = 100
    seed: int = 11
    log_wall_time: bool = True


@dataclass(frozen=True)
class RansacSection:
    max_iterations: int = 50000
    inlier_radius: float = 0.6
    early_exit_ratio: float = 0.9
    batch: int = 1000
    seed: int = 13


@dataclass(frozen=True)
class DataSection:
    seed: int = 17
    scenes: int = 2
    distances: tuple = (0.0, 5.0, 10.0, 15.0, 20.0)
    scene_half_size: float = 30.0
    pose_margin: float = 5.0
    sensor_height: float = 1.7
    heading_delta_deg: float = 180.0
    range_limit: float = 30.0
    azimuth_res_deg: float = 0.4
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 5.0
    elevation_res_deg: float = 1.0
    ground_density: float = 4.0
    ground_noise: float = 0.03
    walls: int = 12
    wall_length_min: float = 4.0
    wall_length_max: float = 15.0
    wall_height: float = 4.0
    wall_density: float = 6.0
    poles: int = 20
    pole_height: float = 5.0
    pole_density: float = 20.0
    clutter_blobs: int = 15
    clutter_points: int = 150
    clutter_radius: float = 0.8
    loop_frames: int = 60
    loop_radius: float = 12.0
    loop_offset: float = 0.5


@dataclass(frozen=True)
class EvalSection:
    rte_threshold: float = 2.0
    rre_threshold: float = 5.0
    exclusion_window: int = 10
    success_radius: float = 4.0
    buckets: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    overlap_cuts: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run, grouped by the INI section it is read from."""
    grid: GridSection = GridSection()
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    train: TrainSection = TrainSection()
    ransac: RansacSection = RansacSection()
    data: DataSection = DataSection()
    eval: EvalSection = EvalSection()

    @property
    def bev(self):
        return BevConfig(self.grid.extent, self.grid.resolution, self.grid.window)

    @property
    def positive_radius(self):
        """r_p in meters, tied to the fine cell size."""
        return self.loss.positive_radius_cells * float(max(self.bev.cell_size[:2]))

    @property
    def safe_radius(self):
        return self.loss.safe_radius_factor * self.positive_radius

    @property
    def deep_stride(self):
        return 2 ** (self.model.overlap_level - 1)

    def digest(self):
        """SHA-256 over the settings that fix parameter shapes and meaning."""
        g, m = self.grid, self.model
        text = '\n'.join(f'{k}={_format(v)}' for k, v in (
            ('extent', g.extent), ('resolution', g.resolution), ('channels', m.channels),
            ('descriptor_dim', m.descriptor_dim), ('overlap_level', m.overlap_level)))
        return hashlib.sha256(text.encode('utf-8')).digest()


class Csv(fields.Field):
    """Comma-separated tuple of numbers."""

    def __init__(self, cast=float, length=None, **kwargs):
        super().__init__(**kwargs)
        self.cast = cast
        self.length = length

    def _deserialize(self, value, attr, data, **kwargs):
        items = value.split(',') if isinstance(value, str) else list(value)
        try:
            out = tuple(self.cast(str(v).strip()) for v in items if str(v).strip())
        except ValueError as e:
            raise ValidationError(f"not a list of {self.cast.__name__}: {value}") from e
        if self.length is not None and len(out) != self.length:
            raise ValidationError(f"expected {self.length} values, got {len(out)}")
        return out

    def _serialize(self, value, attr, obj, **kwargs):
        return None if value is None else ','.join(_format(v) for v in value)


Positive = validate.Range(min=0, min_inclusive=False)
NonNegative = validate.Range(min=0)


class _SectionSchema(Schema):
    section_class = None

    class Meta:
        unknown = RAISE

    @post_load
    def make_section(self, data, **kwargs):
        return self.section_class(**data)


class GridSchema(_SectionSchema):
    section_class = GridSection
    extent = Csv(float, length=6, required=True)
    resolution = Csv(int, length=3, required=True)
    window = fields.Integer(required=True, validate=Positive)

    @validates('window')
    def validate_window(self, value, **kwargs):
        if value % 2 == 0:
            raise ValidationError("window must be odd")

    @validates('resolution')
    def validate_resolution(self, value, **kwargs):
        if min(value) < 1:
            raise ValidationError("H, W and C must be at least 1")

    @validates_schema
    def validate_extent(self, data, **kwargs):
        extent = data.get('extent', ())
        if any(hi <= lo for lo, hi in zip(extent[0::2], extent[1::2])):
            raise ValidationError("extent max must exceed min on every axis", 'extent')


class ModelSchema(_SectionSchema):
    section_class = ModelSection
    channels = Csv(int, required=True)
    descriptor_dim = fields.Integer(required=True, validate=Positive)
    overlap_level = fields.Integer(required=True, validate=validate.Range(min=1))
    seed = fields.Integer(required=True)
    max_keypoints = fields.Integer(required=True, validate=validate.Range(min=-1))
    overlap_threshold = fields.Float(required=True, validate=validate.Range(min=0.0))

    @validates('channels')
    def validate_channels(self, value, **kwargs):
        if len(value) < 2 or min(value) < 1:
            raise ValidationError("need at least two positive channel widths")

    @validates_schema
    def validate_level(self, data, **kwargs):
        if data.get('overlap_level', 1) > len(data.get('channels', ())):
            raise ValidationError("overlap_level exceeds the encoder depth", 'overlap_level')


class LossSchema(_SectionSchema):
    section_class = LossSection
    w_desc = fields.Float(required=True, validate=NonNegative)
    w_det = fields.Float(required=True, validate=NonNegative)
    w_reg = fields.Float(required=True, validate=NonNegative)
    w_bce = fields.Float(required=True, validate=NonNegative)
    w_sg = fields.Float(required=True, validate=NonNegative)
    delta_p = fields.Float(required=True, validate=Positive)
    delta_n = fields.Float(required=True, validate=Positive)
    circle_scale = fields.Float(required=True, validate=Positive)
    positive_radius_cells = fields.Float(required=True, validate=Positive)
    safe_radius_factor = fields.Float(required=True, validate=validate.Range(min=1, min_inclusive=False))
    anchors = fields.Integer(required=True, validate=Positive)
    max_negatives = fields.Integer(required=True, validate=Positive)
    deep_anchors = fields.Integer(required=True, validate=Positive)

    @validates_schema
    def validate_margins(self, data, **kwargs):
        if data.get('delta_p', 0) >= data.get('delta_n', 0):
            raise ValidationError("margins must satisfy 0 < delta_p < delta_n", 'delta_p')


class TrainSchema(_SectionSchema):
    section_class = TrainSection
    lr = fields.Float(required=True, validate=Positive)
    beta1 = fields.Float(required=True, validate=validate.Range(min=0, max=1, max_inclusive=False))
    beta2 = fields.Float(required=True, validate=validate.Range(min=0, max=1, max_inclusive=False))
    eps = fields.Float(required=True, validate=Positive)
    steps = fields.Integer(required=True, validate=NonNegative)
    checkpoint_every = fields.Integer(required=True, validate=Positive)
    seed = fields.Integer(required=True)
    log_wall_time = fields.Boolean(required=True)


class RansacSchema(_SectionSchema):
    section_class = RansacSection
    max_iterations = fields.Integer(required=True, validate=Positive)
    inlier_radius = fields.Float(required=True, validate=Positive)
    early_exit_ratio = fields.Float(required=True, validate=validate.Range(min=0, max=1, min_inclusive=False))
    batch = fields.Integer(required=True, validate=Positive)
    seed = fields.Integer(required=True)


class DataSchema(_SectionSchema):
    section_class = DataSection
    seed = fields.Integer(required=True)
    scenes = fields.Integer(required=True, validate=Positive)
    distances = Csv(float, required=True)
    scene_half_size = fields.Float(required=True, validate=Positive)
    pose_margin = fields.Float(required=True, validate=NonNegative)
    sensor_height = fields.Float(required=True)
    heading_delta_deg = fields.Float(required=True, validate=validate.Range(min=0, max=180))
    range_limit = fields.Float(required=True, validate=Positive)
    azimuth_res_deg = fields.Float(required=True, validate=Positive)
    elevation_min_deg = fields.Float(required=True, validate=validate.Range(min=-90, max=90))
    elevation_max_deg = fields.Float(required=True, validate=validate.Range(min=-90, max=90))
    elevation_res_deg = fields.Float(required=True, validate=Positive)
    ground_density = fields.Float(required=True, validate=NonNegative)
    ground_noise = fields.Float(required=True, validate=NonNegative)
    walls = fields.Integer(required=True, validate=NonNegative)
    wall_length_min = fields.Float(required=True, validate=Positive)
    wall_length_max = fields.Float(required=True, validate=Positive)
    wall_height = fields.Float(required=True, validate=Positive)
    wall_density = fields.Float(required=True, validate=NonNegative)
    poles = fields.Integer(required=True, validate=NonNegative)
    pole_height = fields.Float(required=True, validate=Positive)
    pole_density = fields.Float(required=True, validate=NonNegative)
    clutter_blobs = fields.Integer(required=True, validate=NonNegative)
    clutter_points = fields.Integer(required=True, validate=NonNegative)
    clutter_radius = fields.Float(required=True, validate=Positive)
    loop_frames = fields.Integer(required=True, validate=validate.Range(min=4))
    loop_radius = fields.Float(required=True, validate=Positive)
    loop_offset = fields.Float(required=True, validate=NonNegative)

    @validates('distances')
    def validate_distances(self, value, **kwargs):
        if not value or min(value) < 0:
            raise ValidationError("distances must be a non-empty list of values >= 0")

    @validates_schema
    def validate_ranges(self, data, **kwargs):
        if data.get('wall_length_min', 0) > data.get('wall_length_max', 0):
            raise ValidationError("wall_length_min exceeds wall_length_max", 'wall_length_min')
        if data.get('elevation_min_deg', 0) >= data.get('elevation_max_deg', 0):
            raise ValidationError("elevation_min_deg must be below elevation_max_deg", 'elevation_min_deg')


class EvalSchema(_SectionSchema):
    section_class = EvalSection
    rte_threshold = fields.Float(required=True, validate=Positive)
    rre_threshold = fields.Float(required=True, validate=Positive)
    exclusion_window = fields.Integer(required=True, validate=NonNegative)
    success_radius = fields.Float(required=True, validate=Positive)
    buckets = Csv(float, required=True)
    overlap_cuts = Csv(float, required=True)

    @validates('buckets')
    def validate_buckets(self, value, **kwargs):
        if len(value) < 2 or any(b <= a for a, b in zip(value, value[1:])):
            raise ValidationError("bucket edges must be at least two increasing values")

    @validates('overlap_cuts')
    def validate_cuts(self, value, **kwargs):
        if not value or any(not 0.0 < c <= 1.0 for c in value):
            raise ValidationError("overlap cuts must lie in (0, 1]")


SECTION_SCHEMAS = {
    'grid': GridSchema,
    'model': ModelSchema,
    'loss': LossSchema,
    'train': TrainSchema,
    'ransac': RansacSchema,
    'data': DataSchema,
    'eval': EvalSchema
}


def _format(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ','.join(_format(v) for v in value)
    return str(value)


def _as_strings(run_config):
    return {name: {f.name: _format(getattr(getattr(run_config, name), f.name))
                   for f in dataclasses.fields(getattr(run_config, name))}
            for name in SECTIONS}


def dump_run_config(run_config):
    """Serialize to INI text that `parse_run_config` reads back to an equal RunConfig."""
    lines = []
    for name, values in _as_strings(run_config).items():
        lines.append(f'[{name}]')
        lines.extend(f'{key} = {value}' for key, value in values.items())
        lines.append('')
    return '\n'.join(lines)


def _apply_overrides(raw, overrides):
    for item in overrides or ():
        key, sep, value = item.partition('=')
        section, dot, name = key.strip().partition('.')
        if not sep or not dot:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        if section not in raw:
            raise ConfigError(f"unknown config section '{section}'")
        raw[section][name] = value.strip()


def parse_run_config(text, base=None, overrides=None):
    """
    Build a RunConfig from INI text layered over `base` and then `overrides`.

    Raises:
        ConfigError: unknown sections or keys, unparsable or invalid values
    """
    raw = _as_strings(base or RunConfig())
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text or '')
    except configparser.Error as e:
        raise ConfigError(f"config file: {e}") from e
    for section in parser.sections():
        if section not in raw:
            raise ConfigError(f"unknown config section '{section}'")
        raw[section].update(parser.items(section))
    _apply_overrides(raw, overrides)
    sections = {}
    for name, schema in SECTION_SCHEMAS.items():
        try:
            sections[name] = schema().load(raw[name])
        except ValidationError as e:
            raise ConfigError(f"[{name}] {e.messages}") from e
    return RunConfig(**sections)


def load_run_config(path=None, base=None, overrides=None):
    text = ''
    if path:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise InputOutputError(path, e.strerror or str(e)) from e
    return parse_run_config(text, base, overrides)


DESK_RUN_CONFIG = RunConfig()

FULL_RUN_CONFIG = RunConfig(
    grid=GridSection(extent=(-50.0, 50.0, -50.0, 50.0, -4.0, 4.0), resolution=(256, 256, 32)),
    model=ModelSection(channels=(64, 128, 256, 512)),
    data=DataSection(scene_half_size=80.0, range_limit=50.0, pose_margin=10.0,
                     distances=(0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0),
                     walls=40, poles=60, clutter_blobs=50, loop_frames=400, loop_radius=40.0),
    eval=EvalSection(exclusion_window=100, success_radius=10.0,
                     buckets=(0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0))
)

TESTING_RUN_CONFIG = RunConfig(
    grid=GridSection(extent=(-8.0, 8.0, -8.0, 8.0, -2.0, 2.0), resolution=(16, 16, 8)),
    model=ModelSection(channels=(4, 8, 8, 16), descriptor_dim=8, max_keypoints=64),
    loss=LossSection(anchors=32, max_negatives=8, deep_anchors=4),
    train=TrainSection(lr=1e-3, steps=20, checkpoint_every=5, log_wall_time=False),
    ransac=RansacSection(max_iterations=2000, inlier_radius=1.5, batch=250),
    data=DataSection(scenes=1, distances=(0.0, 2.0, 4.0), scene_half_size=12.0, pose_margin=3.0,
                     range_limit=10.0, azimuth_res_deg=2.0, elevation_min_deg=-30.0,
                     elevation_max_deg=10.0, elevation_res_deg=2.5, ground_density=2.0,
                     walls=4, wall_length_min=3.0, wall_length_max=6.0, wall_density=3.0,
                     poles=4, pole_density=6.0, clutter_blobs=3, clutter_points=30,
                     loop_frames=20, loop_radius=5.0),
    eval=EvalSection(exclusion_window=3, success_radius=2.0, buckets=(0.0, 2.0, 4.0, 6.0))
)


class Config:
    """Base config."""
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    BEVREG_CHECKPOINT = os.getenv('BEVREG_CHECKPOINT', '')
    MAX_CONTENT_LENGTH = int(os.getenv('MAX_CONTENT_LENGTH', 64 * 1024 * 1024))
    RUN_CONFIG = DESK_RUN_CONFIG

    # Swagger configuration
    SWAGGER = {
        "title": "BEV Registration API",
        "description": "Point-cloud registration and overlap scoring on bird's-eye-view grids",
        "version": "1.0.0",
        "uiversion": 3,
        "specs_route": "/docs/",
        "headers": [],
        "specs": [
            {
                "endpoint": "apispec",
                "route": "/apispec.json",
                "rule_filter": lambda rule: True,
                "model_filter": lambda tag: True,
            }
        ],
        "static_url_path": "/flasgger_static"
    }


class DeskConfig(Config):
    """Desk-scale preset: 64x64x16 cells over 40 x 40 x 6 m."""
    BEVREG_ENV = 'desk'
    DEBUG = False
    TESTING = False


class FullConfig(Config):
    """Full-scale preset: 256x256x32 cells over 100 x 100 x 8 m."""
    BEVREG_ENV = 'full'
    DEBUG = False
    TESTING = False
    RUN_CONFIG = FULL_RUN_CONFIG


class TestingConfig(Config):
    """Testing config: 16x16x8 grids and narrow channels."""
    BEVREG_ENV = 'testing'
    DEBUG = True
    TESTING = True
    RUN_CONFIG = TESTING_RUN_CONFIG
    BEVREG_CHECKPOINT = ''


PRESETS = {'desk': DeskConfig, 'full': FullConfig, 'testing': TestingConfig}


def preset(name):
    """Return the preset class for `name` (desk, full or testing)."""
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset '{name}', choose from {', '.join(PRESETS)}") from None