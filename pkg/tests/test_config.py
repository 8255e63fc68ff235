import pytest

from app import config
from app.config import DESK_RUN_CONFIG, TESTING_RUN_CONFIG, RunConfig, dump_run_config, parse_run_config
from app.utils.errors import ConfigError, InputOutputError


def test_dump_then_parse_is_equal():
    """Every preset survives a trip through INI text unchanged."""
    for run_config in (DESK_RUN_CONFIG, config.FULL_RUN_CONFIG, TESTING_RUN_CONFIG):
        assert parse_run_config(dump_run_config(run_config)) == run_config


def test_empty_text_gives_defaults():
    """No file means the desk defaults."""
    assert parse_run_config('') == RunConfig()


def test_partial_file_layers_over_base():
    """Keys not in the file keep the base values."""
    text = '[ransac]\ninlier_radius = 0.8\n[grid]\nresolution = 32,32,8\n'
    run_config = parse_run_config(text, base=TESTING_RUN_CONFIG)
    assert run_config.ransac.inlier_radius == 0.8
    assert run_config.grid.resolution == (32, 32, 8)
    assert run_config.model == TESTING_RUN_CONFIG.model


def test_unknown_section_and_key():
    """Unknown sections and keys are configuration errors."""
    with pytest.raises(ConfigError, match='unknown config section'):
        parse_run_config('[optimizer]\nlr = 1\n')
    with pytest.raises(ConfigError, match='grid'):
        parse_run_config('[grid]\ncolour = red\n')


@pytest.mark.parametrize('text', [
    '[grid]\nwindow = 4\n',
    '[grid]\nresolution = 0,4,4\n',
    '[grid]\nextent = 1,-1,-1,1,-1,1\n',
    '[grid]\nextent = 1,2,3\n',
    '[model]\nchannels = 8\n',
    '[model]\noverlap_level = 5\n',
    '[loss]\ndelta_p = 2.0\n',
    '[train]\nlr = 0\n',
    '[train]\nsteps = ten\n',
    '[ransac]\nearly_exit_ratio = 1.5\n',
    '[eval]\nbuckets = 0,5,5\n',
    '[eval]\noverlap_cuts = 0,0.5\n',
    '[data]\nelevation_min_deg = 10\n',
])
def test_invalid_values(text):
    """Out-of-range or malformed values are rejected."""
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_overrides_win_over_file():
    """--set style overrides apply after the file."""
    run_config = parse_run_config('[train]\nsteps = 10\n', overrides=['train.steps=3', 'train.log_wall_time=false'])
    assert run_config.train.steps == 3
    assert run_config.train.log_wall_time is False


@pytest.mark.parametrize('override', ['train.steps', 'steps=3', 'optimizer.lr=1'])
def test_bad_overrides(override):
    """Overrides must name a known section and carry a value."""
    with pytest.raises(ConfigError):
        parse_run_config('', overrides=[override])


def test_load_run_config(tmp_path):
    """Config files are read from disk; missing ones are I/O errors."""
    path = tmp_path / 'run.ini'
    path.write_text('[model]\nmax_keypoints = 10\n')
    assert config.load_run_config(path).model.max_keypoints == 10
    with pytest.raises(InputOutputError):
        config.load_run_config(tmp_path / 'missing.ini')


def test_derived_radii():
    """Radii follow the fine cell size: 1.5 cells of 1 m and twice that."""
    assert TESTING_RUN_CONFIG.positive_radius == pytest.approx(1.5)
    assert TESTING_RUN_CONFIG.safe_radius == pytest.approx(3.0)
    assert TESTING_RUN_CONFIG.deep_stride == 8


def test_digest_tracks_shape_settings():
    """Only settings that change parameter shapes change the digest."""
    base = TESTING_RUN_CONFIG.digest()
    assert parse_run_config('[ransac]\nseed = 99\n', base=TESTING_RUN_CONFIG).digest() == base
    assert parse_run_config('[model]\ndescriptor_dim = 16\n', base=TESTING_RUN_CONFIG).digest() != base
    assert len(base) == 32


def test_presets():
    """Presets resolve case-insensitively; unknown names are errors."""
    assert config.preset('Testing').RUN_CONFIG == TESTING_RUN_CONFIG
    assert config.preset('full').RUN_CONFIG.grid.resolution == (256, 256, 32)
    with pytest.raises(ConfigError):
        config.preset('huge')
