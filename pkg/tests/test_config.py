import json

import pytest
from pydantic import ValidationError

from tiednet.config import ModelConfig, load_config, parse_config
from tiednet.errors import ConfigError, ConfigParseError, ConfigValidationError, UnknownKeyError


def vit(**overrides):
    return json.dumps({'family': 'vit', **overrides})


class TestParseConfig:
    def test_deit_defaults(self):
        cfg = parse_config(vit())
        assert (cfg.dim, cfg.depth, cfg.heads, cfg.patch) == (384, 12, 6, 16)
        assert cfg.hidden_dim == 1536
        assert cfg.tokens == 196
        assert cfg.norm_eps == 1e-6
        assert cfg.variant == 'baseline'

    def test_resnet_pe_defaults(self):
        cfg = parse_config(json.dumps({'family': 'resnet', 'variant': 'pe'}))
        assert cfg.pe_stages == [1, 2, 3, 4]
        assert cfg.stage_sharing is True
        assert cfg.norm_eps == 1e-5

    def test_resnet_baseline_defaults(self):
        cfg = parse_config(json.dumps({'family': 'resnet'}))
        assert cfg.pe_stages == []
        assert cfg.stage_sharing is False
        assert cfg.resnet_layers == [3, 4, 6, 3]

    def test_pe_stage_subset(self):
        cfg = parse_config(json.dumps({'family': 'resnet', 'variant': 'pe', 'pe_stages': [3, 4]}))
        assert cfg.pe_stages == [3, 4]

    def test_bytes_input(self):
        assert parse_config(vit().encode('utf-8')).family == 'vit'

    def test_frozen(self):
        cfg = parse_config(vit())
        with pytest.raises(ValidationError):
            cfg.dim = 8

    def test_echo_is_canonical(self):
        cfg = parse_config(vit(depth=2))
        echo = cfg.to_json()
        assert ' ' not in echo
        assert list(json.loads(echo)) == sorted(json.loads(echo))
        assert parse_config(echo) == cfg


class TestValidation:
    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigValidationError) as info:
            parse_config(vit(heads=5))
        assert info.value.field == 'heads'

    def test_patch_must_divide_image(self):
        with pytest.raises(ConfigValidationError) as info:
            parse_config(vit(patch=15))
        assert info.value.field == 'patch'

    def test_unknown_key(self):
        with pytest.raises(UnknownKeyError) as info:
            parse_config(vit(pe_stage=[1]))
        assert info.value.field == 'pe_stage'

    def test_pe_stages_need_pe_variant(self):
        with pytest.raises(ConfigValidationError) as info:
            parse_config(json.dumps({'family': 'resnet', 'pe_stages': [1]}))
        assert info.value.field == 'pe_stages'

    @pytest.mark.parametrize('stages', [[0], [5], [2, 2]])
    def test_bad_pe_stages(self, stages):
        with pytest.raises(ConfigValidationError) as info:
            parse_config(json.dumps({'family': 'resnet', 'variant': 'pe', 'pe_stages': stages}))
        assert info.value.field == 'pe_stages'

    def test_pe_stage_beyond_layers(self):
        with pytest.raises(ConfigValidationError):
            parse_config(json.dumps({
                'family': 'resnet', 'variant': 'pe', 'resnet_layers': [2, 2], 'pe_stages': [3],
            }))

    def test_field_level_error(self):
        with pytest.raises(ConfigValidationError) as info:
            parse_config(vit(depth=0))
        assert info.value.field == 'depth'

    def test_unknown_family(self):
        with pytest.raises(ConfigValidationError) as info:
            parse_config(json.dumps({'family': 'mlp'}))
        assert info.value.field == 'family'

    def test_not_an_object(self):
        with pytest.raises(ConfigValidationError):
            parse_config('[1, 2]')


class TestParseErrors:
    def test_byte_offset(self):
        with pytest.raises(ConfigParseError) as info:
            parse_config(b'{"family": "vit",}')
        assert info.value.offset == 17

    def test_offset_counts_bytes_not_characters(self):
        with pytest.raises(ConfigParseError) as info:
            parse_config('{"é": }'.encode('utf-8'))
        assert info.value.offset == 7

    def test_invalid_utf8(self):
        with pytest.raises(ConfigParseError) as info:
            parse_config(b'{"family": "\xff"}')
        assert info.value.offset == 12


class TestLoadConfig:
    @pytest.mark.parametrize('name', [
        'deit-s', 'vit-pe', 'resnet50', 'resnet50-pe', 'resnet50-pe34',
        'vit-tiny', 'vit-pe-tiny', 'resnet-pe-tiny',
    ])
    def test_shipped_configs(self, configs_dir, name):
        assert isinstance(load_config(configs_dir / f'{name}.json'), ModelConfig)

    def test_missing_file_names_path(self, tmp_path):
        path = tmp_path / 'absent.json'
        with pytest.raises(ConfigError, match='absent.json'):
            load_config(path)
