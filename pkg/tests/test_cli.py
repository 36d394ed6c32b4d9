import json

import pytest
from click.testing import CliRunner

from conftest import CONFIGS
from tiednet.cli import cli, cli_dispatch

VIT_PE_TINY = str(CONFIGS / 'vit-pe-tiny.json')


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def small_vit(tmp_path):
    path = tmp_path / 'small.json'
    path.write_text(json.dumps({
        'family': 'vit', 'variant': 'pe', 'dim': 16, 'depth': 1, 'heads': 2,
        'patch': 8, 'image_size': 16, 'num_classes': 3,
    }))
    return str(path)


class TestAudit:
    def test_json(self, runner):
        result = runner.invoke(cli, ['audit', '--config', str(CONFIGS / 'vit-pe.json'), '--json'])
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload['total_params'] == 11_433_832
        assert payload['total_macs'] == 4_598_882_304

    def test_text(self, runner):
        result = runner.invoke(cli, ['audit', '--config', VIT_PE_TINY])
        assert result.exit_code == 0, result.output
        assert 'total params:' in result.output
        assert 'total MACs @ 32x32:' in result.output

    def test_invalid_config(self, runner, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text('{"family": "vit", "heads": 5}')
        result = runner.invoke(cli, ['audit', '--config', str(path)])
        assert result.exit_code == 1
        assert 'heads' in result.output

    def test_missing_config(self, runner, tmp_path):
        result = runner.invoke(cli, ['audit', '--config', str(tmp_path / 'absent.json')])
        assert result.exit_code == 1
        assert 'absent.json' in result.output


class TestCompare:
    def test_ratios(self, runner):
        result = runner.invoke(cli, [
            'compare', '--config-a', str(CONFIGS / 'deit-s.json'),
            '--config-b', str(CONFIGS / 'vit-pe.json'),
        ])
        assert result.exit_code == 0, result.output
        assert 'params ratio: 0.519' in result.output
        assert 'macs ratio: 1.000' in result.output


class TestGradcheck:
    def test_passes(self, runner, small_vit):
        result = runner.invoke(cli, ['gradcheck', '--config', small_vit, '--coords', '4'])
        assert result.exit_code == 0, result.output
        assert 'max rel err' in result.output.splitlines()[-1]


class TestTrainAndEval:
    def train_args(self, out, seed='0'):
        return ['train', '--config', VIT_PE_TINY, '--steps', '3', '--batch', '8',
                '--optimizer', 'adamw', '--lr', '0.001', '--seed', seed, '--out', str(out),
                '--n-per-class', '4', '--no-progress']

    def test_train_writes_checkpoint_and_metrics(self, runner, tmp_path):
        out = tmp_path / 'model.peck'
        result = runner.invoke(cli, self.train_args(out))
        assert result.exit_code == 0, result.output
        assert out.exists()
        assert f'saved {out}' in result.output
        assert 'final loss' in result.output
        lines = (tmp_path / 'model.peck.metrics.jsonl').read_text().splitlines()
        assert [json.loads(line)['step'] for line in lines] == [1, 2, 3]

    def test_train_is_reproducible(self, runner, tmp_path):
        for name in ('a', 'b'):
            assert runner.invoke(cli, self.train_args(tmp_path / f'{name}.peck')).exit_code == 0
        assert (tmp_path / 'a.peck').read_bytes() == (tmp_path / 'b.peck').read_bytes()
        assert ((tmp_path / 'a.peck.metrics.jsonl').read_text()
                == (tmp_path / 'b.peck.metrics.jsonl').read_text())

    def test_eval(self, runner, tmp_path):
        out = tmp_path / 'model.peck'
        runner.invoke(cli, self.train_args(out))
        result = runner.invoke(cli, ['eval', '--config', VIT_PE_TINY, '--ckpt', str(out),
                                     '--n-per-class', '4'])
        assert result.exit_code == 0, result.output
        assert result.output.startswith('eval loss ')

    def test_eval_corrupt_checkpoint(self, runner, tmp_path):
        out = tmp_path / 'model.peck'
        out.write_bytes(b'NOPE' + bytes(16))
        result = runner.invoke(cli, ['eval', '--config', VIT_PE_TINY, '--ckpt', str(out)])
        assert result.exit_code == 1

    def test_unknown_optimizer_is_usage_error(self, runner, tmp_path):
        args = self.train_args(tmp_path / 'model.peck')
        args[args.index('adamw')] = 'lion'
        assert runner.invoke(cli, args).exit_code == 2


class TestDispatch:
    def test_success(self, capsys):
        assert cli_dispatch(['audit', '--config', VIT_PE_TINY]) == 0
        assert 'total params:' in capsys.readouterr().out

    def test_validation_failure(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text('{"family": "vit",}')
        assert cli_dispatch(['audit', '--config', str(path)]) == 1

    def test_usage_error(self):
        assert cli_dispatch(['audit']) == 2
