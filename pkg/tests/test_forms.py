"""
Tests for RunConfig parsing, validation and precedence.
"""
import pytest

from interlace.errors import ConfigError
from interlace.forms import (
    FIELD_NAMES,
    load_run_config,
    parse_run_config,
    resolve_run_config,
    validate_run_config,
)


def validate_text(text):
    formdata, lines = parse_run_config(text, source='run.cfg')
    return validate_run_config(formdata, lines, source='run.cfg')


class TestParse:

    def test_comments_and_blanks(self):
        formdata, lines = parse_run_config('# model\n\nembed_dim = 16\nepochs=3\n')
        assert formdata['embed_dim'] == '16'
        assert lines == {'embed_dim': 3, 'epochs': 4}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="run.cfg:2: unknown key 'hidden'"):
            parse_run_config('epochs=3\nhidden=4\n', source='run.cfg')

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match='duplicate key'):
            parse_run_config('epochs=3\nepochs=4\n')

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match='expected key=value'):
            parse_run_config('epochs 3\n')

    def test_boolean_words_lowercased(self):
        formdata, _ = parse_run_config('squared_loss=TRUE\n')
        assert formdata['squared_loss'] == 'true'


class TestValidate:

    def test_typed_values(self):
        values = validate_text(
            'embed_dim=16\nlearning_rate=0.005\nsquared_loss=yes\nnormalize_deltas=off\n'
            'prev_item_view=current\ntask=statechange\ndata=events.csv\n'
        )
        assert values == {
            'embed_dim': 16,
            'learning_rate': 0.005,
            'squared_loss': True,
            'normalize_deltas': False,
            'prev_item_view': 'current',
            'task': 'statechange',
            'data': 'events.csv',
        }

    @pytest.mark.parametrize('text, key', [
        ('epochs=0\n', 'epochs'),
        ('embed_dim=abc\n', 'embed_dim'),
        ('learning_rate=-1\n', 'learning_rate'),
        ('train_frac=1.5\n', 'train_frac'),
        ('task=ranking\n', 'task'),
        ('prev_item_view=latest\n', 'prev_item_view'),
        ('squared_loss=maybe\n', 'squared_loss'),
        ('threads=0\n', 'threads'),
    ])
    def test_bad_values(self, text, key):
        with pytest.raises(ConfigError, match=f"run.cfg:1: {key}"):
            validate_text(text)

    def test_first_bad_line_reported(self):
        with pytest.raises(ConfigError, match='run.cfg:2: epochs'):
            validate_text('seed=1\nepochs=0\nembed_dim=0\n')

    def test_every_field_is_known(self):
        assert {'embed_dim', 'bptt_window', 'threads', 'early_warning'} <= set(FIELD_NAMES)


class TestResolve:

    def test_precedence(self, runtime):
        run = resolve_run_config(
            runtime.settings,
            {'epochs': 5, 'embed_dim': 16, 'seed': 4},
            {'epochs': 7, 'seed': None},
        )
        assert run.train.epochs == 7
        assert run.train.seed == 4
        assert run.embed_dim == 16
        assert run.train.bptt_window == 8

    def test_environment_defaults(self, runtime):
        run = resolve_run_config(runtime.settings)
        assert run.embed_dim == 8
        assert run.split.train_frac == 0.8
        assert run.normalize_deltas is True
        assert run.early_warning is None

    def test_threads_override(self, runtime):
        run = resolve_run_config(runtime.settings, {'threads': 2}, {'threads': 6})
        assert run.train.workers == 6

    def test_split_from_file(self, runtime):
        run = resolve_run_config(
            runtime.settings, {'train_frac': 0.6, 'valid_frac': 0.2, 'test_frac': 0.2}
        )
        assert (run.split.train_frac, run.split.valid_frac, run.split.test_frac) == (0.6, 0.2, 0.2)

    def test_load_from_file(self, tmp_path, runtime):
        path = tmp_path / 'run.cfg'
        path.write_text('task=statechange\nearly_warning=5\n', encoding='utf-8')
        run = resolve_run_config(runtime.settings, load_run_config(path))
        assert run.train.task == 'statechange'
        assert run.early_warning == 5

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match='cannot read'):
            load_run_config(tmp_path / 'absent.cfg')
