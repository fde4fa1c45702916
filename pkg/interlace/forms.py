"""
WTForms validation of RunConfig files.

A RunConfig file is flat ``key=value`` text; ``#`` starts a comment line.
Values are validated by RunConfigForm, then merged over the environment
settings and under command-line flags.
"""
from dataclasses import dataclass
from typing import Optional as Maybe

from werkzeug.datastructures import MultiDict
from wtforms import BooleanField, FloatField, Form, IntegerField, StringField
from wtforms.validators import AnyOf, NumberRange, Optional, ValidationError

from interlace.errors import ConfigError
from interlace.ingest import SplitConfig
from interlace.model import PREV_ITEM_VIEWS
from interlace.trainer import TASKS, TrainConfig

TRUE_WORDS = ('true', '1', 'yes', 'on')
FALSE_WORDS = ('false', '0', 'no', 'off')


def boolean_word(form, field):
    """Accept only true/false style words for a BooleanField."""
    if field.raw_data and field.raw_data[0] not in TRUE_WORDS + FALSE_WORDS:
        raise ValidationError(f"expected one of {', '.join(TRUE_WORDS + FALSE_WORDS)}")


class RunConfigForm(Form):
    """Every key a RunConfig file may set."""
    # Model
    embed_dim = IntegerField('Embedding size', validators=[Optional(), NumberRange(min=1)])

    # Training
    epochs = IntegerField('Epochs', validators=[Optional(), NumberRange(min=1)])
    learning_rate = FloatField('Learning rate', validators=[Optional(), NumberRange(min=0)])
    weight_decay = FloatField('Weight decay', validators=[Optional(), NumberRange(min=0)])
    bptt_window = IntegerField('Batches per backprop segment', validators=[Optional(), NumberRange(min=1)])
    seed = IntegerField('Seed', validators=[Optional(), NumberRange(min=0)])
    lambda_u = FloatField('User drift scale', validators=[Optional(), NumberRange(min=0)])
    lambda_i = FloatField('Item drift scale', validators=[Optional(), NumberRange(min=0)])
    lambda_s = FloatField('State loss scale', validators=[Optional(), NumberRange(min=0)])
    squared_loss = BooleanField('Squared loss', false_values=FALSE_WORDS, validators=[Optional(), boolean_word])
    prev_item_view = StringField('Previous item view', validators=[
        Optional(),
        AnyOf(PREV_ITEM_VIEWS, message='must be one of %(values)s'),
    ])
    task = StringField('Task', validators=[
        Optional(),
        AnyOf(TASKS, message='must be one of %(values)s'),
    ])

    # Split
    train_frac = FloatField('Training fraction', validators=[Optional(), NumberRange(min=0, max=1)])
    valid_frac = FloatField('Validation fraction', validators=[Optional(), NumberRange(min=0, max=1)])
    test_frac = FloatField('Test fraction', validators=[Optional(), NumberRange(min=0, max=1)])
    normalize_deltas = BooleanField('Normalize deltas', false_values=FALSE_WORDS, validators=[Optional(), boolean_word])

    # Runtime
    threads = IntegerField('Worker threads', validators=[Optional(), NumberRange(min=1)])
    early_warning = IntegerField('Early-warning horizon', validators=[Optional(), NumberRange(min=1)])
    data = StringField('Interaction CSV')
    out = StringField('Output directory')
    checkpoint = StringField('Checkpoint directory')


FIELD_NAMES = tuple(field.name for field in RunConfigForm())
_BOOLEAN_FIELDS = tuple(field.name for field in RunConfigForm() if isinstance(field, BooleanField))


@dataclass(frozen=True)
class RunConfig:
    """Fully typed configuration of one CLI run."""
    train: TrainConfig
    split: SplitConfig
    embed_dim: int = 128
    normalize_deltas: bool = True
    early_warning: Maybe[int] = None
    data: Maybe[str] = None
    out: Maybe[str] = None
    checkpoint: Maybe[str] = None


def parse_run_config(text, source='<config>'):
    """
    Split RunConfig text into form data.

    Args:
        text: File contents
        source: Name used in error messages

    Returns:
        (MultiDict of key -> value, dict of key -> line number)

    Raises:
        ConfigError: on a malformed line, an unknown key or a repeated key
    """
    pairs, lines = [], {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected key=value, got {raw!r}")
        if key not in FIELD_NAMES:
            raise ConfigError(f"{source}:{number}: unknown key {key!r}")
        if key in lines:
            raise ConfigError(
                f"{source}:{number}: duplicate key {key!r} (first set on line {lines[key]})"
            )
        if key in _BOOLEAN_FIELDS:
            value = value.lower()
        lines[key] = number
        pairs.append((key, value))
    return MultiDict(pairs), lines


def validate_run_config(formdata, lines=None, source='<config>'):
    """
    Validate form data with RunConfigForm.

    Returns:
        key -> typed value, for the keys present in ``formdata``

    Raises:
        ConfigError: naming the first offending key and its line
    """
    lines = lines or {}
    form = RunConfigForm(formdata)
    if not form.validate():
        key = min(form.errors, key=lambda name: lines.get(name, 0))
        where = f"{source}:{lines[key]}" if key in lines else source
        raise ConfigError(f"{where}: {key}: {'; '.join(form.errors[key])}")
    return {
        key: form[key].data
        for key in formdata.keys()
        if form[key].data is not None and form[key].data != ''
    }


def load_run_config(path):
    """Read, parse and validate a RunConfig file."""
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    formdata, lines = parse_run_config(text, source=str(path))
    return validate_run_config(formdata, lines, source=str(path))


def resolve_run_config(settings, file_values=None, overrides=None) -> RunConfig:
    """
    Merge environment settings < file values < command-line overrides.

    Args:
        settings: Runtime settings (upper-case keys)
        file_values: Output of load_run_config
        overrides: Flag values; None entries are ignored

    Returns:
        RunConfig
    """
    merged = {
        key.lower(): value for key, value in settings.items() if key.lower() in FIELD_NAMES
    }
    merged.update(file_values or {})
    merged.update({key: value for key, value in (overrides or {}).items() if value is not None})

    train = TrainConfig.from_settings({key.upper(): value for key, value in merged.items()})
    split = SplitConfig(
        train_frac=float(merged.get('train_frac', 0.8)),
        valid_frac=float(merged.get('valid_frac', 0.1)),
        test_frac=float(merged.get('test_frac', 0.1)),
    )
    return RunConfig(
        train=train,
        split=split,
        embed_dim=int(merged.get('embed_dim', 128)),
        normalize_deltas=bool(merged.get('normalize_deltas', True)),
        early_warning=merged.get('early_warning'),
        data=merged.get('data'),
        out=merged.get('out'),
        checkpoint=merged.get('checkpoint'),
    )
