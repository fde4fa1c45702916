"""Command-line interface."""
import click

from interlace import create_runtime

ENVIRONMENTS = ('development', 'production', 'testing', 'default')


@click.group(context_settings={'help_option_names': ['-h', '--help']})
@click.option('--env', 'config_name', envvar='INTERLACE_ENV', default='default',
              type=click.Choice(ENVIRONMENTS), show_default=True,
              help='Configuration environment.')
@click.option('--threads', type=click.IntRange(min=1), default=None,
              help='Cap on worker threads (overrides config files).')
@click.pass_context
def cli(ctx, config_name, threads):
    """Train and evaluate coupled user/item embeddings on interaction streams."""
    ctx.obj = create_runtime(config_name)
    ctx.meta['threads'] = threads


from interlace.cli import commands  # noqa: E402,F401
