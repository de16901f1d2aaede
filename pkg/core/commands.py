"""Shared plumbing for the management commands.

Option precedence: flags given on the command line, then the ``--config`` JSON
file, then the ``RECIV`` settings defaults, then the form's own initial values.
"""

import json
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from apps.demand.exceptions import ReciVError

logger = logging.getLogger(__name__)

# Options every command understands that are not part of the validated form.
BASE_OPTIONS = {
    "config",
    "verbosity",
    "settings",
    "pythonpath",
    "traceback",
    "no_color",
    "force_color",
    "skip_checks",
}


def load_config_file(path):
    path = Path(path)
    if not path.exists():
        raise CommandError(f"config file {path} does not exist")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CommandError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise CommandError(f"config file {path} must hold a JSON object")
    return {key.replace("-", "_"): value for key, value in values.items()}


def form_errors(form):
    return "; ".join(f"{name}: {' '.join(messages)}" for name, messages in form.errors.items())


class ConfigurableCommand(BaseCommand):
    """A command whose options are merged from flags, a JSON file and settings, then validated by a form.

    Subclasses set ``form_class``, declare their flags with ``default=None`` in
    ``add_options`` and implement ``run(**cleaned_data)``.
    """

    form_class = None
    settings_defaults = {}

    def add_arguments(self, parser):
        parser.add_argument("--config", help="JSON file whose keys mirror the long flag names")
        self.add_options(parser)

    def add_options(self, parser):
        pass

    def reciv_settings(self):
        return getattr(settings, "RECIV", {})

    def merged_options(self, options):
        reciv = self.reciv_settings()
        merged = {name: reciv[key] for name, key in self.settings_defaults.items() if key in reciv}
        if options.get("config"):
            merged.update(load_config_file(options["config"]))
        merged.update({key: value for key, value in options.items() if key not in BASE_OPTIONS and value is not None})
        return merged

    def validate(self, options):
        data = {name: field.initial for name, field in self.form_class.base_fields.items() if field.initial is not None}
        data.update(self.merged_options(options))
        form = self.form_class(data=data)
        if not form.is_valid():
            raise CommandError(f"invalid options: {form_errors(form)}")
        return form.cleaned_data

    def handle(self, *args, **options):
        cleaned = self.validate(options)
        logger.debug("%s options: %s", self.__class__.__module__, cleaned)
        try:
            return self.run(**cleaned)
        except ReciVError as exc:
            raise CommandError(f"{exc.__class__.__name__}: {exc}") from exc

    def run(self, **options):
        raise NotImplementedError
