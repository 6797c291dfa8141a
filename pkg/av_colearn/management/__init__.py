"""``av-colearn <command> [options]`` dispatcher over the modules in ``commands/``."""

import sys
from importlib import import_module
from pathlib import Path

from django.conf import settings as django_settings
from django.core.management import find_commands

from .. import __version__

COMMANDS_PACKAGE = "av_colearn.management.commands"


def available_commands():
    return sorted(find_commands(str(Path(__file__).parent)))


def load_command_class(name: str):
    return import_module(f"{COMMANDS_PACKAGE}.{name}").Command()


def _usage(prog: str) -> str:
    lines = [f"usage: {prog} <command> [options]", "", "Available commands:"]
    for name in available_commands():
        lines.append(f"    {name:<10} {load_command_class(name).help}")
    lines.append("")
    lines.append(f"Run '{prog} <command> --help' for the options of one command.")
    return "\n".join(lines)


def execute_from_command_line(argv=None) -> None:
    argv = list(sys.argv if argv is None else argv)
    prog = Path(argv[0]).name if argv else "av-colearn"

    # the command classes only need Django's option parsing and output handling
    if not django_settings.configured:
        django_settings.configure()

    if len(argv) < 2 or argv[1] in ("-h", "--help", "help"):
        sys.stdout.write(_usage(prog) + "\n")
        return
    if argv[1] == "--version":
        sys.stdout.write(f"{__version__}\n")
        return
    if argv[1] not in available_commands():
        sys.stderr.write(f"Unknown command: {argv[1]!r}\n{_usage(prog)}\n")
        sys.exit(2)

    load_command_class(argv[1]).run_from_argv([prog, *argv[1:]])


def main() -> None:
    execute_from_command_line(sys.argv)
