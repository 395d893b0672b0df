"""Command-line subcommands, one module per command."""

from pournet.commands import cascade, config, evaluate, infer, match, phantom, register, train

COMMANDS = (phantom, train, infer, match, register, cascade, evaluate, config)

__all__ = ["COMMANDS"]
