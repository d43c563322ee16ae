"""Command-line surface: parser, run configuration and subcommand handlers."""
