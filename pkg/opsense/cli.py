"""
Opsense — CLI entry point
Usage:
    opsense node --config node.json [--listen HOST:PORT] [--log-level LEVEL]
    opsense validate --config node.json
    opsense plugins [--dir PLUGIN_DIR]
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config
from .errors import OpsenseError


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _fail(exc: OpsenseError) -> None:
    print(f"Error [{exc.code}]: {exc}", file=sys.stderr)
    if isinstance(exc.detail, list):
        for item in exc.detail:
            print(f"  - {item}", file=sys.stderr)
    sys.exit(1)


def _cmd_node(args: argparse.Namespace) -> None:
    from .main import create_app
    from .models import NodeConfig
    from .node.engine import load_node
    from .node.runner import bind_socket
    from .wire import load_file

    cfg = load_file(args.config, NodeConfig)
    if args.listen:
        cfg = cfg.model_copy(update={"listen": args.listen})
    node = load_node(cfg)
    host, port = config.split_address(cfg.listen)
    bind_socket(host, port).close()

    try:
        import uvicorn
    except ImportError:
        print("Error: uvicorn not found. Run: pip install opsense", file=sys.stderr)
        sys.exit(1)

    uvicorn.run(create_app(node), host=host, port=port, log_level=args.log_level)


def _cmd_validate(args: argparse.Namespace) -> None:
    from .models import NodeConfig
    from .processing import processor_names
    from .sources import PluginRegistry
    from .validation import RegistryView, validate_node_config
    from .wire import load_file

    cfg = load_file(args.config, NodeConfig)
    registry = PluginRegistry(cfg.plugin_dir or config.PLUGIN_DIR)
    registry.discover()
    result = validate_node_config(cfg, RegistryView(plugins=registry.names(), processors=processor_names()))
    for v in result.violations:
        print(f"{v.path or '-'}: {v.code}: {v.message}")
    if not result.ok:
        sys.exit(1)
    print(f"{args.config}: ok ({len(cfg.sensors)} sensors)")


def _cmd_plugins(args: argparse.Namespace) -> None:
    from .sources import discover_plugins

    result = discover_plugins(args.dir)
    for d in result.descriptors:
        fields = ", ".join(f.name for f in d.fields)
        print(f"{d.plugin_name}\t[{fields}]\t{d.description}")
    for diag in result.diagnostics:
        print(f"skipped {diag.file}: {diag.message}", file=sys.stderr)
    if args.json:
        print(json.dumps([d.model_dump(mode="json") for d in result.descriptors], indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opsense", description="Opsense sensor-stream node.")
    parser.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    node = sub.add_parser("node", help="Run a node")
    node.add_argument("--config", required=True, help="Node config file")
    node.add_argument("--listen", default=None, help="Override the listen address (host:port)")
    node.set_defaults(func=_cmd_node)

    validate = sub.add_parser("validate", help="Validate a node config without starting it")
    validate.add_argument("--config", required=True)
    validate.set_defaults(func=_cmd_validate)

    plugins = sub.add_parser("plugins", help="List plugin descriptors found in a directory")
    plugins.add_argument("--dir", default=config.PLUGIN_DIR)
    plugins.add_argument("--json", action="store_true", help="Also print the descriptors as JSON")
    plugins.set_defaults(func=_cmd_plugins)
    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    try:
        args.func(args)
    except OpsenseError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
