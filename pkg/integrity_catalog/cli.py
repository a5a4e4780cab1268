import logging
import sys
import threading
import time
from enum import Enum
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from integrity_catalog.bench import BenchConfig, run_bench, write_csv
from integrity_catalog.catalog import Catalog, VerifiedContext
from integrity_catalog.config import CatalogConfig, parse_allowlist, parse_host_port
from integrity_catalog.errors import (
    CatalogError,
    ConfigError,
    CorruptBlock,
    CorruptData,
    IntegrityViolation,
    IoError,
    ListProofFailed,
    ProofMismatch,
    QuorumError,
    RecoverVerifyFailed,
)
from integrity_catalog.network.peer import PeerNode, Role, ThreadScheduler
from integrity_catalog.network.transport import PeerServer, TcpTransport

logger = logging.getLogger(__name__)

EXIT_INTEGRITY = 2
EXIT_QUORUM = 3
EXIT_IO = 4
INTEGRITY_ERRORS = (IntegrityViolation, ListProofFailed, RecoverVerifyFailed, CorruptData, CorruptBlock, ProofMismatch)


class ServeRole(str, Enum):
    VERIFIER = "verifier"
    PRESERVER = "preserver"
    ORIGIN = "origin"


app = typer.Typer(help="Tamper-evident fixity catalog backed by a verifier network")
console = Console()

ConfigOption = typer.Option(None, "--config", "-c", help="Path to the catalog configuration file (dotenv format).")
VerboseOption = typer.Option(False, "--verbose", "-v", help="Enable verbose logging.")


def _setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(markup=True)],
    )


def _load_config(path: Optional[Path]) -> CatalogConfig:
    config = CatalogConfig.load(path)
    config.validate()
    return config


def _fail(error: Exception, verbose: bool = False):
    """Prints the error and exits with the code of its family."""
    if isinstance(error, INTEGRITY_ERRORS):
        typer.secho(f"Integrity failure: {error}", fg=typer.colors.RED, bold=True)
        typer.secho("The local catalog cannot be trusted; run 'recover'.", fg=typer.colors.YELLOW)
        code = EXIT_INTEGRITY
    elif isinstance(error, QuorumError):
        typer.secho(f"Quorum failure: {error}", fg=typer.colors.RED)
        code = EXIT_QUORUM
    elif isinstance(error, (IoError, OSError)):
        typer.secho(f"I/O error: {error}", fg=typer.colors.RED)
        code = EXIT_IO
    elif isinstance(error, ConfigError):
        typer.secho(f"Configuration Error: {error}", fg=typer.colors.RED)
        code = 1
    else:
        typer.secho(f"An error occurred: {error}", fg=typer.colors.RED)
        code = 1
    if verbose:
        logger.exception("Traceback:")
    raise typer.Exit(code=code)


def _show(value: bytes) -> str:
    try:
        return value.decode("utf-8")
    except UnicodeDecodeError:
        return value.hex()


@app.command()
def init(
    config_path: Optional[Path] = ConfigOption,
    force: bool = typer.Option(False, "--force", help="Overwrite an existing catalog file."),
    verbose: bool = VerboseOption,
):
    """Creates an empty catalog file."""
    _setup_logging(verbose)
    try:
        config = _load_config(config_path)
        Catalog.init(config, force=force).close()
        typer.secho(f"Created catalog {config.catalog_path}", fg=typer.colors.GREEN)
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


@app.command()
def put(
    key: str = typer.Argument(..., help="Object identifier, e.g. urn:doc/1#v1."),
    value: str = typer.Argument(..., help="Digest string computed by the host, e.g. sha256:ab12..."),
    config_path: Optional[Path] = ConfigOption,
    verbose: bool = VerboseOption,
):
    """Registers a new identifier; it becomes verifiable after the next seal."""
    _setup_logging(verbose)
    try:
        with Catalog(_load_config(config_path)) as catalog:
            catalog.put(key.encode("utf-8"), value.encode("utf-8"))
        typer.secho(f"Registered {key}", fg=typer.colors.GREEN)
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


@app.command()
def amend(
    key: str = typer.Argument(..., help="Existing object identifier."),
    suffix: str = typer.Argument(..., help="Text appended to the stored value."),
    config_path: Optional[Path] = ConfigOption,
    verbose: bool = VerboseOption,
):
    """Appends to the value of an existing identifier."""
    _setup_logging(verbose)
    try:
        with Catalog(_load_config(config_path)) as catalog:
            catalog.amend(key.encode("utf-8"), suffix.encode("utf-8"))
        typer.secho(f"Amended {key}", fg=typer.colors.GREEN)
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


def _verified(catalog: Catalog) -> VerifiedContext:
    ctx = catalog.verify()
    typer.secho(f"Verified at snapshot {ctx.snapshot_id}", fg=typer.colors.CYAN)
    return ctx


@app.command()
def get(
    key: str = typer.Argument(..., help="Object identifier to look up."),
    config_path: Optional[Path] = ConfigOption,
    verbose: bool = VerboseOption,
):
    """Verifies the catalog against the network, then prints the proven value of KEY."""
    _setup_logging(verbose)
    try:
        with Catalog(_load_config(config_path)) as catalog:
            ctx = _verified(catalog)
            found = catalog.verified_get(ctx, key.encode("utf-8"))
        if found is None:
            typer.secho(f"{key} is not in the catalog (proven absent at snapshot {ctx.snapshot_id})",
                        fg=typer.colors.YELLOW)
            raise typer.Exit(code=1)
        value, value_snapshot_id = found
        typer.echo(f"{_show(value)}\t(snapshot {value_snapshot_id})")
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


@app.command()
def history(
    key: str = typer.Argument(..., help="Object identifier."),
    config_path: Optional[Path] = ConfigOption,
    verbose: bool = VerboseOption,
):
    """Lists every proven version of KEY, newest first."""
    _setup_logging(verbose)
    try:
        with Catalog(_load_config(config_path)) as catalog:
            entries = catalog.history(_verified(catalog), key.encode("utf-8"))
        table = Table(title=f"History of {key}")
        table.add_column("Snapshot", justify="right")
        table.add_column("Sealed at (UTC)")
        table.add_column("Value")
        for entry in entries:
            sealed_at = time.strftime("%Y-%m-%d %H:%M:%S", time.gmtime(entry.timestamp))
            table.add_row(str(entry.snapshot_id), sealed_at, _show(entry.value))
        console.print(table)
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


@app.command()
def seal(
    config_path: Optional[Path] = ConfigOption,
    linger: float = typer.Option(0.0, "--linger", help="Seconds to keep serving preserver update requests afterwards."),
    verbose: bool = VerboseOption,
):
    """Closes the current epoch and publishes its token to the verifiers."""
    _setup_logging(verbose)
    try:
        config = _load_config(config_path)
        with Catalog(config) as catalog:
            server = None
            if linger > 0:
                server = PeerServer(parse_host_port(config.listen), catalog.handle, config.psk)
                threading.Thread(target=server.serve_forever, daemon=True).start()
            try:
                token = catalog.seal()
                typer.secho(f"Sealed snapshot {token.snapshot_id}: LA {token.authenticator.hex()}",
                            fg=typer.colors.GREEN, bold=True)
                if server is not None:
                    typer.secho(f"Serving preservers on {config.listen} for {linger:g}s...", fg=typer.colors.CYAN)
                    time.sleep(linger)
            finally:
                if server is not None:
                    server.shutdown()
                    server.server_close()
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


@app.command()
def verify(config_path: Optional[Path] = ConfigOption, verbose: bool = VerboseOption):
    """Checks the local catalog against the tokens held by the verifiers."""
    _setup_logging(verbose)
    try:
        with Catalog(_load_config(config_path)) as catalog:
            ctx = catalog.verify()
        typer.secho(f"Catalog intact at snapshot {ctx.snapshot_id}", fg=typer.colors.GREEN, bold=True)
        typer.echo(f"LA  {ctx.la.hex()}")
        typer.echo(f"PRA {ctx.pra.hex()}")
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


@app.command()
def recover(config_path: Optional[Path] = ConfigOption, verbose: bool = VerboseOption):
    """Rebuilds the local catalog from the version most preservers agree on."""
    _setup_logging(verbose)
    try:
        with Catalog(_load_config(config_path)) as catalog:
            ctx = catalog.recover()
        typer.secho(f"Recovered catalog to snapshot {ctx.snapshot_id}", fg=typer.colors.GREEN, bold=True)
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


@app.command()
def serve(
    role: ServeRole = typer.Option(ServeRole.VERIFIER, "--role", help="verifier, preserver or origin."),
    config_path: Optional[Path] = ConfigOption,
    node_id: Optional[str] = typer.Option(None, "--node-id", help="Identity of this node (defaults to NODE_ID)."),
    listen: Optional[str] = typer.Option(None, "--listen", help="host:port to listen on (defaults to LISTEN)."),
    data_dir: Path = typer.Option(Path("peer-data"), "--data-dir", help="Directory for registries and replicas."),
    allowlist_path: Optional[Path] = typer.Option(
        None, "--origin-allowlist", help="File of 'origin_id host:port' lines; other origins are refused."
    ),
    psk: Optional[str] = typer.Option(None, "--psk", help="Hex pre-shared key for frame MACs (defaults to PSK)."),
    verbose: bool = VerboseOption,
):
    """Runs a peer daemon until interrupted."""
    _setup_logging(verbose)
    try:
        config = CatalogConfig.load(config_path)
        if node_id:
            config.node_id = node_id
        if listen:
            config.listen = listen
        if psk:
            config.psk = bytes.fromhex(psk)
        config.validate()
        address = parse_host_port(config.listen)

        if role == ServeRole.ORIGIN:
            catalog = Catalog(config)
            handler = catalog.handle
        else:
            origins = parse_allowlist(allowlist_path) if allowlist_path else {}
            if role == ServeRole.PRESERVER and not origins:
                raise ConfigError("A preserver needs --origin-allowlist to reach its origins.")
            node = PeerNode(
                config.node_id, Role(role.value), data_dir, TcpTransport(origins, config.psk, node_id=config.node_id),
                scheduler=ThreadScheduler(), allowlist=origins.keys() if allowlist_path else None,
                page_size=config.page_size, hash_algorithm=config.hash_algorithm,
                reply_timeout=config.policy.reply_timeout,
            )
            handler = node.handle

        with PeerServer(address, handler, config.psk) as server:
            typer.secho(f"{role.value} '{config.node_id}' listening on {config.listen}", fg=typer.colors.GREEN)
            try:
                server.serve_forever()
            except KeyboardInterrupt:
                typer.secho("Shutting down.", fg=typer.colors.YELLOW)
    except (CatalogError, OSError, ValueError) as e:
        _fail(e, verbose)


@app.command()
def bench(
    catalog_path: Path = typer.Option(Path("bench.icat"), "--catalog", help="Scratch catalog file (overwritten)."),
    keys_per_snapshot: int = typer.Option(50_000, "--keys-per-snapshot"),
    snapshots: int = typer.Option(10, "--snapshots"),
    searches: int = typer.Option(10_000, "--searches", help="Verified searches after each snapshot."),
    skip_no: int = typer.Option(0, "--skip", help="Skip factor for cached authenticators."),
    page_size: int = typer.Option(16384, "--page-size"),
    input_path: Optional[Path] = typer.Option(None, "--input", help="Newline-delimited identifiers; synthetic if omitted."),
    seed: int = typer.Option(0, "--seed"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="CSV destination (stdout if omitted)."),
    verbose: bool = VerboseOption,
):
    """Measures insert, snapshot and verified-search costs per snapshot."""
    _setup_logging(verbose)
    config = BenchConfig(keys_per_snapshot, snapshots, searches, skip_no, page_size,
                         input_path=input_path, seed=seed)
    try:
        for leftover in (catalog_path, Path(str(catalog_path) + ".journal")):
            if leftover.exists():
                leftover.unlink()
        rows = run_bench(config, catalog_path)
        if output is None:
            write_csv(rows, sys.stdout)
        else:
            with open(output, "w", newline="") as out:
                write_csv(rows, out)
            typer.secho(f"Wrote {len(rows)} rows to {output}", fg=typer.colors.GREEN)
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


@app.command()
def corrupt(
    config_path: Optional[Path] = ConfigOption,
    offset: Optional[int] = typer.Option(None, "--offset", help="Flip the bits of the octet at this offset."),
    truncate: Optional[int] = typer.Option(None, "--truncate", help="Truncate the file to this many octets."),
    verbose: bool = VerboseOption,
):
    """Damages the catalog file on purpose, to exercise detection and recovery."""
    _setup_logging(verbose)
    try:
        path = Path(_load_config(config_path).catalog_path)
        if (offset is None) == (truncate is None):
            raise ConfigError("Give exactly one of --offset or --truncate.")
        with open(path, "r+b") as handle:
            if truncate is not None:
                handle.truncate(truncate)
                typer.secho(f"Truncated {path} to {truncate} octets", fg=typer.colors.YELLOW)
            else:
                handle.seek(offset)
                original = handle.read(1)
                if not original:
                    raise ConfigError(f"Offset {offset} is past the end of {path}.")
                handle.seek(offset)
                handle.write(bytes([original[0] ^ 0xFF]))
                typer.secho(f"Flipped octet {offset} of {path}", fg=typer.colors.YELLOW)
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


@app.command()
def stats(
    config_path: Optional[Path] = ConfigOption,
    audit: bool = typer.Option(False, "--audit", help="Recompute every snapshot's PRA from scratch."),
    verbose: bool = VerboseOption,
):
    """Prints file size, page layout and snapshot counts."""
    _setup_logging(verbose)
    try:
        with Catalog(_load_config(config_path)) as catalog:
            info = catalog.stats(audit=audit)
        table = Table(title=str(info.get("path", "catalog")))
        table.add_column("Metric")
        table.add_column("Value", justify="right")
        for name, value in info.items():
            if name in ("path", "blocks_per_epoch", "audited_snapshots"):
                continue
            table.add_row(name, str(value))
        console.print(table)
        per_epoch = info.get("blocks_per_epoch", {})
        if per_epoch:
            epochs = Table(title="Pages per epoch")
            epochs.add_column("Epoch", justify="right")
            epochs.add_column("Pages", justify="right")
            for epoch, count in sorted(per_epoch.items()):
                epochs.add_row(str(epoch), str(count))
            console.print(epochs)
        if audit:
            audited = info["audited_snapshots"]
            missing = sorted(set(range(1, info["snapshots"] + 1)) - set(audited))
            if missing:
                raise IntegrityViolation(f"Snapshots {missing} do not reproduce their PRA.")
            typer.secho(f"All {len(audited)} snapshots audited", fg=typer.colors.GREEN)
    except (CatalogError, OSError) as e:
        _fail(e, verbose)


if __name__ == "__main__":
    app()
