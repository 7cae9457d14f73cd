"""Operator entry point: serve the backend, run scenarios, replay audit logs.

Exit codes for `run`: 0 success, 1 constraints unsatisfied, 2 scenario schema
violation, 3 transport failure. Flags can be set via EMBSYNC_* environment
variables (click auto-envvar) and session config keys via EMBSYNC_<KEY>.
"""

from __future__ import annotations

import json
import signal
import sys
import threading

import click

from .controller import Controller
from .policy import make_policy
from .scenario import (
    AuditWriter,
    ScenarioError,
    build_report,
    load_scenario,
    read_audit_log,
    render_report,
    summarize,
)
from .server import RunningServer, SyncServer
from .session import SessionClient, SessionConfig, SessionError
from .transport import InprocTransport, SimClock, TransportClosed, WebSocketTransport

EXIT_OK = 0
EXIT_UNSATISFIED = 1
EXIT_SCHEMA = 2
EXIT_TRANSPORT = 3


@click.group(context_settings={"auto_envvar_prefix": "EMBSYNC"})
def main() -> None:
    """Full-duplex state-sync runtime and PID tuning case study."""


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8731, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON file with session config overrides.")
def serve(host: str, port: int, config_path: str | None) -> None:
    """Start the execution backend at ws://HOST:PORT/sync."""
    config = SessionConfig()
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            config = SessionConfig.from_dict(json.load(fh))
    server = SyncServer(config=config)
    try:
        running = RunningServer(server, host=host, port=port)
    except OSError as exc:
        raise click.ClickException(f"cannot bind {host}:{port}: {exc}")
    click.echo(f"listening on {running.url} "
               f"(primitives: {', '.join(server.registry.names())})")
    stop = threading.Event()

    def _shutdown(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, _shutdown)
    signal.signal(signal.SIGTERM, _shutdown)
    try:
        while not stop.wait(0.2):
            pass
    finally:
        running.shutdown()
        click.echo("shut down")


@main.command()
@click.argument("scenario_path", type=click.Path())
@click.option("--transport", type=click.Choice(["inproc", "ws"]),
              default="inproc", show_default=True)
@click.option("--endpoint", default=None,
              help="WebSocket endpoint; omit to spin up a local server.")
@click.option("--report", "report_path", default="episode-report.json",
              show_default=True)
@click.option("--audit", "audit_path", default=None,
              help="Audit log path [default: <report>.audit.jsonl]")
@click.option("--seed", default=None, type=int,
              help="Scheduler seed for fuzzed parallel interleavings.")
def run(scenario_path: str, transport: str, endpoint: str | None,
        report_path: str, audit_path: str | None, seed: int | None) -> None:
    """Execute a scenario episode and write its report."""
    try:
        scenario = load_scenario(scenario_path)
        config = scenario.session_config()
    except ScenarioError as exc:
        click.echo(f"scenario error: {exc}", err=True)
        sys.exit(EXIT_SCHEMA)

    if audit_path is None:
        audit_path = report_path + ".audit.jsonl"
    audit = AuditWriter(audit_path)

    local_server: RunningServer | None = None
    try:
        if transport == "inproc":
            clock = SimClock()
            server = SyncServer(config=config, clock=clock, scheduler_seed=seed)
            client = SessionClient(lambda: InprocTransport(server, clock),
                                   config, clock=clock)
        else:
            if endpoint is None:
                server = SyncServer(config=config, scheduler_seed=seed)
                local_server = RunningServer(server, port=0)
                endpoint = local_server.url
            url = endpoint
            client = SessionClient(lambda: WebSocketTransport(url), config)

        client.audit_hook = audit
        try:
            client.connect(handshake_extra={"scenario": scenario.to_dict()})
        except (SessionError, TransportClosed, OSError) as exc:
            click.echo(f"transport failure: {exc}", err=True)
            sys.exit(EXIT_TRANSPORT)

        policy = make_policy(scenario.policy_id, scenario.to_dict())
        controller = Controller(
            client, policy,
            hotfix_budget=scenario.budgets.get("hotfix_budget", 3),
        )
        try:
            result = controller.run_episode(
                scenario.to_intent(),
                max_turns=scenario.budgets.get("max_turns", 5),
            )
        except (SessionError, TransportClosed) as exc:
            click.echo(f"transport failure mid-episode: {exc}", err=True)
            sys.exit(EXIT_TRANSPORT)
        finally:
            client.disconnect()
    finally:
        audit.close()
        if local_server is not None:
            local_server.shutdown()

    messages, truncated = read_audit_log(audit_path)
    report = build_report(messages, audit_path, truncated)
    with open(report_path, "wb") as fh:
        fh.write(render_report(report))
    click.echo(summarize(report))
    click.echo(f"report: {report_path}")
    sys.exit(EXIT_OK if result.success and report["success"] else EXIT_UNSATISFIED)


@main.command()
@click.argument("audit_log", type=click.Path(exists=True))
@click.option("--report", "report_path", default=None,
              help="Write the reconstructed report here as well.")
def replay(audit_log: str, report_path: str | None) -> None:
    """Rebuild an episode report from its audit log, offline."""
    try:
        messages, truncated = read_audit_log(audit_log)
        report = build_report(messages, audit_log, truncated)
    except ScenarioError as exc:
        click.echo(f"replay error: {exc}", err=True)
        sys.exit(EXIT_SCHEMA)
    body = render_report(report)
    if report_path:
        with open(report_path, "wb") as fh:
            fh.write(body)
    sys.stdout.buffer.write(body)
    if report["partial"]:
        click.echo("note: log truncated; report marked partial", err=True)


if __name__ == "__main__":
    main()
